#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fedvirt/errors.h"
#include "fedvirt/ops.h"
#include "fedvirt/parallel.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

Tensor randn(const Shape& s, std::uint64_t seed) {
  Rng r(seed);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
  for (double& x : v) x = r.normal();
  return Tensor(s, std::move(v));
}

TEST(Tensor, SumOfSquaresGradient) {
  Record rec;
  RecordScope scope(rec);
  Tensor x = rec.leaf(Tensor({3}, {1, 2, 3}));
  Tensor loss = sum(mul(x, x));
  const Tensor wrt[] = {x};
  Tensor g = backward(loss, wrt)[0];
  EXPECT_EQ(g.at(0), 2.0);
  EXPECT_EQ(g.at(1), 4.0);
  EXPECT_EQ(g.at(2), 6.0);
}

TEST(Tensor, ConstructorChecksCount) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ContractError);
  EXPECT_EQ(Tensor::zeros({2, 3}).numel(), 6);
  EXPECT_EQ(Tensor::scalar(4).item(), 4.0);
  EXPECT_THROW(Tensor::zeros({2}).item(), ContractError);
}

TEST(Tensor, CopiesShareAndCloneDoesNot) {
  Tensor a({2}, {1, 2});
  Tensor b = a;
  Tensor c = a.clone();
  b.mutable_data()[0] = 9;  // copy-on-write: a keeps its value
  EXPECT_EQ(a.at(0), 1.0);
  EXPECT_EQ(b.at(0), 9.0);
  EXPECT_EQ(c.at(0), 1.0);
}

TEST(Ops, ShapeMismatchNamesTheOp) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ContractError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({3, 1, 3, 3}), 1, 1), ContractError);
}

TEST(Ops, NonFiniteOutputThrows) {
  EXPECT_THROW(log(Tensor({1}, {-1.0})), NumericError);
  EXPECT_THROW(div(Tensor({1}, {1.0}), Tensor({1}, {0.0})), NumericError);
  EXPECT_THROW(exp(Tensor({1}, {1e6})), NumericError);
}

TEST(Ops, ForwardValues) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  Tensor m = matmul(a, b);
  EXPECT_EQ(m.at(0), 19.0);
  EXPECT_EQ(m.at(3), 50.0);
  EXPECT_EQ(sum(a).item(), 10.0);
  EXPECT_EQ(mean(a).item(), 2.5);
  Tensor ls = log_softmax(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_NEAR(ls.at(0), -std::log(2.0), 1e-15);
  Tensor n = l2_normalize(Tensor({1, 2}, {3, 4}));
  EXPECT_NEAR(n.at(0), 0.6, 1e-15);
  EXPECT_EQ(relu(Tensor({2}, {-1, 2})).at(0), 0.0);
  Tensor p = avg_pool2d(Tensor({1, 1, 2, 2}, {1, 2, 3, 6}), 2);
  EXPECT_EQ(p.item(), 3.0);
}

TEST(Ops, LogSoftmaxStableForLargeLogits) {
  Tensor ls = log_softmax(Tensor({1, 2}, {1000.0, 0.0}));
  EXPECT_NEAR(ls.at(0), 0.0, 1e-12);
  EXPECT_NEAR(ls.at(1), -1000.0, 1e-9);
}

TEST(Ops, ConvMatchesDirectLoop) {
  Tensor x = randn({2, 3, 6, 6}, 1);
  Tensor w = randn({4, 3, 3, 3}, 2);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Tensor y = conv2d(x, w, stride, pad);
      const std::int64_t ho = y.dim(2), wo = y.dim(3);
      for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t o = 0; o < 4; ++o)
          for (std::int64_t i = 0; i < ho; ++i)
            for (std::int64_t j = 0; j < wo; ++j) {
              double acc = 0;
              for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t ki = 0; ki < 3; ++ki)
                  for (std::int64_t kj = 0; kj < 3; ++kj) {
                    const std::int64_t r = i * stride - pad + ki, q = j * stride - pad + kj;
                    if (r < 0 || r >= 6 || q < 0 || q >= 6) continue;
                    acc += x.at(((n * 3 + c) * 6 + r) * 6 + q) * w.at(((o * 3 + c) * 3 + ki) * 3 + kj);
                  }
              EXPECT_NEAR(y.at(((n * 4 + o) * ho + i) * wo + j), acc, 1e-12);
            }
    }
  }
}

TEST(Ops, GroupNormNormalizesEachBlock) {
  Tensor x = randn({2, 4, 3, 3}, 3);
  Tensor y = group_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 2, 1e-5);
  for (std::int64_t n = 0; n < 2; ++n) {
    for (std::int64_t g = 0; g < 2; ++g) {
      double s = 0, s2 = 0;
      for (std::int64_t k = 0; k < 18; ++k) {
        const double v = y.at(n * 36 + g * 18 + k);
        s += v;
        s2 += v * v;
      }
      EXPECT_NEAR(s / 18, 0.0, 1e-12);
      EXPECT_NEAR(s2 / 18, 1.0, 1e-3);
    }
  }
}

TEST(Backward, UnusedLeafGetsZeros) {
  Record rec;
  RecordScope scope(rec);
  Tensor x = rec.leaf(Tensor({2}, {1, 2}));
  Tensor y = rec.leaf(Tensor({3}, {1, 2, 3}));
  const Tensor wrt[] = {x, y};
  auto g = backward(sum(x), wrt);
  EXPECT_EQ(g[1].shape(), Shape({3}));
  EXPECT_EQ(g[1].at(2), 0.0);
}

TEST(Backward, SecondDerivativeWithCreateGraph) {
  Record rec;
  RecordScope scope(rec);
  Tensor x = rec.leaf(Tensor({1}, {2.0}));
  Tensor y = sum(pow(x, 3.0));
  const Tensor wrt[] = {x};
  Tensor dy = backward(y, wrt, {.create_graph = true})[0];
  EXPECT_NEAR(dy.at(0), 12.0, 1e-12);
  Tensor d2 = backward(sum(dy), wrt)[0];
  EXPECT_NEAR(d2.at(0), 12.0, 1e-12);
}

TEST(Backward, ThirdDerivativeThroughGroupNormInputGradIsRejected) {
  Record rec;
  RecordScope scope(rec);
  Tensor x = rec.leaf(randn({1, 2, 2, 2}, 4));
  Tensor g = randn({1, 2, 2, 2}, 5);
  Tensor r = group_norm_input_grad(x, Tensor::full({2}, 1.0), g, 1, 1e-5);
  const Tensor wrt[] = {x};
  EXPECT_THROW(backward(sum(mul(r, r)), wrt, {.create_graph = true}), ContractError);
  EXPECT_NO_THROW(backward(sum(mul(r, r)), wrt));
}

TEST(Backward, NoGradScopeRecordsNothing) {
  Record rec;
  RecordScope scope(rec);
  Tensor x = rec.leaf(Tensor({2}, {1, 2}));
  const std::size_t before = rec.size();
  {
    NoGradScope ng;
    Tensor y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(rec.size(), before);
}

TEST(Backward, LeafFromOtherRecordRejected) {
  Record a;
  Record b;
  Tensor xa;
  {
    RecordScope s(a);
    xa = a.leaf(Tensor({1}, {1.0}));
  }
  RecordScope s(b);
  Tensor xb = b.leaf(Tensor({1}, {1.0}));
  const Tensor wrt[] = {xa};
  EXPECT_THROW(backward(sum(xb), wrt), ContractError);
}

TEST(Backward, BitReproducibleAcrossThreadCaps) {
  Tensor x0 = randn({8, 3, 8, 8}, 6);
  Tensor w0 = randn({16, 3, 3, 3}, 7);
  auto grads = [&] {
    Record rec;
    RecordScope scope(rec);
    Tensor w = rec.leaf(w0);
    Tensor y = relu(conv2d(x0, w, 1, 1));
    const Tensor wrt[] = {w};
    return backward(sum(mul(y, y)), wrt)[0];
  };
  Tensor g1, g4;
  {
    ThreadLimit one(1);
    g1 = grads();
  }
  {
    ThreadLimit four(4);
    g4 = grads();
  }
  ASSERT_EQ(g1.numel(), g4.numel());
  for (std::int64_t i = 0; i < g1.numel(); ++i) ASSERT_EQ(g1.at(i), g4.at(i));
}

TEST(GradCheck, DetectsWrongGradient) {
  // A primitive whose VJP is deliberately off by a factor of two.
  auto bad = [](const Tensor& x) {
    Tensor out = Tensor(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    for (double& v : out.mutable_data()) v = v * v;
    return sum(record_op("bad_square", {x}, out, [](const VjpContext& c) {
      return std::vector<Tensor>{mul(c.grad, c.inputs[0])};
    }));
  };
  GradCheckReport r = grad_check(bad, randn({4}, 8), 1e-5, 1e-4);
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-6);
}

TEST(GradCheck, ExcludesReluKinks) {
  auto f = [](const Tensor& x) { return sum(relu(x)); };
  GradCheckReport r = grad_check(f, Tensor({3}, {1.0, 1e-7, -2.0}), 1e-5, 1e-4);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.kink_coords, 1);
}

}  // namespace
}  // namespace fedvirt
