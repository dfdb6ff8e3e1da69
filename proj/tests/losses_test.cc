#include <gtest/gtest.h>

#include <cmath>

#include "fedvirt/errors.h"
#include "fedvirt/losses.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

using Rows = std::vector<std::vector<double>>;

Tensor to_tensor(const Rows& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  const auto n = static_cast<std::int64_t>(rows.size());
  const auto d = static_cast<std::int64_t>(rows.empty() ? 0 : rows[0].size());
  return Tensor({n, d}, std::move(v));
}

Rows random_rows(Rng& r, int n, int d) {
  Rows rows(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& row : rows)
    for (double& x : row) x = r.normal();
  return rows;
}

// Direct transcription of the pooled supervised contrastive sum.
double supcon_oracle(const Rows& pooled, const Labels& labels, double temp) {
  const std::size_t n = pooled.size();
  Rows z = pooled;
  for (auto& row : z) {
    double norm = 0;
    for (double x : row) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : row) x /= norm;
  }
  auto dot = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < z[i].size(); ++k) s += z[i][k] * z[j][k];
    return s;
  };
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) denom += std::exp(dot(i, a) / temp);
    double inner = 0;
    int positives = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      inner += std::log(std::exp(dot(i, p) / temp) / denom);
      ++positives;
    }
    total += -inner / positives;
  }
  return total;
}

double mmd_oracle(const std::vector<Rows>& real, const std::vector<Rows>& virt) {
  double total = 0;
  for (std::size_t k = 0; k < real.size(); ++k) {
    const std::size_t d = real[k][0].size();
    for (std::size_t j = 0; j < d; ++j) {
      double mr = 0, mv = 0;
      for (const auto& row : real[k]) mr += row[j];
      for (const auto& row : virt[k]) mv += row[j];
      mr /= static_cast<double>(real[k].size());
      mv /= static_cast<double>(virt[k].size());
      total += (mr - mv) * (mr - mv);
    }
  }
  return total;
}

TEST(SupCon, MatchesBruteForceOracle) {
  Rng r(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 1 + static_cast<int>(r.below(8));
    const int classes = 1 + static_cast<int>(r.below(4));
    // Two of each class guarantees a positive for every row; the rest random.
    const int g = 2 + static_cast<int>(r.below(7));
    const int l = 2 * classes + static_cast<int>(r.below(static_cast<std::uint64_t>(16 - 2 * classes - g + 1)));
    Rows gf = random_rows(r, g, d);
    Rows lf = random_rows(r, l, d);
    Labels gl(static_cast<std::size_t>(g)), ll(static_cast<std::size_t>(l));
    for (int i = 0; i < l; ++i) ll[static_cast<std::size_t>(i)] = i < 2 * classes ? i / 2 : static_cast<std::int64_t>(r.below(classes));
    for (int i = 0; i < g; ++i) gl[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(r.below(classes));
    const double temp = trial % 2 ? 0.07 : r.uniform(0.1, 2.0);
    Rows pooled = gf;
    pooled.insert(pooled.end(), lf.begin(), lf.end());
    Labels pl = gl;
    pl.insert(pl.end(), ll.begin(), ll.end());
    const double want = supcon_oracle(pooled, pl, temp);
    const double got = supcon(to_tensor(gf), gl, to_tensor(lf), ll, temp).value.item();
    ASSERT_NEAR(got, want, 1e-9 * std::max(1.0, std::abs(want))) << "trial " << trial;
  }
}

TEST(SupCon, IdenticalEmbeddingsClosedForm) {
  for (int n : {2, 3, 7, 12, 16}) {
    const int g = n / 2, l = n - g;
    Rows gf(static_cast<std::size_t>(g), {0.3, -1.2, 2.0});
    Rows lf(static_cast<std::size_t>(l), {0.3, -1.2, 2.0});
    Labels gl(static_cast<std::size_t>(g), 1), ll(static_cast<std::size_t>(l), 1);
    const double got = supcon(to_tensor(gf), gl, to_tensor(lf), ll, 0.07).value.item();
    EXPECT_NEAR(got, n * std::log(n - 1.0), 1e-9) << n;
  }
}

TEST(SupCon, PermutationInvariant) {
  Rng r(3);
  Rows gf = random_rows(r, 4, 5), lf = random_rows(r, 4, 5);
  Labels gl = {0, 1, 0, 1}, ll = {1, 0, 1, 0};
  const double a = supcon(to_tensor(gf), gl, to_tensor(lf), ll, 0.5).value.item();
  std::swap(gf[0], gf[3]);
  std::swap(gl[0], gl[3]);
  std::swap(lf[1], lf[2]);
  std::swap(ll[1], ll[2]);
  const double b = supcon(to_tensor(gf), gl, to_tensor(lf), ll, 0.5).value.item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(SupCon, MissingPositiveNamesClass) {
  try {
    supcon(to_tensor({{1, 0}}), {3}, to_tensor({{0, 1}, {1, 1}}), {4, 4}, 0.1);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
  }
}

TEST(SupCon, StableAtSmallTemperature) {
  Rng r(5);
  Rows gf = random_rows(r, 4, 3), lf = random_rows(r, 4, 3);
  const double v = supcon(to_tensor(gf), {0, 1, 0, 1}, to_tensor(lf), {0, 1, 0, 1}, 1e-3).value.item();
  EXPECT_TRUE(std::isfinite(v));
}

TEST(Mmd, MatchesBruteForceOracle) {
  Rng r(12);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 1 + static_cast<int>(r.below(8));
    const int classes = 1 + static_cast<int>(r.below(4));
    std::vector<Rows> real, virt;
    std::vector<Tensor> rt, vt;
    for (int k = 0; k < classes; ++k) {
      real.push_back(random_rows(r, 1 + static_cast<int>(r.below(16)), d));
      virt.push_back(random_rows(r, 1 + static_cast<int>(r.below(16)), d));
      rt.push_back(to_tensor(real.back()));
      vt.push_back(to_tensor(virt.back()));
    }
    const double got = mmd_per_class(rt, vt).value.item();
    ASSERT_NEAR(got, mmd_oracle(real, virt), 1e-9) << "trial " << trial;
  }
}

TEST(Mmd, HandValues) {
  const Tensor a[] = {to_tensor({{1, 0}})};
  const Tensor b[] = {to_tensor({{0, 1}})};
  EXPECT_DOUBLE_EQ(mmd_per_class(a, b).value.item(), 2.0);
  EXPECT_EQ(mmd_per_class(a, a).value.item(), 0.0);
}

TEST(Mmd, AdditiveOverClasses) {
  Rng r(2);
  const Tensor r0 = to_tensor(random_rows(r, 3, 4)), v0 = to_tensor(random_rows(r, 2, 4));
  const Tensor r1 = to_tensor(random_rows(r, 5, 4)), v1 = to_tensor(random_rows(r, 4, 4));
  const Tensor ra[] = {r0}, va[] = {v0}, rb[] = {r1}, vb[] = {v1};
  const Tensor rab[] = {r0, r1}, vab[] = {v0, v1};
  EXPECT_NEAR(mmd_per_class(rab, vab).value.item(),
              mmd_per_class(ra, va).value.item() + mmd_per_class(rb, vb).value.item(), 1e-12);
}

TEST(Mmd, EmptyClassRejected) {
  const Tensor a[] = {Tensor::zeros({0, 2})};
  const Tensor b[] = {to_tensor({{0, 1}})};
  EXPECT_THROW(mmd_per_class(a, b), ContractError);
  EXPECT_THROW(mmd_per_class(b, a), ContractError);
}

TEST(CrossEntropy, UniformLogits) {
  LossValue v = cross_entropy(Tensor::zeros({3, 4}), {0, 1, 3});
  EXPECT_NEAR(v.value.item(), std::log(4.0), 1e-15);
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 4}), {0, 4}), ContractError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 4}), {0}), ContractError);
}

TEST(GradientDistance, HandValues) {
  NamedTensors a{{"w", Tensor({2}, {1, 0})}};
  NamedTensors b{{"w", Tensor({2}, {0, 1})}};
  EXPECT_NEAR(gradient_distance(a, b).value.item(), 1.0, 1e-15);
  EXPECT_NEAR(gradient_distance(a, a).value.item(), 0.0, 1e-15);
  NamedTensors scaled{{"w", Tensor({2}, {3, 0})}};
  EXPECT_NEAR(gradient_distance(a, scaled).value.item(), 0.0, 1e-15);
  NamedTensors zero{{"w", Tensor({2}, {0, 0})}};
  EXPECT_EQ(gradient_distance(zero, zero).value.item(), 0.0);
  EXPECT_EQ(gradient_distance(a, zero).value.item(), 1.0);
  NamedTensors other{{"v", Tensor({2}, {1, 0})}};
  EXPECT_THROW(gradient_distance(a, other), ContractError);
}

TEST(Prox, HandValue) {
  ModelParams p = mlp_init(2, 2, 2, 1);
  std::vector<Tensor> vals = values_of(p.all());
  for (Tensor& t : vals) t = add_scalar(t, 1.0);
  ModelParams q = with_values(p, vals);
  std::int64_t n = 0;
  for (const auto& t : p.all()) n += t.value.numel();
  EXPECT_NEAR(prox_term(q, p, 0.5).value.item(), 0.25 * static_cast<double>(n), 1e-12);
  EXPECT_EQ(prox_term(p, p, 0.5).value.item(), 0.0);
}

TEST(TotalLoss, IsCePlusLambdaCon) {
  ModelParams m = mlp_init(6, 3, 5, 2);
  Rng r(9);
  Tensor local = to_tensor(random_rows(r, 6, 6));
  Tensor global = to_tensor(random_rows(r, 6, 6));
  Labels y = {0, 1, 2, 0, 1, 2};
  LossValue t = total_loss(m, local, y, global, y, {.lambda = 2.0, .temperature = 0.2});
  Tensor both[] = {local, global};
  Labels yy = y;
  yy.insert(yy.end(), y.begin(), y.end());
  const double ce = cross_entropy(predict_logits(m, concat0(both)), yy).value.item();
  const double con = supcon(extract_features(m, global), y, extract_features(m, local), y, 0.2).value.item();
  EXPECT_NEAR(t.breakdown.at("ce"), ce, 1e-12);
  EXPECT_NEAR(t.breakdown.at("con"), con, 1e-12);
  EXPECT_NEAR(t.value.item(), ce + 2.0 * con, 1e-12);
  LossValue no_con = total_loss(m, local, y, global, y, {.lambda = 0.0});
  EXPECT_EQ(no_con.breakdown.count("con"), 0u);
}

}  // namespace
}  // namespace fedvirt
