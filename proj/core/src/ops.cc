#include "fedvirt/ops.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "fedvirt/errors.h"
#include "fedvirt/parallel.h"
#include "gemm.h"

namespace fedvirt {
namespace {

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw ContractError(std::string(op) + ": " + msg);
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) fail(op, "undefined input tensor");
}

void require_rank(const char* op, const Tensor& t, int rank) {
  require_defined(op, t);
  if (t.rank() != rank) {
    fail(op, "expected rank " + std::to_string(rank) + ", got shape " +
                 shape_string(t.shape()));
  }
}

std::vector<double> buffer(std::int64_t n, double v = 0.0) {
  return std::vector<double>(static_cast<std::size_t>(n), v);
}

// Sums g down to `shape` when the forward op broadcast a rank-0 operand.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (shape.empty() && g.rank() != 0) return sum(g);
  return g;
}

std::vector<Tensor> none(std::size_t n) { return std::vector<Tensor>(n); }

enum class BinOp { kAdd, kSub, kMul, kDiv };

const char* bin_name(BinOp op) {
  switch (op) {
    case BinOp::kAdd: return "add";
    case BinOp::kSub: return "sub";
    case BinOp::kMul: return "mul";
    case BinOp::kDiv: return "div";
  }
  return "?";
}

template <typename F>
void elementwise(std::span<const double> a, bool a_scalar, std::span<const double> b,
                 bool b_scalar, std::vector<double>& out, F f) {
  const std::size_t n = out.size();
  double* o = out.data();
  const double* x = a.data();
  const double* y = b.data();
  if (a_scalar && !b_scalar) {
    const double xv = x[0];
    for (std::size_t i = 0; i < n; ++i) o[i] = f(xv, y[i]);
  } else if (b_scalar && !a_scalar) {
    const double yv = y[0];
    for (std::size_t i = 0; i < n; ++i) o[i] = f(x[i], yv);
  } else if (a_scalar && b_scalar) {
    if (n > 0) o[0] = f(x[0], y[0]);
  } else {
    for (std::size_t i = 0; i < n; ++i) o[i] = f(x[i], y[i]);
  }
}

Tensor binary(BinOp op, const Tensor& a, const Tensor& b) {
  const char* name = bin_name(op);
  require_defined(name, a);
  require_defined(name, b);
  const bool a_scalar = a.rank() == 0;
  const bool b_scalar = b.rank() == 0;
  if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
    fail(name, "shape mismatch " + shape_string(a.shape()) + " vs " +
                   shape_string(b.shape()));
  }
  const Shape& shape = a_scalar ? b.shape() : a.shape();
  const std::int64_t n = shape_numel(shape);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out = buffer(n);
  switch (op) {
    case BinOp::kAdd: elementwise(ad, a_scalar, bd, b_scalar, out, std::plus<>()); break;
    case BinOp::kSub: elementwise(ad, a_scalar, bd, b_scalar, out, std::minus<>()); break;
    case BinOp::kMul: elementwise(ad, a_scalar, bd, b_scalar, out, std::multiplies<>()); break;
    case BinOp::kDiv: elementwise(ad, a_scalar, bd, b_scalar, out, std::divides<>()); break;
  }
  return record_op(name, {a, b}, Tensor(shape, std::move(out)),
                   [op](const VjpContext& c) {
    const Tensor& a = c.inputs[0];
    const Tensor& b = c.inputs[1];
    std::vector<Tensor> r = none(2);
    switch (op) {
      case BinOp::kAdd:
        if (c.needs[0]) r[0] = reduce_to(c.grad, a.shape());
        if (c.needs[1]) r[1] = reduce_to(c.grad, b.shape());
        break;
      case BinOp::kSub:
        if (c.needs[0]) r[0] = reduce_to(c.grad, a.shape());
        if (c.needs[1]) r[1] = reduce_to(scale(c.grad, -1.0), b.shape());
        break;
      case BinOp::kMul:
        if (c.needs[0]) r[0] = reduce_to(mul(c.grad, b), a.shape());
        if (c.needs[1]) r[1] = reduce_to(mul(c.grad, a), b.shape());
        break;
      case BinOp::kDiv:
        if (c.needs[0]) r[0] = reduce_to(div(c.grad, b), a.shape());
        if (c.needs[1]) {
          r[1] = reduce_to(scale(div(mul(c.grad, c.output), b), -1.0), b.shape());
        }
        break;
    }
    return r;
  });
}

template <typename F>
Tensor map_values(const Tensor& x, F f) {
  const std::size_t n = static_cast<std::size_t>(x.numel());
  std::vector<double> out = buffer(x.numel());
  const double* xd = x.data().data();
  double* o = out.data();
  for (std::size_t i = 0; i < n; ++i) o[i] = f(xd[i]);
  return Tensor(x.shape(), std::move(out));
}

struct ConvGeom {
  std::int64_t n, c, h, w, o, k, ho, wo;
  int stride, pad;
  std::int64_t pixels() const { return n * ho * wo; }
  std::int64_t patch() const { return c * k * k; }
};

ConvGeom conv_geom(const char* op, const Shape& xs, const Shape& ws, int stride,
                   int pad) {
  if (xs.size() != 4 || ws.size() != 4) {
    fail(op, "expected x [N,C,H,W] and w [O,C,k,k], got " + shape_string(xs) +
                 " and " + shape_string(ws));
  }
  if (ws[1] != xs[1] || ws[2] != ws[3]) {
    fail(op, "kernel " + shape_string(ws) + " does not fit input " + shape_string(xs));
  }
  if (stride < 1 || pad < 0) fail(op, "stride must be >= 1 and pad >= 0");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], 0, 0, stride, pad};
  const std::int64_t hp = g.h + 2 * pad - g.k;
  const std::int64_t wp = g.w + 2 * pad - g.k;
  if (hp < 0 || wp < 0) {
    fail(op, "kernel " + shape_string(ws) + " larger than padded input " + shape_string(xs));
  }
  g.ho = hp / stride + 1;
  g.wo = wp / stride + 1;
  return g;
}

// cols[(c,kh,kw), (oh,ow)] = x[c, oh*s - p + kh, ow*s - p + kw] for one image.
void im2col(const ConvGeom& g, const double* x, double* cols) {
  const std::int64_t hw = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.c; ++c) {
    const double* plane = x + c * g.h * g.w;
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        double* dst = cols + ((c * g.k + kh) * g.k + kw) * hw;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + kh;
          double* out = dst + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* src = plane + ih * g.w;
          if (g.stride == 1) {
            // Valid columns form one contiguous run.
            const std::int64_t lo = std::clamp<std::int64_t>(g.pad - kw, 0, g.wo);
            const std::int64_t hi = std::clamp<std::int64_t>(g.w + g.pad - kw, lo, g.wo);
            std::fill(out, out + lo, 0.0);
            std::copy(src + lo - g.pad + kw, src + hi - g.pad + kw, out + lo);
            std::fill(out + hi, out + g.wo, 0.0);
            continue;
          }
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kw;
            out[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates patches back into one image, in a fixed order.
void col2im(const ConvGeom& g, const double* cols, double* x) {
  const std::int64_t hw = g.ho * g.wo;
  std::fill(x, x + g.c * g.h * g.w, 0.0);
  for (std::int64_t c = 0; c < g.c; ++c) {
    double* plane = x + c * g.h * g.w;
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        const double* src = cols + ((c * g.k + kh) * g.k + kw) * hw;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.h) continue;
          double* dst = plane + ih * g.w;
          const double* in = src + oh * g.wo;
          if (g.stride == 1) {
            const std::int64_t lo = std::clamp<std::int64_t>(g.pad - kw, 0, g.wo);
            const std::int64_t hi = std::clamp<std::int64_t>(g.w + g.pad - kw, lo, g.wo);
            double* d = dst - g.pad + kw;
            for (std::int64_t ow = lo; ow < hi; ++ow) d[ow] += in[ow];
            continue;
          }
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.w) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

void check_grad_shape(const char* op, const ConvGeom& g, const Tensor& grad) {
  const Shape want{g.n, g.o, g.ho, g.wo};
  if (grad.shape() != want) {
    fail(op, "output gradient " + shape_string(grad.shape()) + " does not match " +
                 shape_string(want));
  }
}

// Block layout of x [N,C,...] for groups: n * groups blocks of `len` values.
struct GroupGeom {
  std::int64_t blocks, len, channels, spatial;
};

GroupGeom group_geom(const char* op, const Tensor& x, int groups) {
  require_defined(op, x);
  if (x.rank() < 2) fail(op, "expected rank >= 2, got " + shape_string(x.shape()));
  const std::int64_t c = x.dim(1);
  if (groups < 1 || c % groups != 0) {
    fail(op, std::to_string(groups) + " groups do not divide " + std::to_string(c) +
                 " channels");
  }
  const std::int64_t spatial = x.numel() / std::max<std::int64_t>(1, x.dim(0) * c);
  return {x.dim(0) * groups, (c / groups) * spatial, c, spatial};
}

// Numeric group-norm backward, used when the gradient itself is not recorded.
std::vector<Tensor> group_norm_backward(const Tensor& x, const Tensor& gamma,
                                        const Tensor& grad, int groups, double eps,
                                        std::span<const char> needs) {
  const GroupGeom gg = group_geom("group_norm", x, groups);
  const std::int64_t per_group = gg.channels / groups;
  auto xd = x.data();
  auto gd = grad.data();
  auto gam = gamma.data();
  std::vector<double> dx = buffer(needs[0] ? x.numel() : 0);
  std::vector<double> dgamma = buffer(gg.channels);
  std::vector<double> dbeta = buffer(gg.channels);
  std::vector<double> xhat(static_cast<std::size_t>(gg.len));
  std::vector<double> gs(static_cast<std::size_t>(gg.len));
  const auto len = static_cast<double>(gg.len);
  for (std::int64_t b = 0; b < gg.blocks; ++b) {
    const double* p = xd.data() + b * gg.len;
    const double* g = gd.data() + b * gg.len;
    double s = 0.0;
    for (std::int64_t j = 0; j < gg.len; ++j) s += p[j];
    const double m = s / len;
    double v = 0.0;
    for (std::int64_t j = 0; j < gg.len; ++j) v += (p[j] - m) * (p[j] - m);
    const double rstd = 1.0 / std::sqrt(v / len + eps);
    const std::int64_t c0 = (b % groups) * per_group;
    double m1 = 0.0, m2 = 0.0;
    for (std::int64_t ci = 0; ci < per_group; ++ci) {
      const std::int64_t ch = c0 + ci;
      double dg = 0.0, db = 0.0;
      for (std::int64_t j = ci * gg.spatial; j < (ci + 1) * gg.spatial; ++j) {
        xhat[j] = (p[j] - m) * rstd;
        gs[j] = g[j] * gam[ch];
        m1 += gs[j];
        m2 += gs[j] * xhat[j];
        dg += g[j] * xhat[j];
        db += g[j];
      }
      dgamma[ch] += dg;
      dbeta[ch] += db;
    }
    m1 /= len;
    m2 /= len;
    if (needs[0]) {
      double* out = dx.data() + b * gg.len;
      for (std::int64_t j = 0; j < gg.len; ++j) out[j] = rstd * (gs[j] - m1 - xhat[j] * m2);
    }
  }
  std::vector<Tensor> r = none(3);
  if (needs[0]) r[0] = Tensor(x.shape(), std::move(dx));
  if (needs[1]) r[1] = Tensor({gg.channels}, std::move(dgamma));
  if (needs[2]) r[2] = Tensor({gg.channels}, std::move(dbeta));
  return r;
}

// d<group_norm_input_grad(x, gamma, g), u>/dx. Per block, with r the inverse
// std, xh the normalized input, h = gamma * g and means taken over the block:
//   -r^2 (xh S + mean(u xh) (h - mean(h)) + mean(h xh) (u - mean(u))
//         - 2 mean(h xh) mean(u xh) xh),
//   S = mean(u h) - mean(h) mean(u) - mean(h xh) mean(u xh).
Tensor group_norm_second_order(const Tensor& x, const Tensor& gamma, const Tensor& g,
                               const Tensor& u, int groups, double eps) {
  const GroupGeom gg = group_geom("group_norm_input_grad", x, groups);
  const std::int64_t per_group = gg.channels / groups;
  auto xd = x.data();
  auto gd = g.data();
  auto ud = u.data();
  auto gam = gamma.data();
  std::vector<double> out = buffer(x.numel());
  std::vector<double> xhat(static_cast<std::size_t>(gg.len));
  std::vector<double> h(static_cast<std::size_t>(gg.len));
  const auto len = static_cast<double>(gg.len);
  for (std::int64_t blk = 0; blk < gg.blocks; ++blk) {
    const double* p = xd.data() + blk * gg.len;
    const double* gp = gd.data() + blk * gg.len;
    const double* up = ud.data() + blk * gg.len;
    double s = 0.0;
    for (std::int64_t j = 0; j < gg.len; ++j) s += p[j];
    const double m = s / len;
    double v = 0.0;
    for (std::int64_t j = 0; j < gg.len; ++j) v += (p[j] - m) * (p[j] - m);
    const double r = 1.0 / std::sqrt(v / len + eps);
    const std::int64_t c0 = (blk % groups) * per_group;
    double sh = 0.0, shx = 0.0, su = 0.0, sux = 0.0, suh = 0.0;
    for (std::int64_t ci = 0; ci < per_group; ++ci) {
      const double gc = gam[c0 + ci];
      for (std::int64_t j = ci * gg.spatial; j < (ci + 1) * gg.spatial; ++j) {
        xhat[j] = (p[j] - m) * r;
        h[j] = gc * gp[j];
        sh += h[j];
        shx += h[j] * xhat[j];
        su += up[j];
        sux += up[j] * xhat[j];
        suh += up[j] * h[j];
      }
    }
    const double a = sh / len, b = shx / len, mu = su / len, mv = sux / len;
    const double sn = suh / len - a * mu - b * mv;
    const double r2 = r * r;
    double* o = out.data() + blk * gg.len;
    for (std::int64_t j = 0; j < gg.len; ++j) {
      o[j] = -r2 * (xhat[j] * sn + mv * (h[j] - a) + b * (up[j] - mu) - 2.0 * b * mv * xhat[j]);
    }
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinOp::kDiv, a, b); }

Tensor scale(const Tensor& x, double s) {
  require_defined("scale", x);
  return record_op("scale", {x}, map_values(x, [s](double v) { return v * s; }),
                   [s](const VjpContext& c) {
                     return std::vector<Tensor>{scale(c.grad, s)};
                   });
}

Tensor add_scalar(const Tensor& x, double s) {
  require_defined("add_scalar", x);
  return record_op("add_scalar", {x}, map_values(x, [s](double v) { return v + s; }),
                   [](const VjpContext& c) { return std::vector<Tensor>{c.grad}; });
}

Tensor relu(const Tensor& x) {
  require_defined("relu", x);
  Tensor mask = map_values(x, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
  if (BranchMonitor::active()) {
    std::uint64_t h = 1469598103934665603ULL;
    for (double m : mask.data()) h = (h ^ (m > 0.0 ? 1u : 2u)) * 1099511628211ULL;
    BranchMonitor::note(h);
  }
  return record_op("relu", {x}, map_values(x, [](double v) { return v > 0.0 ? v : 0.0; }),
                   [mask](const VjpContext& c) {
                     return std::vector<Tensor>{mul(c.grad, mask)};
                   });
}

Tensor exp(const Tensor& x) {
  require_defined("exp", x);
  return record_op("exp", {x}, map_values(x, [](double v) { return std::exp(v); }),
                   [](const VjpContext& c) {
                     return std::vector<Tensor>{mul(c.grad, c.output)};
                   });
}

Tensor log(const Tensor& x) {
  require_defined("log", x);
  return record_op("log", {x}, map_values(x, [](double v) { return std::log(v); }),
                   [](const VjpContext& c) {
                     return std::vector<Tensor>{div(c.grad, c.inputs[0])};
                   });
}

Tensor pow(const Tensor& x, double p) {
  require_defined("pow", x);
  // Square roots go through std::sqrt so that sqrt(s * s) == s exactly.
  Tensor out = p == 0.5    ? map_values(x, [](double v) { return std::sqrt(v); })
               : p == -0.5 ? map_values(x, [](double v) { return 1.0 / std::sqrt(v); })
                           : map_values(x, [p](double v) { return std::pow(v, p); });
  return record_op("pow", {x}, std::move(out),
                   [p](const VjpContext& c) {
                     if (p == 0.0) return std::vector<Tensor>{scale(c.grad, 0.0)};
                     return std::vector<Tensor>{
                         mul(c.grad, scale(pow(c.inputs[0], p - 1.0), p))};
                   });
}

Tensor sum(const Tensor& x) {
  require_defined("sum", x);
  double s = 0.0;
  for (double v : x.data()) s += v;
  return record_op("sum", {x}, Tensor::scalar(s), [](const VjpContext& c) {
    return std::vector<Tensor>{expand(c.grad, c.inputs[0].shape())};
  });
}

Tensor mean(const Tensor& x) {
  require_defined("mean", x);
  if (x.numel() == 0) fail("mean", "empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const auto n = static_cast<double>(x.numel());
  return record_op("mean", {x}, Tensor::scalar(s / n), [n](const VjpContext& c) {
    return std::vector<Tensor>{scale(expand(c.grad, c.inputs[0].shape()), 1.0 / n)};
  });
}

Tensor expand(const Tensor& scalar, const Shape& shape) {
  require_rank("expand", scalar, 0);
  return record_op("expand", {scalar}, Tensor::full(shape, scalar.item()),
                   [](const VjpContext& c) { return std::vector<Tensor>{sum(c.grad)}; });
}

Tensor row_sum(const Tensor& x) {
  require_rank("row_sum", x, 2);
  const std::int64_t n = x.dim(0), d = x.dim(1);
  auto xd = x.data();
  std::vector<double> out = buffer(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += xd[i * d + j];
    out[i] = s;
  }
  return record_op("row_sum", {x}, Tensor({n}, std::move(out)), [d](const VjpContext& c) {
    return std::vector<Tensor>{row_broadcast(c.grad, d)};
  });
}

Tensor row_broadcast(const Tensor& v, std::int64_t d) {
  require_rank("row_broadcast", v, 1);
  if (d < 0) fail("row_broadcast", "negative width");
  const std::int64_t n = v.dim(0);
  auto vd = v.data();
  std::vector<double> out = buffer(n * d);
  for (std::int64_t i = 0; i < n; ++i) {
    std::fill(out.begin() + i * d, out.begin() + (i + 1) * d, vd[i]);
  }
  return record_op("row_broadcast", {v}, Tensor({n, d}, std::move(out)),
                   [](const VjpContext& c) { return std::vector<Tensor>{row_sum(c.grad)}; });
}

Tensor l2_normalize(const Tensor& x) {
  require_rank("l2_normalize", x, 2);
  // The tiny offset only matters for an all-zero row, which maps to zero.
  Tensor inv = pow(add_scalar(row_sum(mul(x, x)), 1e-24), -0.5);
  return mul(x, row_broadcast(inv, x.dim(1)));
}

Tensor log_softmax(const Tensor& x) {
  require_rank("log_softmax", x, 2);
  const std::int64_t n = x.dim(0), k = x.dim(1);
  if (k == 0 && n > 0) fail("log_softmax", "zero classes");
  auto xd = x.data();
  std::vector<double> out = buffer(n * k);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = xd.data() + i * k;
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::int64_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  return record_op("log_softmax", {x}, Tensor({n, k}, std::move(out)),
                   [k](const VjpContext& c) {
                     Tensor soft = exp(c.output);
                     return std::vector<Tensor>{
                         sub(c.grad, mul(soft, row_broadcast(row_sum(c.grad), k)))};
                   });
}

Tensor gather(const Tensor& x, const Labels& labels) {
  require_rank("gather", x, 2);
  const std::int64_t n = x.dim(0), k = x.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    fail("gather", std::to_string(labels.size()) + " labels for " +
                       shape_string(x.shape()));
  }
  auto xd = x.data();
  std::vector<double> out = buffer(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t l = labels[static_cast<std::size_t>(i)];
    if (l < 0 || l >= k) {
      fail("gather", "label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
    out[i] = xd[i * k + l];
  }
  return record_op("gather", {x}, Tensor({n}, std::move(out)),
                   [labels, k](const VjpContext& c) {
                     return std::vector<Tensor>{scatter(c.grad, labels, k)};
                   });
}

Tensor scatter(const Tensor& v, const Labels& labels, std::int64_t k) {
  require_rank("scatter", v, 1);
  const std::int64_t n = v.dim(0);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    fail("scatter", std::to_string(labels.size()) + " labels for " +
                        shape_string(v.shape()));
  }
  auto vd = v.data();
  std::vector<double> out = buffer(n * k);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t l = labels[static_cast<std::size_t>(i)];
    if (l < 0 || l >= k) {
      fail("scatter", "label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
    out[i * k + l] = vd[i];
  }
  return record_op("scatter", {v}, Tensor({n, k}, std::move(out)),
                   [labels](const VjpContext& c) {
                     return std::vector<Tensor>{gather(c.grad, labels)};
                   });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    fail("matmul", "inner extents differ: " + shape_string(a.shape()) + " x " +
                       shape_string(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out = buffer(m * n);
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return record_op("matmul", {a, b}, Tensor({m, n}, std::move(out)),
                   [](const VjpContext& c) {
                     std::vector<Tensor> r = none(2);
                     if (c.needs[0]) r[0] = matmul(c.grad, transpose(c.inputs[1]));
                     if (c.needs[1]) r[1] = matmul(transpose(c.inputs[0]), c.grad);
                     return r;
                   });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  const std::int64_t m = x.dim(0), n = x.dim(1);
  auto xd = x.data();
  std::vector<double> out = buffer(m * n);
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
  }
  return record_op("transpose", {x}, Tensor({n, m}, std::move(out)),
                   [](const VjpContext& c) { return std::vector<Tensor>{transpose(c.grad)}; });
}

Tensor channel_broadcast(const Tensor& b, const Shape& shape) {
  require_rank("channel_broadcast", b, 1);
  if (shape.size() < 2 || shape[1] != b.dim(0)) {
    fail("channel_broadcast", "cannot broadcast " + shape_string(b.shape()) +
                                  " along axis 1 of " + shape_string(shape));
  }
  const std::int64_t n = shape[0], ch = shape[1];
  const std::int64_t inner = n * ch == 0 ? 0 : shape_numel(shape) / (n * ch);
  auto bd = b.data();
  std::vector<double> out = buffer(shape_numel(shape));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < ch; ++c) {
      auto first = out.begin() + (i * ch + c) * inner;
      std::fill(first, first + inner, bd[c]);
    }
  }
  return record_op("channel_broadcast", {b}, Tensor(shape, std::move(out)),
                   [](const VjpContext& c) { return std::vector<Tensor>{channel_sum(c.grad)}; });
}

Tensor channel_sum(const Tensor& x) {
  require_defined("channel_sum", x);
  if (x.rank() < 2) fail("channel_sum", "expected rank >= 2, got " + shape_string(x.shape()));
  const std::int64_t n = x.dim(0), ch = x.dim(1);
  const std::int64_t inner = n * ch == 0 ? 0 : x.numel() / (n * ch);
  auto xd = x.data();
  std::vector<double> out = buffer(ch);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const double* p = xd.data() + (i * ch + c) * inner;
      for (std::int64_t j = 0; j < inner; ++j) out[c] += p[j];
    }
  }
  return record_op("channel_sum", {x}, Tensor({ch}, std::move(out)),
                   [](const VjpContext& c) {
                     return std::vector<Tensor>{channel_broadcast(c.grad, c.inputs[0].shape())};
                   });
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  require_defined("conv2d", x);
  require_defined("conv2d", w);
  const ConvGeom g = conv_geom("conv2d", x.shape(), w.shape(), stride, pad);
  std::vector<double> out = buffer(g.n * g.o * g.ho * g.wo);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t ni) {
    const auto n = static_cast<std::int64_t>(ni);
    std::vector<double> cols(static_cast<std::size_t>(g.patch() * g.ho * g.wo));
    im2col(g, xd + n * g.c * g.h * g.w, cols.data());
    detail::gemm(false, false, g.o, g.ho * g.wo, g.patch(), wd, cols.data(),
                 out.data() + n * g.o * g.ho * g.wo, false);
  });
  Tensor result({g.n, g.o, g.ho, g.wo}, std::move(out));
  return record_op("conv2d", {x, w}, std::move(result), [stride, pad](const VjpContext& c) {
    const Tensor& x = c.inputs[0];
    const Tensor& w = c.inputs[1];
    std::vector<Tensor> r = none(2);
    if (c.needs[0]) r[0] = conv2d_input_grad(c.grad, w, x.shape(), stride, pad);
    if (c.needs[1]) r[1] = conv2d_weight_grad(x, c.grad, w.shape(), stride, pad);
    return r;
  });
}

Tensor conv2d_input_grad(const Tensor& grad, const Tensor& w, const Shape& x_shape,
                         int stride, int pad) {
  require_defined("conv2d_input_grad", grad);
  require_defined("conv2d_input_grad", w);
  const ConvGeom g = conv_geom("conv2d_input_grad", x_shape, w.shape(), stride, pad);
  check_grad_shape("conv2d_input_grad", g, grad);
  std::vector<double> dx = buffer(g.n * g.c * g.h * g.w);
  const double* gd = grad.data().data();
  const double* wd = w.data().data();
  parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t ni) {
    const auto n = static_cast<std::int64_t>(ni);
    std::vector<double> cols(static_cast<std::size_t>(g.patch() * g.ho * g.wo));
    detail::gemm(true, false, g.patch(), g.ho * g.wo, g.o, wd,
                 gd + n * g.o * g.ho * g.wo, cols.data(), false);
    col2im(g, cols.data(), dx.data() + n * g.c * g.h * g.w);
  });
  Tensor out(x_shape, std::move(dx));
  return record_op("conv2d_input_grad", {grad, w}, std::move(out),
                   [stride, pad](const VjpContext& c) {
                     const Tensor& g = c.inputs[0];
                     const Tensor& w = c.inputs[1];
                     std::vector<Tensor> r = none(2);
                     if (c.needs[0]) r[0] = conv2d(c.grad, w, stride, pad);
                     if (c.needs[1]) r[1] = conv2d_weight_grad(c.grad, g, w.shape(), stride, pad);
                     return r;
                   });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad, const Shape& w_shape,
                          int stride, int pad) {
  require_defined("conv2d_weight_grad", x);
  require_defined("conv2d_weight_grad", grad);
  const ConvGeom g = conv_geom("conv2d_weight_grad", x.shape(), w_shape, stride, pad);
  check_grad_shape("conv2d_weight_grad", g, grad);
  std::vector<double> dw = buffer(g.o * g.patch());
  std::vector<double> cols(static_cast<std::size_t>(g.patch() * g.ho * g.wo));
  const double* xd = x.data().data();
  const double* gd = grad.data().data();
  // Images are folded in one at a time so each weight sums over n in order.
  for (std::int64_t n = 0; n < g.n; ++n) {
    im2col(g, xd + n * g.c * g.h * g.w, cols.data());
    detail::gemm(false, true, g.o, g.patch(), g.ho * g.wo, gd + n * g.o * g.ho * g.wo,
                 cols.data(), dw.data(), true);
  }
  return record_op("conv2d_weight_grad", {x, grad}, Tensor(w_shape, std::move(dw)),
                   [stride, pad](const VjpContext& c) {
                     const Tensor& x = c.inputs[0];
                     const Tensor& g = c.inputs[1];
                     std::vector<Tensor> r = none(2);
                     if (c.needs[0]) r[0] = conv2d_input_grad(g, c.grad, x.shape(), stride, pad);
                     if (c.needs[1]) r[1] = conv2d(x, c.grad, stride, pad);
                     return r;
                   });
}

Tensor group_mean(const Tensor& x, int groups) {
  const GroupGeom gg = group_geom("group_mean", x, groups);
  auto xd = x.data();
  std::vector<double> out = buffer(x.numel());
  for (std::int64_t b = 0; b < gg.blocks; ++b) {
    const double* p = xd.data() + b * gg.len;
    double s = 0.0;
    for (std::int64_t j = 0; j < gg.len; ++j) s += p[j];
    const double m = s / static_cast<double>(gg.len);
    std::fill(out.begin() + b * gg.len, out.begin() + (b + 1) * gg.len, m);
  }
  return record_op("group_mean", {x}, Tensor(x.shape(), std::move(out)),
                   [groups](const VjpContext& c) {
                     return std::vector<Tensor>{group_mean(c.grad, groups)};
                   });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
  const GroupGeom gg = group_geom("group_norm", x, groups);
  require_rank("group_norm", gamma, 1);
  require_rank("group_norm", beta, 1);
  if (gamma.dim(0) != gg.channels || beta.dim(0) != gg.channels) {
    fail("group_norm", "affine parameters " + shape_string(gamma.shape()) + ", " +
                           shape_string(beta.shape()) + " do not match input " +
                           shape_string(x.shape()));
  }
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  const std::int64_t per_group = gg.channels / groups;
  std::vector<double> out = buffer(x.numel());
  for (std::int64_t b = 0; b < gg.blocks; ++b) {
    const double* p = xd.data() + b * gg.len;
    double s = 0.0;
    for (std::int64_t j = 0; j < gg.len; ++j) s += p[j];
    const double m = s / static_cast<double>(gg.len);
    double v = 0.0;
    for (std::int64_t j = 0; j < gg.len; ++j) v += (p[j] - m) * (p[j] - m);
    v /= static_cast<double>(gg.len);
    const double rstd = 1.0 / std::sqrt(v + eps);
    const std::int64_t c0 = (b % groups) * per_group;
    for (std::int64_t ci = 0; ci < per_group; ++ci) {
      const double a = rstd * gd[c0 + ci];
      const double shift = bd[c0 + ci];
      const double* src = p + ci * gg.spatial;
      double* dst = out.data() + b * gg.len + ci * gg.spatial;
      for (std::int64_t j = 0; j < gg.spatial; ++j) dst[j] = (src[j] - m) * a + shift;
    }
  }
  return record_op("group_norm", {x, gamma, beta}, Tensor(x.shape(), std::move(out)),
                   [groups, eps](const VjpContext& c) {
    const Tensor& x = c.inputs[0];
    const Tensor& gamma = c.inputs[1];
    if (!grad_enabled()) return group_norm_backward(x, gamma, c.grad, groups, eps, c.needs);
    std::vector<Tensor> r = none(3);
    if (c.needs[0]) r[0] = group_norm_input_grad(x, gamma, c.grad, groups, eps);
    if (c.needs[1]) {
      const std::int64_t ch = gamma.dim(0);
      Tensor xhat = group_norm(x, Tensor::full({ch}, 1.0), Tensor::zeros({ch}), groups, eps);
      r[1] = channel_sum(mul(c.grad, xhat));
    }
    if (c.needs[2]) r[2] = channel_sum(c.grad);
    return r;
  });
}

Tensor group_norm_input_grad(const Tensor& x, const Tensor& gamma, const Tensor& g,
                             int groups, double eps) {
  const GroupGeom gg = group_geom("group_norm_input_grad", x, groups);
  require_rank("group_norm_input_grad", gamma, 1);
  if (gamma.dim(0) != gg.channels || g.shape() != x.shape()) {
    fail("group_norm_input_grad", "gamma " + shape_string(gamma.shape()) + " or gradient " +
                                      shape_string(g.shape()) + " does not match input " +
                                      shape_string(x.shape()));
  }
  const char needs[] = {1, 0, 0};
  Tensor dx = group_norm_backward(x, gamma, g, groups, eps, needs)[0];
  return record_op("group_norm_input_grad", {x, gamma, g}, std::move(dx),
                   [groups, eps](const VjpContext& c) {
    const Tensor& x = c.inputs[0];
    const Tensor& gamma = c.inputs[1];
    const Tensor& g = c.inputs[2];
    std::vector<Tensor> r = none(3);
    if (c.needs[1] || c.needs[2]) {
      // The map g -> dx is self-adjoint up to the gamma scaling.
      Tensor mu = group_norm_input_grad(x, Tensor::full({gamma.dim(0)}, 1.0), c.grad, groups, eps);
      if (c.needs[1]) r[1] = channel_sum(mul(g, mu));
      if (c.needs[2]) r[2] = mul(channel_broadcast(gamma, x.shape()), mu);
    }
    if (c.needs[0]) {
      if (grad_enabled()) {
        throw ContractError(
            "group_norm_input_grad: third-order derivatives with respect to x are not supported");
      }
      r[0] = group_norm_second_order(x, gamma, g, c.grad, groups, eps);
    }
    return r;
  });
}

Tensor avg_pool2d(const Tensor& x, int k) {
  require_rank("avg_pool2d", x, 4);
  if (k < 1 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
    fail("avg_pool2d", "window " + std::to_string(k) + " does not tile " +
                           shape_string(x.shape()));
  }
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = h / k, wo = w / k;
  const auto area = static_cast<double>(k * k);
  auto xd = x.data();
  std::vector<double> out = buffer(planes * ho * wo);
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xd.data() + p * h * w;
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < wo; ++j) {
        double s = 0.0;
        for (std::int64_t a = 0; a < k; ++a) {
          for (std::int64_t b = 0; b < k; ++b) s += src[(i * k + a) * w + j * k + b];
        }
        out[(p * ho + i) * wo + j] = s / area;
      }
    }
  }
  return record_op("avg_pool2d", {x}, Tensor({x.dim(0), x.dim(1), ho, wo}, std::move(out)),
                   [k](const VjpContext& c) {
                     return std::vector<Tensor>{avg_pool2d_grad(c.grad, k)};
                   });
}

Tensor avg_pool2d_grad(const Tensor& g, int k) {
  require_rank("avg_pool2d_grad", g, 4);
  if (k < 1) fail("avg_pool2d_grad", "window must be >= 1");
  const std::int64_t planes = g.dim(0) * g.dim(1), ho = g.dim(2), wo = g.dim(3);
  const std::int64_t h = ho * k, w = wo * k;
  const auto area = static_cast<double>(k * k);
  auto gd = g.data();
  std::vector<double> out = buffer(planes * h * w);
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t i = 0; i < ho; ++i) {
      const double* src = gd.data() + (p * ho + i) * wo;
      double* row = out.data() + (p * h + i * k) * w;
      for (std::int64_t j = 0; j < wo; ++j) {
        const double v = src[j] / area;
        for (std::int64_t b = 0; b < k; ++b) row[j * k + b] = v;
      }
      for (std::int64_t a = 1; a < k; ++a) std::copy(row, row + w, row + a * w);
    }
  }
  return record_op("avg_pool2d_grad", {g}, Tensor({g.dim(0), g.dim(1), h, w}, std::move(out)),
                   [k](const VjpContext& c) {
                     return std::vector<Tensor>{avg_pool2d(c.grad, k)};
                   });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  require_defined("reshape", x);
  if (shape_numel(shape) != x.numel()) {
    fail("reshape", "cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  auto xd = x.data();
  return record_op("reshape", {x}, Tensor(shape, std::vector<double>(xd.begin(), xd.end())),
                   [](const VjpContext& c) {
                     return std::vector<Tensor>{reshape(c.grad, c.inputs[0].shape())};
                   });
}

Tensor flatten(const Tensor& x) {
  require_defined("flatten", x);
  if (x.rank() < 1) fail("flatten", "rank-0 input");
  const std::int64_t n = x.dim(0);
  std::int64_t rest = 1;
  for (int i = 1; i < x.rank(); ++i) rest *= x.dim(i);
  return reshape(x, {n, rest});
}

Tensor concat0(std::span<const Tensor> parts) {
  if (parts.empty()) fail("concat0", "no inputs");
  for (const Tensor& p : parts) require_defined("concat0", p);
  const Shape& first = parts[0].shape();
  if (first.empty()) fail("concat0", "rank-0 input");
  std::int64_t rows = 0;
  std::vector<double> out;
  std::vector<std::int64_t> offsets;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<int>(first.size()) ||
        !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      fail("concat0", "trailing extents differ: " + shape_string(first) + " vs " +
                          shape_string(p.shape()));
    }
    offsets.push_back(rows);
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  offsets.push_back(rows);
  Shape shape = first;
  shape[0] = rows;
  return record_op("concat0", std::vector<Tensor>(parts.begin(), parts.end()),
                   Tensor(shape, std::move(out)), [offsets](const VjpContext& c) {
                     std::vector<Tensor> r = none(c.inputs.size());
                     for (std::size_t i = 0; i < c.inputs.size(); ++i) {
                       if (c.needs[i]) r[i] = slice0(c.grad, offsets[i], offsets[i + 1]);
                     }
                     return r;
                   });
}

Tensor slice0(const Tensor& x, std::int64_t begin, std::int64_t end) {
  require_defined("slice0", x);
  if (x.rank() < 1) fail("slice0", "rank-0 input");
  if (begin < 0 || end < begin || end > x.dim(0)) {
    fail("slice0", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") outside " + shape_string(x.shape()));
  }
  const std::int64_t row = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  auto xd = x.data();
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(xd.begin() + begin * row, xd.begin() + end * row);
  const std::int64_t total = x.dim(0);
  return record_op("slice0", {x}, Tensor(shape, std::move(out)),
                   [begin, total](const VjpContext& c) {
                     return std::vector<Tensor>{pad0(c.grad, begin, total)};
                   });
}

Tensor pad0(const Tensor& x, std::int64_t begin, std::int64_t total) {
  require_defined("pad0", x);
  if (x.rank() < 1) fail("pad0", "rank-0 input");
  const std::int64_t n = x.dim(0);
  if (begin < 0 || begin + n > total) {
    fail("pad0", "cannot place " + shape_string(x.shape()) + " at row " +
                     std::to_string(begin) + " of " + std::to_string(total));
  }
  const std::int64_t row = n == 0 ? shape_numel(Shape(x.shape().begin() + 1, x.shape().end()))
                                  : x.numel() / n;
  Shape shape = x.shape();
  shape[0] = total;
  std::vector<double> out = buffer(total * row);
  std::copy(x.data().begin(), x.data().end(), out.begin() + begin * row);
  return record_op("pad0", {x}, Tensor(shape, std::move(out)),
                   [begin, n](const VjpContext& c) {
                     return std::vector<Tensor>{slice0(c.grad, begin, begin + n)};
                   });
}

Tensor take_rows(const Tensor& x, std::span<const std::int64_t> idx) {
  require_defined("take_rows", x);
  if (x.rank() < 1) fail("take_rows", "rank-0 input");
  const std::int64_t n = x.dim(0);
  const std::int64_t row = shape_numel(Shape(x.shape().begin() + 1, x.shape().end()));
  auto xd = x.data();
  std::vector<double> out;
  out.reserve(idx.size() * static_cast<std::size_t>(row));
  for (std::int64_t i : idx) {
    if (i < 0 || i >= n) {
      fail("take_rows", "row " + std::to_string(i) + " outside " + shape_string(x.shape()));
    }
    out.insert(out.end(), xd.begin() + i * row, xd.begin() + (i + 1) * row);
  }
  Shape shape = x.shape();
  shape[0] = static_cast<std::int64_t>(idx.size());
  std::vector<std::int64_t> kept(idx.begin(), idx.end());
  return record_op("take_rows", {x}, Tensor(shape, std::move(out)),
                   [kept, n](const VjpContext& c) {
                     return std::vector<Tensor>{scatter_rows(c.grad, kept, n)};
                   });
}

Tensor scatter_rows(const Tensor& g, std::span<const std::int64_t> idx, std::int64_t n) {
  require_defined("scatter_rows", g);
  if (g.rank() < 1 || g.dim(0) != static_cast<std::int64_t>(idx.size())) {
    fail("scatter_rows", std::to_string(idx.size()) + " indices for " +
                             shape_string(g.shape()));
  }
  const std::int64_t row = shape_numel(Shape(g.shape().begin() + 1, g.shape().end()));
  auto gd = g.data();
  std::vector<double> out = buffer(n * row);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::int64_t r = idx[i];
    if (r < 0 || r >= n) {
      fail("scatter_rows", "row " + std::to_string(r) + " outside [0," + std::to_string(n) + ")");
    }
    for (std::int64_t j = 0; j < row; ++j) {
      out[r * row + j] += gd[static_cast<std::int64_t>(i) * row + j];
    }
  }
  Shape shape = g.shape();
  shape[0] = n;
  std::vector<std::int64_t> kept(idx.begin(), idx.end());
  return record_op("scatter_rows", {g}, Tensor(shape, std::move(out)),
                   [kept](const VjpContext& c) {
                     return std::vector<Tensor>{take_rows(c.grad, kept)};
                   });
}

Tensor separable_transform(const Tensor& x, const Tensor& a, const Tensor& b) {
  require_rank("separable_transform", x, 4);
  require_rank("separable_transform", a, 2);
  require_rank("separable_transform", b, 2);
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (a.dim(1) != h || b.dim(1) != w) {
    fail("separable_transform", "maps " + shape_string(a.shape()) + ", " +
                                    shape_string(b.shape()) + " do not fit " +
                                    shape_string(x.shape()));
  }
  const std::int64_t ho = a.dim(0), wo = b.dim(0);
  auto xd = x.data();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out = buffer(planes * ho * wo);
  std::vector<double> t(static_cast<std::size_t>(ho * w));
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xd.data() + p * h * w;
    // t = A * X, then Y = t * B^T.
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        double s = 0.0;
        for (std::int64_t r = 0; r < h; ++r) s += ad[i * h + r] * src[r * w + j];
        t[i * w + j] = s;
      }
    }
    double* dst = out.data() + p * ho * wo;
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < wo; ++j) {
        double s = 0.0;
        for (std::int64_t r = 0; r < w; ++r) s += t[i * w + r] * bd[j * w + r];
        dst[i * wo + j] = s;
      }
    }
  }
  Tensor a_const = a.detach();
  Tensor b_const = b.detach();
  return record_op("separable_transform", {x},
                   Tensor({x.dim(0), x.dim(1), ho, wo}, std::move(out)),
                   [a_const, b_const](const VjpContext& c) {
                     Tensor at, bt;
                     {
                       NoGradScope constants;
                       at = transpose(a_const);
                       bt = transpose(b_const);
                     }
                     return std::vector<Tensor>{separable_transform(c.grad, at, bt)};
                   });
}

}  // namespace fedvirt
