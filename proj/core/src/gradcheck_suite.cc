#include "fedvirt/gradcheck_suite.h"

#include <cstdio>
#include <functional>
#include <memory>
#include <ostream>

#include "fedvirt/augment.h"
#include "fedvirt/losses.h"
#include "fedvirt/models.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

using Fn = std::function<Tensor(const Tensor&)>;
using Gen = std::function<Tensor(Rng&)>;

Tensor normal(Rng& rng, const Shape& s, double sd = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
  for (double& x : v) x = sd * rng.normal();
  return Tensor(s, std::move(v));
}

Tensor uniform(Rng& rng, const Shape& s, double lo, double hi) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, std::move(v));
}

Gen gauss(Shape s) {
  return [s](Rng& r) { return normal(r, s); };
}

Gen positive(Shape s) {
  return [s](Rng& r) { return uniform(r, s, 0.5, 2.0); };
}

// x -> sum(op(x) * R) for a fixed random R shaped like op's output.
Fn weighted(std::function<Tensor(const Tensor&)> op, std::uint64_t seed) {
  auto weights = std::make_shared<Tensor>();
  return [op, weights, seed](const Tensor& x) {
    Tensor y = op(x);
    if (!weights->defined() || weights->shape() != y.shape()) {
      Rng r(seed);
      *weights = normal(r, y.shape());
    }
    return sum(mul(y, *weights));
  };
}

// Parameters packed into one flat vector, so a single grad_check covers all.
Tensor pack(const ModelParams& p) {
  std::vector<double> v;
  for (const NamedTensor& t : p.all()) v.insert(v.end(), t.value.data().begin(), t.value.data().end());
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

ModelParams unpack(const ModelParams& like, const Tensor& flat) {
  std::vector<Tensor> values;
  std::int64_t at = 0;
  for (const NamedTensor& t : like.all()) {
    const std::int64_t n = t.value.numel();
    values.push_back(reshape(slice0(flat, at, at + n), t.value.shape()));
    at += n;
  }
  return with_values(like, values);
}

struct Check {
  std::string name;
  Fn f;
  Gen point;
};

std::vector<Check> checks() {
  std::vector<Check> c;
  std::uint64_t s = 100;
  auto add_check = [&](std::string name, std::function<Tensor(const Tensor&)> op, Gen point) {
    c.push_back({std::move(name), weighted(std::move(op), ++s), std::move(point)});
  };
  Rng fixed(7);
  const Tensor b34 = normal(fixed, {3, 4});
  const Tensor pos34 = uniform(fixed, {3, 4}, 0.5, 2.0);
  const Tensor k = Tensor::scalar(1.7);

  add_check("add", [b34](const Tensor& x) { return add(x, b34); }, gauss({3, 4}));
  add_check("add (rank-0 side)", [b34](const Tensor& x) { return add(b34, x); }, gauss({}));
  add_check("sub", [b34](const Tensor& x) { return sub(b34, x); }, gauss({3, 4}));
  add_check("mul", [b34](const Tensor& x) { return mul(x, b34); }, gauss({3, 4}));
  add_check("mul (rank-0 side)", [b34](const Tensor& x) { return mul(x, b34); }, gauss({}));
  add_check("div (numerator)", [pos34](const Tensor& x) { return div(x, pos34); }, gauss({3, 4}));
  add_check("div (denominator)", [b34](const Tensor& x) { return div(b34, x); }, positive({3, 4}));
  add_check("scale", [](const Tensor& x) { return scale(x, -2.5); }, gauss({3, 4}));
  add_check("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, gauss({3, 4}));
  add_check("relu", [](const Tensor& x) { return relu(x); }, gauss({3, 4}));
  add_check("exp", [](const Tensor& x) { return exp(x); }, gauss({3, 4}));
  add_check("log", [](const Tensor& x) { return log(x); }, positive({3, 4}));
  add_check("pow 2.5", [](const Tensor& x) { return pow(x, 2.5); }, positive({3, 4}));
  add_check("pow -0.5", [](const Tensor& x) { return pow(x, -0.5); }, positive({3, 4}));
  add_check("pow 3", [](const Tensor& x) { return pow(x, 3.0); }, gauss({3, 4}));
  add_check("sum", [](const Tensor& x) { return sum(x); }, gauss({3, 4}));
  add_check("mean", [](const Tensor& x) { return mean(x); }, gauss({3, 4}));
  add_check("expand", [](const Tensor& x) { return expand(x, {2, 3}); }, gauss({}));
  add_check("row_sum", [](const Tensor& x) { return row_sum(x); }, gauss({3, 4}));
  add_check("row_broadcast", [](const Tensor& x) { return row_broadcast(x, 4); }, gauss({3}));
  add_check("l2_normalize", [](const Tensor& x) { return l2_normalize(x); }, gauss({3, 4}));
  add_check("log_softmax", [](const Tensor& x) { return log_softmax(x); }, gauss({3, 4}));
  add_check("gather", [](const Tensor& x) { return gather(x, {1, 3, 0}); }, gauss({3, 4}));
  add_check("scatter", [](const Tensor& x) { return scatter(x, {1, 3, 0}, 4); }, gauss({3}));
  {
    const Tensor m45 = normal(fixed, {4, 5});
    add_check("matmul (left)", [m45](const Tensor& x) { return matmul(x, m45); }, gauss({3, 4}));
    add_check("matmul (right)", [b34](const Tensor& x) { return matmul(b34, x); }, gauss({4, 5}));
  }
  add_check("transpose", [](const Tensor& x) { return transpose(x); }, gauss({3, 4}));
  add_check("channel_broadcast", [](const Tensor& x) { return channel_broadcast(x, {2, 3, 2, 2}); },
            gauss({3}));
  add_check("channel_sum", [](const Tensor& x) { return channel_sum(x); }, gauss({2, 3, 2, 2}));

  const Tensor w = normal(fixed, {3, 2, 3, 3}, 0.5);
  const Tensor xi = normal(fixed, {2, 2, 5, 5});
  const Tensor go = normal(fixed, {2, 3, 5, 5});
  const Tensor go2 = normal(fixed, {2, 3, 2, 2});
  add_check("conv2d (input)", [w](const Tensor& x) { return conv2d(x, w, 1, 1); }, gauss({2, 2, 5, 5}));
  add_check("conv2d (weight)", [xi](const Tensor& x) { return conv2d(xi, x, 1, 1); }, gauss({3, 2, 3, 3}));
  add_check("conv2d stride 2 no pad", [w](const Tensor& x) { return conv2d(x, w, 2, 0); }, gauss({2, 2, 5, 5}));
  add_check("conv2d_input_grad (grad)",
            [w](const Tensor& g) { return conv2d_input_grad(g, w, {2, 2, 5, 5}, 1, 1); }, gauss({2, 3, 5, 5}));
  add_check("conv2d_input_grad (weight)",
            [go](const Tensor& x) { return conv2d_input_grad(go, x, {2, 2, 5, 5}, 1, 1); }, gauss({3, 2, 3, 3}));
  add_check("conv2d_weight_grad (input)",
            [go](const Tensor& x) { return conv2d_weight_grad(x, go, {3, 2, 3, 3}, 1, 1); }, gauss({2, 2, 5, 5}));
  add_check("conv2d_weight_grad (grad)",
            [xi](const Tensor& g) { return conv2d_weight_grad(xi, g, {3, 2, 3, 3}, 1, 1); }, gauss({2, 3, 5, 5}));
  add_check("conv2d_weight_grad stride 2",
            [go2](const Tensor& x) { return conv2d_weight_grad(x, go2, {3, 2, 3, 3}, 2, 0); }, gauss({2, 2, 5, 5}));

  const Tensor gamma = uniform(fixed, {4}, 0.5, 1.5);
  const Tensor beta = normal(fixed, {4});
  const Tensor xn = normal(fixed, {2, 4, 3, 3});
  const Tensor gn = normal(fixed, {2, 4, 3, 3});
  add_check("group_mean", [](const Tensor& x) { return group_mean(x, 2); }, gauss({2, 4, 3, 3}));
  add_check("group_norm (input)", [gamma, beta](const Tensor& x) { return group_norm(x, gamma, beta, 2, 1e-5); },
            gauss({2, 4, 3, 3}));
  add_check("group_norm (gamma)", [xn, beta](const Tensor& g) { return group_norm(xn, g, beta, 2, 1e-5); },
            gauss({4}));
  add_check("group_norm (beta)", [xn, gamma](const Tensor& b) { return group_norm(xn, gamma, b, 2, 1e-5); },
            gauss({4}));
  add_check("group_norm_input_grad (input)",
            [gamma, gn](const Tensor& x) { return group_norm_input_grad(x, gamma, gn, 2, 1e-5); },
            gauss({2, 4, 3, 3}));
  add_check("group_norm_input_grad (gamma)",
            [xn, gn](const Tensor& g) { return group_norm_input_grad(xn, g, gn, 2, 1e-5); }, gauss({4}));
  add_check("group_norm_input_grad (grad)",
            [xn, gamma](const Tensor& g) { return group_norm_input_grad(xn, gamma, g, 2, 1e-5); },
            gauss({2, 4, 3, 3}));
  add_check("avg_pool2d", [](const Tensor& x) { return avg_pool2d(x, 2); }, gauss({2, 2, 4, 4}));
  add_check("avg_pool2d_grad", [](const Tensor& g) { return avg_pool2d_grad(g, 2); }, gauss({2, 2, 2, 2}));
  add_check("reshape", [](const Tensor& x) { return reshape(x, {4, 3}); }, gauss({3, 4}));
  add_check("flatten", [](const Tensor& x) { return flatten(x); }, gauss({2, 2, 3}));
  add_check("concat0", [b34](const Tensor& x) {
    const Tensor parts[] = {x, b34, x};
    return concat0(parts);
  }, gauss({3, 4}));
  add_check("slice0", [](const Tensor& x) { return slice0(x, 1, 3); }, gauss({4, 3}));
  add_check("pad0", [](const Tensor& x) { return pad0(x, 1, 5); }, gauss({3, 2}));
  add_check("take_rows", [](const Tensor& x) {
    const std::int64_t idx[] = {2, 0, 2, 1};
    return take_rows(x, idx);
  }, gauss({3, 4}));
  add_check("scatter_rows", [](const Tensor& x) {
    const std::int64_t idx[] = {2, 0, 2, 1};
    return scatter_rows(x, idx, 3);
  }, gauss({4, 3}));
  {
    const Tensor a = normal(fixed, {3, 4});
    const Tensor b = normal(fixed, {5, 4});
    add_check("separable_transform", [a, b](const Tensor& x) { return separable_transform(x, a, b); },
              gauss({2, 1, 4, 4}));
  }

  // Losses.
  const Labels y6 = {0, 1, 2, 0, 1, 2};
  c.push_back({"cross_entropy", [y6](const Tensor& x) { return cross_entropy(x, y6).value; }, gauss({6, 3})});
  {
    const Tensor r0 = normal(fixed, {4, 3});
    const Tensor r1 = normal(fixed, {5, 3});
    c.push_back({"mmd_per_class", [r0, r1](const Tensor& v) {
                   const Tensor real[] = {r0, r1};
                   const Tensor virt[] = {slice0(v, 0, 2), slice0(v, 2, 5)};
                   return mmd_per_class(real, virt).value;
                 }, gauss({5, 3})});
  }
  {
    const Tensor g = normal(fixed, {4, 3});
    c.push_back({"supcon (local block)", [g](const Tensor& l) {
                   return supcon(g, {0, 1, 0, 1}, l, {1, 0, 2, 2}, 0.5).value;
                 }, gauss({4, 3})});
    c.push_back({"supcon (global block)", [g](const Tensor& gl) {
                   return supcon(gl, {0, 1, 0, 1}, g, {1, 0, 2, 2}, 0.07).value;
                 }, gauss({4, 3})});
  }
  {
    const Tensor t0 = normal(fixed, {3, 4});
    const Tensor t1 = normal(fixed, {5});
    c.push_back({"gradient_distance", [t0, t1](const Tensor& a) {
                   NamedTensors x{{"w", reshape(slice0(a, 0, 12), {3, 4})}, {"b", slice0(a, 12, 17)}};
                   NamedTensors y{{"w", t0}, {"b", t1}};
                   return gradient_distance(x, y).value;
                 }, gauss({17})});
  }
  const ModelParams mlp = mlp_init(8, 3, 5, 11);
  const ModelParams anchor = mlp_init(8, 3, 5, 12);
  c.push_back({"prox_term", [mlp, anchor](const Tensor& flat) {
                 return prox_term(unpack(mlp, flat), anchor, 0.7).value;
               }, [mlp](Rng& r) { return add(pack(mlp), normal(r, {pack(mlp).numel()}, 0.1)); }});
  {
    const Tensor local = normal(fixed, {6, 8});
    const Tensor global = normal(fixed, {6, 8});
    c.push_back({"total_loss (parameters)", [mlp, local, global, y6](const Tensor& flat) {
                   return total_loss(unpack(mlp, flat), local, y6, global, y6, {.lambda = 0.5, .temperature = 0.5})
                       .value;
                 }, [mlp](Rng& r) { return add(pack(mlp), normal(r, {pack(mlp).numel()}, 0.1)); }});
  }
  add_check("dsa_augment", [](const Tensor& x) {
    AugmentParams p{.shift_x = 1, .shift_y = -1, .scale_x = 1.15, .contrast = 0.9, .brightness = 0.05};
    return apply_augment(x, p);
  }, gauss({2, 2, 8, 8}));

  // Models end to end.
  const ModelParams conv = convnet_init(2, 3, 4, 8, 21);
  const Labels y4 = {0, 2, 1, 2};
  {
    Rng r(5);
    const Tensor images = normal(r, {4, 2, 8, 8});
    c.push_back({"CE(convnet) wrt images", [conv, y4](const Tensor& x) {
                   return cross_entropy(predict_logits(conv, x), y4).value;
                 }, gauss({4, 2, 8, 8})});
    c.push_back({"CE(convnet) wrt parameters", [conv, images, y4](const Tensor& flat) {
                   return cross_entropy(predict_logits(unpack(conv, flat), images), y4).value;
                 }, [conv](Rng& r) { return add(pack(conv), normal(r, {pack(conv).numel()}, 0.05)); }});
    const Tensor flat_in = normal(r, {4, 8});
    c.push_back({"CE(mlp) wrt parameters", [mlp, flat_in, y4](const Tensor& flat) {
                   return cross_entropy(predict_logits(unpack(mlp, flat), flat_in), y4).value;
                 }, [mlp](Rng& r) { return add(pack(mlp), normal(r, {pack(mlp).numel()}, 0.1)); }});

    // The gradient-matching objective: differentiates through a gradient.
    NamedTensors target = conv.all();
    for (NamedTensor& t : target) t.value = normal(r, t.value.shape());
    c.push_back({"gradient matching objective wrt images", [conv, target, y4](const Tensor& x) {
                   Record* rec = active_record();
                   ModelParams p = attach(conv, *rec);
                   LossValue ce = cross_entropy(predict_logits(p, x), y4);
                   const std::vector<Tensor> leaves = values_of(p.all());
                   std::vector<Tensor> g = backward(ce.value, leaves, {.create_graph = true});
                   NamedTensors named = conv.all();
                   for (std::size_t i = 0; i < named.size(); ++i) named[i].value = g[i];
                   return gradient_distance(named, target).value;
                 }, gauss({4, 2, 8, 8})});
  }
  return c;
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed, std::ostream* log) {
  std::vector<GradCheckEntry> out;
  std::uint64_t i = 0;
  for (const Check& check : checks()) {
    GradCheckEntry e;
    e.name = check.name;
    e.passed = true;
    Rng rng(derive_seed(seed, {++i}));
    for (int p = 0; p < kGradCheckPoints; ++p) {
      const GradCheckReport r = grad_check(check.f, check.point(rng), kGradCheckStep, kGradCheckTol);
      e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
      e.kink_coords += r.kink_coords;
      e.passed = e.passed && r.passed;
      ++e.points;
    }
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-4s %-42s max rel err %.3e  kinks %lld\n", e.passed ? "ok" : "FAIL",
                    e.name.c_str(), e.max_rel_error, static_cast<long long>(e.kink_coords));
      *log << buf << std::flush;
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace fedvirt
