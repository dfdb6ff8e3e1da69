#include "fedvirt/distillation.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fedvirt/augment.h"
#include "fedvirt/container.h"
#include "fedvirt/errors.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

constexpr std::int64_t kChunk = 256;

VirtualDataset with_images(const VirtualDataset& v, Tensor images) {
  VirtualDataset out = v;
  out.images = std::move(images);
  return out;
}

Tensor descend(const Tensor& x, const Tensor& g, double lr, const ChannelBounds& bounds) {
  std::vector<double> v(x.data().begin(), x.data().end());
  auto gd = g.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * gd[i];
  return clamp_channels(Tensor(x.shape(), std::move(v)), bounds);
}

Tensor chunked(const ModelParams& model, const Tensor& images,
               Tensor (*fn)(const ModelParams&, const Tensor&)) {
  NoGradScope ng;
  const ModelParams m = detached(model);
  const Tensor x = images.detach();
  const std::int64_t n = x.dim(0);
  if (n <= kChunk) return fn(m, x);
  std::vector<Tensor> parts;
  for (std::int64_t b = 0; b < n; b += kChunk) parts.push_back(fn(m, slice0(x, b, std::min(n, b + kChunk))));
  return concat0(parts);
}

}  // namespace

ChannelBounds channel_bounds(const LabeledDataset& d) {
  const std::int64_t n = d.size(), ch = d.channels(), hw = d.side() * d.side();
  ChannelBounds b;
  b.lo.assign(static_cast<std::size_t>(ch), std::numeric_limits<double>::infinity());
  b.hi.assign(static_cast<std::size_t>(ch), -std::numeric_limits<double>::infinity());
  auto px = d.images.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const double* p = px.data() + (i * ch + c) * hw;
      const auto [lo, hi] = std::minmax_element(p, p + hw);
      b.lo[c] = std::min(b.lo[c], *lo);
      b.hi[c] = std::max(b.hi[c], *hi);
    }
  }
  return b;
}

ChannelBounds declared_bounds(const LabeledDataset& d) {
  const auto ch = static_cast<std::size_t>(d.channels());
  return {std::vector<double>(ch, d.range.lo), std::vector<double>(ch, d.range.hi)};
}

Labels VirtualDataset::classes() const {
  Labels out;
  for (std::int64_t i = 0; ipc > 0 && i < size(); i += ipc) out.push_back(labels[i]);
  return out;
}

void check_virtual(const VirtualDataset& v) {
  if (v.ipc < 1) throw ContractError("virtual data: ipc must be >= 1");
  if (v.size() == 0 || v.size() % v.ipc != 0) {
    throw ContractError("virtual data: " + std::to_string(v.size()) + " rows is not a multiple of ipc " +
                        std::to_string(v.ipc));
  }
  if (!v.images.defined() || v.images.rank() != 4 || v.images.dim(0) != v.size()) {
    throw ContractError("virtual data: images do not match the labels");
  }
  std::int64_t previous = -1;
  for (std::int64_t i = 0; i < v.size(); i += v.ipc) {
    const std::int64_t k = v.labels[i];
    if (k <= previous || k >= v.class_count) {
      throw ContractError("virtual data: classes are not in ascending class-major order");
    }
    for (std::int64_t j = i; j < i + v.ipc; ++j) {
      if (v.labels[j] != k) {
        throw ContractError("virtual data: class " + std::to_string(k) + " does not have exactly " +
                            std::to_string(v.ipc) + " rows");
      }
    }
    previous = k;
  }
  const std::int64_t ch = v.images.dim(1), hw = v.images.dim(2) * v.images.dim(3);
  if (static_cast<std::int64_t>(v.bounds.lo.size()) != ch ||
      static_cast<std::int64_t>(v.bounds.hi.size()) != ch) {
    throw ContractError("virtual data: bounds do not match the channel count");
  }
  auto px = v.images.data();
  for (std::int64_t i = 0; i < v.size(); ++i) {
    for (std::int64_t c = 0; c < ch; ++c) {
      for (std::int64_t j = 0; j < hw; ++j) {
        const double p = px[(i * ch + c) * hw + j];
        if (!(p >= v.bounds.lo[c] && p <= v.bounds.hi[c])) {
          throw ContractError("virtual data: pixel outside the channel bounds");
        }
      }
    }
  }
}

Tensor clamp_channels(const Tensor& images, const ChannelBounds& bounds) {
  const std::int64_t n = images.dim(0), ch = images.dim(1);
  const std::int64_t hw = images.numel() / std::max<std::int64_t>(1, n * ch);
  if (static_cast<std::int64_t>(bounds.lo.size()) != ch) {
    throw ContractError("clamp: bounds for " + std::to_string(bounds.lo.size()) +
                        " channels, images have " + std::to_string(ch));
  }
  std::vector<double> v(images.data().begin(), images.data().end());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < ch; ++c) {
      double* p = v.data() + (i * ch + c) * hw;
      for (std::int64_t j = 0; j < hw; ++j) p[j] = std::clamp(p[j], bounds.lo[c], bounds.hi[c]);
    }
  }
  return Tensor(images.shape(), std::move(v));
}

ClassStats class_stats(const LabeledDataset& d) {
  validate_dataset(d);
  const auto by_class = class_indices(d.labels, d.class_count);
  const Shape img{d.channels(), d.side(), d.side()};
  const std::int64_t per = shape_numel(img);
  auto px = d.images.data();
  ClassStats out;
  out.class_count = d.class_count;
  for (std::int64_t k = 0; k < d.class_count; ++k) {
    const auto& idx = by_class[k];
    if (idx.empty()) continue;
    const auto n = static_cast<double>(idx.size());
    std::vector<double> mean(static_cast<std::size_t>(per), 0.0), var(static_cast<std::size_t>(per), 0.0);
    for (std::int64_t i : idx) {
      for (std::int64_t j = 0; j < per; ++j) mean[j] += px[i * per + j];
    }
    for (double& m : mean) m /= n;
    for (std::int64_t i : idx) {
      for (std::int64_t j = 0; j < per; ++j) {
        const double e = px[i * per + j] - mean[j];
        var[j] += e * e;
      }
    }
    for (double& s : var) s = std::sqrt(s / n);
    out.classes.push_back({k, Tensor(img, std::move(mean)), Tensor(img, std::move(var)),
                           static_cast<std::int64_t>(idx.size())});
  }
  return out;
}

ClassStats aggregate_stats(std::span<const ClassStats> clients) {
  if (clients.empty()) throw ContractError("aggregate_stats: no clients");
  ClassStats out;
  out.class_count = clients.front().class_count;
  for (const ClassStats& c : clients) {
    if (c.class_count != out.class_count) throw ContractError("aggregate_stats: class counts differ");
  }
  for (std::int64_t k = 0; k < out.class_count; ++k) {
    std::vector<const ClassStat*> have;
    for (const ClassStats& c : clients) {
      for (const ClassStat& s : c.classes) {
        if (s.label == k) have.push_back(&s);
      }
    }
    if (have.empty()) continue;
    const Shape shape = have.front()->mean.shape();
    std::vector<double> mean(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    std::vector<double> std(mean.size(), 0.0);
    std::int64_t count = 0;
    for (const ClassStat* s : have) {
      if (s->mean.shape() != shape) throw ContractError("aggregate_stats: image shapes differ");
      for (std::size_t j = 0; j < mean.size(); ++j) {
        mean[j] += s->mean.at(static_cast<std::int64_t>(j));
        std[j] += s->std.at(static_cast<std::int64_t>(j));
      }
      count += s->count;
    }
    const auto m = static_cast<double>(have.size());
    for (std::size_t j = 0; j < mean.size(); ++j) {
      mean[j] /= m;
      std[j] /= m;
    }
    out.classes.push_back({k, Tensor(shape, std::move(mean)), Tensor(shape, std::move(std)), count});
  }
  return out;
}

VirtualDataset init_virtual(const ClassStats& stats, std::int64_t ipc, const ChannelBounds& bounds,
                            std::uint64_t seed) {
  if (ipc < 1) throw ContractError("init_virtual: ipc must be >= 1");
  if (stats.classes.empty()) throw ContractError("init_virtual: no class statistics");
  const Shape img = stats.classes.front().mean.shape();
  const std::int64_t per = shape_numel(img);
  const auto n = static_cast<std::int64_t>(stats.classes.size()) * ipc;
  std::vector<double> px;
  px.reserve(static_cast<std::size_t>(n * per));
  VirtualDataset v;
  v.ipc = ipc;
  v.class_count = stats.class_count;
  v.bounds = bounds;
  Rng rng(seed);
  for (const ClassStat& s : stats.classes) {
    auto mu = s.mean.data();
    auto sd = s.std.data();
    for (std::int64_t r = 0; r < ipc; ++r) {
      v.labels.push_back(s.label);
      for (std::int64_t j = 0; j < per; ++j) {
        const double z = rng.normal();
        px.push_back(sd[j] == 0.0 ? mu[j] : mu[j] + sd[j] * z);
      }
    }
  }
  Shape shape{n};
  shape.insert(shape.end(), img.begin(), img.end());
  v.images = clamp_channels(Tensor(shape, std::move(px)), bounds);
  check_virtual(v);
  return v;
}

Tensor features_no_grad(const ModelParams& model, const Tensor& images) {
  return chunked(model, images, &extract_features);
}

Tensor logits_no_grad(const ModelParams& model, const Tensor& images) {
  return chunked(model, images, &predict_logits);
}

DistillResult distribution_match(const LabeledDataset& real, const VirtualDataset& virt,
                                 const ModelParams& extractor,
                                 const DistributionMatchOptions& options) {
  check_virtual(virt);
  if (options.steps < 0) throw ContractError("distribution_match: negative step count");
  if (options.real_batch_per_class < 1) throw ContractError("distribution_match: real batch must be >= 1");
  const auto real_by_class = class_indices(real.labels, real.class_count);
  const Labels classes = virt.classes();
  for (std::int64_t k : classes) {
    if (k >= real.class_count || real_by_class[k].empty()) {
      throw ContractError("distribution_match: virtual class " + std::to_string(k) +
                          " has no real samples");
    }
  }
  const ModelParams model = detached(extractor);
  const std::int64_t side = virt.images.dim(2);
  DistillResult out;
  out.initial_loss = class_feature_mmd(model, real.images, real.labels, virt.images, virt.labels,
                                       virt.class_count);
  Tensor x = virt.images;
  for (std::int64_t step = 0; step < options.steps; ++step) {
    Rng rng(derive_seed(options.seed, {static_cast<std::uint64_t>(step)}));
    std::vector<std::int64_t> idx;
    std::vector<std::int64_t> counts;
    for (std::int64_t k : classes) {
      const auto& pool = real_by_class[k];
      const auto m = std::min<std::int64_t>(options.real_batch_per_class, static_cast<std::int64_t>(pool.size()));
      for (std::int64_t j : rng.sample_without_replacement(static_cast<std::int64_t>(pool.size()), m)) {
        idx.push_back(pool[j]);
      }
      counts.push_back(m);
    }
    AugmentParams aug;
    if (options.augment) aug = draw_augment(rng.next(), side);

    std::vector<Tensor> real_parts;
    {
      NoGradScope ng;
      Tensor rf = extract_features(model, apply_augment(take_rows(real.images.detach(), idx), aug));
      std::int64_t at = 0;
      for (std::int64_t m : counts) {
        real_parts.push_back(slice0(rf, at, at + m));
        at += m;
      }
    }
    Record rec;
    RecordScope scope(rec);
    Tensor leaf = rec.leaf(x);
    Tensor vf = extract_features(model, apply_augment(leaf, aug));
    std::vector<Tensor> virt_parts;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto b = static_cast<std::int64_t>(c) * virt.ipc;
      virt_parts.push_back(slice0(vf, b, b + virt.ipc));
    }
    LossValue loss = mmd_per_class(real_parts, virt_parts);
    out.trace.push_back(loss.value.item());
    const Tensor wrt[] = {leaf};
    Tensor g = backward(loss.value, wrt)[0];
    x = descend(x, g, options.lr, virt.bounds);
  }
  out.data = with_images(virt, x);
  out.final_loss = options.steps == 0
                       ? out.initial_loss
                       : class_feature_mmd(model, real.images, real.labels, x, virt.labels,
                                           virt.class_count);
  check_virtual(out.data);
  return out;
}

NamedTensors ce_gradient(const ModelParams& model, const Tensor& images, const Labels& labels) {
  Record rec;
  RecordScope scope(rec);
  ModelParams p = attach(detached(model), rec);
  LossValue ce = cross_entropy(predict_logits(p, images.detach()), labels);
  const std::vector<Tensor> leaves = values_of(p.all());
  std::vector<Tensor> g = backward(ce.value, leaves);
  NamedTensors out = model.all();
  for (std::size_t i = 0; i < out.size(); ++i) out[i].value = g[i];
  return out;
}

namespace {

// Gradient distance at `x`, and optionally its gradient with respect to x.
double gm_loss(const ModelParams& model, const Tensor& x, const Labels& labels,
               const NamedTensors& target, Tensor* grad) {
  Record rec;
  RecordScope scope(rec);
  Tensor leaf = grad ? rec.leaf(x) : x;
  ModelParams p = attach(model, rec);
  LossValue ce = cross_entropy(predict_logits(p, leaf), labels);
  const std::vector<Tensor> leaves = values_of(p.all());
  std::vector<Tensor> g = backward(ce.value, leaves, {.create_graph = grad != nullptr});
  NamedTensors named = model.all();
  for (std::size_t i = 0; i < named.size(); ++i) named[i].value = g[i];
  LossValue dist = gradient_distance(named, target);
  if (grad) {
    const Tensor wrt[] = {leaf};
    *grad = backward(dist.value, wrt)[0];
  }
  return dist.value.item();
}

}  // namespace

DistillResult gradient_match(const VirtualDataset& virt, const NamedTensors& target,
                             const ModelParams& model, const GradientMatchOptions& options) {
  check_virtual(virt);
  if (options.steps < 0) throw ContractError("gradient_match: negative step count");
  const ModelParams m = detached(model);
  const NamedTensors names = m.all();
  if (names.size() != target.size()) {
    throw ContractError("gradient_match: " + std::to_string(target.size()) +
                        " target tensors for a model with " + std::to_string(names.size()));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].name != target[i].name || names[i].value.shape() != target[i].value.shape()) {
      throw ContractError("gradient_match: target '" + target[i].name + "' " +
                          shape_string(target[i].value.shape()) + " does not match '" +
                          names[i].name + "' " + shape_string(names[i].value.shape()));
    }
  }
  NamedTensors tgt = target;
  for (NamedTensor& t : tgt) t.value = t.value.detach();

  DistillResult out;
  Tensor x = virt.images;
  for (std::int64_t step = 0; step < options.steps; ++step) {
    Tensor g;
    const double d = gm_loss(m, x, virt.labels, tgt, &g);
    if (step == 0) out.initial_loss = d;
    out.trace.push_back(d);
    x = descend(x, g, options.lr, virt.bounds);
  }
  out.final_loss = gm_loss(m, x, virt.labels, tgt, nullptr);
  if (options.steps == 0) out.initial_loss = out.final_loss;
  out.data = with_images(virt, x);
  check_virtual(out.data);
  return out;
}

double class_feature_mmd(const ModelParams& model, const Tensor& a_images, const Labels& a_labels,
                         const Tensor& b_images, const Labels& b_labels, std::int64_t class_count) {
  const auto a_idx = class_indices(a_labels, class_count);
  const auto b_idx = class_indices(b_labels, class_count);
  const Tensor fa = features_no_grad(model, a_images);
  const Tensor fb = features_no_grad(model, b_images);
  NoGradScope ng;
  std::vector<Tensor> ra, rb;
  for (std::int64_t k = 0; k < class_count; ++k) {
    if (a_idx[k].empty() || b_idx[k].empty()) continue;
    ra.push_back(take_rows(fa, a_idx[k]));
    rb.push_back(take_rows(fb, b_idx[k]));
  }
  if (ra.empty()) throw ContractError("class_feature_mmd: the two sets share no class");
  return mmd_per_class(ra, rb).value.item();
}

Container virtual_to_container(const VirtualDataset& v) {
  Container c;
  c.kind = "virtual";
  c.meta = {{"labels", v.labels},
            {"ipc", v.ipc},
            {"class_count", v.class_count},
            {"bounds_lo", v.bounds.lo},
            {"bounds_hi", v.bounds.hi}};
  c.tensors.push_back({"images", v.images.detach()});
  return c;
}

VirtualDataset virtual_from_container(const Container& c) {
  if (c.kind != "virtual") throw ContractError("container kind '" + c.kind + "' is not 'virtual'");
  VirtualDataset v;
  try {
    v.labels = c.meta.at("labels").get<Labels>();
    v.ipc = c.meta.at("ipc").get<std::int64_t>();
    v.class_count = c.meta.at("class_count").get<std::int64_t>();
    v.bounds.lo = c.meta.at("bounds_lo").get<std::vector<double>>();
    v.bounds.hi = c.meta.at("bounds_hi").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("virtual container: bad metadata: ") + e.what());
  }
  v.images = c.tensor("images");
  check_virtual(v);
  return v;
}

}  // namespace fedvirt
