#include "fedvirt/models.h"

#include <cmath>

#include "fedvirt/container.h"
#include "fedvirt/errors.h"
#include "fedvirt/ops.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

constexpr double kNormEps = 1e-5;

Tensor kaiming_uniform(Rng& rng, const Shape& shape, std::int64_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(shape, std::move(v));
}

const Tensor& find(const NamedTensors& set, const std::string& name) {
  for (const NamedTensor& t : set) {
    if (t.name == name) return t.value;
  }
  throw ContractError("model: missing parameter '" + name + "'");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return add(y, channel_broadcast(b, y.shape()));
}

}  // namespace

std::string arch_name(Arch arch) {
  return arch == Arch::kConvNet ? "convnet" : "mlp";
}

Arch parse_arch(const std::string& name) {
  if (name == "convnet") return Arch::kConvNet;
  if (name == "mlp") return Arch::kMlp;
  throw ContractError("unknown architecture '" + name + "'");
}

NamedTensors ModelParams::all() const {
  NamedTensors out = extractor;
  out.insert(out.end(), head.begin(), head.end());
  return out;
}

ModelParams convnet_init(std::int64_t in_channels, std::int64_t num_classes,
                         std::int64_t width, std::int64_t image_side,
                         std::uint64_t seed) {
  if (image_side <= 0 || image_side % 8 != 0) {
    throw ContractError("convnet_init: image side " + std::to_string(image_side) +
                        " is not divisible by 8");
  }
  if (width < 1 || in_channels < 1 || num_classes < 1) {
    throw ContractError("convnet_init: width, channels and classes must be >= 1");
  }
  ModelParams p;
  p.arch = Arch::kConvNet;
  p.in_channels = in_channels;
  p.image_side = image_side;
  p.width = width;
  p.num_classes = num_classes;
  p.norm_groups = width >= 8 ? 8 : 1;
  if (width % p.norm_groups != 0) p.norm_groups = 1;
  const std::int64_t spatial = image_side / 8;
  p.feature_dim = width * spatial * spatial;

  Rng rng(seed);
  std::int64_t c = in_channels;
  for (int block = 1; block <= 3; ++block) {
    const std::string i = std::to_string(block);
    p.extractor.push_back({"conv" + i + ".weight", kaiming_uniform(rng, {width, c, 3, 3}, c * 9)});
    p.extractor.push_back({"conv" + i + ".bias", Tensor::zeros({width})});
    p.extractor.push_back({"norm" + i + ".weight", Tensor::full({width}, 1.0)});
    p.extractor.push_back({"norm" + i + ".bias", Tensor::zeros({width})});
    c = width;
  }
  p.head.push_back({"fc.weight", kaiming_uniform(rng, {p.feature_dim, num_classes}, p.feature_dim)});
  p.head.push_back({"fc.bias", Tensor::zeros({num_classes})});
  return p;
}

ModelParams mlp_init(std::int64_t in_dim, std::int64_t num_classes, std::int64_t hidden,
                     std::uint64_t seed) {
  if (in_dim < 1 || hidden < 1 || num_classes < 1) {
    throw ContractError("mlp_init: dimensions must be >= 1");
  }
  ModelParams p;
  p.arch = Arch::kMlp;
  p.in_dim = in_dim;
  p.width = hidden;
  p.num_classes = num_classes;
  p.feature_dim = hidden;
  Rng rng(seed);
  p.extractor.push_back({"fc1.weight", kaiming_uniform(rng, {in_dim, hidden}, in_dim)});
  p.extractor.push_back({"fc1.bias", Tensor::zeros({hidden})});
  p.head.push_back({"fc2.weight", kaiming_uniform(rng, {hidden, num_classes}, hidden)});
  p.head.push_back({"fc2.bias", Tensor::zeros({num_classes})});
  return p;
}

Tensor extract_features(const ModelParams& params, const Tensor& batch) {
  if (params.arch == Arch::kMlp) {
    if (batch.rank() < 1) throw ContractError("mlp: rank-0 batch");
    Tensor x = batch.rank() == 2 ? batch : flatten(batch);
    if (x.dim(1) != params.in_dim) {
      throw ContractError("mlp: batch " + shape_string(batch.shape()) + " does not have " +
                          std::to_string(params.in_dim) + " values per sample");
    }
    return relu(linear(x, find(params.extractor, "fc1.weight"),
                       find(params.extractor, "fc1.bias")));
  }
  const Shape want{params.in_channels, params.image_side, params.image_side};
  if (batch.rank() != 4 || !std::equal(want.begin(), want.end(), batch.shape().begin() + 1)) {
    throw ContractError("convnet: batch " + shape_string(batch.shape()) +
                        " does not match [N," + std::to_string(params.in_channels) + "," +
                        std::to_string(params.image_side) + "," +
                        std::to_string(params.image_side) + "]");
  }
  Tensor x = batch;
  for (int block = 1; block <= 3; ++block) {
    const std::string i = std::to_string(block);
    x = conv2d(x, find(params.extractor, "conv" + i + ".weight"), 1, 1);
    x = add(x, channel_broadcast(find(params.extractor, "conv" + i + ".bias"), x.shape()));
    x = group_norm(x, find(params.extractor, "norm" + i + ".weight"),
                   find(params.extractor, "norm" + i + ".bias"), params.norm_groups, kNormEps);
    x = relu(x);
    x = avg_pool2d(x, 2);
  }
  return flatten(x);
}

Tensor head_logits(const ModelParams& params, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != params.feature_dim) {
    throw ContractError("head: features " + shape_string(features.shape()) +
                        " do not have width " + std::to_string(params.feature_dim));
  }
  const char* w = params.arch == Arch::kMlp ? "fc2.weight" : "fc.weight";
  const char* b = params.arch == Arch::kMlp ? "fc2.bias" : "fc.bias";
  return linear(features, find(params.head, w), find(params.head, b));
}

Tensor predict_logits(const ModelParams& params, const Tensor& batch) {
  return head_logits(params, extract_features(params, batch));
}

ModelParams with_values(const ModelParams& params, const std::vector<Tensor>& values) {
  if (values.size() != params.size()) {
    throw ContractError("model: expected " + std::to_string(params.size()) +
                        " tensors, got " + std::to_string(values.size()));
  }
  ModelParams out = params;
  std::size_t i = 0;
  for (NamedTensors* set : {&out.extractor, &out.head}) {
    for (NamedTensor& t : *set) {
      if (values[i].shape() != t.value.shape()) {
        throw ContractError("model: shape " + shape_string(values[i].shape()) + " for '" +
                            t.name + "' expected " + shape_string(t.value.shape()));
      }
      t.value = values[i++];
    }
  }
  return out;
}

ModelParams attach(const ModelParams& params, Record& record) {
  ModelParams out = params;
  for (NamedTensors* set : {&out.extractor, &out.head}) {
    for (NamedTensor& t : *set) t.value = record.leaf(t.value);
  }
  return out;
}

ModelParams detached(const ModelParams& params) {
  ModelParams out = params;
  for (NamedTensors* set : {&out.extractor, &out.head}) {
    for (NamedTensor& t : *set) t.value = t.value.detach();
  }
  return out;
}

std::vector<Tensor> values_of(const NamedTensors& set) {
  std::vector<Tensor> out;
  out.reserve(set.size());
  for (const NamedTensor& t : set) out.push_back(t.value);
  return out;
}

Container model_to_container(const ModelParams& params) {
  Container c;
  c.kind = "model";
  c.meta = {{"arch", arch_name(params.arch)},
            {"in_channels", params.in_channels},
            {"image_side", params.image_side},
            {"in_dim", params.in_dim},
            {"width", params.width},
            {"num_classes", params.num_classes},
            {"feature_dim", params.feature_dim},
            {"norm_groups", params.norm_groups},
            {"extractor_tensors", params.extractor.size()}};
  for (const NamedTensor& t : params.all()) c.tensors.push_back({t.name, t.value.detach()});
  return c;
}

ModelParams model_from_container(const Container& c) {
  if (c.kind != "model") throw ContractError("checkpoint: kind is '" + c.kind + "', not 'model'");
  ModelParams p;
  try {
    p.arch = parse_arch(c.meta.at("arch").get<std::string>());
    p.in_channels = c.meta.at("in_channels").get<std::int64_t>();
    p.image_side = c.meta.at("image_side").get<std::int64_t>();
    p.in_dim = c.meta.at("in_dim").get<std::int64_t>();
    p.width = c.meta.at("width").get<std::int64_t>();
    p.num_classes = c.meta.at("num_classes").get<std::int64_t>();
    p.feature_dim = c.meta.at("feature_dim").get<std::int64_t>();
    p.norm_groups = c.meta.at("norm_groups").get<int>();
    const auto n_ext = c.meta.at("extractor_tensors").get<std::size_t>();
    if (n_ext > c.tensors.size()) throw ContractError("checkpoint: extractor count exceeds tensors");
    p.extractor.assign(c.tensors.begin(), c.tensors.begin() + static_cast<std::ptrdiff_t>(n_ext));
    p.head.assign(c.tensors.begin() + static_cast<std::ptrdiff_t>(n_ext), c.tensors.end());
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("checkpoint: bad model metadata: ") + e.what());
  }
  // Rebuild a reference model and require matching names and shapes.
  ModelParams ref = p.arch == Arch::kConvNet
                        ? convnet_init(p.in_channels, p.num_classes, p.width, p.image_side, 0)
                        : mlp_init(p.in_dim, p.num_classes, p.width, 0);
  const NamedTensors want = ref.all();
  const NamedTensors got = p.all();
  if (want.size() != got.size() || ref.extractor.size() != p.extractor.size()) {
    throw ContractError("checkpoint: tensor count does not match the architecture");
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].name != got[i].name || want[i].value.shape() != got[i].value.shape()) {
      throw ContractError("checkpoint: tensor '" + got[i].name + "' " +
                          shape_string(got[i].value.shape()) + " does not match '" +
                          want[i].name + "' " + shape_string(want[i].value.shape()));
    }
  }
  return p;
}

}  // namespace fedvirt
