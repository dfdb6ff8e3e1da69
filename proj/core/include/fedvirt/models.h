#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedvirt/tensor.h"

namespace fedvirt {

enum class Arch { kConvNet, kMlp };

std::string arch_name(Arch arch);
Arch parse_arch(const std::string& name);

// Classifier f = head(extractor(x)). Immutable by convention: training steps
// build a new ModelParams instead of writing into this one.
struct ModelParams {
  Arch arch = Arch::kConvNet;
  NamedTensors extractor;
  NamedTensors head;
  std::int64_t in_channels = 0;
  std::int64_t image_side = 0;  // convnet only
  std::int64_t in_dim = 0;      // mlp only
  std::int64_t width = 0;       // conv channels or mlp hidden units
  std::int64_t num_classes = 0;
  std::int64_t feature_dim = 0;
  int norm_groups = 1;

  // Extractor tensors followed by head tensors.
  NamedTensors all() const;
  std::size_t size() const { return extractor.size() + head.size(); }
};

// Three conv3x3 -> GroupNorm -> ReLU -> AvgPool2 blocks, then one linear layer.
ModelParams convnet_init(std::int64_t in_channels, std::int64_t num_classes,
                         std::int64_t width, std::int64_t image_side,
                         std::uint64_t seed);

// Linear -> ReLU extractor, linear head. Inputs are flattened per sample.
ModelParams mlp_init(std::int64_t in_dim, std::int64_t num_classes,
                     std::int64_t hidden, std::uint64_t seed);

Tensor extract_features(const ModelParams& params, const Tensor& batch);
Tensor head_logits(const ModelParams& params, const Tensor& features);
Tensor predict_logits(const ModelParams& params, const Tensor& batch);

// Same architecture with tensors replaced in all() order. Shapes must match.
ModelParams with_values(const ModelParams& params, const std::vector<Tensor>& values);

// Registers every parameter as a leaf of `record`.
ModelParams attach(const ModelParams& params, Record& record);

// Drops any record attachment.
ModelParams detached(const ModelParams& params);

std::vector<Tensor> values_of(const NamedTensors& set);

struct Container;
// Checkpoint conversion. The container kind is "model"; meta carries the
// architecture fields and the extractor tensor count.
Container model_to_container(const ModelParams& params);
ModelParams model_from_container(const Container& c);

}  // namespace fedvirt
