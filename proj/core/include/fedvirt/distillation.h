#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedvirt/data.h"
#include "fedvirt/losses.h"
#include "fedvirt/models.h"

namespace fedvirt {

// Per-channel pixel bounds applied after every distillation step.
struct ChannelBounds {
  std::vector<double> lo;
  std::vector<double> hi;
};

// Observed per-channel min and max of the images.
ChannelBounds channel_bounds(const LabeledDataset& d);
// The declared range repeated over the channels.
ChannelBounds declared_bounds(const LabeledDataset& d);

// Synthetic images, class-major: rows [k*ipc, (k+1)*ipc) belong to the k-th
// class present. Labels never change after construction.
struct VirtualDataset {
  Tensor images;  // [classes*ipc, C, S, S]
  Labels labels;
  std::int64_t ipc = 0;
  std::int64_t class_count = 0;
  ChannelBounds bounds;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  // Classes present, in storage order.
  Labels classes() const;
};

// Throws ContractError unless counts, ordering and bounds hold.
void check_virtual(const VirtualDataset& v);

struct ClassStat {
  std::int64_t label = 0;
  Tensor mean;  // [C,S,S]
  Tensor std;   // population std, [C,S,S]
  std::int64_t count = 0;
};

// Classes without samples are absent.
struct ClassStats {
  std::int64_t class_count = 0;
  std::vector<ClassStat> classes;  // ascending label
};

ClassStats class_stats(const LabeledDataset& d);
// Per class, the unweighted mean of the means and of the stds over the
// clients that hold the class.
ClassStats aggregate_stats(std::span<const ClassStats> clients);
// ipc elementwise Gaussian draws per class, clamped to `bounds`.
VirtualDataset init_virtual(const ClassStats& stats, std::int64_t ipc,
                            const ChannelBounds& bounds, std::uint64_t seed);

struct DistillResult {
  VirtualDataset data;
  // Distribution matching: class-mean feature MMD against the whole real set
  // before and after. Gradient matching: gradient distance before and after.
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> trace;  // loss of each step, before its update
};

struct DistributionMatchOptions {
  std::int64_t steps = 200;
  double lr = 1.0;
  std::int64_t real_batch_per_class = 32;
  bool augment = false;
  std::uint64_t seed = 0;
};

// SGD on the virtual pixels against the per-class feature MMD of a frozen
// extractor. Every virtual class must occur in `real`.
DistillResult distribution_match(const LabeledDataset& real, const VirtualDataset& virt,
                                 const ModelParams& extractor,
                                 const DistributionMatchOptions& options);

struct GradientMatchOptions {
  std::int64_t steps = 2000;
  double lr = 0.1;
};

// SGD on the virtual pixels so the mean CE gradient of `model` on the whole
// virtual set approaches `target` under gradient_distance.
DistillResult gradient_match(const VirtualDataset& virt, const NamedTensors& target,
                             const ModelParams& model, const GradientMatchOptions& options);

// Mean CE gradient over the batch, named like model.all().
NamedTensors ce_gradient(const ModelParams& model, const Tensor& images, const Labels& labels);

// sum_k |mean feat(a_k) - mean feat(b_k)|^2 over the classes both sides hold.
double class_feature_mmd(const ModelParams& model, const Tensor& a_images, const Labels& a_labels,
                         const Tensor& b_images, const Labels& b_labels,
                         std::int64_t class_count);

// Features of a large batch without recording, in chunks.
Tensor features_no_grad(const ModelParams& model, const Tensor& images);
Tensor logits_no_grad(const ModelParams& model, const Tensor& images);

Tensor clamp_channels(const Tensor& images, const ChannelBounds& bounds);

// Container kind "virtual": tensor "images"; labels, ipc, class count and
// bounds in meta.
Container virtual_to_container(const VirtualDataset& v);
VirtualDataset virtual_from_container(const Container& c);

}  // namespace fedvirt
