#pragma once

#include <map>
#include <span>
#include <string>

#include "fedvirt/models.h"
#include "fedvirt/ops.h"

namespace fedvirt {

struct LossValue {
  Tensor value;  // rank 0, differentiable
  std::map<std::string, double> breakdown;
};

// Mean over rows of -log softmax(logits)[label].
LossValue cross_entropy(const Tensor& logits, const Labels& labels);

// Sum over classes of the squared distance between real and virtual feature
// means. real[k] and virt[k] hold the rows of class k; both must be nonempty.
LossValue mmd_per_class(std::span<const Tensor> real, std::span<const Tensor> virt);

// Supervised contrastive loss summed over the pooled rows (global rows first,
// then local). Rows are L2-normalized; every row needs another row of its class.
LossValue supcon(const Tensor& global_feats, const Labels& global_labels,
                 const Tensor& local_feats, const Labels& local_labels,
                 double temperature);

struct TotalLossOptions {
  double lambda = 10.0;
  double temperature = 0.07;
  // CE over global and local rows together; otherwise local rows only.
  bool ce_includes_global = true;
};

// CE + lambda * SupCon, with the extractor run once on [global; local].
// Breakdown keys: "ce", "con" (absent when lambda is 0).
LossValue total_loss(const ModelParams& params, const Tensor& local_images,
                     const Labels& local_labels, const Tensor& global_images,
                     const Labels& global_labels, const TotalLossOptions& options);

// Sum over tensors of 1 - cos(a, b). A tensor where both sides are zero adds
// 0; one zero side adds 1. Differentiable with respect to `a`.
LossValue gradient_distance(const NamedTensors& a, const NamedTensors& b);

// (mu / 2) * sum of squared distances to `anchor`.
LossValue prox_term(const ModelParams& params, const ModelParams& anchor, double mu);

}  // namespace fedvirt
