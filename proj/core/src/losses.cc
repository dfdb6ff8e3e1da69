#include "fedvirt/losses.h"

#include <algorithm>
#include <limits>

#include "fedvirt/errors.h"

namespace fedvirt {

LossValue cross_entropy(const Tensor& logits, const Labels& labels) {
  if (logits.rank() != 2 || logits.dim(0) < 1) {
    throw ContractError("cross_entropy: expected nonempty [N,K] logits, got " +
                        shape_string(logits.shape()));
  }
  Tensor picked = gather(log_softmax(logits), labels);
  LossValue out{scale(mean(picked), -1.0), {}};
  out.breakdown["ce"] = out.value.item();
  return out;
}

LossValue mmd_per_class(std::span<const Tensor> real, std::span<const Tensor> virt) {
  if (real.size() != virt.size()) {
    throw ContractError("mmd_per_class: " + std::to_string(real.size()) + " real classes vs " +
                        std::to_string(virt.size()) + " virtual classes");
  }
  if (real.empty()) throw ContractError("mmd_per_class: no classes");
  Tensor total;
  LossValue out;
  for (std::size_t k = 0; k < real.size(); ++k) {
    for (const Tensor* t : {&real[k], &virt[k]}) {
      if (!t->defined() || t->rank() != 2 || t->dim(0) == 0) {
        throw ContractError("mmd_per_class: class " + std::to_string(k) +
                            " is empty or not [n,d] on one side");
      }
    }
    if (real[k].dim(1) != virt[k].dim(1)) {
      throw ContractError("mmd_per_class: feature widths differ for class " +
                          std::to_string(k));
    }
    const auto nr = static_cast<double>(real[k].dim(0));
    const auto nv = static_cast<double>(virt[k].dim(0));
    // Column means as [1,n] x [n,d] products.
    Tensor mr = matmul(Tensor::full({1, real[k].dim(0)}, 1.0 / nr), real[k]);
    Tensor mv = matmul(Tensor::full({1, virt[k].dim(0)}, 1.0 / nv), virt[k]);
    Tensor d = sub(mr, mv);
    Tensor term = sum(mul(d, d));
    out.breakdown["class" + std::to_string(k)] = term.item();
    total = total.defined() ? add(total, term) : term;
  }
  out.value = total;
  return out;
}

LossValue supcon(const Tensor& global_feats, const Labels& global_labels,
                 const Tensor& local_feats, const Labels& local_labels, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("supcon: temperature must be positive");
  if (global_feats.rank() != 2 || local_feats.rank() != 2 ||
      global_feats.dim(1) != local_feats.dim(1)) {
    throw ContractError("supcon: feature blocks " + shape_string(global_feats.shape()) +
                        " and " + shape_string(local_feats.shape()) + " do not conform");
  }
  if (static_cast<std::int64_t>(global_labels.size()) != global_feats.dim(0) ||
      static_cast<std::int64_t>(local_labels.size()) != local_feats.dim(0)) {
    throw ContractError("supcon: label counts do not match feature rows");
  }
  Labels labels = global_labels;
  labels.insert(labels.end(), local_labels.begin(), local_labels.end());
  const auto n = static_cast<std::int64_t>(labels.size());
  if (n < 2) throw ContractError("supcon: pooled batch needs at least 2 rows");

  std::vector<double> weights(static_cast<std::size_t>(n * n), 0.0);
  std::vector<double> others(static_cast<std::size_t>(n * n), 1.0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t positives = 0;
    for (std::int64_t j = 0; j < n; ++j) positives += j != i && labels[j] == labels[i];
    if (positives == 0) {
      throw ContractError("supcon: sample " + std::to_string(i) + " of class " +
                          std::to_string(labels[i]) + " has no positive");
    }
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) {
        weights[i * n + j] = 1.0 / static_cast<double>(positives);
      }
    }
    others[i * n + i] = 0.0;
  }

  const Tensor parts[] = {global_feats, local_feats};
  Tensor z = l2_normalize(concat0(parts));
  Tensor sim = scale(matmul(z, transpose(z)), 1.0 / temperature);

  // Row maxima over j != i are constants: they cancel between the two terms
  // below. The diagonal is left out so the denominator cannot underflow.
  std::vector<double> row_max(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i) m = std::max(m, sim.at(i * n + j));
    }
    row_max[i] = m;
  }
  Tensor shifted = sub(sim, row_broadcast(Tensor({n}, std::move(row_max)), n));
  const Tensor mask({n, n}, std::move(others));
  Tensor log_den = log(row_sum(mul(exp(mul(shifted, mask)), mask)));
  Tensor pos = row_sum(mul(shifted, Tensor({n, n}, std::move(weights))));
  LossValue out{sum(sub(log_den, pos)), {}};
  out.breakdown["con"] = out.value.item();
  return out;
}

LossValue total_loss(const ModelParams& params, const Tensor& local_images,
                     const Labels& local_labels, const Tensor& global_images,
                     const Labels& global_labels, const TotalLossOptions& options) {
  if (local_images.rank() < 1 || local_images.dim(0) == 0 || global_images.rank() < 1 ||
      global_images.dim(0) == 0) {
    throw ContractError("total_loss: local and global batches must be nonempty");
  }
  if (options.lambda < 0.0) throw ContractError("total_loss: lambda must be >= 0");
  const std::int64_t g = global_images.dim(0);
  const std::int64_t n = g + local_images.dim(0);
  const Tensor images[] = {global_images, local_images};
  Tensor feats = extract_features(params, concat0(images));
  Tensor logits = head_logits(params, feats);

  LossValue ce;
  if (options.ce_includes_global) {
    Labels all = global_labels;
    all.insert(all.end(), local_labels.begin(), local_labels.end());
    ce = cross_entropy(logits, all);
  } else {
    ce = cross_entropy(slice0(logits, g, n), local_labels);
  }
  LossValue out;
  out.breakdown["ce"] = ce.breakdown["ce"];
  if (options.lambda == 0.0) {
    out.value = ce.value;
    return out;
  }
  LossValue con = supcon(slice0(feats, 0, g), global_labels, slice0(feats, g, n),
                         local_labels, options.temperature);
  out.breakdown["con"] = con.breakdown["con"];
  out.value = add(ce.value, scale(con.value, options.lambda));
  return out;
}

LossValue gradient_distance(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) {
    throw ContractError("gradient_distance: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + " tensors");
  }
  LossValue out;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) {
      throw ContractError("gradient_distance: '" + a[i].name + "' " +
                          shape_string(a[i].value.shape()) + " does not match '" + b[i].name +
                          "' " + shape_string(b[i].value.shape()));
    }
    const Tensor& x = a[i].value;
    const Tensor& y = b[i].value;
    Tensor na2 = sum(mul(x, x));
    Tensor nb2 = sum(mul(y, y));
    Tensor term;
    if (na2.item() == 0.0 || nb2.item() == 0.0) {
      term = Tensor::scalar(na2.item() == 0.0 && nb2.item() == 0.0 ? 0.0 : 1.0);
    } else {
      Tensor cos = div(sum(mul(x, y)), pow(mul(na2, nb2), 0.5));
      term = scale(add_scalar(cos, -1.0), -1.0);
    }
    out.breakdown[a[i].name] = term.item();
    total = add(total, term);
  }
  out.value = total;
  return out;
}

LossValue prox_term(const ModelParams& params, const ModelParams& anchor, double mu) {
  const NamedTensors p = params.all();
  const NamedTensors q = anchor.all();
  if (p.size() != q.size()) throw ContractError("prox_term: parameter counts differ");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].value.shape() != q[i].value.shape()) {
      throw ContractError("prox_term: shape mismatch for '" + p[i].name + "': " +
                          shape_string(p[i].value.shape()) + " vs " +
                          shape_string(q[i].value.shape()));
    }
    Tensor d = sub(p[i].value, q[i].value.detach());
    total = add(total, sum(mul(d, d)));
  }
  LossValue out{scale(total, mu / 2.0), {}};
  out.breakdown["prox"] = out.value.item();
  return out;
}

}  // namespace fedvirt
