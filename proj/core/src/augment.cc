#include "fedvirt/augment.h"

#include <cmath>

#include "fedvirt/errors.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

// Row operator of a zero-filled shift by `s` pixels: out[i] = in[i - s].
Tensor shift_matrix(std::int64_t side, std::int64_t s) {
  std::vector<double> m(static_cast<std::size_t>(side * side), 0.0);
  for (std::int64_t i = 0; i < side; ++i) {
    const std::int64_t j = i - s;
    if (j >= 0 && j < side) m[i * side + j] = 1.0;
  }
  return Tensor({side, side}, std::move(m));
}

// Bilinear resampling about the centre: out[j] = in(mid + (j - mid) / scale).
Tensor scale_matrix(std::int64_t side, double scale) {
  std::vector<double> m(static_cast<std::size_t>(side * side), 0.0);
  const double mid = (static_cast<double>(side) - 1.0) / 2.0;
  for (std::int64_t j = 0; j < side; ++j) {
    const double src = mid + (static_cast<double>(j) - mid) / scale;
    const double f = std::floor(src);
    const double a = src - f;
    const auto k = static_cast<std::int64_t>(f);
    if (k >= 0 && k < side) m[j * side + k] += 1.0 - a;
    if (k + 1 >= 0 && k + 1 < side) m[j * side + k + 1] += a;
  }
  return Tensor({side, side}, std::move(m));
}

}  // namespace

bool AugmentParams::identity() const {
  return shift_x == 0 && shift_y == 0 && scale_x == 1.0 && contrast == 1.0 && brightness == 0.0;
}

AugmentParams draw_augment(std::uint64_t seed, std::int64_t side) {
  Rng rng(seed);
  const auto max_shift = static_cast<std::int64_t>(std::floor(0.125 * static_cast<double>(side)));
  AugmentParams p;
  p.shift_x = static_cast<std::int64_t>(rng.below(2 * max_shift + 1)) - max_shift;
  p.shift_y = static_cast<std::int64_t>(rng.below(2 * max_shift + 1)) - max_shift;
  p.scale_x = rng.uniform(0.8, 1.2);
  p.contrast = rng.uniform(0.8, 1.2);
  p.brightness = rng.uniform(-0.1, 0.1);
  return p;
}

Tensor apply_augment(const Tensor& batch, const AugmentParams& p) {
  if (batch.rank() != 4 || batch.dim(2) != batch.dim(3)) {
    throw ContractError("augment: expected [N,C,S,S], got " + shape_string(batch.shape()));
  }
  if (!(p.scale_x > 0.0)) throw ContractError("augment: scale must be positive");
  if (p.identity()) return batch;
  const std::int64_t side = batch.dim(2);
  Tensor y = batch;
  if (p.shift_x != 0 || p.shift_y != 0 || p.scale_x != 1.0) {
    // Constants: neither matrix is attached to a record.
    Tensor a = shift_matrix(side, p.shift_y);
    Tensor b = matmul(scale_matrix(side, p.scale_x), shift_matrix(side, p.shift_x));
    y = separable_transform(batch, a, b);
  }
  if (p.contrast != 1.0) y = scale(y, p.contrast);
  if (p.brightness != 0.0) y = add_scalar(y, p.brightness);
  return y;
}

Tensor dsa_augment(const Tensor& batch, std::uint64_t shared_seed) {
  if (batch.rank() != 4) throw ContractError("augment: expected [N,C,S,S]");
  return apply_augment(batch, draw_augment(shared_seed, batch.dim(2)));
}

}  // namespace fedvirt
