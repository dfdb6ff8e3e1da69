#pragma once

#include <cstdint>

#include "fedvirt/ops.h"

namespace fedvirt {

// One draw of the differentiable augmentation. The same draw is applied to
// every image of a batch, and a seed always yields the same draw, so two
// batches augmented with one seed see the same transform.
struct AugmentParams {
  std::int64_t shift_x = 0;  // crop-with-pad offsets, pixels
  std::int64_t shift_y = 0;
  double scale_x = 1.0;      // horizontal scale about the centre
  double contrast = 1.0;     // y = contrast * x + brightness
  double brightness = 0.0;

  bool identity() const;
};

// Shifts up to 12.5% of the side, scale in [0.8, 1.2], contrast in
// [0.8, 1.2], brightness in [-0.1, 0.1].
AugmentParams draw_augment(std::uint64_t seed, std::int64_t side);

// Differentiable with respect to `batch` [N,C,S,S].
Tensor apply_augment(const Tensor& batch, const AugmentParams& p);

Tensor dsa_augment(const Tensor& batch, std::uint64_t shared_seed);

}  // namespace fedvirt
