#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace fedvirt {

struct GradCheckEntry {
  std::string name;
  int points = 0;
  double max_rel_error = 0.0;
  std::int64_t kink_coords = 0;
  bool passed = false;
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTol = 1e-4;
inline constexpr int kGradCheckPoints = 5;

// Finite-difference check of every primitive, every loss, the augmentation,
// both models end to end and the gradient-matching objective, each at
// kGradCheckPoints random points. Prints one line per check to `log` if given.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 0, std::ostream* log = nullptr);

}  // namespace fedvirt
