#include <algorithm>
#include <cmath>

#include "fedvirt/errors.h"
#include "fedvirt/tensor.h"

namespace fedvirt {
namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

// Evaluates f on a fresh record so f may itself call backward().
Probe probe(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  Record rec;
  RecordScope scope(rec);
  Tensor leaf = rec.leaf(x);
  BranchMonitor monitor;
  const double v = f(leaf).item();
  return {v, monitor.signature()};
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double h, double tol) {
  if (!point.defined()) throw ContractError("grad_check: undefined point");
  GradCheckReport report;

  Tensor analytic;
  std::uint64_t center_signature = 0;
  {
    Record rec;
    RecordScope scope(rec);
    Tensor leaf = rec.leaf(point);
    BranchMonitor monitor;
    Tensor y = f(leaf);
    center_signature = monitor.signature();
    const Tensor wrt[] = {leaf};
    analytic = backward(y, wrt)[0];
  }

  const std::int64_t n = point.numel();
  std::vector<double> numeric(static_cast<std::size_t>(n), 0.0);
  std::vector<char> kink(static_cast<std::size_t>(n), 0);
  Tensor work = point.clone();
  for (std::int64_t i = 0; i < n; ++i) {
    const double x0 = point.at(i);
    work.mutable_data()[i] = x0 + h;
    const Probe plus = probe(f, work);
    work.mutable_data()[i] = x0 - h;
    const Probe minus = probe(f, work);
    work.mutable_data()[i] = x0;
    numeric[i] = (plus.value - minus.value) / (2.0 * h);
    kink[i] = plus.signature != center_signature || minus.signature != center_signature;
  }

  double scale = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (kink[i]) continue;
    scale = std::max({scale, std::abs(analytic.at(i)), std::abs(numeric[i])});
  }
  for (std::int64_t i = 0; i < n; ++i) {
    if (kink[i]) {
      ++report.kink_coords;
      continue;
    }
    ++report.coords_checked;
    const double a = analytic.at(i);
    const double num = numeric[i];
    const double abs_err = std::abs(a - num);
    const double denom = std::max({std::abs(a), std::abs(num), 1e-3 * scale, 1e-12});
    const double rel = abs_err / denom;
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel > report.max_rel_error || report.worst_index < 0) {
      report.max_rel_error = std::max(report.max_rel_error, rel);
      if (rel >= report.max_rel_error) report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error <= tol && (n == 0 || report.coords_checked > 0);
  return report;
}

}  // namespace fedvirt
