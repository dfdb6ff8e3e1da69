#include "fedvirt/tensor.h"

#include <atomic>
#include <bit>
#include <cmath>
#include <optional>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "fedvirt/errors.h"
#include "fedvirt/ops.h"

namespace fedvirt {
namespace {

thread_local Record* g_active_record = nullptr;
thread_local bool g_grad_enabled = true;
thread_local BranchMonitor* g_branch_monitor = nullptr;

std::atomic<std::uint64_t> g_next_record_id{1};

// Branch-free so the loop vectorizes: an all-ones exponent marks Inf or NaN.
bool all_finite(std::span<const double> values) {
  std::uint64_t bad = 0;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    bad |= static_cast<std::uint64_t>((bits & 0x7ff0000000000000ULL) == 0x7ff0000000000000ULL);
  }
  return bad == 0;
}

#if defined(__GLIBC__)
// Op outputs are large, short-lived buffers. Left to the defaults, glibc maps
// and unmaps each one, and the page faults cost more than the arithmetic.
const bool g_heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d < 0) throw ContractError("negative extent in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_->size())) {
    throw ContractError("tensor: shape " + shape_string(shape_) + " holds " +
                        std::to_string(shape_numel(shape_)) + " values, got " +
                        std::to_string(data_->size()));
  }
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ContractError("tensor: axis " + std::to_string(axis) +
                        " out of range for shape " + shape_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("tensor: item() on shape " + shape_string(shape_));
  }
  return (*data_)[0];
}

std::span<double> Tensor::mutable_data() {
  if (!data_) return {};
  if (requires_grad()) {
    throw ContractError("tensor: cannot mutate a tensor attached to a computation record");
  }
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return {data_->data(), data_->size()};
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  if (!data_) return Tensor();
  return Tensor(shape_, *data_);
}

Record::Record() : id_(g_next_record_id.fetch_add(1)) {}

Tensor Record::leaf(const Tensor& value) {
  if (!value.defined()) throw ContractError("record: leaf from an undefined tensor");
  return append("leaf", {}, value.detach(), VjpFn());
}

std::string_view Record::op_name(std::int64_t node) const {
  if (node < 0 || node >= static_cast<std::int64_t>(entries_.size())) return {};
  return entries_[static_cast<std::size_t>(node)].op;
}

Tensor Record::append(std::string_view op, std::vector<Tensor> inputs,
                      Tensor output, VjpFn vjp) {
  output.record_id_ = id_;
  output.node_ = static_cast<std::int64_t>(entries_.size());
  entries_.push_back(Entry{std::string(op), std::move(inputs), output, std::move(vjp)});
  return output;
}

RecordScope::RecordScope(Record& record) : previous_(g_active_record) {
  g_active_record = &record;
}

RecordScope::~RecordScope() { g_active_record = previous_; }

NoGradScope::NoGradScope() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradScope::~NoGradScope() { g_grad_enabled = previous_; }

Record* active_record() { return g_active_record; }

bool grad_enabled() { return g_grad_enabled; }

Tensor record_op(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                 VjpFn vjp) {
  if (!all_finite(output.data())) {
    throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                       shape_string(output.shape()));
  }
  Record* rec = g_active_record;
  if (rec == nullptr || !g_grad_enabled) return output;
  bool attach = false;
  for (const Tensor& in : inputs) {
    if (!in.requires_grad()) continue;
    if (in.record_id() != rec->id()) {
      throw ContractError(std::string(op) +
                          ": input belongs to a different computation record");
    }
    attach = true;
  }
  if (!attach) return output;
  return rec->append(op, std::move(inputs), std::move(output), std::move(vjp));
}

std::vector<Tensor> backward(const Tensor& loss, std::span<const Tensor> wrt,
                             BackwardOptions options) {
  if (!loss.defined() || loss.rank() != 0) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(loss.shape()));
  }
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  if (!loss.requires_grad()) {
    for (const Tensor& w : wrt) result.push_back(Tensor::zeros(w.shape()));
    return result;
  }
  Record* rec = g_active_record;
  if (rec == nullptr || rec->id() != loss.record_id()) {
    throw ContractError("backward: loss does not belong to the active computation record");
  }
  for (const Tensor& w : wrt) {
    if (w.requires_grad() && w.record_id() != rec->id()) {
      throw ContractError("backward: leaf belongs to a different computation record");
    }
  }

  const auto n = static_cast<std::size_t>(loss.node()) + 1;
  std::vector<char> needs(n, 0);
  for (const Tensor& w : wrt) {
    if (w.requires_grad() && static_cast<std::size_t>(w.node()) < n) {
      needs[static_cast<std::size_t>(w.node())] = 1;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = rec->entries_[i];
    if (!e.vjp) continue;
    for (const Tensor& in : e.inputs) {
      if (in.requires_grad() && needs[static_cast<std::size_t>(in.node())]) {
        needs[i] = 1;
        break;
      }
    }
  }

  std::vector<Tensor> grads(n);
  grads[n - 1] = Tensor::scalar(1.0);
  std::optional<NoGradScope> no_grad;
  if (!options.create_graph) no_grad.emplace();

  for (std::size_t i = n; i-- > 0;) {
    if (!grads[i].defined() || !needs[i]) continue;
    // Entries live in a deque, so this reference survives appends made while
    // recording the gradient computation.
    const auto& e = rec->entries_[i];
    if (!e.vjp) continue;
    std::vector<char> in_needs(e.inputs.size(), 0);
    bool any = false;
    for (std::size_t j = 0; j < e.inputs.size(); ++j) {
      const Tensor& in = e.inputs[j];
      if (in.requires_grad() && needs[static_cast<std::size_t>(in.node())]) {
        in_needs[j] = 1;
        any = true;
      }
    }
    if (!any) continue;
    VjpContext ctx{e.inputs, e.output, grads[i], in_needs};
    std::vector<Tensor> in_grads = e.vjp(ctx);
    if (in_grads.size() != e.inputs.size()) {
      throw ContractError("backward: vjp of '" + e.op + "' returned " +
                          std::to_string(in_grads.size()) + " gradients for " +
                          std::to_string(e.inputs.size()) + " inputs");
    }
    for (std::size_t j = 0; j < e.inputs.size(); ++j) {
      if (!in_needs[j] || !in_grads[j].defined()) continue;
      const Tensor& in = e.inputs[j];
      if (in_grads[j].shape() != in.shape()) {
        throw ContractError("backward: vjp of '" + e.op + "' produced shape " +
                            shape_string(in_grads[j].shape()) + " for input of shape " +
                            shape_string(in.shape()));
      }
      Tensor& slot = grads[static_cast<std::size_t>(in.node())];
      slot = slot.defined() ? add(slot, in_grads[j]) : std::move(in_grads[j]);
    }
    if (!options.create_graph) grads[i] = Tensor();
  }

  for (const Tensor& w : wrt) {
    if (w.requires_grad() && static_cast<std::size_t>(w.node()) < n &&
        grads[static_cast<std::size_t>(w.node())].defined()) {
      result.push_back(grads[static_cast<std::size_t>(w.node())]);
    } else {
      result.push_back(Tensor::zeros(w.shape()));
    }
  }
  return result;
}

BranchMonitor::BranchMonitor() : previous_(g_branch_monitor) {
  g_branch_monitor = this;
}

BranchMonitor::~BranchMonitor() { g_branch_monitor = previous_; }

bool BranchMonitor::active() { return g_branch_monitor != nullptr; }

void BranchMonitor::note(std::uint64_t branch_hash) {
  if (g_branch_monitor == nullptr) return;
  std::uint64_t& s = g_branch_monitor->signature_;
  s ^= branch_hash + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
}

}  // namespace fedvirt
