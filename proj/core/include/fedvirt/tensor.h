#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedvirt {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float64 tensor. Copies share the underlying buffer; a
// tensor attached to a computation record additionally carries its node id.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const {
    return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
  }

  std::span<const double> data() const {
    if (!data_) return {};
    return {data_->data(), data_->size()};
  }
  double item() const;
  double at(std::int64_t flat_index) const { return data()[flat_index]; }

  // Writable view of a detached tensor. Copies the buffer first when it is
  // shared with another tensor.
  std::span<double> mutable_data();

  bool requires_grad() const { return node_ >= 0; }
  std::uint64_t record_id() const { return record_id_; }
  std::int64_t node() const { return node_; }

  // Same buffer, no record attachment.
  Tensor detach() const;
  // Independent copy of the values, detached.
  Tensor clone() const;

 private:
  friend class Record;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::uint64_t record_id_ = 0;
  std::int64_t node_ = -1;
};

// Arguments handed to a primitive's vector-Jacobian product.
struct VjpContext {
  std::span<const Tensor> inputs;
  const Tensor& output;
  const Tensor& grad;
  // needs[i] is true when inputs[i] lies on a path to a requested leaf.
  std::span<const char> needs;
};

// Returns one gradient per input (an undefined Tensor where not needed). The
// product must be written with public ops so that it is itself recorded when
// backward runs with create_graph.
using VjpFn = std::function<std::vector<Tensor>(const VjpContext&)>;

struct BackwardOptions {
  // Record the gradient computation so the returned gradients can be
  // differentiated again.
  bool create_graph = false;
};

// Checks `output` for non-finite values, then attaches it to the active record
// when recording is on and some input requires grad.
Tensor record_op(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                 VjpFn vjp);

// dLoss/dLeaf for each leaf in `wrt`, in order. Leaves with no path to the
// loss receive zeros of their own shape.
std::vector<Tensor> backward(const Tensor& loss, std::span<const Tensor> wrt,
                             BackwardOptions options = {});

// Ordered log of primitive applications. Entries are appended in execution
// order, so every input node precedes its consumer. A record is used by one
// thread at a time; separate records may run concurrently.
class Record {
 public:
  Record();
  Record(Record&&) noexcept = default;
  Record& operator=(Record&&) noexcept = default;
  Record(const Record&) = delete;
  Record& operator=(const Record&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return entries_.size(); }

  // Registers `value` as a differentiable leaf of this record.
  Tensor leaf(const Tensor& value);

  std::string_view op_name(std::int64_t node) const;

 private:
  friend Tensor record_op(std::string_view, std::vector<Tensor>, Tensor, VjpFn);
  friend std::vector<Tensor> backward(const Tensor&, std::span<const Tensor>,
                                      BackwardOptions);

  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    VjpFn vjp;  // empty for leaves
  };

  Tensor append(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                VjpFn vjp);

  std::uint64_t id_;
  std::deque<Entry> entries_;
};

// Makes `record` the active record of the calling thread for this scope.
class RecordScope {
 public:
  explicit RecordScope(Record& record);
  ~RecordScope();
  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;

 private:
  Record* previous_;
};

// Suspends recording on the calling thread for this scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};

Record* active_record();
bool grad_enabled();

// While alive, non-smooth primitives (relu) fold their branch decisions into a
// running signature. grad_check compares signatures to tell when a
// finite-difference stencil straddles a kink.
class BranchMonitor {
 public:
  BranchMonitor();
  ~BranchMonitor();
  BranchMonitor(const BranchMonitor&) = delete;
  BranchMonitor& operator=(const BranchMonitor&) = delete;

  std::uint64_t signature() const { return signature_; }
  static bool active();
  static void note(std::uint64_t branch_hash);

 private:
  BranchMonitor* previous_;
  std::uint64_t signature_ = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t worst_index = -1;
  std::int64_t coords_checked = 0;
  // Coordinates whose stencil crossed a relu kink; excluded from the error.
  std::int64_t kink_coords = 0;
  bool passed = false;
};

// Compares backward() against central differences (f(x+h)-f(x-h))/2h at every
// coordinate of `point`. The per-coordinate relative error is
// |a - n| / max(|a|, |n|, 1e-3 * max_j max(|a_j|, |n_j|), 1e-12).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double h, double tol);

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Ordered set of named tensors: parameters, gradients, deltas, control variates.
using NamedTensors = std::vector<NamedTensor>;

}  // namespace fedvirt
