#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bayesnas/error.hpp"

namespace bayesnas {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::size_t node_id = static_cast<std::size_t>(-1);

  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    grad[i] += g;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Handle to a dense float64 array that may participate in a gradient tape.
///
/// Copies share storage. Leaf tensors with requires_grad set are trainable
/// parameters; their gradient buffer survives across tapes until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }

  static Tensor parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->value.size(); }

  std::span<const double> data() const { return impl_->value; }
  // Direct writes bypass the tape; only use on leaves or outside a tape.
  std::span<double> mutable_data() { return impl_->value; }
  const std::vector<double>& values() const { return impl_->value; }

  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }
  double operator[](std::size_t i) const { return impl_->value[i]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->tape == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  std::size_t node_id() const { return impl_->node_id; }

  // Fresh leaf holding a copy of the values; no tape history.
  Tensor detach() const { return Tensor(shape(), values()); }

  Tensor clone_parameter() const {
    Tensor t(shape(), values());
    t.impl_->requires_grad = requires_grad();
    return t;
  }

  const std::shared_ptr<detail::Node>& impl() const { return impl_; }
  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<detail::Node> impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered record of operations for one reverse sweep.
///
/// A tape is single use: backward() consumes it and a second call throws.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    for (auto& r : records_) r.out->tape = nullptr;
  }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return records_.size(); }

  void record(std::vector<std::shared_ptr<detail::Node>> parents,
              const std::shared_ptr<detail::Node>& out, BackwardFn fn) {
    if (consumed_) throw UsageError("recording onto a consumed tape");
    for (const auto& p : parents) {
      if (p->tape != nullptr && p->tape != this) {
        throw UsageError("tensor from a different tape used as operand");
      }
    }
    out->tape = this;
    out->node_id = records_.size();
    records_.push_back(Record{std::move(parents), out, std::move(fn)});
  }

  void backward(const Tensor& loss) {
    if (consumed_) throw UsageError("backward called twice on the same tape");
    if (!loss.defined() || loss.numel() != 1) {
      throw UsageError("backward requires a scalar loss");
    }
    if (loss.impl()->tape != this || !loss.requires_grad()) {
      throw UsageError("loss is not recorded on this tape");
    }
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out->grad.empty()) continue;
      it->fn();
    }
    consumed_ = true;
  }

  // Parents of record i, for topology checks.
  std::vector<std::size_t> parent_ids(std::size_t i) const {
    std::vector<std::size_t> ids;
    for (const auto& p : records_.at(i).parents) ids.push_back(p->node_id);
    return ids;
  }

 private:
  struct Record {
    std::vector<std::shared_ptr<detail::Node>> parents;
    std::shared_ptr<detail::Node> out;
    BackwardFn fn;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
};

/// RAII scope that makes a fresh tape the active one for this thread.
class GradTape {
 public:
  GradTape() : previous_(Tape::active()) { Tape::active() = &tape_; }
  ~GradTape() { Tape::active() = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Tape& tape() { return tape_; }
  void backward(const Tensor& loss) { tape_.backward(loss); }

 private:
  Tape tape_;
  Tape* previous_;
};

/// Suspends recording for inference-only code paths.
class NoGrad {
 public:
  NoGrad() : previous_(Tape::active()) { Tape::active() = nullptr; }
  ~NoGrad() { Tape::active() = previous_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape* previous_;
};

inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) throw UsageError("backward requires a scalar loss");
  Tape* tape = loss.impl()->tape;
  if (tape == nullptr) throw UsageError("loss is not recorded on a tape");
  tape->backward(loss);
}

namespace detail {

// Builds an op result and, if a tape is active and any parent requires grad,
// records `make_backward(out_node)` on it.
template <class MakeBackward>
Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> parents,
                   MakeBackward&& make_backward) {
  Tensor out(std::move(shape), std::move(value));
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  std::vector<std::shared_ptr<Node>> ps;
  ps.reserve(parents.size());
  for (const auto& p : parents) ps.push_back(p.impl());
  out.impl()->requires_grad = true;
  Node* o = out.impl().get();
  tape->record(std::move(ps), out.impl(), make_backward(o));
  return out;
}

// Variant for ops with a runtime-sized parent list.
template <class MakeBackward>
Tensor make_result_n(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                     MakeBackward&& make_backward) {
  Tensor out(std::move(shape), std::move(value));
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  std::vector<std::shared_ptr<Node>> ps;
  ps.reserve(parents.size());
  for (const auto& p : parents) ps.push_back(p.impl());
  out.impl()->requires_grad = true;
  Node* o = out.impl().get();
  tape->record(std::move(ps), out.impl(), make_backward(o));
  return out;
}

}  // namespace detail
}  // namespace bayesnas
