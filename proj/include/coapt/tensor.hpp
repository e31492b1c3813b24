#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "coapt/errors.hpp"

namespace coapt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool frozen = false;
  bool produced = false;  // output of a recorded operation
};

}  // namespace detail

/// Dense row-major tensor of doubles.
///
/// A Tensor is a handle: copies share storage and identity, which is what
/// the gradient tape keys on. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape.empty()) throw DimensionError("tensor needs at least one dimension");
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged row list");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
  }

  static Tensor row_vector(std::vector<double> v, bool requires_grad = false) {
    auto n = v.size();
    return Tensor({1, n}, std::move(v), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t cols() const { return rank() > 1 ? node_->shape[1] : 1; }

  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  /// Writable view. Throws FrozenError on a frozen tensor.
  std::span<double> mutable_data() {
    if (node_->frozen) throw FrozenError("attempt to modify a frozen tensor " + shape_str(shape()));
    return node_->data;
  }

  double operator()(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double at(std::size_t i) const { return node_->data.at(i); }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  void freeze() { node_->frozen = true; }
  bool frozen() const noexcept { return node_->frozen; }

  /// Deep copy, detached from any tape; keeps requires_grad, drops frozen.
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  /// Deep copy that never requires grad.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const detail::Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  friend Tensor make_result(Shape, std::vector<double>);
  std::shared_ptr<detail::Node> node_;
};

inline Tensor make_result(Shape shape, std::vector<double> data) {
  return Tensor(std::move(shape), std::move(data));
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

/// FNV-1a over the raw bytes of the values; used for frozen-weight checks.
inline std::uint64_t checksum(std::span<const double> values, std::uint64_t h = 1469598103934665603ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t checksum(const Tensor& t, std::uint64_t h = 1469598103934665603ULL) {
  return checksum(t.data(), h);
}

// ---------------------------------------------------------------------------
// Gradient tape

/// Maps an output gradient to accumulated input gradients. `grad_in[i]` is
/// null when input i does not take a gradient; otherwise the rule adds into it.
using BackwardRule =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

/// Gradients of the leaf tensors reachable from a loss.
class Gradients {
 public:
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  const Tensor& at(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) throw LookupError("no gradient recorded for tensor " + shape_str(t.shape()));
    return it->second;
  }

  /// Gradient or zeros when the tensor did not influence the loss.
  Tensor get_or_zero(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? Tensor::zeros(t.shape()) : it->second;
  }

  std::size_t size() const { return grads_.size(); }

  void insert(const detail::Node* id, Tensor g) { grads_[id] = std::move(g); }

 private:
  std::unordered_map<const detail::Node*, Tensor> grads_;
};

/// Ordered record of executed operations. Only operations with at least one
/// input that requires a gradient are recorded.
class GradTape {
 public:
  struct Entry {
    std::shared_ptr<detail::Node> output;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    BackwardRule rule;
  };

  void record(const Tensor& out, std::vector<std::shared_ptr<detail::Node>> inputs, BackwardRule rule) {
    entries_.push_back(Entry{out.node(), std::move(inputs), std::move(rule)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Reverse sweep. Returns gradients of every requires_grad leaf reachable
  /// from `loss`, then clears the tape. `visit`, when set, sees each replayed
  /// entry index (for order checks).
  Gradients backward(const Tensor& loss, const std::function<void(std::size_t)>& visit = {}) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward() needs a scalar loss, got " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad()) throw ContractError("loss is not on the tape (nothing requires grad)");

    std::unordered_map<const detail::Node*, std::vector<double>> acc;
    acc[loss.id()] = {1.0};
    std::unordered_map<const detail::Node*, std::shared_ptr<detail::Node>> seen;
    seen[loss.id()] = loss.node();

    for (std::size_t idx = entries_.size(); idx-- > 0;) {
      auto& e = entries_[idx];
      auto it = acc.find(e.output.get());
      if (it == acc.end()) continue;
      if (visit) visit(idx);
      std::vector<double> g_out = it->second;
      std::vector<std::vector<double>*> slots(e.inputs.size(), nullptr);
      for (std::size_t i = 0; i < e.inputs.size(); ++i) {
        const auto& in = e.inputs[i];
        if (!in->requires_grad) continue;
        auto& buf = acc[in.get()];
        if (buf.empty()) buf.assign(in->data.size(), 0.0);
        seen.emplace(in.get(), in);
      }
      // Slots are taken after all insertions so rehashing cannot move them.
      for (std::size_t i = 0; i < e.inputs.size(); ++i)
        if (e.inputs[i]->requires_grad) slots[i] = &acc[e.inputs[i].get()];
      e.rule(g_out, slots);
    }

    Gradients out;
    for (auto& [id, g] : acc) {
      const auto& node = seen[id];
      if (node->produced || !node->requires_grad) continue;
      out.insert(id, Tensor(node->shape, std::move(g)));
    }
    entries_.clear();
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

namespace detail {
inline GradTape*& active_tape() {
  thread_local GradTape* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Makes `tape` the recording target of the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape) : prev_(detail::active_tape()) { detail::active_tape() = &tape; }
  ~TapeScope() { detail::active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

/// Disables recording on the current thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradScope() { detail::active_tape() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* prev_;
};

inline GradTape* active_tape() { return detail::active_tape(); }

/// Backward pass on the thread's active tape.
inline Gradients backward(const Tensor& loss) {
  auto* tape = active_tape();
  if (!tape) throw ContractError("backward() called with no active tape");
  return tape->backward(loss);
}

namespace detail {

/// Wraps a freshly computed result: propagates requires_grad and records the
/// rule when a tape is active.
inline Tensor finish(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                     BackwardRule rule) {
  Tensor out = make_result(std::move(shape), std::move(data));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.node()->requires_grad = true;
  out.node()->produced = true;
  if (auto* tape = active_tape()) {
    std::vector<std::shared_ptr<Node>> ins;
    ins.reserve(inputs.size());
    for (const auto& in : inputs) ins.push_back(in.node());
    tape->record(out, std::move(ins), std::move(rule));
  }
  return out;
}

inline Tensor finish(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                     BackwardRule rule) {
  Tensor out = make_result(std::move(shape), std::move(data));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.node()->requires_grad = true;
  out.node()->produced = true;
  if (auto* tape = active_tape()) {
    std::vector<std::shared_ptr<Node>> ins;
    ins.reserve(inputs.size());
    for (const auto& in : inputs) ins.push_back(in.node());
    tape->record(out, std::move(ins), std::move(rule));
  }
  return out;
}

}  // namespace detail
}  // namespace coapt
