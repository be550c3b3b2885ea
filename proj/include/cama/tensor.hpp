#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cama/errors.hpp"

namespace cama {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
class Tape;

namespace detail {

// Buffers start on a 64-byte boundary so vectorized kernels split every array into the
// same scalar prefix and packet body on every run; otherwise results could depend on
// where the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

}  // namespace detail

template <typename Scalar>
using AlignedVector = std::vector<Scalar, detail::AlignedAllocator<Scalar>>;

namespace detail {

template <typename Scalar>
struct Storage {
  AlignedVector<Scalar> data;
  AlignedVector<Scalar> grad;  // empty until materialized
  bool requires_grad = false;
  bool on_tape = false;  // produced by a recorded primitive
};

}  // namespace detail

/// Dense row-major n-dimensional array that can participate in a reverse-mode tape.
///
/// Copies are shallow: two Tensor handles may refer to the same storage, which is how
/// recorded backward closures keep their operands alive. Use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), s_(std::make_shared<detail::Storage<Scalar>>()) {
    for (Index e : shape_) {
      if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape_));
    }
    s_->data.assign(static_cast<std::size_t>(numel_of(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), s_(std::make_shared<detail::Storage<Scalar>>()) {
    if (numel_of(shape_) != static_cast<Index>(data.size())) {
      throw ShapeError("shape " + to_string(shape_) + " holds " +
                       std::to_string(numel_of(shape_)) + " elements, got " +
                       std::to_string(data.size()));
    }
    s_->data.assign(data.begin(), data.end());
  }

  Tensor(Shape shape, AlignedVector<Scalar> data)
      : shape_(std::move(shape)), s_(std::make_shared<detail::Storage<Scalar>>()) {
    if (numel_of(shape_) != static_cast<Index>(data.size())) {
      throw ShapeError("shape " + to_string(shape_) + " holds " +
                       std::to_string(numel_of(shape_)) + " elements, got " +
                       std::to_string(data.size()));
    }
    s_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }
  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    return Tensor(std::move(shape), std::vector<Scalar>(values));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index numel() const { return static_cast<Index>(s_->data.size()); }

  /// Extent of `axis`; negative axes count from the back.
  Index dim(int axis) const {
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                       to_string(shape_));
    }
    return shape_[static_cast<std::size_t>(a)];
  }

  std::span<const Scalar> data() const { return s_->data; }

  /// Writable view of the values. Only valid for tensors not produced on a tape.
  std::span<Scalar> mutable_data() {
    if (s_->on_tape) throw ContractError("in-place mutation of a recorded tensor");
    return s_->data;
  }

  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
    return s_->data[0];
  }

  Scalar at(std::initializer_list<Index> idx) const { return s_->data[flat_index(idx)]; }

  bool requires_grad() const { return s_->requires_grad; }
  bool on_tape() const { return s_->on_tape; }

  Tensor& set_requires_grad(bool on = true) {
    if (s_->on_tape) throw ContractError("requires_grad is fixed for recorded tensors");
    s_->requires_grad = on;
    if (!on) s_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const Scalar> grad() const { return s_->grad; }

  /// Gradient buffer, materialized as zeros on first access. Handles share storage,
  /// so this is available on const handles (backward closures hold const copies).
  std::span<Scalar> mutable_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), Scalar(0));
    return s_->grad;
  }

  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape_);
    return Tensor(shape_, s_->grad);
  }

  void zero_grad() { s_->grad.clear(); }

  /// Deep copy of the values, off any tape and without gradient.
  Tensor clone() const { return Tensor(shape_, s_->data); }
  Tensor detach() const { return clone(); }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(s_->data.begin(), s_->data.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  // Used by primitives when recording.
  void mark_recorded() {
    s_->requires_grad = true;
    s_->on_tape = true;
  }
  AlignedVector<Scalar>& raw() { return s_->data; }

 private:
  Index flat_index(std::initializer_list<Index> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
      throw ShapeError("index rank mismatch for shape " + to_string(shape_));
    }
    Index flat = 0;
    std::size_t k = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[k]) throw IndexError("index out of range in " + to_string(shape_));
      flat = flat * shape_[k] + i;
      ++k;
    }
    return flat;
  }

  Shape shape_;
  std::shared_ptr<detail::Storage<Scalar>> s_;
};

template <typename Scalar>
inline thread_local Tape<Scalar>* g_active_tape = nullptr;

/// Ordered record of primitive applications. Nodes are appended in creation order,
/// which is a topological order, and backward() replays them once in reverse.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return g_active_tape<Scalar>; }

  void record(std::function<void()> vjp) { nodes_.push_back(std::move(vjp)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable requires_grad leaf.
  /// Consumes the recorded nodes.
  void backward(Tensor<Scalar> loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.on_tape()) throw ContractError("backward() on a loss that is not attached to a tape");
    loss.mutable_grad()[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

/// Makes `tape` the recording target for primitives on this thread while in scope.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : prev_(g_active_tape<Scalar>) {
    g_active_tape<Scalar> = &tape;
  }
  ~TapeScope() { g_active_tape<Scalar> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* prev_;
};

/// Suspends recording while in scope (inference, finite differences).
template <typename Scalar>
class NoTapeScope {
 public:
  NoTapeScope() : prev_(g_active_tape<Scalar>) { g_active_tape<Scalar> = nullptr; }
  ~NoTapeScope() { g_active_tape<Scalar> = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<Scalar>* prev_;
};

/// Backpropagates through the active tape of this thread.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  auto* tape = Tape<Scalar>::active();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

namespace detail {

/// Tape to record on, or nullptr when no input needs a gradient.
template <typename Scalar, typename... Ts>
Tape<Scalar>* recording_tape(const Ts&... inputs) {
  auto* tape = Tape<Scalar>::active();
  if (tape == nullptr) return nullptr;
  return (inputs.requires_grad() || ...) ? tape : nullptr;
}

}  // namespace detail

}  // namespace cama
