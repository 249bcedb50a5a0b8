#pragma once

#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "uroscan/common.hpp"

namespace uroscan {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  Dtype dtype = Dtype::f32;
  bool requires_grad = false;
  AlignedVec<std::byte> data;
  AlignedVec<std::byte> grad;  // empty, or data.size() bytes
};
}  // namespace detail

// ---------------------------------------------------------------------------
// Dense n-d array handle with value semantics on the handle and shared
// storage underneath. Once an op has produced a tensor its data is treated
// as immutable; only optimizer updates and buffer refreshes mutate in place.
// ---------------------------------------------------------------------------
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Dtype dtype, bool requires_grad = false);

  static Tensor zeros(Shape shape, Dtype dtype = Dtype::f64);
  static Tensor full(Shape shape, double value, Dtype dtype = Dtype::f64);
  static Tensor scalar(double value, Dtype dtype = Dtype::f64);
  static Tensor from_values(Shape shape, const std::vector<double>& values,
                            Dtype dtype = Dtype::f64);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return shape_numel(impl_->shape); }
  Dtype dtype() const { return impl_->dtype; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  template <class T>
  std::span<T> data() {
    check_type<T>();
    return {reinterpret_cast<T*>(impl_->data.data()), static_cast<size_t>(numel())};
  }
  template <class T>
  std::span<const T> data() const {
    check_type<T>();
    return {reinterpret_cast<const T*>(impl_->data.data()), static_cast<size_t>(numel())};
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  void ensure_grad();
  void zero_grad();
  void drop_grad() { impl_->grad.clear(); }

  template <class T>
  std::span<T> grad() {
    check_type<T>();
    ensure_grad();
    return {reinterpret_cast<T*>(impl_->grad.data()), static_cast<size_t>(numel())};
  }
  template <class T>
  std::span<const T> grad() const {
    check_type<T>();
    if (!has_grad()) throw ValidationError("tensor has no gradient buffer");
    return {reinterpret_cast<const T*>(impl_->grad.data()), static_cast<size_t>(numel())};
  }

  /// Scalar tensors only.
  double item() const;

  /// Element access through a flat index, converted to double. Slow path for
  /// tests and glue code; kernels use data<T>() spans.
  double value_at(int64_t flat) const;
  void set_value(int64_t flat, double v);
  double grad_at(int64_t flat) const;

  /// Deep copy of data (not grad); keeps dtype and requires_grad.
  Tensor clone() const;
  /// Converting copy.
  Tensor to(Dtype dtype) const;

  bool all_finite() const;
  uint64_t content_hash() const;
  bool bitwise_equal(const Tensor& other) const;

  /// Stable identity of the underlying storage.
  const void* id() const { return impl_.get(); }

 private:
  template <class T>
  void check_type() const {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    Dtype want = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
    if (impl_->dtype != want)
      throw ValidationError(std::string("tensor dtype is ") + dtype_name(impl_->dtype) +
                            ", accessed as " + dtype_name(want));
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Invokes f with a float or double tag matching dt.
template <class F>
decltype(auto) dispatch_dtype(Dtype dt, F&& f) {
  if (dt == Dtype::f32) return f(float{});
  return f(double{});
}

// ---------------------------------------------------------------------------
// Reverse-mode tape. Ops append nodes in execution order (so inputs always
// precede their consumers); backward() replays them once in reverse.
// ---------------------------------------------------------------------------
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward_fn);

  /// True if t was produced by a node on this tape (gradient can flow into it).
  bool tracks(const Tensor& t) const { return outputs_.count(t.id()) != 0; }

  /// Whether an op should compute a gradient for this input.
  bool wants_grad(const Tensor& t) const { return t.requires_grad() || tracks(t); }

  /// Runs all backward rules in reverse order, seeding d(loss)/d(loss) = 1.
  /// loss must be a scalar produced on this tape. A second call without
  /// reset() is an error.
  void backward(const Tensor& loss);

  void reset();

  size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  std::unordered_set<const void*> outputs_;
  bool consumed_ = false;
};

}  // namespace uroscan
