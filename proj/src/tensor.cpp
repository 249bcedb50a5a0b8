#include "uroscan/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace uroscan {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Dtype dtype, bool requires_grad) {
  for (int64_t e : shape)
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->dtype = dtype;
  impl_->requires_grad = requires_grad;
  impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)) * dtype_size(dtype),
                     std::byte{0});
}

Tensor Tensor::zeros(Shape shape, Dtype dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
  Tensor t(std::move(shape), dtype);
  dispatch_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    for (auto& x : t.data<T>()) x = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) { return full({1}, value, dtype); }

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, Dtype dtype) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  Tensor t(std::move(shape), dtype);
  dispatch_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

void Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), std::byte{0});
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::memset(impl_->grad.data(), 0, impl_->grad.size());
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return value_at(0);
}

double Tensor::value_at(int64_t flat) const {
  if (flat < 0 || flat >= numel()) throw ShapeError("value_at: index out of range");
  return dispatch_dtype(impl_->dtype, [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<size_t>(flat)]);
  });
}

void Tensor::set_value(int64_t flat, double v) {
  if (flat < 0 || flat >= numel()) throw ShapeError("set_value: index out of range");
  dispatch_dtype(impl_->dtype, [&](auto tag) {
    using T = decltype(tag);
    data<T>()[static_cast<size_t>(flat)] = static_cast<T>(v);
  });
}

double Tensor::grad_at(int64_t flat) const {
  if (!has_grad()) throw ValidationError("grad_at: tensor has no gradient buffer");
  if (flat < 0 || flat >= numel()) throw ShapeError("grad_at: index out of range");
  return dispatch_dtype(impl_->dtype, [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(grad<T>()[static_cast<size_t>(flat)]);
  });
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->dtype, impl_->requires_grad);
  std::memcpy(t.impl_->data.data(), impl_->data.data(), impl_->data.size());
  return t;
}

Tensor Tensor::to(Dtype dtype) const {
  if (dtype == impl_->dtype) return clone();
  Tensor t(impl_->shape, dtype, impl_->requires_grad);
  for (int64_t i = 0; i < numel(); ++i) t.set_value(i, value_at(i));
  return t;
}

bool Tensor::all_finite() const {
  return dispatch_dtype(impl_->dtype, [&](auto tag) {
    using T = decltype(tag);
    for (T x : data<T>())
      if (!std::isfinite(x)) return false;
    return true;
  });
}

uint64_t Tensor::content_hash() const {
  return fnv1a64(impl_->data.data(), impl_->data.size());
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  return impl_->dtype == other.impl_->dtype && impl_->shape == other.impl_->shape &&
         std::memcmp(impl_->data.data(), other.impl_->data.data(), impl_->data.size()) == 0;
}

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> backward_fn) {
  if (consumed_)
    throw ValidationError("tape already backpropagated; reset() before recording");
  outputs_.insert(output.id());
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ValidationError("backward called twice without reset");
  if (loss.numel() != 1)
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!tracks(loss)) throw ValidationError("loss tensor is not on this tape");
  consumed_ = true;

  Tensor seed = loss;
  seed.ensure_grad();
  dispatch_dtype(seed.dtype(), [&](auto tag) {
    using T = decltype(tag);
    seed.grad<T>()[0] = T{1};
  });

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    // A node whose output never received gradient feeds no path to the loss.
    if (!it->output.has_grad()) continue;
    it->fn();
  }
}

void Tape::reset() {
  nodes_.clear();
  outputs_.clear();
  consumed_ = false;
}

}  // namespace uroscan
