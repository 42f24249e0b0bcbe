#pragma once

#include <cassert>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "erlab/rng.hpp"

namespace erlab {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until touched by backward
  bool requires_grad = false;
};

inline void ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.f);
}

}  // namespace detail

// Dense row-major f32 tensor. Copies share storage; clone() deep-copies.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto impl = std::make_shared<detail::TensorImpl>();
    validate_shape(shape);
    impl->data.assign(size_t(numel_of(shape)), 0.f);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, float value) {
    Tensor t = zeros(std::move(shape));
    for (float& v : t.data()) v = value;
    return t;
  }

  static Tensor scalar(float value) { return full({1}, value); }

  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false) {
    validate_shape(shape);
    if (int64_t(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.f, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& v : t.data()) v = rng.normal_float(0.f, stddev);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return int(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(impl_->data.size()); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }

  float item() const {
    if (numel() != 1)
      throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<float> grad() {
    detail::ensure_grad(*impl_);
    return impl_->grad;
  }
  std::span<const float> grad() const {
    detail::ensure_grad(*impl_);
    return impl_->grad;
  }
  void zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.f);
  }

  Tensor clone() const {
    Tensor t = from(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor: rank-0 shapes are not supported");
    for (int d : shape)
      if (d < 1)
        throw std::invalid_argument("tensor: nonpositive dimension in shape " + shape_str(shape));
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace erlab
