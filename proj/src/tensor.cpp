#include "evit/tensor.hpp"

#include <cmath>
#include <cstring>

namespace evit {

namespace {

thread_local bool g_finite_checks = true;

std::shared_ptr<detail::TensorImpl> make_impl(std::vector<size_t> shape, Dtype dtype) {
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw ShapeError("tensor extent " + std::to_string(i) + " is zero");
    }
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->dtype = dtype;
  impl->storage = std::make_shared<Storage>();
  const size_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  if (dtype == Dtype::f32) {
    impl->storage->f32.assign(n, 0.0f);
  } else {
    impl->storage->f64.assign(n, 0.0);
  }
  return impl;
}

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw StateError(std::string(what) + " on an undefined tensor");
}

}  // namespace

size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t extent : shape) {
    if (extent != 0 && n > SIZE_MAX / extent) throw ShapeError("tensor size overflows");
    n *= extent;
  }
  return n;
}

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool enabled) { g_finite_checks = enabled; }

void check_finite(const Tensor& t, const char* op_name) {
  if (!g_finite_checks) return;
  bool ok = true;
  if (t.dtype() == Dtype::f32) {
    for (float v : t.data<float>()) {
      if (!std::isfinite(v)) {
        ok = false;
        break;
      }
    }
  } else {
    for (double v : t.data<double>()) {
      if (!std::isfinite(v)) {
        ok = false;
        break;
      }
    }
  }
  if (!ok) throw NumericError(std::string(op_name) + " produced a non-finite value");
}

Tensor Tensor::zeros(std::vector<size_t> shape, Dtype dtype) {
  return Tensor(make_impl(std::move(shape), dtype));
}

Tensor Tensor::ones(std::vector<size_t> shape, Dtype dtype) {
  return full(std::move(shape), 1.0, dtype);
}

Tensor Tensor::full(std::vector<size_t> shape, double value, Dtype dtype) {
  Tensor t(make_impl(std::move(shape), dtype));
  t.fill(value);
  return t;
}

Tensor Tensor::uniform(std::vector<size_t> shape, Rng& rng, double lo, double hi, Dtype dtype) {
  if (!(lo < hi)) throw ValueError("uniform requires lo < hi");
  Tensor t(make_impl(std::move(shape), dtype));
  if (dtype == Dtype::f32) {
    for (float& v : t.data<float>()) v = static_cast<float>(rng.uniform(lo, hi));
  } else {
    for (double& v : t.data<double>()) v = rng.uniform(lo, hi);
  }
  return t;
}

Tensor Tensor::trunc_normal(std::vector<size_t> shape, Rng& rng, double stddev, Dtype dtype) {
  if (!(stddev > 0.0)) throw ValueError("trunc_normal requires a positive stddev");
  Tensor t(make_impl(std::move(shape), dtype));
  if (dtype == Dtype::f32) {
    for (float& v : t.data<float>()) v = static_cast<float>(rng.trunc_normal(stddev));
  } else {
    for (double& v : t.data<double>()) v = rng.trunc_normal(stddev);
  }
  return t;
}

Tensor Tensor::from(std::vector<size_t> shape, const std::vector<double>& values, Dtype dtype) {
  Tensor t(make_impl(std::move(shape), dtype));
  if (values.size() != t.numel()) {
    throw ShapeError("from: " + std::to_string(values.size()) + " values for a tensor of " +
                     std::to_string(t.numel()) + " elements");
  }
  for (size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
  return t;
}

Tensor Tensor::zeros_like(const Tensor& other) {
  require_defined(other, "zeros_like");
  return zeros(other.shape(), other.dtype());
}

const std::vector<size_t>& Tensor::shape() const {
  require_defined(*this, "shape()");
  return impl_->shape;
}

size_t Tensor::dim(size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dim index out of range");
  return s[i];
}

size_t Tensor::numel() const { return shape_numel(shape()); }

Dtype Tensor::dtype() const {
  require_defined(*this, "dtype()");
  return impl_->dtype;
}

bool Tensor::requires_grad() const {
  require_defined(*this, "requires_grad()");
  return impl_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad()");
  impl_->requires_grad = value;
  return *this;
}

Tensor Tensor::grad() const {
  require_defined(*this, "grad()");
  return Tensor(impl_->grad);
}

void Tensor::ensure_grad() const {
  require_defined(*this, "ensure_grad()");
  if (!impl_->grad) impl_->grad = make_impl(impl_->shape, impl_->dtype);
}

void Tensor::accumulate_grad(const Tensor& delta) const {
  require_defined(*this, "accumulate_grad()");
  require_defined(delta, "accumulate_grad() delta");
  if (delta.shape() != shape() || delta.dtype() != dtype()) {
    throw ShapeError("gradient shape/dtype does not match its tensor");
  }
  ensure_grad();
  Tensor g(impl_->grad);
  if (dtype() == Dtype::f32) {
    auto dst = g.data<float>();
    auto src = delta.data<float>();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  } else {
    auto dst = g.data<double>();
    auto src = delta.data<double>();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

void Tensor::clear_grad() const {
  require_defined(*this, "clear_grad()");
  impl_->grad.reset();
}

template <>
std::span<float> Tensor::data<float>() {
  require_defined(*this, "data()");
  if (impl_->dtype != Dtype::f32) throw StateError("tensor is not f32");
  return {impl_->storage->f32.data(), impl_->storage->f32.size()};
}

template <>
std::span<double> Tensor::data<double>() {
  require_defined(*this, "data()");
  if (impl_->dtype != Dtype::f64) throw StateError("tensor is not f64");
  return {impl_->storage->f64.data(), impl_->storage->f64.size()};
}

template <>
std::span<const float> Tensor::data<float>() const {
  require_defined(*this, "data()");
  if (impl_->dtype != Dtype::f32) throw StateError("tensor is not f32");
  return {impl_->storage->f32.data(), impl_->storage->f32.size()};
}

template <>
std::span<const double> Tensor::data<double>() const {
  require_defined(*this, "data()");
  if (impl_->dtype != Dtype::f64) throw StateError("tensor is not f64");
  return {impl_->storage->f64.data(), impl_->storage->f64.size()};
}

double Tensor::at(size_t flat_index) const {
  require_defined(*this, "at()");
  if (flat_index >= numel()) throw ShapeError("flat index out of range");
  return dtype() == Dtype::f32 ? static_cast<double>(impl_->storage->f32[flat_index])
                               : impl_->storage->f64[flat_index];
}

void Tensor::set(size_t flat_index, double value) const {
  require_defined(*this, "set()");
  if (flat_index >= numel()) throw ShapeError("flat index out of range");
  if (dtype() == Dtype::f32) {
    impl_->storage->f32[flat_index] = static_cast<float>(value);
  } else {
    impl_->storage->f64[flat_index] = value;
  }
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor");
  return at(0);
}

Tensor Tensor::clone() const {
  require_defined(*this, "clone()");
  Tensor t(make_impl(impl_->shape, impl_->dtype));
  t.copy_from(*this);
  t.impl()->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach()");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->storage = impl_->storage;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(Dtype dtype) const {
  require_defined(*this, "to()");
  Tensor t(make_impl(impl_->shape, dtype));
  const size_t n = numel();
  for (size_t i = 0; i < n; ++i) t.set(i, at(i));
  return t;
}

void Tensor::copy_from(const Tensor& src) const {
  require_defined(*this, "copy_from()");
  require_defined(src, "copy_from() source");
  if (src.shape() != shape() || src.dtype() != dtype()) {
    throw ShapeError("copy_from requires matching shape and dtype");
  }
  if (dtype() == Dtype::f32) {
    auto s = src.data<float>();
    std::memcpy(impl_->storage->f32.data(), s.data(), s.size() * sizeof(float));
  } else {
    auto s = src.data<double>();
    std::memcpy(impl_->storage->f64.data(), s.data(), s.size() * sizeof(double));
  }
}

void Tensor::fill(double value) const {
  require_defined(*this, "fill()");
  if (dtype() == Dtype::f32) {
    for (float& v : impl_->storage->f32) v = static_cast<float>(value);
  } else {
    for (double& v : impl_->storage->f64) v = value;
  }
}

bool Tensor::same_storage(const Tensor& other) const {
  return defined() && other.defined() && impl_->storage == other.impl_->storage;
}

}  // namespace evit
