#pragma once

#include <memory>
#include <span>
#include <vector>

#include "evit/common.hpp"
#include "evit/rng.hpp"

namespace evit {

// Backing buffer. Exactly one of the two vectors is populated, chosen by
// the owning tensor's dtype. Shared between tensors that alias (reshape).
struct Storage {
  std::vector<float> f32;
  std::vector<double> f64;
};

namespace detail {
struct TensorImpl {
  std::vector<size_t> shape;
  Dtype dtype = Dtype::f32;
  std::shared_ptr<Storage> storage;
  bool requires_grad = false;
  std::shared_ptr<TensorImpl> grad;  // lazily allocated, same shape/dtype
};
}  // namespace detail

size_t shape_numel(const std::vector<size_t>& shape);

// Dense row-major tensor. Cheap to copy (shared_ptr handle); clone() for a
// deep copy. Scalars are represented as shape {1}; rank-0 is not allowed.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(std::vector<size_t> shape, Dtype dtype = Dtype::f32);
  static Tensor ones(std::vector<size_t> shape, Dtype dtype = Dtype::f32);
  static Tensor full(std::vector<size_t> shape, double value, Dtype dtype = Dtype::f32);
  static Tensor uniform(std::vector<size_t> shape, Rng& rng, double lo, double hi,
                        Dtype dtype = Dtype::f32);
  static Tensor trunc_normal(std::vector<size_t> shape, Rng& rng, double stddev,
                             Dtype dtype = Dtype::f32);
  static Tensor from(std::vector<size_t> shape, const std::vector<double>& values,
                     Dtype dtype = Dtype::f32);
  static Tensor zeros_like(const Tensor& other);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<size_t>& shape() const;
  size_t ndim() const { return shape().size(); }
  size_t dim(size_t i) const;
  size_t numel() const;
  Dtype dtype() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  // Gradient buffer management. grad() returns an undefined tensor until a
  // backward pass (or ensure_grad) touches this tensor.
  // A Tensor is a shared handle; like a smart pointer, const applies to the
  // handle, not the referent, so the mutators below stay callable on copies
  // captured inside backward closures.
  Tensor grad() const;
  void ensure_grad() const;
  void accumulate_grad(const Tensor& delta) const;
  void clear_grad() const;

  template <typename T>
  std::span<T> data();
  template <typename T>
  std::span<const T> data() const;

  // Dtype-agnostic element access for code where clarity beats speed
  // (serialization, folding, finite differences).
  double at(size_t flat_index) const;
  void set(size_t flat_index, double value) const;
  double item() const;  // requires numel() == 1

  Tensor clone() const;
  Tensor detach() const;          // aliases storage, drops grad tracking
  Tensor to(Dtype dtype) const;   // converting deep copy
  void copy_from(const Tensor& src) const;
  void fill(double value) const;

  bool same_storage(const Tensor& other) const;
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

template <>
std::span<float> Tensor::data<float>();
template <>
std::span<double> Tensor::data<double>();
template <>
std::span<const float> Tensor::data<float>() const;
template <>
std::span<const double> Tensor::data<double>() const;

// Finite checks: every op verifies its outputs are free of NaN/Inf unless
// disabled (the benchmark hot loop turns them off). Thread-local toggle.
bool finite_checks_enabled();
void set_finite_checks(bool enabled);
struct FiniteCheckGuard {
  explicit FiniteCheckGuard(bool enabled) : prev_(finite_checks_enabled()) {
    set_finite_checks(enabled);
  }
  ~FiniteCheckGuard() { set_finite_checks(prev_); }

 private:
  bool prev_;
};
void check_finite(const Tensor& t, const char* op_name);

}  // namespace evit
