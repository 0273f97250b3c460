#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "evit/ops.hpp"
#include "evit/rng.hpp"
#include "evit/tensor.hpp"

using namespace evit;

TEST_CASE("factories produce the advertised values") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.shape() == std::vector<size_t>{2, 3});
  CHECK(z.numel() == 6);
  for (size_t i = 0; i < 6; ++i) CHECK(z.at(i) == 0.0);

  Tensor o = Tensor::ones({4}, Dtype::f64);
  for (size_t i = 0; i < 4; ++i) CHECK(o.at(i) == 1.0);
  CHECK(o.dtype() == Dtype::f64);

  Tensor f = Tensor::full({2, 2}, -1.5);
  for (size_t i = 0; i < 4; ++i) CHECK(f.at(i) == -1.5);
}

TEST_CASE("scalars are rank-1; rank-0 and zero extents are rejected") {
  Tensor s = Tensor::full({1}, 7.0);
  CHECK(s.item() == 7.0);
  CHECK_THROWS_AS(Tensor::zeros({}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({3, 0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ContractError);
}

TEST_CASE("uniform and trunc_normal are seed-deterministic and in range") {
  Rng r1(123), r2(123);
  Tensor a = Tensor::uniform({100}, r1, -2.0, 3.0);
  Tensor b = Tensor::uniform({100}, r2, -2.0, 3.0);
  for (size_t i = 0; i < 100; ++i) {
    CHECK(a.at(i) == b.at(i));
    CHECK(a.at(i) >= -2.0);
    CHECK(a.at(i) < 3.0);
  }

  Rng r3(7);
  Tensor t = Tensor::trunc_normal({1000}, r3, 0.02);
  for (size_t i = 0; i < 1000; ++i) CHECK(std::fabs(t.at(i)) <= 0.04 + 1e-12);
}

TEST_CASE("different rng streams decorrelate") {
  CHECK(derive_seed(42, 1) != derive_seed(42, 2));
  CHECK(derive_seed(42, 1) != derive_seed(43, 1));
  Rng a(derive_seed(42, 1)), b(derive_seed(42, 2));
  bool any_diff = false;
  for (int i = 0; i < 16; ++i) any_diff |= (a.next_u64() != b.next_u64());
  CHECK(any_diff);
}

TEST_CASE("copies share storage, clone does not") {
  Tensor a = Tensor::ones({3});
  Tensor view = a;
  view.set(0, 9.0);
  CHECK(a.at(0) == 9.0);
  CHECK(a.same_storage(view));

  Tensor deep = a.clone();
  CHECK_FALSE(deep.same_storage(a));
  deep.set(1, -4.0);
  CHECK(a.at(1) == 1.0);
}

TEST_CASE("clone keeps grad tracking, detach drops it") {
  Tensor a = Tensor::ones({2});
  a.set_requires_grad(true);
  CHECK(a.clone().requires_grad());

  Tensor d = a.detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.same_storage(a));  // alias, not a copy
}

TEST_CASE("data span is dtype-checked") {
  Tensor a = Tensor::zeros({2}, Dtype::f32);
  CHECK_THROWS_AS(a.data<double>(), StateError);
  Tensor b = Tensor::zeros({2}, Dtype::f64);
  CHECK_THROWS_AS(b.data<float>(), StateError);
  CHECK(a.data<float>().size() == 2);
}

TEST_CASE("copy_from validates shape and dtype") {
  Tensor a = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(a.copy_from(Tensor::zeros({4})), ShapeError);
  CHECK_THROWS_AS(a.copy_from(Tensor::zeros({2, 2}, Dtype::f64)), ShapeError);
  Tensor src = Tensor::full({2, 2}, 5.0);
  a.copy_from(src);
  CHECK(a.at(3) == 5.0);
}

TEST_CASE("to() converts dtype and copies") {
  Tensor a = Tensor::full({3}, 0.25, Dtype::f32);
  Tensor b = a.to(Dtype::f64);
  CHECK(b.dtype() == Dtype::f64);
  CHECK_FALSE(b.same_storage(a));
  for (size_t i = 0; i < 3; ++i) CHECK(b.at(i) == 0.25);
}

TEST_CASE("gradient buffers accumulate and clear") {
  Tensor a = Tensor::zeros({2});
  CHECK_FALSE(a.grad().defined());
  a.ensure_grad();
  CHECK(a.grad().defined());
  CHECK(a.grad().at(0) == 0.0);

  a.accumulate_grad(Tensor::full({2}, 1.5));
  a.accumulate_grad(Tensor::full({2}, 2.0));
  CHECK(a.grad().at(0) == 3.5);

  a.clear_grad();
  CHECK_FALSE(a.grad().defined());
}

TEST_CASE("ops reject non-finite outputs unless checks are off") {
  Tensor x = Tensor::ones({2});
  x.set(0, std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(relu(x), NumericError);
  {
    FiniteCheckGuard off(false);
    CHECK_NOTHROW(relu(x));
  }
  CHECK_THROWS_AS(relu(x), NumericError);  // guard restored
}
