#include "evit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "evit/profile.hpp"

namespace evit {

namespace {

void req_def(const Tensor& t, const char* what) {
  if (!t.defined()) throw StateError(std::string(what) + " is undefined");
}

void req_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": mixed dtypes (" + dtype_name(a.dtype()) + " vs " +
                        dtype_name(b.dtype()) + ")");
  }
}

std::string shape_str(const std::vector<size_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

bool want_grad(Graph* g, std::initializer_list<const Tensor*> inputs) {
  if (!g) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// View of the same storage under a different shape (element count must match).
Tensor alias_with_shape(const Tensor& t, const std::vector<size_t>& shape) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = t.dtype();
  impl->storage = t.impl()->storage;
  return Tensor(std::move(impl));
}

// ---- batched matmul planning -------------------------------------------

struct BatchPlan {
  std::vector<size_t> lead_shape;  // output leading dims (may be empty)
  size_t count = 1;                // product of lead_shape
  std::vector<size_t> a_offsets;   // per batch, in units of one a matrix
  std::vector<size_t> b_offsets;
};

BatchPlan plan_batches(const std::vector<size_t>& ashape, const std::vector<size_t>& bshape) {
  const size_t ra = ashape.size() - 2;
  const size_t rb = bshape.size() - 2;
  const size_t r = std::max(ra, rb);
  std::vector<size_t> la(r, 1), lb(r, 1), lo(r, 1);
  for (size_t i = 0; i < ra; ++i) la[r - ra + i] = ashape[i];
  for (size_t i = 0; i < rb; ++i) lb[r - rb + i] = bshape[i];
  for (size_t i = 0; i < r; ++i) {
    if (la[i] == lb[i] || lb[i] == 1) {
      lo[i] = la[i];
    } else if (la[i] == 1) {
      lo[i] = lb[i];
    } else {
      throw ShapeError("matmul: leading dims do not broadcast, " + shape_str(ashape) + " vs " +
                       shape_str(bshape));
    }
  }
  std::vector<size_t> sa(r, 0), sb(r, 0);
  size_t acc = 1;
  for (size_t i = r; i-- > 0;) {
    sa[i] = (la[i] == 1) ? 0 : acc;
    acc *= la[i];
  }
  acc = 1;
  for (size_t i = r; i-- > 0;) {
    sb[i] = (lb[i] == 1) ? 0 : acc;
    acc *= lb[i];
  }

  BatchPlan plan;
  plan.lead_shape = lo;
  plan.count = shape_numel(lo.empty() ? std::vector<size_t>{1} : lo);
  if (lo.empty()) plan.count = 1;
  plan.a_offsets.resize(plan.count);
  plan.b_offsets.resize(plan.count);
  std::vector<size_t> idx(r, 0);
  for (size_t flat = 0; flat < plan.count; ++flat) {
    size_t ao = 0, bo = 0;
    for (size_t i = 0; i < r; ++i) {
      ao += idx[i] * sa[i];
      bo += idx[i] * sb[i];
    }
    plan.a_offsets[flat] = ao;
    plan.b_offsets[flat] = bo;
    for (size_t i = r; i-- > 0;) {
      if (++idx[i] < lo[i]) break;
      idx[i] = 0;
    }
  }
  return plan;
}

template <typename T>
void matmul_batched(const T* a, const T* b, T* y, const BatchPlan& plan, size_t m, size_t k,
                    size_t n) {
  for (size_t bi = 0; bi < plan.count; ++bi) {
    const T* ma = a + plan.a_offsets[bi] * m * k;
    const T* mb = b + plan.b_offsets[bi] * k * n;
    T* my = y + bi * m * n;
    for (size_t i = 0; i < m; ++i) {
      T* yrow = my + i * n;
      for (size_t kk = 0; kk < k; ++kk) {
        const T av = ma[i * k + kk];
        const T* brow = mb + kk * n;
        for (size_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
      }
    }
  }
}

// Sum `t` down to `target` (right-aligned, extents equal or 1). Used to
// undo broadcasting when routing matmul gradients back to their inputs.
Tensor reduce_to_shape(const Tensor& t, const std::vector<size_t>& target) {
  if (t.shape() == target) return t;
  const size_t rt = t.ndim();
  std::vector<size_t> padded(rt, 1);
  if (target.size() > rt) throw ShapeError("reduce_to_shape: target rank exceeds source");
  for (size_t i = 0; i < target.size(); ++i) padded[rt - target.size() + i] = target[i];
  std::vector<size_t> out_stride(rt, 0);
  size_t acc = 1;
  for (size_t i = rt; i-- > 0;) {
    out_stride[i] = (padded[i] == 1) ? 0 : acc;
    acc *= padded[i];
  }
  Tensor out = Tensor::zeros(target, t.dtype());
  const auto& tshape = t.shape();
  std::vector<size_t> idx(rt, 0);
  const size_t n = t.numel();
  for (size_t flat = 0; flat < n; ++flat) {
    size_t o = 0;
    for (size_t i = 0; i < rt; ++i) o += idx[i] * out_stride[i];
    out.set(o, out.at(o) + t.at(flat));
    for (size_t i = rt; i-- > 0;) {
      if (++idx[i] < tshape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

// ---- conv kernels --------------------------------------------------------

struct ConvDims {
  size_t B, Cin, H, W, Cout, kh, kw, OH, OW, stride, pad, groups;
};

template <typename T>
void conv_fwd(const T* x, const T* w, const T* bias, T* y, const ConvDims& d) {
  const size_t cinpg = d.Cin / d.groups;
  const size_t ocpg = d.Cout / d.groups;
  const long H = static_cast<long>(d.H), W = static_cast<long>(d.W);
  const long OH = static_cast<long>(d.OH), OW = static_cast<long>(d.OW);
  const long s = static_cast<long>(d.stride), p = static_cast<long>(d.pad);
  for (size_t b = 0; b < d.B; ++b) {
    for (size_t oc = 0; oc < d.Cout; ++oc) {
      T* yplane = y + (b * d.Cout + oc) * d.OH * d.OW;
      const T bv = bias ? bias[oc] : T(0);
      for (size_t i = 0; i < d.OH * d.OW; ++i) yplane[i] = bv;
      const size_t gi = oc / ocpg;
      for (size_t icg = 0; icg < cinpg; ++icg) {
        const size_t ic = gi * cinpg + icg;
        const T* xplane = x + (b * d.Cin + ic) * d.H * d.W;
        const T* wk = w + (oc * cinpg + icg) * d.kh * d.kw;
        for (long r = 0; r < static_cast<long>(d.kh); ++r) {
          long oh_lo = 0;
          if (p > r) oh_lo = (p - r + s - 1) / s;
          const long uh = H - 1 + p - r;
          if (uh < 0) continue;
          const long oh_hi = std::min(OH - 1, uh / s);
          for (long c = 0; c < static_cast<long>(d.kw); ++c) {
            const T wv = wk[r * static_cast<long>(d.kw) + c];
            long ow_lo = 0;
            if (p > c) ow_lo = (p - c + s - 1) / s;
            const long uw = W - 1 + p - c;
            if (uw < 0) continue;
            const long ow_hi = std::min(OW - 1, uw / s);
            for (long oh = oh_lo; oh <= oh_hi; ++oh) {
              const long ih = oh * s + r - p;
              const T* xrow = xplane + ih * W;
              T* yrow = yplane + oh * OW;
              for (long ow = ow_lo; ow <= ow_hi; ++ow) {
                yrow[ow] += wv * xrow[ow * s + c - p];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_x(const T* dy, const T* w, T* dx, const ConvDims& d) {
  const size_t cinpg = d.Cin / d.groups;
  const size_t ocpg = d.Cout / d.groups;
  const long H = static_cast<long>(d.H), W = static_cast<long>(d.W);
  const long OH = static_cast<long>(d.OH), OW = static_cast<long>(d.OW);
  const long s = static_cast<long>(d.stride), p = static_cast<long>(d.pad);
  for (size_t b = 0; b < d.B; ++b) {
    for (size_t oc = 0; oc < d.Cout; ++oc) {
      const T* dyplane = dy + (b * d.Cout + oc) * d.OH * d.OW;
      const size_t gi = oc / ocpg;
      for (size_t icg = 0; icg < cinpg; ++icg) {
        const size_t ic = gi * cinpg + icg;
        T* dxplane = dx + (b * d.Cin + ic) * d.H * d.W;
        const T* wk = w + (oc * cinpg + icg) * d.kh * d.kw;
        for (long r = 0; r < static_cast<long>(d.kh); ++r) {
          long oh_lo = 0;
          if (p > r) oh_lo = (p - r + s - 1) / s;
          const long uh = H - 1 + p - r;
          if (uh < 0) continue;
          const long oh_hi = std::min(OH - 1, uh / s);
          for (long c = 0; c < static_cast<long>(d.kw); ++c) {
            const T wv = wk[r * static_cast<long>(d.kw) + c];
            long ow_lo = 0;
            if (p > c) ow_lo = (p - c + s - 1) / s;
            const long uw = W - 1 + p - c;
            if (uw < 0) continue;
            const long ow_hi = std::min(OW - 1, uw / s);
            for (long oh = oh_lo; oh <= oh_hi; ++oh) {
              const long ih = oh * s + r - p;
              T* dxrow = dxplane + ih * W;
              const T* dyrow = dyplane + oh * OW;
              for (long ow = ow_lo; ow <= ow_hi; ++ow) {
                dxrow[ow * s + c - p] += wv * dyrow[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_w(const T* dy, const T* x, T* dw, const ConvDims& d) {
  const size_t cinpg = d.Cin / d.groups;
  const size_t ocpg = d.Cout / d.groups;
  const long H = static_cast<long>(d.H), W = static_cast<long>(d.W);
  const long OH = static_cast<long>(d.OH), OW = static_cast<long>(d.OW);
  const long s = static_cast<long>(d.stride), p = static_cast<long>(d.pad);
  for (size_t b = 0; b < d.B; ++b) {
    for (size_t oc = 0; oc < d.Cout; ++oc) {
      const T* dyplane = dy + (b * d.Cout + oc) * d.OH * d.OW;
      const size_t gi = oc / ocpg;
      for (size_t icg = 0; icg < cinpg; ++icg) {
        const size_t ic = gi * cinpg + icg;
        const T* xplane = x + (b * d.Cin + ic) * d.H * d.W;
        T* dwk = dw + (oc * cinpg + icg) * d.kh * d.kw;
        for (long r = 0; r < static_cast<long>(d.kh); ++r) {
          long oh_lo = 0;
          if (p > r) oh_lo = (p - r + s - 1) / s;
          const long uh = H - 1 + p - r;
          if (uh < 0) continue;
          const long oh_hi = std::min(OH - 1, uh / s);
          for (long c = 0; c < static_cast<long>(d.kw); ++c) {
            long ow_lo = 0;
            if (p > c) ow_lo = (p - c + s - 1) / s;
            const long uw = W - 1 + p - c;
            if (uw < 0) continue;
            const long ow_hi = std::min(OW - 1, uw / s);
            T acc = 0;
            for (long oh = oh_lo; oh <= oh_hi; ++oh) {
              const long ih = oh * s + r - p;
              const T* xrow = xplane + ih * W;
              const T* dyrow = dyplane + oh * OW;
              for (long ow = ow_lo; ow <= ow_hi; ++ow) {
                acc += xrow[ow * s + c - p] * dyrow[ow];
              }
            }
            dwk[r * static_cast<long>(d.kw) + c] += acc;
          }
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_b(const T* dy, T* db, size_t B, size_t Cout, size_t plane) {
  for (size_t b = 0; b < B; ++b) {
    for (size_t oc = 0; oc < Cout; ++oc) {
      const T* dyplane = dy + (b * Cout + oc) * plane;
      T acc = 0;
      for (size_t i = 0; i < plane; ++i) acc += dyplane[i];
      db[oc] += acc;
    }
  }
}

// ---- small elementwise helpers -------------------------------------------

template <typename T, typename F>
void map_unary(const Tensor& x, Tensor& y, F f) {
  auto xs = x.data<T>();
  auto ys = y.data<T>();
  for (size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
}

}  // namespace

// ---- public ops -----------------------------------------------------------

Tensor tensor_new(std::vector<size_t> shape, Dtype dtype, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), dtype);
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor matmul(const Tensor& a, const Tensor& b, Graph* g) {
  ProfiledOp prof(OpCategory::matmul_conv);
  req_def(a, "matmul input a");
  req_def(b, "matmul input b");
  req_same_dtype(a, b, "matmul");
  if (a.ndim() < 2 || b.ndim() < 2) throw ShapeError("matmul requires rank >= 2");
  const size_t m = a.dim(a.ndim() - 2);
  const size_t k = a.dim(a.ndim() - 1);
  const size_t kb = b.dim(b.ndim() - 2);
  const size_t n = b.dim(b.ndim() - 1);
  if (k != kb) {
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const BatchPlan plan = plan_batches(a.shape(), b.shape());
  std::vector<size_t> out_shape = plan.lead_shape;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor y = Tensor::zeros(out_shape, a.dtype());
  if (a.dtype() == Dtype::f32) {
    matmul_batched<float>(a.data<float>().data(), b.data<float>().data(), y.data<float>().data(),
                          plan, m, k, n);
  } else {
    matmul_batched<double>(a.data<double>().data(), b.data<double>().data(),
                           y.data<double>().data(), plan, m, k, n);
  }
  check_finite(y, "matmul");
  if (want_grad(g, {&a, &b})) {
    y.set_requires_grad(true);
    Tensor av = a, bv = b, yv = y;
    g->record("matmul", {a, b}, y, [av, bv, yv] {
      Tensor dy = yv.grad();
      if (av.requires_grad()) {
        Tensor da = matmul(dy, transpose_last2(bv));
        av.accumulate_grad(reduce_to_shape(da, av.shape()));
      }
      if (bv.requires_grad()) {
        Tensor db = matmul(transpose_last2(av), dy);
        bv.accumulate_grad(reduce_to_shape(db, bv.shape()));
      }
    });
  }
  return y;
}

Tensor softmax_lastdim(const Tensor& x, Graph* g) {
  ProfiledOp prof(OpCategory::softmax);
  req_def(x, "softmax input");
  const size_t last = x.dim(x.ndim() - 1);
  const size_t rows = x.numel() / last;
  Tensor y = Tensor::zeros_like(x);
  auto run = [&](auto* xs, auto* ys) {
    using T = std::remove_pointer_t<decltype(ys)>;
    for (size_t r = 0; r < rows; ++r) {
      const auto* xr = xs + r * last;
      T* yr = ys + r * last;
      T mx = xr[0];
      for (size_t i = 1; i < last; ++i) mx = std::max(mx, xr[i]);
      double sum = 0.0;
      for (size_t i = 0; i < last; ++i) {
        const double e = std::exp(static_cast<double>(xr[i] - mx));
        yr[i] = static_cast<T>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (size_t i = 0; i < last; ++i) yr[i] = static_cast<T>(yr[i] * inv);
    }
  };
  if (x.dtype() == Dtype::f32) {
    run(x.data<float>().data(), y.data<float>().data());
  } else {
    run(x.data<double>().data(), y.data<double>().data());
  }
  check_finite(y, "softmax_lastdim");
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    const size_t rows_c = rows, last_c = last;
    g->record("softmax_lastdim", {x}, y, [xv, yv, rows_c, last_c] {
      Tensor dy = yv.grad();
      Tensor dx = Tensor::zeros_like(xv);
      auto run_bwd = [&](const auto* ys, const auto* dys, auto* dxs) {
        using T = std::remove_pointer_t<decltype(dxs)>;
        for (size_t r = 0; r < rows_c; ++r) {
          const auto* yr = ys + r * last_c;
          const auto* dyr = dys + r * last_c;
          T* dxr = dxs + r * last_c;
          double dot = 0.0;
          for (size_t i = 0; i < last_c; ++i) dot += static_cast<double>(dyr[i]) * yr[i];
          for (size_t i = 0; i < last_c; ++i) {
            dxr[i] = static_cast<T>(yr[i] * (static_cast<double>(dyr[i]) - dot));
          }
        }
      };
      if (yv.dtype() == Dtype::f32) {
        run_bwd(yv.data<float>().data(), dy.data<float>().data(), dx.data<float>().data());
      } else {
        run_bwd(yv.data<double>().data(), dy.data<double>().data(), dx.data<double>().data());
      }
      xv.accumulate_grad(dx);
    });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, size_t stride, size_t pad,
              size_t groups, Graph* g) {
  ProfiledOp prof(OpCategory::matmul_conv);
  req_def(x, "conv2d input");
  req_def(w, "conv2d weight");
  req_same_dtype(x, w, "conv2d");
  if (bias.defined()) req_same_dtype(x, bias, "conv2d");
  if (x.ndim() != 4) throw ShapeError("conv2d input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (w.ndim() != 4) throw ShapeError("conv2d weight must be rank 4, got " + shape_str(w.shape()));
  if (stride == 0) throw ValueError("conv2d stride must be >= 1");
  if (groups == 0) throw ValueError("conv2d groups must be >= 1");

  ConvDims d;
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.groups = groups;
  if (d.Cin % groups != 0 || d.Cout % groups != 0) {
    throw ShapeError("conv2d: channels not divisible by groups");
  }
  if (w.dim(1) != d.Cin / groups) {
    throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1) * groups) +
                     " input channels, input has " + std::to_string(d.Cin));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d.Cout)) {
    throw ShapeError("conv2d: bias must be [Cout]");
  }
  if (d.H + 2 * pad < d.kh || d.W + 2 * pad < d.kw) {
    throw ShapeError("conv2d: kernel does not fit the padded input");
  }
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;

  Tensor y = Tensor::zeros({d.B, d.Cout, d.OH, d.OW}, x.dtype());
  if (x.dtype() == Dtype::f32) {
    conv_fwd<float>(x.data<float>().data(), w.data<float>().data(),
                    bias.defined() ? bias.data<float>().data() : nullptr, y.data<float>().data(),
                    d);
  } else {
    conv_fwd<double>(x.data<double>().data(), w.data<double>().data(),
                     bias.defined() ? bias.data<double>().data() : nullptr,
                     y.data<double>().data(), d);
  }
  check_finite(y, "conv2d");

  const bool rec = bias.defined() ? want_grad(g, {&x, &w, &bias}) : want_grad(g, {&x, &w});
  if (rec) {
    y.set_requires_grad(true);
    std::vector<Tensor> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    Tensor xv = x, wv = w, bv = bias, yv = y;
    g->record("conv2d", std::move(inputs), y, [xv, wv, bv, yv, d] {
      Tensor dy = yv.grad();
      if (xv.requires_grad()) {
        Tensor dx = Tensor::zeros_like(xv);
        if (xv.dtype() == Dtype::f32) {
          conv_bwd_x<float>(dy.data<float>().data(), wv.data<float>().data(),
                            dx.data<float>().data(), d);
        } else {
          conv_bwd_x<double>(dy.data<double>().data(), wv.data<double>().data(),
                             dx.data<double>().data(), d);
        }
        xv.accumulate_grad(dx);
      }
      if (wv.requires_grad()) {
        Tensor dw = Tensor::zeros_like(wv);
        if (wv.dtype() == Dtype::f32) {
          conv_bwd_w<float>(dy.data<float>().data(), xv.data<float>().data(),
                            dw.data<float>().data(), d);
        } else {
          conv_bwd_w<double>(dy.data<double>().data(), xv.data<double>().data(),
                             dw.data<double>().data(), d);
        }
        wv.accumulate_grad(dw);
      }
      if (bv.defined() && bv.requires_grad()) {
        Tensor db = Tensor::zeros_like(bv);
        if (bv.dtype() == Dtype::f32) {
          conv_bwd_b<float>(dy.data<float>().data(), db.data<float>().data(), d.B, d.Cout,
                            d.OH * d.OW);
        } else {
          conv_bwd_b<double>(dy.data<double>().data(), db.data<double>().data(), d.B, d.Cout,
                             d.OH * d.OW);
        }
        bv.accumulate_grad(db);
      }
    });
  }
  return y;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum, double eps, Graph* g) {
  ProfiledOp prof(OpCategory::normalization);
  req_def(x, "batchnorm input");
  req_def(gamma, "batchnorm gamma");
  req_def(beta, "batchnorm beta");
  req_def(running_mean, "batchnorm running_mean");
  req_def(running_var, "batchnorm running_var");
  req_same_dtype(x, gamma, "batchnorm");
  req_same_dtype(x, beta, "batchnorm");
  req_same_dtype(x, running_mean, "batchnorm");
  req_same_dtype(x, running_var, "batchnorm");
  if (x.ndim() != 2 && x.ndim() != 4) {
    throw ShapeError("batchnorm input must be [B,C] or [B,C,H,W], got " + shape_str(x.shape()));
  }
  const size_t B = x.dim(0);
  const size_t C = x.dim(1);
  const size_t S = x.ndim() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor* t :
       std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->ndim() != 1 || t->dim(0) != C) {
      throw ShapeError("batchnorm parameter shape must be [C]");
    }
  }
  if (running_mean.requires_grad() || running_var.requires_grad()) {
    throw ContractError("batchnorm running statistics must not require grad");
  }
  if (!(eps > 0.0)) throw ValueError("batchnorm eps must be positive");
  if (momentum < 0.0 || momentum > 1.0) throw ValueError("batchnorm momentum must be in [0,1]");
  const size_t n = B * S;
  if (training && n < 2) {
    throw ValueError("batchnorm training needs at least 2 values per channel");
  }

  std::vector<double> mean(C, 0.0), ivar(C, 0.0);
  auto stats = [&](auto* xs) {
    for (size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (size_t b = 0; b < B; ++b) {
        const auto* plane = xs + (b * C + c) * S;
        for (size_t i = 0; i < S; ++i) m += plane[i];
      }
      m /= static_cast<double>(n);
      double var = 0.0;
      for (size_t b = 0; b < B; ++b) {
        const auto* plane = xs + (b * C + c) * S;
        for (size_t i = 0; i < S; ++i) {
          const double dlt = plane[i] - m;
          var += dlt * dlt;
        }
      }
      var /= static_cast<double>(n);
      mean[c] = m;
      ivar[c] = 1.0 / std::sqrt(var + eps);
      if (training) {
        const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
        running_mean.set(c, (1.0 - momentum) * running_mean.at(c) + momentum * m);
        running_var.set(c, (1.0 - momentum) * running_var.at(c) + momentum * unbiased);
      }
    }
  };
  if (training) {
    if (x.dtype() == Dtype::f32) {
      stats(x.data<float>().data());
    } else {
      stats(x.data<double>().data());
    }
  } else {
    for (size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.at(c);
      ivar[c] = 1.0 / std::sqrt(running_var.at(c) + eps);
    }
  }

  Tensor y = Tensor::zeros_like(x);
  auto normalize = [&](const auto* xs, auto* ys, const auto* gs, const auto* bs) {
    using T = std::remove_pointer_t<decltype(ys)>;
    for (size_t b = 0; b < B; ++b) {
      for (size_t c = 0; c < C; ++c) {
        const auto* xp = xs + (b * C + c) * S;
        T* yp = ys + (b * C + c) * S;
        const double scale = ivar[c] * static_cast<double>(gs[c]);
        const double shift = static_cast<double>(bs[c]) - mean[c] * scale;
        for (size_t i = 0; i < S; ++i) yp[i] = static_cast<T>(xp[i] * scale + shift);
      }
    }
  };
  if (x.dtype() == Dtype::f32) {
    normalize(x.data<float>().data(), y.data<float>().data(), gamma.data<float>().data(),
              beta.data<float>().data());
  } else {
    normalize(x.data<double>().data(), y.data<double>().data(), gamma.data<double>().data(),
              beta.data<double>().data());
  }
  check_finite(y, "batchnorm");

  if (want_grad(g, {&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    Tensor xv = x, gv = gamma, bv = beta, yv = y;
    const bool train_mode = training;
    g->record("batchnorm", {x, gamma, beta}, y,
              [xv, gv, bv, yv, mean, ivar, B, C, S, train_mode] {
      Tensor dy = yv.grad();
      const size_t n = B * S;
      std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
      auto sums = [&](const auto* xs, const auto* dys) {
        for (size_t c = 0; c < C; ++c) {
          double sd = 0.0, sdx = 0.0;
          for (size_t b = 0; b < B; ++b) {
            const auto* xp = xs + (b * C + c) * S;
            const auto* dp = dys + (b * C + c) * S;
            for (size_t i = 0; i < S; ++i) {
              const double xhat = (xp[i] - mean[c]) * ivar[c];
              sd += dp[i];
              sdx += dp[i] * xhat;
            }
          }
          sum_dy[c] = sd;
          sum_dy_xhat[c] = sdx;
        }
      };
      if (xv.dtype() == Dtype::f32) {
        sums(xv.data<float>().data(), dy.data<float>().data());
      } else {
        sums(xv.data<double>().data(), dy.data<double>().data());
      }
      if (gv.requires_grad()) {
        Tensor dg = Tensor::zeros_like(gv);
        for (size_t c = 0; c < C; ++c) dg.set(c, sum_dy_xhat[c]);
        gv.accumulate_grad(dg);
      }
      if (bv.requires_grad()) {
        Tensor db = Tensor::zeros_like(bv);
        for (size_t c = 0; c < C; ++c) db.set(c, sum_dy[c]);
        bv.accumulate_grad(db);
      }
      if (xv.requires_grad()) {
        Tensor dx = Tensor::zeros_like(xv);
        auto run_dx = [&](const auto* xs, const auto* dys, auto* dxs, const auto* gs) {
          using T = std::remove_pointer_t<decltype(dxs)>;
          for (size_t c = 0; c < C; ++c) {
            const double giv = static_cast<double>(gs[c]) * ivar[c];
            for (size_t b = 0; b < B; ++b) {
              const auto* xp = xs + (b * C + c) * S;
              const auto* dp = dys + (b * C + c) * S;
              T* op = dxs + (b * C + c) * S;
              for (size_t i = 0; i < S; ++i) {
                if (train_mode) {
                  const double xhat = (xp[i] - mean[c]) * ivar[c];
                  op[i] = static_cast<T>(
                      giv * (dp[i] - sum_dy[c] / n - xhat * sum_dy_xhat[c] / n));
                } else {
                  op[i] = static_cast<T>(giv * dp[i]);
                }
              }
            }
          }
        };
        if (xv.dtype() == Dtype::f32) {
          run_dx(xv.data<float>().data(), dy.data<float>().data(), dx.data<float>().data(),
                 gv.data<float>().data());
        } else {
          run_dx(xv.data<double>().data(), dy.data<double>().data(), dx.data<double>().data(),
                 gv.data<double>().data());
        }
        xv.accumulate_grad(dx);
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& x, Graph* g) {
  ProfiledOp prof(OpCategory::elementwise);
  req_def(x, "relu input");
  Tensor y = Tensor::zeros_like(x);
  if (x.dtype() == Dtype::f32) {
    map_unary<float>(x, y, [](float v) { return v > 0.0f ? v : 0.0f; });
  } else {
    map_unary<double>(x, y, [](double v) { return v > 0.0 ? v : 0.0; });
  }
  check_finite(y, "relu");
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    g->record("relu", {x}, y, [xv, yv] {
      Tensor dy = yv.grad();
      Tensor dx = Tensor::zeros_like(xv);
      auto run = [&](const auto* xs, const auto* dys, auto* dxs, size_t n) {
        using T = std::remove_pointer_t<decltype(dxs)>;
        for (size_t i = 0; i < n; ++i) dxs[i] = xs[i] > 0 ? dys[i] : T(0);
      };
      if (xv.dtype() == Dtype::f32) {
        run(xv.data<float>().data(), dy.data<float>().data(), dx.data<float>().data(),
            xv.numel());
      } else {
        run(xv.data<double>().data(), dy.data<double>().data(), dx.data<double>().data(),
            xv.numel());
      }
      xv.accumulate_grad(dx);
    });
  }
  return y;
}

Tensor sigmoid(const Tensor& x, Graph* g) {
  ProfiledOp prof(OpCategory::elementwise);
  req_def(x, "sigmoid input");
  Tensor y = Tensor::zeros_like(x);
  auto sig = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  if (x.dtype() == Dtype::f32) {
    map_unary<float>(x, y, [&](float v) { return static_cast<float>(sig(v)); });
  } else {
    map_unary<double>(x, y, sig);
  }
  check_finite(y, "sigmoid");
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    g->record("sigmoid", {x}, y, [xv, yv] {
      Tensor dy = yv.grad();
      Tensor dx = Tensor::zeros_like(xv);
      auto run = [&](const auto* ys, const auto* dys, auto* dxs, size_t n) {
        using T = std::remove_pointer_t<decltype(dxs)>;
        for (size_t i = 0; i < n; ++i) {
          dxs[i] = static_cast<T>(dys[i] * ys[i] * (T(1) - ys[i]));
        }
      };
      if (xv.dtype() == Dtype::f32) {
        run(yv.data<float>().data(), dy.data<float>().data(), dx.data<float>().data(),
            xv.numel());
      } else {
        run(yv.data<double>().data(), dy.data<double>().data(), dx.data<double>().data(),
            xv.numel());
      }
      xv.accumulate_grad(dx);
    });
  }
  return y;
}

namespace {

template <typename F>
Tensor binary_same_shape(const char* name, const Tensor& a, const Tensor& b, Graph* g, F f,
                         void (*bwd)(const Tensor&, const Tensor&, const Tensor&, const Tensor&)) {
  ProfiledOp prof(OpCategory::elementwise);
  req_def(a, name);
  req_def(b, name);
  req_same_dtype(a, b, name);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor y = Tensor::zeros_like(a);
  if (a.dtype() == Dtype::f32) {
    auto as = a.data<float>();
    auto bs = b.data<float>();
    auto ys = y.data<float>();
    for (size_t i = 0; i < ys.size(); ++i) ys[i] = f(as[i], bs[i]);
  } else {
    auto as = a.data<double>();
    auto bs = b.data<double>();
    auto ys = y.data<double>();
    for (size_t i = 0; i < ys.size(); ++i) ys[i] = f(as[i], bs[i]);
  }
  check_finite(y, name);
  if (want_grad(g, {&a, &b})) {
    y.set_requires_grad(true);
    Tensor av = a, bv = b, yv = y;
    g->record(name, {a, b}, y, [av, bv, yv, bwd] { bwd(av, bv, yv, yv.grad()); });
  }
  return y;
}

void add_bwd(const Tensor& a, const Tensor& b, const Tensor&, const Tensor& dy) {
  if (a.requires_grad()) a.accumulate_grad(dy);
  if (b.requires_grad()) b.accumulate_grad(dy);
}

void mul_bwd(const Tensor& a, const Tensor& b, const Tensor&, const Tensor& dy) {
  auto scaled = [](const Tensor& src, const Tensor& w, const Tensor& d) {
    Tensor out = Tensor::zeros_like(src);
    if (src.dtype() == Dtype::f32) {
      auto ws = w.data<float>();
      auto ds = d.data<float>();
      auto os = out.data<float>();
      for (size_t i = 0; i < os.size(); ++i) os[i] = ws[i] * ds[i];
    } else {
      auto ws = w.data<double>();
      auto ds = d.data<double>();
      auto os = out.data<double>();
      for (size_t i = 0; i < os.size(); ++i) os[i] = ws[i] * ds[i];
    }
    return out;
  };
  if (a.requires_grad()) a.accumulate_grad(scaled(a, b, dy));
  if (b.requires_grad()) b.accumulate_grad(scaled(b, a, dy));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Graph* g) {
  return binary_same_shape("add", a, b, g, [](auto x, auto y) { return x + y; }, add_bwd);
}

Tensor mul(const Tensor& a, const Tensor& b, Graph* g) {
  return binary_same_shape("mul", a, b, g, [](auto x, auto y) { return x * y; }, mul_bwd);
}

Tensor mul_scalar(const Tensor& x, double c, Graph* g) {
  ProfiledOp prof(OpCategory::elementwise);
  req_def(x, "mul_scalar input");
  Tensor y = Tensor::zeros_like(x);
  if (x.dtype() == Dtype::f32) {
    map_unary<float>(x, y, [c](float v) { return static_cast<float>(v * c); });
  } else {
    map_unary<double>(x, y, [c](double v) { return v * c; });
  }
  check_finite(y, "mul_scalar");
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    g->record("mul_scalar", {x}, y, [xv, yv, c] {
      Tensor dy = yv.grad();
      Tensor dx = Tensor::zeros_like(xv);
      if (xv.dtype() == Dtype::f32) {
        auto ds = dy.data<float>();
        auto os = dx.data<float>();
        for (size_t i = 0; i < os.size(); ++i) os[i] = static_cast<float>(ds[i] * c);
      } else {
        auto ds = dy.data<double>();
        auto os = dx.data<double>();
        for (size_t i = 0; i < os.size(); ++i) os[i] = ds[i] * c;
      }
      xv.accumulate_grad(dx);
    });
  }
  return y;
}

Tensor add_bias_lastdim(const Tensor& x, const Tensor& bias, Graph* g) {
  ProfiledOp prof(OpCategory::elementwise);
  req_def(x, "add_bias input");
  req_def(bias, "add_bias bias");
  req_same_dtype(x, bias, "add_bias_lastdim");
  const size_t c = x.dim(x.ndim() - 1);
  if (bias.ndim() != 1 || bias.dim(0) != c) {
    throw ShapeError("add_bias_lastdim: bias must match the last dim");
  }
  const size_t rows = x.numel() / c;
  Tensor y = Tensor::zeros_like(x);
  auto run = [&](const auto* xs, const auto* bs, auto* ys) {
    for (size_t r = 0; r < rows; ++r) {
      for (size_t i = 0; i < c; ++i) ys[r * c + i] = xs[r * c + i] + bs[i];
    }
  };
  if (x.dtype() == Dtype::f32) {
    run(x.data<float>().data(), bias.data<float>().data(), y.data<float>().data());
  } else {
    run(x.data<double>().data(), bias.data<double>().data(), y.data<double>().data());
  }
  check_finite(y, "add_bias_lastdim");
  if (want_grad(g, {&x, &bias})) {
    y.set_requires_grad(true);
    Tensor xv = x, bv = bias, yv = y;
    const size_t rows_c = rows, c_c = c;
    g->record("add_bias_lastdim", {x, bias}, y, [xv, bv, yv, rows_c, c_c] {
      Tensor dy = yv.grad();
      if (xv.requires_grad()) xv.accumulate_grad(dy);
      if (bv.requires_grad()) {
        Tensor db = Tensor::zeros_like(bv);
        for (size_t r = 0; r < rows_c; ++r) {
          for (size_t i = 0; i < c_c; ++i) db.set(i, db.at(i) + dy.at(r * c_c + i));
        }
        bv.accumulate_grad(db);
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, std::vector<size_t> new_shape, Graph* g) {
  ProfiledOp prof(OpCategory::reshape_copy);
  req_def(x, "reshape input");
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                     " changes the element count");
  }
  Tensor y = alias_with_shape(x, new_shape);
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    g->record("reshape", {x}, y, [xv, yv] {
      xv.accumulate_grad(alias_with_shape(yv.grad(), xv.shape()));
    });
  }
  return y;
}

Tensor transpose_last2(const Tensor& x, Graph* g) {
  ProfiledOp prof(OpCategory::reshape_copy);
  req_def(x, "transpose input");
  if (x.ndim() < 2) throw ShapeError("transpose_last2 requires rank >= 2");
  const size_t m = x.dim(x.ndim() - 2);
  const size_t n = x.dim(x.ndim() - 1);
  const size_t batch = x.numel() / (m * n);
  std::vector<size_t> out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Tensor y = Tensor::zeros(out_shape, x.dtype());
  auto run = [&](const auto* xs, auto* ys) {
    for (size_t b = 0; b < batch; ++b) {
      const auto* xm = xs + b * m * n;
      auto* ym = ys + b * m * n;
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) ym[j * m + i] = xm[i * n + j];
      }
    }
  };
  if (x.dtype() == Dtype::f32) {
    run(x.data<float>().data(), y.data<float>().data());
  } else {
    run(x.data<double>().data(), y.data<double>().data());
  }
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    g->record("transpose_last2", {x}, y, [xv, yv] {
      xv.accumulate_grad(transpose_last2(yv.grad()));
    });
  }
  return y;
}

Tensor concat_channels(const std::vector<Tensor>& xs, Graph* g) {
  ProfiledOp prof(OpCategory::reshape_copy);
  if (xs.empty()) throw ValueError("concat_channels needs at least one input");
  for (const Tensor& t : xs) req_def(t, "concat_channels input");
  const Tensor& first = xs.front();
  if (first.ndim() < 2) throw ShapeError("concat_channels requires rank >= 2");
  size_t total_c = 0;
  for (const Tensor& t : xs) {
    req_same_dtype(first, t, "concat_channels");
    if (t.ndim() != first.ndim()) throw ShapeError("concat_channels: ranks differ");
    for (size_t i = 0; i < t.ndim(); ++i) {
      if (i != 1 && t.dim(i) != first.dim(i)) {
        throw ShapeError("concat_channels: non-channel dims differ");
      }
    }
    total_c += t.dim(1);
  }
  std::vector<size_t> out_shape = first.shape();
  out_shape[1] = total_c;
  const size_t b_count = first.dim(0);
  size_t inner = 1;
  for (size_t i = 2; i < first.ndim(); ++i) inner *= first.dim(i);

  Tensor y = Tensor::zeros(out_shape, first.dtype());
  auto copy_in = [&](const Tensor& src, size_t c_off) {
    const size_t c = src.dim(1);
    auto run = [&](const auto* s, auto* dst) {
      for (size_t b = 0; b < b_count; ++b) {
        std::memcpy(dst + (b * total_c + c_off) * inner, s + b * c * inner,
                    c * inner * sizeof(*s));
      }
    };
    if (src.dtype() == Dtype::f32) {
      run(src.data<float>().data(), y.data<float>().data());
    } else {
      run(src.data<double>().data(), y.data<double>().data());
    }
  };
  size_t off = 0;
  for (const Tensor& t : xs) {
    copy_in(t, off);
    off += t.dim(1);
  }

  bool any_grad = false;
  for (const Tensor& t : xs) any_grad = any_grad || t.requires_grad();
  if (g && any_grad) {
    y.set_requires_grad(true);
    std::vector<Tensor> ins = xs;
    Tensor yv = y;
    const size_t b_c = b_count, inner_c = inner, total_c_c = total_c;
    g->record("concat_channels", ins, y, [ins, yv, b_c, inner_c, total_c_c] {
      Tensor dy = yv.grad();
      size_t c_off = 0;
      for (const Tensor& t : ins) {
        const size_t c = t.dim(1);
        if (t.requires_grad()) {
          Tensor dt = Tensor::zeros_like(t);
          auto run = [&](const auto* s, auto* dst) {
            for (size_t b = 0; b < b_c; ++b) {
              std::memcpy(dst + b * c * inner_c, s + (b * total_c_c + c_off) * inner_c,
                          c * inner_c * sizeof(*s));
            }
          };
          if (t.dtype() == Dtype::f32) {
            run(dy.data<float>().data(), dt.data<float>().data());
          } else {
            run(dy.data<double>().data(), dt.data<double>().data());
          }
          t.accumulate_grad(dt);
        }
        c_off += c;
      }
    });
  }
  return y;
}

std::vector<Tensor> split_channels(const Tensor& x, size_t parts, Graph* g) {
  ProfiledOp prof(OpCategory::reshape_copy);
  req_def(x, "split_channels input");
  if (x.ndim() < 2) throw ShapeError("split_channels requires rank >= 2");
  if (parts == 0) throw ValueError("split_channels parts must be >= 1");
  const size_t c_total = x.dim(1);
  if (c_total % parts != 0) {
    throw ShapeError("split_channels: " + std::to_string(c_total) + " channels not divisible by " +
                     std::to_string(parts));
  }
  const size_t c_part = c_total / parts;
  const size_t b_count = x.dim(0);
  size_t inner = 1;
  for (size_t i = 2; i < x.ndim(); ++i) inner *= x.dim(i);

  std::vector<Tensor> outs;
  outs.reserve(parts);
  for (size_t p = 0; p < parts; ++p) {
    std::vector<size_t> shape = x.shape();
    shape[1] = c_part;
    Tensor part = Tensor::zeros(shape, x.dtype());
    auto run = [&](const auto* s, auto* dst) {
      for (size_t b = 0; b < b_count; ++b) {
        std::memcpy(dst + b * c_part * inner, s + (b * c_total + p * c_part) * inner,
                    c_part * inner * sizeof(*s));
      }
    };
    if (x.dtype() == Dtype::f32) {
      run(x.data<float>().data(), part.data<float>().data());
    } else {
      run(x.data<double>().data(), part.data<double>().data());
    }
    if (want_grad(g, {&x})) {
      part.set_requires_grad(true);
      Tensor xv = x, pv = part;
      const size_t p_c = p, cp = c_part, ct = c_total, b_c = b_count, inner_c = inner;
      g->record("split_channels", {x}, part, [xv, pv, p_c, cp, ct, b_c, inner_c] {
        Tensor dp = pv.grad();
        Tensor dx = Tensor::zeros_like(xv);
        auto run_bwd = [&](const auto* s, auto* dst) {
          for (size_t b = 0; b < b_c; ++b) {
            std::memcpy(dst + (b * ct + p_c * cp) * inner_c, s + b * cp * inner_c,
                        cp * inner_c * sizeof(*s));
          }
        };
        if (xv.dtype() == Dtype::f32) {
          run_bwd(dp.data<float>().data(), dx.data<float>().data());
        } else {
          run_bwd(dp.data<double>().data(), dx.data<double>().data());
        }
        xv.accumulate_grad(dx);
      });
    }
    outs.push_back(part);
  }
  return outs;
}

Tensor global_avg_pool(const Tensor& x, Graph* g) {
  ProfiledOp prof(OpCategory::other);
  req_def(x, "global_avg_pool input");
  if (x.ndim() != 4) throw ShapeError("global_avg_pool input must be [B,C,H,W]");
  const size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor y = Tensor::zeros({B, C}, x.dtype());
  auto run = [&](const auto* xs, auto* ys) {
    using T = std::remove_pointer_t<decltype(ys)>;
    for (size_t b = 0; b < B; ++b) {
      for (size_t c = 0; c < C; ++c) {
        const auto* plane = xs + (b * C + c) * S;
        double acc = 0.0;
        for (size_t i = 0; i < S; ++i) acc += plane[i];
        ys[b * C + c] = static_cast<T>(acc / static_cast<double>(S));
      }
    }
  };
  if (x.dtype() == Dtype::f32) {
    run(x.data<float>().data(), y.data<float>().data());
  } else {
    run(x.data<double>().data(), y.data<double>().data());
  }
  check_finite(y, "global_avg_pool");
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    g->record("global_avg_pool", {x}, y, [xv, yv, B, C, S] {
      Tensor dy = yv.grad();
      Tensor dx = Tensor::zeros_like(xv);
      auto run_bwd = [&](const auto* ds, auto* dxs) {
        using T = std::remove_pointer_t<decltype(dxs)>;
        for (size_t b = 0; b < B; ++b) {
          for (size_t c = 0; c < C; ++c) {
            const T v = static_cast<T>(static_cast<double>(ds[b * C + c]) / S);
            T* plane = dxs + (b * C + c) * S;
            for (size_t i = 0; i < S; ++i) plane[i] = v;
          }
        }
      };
      if (xv.dtype() == Dtype::f32) {
        run_bwd(dy.data<float>().data(), dx.data<float>().data());
      } else {
        run_bwd(dy.data<double>().data(), dx.data<double>().data());
      }
      xv.accumulate_grad(dx);
    });
  }
  return y;
}

Tensor mul_channels(const Tensor& x, const Tensor& scale, Graph* g) {
  ProfiledOp prof(OpCategory::elementwise);
  req_def(x, "mul_channels input");
  req_def(scale, "mul_channels scale");
  req_same_dtype(x, scale, "mul_channels");
  if (x.ndim() != 4) throw ShapeError("mul_channels input must be [B,C,H,W]");
  if (scale.ndim() != 2 || scale.dim(0) != x.dim(0) || scale.dim(1) != x.dim(1)) {
    throw ShapeError("mul_channels scale must be [B,C] matching the input");
  }
  const size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor y = Tensor::zeros_like(x);
  auto run = [&](const auto* xs, const auto* ss, auto* ys) {
    for (size_t b = 0; b < B; ++b) {
      for (size_t c = 0; c < C; ++c) {
        const auto sv = ss[b * C + c];
        const auto* xp = xs + (b * C + c) * S;
        auto* yp = ys + (b * C + c) * S;
        for (size_t i = 0; i < S; ++i) yp[i] = xp[i] * sv;
      }
    }
  };
  if (x.dtype() == Dtype::f32) {
    run(x.data<float>().data(), scale.data<float>().data(), y.data<float>().data());
  } else {
    run(x.data<double>().data(), scale.data<double>().data(), y.data<double>().data());
  }
  check_finite(y, "mul_channels");
  if (want_grad(g, {&x, &scale})) {
    y.set_requires_grad(true);
    Tensor xv = x, sv = scale, yv = y;
    g->record("mul_channels", {x, scale}, y, [xv, sv, yv, B, C, S] {
      Tensor dy = yv.grad();
      if (xv.requires_grad()) {
        Tensor dx = Tensor::zeros_like(xv);
        auto run_dx = [&](const auto* ds, const auto* ss, auto* dxs) {
          for (size_t b = 0; b < B; ++b) {
            for (size_t c = 0; c < C; ++c) {
              const auto svv = ss[b * C + c];
              const auto* dp = ds + (b * C + c) * S;
              auto* op = dxs + (b * C + c) * S;
              for (size_t i = 0; i < S; ++i) op[i] = dp[i] * svv;
            }
          }
        };
        if (xv.dtype() == Dtype::f32) {
          run_dx(dy.data<float>().data(), sv.data<float>().data(), dx.data<float>().data());
        } else {
          run_dx(dy.data<double>().data(), sv.data<double>().data(), dx.data<double>().data());
        }
        xv.accumulate_grad(dx);
      }
      if (sv.requires_grad()) {
        Tensor dscale = Tensor::zeros_like(sv);
        auto run_ds = [&](const auto* ds, const auto* xs, auto* out) {
          using T = std::remove_pointer_t<decltype(out)>;
          for (size_t b = 0; b < B; ++b) {
            for (size_t c = 0; c < C; ++c) {
              const auto* dp = ds + (b * C + c) * S;
              const auto* xp = xs + (b * C + c) * S;
              double acc = 0.0;
              for (size_t i = 0; i < S; ++i) acc += static_cast<double>(dp[i]) * xp[i];
              out[b * C + c] = static_cast<T>(acc);
            }
          }
        };
        if (xv.dtype() == Dtype::f32) {
          run_ds(dy.data<float>().data(), xv.data<float>().data(), dscale.data<float>().data());
        } else {
          run_ds(dy.data<double>().data(), xv.data<double>().data(),
                 dscale.data<double>().data());
        }
        sv.accumulate_grad(dscale);
      }
    });
  }
  return y;
}

Tensor sum_all(const Tensor& x, Graph* g) {
  ProfiledOp prof(OpCategory::other);
  req_def(x, "sum_all input");
  double acc = 0.0;
  if (x.dtype() == Dtype::f32) {
    for (float v : x.data<float>()) acc += v;
  } else {
    for (double v : x.data<double>()) acc += v;
  }
  Tensor y = Tensor::full({1}, acc, x.dtype());
  check_finite(y, "sum_all");
  if (want_grad(g, {&x})) {
    y.set_requires_grad(true);
    Tensor xv = x, yv = y;
    g->record("sum_all", {x}, y, [xv, yv] {
      Tensor dx = Tensor::full(xv.shape(), yv.grad().at(0), xv.dtype());
      xv.accumulate_grad(dx);
    });
  }
  return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<size_t>& labels, Graph* g) {
  ProfiledOp prof(OpCategory::other);
  req_def(logits, "cross_entropy logits");
  if (logits.ndim() != 2) throw ShapeError("cross_entropy logits must be [B,K]");
  const size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw ValueError("cross_entropy: need one label per batch row");
  for (size_t l : labels) {
    if (l >= K) throw ValueError("cross_entropy: label " + std::to_string(l) + " out of range");
  }
  double loss = 0.0;
  auto run = [&](const auto* xs) {
    for (size_t b = 0; b < B; ++b) {
      const auto* row = xs + b * K;
      double mx = row[0];
      for (size_t i = 1; i < K; ++i) mx = std::max(mx, static_cast<double>(row[i]));
      double sum = 0.0;
      for (size_t i = 0; i < K; ++i) sum += std::exp(static_cast<double>(row[i]) - mx);
      loss += mx + std::log(sum) - static_cast<double>(row[labels[b]]);
    }
  };
  if (logits.dtype() == Dtype::f32) {
    run(logits.data<float>().data());
  } else {
    run(logits.data<double>().data());
  }
  loss /= static_cast<double>(B);
  Tensor y = Tensor::full({1}, loss, logits.dtype());
  check_finite(y, "softmax_cross_entropy");
  if (want_grad(g, {&logits})) {
    y.set_requires_grad(true);
    Tensor lv = logits, yv = y;
    std::vector<size_t> labels_c = labels;
    g->record("softmax_cross_entropy", {logits}, y, [lv, yv, labels_c, B, K] {
      const double dy = yv.grad().at(0);
      Tensor dx = Tensor::zeros_like(lv);
      auto run_bwd = [&](const auto* xs, auto* dxs) {
        using T = std::remove_pointer_t<decltype(dxs)>;
        for (size_t b = 0; b < B; ++b) {
          const auto* row = xs + b * K;
          T* drow = dxs + b * K;
          double mx = row[0];
          for (size_t i = 1; i < K; ++i) mx = std::max(mx, static_cast<double>(row[i]));
          double sum = 0.0;
          for (size_t i = 0; i < K; ++i) sum += std::exp(static_cast<double>(row[i]) - mx);
          for (size_t i = 0; i < K; ++i) {
            const double p = std::exp(static_cast<double>(row[i]) - mx) / sum;
            const double onehot = (i == labels_c[b]) ? 1.0 : 0.0;
            drow[i] = static_cast<T>((p - onehot) * dy / static_cast<double>(B));
          }
        }
      };
      if (lv.dtype() == Dtype::f32) {
        run_bwd(lv.data<float>().data(), dx.data<float>().data());
      } else {
        run_bwd(lv.data<double>().data(), dx.data<double>().data());
      }
      lv.accumulate_grad(dx);
    });
  }
  return y;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
  req_def(x, "finite_diff_grad point");
  if (!(eps > 0.0)) throw ValueError("finite_diff_grad eps must be positive");
  Tensor grad = Tensor::zeros_like(x);
  Tensor probe = x.clone();
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) {
    const double v = x.at(i);
    probe.set(i, v + eps);
    const double fp = f(probe);
    probe.set(i, v - eps);
    const double fm = f(probe);
    probe.set(i, v);
    grad.set(i, (fp - fm) / (2.0 * eps));
  }
  return grad;
}

}  // namespace evit
