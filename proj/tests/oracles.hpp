#pragma once

// Naive reference implementations used as oracles. Everything here is
// loop-literal and double precision on purpose: slow, but checkable by eye
// and independent of the code under test.

#include <cmath>
#include <cstddef>
#include <vector>

#include "evit/model.hpp"
#include "evit/tensor.hpp"

namespace oracle {

inline std::vector<double> to_vec(const evit::Tensor& t) {
  std::vector<double> v(t.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = t.at(i);
  return v;
}

inline double max_abs_diff(const evit::Tensor& got, const std::vector<double>& want) {
  double m = 0.0;
  for (size_t i = 0; i < want.size(); ++i) {
    m = std::max(m, std::fabs(got.at(i) - want[i]));
  }
  return m;
}

// [M,K] x [K,N] -> [M,N]
inline std::vector<double> matmul_ref(const std::vector<double>& a,
                                      const std::vector<double>& b, size_t M, size_t K,
                                      size_t N) {
  std::vector<double> y(M * N, 0.0);
  for (size_t i = 0; i < M; ++i) {
    for (size_t j = 0; j < N; ++j) {
      double acc = 0.0;
      for (size_t k = 0; k < K; ++k) acc += a[i * K + k] * b[k * N + j];
      y[i * N + j] = acc;
    }
  }
  return y;
}

// x [B,Cin,H,W], w [Cout,Cin/g,kh,kw], bias [Cout] or empty
inline std::vector<double> conv2d_ref(const std::vector<double>& x,
                                      const std::vector<double>& w,
                                      const std::vector<double>& bias, size_t B, size_t Cin,
                                      size_t H, size_t W, size_t Cout, size_t kh, size_t kw,
                                      size_t stride, size_t pad, size_t groups) {
  const size_t OH = (H + 2 * pad - kh) / stride + 1;
  const size_t OW = (W + 2 * pad - kw) / stride + 1;
  const size_t cpg_in = Cin / groups, cpg_out = Cout / groups;
  std::vector<double> y(B * Cout * OH * OW, 0.0);
  for (size_t b = 0; b < B; ++b) {
    for (size_t oc = 0; oc < Cout; ++oc) {
      const size_t grp = oc / cpg_out;
      for (size_t oy = 0; oy < OH; ++oy) {
        for (size_t ox = 0; ox < OW; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[oc];
          for (size_t ic = 0; ic < cpg_in; ++ic) {
            const size_t xc = grp * cpg_in + ic;
            for (size_t ky = 0; ky < kh; ++ky) {
              for (size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                    ix >= static_cast<long>(W)) {
                  continue;
                }
                acc += x[((b * Cin + xc) * H + iy) * W + ix] *
                       w[((oc * cpg_in + ic) * kh + ky) * kw + kx];
              }
            }
          }
          y[((b * Cout + oc) * OH + oy) * OW + ox] = acc;
        }
      }
    }
  }
  return y;
}

inline void softmax_row_ref(double* row, size_t n) {
  double mx = row[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    sum += row[i];
  }
  for (size_t i = 0; i < n; ++i) row[i] /= sum;
}

// Training-mode batchnorm over [B,C,H,W] with biased variance.
inline std::vector<double> batchnorm_train_ref(const std::vector<double>& x,
                                               const std::vector<double>& gamma,
                                               const std::vector<double>& beta, size_t B,
                                               size_t C, size_t S, double eps) {
  std::vector<double> y(x.size());
  for (size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (size_t b = 0; b < B; ++b) {
      for (size_t s = 0; s < S; ++s) mean += x[(b * C + c) * S + s];
    }
    mean /= static_cast<double>(B * S);
    double var = 0.0;
    for (size_t b = 0; b < B; ++b) {
      for (size_t s = 0; s < S; ++s) {
        const double d = x[(b * C + c) * S + s] - mean;
        var += d * d;
      }
    }
    var /= static_cast<double>(B * S);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t b = 0; b < B; ++b) {
      for (size_t s = 0; s < S; ++s) {
        const size_t i = (b * C + c) * S + s;
        y[i] = (x[i] - mean) * inv * gamma[c] + beta[c];
      }
    }
  }
  return y;
}

// Mirrors Attention::forward token by token: 1x1 convs as per-pixel dot
// products, the 3x3 depthwise pass over the query map, scaled dot-product
// scores, a double-precision softmax, the cascade between heads, concat,
// and the final projection. No vectorized code shared with the library.
inline std::vector<double> attention_ref(const evit::Attention& attn, const evit::Tensor& x) {
  const size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const size_t N = H * W;
  const size_t h = attn.heads;
  const size_t qk = attn.qk_dim;
  const size_t dv = C / h;
  const size_t cin = attn.full_feature ? C : C / h;

  const std::vector<double> xv = to_vec(x);
  std::vector<double> out(B * C * N, 0.0);

  for (size_t b = 0; b < B; ++b) {
    std::vector<double> cat(h * dv * N, 0.0);
    std::vector<double> prev;  // previous head's output [dv, N]

    for (size_t j = 0; j < h; ++j) {
      // head input: full feature map or the j-th channel split, plus the
      // cascade feed from the previous head
      std::vector<double> hin(cin * N);
      for (size_t c = 0; c < cin; ++c) {
        const size_t src = attn.full_feature ? c : j * cin + c;
        for (size_t p = 0; p < N; ++p) hin[c * N + p] = xv[(b * C + src) * N + p];
      }
      if (!attn.full_feature && attn.cascade && j > 0) {
        for (size_t i = 0; i < cin * N; ++i) hin[i] += prev[i];
      }

      auto proj1x1 = [&](const evit::Tensor& w, size_t rows) {
        std::vector<double> r(rows * N, 0.0);
        for (size_t oc = 0; oc < rows; ++oc) {
          for (size_t p = 0; p < N; ++p) {
            double acc = 0.0;
            for (size_t ic = 0; ic < cin; ++ic) acc += w.at(oc * cin + ic) * hin[ic * N + p];
            r[oc * N + p] = acc;
          }
        }
        return r;
      };

      std::vector<double> q = proj1x1(attn.head[j].q.w, qk);
      std::vector<double> k = proj1x1(attn.head[j].k.w, qk);
      std::vector<double> v = proj1x1(attn.head[j].v.w, dv);

      // 3x3 depthwise, stride 1 pad 1, over the query map
      std::vector<double> qd(qk * N, 0.0);
      for (size_t c = 0; c < qk; ++c) {
        for (size_t oy = 0; oy < H; ++oy) {
          for (size_t ox = 0; ox < W; ++ox) {
            double acc = 0.0;
            for (size_t ky = 0; ky < 3; ++ky) {
              for (size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(oy + ky) - 1;
                const long ix = static_cast<long>(ox + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                    ix >= static_cast<long>(W)) {
                  continue;
                }
                acc += attn.head[j].qdw.w.at((c * 3 + ky) * 3 + kx) *
                       q[c * N + static_cast<size_t>(iy) * W + static_cast<size_t>(ix)];
              }
            }
            qd[c * N + oy * W + ox] = acc;
          }
        }
      }

      // scores, softmax, weighted sum: one query token at a time
      const double scale = 1.0 / std::sqrt(static_cast<double>(qk));
      std::vector<double> o(dv * N, 0.0);
      for (size_t p = 0; p < N; ++p) {
        std::vector<double> row(N);
        for (size_t t = 0; t < N; ++t) {
          double s = 0.0;
          for (size_t c = 0; c < qk; ++c) s += qd[c * N + p] * k[c * N + t];
          row[t] = s * scale;
        }
        softmax_row_ref(row.data(), N);
        for (size_t c = 0; c < dv; ++c) {
          double acc = 0.0;
          for (size_t t = 0; t < N; ++t) acc += row[t] * v[c * N + t];
          o[c * N + p] = acc;
        }
      }

      for (size_t i = 0; i < dv * N; ++i) cat[j * dv * N + i] = o[i];
      prev = std::move(o);
    }

    // output projection, 1x1 over the concatenated heads
    for (size_t oc = 0; oc < C; ++oc) {
      for (size_t p = 0; p < N; ++p) {
        double acc = 0.0;
        for (size_t ic = 0; ic < C; ++ic) acc += attn.proj.w.at(oc * C + ic) * cat[ic * N + p];
        out[(b * C + oc) * N + p] = acc;
      }
    }
  }
  return out;
}

}  // namespace oracle
