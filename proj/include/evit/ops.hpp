#pragma once

#include <functional>
#include <vector>

#include "evit/graph.hpp"
#include "evit/tensor.hpp"

namespace evit {

// Every op allocates a fresh output (reshape aliases storage instead of
// copying), validates shapes up front and, when `g` is non-null and any
// differentiable input has requires_grad, records a backward closure.
// Mixing dtypes raises; there is no silent promotion.

Tensor tensor_new(std::vector<size_t> shape, Dtype dtype = Dtype::f32,
                  bool requires_grad = false);

// Batched matmul [*, M, K] x [*, K, N] -> [*, M, N]. Leading dims align
// right and broadcast from extent 1 on either side.
Tensor matmul(const Tensor& a, const Tensor& b, Graph* g = nullptr);

// Softmax over the last dim with max subtraction for stability.
Tensor softmax_lastdim(const Tensor& x, Graph* g = nullptr);

// x [B, Cin, H, W], w [Cout, Cin/groups, kh, kw], optional bias [Cout]
// (pass a default-constructed Tensor for none).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, size_t stride,
              size_t pad, size_t groups = 1, Graph* g = nullptr);

// x [B, C] or [B, C, H, W]. Training mode normalizes with batch statistics
// (biased variance) and updates the running buffers in place with momentum
// (the running variance gets the unbiased estimate). Inference mode uses
// the running buffers. Running buffers are not differentiated through.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, bool training,
                 double momentum = 0.1, double eps = 1e-5, Graph* g = nullptr);

Tensor relu(const Tensor& x, Graph* g = nullptr);  // subgradient at 0 is 0
Tensor sigmoid(const Tensor& x, Graph* g = nullptr);
Tensor add(const Tensor& a, const Tensor& b, Graph* g = nullptr);  // same shape
Tensor mul(const Tensor& a, const Tensor& b, Graph* g = nullptr);  // same shape
Tensor mul_scalar(const Tensor& x, double c, Graph* g = nullptr);
Tensor add_bias_lastdim(const Tensor& x, const Tensor& bias, Graph* g = nullptr);

// Zero-copy view with a new shape (same element count).
Tensor reshape(const Tensor& x, std::vector<size_t> new_shape, Graph* g = nullptr);

// [..., M, N] -> [..., N, M], materialized.
Tensor transpose_last2(const Tensor& x, Graph* g = nullptr);

// Concatenate along dim 1; all other dims must match.
Tensor concat_channels(const std::vector<Tensor>& xs, Graph* g = nullptr);

// Split dim 1 into `parts` equal slices.
std::vector<Tensor> split_channels(const Tensor& x, size_t parts, Graph* g = nullptr);

// [B, C, H, W] -> [B, C] spatial mean.
Tensor global_avg_pool(const Tensor& x, Graph* g = nullptr);

// [B, C, H, W] scaled per (batch, channel) by scale [B, C].
Tensor mul_channels(const Tensor& x, const Tensor& scale, Graph* g = nullptr);

Tensor sum_all(const Tensor& x, Graph* g = nullptr);  // -> scalar [1]

// Mean cross-entropy from logits [B, K]; labels.size() == B, each < K.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<size_t>& labels,
                             Graph* g = nullptr);

// Central-difference gradient of a scalar function at x. f is called with
// perturbed clones; x itself is never modified. The testing oracle for
// backward passes.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps = 1e-5);

}  // namespace evit
