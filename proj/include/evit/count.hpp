#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evit/model.hpp"

namespace evit {

// Trainable parameter count (running statistics excluded).
size_t count_params(const Model& m);

// Multiply-accumulate count of one inference pass at the given input
// resolution (0 = the model's own). Convolutions, linears and the two
// attention matmuls count; normalization, activations and softmax do not.
uint64_t count_flops(const Model& m, size_t resolution = 0);

struct CountRow {
  std::string module;
  size_t params = 0;
  uint64_t flops = 0;
};
struct CountReport {
  size_t params = 0;
  uint64_t flops = 0;
  size_t resolution = 0;
  std::vector<CountRow> rows;  // patch_embed, stage1, subsample1, ..., head
};
CountReport count_report(const Model& m, size_t resolution = 0);

size_t conv_out_dim(size_t in, size_t k, size_t stride, size_t pad);

// Weight count of the q/k/v projections of one attention block, excluding
// the query depthwise conv and the output projection.
size_t attention_qkv_params(const Attention& a);

}  // namespace evit
