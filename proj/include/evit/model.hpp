#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evit/graph.hpp"
#include "evit/ops.hpp"
#include "evit/rng.hpp"
#include "evit/tensor.hpp"

namespace evit {

// Architecture hyperparameters. A model has three stages at decreasing
// resolution; stage s uses widths[s] channels, depths[s] attention blocks
// and heads[s] attention heads. Queries and keys project to qk_dim
// channels, values to widths[s]/heads[s]. Each attention block carries
// n_ffn (depthwise conv + FFN) pairs on both sides; FFN hidden width is
// ffn_ratio * C. dw_kernel is the token-interaction depthwise kernel size.
struct ModelSpec {
  std::array<size_t, 3> widths{64, 128, 192};
  std::array<size_t, 3> depths{1, 2, 3};
  std::array<size_t, 3> heads{4, 4, 4};
  size_t qk_dim = 16;
  size_t ffn_ratio = 2;
  size_t n_ffn = 1;
  size_t input_resolution = 224;
  size_t num_classes = 1000;
  size_t dw_kernel = 3;

  bool operator==(const ModelSpec&) const = default;
};

// Named presets M0..M5, smallest to largest.
ModelSpec spec_for_variant(const std::string& name);
const std::vector<std::string>& variant_names();
void validate_spec(const ModelSpec& spec);
std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& json_text);

enum class Mode { infer, train };

// cga: per-head channel splits with the cascade (head j also receives
//      head j-1's output added to its split).
// cga_no_cascade: splits without the feed-forward between heads.
// mhsa: every head projects from the full feature map (the classic
//       attention baseline; equals cga when heads == 1).
enum class AttnKind { cga, cga_no_cascade, mhsa };
AttnKind attn_kind_from_string(const std::string& s);
const char* attn_kind_name(AttnKind kind);

struct Fwd {
  Mode mode = Mode::infer;
  Graph* graph = nullptr;
};

// ---- layers ---------------------------------------------------------------

struct Conv2dLayer {
  Tensor w;  // [Cout, Cin/groups, kh, kw]
  Tensor b;  // undefined when bias-free
  size_t stride = 1, pad = 0, groups = 1;
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

struct BatchNormLayer {
  Tensor gamma, beta;
  Tensor running_mean, running_var;  // buffers, never differentiated
  double momentum = 0.1;
  double eps = 1e-5;
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

struct ConvBn {
  Conv2dLayer conv;
  std::optional<BatchNormLayer> bn;  // removed by folding
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

// Pointwise expand -> ReLU -> pointwise project, BN after each conv.
struct Ffn {
  ConvBn fc1, fc2;
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

// Channel attention on the pooled feature: two biased 1x1 convs with a
// sigmoid gate, rescaling the input per channel.
struct SqueezeExcite {
  Conv2dLayer fc1, fc2;
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

// Strided downsampling block; no residual across the stride.
struct InvertedResidual {
  ConvBn expand, dwise, project;
  SqueezeExcite se;
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

// ---- attention --------------------------------------------------------------

struct AttentionHeadTrace {
  Tensor attn_map;    // [B, N, N], post-softmax
  Tensor head_input;  // [B, C_head, H, W], captured only on request
};
struct BlockTrace {
  std::string block;
  size_t heads = 0;
  bool capture_inputs = false;
  std::vector<AttentionHeadTrace> per_head;
};
struct AttentionTrace {
  bool capture_head_inputs = false;
  std::vector<BlockTrace> blocks;
};

struct AttentionHead {
  Conv2dLayer q, k, v, qdw;  // qdw: 3x3 depthwise over the query map
};

struct Attention {
  size_t heads = 1;
  size_t qk_dim = 16;
  bool cascade = true;
  bool full_feature = false;
  std::vector<AttentionHead> head;
  Conv2dLayer proj;
  Tensor forward(const Tensor& x, const Fwd& f, BlockTrace* trace = nullptr) const;
};

// ---- blocks ----------------------------------------------------------------

// n_ffn (token-interaction depthwise conv, FFN) pairs around one attention,
// every sublayer wrapped in a residual.
struct SandwichBlock {
  std::vector<std::pair<ConvBn, Ffn>> pre, post;
  Attention attn;
  Tensor forward(const Tensor& x, const Fwd& f, BlockTrace* trace = nullptr) const;
};

struct SubsampleBlock {
  std::vector<std::pair<ConvBn, Ffn>> pre, post;
  InvertedResidual ir;
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

// Four 3x3 stride-2 convs ramping 3 -> C/8 -> C/4 -> C/2 -> C (16x
// downsample), ReLU between them.
struct PatchEmbed {
  std::array<ConvBn, 4> convs;
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

struct ClassifierHead {
  std::optional<BatchNormLayer> bn;  // folded into the linear by fold_bn
  Tensor w;                          // [C, num_classes]
  Tensor b;                          // [num_classes]
  Tensor forward(const Tensor& x, const Fwd& f) const;
};

struct Model {
  ModelSpec spec;
  AttnKind attn_kind = AttnKind::cga;
  Dtype dtype = Dtype::f32;
  bool folded = false;
  PatchEmbed patch_embed;
  std::array<std::vector<SandwichBlock>, 3> stages;
  std::array<SubsampleBlock, 2> subsamples;
  ClassifierHead head;
};

// Deterministic: the same (spec, seed, kind, dtype) builds bit-identical
// weights. Weight init is trunc_normal(0.02); biases start at zero, BN at
// gamma=1/beta=0.
Model build_model(const ModelSpec& spec, uint64_t seed, AttnKind kind = AttnKind::cga,
                  Dtype dtype = Dtype::f32);
Model build_variant(const std::string& name, uint64_t seed, AttnKind kind = AttnKind::cga,
                    Dtype dtype = Dtype::f32);

// x must be [B, 3, R, R] with R = spec.input_resolution. Returns logits
// [B, num_classes]. Pass a trace to capture per-head attention maps.
Tensor model_forward(const Model& m, const Tensor& x, Mode mode = Mode::infer,
                     Graph* g = nullptr, AttentionTrace* trace = nullptr);

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool is_buffer = false;   // running statistics
  size_t channel_axis = 0;  // which axis indexes output channels
};
std::vector<ParamEntry> named_params(const Model& m);   // trainable only
std::vector<ParamEntry> named_tensors(const Model& m);  // params then buffers interleaved

// Returns a deep copy with every BN absorbed into its neighbor conv or
// linear; inference outputs match the source model to float rounding.
Model fold_bn(const Model& m);
Model clone_model(const Model& m);

void save_weights(const Model& m, const std::string& path);
void load_weights(Model& m, const std::string& path);

}  // namespace evit
