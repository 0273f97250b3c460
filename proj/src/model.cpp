#include "evit/model.hpp"

#include <cctype>
#include <cmath>
#include <functional>
#include <set>

#include "evit/io.hpp"
#include "json.hpp"

namespace evit {

// ---- specs ------------------------------------------------------------------

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"M0", "M1", "M2", "M3", "M4", "M5"};
  return names;
}

ModelSpec spec_for_variant(const std::string& name) {
  std::string key = name;
  for (char& c : key) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  ModelSpec s;
  if (key == "M0") {
    s.widths = {64, 128, 192};
    s.depths = {1, 2, 3};
    s.heads = {4, 4, 4};
  } else if (key == "M1") {
    s.widths = {128, 144, 192};
    s.depths = {1, 2, 3};
    s.heads = {2, 3, 3};
  } else if (key == "M2") {
    s.widths = {128, 192, 224};
    s.depths = {1, 2, 3};
    s.heads = {4, 3, 2};
  } else if (key == "M3") {
    s.widths = {128, 240, 320};
    s.depths = {1, 2, 3};
    s.heads = {4, 3, 4};
  } else if (key == "M4") {
    s.widths = {128, 256, 384};
    s.depths = {1, 2, 3};
    s.heads = {4, 4, 4};
  } else if (key == "M5") {
    s.widths = {192, 288, 384};
    s.depths = {1, 3, 4};
    s.heads = {3, 3, 4};
  } else {
    throw ValueError("unknown variant '" + name + "' (expected M0..M5)");
  }
  return s;
}

void validate_spec(const ModelSpec& spec) {
  for (size_t s = 0; s < 3; ++s) {
    if (spec.widths[s] == 0 || spec.depths[s] == 0 || spec.heads[s] == 0) {
      throw ValueError("stage " + std::to_string(s + 1) + " has a zero width/depth/heads");
    }
    if (spec.widths[s] % spec.heads[s] != 0) {
      throw ValueError("stage " + std::to_string(s + 1) + " width " +
                       std::to_string(spec.widths[s]) + " is not divisible by " +
                       std::to_string(spec.heads[s]) + " heads");
    }
  }
  if (spec.widths[0] % 8 != 0) {
    throw ValueError("stage 1 width must be divisible by 8 for the embedding ramp");
  }
  if (spec.qk_dim == 0) throw ValueError("qk_dim must be >= 1");
  if (spec.ffn_ratio == 0) throw ValueError("ffn_ratio must be >= 1");
  if (spec.n_ffn == 0) throw ValueError("n_ffn must be >= 1");
  if (spec.num_classes == 0) throw ValueError("num_classes must be >= 1");
  if (spec.dw_kernel == 0 || spec.dw_kernel % 2 == 0) {
    throw ValueError("dw_kernel must be odd so token mixing preserves resolution");
  }
  if (spec.input_resolution < 16) {
    throw ValueError("input_resolution must be at least 16");
  }
}

std::string spec_to_json(const ModelSpec& s) {
  nlohmann::ordered_json j;
  j["widths"] = s.widths;
  j["depths"] = s.depths;
  j["heads"] = s.heads;
  j["qk_dim"] = s.qk_dim;
  j["ffn_ratio"] = s.ffn_ratio;
  j["n_ffn"] = s.n_ffn;
  j["input_resolution"] = s.input_resolution;
  j["num_classes"] = s.num_classes;
  j["dw_kernel"] = s.dw_kernel;
  return j.dump(2) + "\n";
}

ModelSpec spec_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw IoError("model config is not a JSON object");
  }
  static const std::set<std::string> known = {
      "widths", "depths", "heads",       "qk_dim",           "ffn_ratio",
      "n_ffn",  "num_classes", "input_resolution", "dw_kernel"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) {
      throw IoError("unknown config field '" + item.key() + "'");
    }
  }
  auto arr3 = [&](const char* key) {
    if (!j.contains(key)) throw IoError(std::string("config is missing '") + key + "'");
    const auto& a = j[key];
    if (!a.is_array() || a.size() != 3) {
      throw IoError(std::string("config field '") + key + "' must be an array of 3");
    }
    std::array<size_t, 3> out{};
    for (size_t i = 0; i < 3; ++i) {
      if (!a[i].is_number_unsigned()) {
        throw IoError(std::string("config field '") + key + "' must hold unsigned integers");
      }
      out[i] = a[i].get<size_t>();
    }
    return out;
  };
  ModelSpec s;
  s.widths = arr3("widths");
  s.depths = arr3("depths");
  s.heads = arr3("heads");
  auto scalar = [&](const char* key, size_t fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number_unsigned()) {
      throw IoError(std::string("config field '") + key + "' must be an unsigned integer");
    }
    return j[key].get<size_t>();
  };
  s.qk_dim = scalar("qk_dim", s.qk_dim);
  s.ffn_ratio = scalar("ffn_ratio", s.ffn_ratio);
  s.n_ffn = scalar("n_ffn", s.n_ffn);
  s.input_resolution = scalar("input_resolution", s.input_resolution);
  s.num_classes = scalar("num_classes", s.num_classes);
  s.dw_kernel = scalar("dw_kernel", s.dw_kernel);
  validate_spec(s);
  return s;
}

AttnKind attn_kind_from_string(const std::string& s) {
  if (s == "cga") return AttnKind::cga;
  if (s == "cga_no_cascade") return AttnKind::cga_no_cascade;
  if (s == "mhsa") return AttnKind::mhsa;
  throw ValueError("unknown attention kind '" + s + "'");
}

const char* attn_kind_name(AttnKind kind) {
  switch (kind) {
    case AttnKind::cga: return "cga";
    case AttnKind::cga_no_cascade: return "cga_no_cascade";
    case AttnKind::mhsa: return "mhsa";
  }
  return "cga";
}

// ---- layer forwards -----------------------------------------------------------

Tensor Conv2dLayer::forward(const Tensor& x, const Fwd& f) const {
  return conv2d(x, w, b, stride, pad, groups, f.graph);
}

Tensor BatchNormLayer::forward(const Tensor& x, const Fwd& f) const {
  Tensor rm = running_mean;
  Tensor rv = running_var;
  return batchnorm(x, gamma, beta, rm, rv, f.mode == Mode::train, momentum, eps, f.graph);
}

Tensor ConvBn::forward(const Tensor& x, const Fwd& f) const {
  Tensor y = conv.forward(x, f);
  if (bn) y = bn->forward(y, f);
  return y;
}

Tensor Ffn::forward(const Tensor& x, const Fwd& f) const {
  Tensor y = fc1.forward(x, f);
  y = relu(y, f.graph);
  return fc2.forward(y, f);
}

Tensor SqueezeExcite::forward(const Tensor& x, const Fwd& f) const {
  const size_t B = x.dim(0), C = x.dim(1);
  Tensor s = global_avg_pool(x, f.graph);       // [B, C]
  s = reshape(s, {B, C, 1, 1}, f.graph);
  s = fc1.forward(s, f);
  s = relu(s, f.graph);
  s = fc2.forward(s, f);
  s = sigmoid(s, f.graph);
  s = reshape(s, {B, C}, f.graph);
  return mul_channels(x, s, f.graph);
}

Tensor InvertedResidual::forward(const Tensor& x, const Fwd& f) const {
  Tensor y = expand.forward(x, f);
  y = relu(y, f.graph);
  y = dwise.forward(y, f);
  y = relu(y, f.graph);
  y = se.forward(y, f);
  return project.forward(y, f);
}

Tensor Attention::forward(const Tensor& x, const Fwd& f, BlockTrace* trace) const {
  if (x.ndim() != 4) throw ShapeError("attention input must be [B,C,H,W]");
  const size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % heads != 0) throw ShapeError("attention channels not divisible by heads");
  const size_t N = H * W;
  const size_t dv = C / heads;
  Graph* g = f.graph;

  std::vector<Tensor> parts;
  if (!full_feature) parts = split_channels(x, heads, g);

  std::vector<Tensor> outs;
  outs.reserve(heads);
  Tensor prev;
  for (size_t j = 0; j < heads; ++j) {
    Tensor hin = full_feature ? x : parts[j];
    if (!full_feature && cascade && j > 0) hin = add(hin, prev, g);

    Tensor q = head[j].q.forward(hin, f);
    q = head[j].qdw.forward(q, f);
    Tensor k = head[j].k.forward(hin, f);
    Tensor v = head[j].v.forward(hin, f);

    q = transpose_last2(reshape(q, {B, qk_dim, N}, g), g);  // [B, N, qk]
    k = reshape(k, {B, qk_dim, N}, g);                      // [B, qk, N]
    v = transpose_last2(reshape(v, {B, dv, N}, g), g);      // [B, N, dv]

    Tensor scores = matmul(q, k, g);
    scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(qk_dim)), g);
    Tensor amap = softmax_lastdim(scores, g);
    Tensor o = transpose_last2(matmul(amap, v, g), g);  // [B, dv, N]
    o = reshape(o, {B, dv, H, W}, g);

    if (trace) {
      AttentionHeadTrace ht;
      ht.attn_map = amap.detach().clone();
      if (trace->capture_inputs) ht.head_input = hin.detach().clone();
      trace->per_head.push_back(std::move(ht));
    }
    outs.push_back(o);
    prev = o;
  }
  Tensor cat = heads == 1 ? outs[0] : concat_channels(outs, g);
  return proj.forward(cat, f);
}

Tensor SandwichBlock::forward(const Tensor& x, const Fwd& f, BlockTrace* trace) const {
  Graph* g = f.graph;
  Tensor y = x;
  for (const auto& [dw, ffn] : pre) {
    y = add(y, dw.forward(y, f), g);
    y = add(y, ffn.forward(y, f), g);
  }
  y = add(y, attn.forward(y, f, trace), g);
  for (const auto& [dw, ffn] : post) {
    y = add(y, dw.forward(y, f), g);
    y = add(y, ffn.forward(y, f), g);
  }
  return y;
}

Tensor SubsampleBlock::forward(const Tensor& x, const Fwd& f) const {
  Graph* g = f.graph;
  Tensor y = x;
  for (const auto& [dw, ffn] : pre) {
    y = add(y, dw.forward(y, f), g);
    y = add(y, ffn.forward(y, f), g);
  }
  y = ir.forward(y, f);  // stride 2, no skip
  for (const auto& [dw, ffn] : post) {
    y = add(y, dw.forward(y, f), g);
    y = add(y, ffn.forward(y, f), g);
  }
  return y;
}

Tensor PatchEmbed::forward(const Tensor& x, const Fwd& f) const {
  Tensor y = convs[0].forward(x, f);
  for (size_t i = 1; i < convs.size(); ++i) {
    y = relu(y, f.graph);
    y = convs[i].forward(y, f);
  }
  return y;
}

Tensor ClassifierHead::forward(const Tensor& x, const Fwd& f) const {
  Tensor y = bn ? bn->forward(x, f) : x;
  y = matmul(y, w, f.graph);
  return add_bias_lastdim(y, b, f.graph);
}

// ---- builder -----------------------------------------------------------------

namespace {

struct Builder {
  Rng rng;
  Dtype dtype;

  Builder(uint64_t seed, Dtype dt) : rng(seed), dtype(dt) {}

  Tensor weight(std::vector<size_t> shape) {
    Tensor t = Tensor::trunc_normal(std::move(shape), rng, 0.02, dtype);
    t.set_requires_grad(true);
    return t;
  }
  Tensor param(std::vector<size_t> shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value, dtype);
    t.set_requires_grad(true);
    return t;
  }

  Conv2dLayer conv(size_t cin, size_t cout, size_t k, size_t stride, size_t pad, size_t groups,
                   bool bias) {
    Conv2dLayer c;
    c.w = weight({cout, cin / groups, k, k});
    if (bias) c.b = param({cout}, 0.0);
    c.stride = stride;
    c.pad = pad;
    c.groups = groups;
    return c;
  }

  BatchNormLayer bn(size_t c) {
    BatchNormLayer n;
    n.gamma = param({c}, 1.0);
    n.beta = param({c}, 0.0);
    n.running_mean = Tensor::zeros({c}, dtype);
    n.running_var = Tensor::ones({c}, dtype);
    return n;
  }

  ConvBn convbn(size_t cin, size_t cout, size_t k, size_t stride, size_t pad, size_t groups) {
    ConvBn cb;
    cb.conv = conv(cin, cout, k, stride, pad, groups, /*bias=*/false);
    cb.bn = bn(cout);
    return cb;
  }

  ConvBn token_dw(size_t c, size_t k) { return convbn(c, c, k, 1, k / 2, c); }

  Ffn ffn(size_t c, size_t ratio) {
    Ffn f;
    f.fc1 = convbn(c, c * ratio, 1, 1, 0, 1);
    f.fc2 = convbn(c * ratio, c, 1, 1, 0, 1);
    return f;
  }

  std::vector<std::pair<ConvBn, Ffn>> mixer_pairs(size_t c, const ModelSpec& spec) {
    std::vector<std::pair<ConvBn, Ffn>> out;
    out.reserve(spec.n_ffn);
    for (size_t i = 0; i < spec.n_ffn; ++i) {
      out.emplace_back(token_dw(c, spec.dw_kernel), ffn(c, spec.ffn_ratio));
    }
    return out;
  }

  Attention attention(size_t c, size_t h, const ModelSpec& spec, AttnKind kind) {
    Attention a;
    a.heads = h;
    a.qk_dim = spec.qk_dim;
    a.cascade = (kind == AttnKind::cga);
    a.full_feature = (kind == AttnKind::mhsa);
    const size_t cin = a.full_feature ? c : c / h;
    const size_t dv = c / h;
    a.head.reserve(h);
    for (size_t j = 0; j < h; ++j) {
      AttentionHead hd;
      hd.q = conv(cin, spec.qk_dim, 1, 1, 0, 1, false);
      hd.k = conv(cin, spec.qk_dim, 1, 1, 0, 1, false);
      hd.v = conv(cin, dv, 1, 1, 0, 1, false);
      hd.qdw = conv(spec.qk_dim, spec.qk_dim, 3, 1, 1, spec.qk_dim, false);
      a.head.push_back(std::move(hd));
    }
    a.proj = conv(c, c, 1, 1, 0, 1, false);
    return a;
  }

  SandwichBlock sandwich(size_t c, size_t h, const ModelSpec& spec, AttnKind kind) {
    SandwichBlock b;
    b.pre = mixer_pairs(c, spec);
    b.attn = attention(c, h, spec, kind);
    b.post = mixer_pairs(c, spec);
    return b;
  }

  SubsampleBlock subsample(size_t cin, size_t cout, const ModelSpec& spec) {
    SubsampleBlock b;
    b.pre = mixer_pairs(cin, spec);
    const size_t hidden = cin * 4;
    b.ir.expand = convbn(cin, hidden, 1, 1, 0, 1);
    b.ir.dwise = convbn(hidden, hidden, 3, 2, 1, hidden);
    b.ir.se.fc1 = conv(hidden, hidden / 4, 1, 1, 0, 1, /*bias=*/true);
    b.ir.se.fc2 = conv(hidden / 4, hidden, 1, 1, 0, 1, /*bias=*/true);
    b.ir.project = convbn(hidden, cout, 1, 1, 0, 1);
    b.post = mixer_pairs(cout, spec);
    return b;
  }

  PatchEmbed patch_embed(size_t c1) {
    PatchEmbed p;
    p.convs[0] = convbn(3, c1 / 8, 3, 2, 1, 1);
    p.convs[1] = convbn(c1 / 8, c1 / 4, 3, 2, 1, 1);
    p.convs[2] = convbn(c1 / 4, c1 / 2, 3, 2, 1, 1);
    p.convs[3] = convbn(c1 / 2, c1, 3, 2, 1, 1);
    return p;
  }

  ClassifierHead head(size_t c, size_t classes) {
    ClassifierHead h;
    h.bn = bn(c);
    h.w = weight({c, classes});
    h.b = param({classes}, 0.0);
    return h;
  }
};

}  // namespace

Model build_model(const ModelSpec& spec, uint64_t seed, AttnKind kind, Dtype dtype) {
  validate_spec(spec);
  Builder b(seed, dtype);
  Model m;
  m.spec = spec;
  m.attn_kind = kind;
  m.dtype = dtype;
  m.patch_embed = b.patch_embed(spec.widths[0]);
  for (size_t s = 0; s < 3; ++s) {
    m.stages[s].reserve(spec.depths[s]);
    for (size_t i = 0; i < spec.depths[s]; ++i) {
      m.stages[s].push_back(b.sandwich(spec.widths[s], spec.heads[s], spec, kind));
    }
    if (s < 2) m.subsamples[s] = b.subsample(spec.widths[s], spec.widths[s + 1], spec);
  }
  m.head = b.head(spec.widths[2], spec.num_classes);
  return m;
}

Model build_variant(const std::string& name, uint64_t seed, AttnKind kind, Dtype dtype) {
  return build_model(spec_for_variant(name), seed, kind, dtype);
}

Tensor model_forward(const Model& m, const Tensor& x, Mode mode, Graph* g,
                     AttentionTrace* trace) {
  if (!x.defined()) throw StateError("model_forward on an undefined input");
  const size_t r = m.spec.input_resolution;
  if (x.ndim() != 4 || x.dim(1) != 3 || x.dim(2) != r || x.dim(3) != r) {
    throw ShapeError("model input must be [B,3," + std::to_string(r) + "," + std::to_string(r) +
                     "]");
  }
  if (x.dtype() != m.dtype) {
    throw ContractError("model built for " + std::string(dtype_name(m.dtype)) + ", input is " +
                        dtype_name(x.dtype()));
  }
  if (m.folded && mode == Mode::train) {
    throw StateError("folded model supports inference only");
  }
  const Fwd f{mode, g};
  Tensor y = m.patch_embed.forward(x, f);
  for (size_t s = 0; s < 3; ++s) {
    for (size_t i = 0; i < m.stages[s].size(); ++i) {
      BlockTrace* bt = nullptr;
      if (trace) {
        BlockTrace fresh;
        fresh.block = "stage" + std::to_string(s + 1) + ".block" + std::to_string(i);
        fresh.heads = m.stages[s][i].attn.heads;
        fresh.capture_inputs = trace->capture_head_inputs;
        trace->blocks.push_back(std::move(fresh));
        bt = &trace->blocks.back();
      }
      y = m.stages[s][i].forward(y, f, bt);
    }
    if (s < 2) y = m.subsamples[s].forward(y, f);
  }
  y = global_avg_pool(y, g);
  return m.head.forward(y, f);
}

// ---- registry -----------------------------------------------------------------

namespace {

using Visitor = std::function<void(const std::string&, Tensor, bool, size_t)>;

void visit_conv(const std::string& p, const Conv2dLayer& c, const Visitor& v) {
  v(p + ".w", c.w, false, 0);
  if (c.b.defined()) v(p + ".b", c.b, false, 0);
}

void visit_bn(const std::string& p, const BatchNormLayer& n, const Visitor& v) {
  v(p + ".gamma", n.gamma, false, 0);
  v(p + ".beta", n.beta, false, 0);
  v(p + ".mean", n.running_mean, true, 0);
  v(p + ".var", n.running_var, true, 0);
}

void visit_convbn(const std::string& p, const ConvBn& cb, const Visitor& v) {
  visit_conv(p, cb.conv, v);
  if (cb.bn) visit_bn(p + ".bn", *cb.bn, v);
}

void visit_pairs(const std::string& p, const char* tag,
                 const std::vector<std::pair<ConvBn, Ffn>>& pairs, const Visitor& v) {
  for (size_t i = 0; i < pairs.size(); ++i) {
    const std::string base = p + "." + tag + std::to_string(i);
    visit_convbn(base + ".dw", pairs[i].first, v);
    visit_convbn(base + ".ffn.fc1", pairs[i].second.fc1, v);
    visit_convbn(base + ".ffn.fc2", pairs[i].second.fc2, v);
  }
}

void visit_model(const Model& m, const Visitor& v) {
  for (size_t i = 0; i < m.patch_embed.convs.size(); ++i) {
    visit_convbn("patch_embed.conv" + std::to_string(i), m.patch_embed.convs[i], v);
  }
  for (size_t s = 0; s < 3; ++s) {
    for (size_t bi = 0; bi < m.stages[s].size(); ++bi) {
      const SandwichBlock& blk = m.stages[s][bi];
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(bi);
      visit_pairs(p, "pre", blk.pre, v);
      for (size_t h = 0; h < blk.attn.head.size(); ++h) {
        const std::string hp = p + ".attn.head" + std::to_string(h);
        visit_conv(hp + ".q", blk.attn.head[h].q, v);
        visit_conv(hp + ".k", blk.attn.head[h].k, v);
        visit_conv(hp + ".v", blk.attn.head[h].v, v);
        visit_conv(hp + ".qdw", blk.attn.head[h].qdw, v);
      }
      visit_conv(p + ".attn.proj", blk.attn.proj, v);
      visit_pairs(p, "post", blk.post, v);
    }
    if (s < 2) {
      const SubsampleBlock& blk = m.subsamples[s];
      const std::string p = "subsample" + std::to_string(s + 1);
      visit_pairs(p, "pre", blk.pre, v);
      visit_convbn(p + ".ir.expand", blk.ir.expand, v);
      visit_convbn(p + ".ir.dw", blk.ir.dwise, v);
      visit_conv(p + ".ir.se.fc1", blk.ir.se.fc1, v);
      visit_conv(p + ".ir.se.fc2", blk.ir.se.fc2, v);
      visit_convbn(p + ".ir.project", blk.ir.project, v);
      visit_pairs(p, "post", blk.post, v);
    }
  }
  if (m.head.bn) visit_bn("head.bn", *m.head.bn, v);
  v("head.fc.w", m.head.w, false, 1);
  v("head.fc.b", m.head.b, false, 0);
}

}  // namespace

std::vector<ParamEntry> named_params(const Model& m) {
  std::vector<ParamEntry> out;
  visit_model(m, [&](const std::string& name, Tensor t, bool is_buffer, size_t axis) {
    if (!is_buffer) out.push_back({name, std::move(t), false, axis});
  });
  return out;
}

std::vector<ParamEntry> named_tensors(const Model& m) {
  std::vector<ParamEntry> out;
  visit_model(m, [&](const std::string& name, Tensor t, bool is_buffer, size_t axis) {
    out.push_back({name, std::move(t), is_buffer, axis});
  });
  return out;
}

// ---- clone / fold -----------------------------------------------------------

namespace {

Tensor clone_opt(const Tensor& t) { return t.defined() ? t.clone() : Tensor(); }

Conv2dLayer clone(const Conv2dLayer& c) {
  return {c.w.clone(), clone_opt(c.b), c.stride, c.pad, c.groups};
}

BatchNormLayer clone(const BatchNormLayer& n) {
  return {n.gamma.clone(), n.beta.clone(), n.running_mean.clone(), n.running_var.clone(),
          n.momentum, n.eps};
}

ConvBn clone(const ConvBn& cb) {
  ConvBn out;
  out.conv = clone(cb.conv);
  if (cb.bn) out.bn = clone(*cb.bn);
  return out;
}

Ffn clone(const Ffn& f) { return {clone(f.fc1), clone(f.fc2)}; }

std::vector<std::pair<ConvBn, Ffn>> clone(const std::vector<std::pair<ConvBn, Ffn>>& pairs) {
  std::vector<std::pair<ConvBn, Ffn>> out;
  out.reserve(pairs.size());
  for (const auto& [dw, ffn] : pairs) out.emplace_back(clone(dw), clone(ffn));
  return out;
}

Attention clone(const Attention& a) {
  Attention out;
  out.heads = a.heads;
  out.qk_dim = a.qk_dim;
  out.cascade = a.cascade;
  out.full_feature = a.full_feature;
  out.head.reserve(a.head.size());
  for (const AttentionHead& h : a.head) {
    out.head.push_back({clone(h.q), clone(h.k), clone(h.v), clone(h.qdw)});
  }
  out.proj = clone(a.proj);
  return out;
}

void for_each_convbn(Model& m, const std::function<void(ConvBn&)>& f) {
  for (ConvBn& cb : m.patch_embed.convs) f(cb);
  auto pairs = [&](std::vector<std::pair<ConvBn, Ffn>>& ps) {
    for (auto& [dw, ffn] : ps) {
      f(dw);
      f(ffn.fc1);
      f(ffn.fc2);
    }
  };
  for (auto& stage : m.stages) {
    for (SandwichBlock& blk : stage) {
      pairs(blk.pre);
      pairs(blk.post);
    }
  }
  for (SubsampleBlock& blk : m.subsamples) {
    pairs(blk.pre);
    f(blk.ir.expand);
    f(blk.ir.dwise);
    f(blk.ir.project);
    pairs(blk.post);
  }
}

}  // namespace

Model clone_model(const Model& m) {
  Model out;
  out.spec = m.spec;
  out.attn_kind = m.attn_kind;
  out.dtype = m.dtype;
  out.folded = m.folded;
  for (size_t i = 0; i < m.patch_embed.convs.size(); ++i) {
    out.patch_embed.convs[i] = clone(m.patch_embed.convs[i]);
  }
  for (size_t s = 0; s < 3; ++s) {
    out.stages[s].reserve(m.stages[s].size());
    for (const SandwichBlock& blk : m.stages[s]) {
      SandwichBlock copy;
      copy.pre = clone(blk.pre);
      copy.attn = clone(blk.attn);
      copy.post = clone(blk.post);
      out.stages[s].push_back(std::move(copy));
    }
  }
  for (size_t s = 0; s < 2; ++s) {
    const SubsampleBlock& blk = m.subsamples[s];
    SubsampleBlock copy;
    copy.pre = clone(blk.pre);
    copy.ir.expand = clone(blk.ir.expand);
    copy.ir.dwise = clone(blk.ir.dwise);
    copy.ir.se.fc1 = clone(blk.ir.se.fc1);
    copy.ir.se.fc2 = clone(blk.ir.se.fc2);
    copy.ir.project = clone(blk.ir.project);
    copy.post = clone(blk.post);
    out.subsamples[s] = std::move(copy);
  }
  if (m.head.bn) out.head.bn = clone(*m.head.bn);
  out.head.w = m.head.w.clone();
  out.head.b = m.head.b.clone();
  return out;
}

Model fold_bn(const Model& m) {
  if (m.folded) throw StateError("model is already folded");
  Model out = clone_model(m);

  // Conv followed by BN: scale the conv filters by gamma/sqrt(var+eps) and
  // absorb mean/beta into a (possibly new) conv bias.
  for_each_convbn(out, [](ConvBn& cb) {
    if (!cb.bn) return;
    const BatchNormLayer& n = *cb.bn;
    const size_t cout = cb.conv.w.dim(0);
    const size_t per_filter = cb.conv.w.numel() / cout;
    Tensor new_bias = Tensor::zeros({cout}, cb.conv.w.dtype());
    new_bias.set_requires_grad(true);
    for (size_t oc = 0; oc < cout; ++oc) {
      const double scale = n.gamma.at(oc) / std::sqrt(n.running_var.at(oc) + n.eps);
      for (size_t i = 0; i < per_filter; ++i) {
        const size_t idx = oc * per_filter + i;
        cb.conv.w.set(idx, cb.conv.w.at(idx) * scale);
      }
      const double b0 = cb.conv.b.defined() ? cb.conv.b.at(oc) : 0.0;
      new_bias.set(oc, (b0 - n.running_mean.at(oc)) * scale + n.beta.at(oc));
    }
    cb.conv.b = new_bias;
    cb.bn.reset();
  });

  // The classifier BN sits after the pooling, so it folds forward into the
  // linear instead: y = (x*s + t) W + b = x (s.W) + (b + t.W).
  if (out.head.bn) {
    const BatchNormLayer& n = *out.head.bn;
    const size_t cin = out.head.w.dim(0);
    const size_t classes = out.head.w.dim(1);
    std::vector<double> s(cin), t(cin);
    for (size_t i = 0; i < cin; ++i) {
      s[i] = n.gamma.at(i) / std::sqrt(n.running_var.at(i) + n.eps);
      t[i] = n.beta.at(i) - n.running_mean.at(i) * s[i];
    }
    for (size_t o = 0; o < classes; ++o) {
      double shift = 0.0;
      for (size_t i = 0; i < cin; ++i) shift += t[i] * out.head.w.at(i * classes + o);
      out.head.b.set(o, out.head.b.at(o) + shift);
    }
    for (size_t i = 0; i < cin; ++i) {
      for (size_t o = 0; o < classes; ++o) {
        out.head.w.set(i * classes + o, out.head.w.at(i * classes + o) * s[i]);
      }
    }
    out.head.bn.reset();
  }

  out.folded = true;
  return out;
}

// ---- weights io ----------------------------------------------------------------

void save_weights(const Model& m, const std::string& path) {
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const ParamEntry& e : named_tensors(m)) entries.emplace_back(e.name, e.tensor);
  write_weights_file(path, entries);
}

void load_weights(Model& m, const std::string& path) {
  const auto entries = read_weights_file(path);
  const auto targets = named_tensors(m);
  if (entries.size() != targets.size()) {
    throw IoError("weights file holds " + std::to_string(entries.size()) +
                  " tensors, the model has " + std::to_string(targets.size()));
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, tensor] = entries[i];
    const ParamEntry& target = targets[i];
    if (name != target.name) {
      throw IoError("weights entry " + std::to_string(i) + " is '" + name + "', expected '" +
                    target.name + "'");
    }
    if (tensor.shape() != target.tensor.shape() || tensor.dtype() != target.tensor.dtype()) {
      throw IoError("weights entry '" + name + "' has the wrong shape or dtype");
    }
    Tensor dst = target.tensor;
    dst.copy_from(tensor);
  }
}

}  // namespace evit
