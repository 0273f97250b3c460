#include "evit/count.hpp"

namespace evit {

namespace {

uint64_t conv_macs(const Conv2dLayer& c, size_t& h, size_t& w) {
  const size_t oh = conv_out_dim(h, c.w.dim(2), c.stride, c.pad);
  const size_t ow = conv_out_dim(w, c.w.dim(3), c.stride, c.pad);
  h = oh;
  w = ow;
  return static_cast<uint64_t>(c.w.numel()) * oh * ow;
}

uint64_t convbn_macs(const ConvBn& cb, size_t& h, size_t& w) { return conv_macs(cb.conv, h, w); }

uint64_t pairs_macs(const std::vector<std::pair<ConvBn, Ffn>>& pairs, size_t& h, size_t& w) {
  uint64_t macs = 0;
  for (const auto& [dw, ffn] : pairs) {
    macs += convbn_macs(dw, h, w);
    macs += convbn_macs(ffn.fc1, h, w);
    macs += convbn_macs(ffn.fc2, h, w);
  }
  return macs;
}

uint64_t attention_macs(const Attention& a, size_t h, size_t w) {
  const uint64_t n = static_cast<uint64_t>(h) * w;
  uint64_t macs = 0;
  for (const AttentionHead& hd : a.head) {
    size_t th = h, tw = w;
    macs += conv_macs(hd.q, th, tw);
    th = h, tw = w;
    macs += conv_macs(hd.qdw, th, tw);
    th = h, tw = w;
    macs += conv_macs(hd.k, th, tw);
    th = h, tw = w;
    macs += conv_macs(hd.v, th, tw);
    const uint64_t dv = hd.v.w.dim(0);
    macs += n * n * (a.qk_dim + dv);  // QK^T plus attention-times-V
  }
  size_t th = h, tw = w;
  macs += conv_macs(a.proj, th, tw);
  return macs;
}

uint64_t subsample_macs(const SubsampleBlock& b, size_t& h, size_t& w) {
  uint64_t macs = pairs_macs(b.pre, h, w);
  macs += convbn_macs(b.ir.expand, h, w);
  macs += convbn_macs(b.ir.dwise, h, w);  // stride 2 happens here
  size_t one_h = 1, one_w = 1;            // SE acts on the pooled vector
  macs += conv_macs(b.ir.se.fc1, one_h, one_w);
  one_h = one_w = 1;
  macs += conv_macs(b.ir.se.fc2, one_h, one_w);
  macs += convbn_macs(b.ir.project, h, w);
  macs += pairs_macs(b.post, h, w);
  return macs;
}

std::string module_of(const std::string& name) {
  const size_t dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

}  // namespace

size_t conv_out_dim(size_t in, size_t k, size_t stride, size_t pad) {
  if (in + 2 * pad < k) throw ShapeError("kernel does not fit the padded input");
  return (in + 2 * pad - k) / stride + 1;
}

size_t count_params(const Model& m) {
  size_t total = 0;
  for (const ParamEntry& e : named_params(m)) total += e.tensor.numel();
  return total;
}

size_t attention_qkv_params(const Attention& a) {
  size_t total = 0;
  for (const AttentionHead& hd : a.head) {
    total += hd.q.w.numel() + hd.k.w.numel() + hd.v.w.numel();
  }
  return total;
}

uint64_t count_flops(const Model& m, size_t resolution) {
  return count_report(m, resolution).flops;
}

CountReport count_report(const Model& m, size_t resolution) {
  CountReport report;
  report.resolution = resolution ? resolution : m.spec.input_resolution;

  // Params are grouped by the leading name component; flops come from a
  // shape walk that mirrors the forward pass.
  std::vector<CountRow> rows;
  auto row = [&](const std::string& module) -> CountRow& {
    for (CountRow& r : rows) {
      if (r.module == module) return r;
    }
    rows.push_back({module, 0, 0});
    return rows.back();
  };

  for (const ParamEntry& e : named_params(m)) {
    row(module_of(e.name)).params += e.tensor.numel();
  }

  size_t h = report.resolution, w = report.resolution;
  {
    uint64_t macs = 0;
    for (const ConvBn& cb : m.patch_embed.convs) macs += convbn_macs(cb, h, w);
    row("patch_embed").flops = macs;
  }
  for (size_t s = 0; s < 3; ++s) {
    uint64_t macs = 0;
    for (const SandwichBlock& blk : m.stages[s]) {
      macs += pairs_macs(blk.pre, h, w);
      macs += attention_macs(blk.attn, h, w);
      macs += pairs_macs(blk.post, h, w);
    }
    row("stage" + std::to_string(s + 1)).flops = macs;
    if (s < 2) {
      row("subsample" + std::to_string(s + 1)).flops = subsample_macs(m.subsamples[s], h, w);
    }
  }
  row("head").flops = m.head.w.numel();  // pooled feature times class matrix

  report.rows = std::move(rows);
  for (const CountRow& r : report.rows) {
    report.params += r.params;
    report.flops += r.flops;
  }
  return report;
}

}  // namespace evit
