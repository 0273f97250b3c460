#include "evit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace evit {

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// ---- head similarity ---------------------------------------------------------

namespace {

std::vector<double> batch_mean_map(const Tensor& map) {
  if (map.ndim() != 3) throw ShapeError("attention map must be [B,N,N]");
  const size_t B = map.dim(0);
  const size_t plane = map.dim(1) * map.dim(2);
  std::vector<double> mean(plane, 0.0);
  for (size_t b = 0; b < B; ++b) {
    for (size_t i = 0; i < plane; ++i) mean[i] += map.at(b * plane + i);
  }
  for (double& v : mean) v /= static_cast<double>(B);
  return mean;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

double attention_map_cosine(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("attention maps differ in shape");
  return cosine(batch_mean_map(a), batch_mean_map(b));
}

SimilarityReport head_similarity(const AttentionTrace& trace) {
  if (trace.blocks.empty()) {
    throw ValueError("similarity needs a non-empty attention trace");
  }
  SimilarityReport rep;
  double total = 0.0;
  for (const BlockTrace& bt : trace.blocks) {
    HeadSimilarityBlock hb;
    hb.block = bt.block;
    hb.heads = bt.per_head.size();
    if (bt.per_head.size() < 2) {
      ++rep.blocks_skipped;
      rep.blocks.push_back(std::move(hb));
      continue;
    }
    std::vector<std::vector<double>> mean_maps;
    mean_maps.reserve(bt.per_head.size());
    for (const AttentionHeadTrace& ht : bt.per_head) {
      if (!ht.attn_map.defined()) throw StateError("trace block is missing attention maps");
      mean_maps.push_back(batch_mean_map(ht.attn_map));
    }
    const size_t h = mean_maps.size();
    double block_sum = 0.0;
    for (size_t i = 0; i < h; ++i) {
      double best = -2.0;
      for (size_t j = 0; j < h; ++j) {
        if (j == i) continue;
        best = std::max(best, cosine(mean_maps[i], mean_maps[j]));
      }
      hb.max_cos.push_back(best);
      block_sum += best;
      total += best;
      ++rep.heads_measured;
    }
    hb.mean_max_cos = block_sum / static_cast<double>(h);
    rep.blocks.push_back(std::move(hb));
  }
  if (rep.heads_measured == 0) {
    throw ValueError("similarity needs at least one block with two or more heads");
  }
  rep.mean_max_cos = total / static_cast<double>(rep.heads_measured);
  return rep;
}

AttentionComparison compare_attention_variants(const ModelSpec& spec, uint64_t seed,
                                               size_t batch) {
  if (batch == 0) throw ValueError("batch must be >= 1");
  validate_spec(spec);
  AttentionComparison comp;
  comp.seed = seed;
  comp.batch = batch;

  Model cga = build_model(spec, seed, AttnKind::cga);
  Model mhsa = build_model(spec, seed, AttnKind::mhsa);
  Rng rng(derive_seed(seed, 1));
  const size_t r = spec.input_resolution;
  Tensor x = Tensor::uniform({batch, 3, r, r}, rng, -1.0, 1.0, Dtype::f32);

  AttentionTrace ta, tb;
  model_forward(cga, x, Mode::infer, nullptr, &ta);
  model_forward(mhsa, x, Mode::infer, nullptr, &tb);

  bool any_multi = false, any_single = false;
  for (const BlockTrace& bt : ta.blocks) {
    (bt.per_head.size() >= 2 ? any_multi : any_single) = true;
  }
  comp.partial = any_single;
  if (any_multi) {
    comp.cga = head_similarity(ta);
    comp.mhsa = head_similarity(tb);
  }
  return comp;
}

// ---- channel importance ---------------------------------------------------------

namespace {

std::string group_of(const std::string& name) {
  const bool in_head = name.find(".attn.head") != std::string::npos;
  if (in_head && (name.ends_with(".q.w") || name.ends_with(".k.w") || name.ends_with(".qdw.w"))) {
    return "qk";
  }
  if (in_head && name.ends_with(".v.w")) return "v";
  if (name.find(".ffn.") != std::string::npos) return "ffn";
  return "other";
}

}  // namespace

ImportanceReport importance_from_grads(const std::vector<ParamEntry>& params) {
  ImportanceReport rep;
  for (const ParamEntry& e : params) {
    Tensor grad = e.tensor.grad();
    if (!grad.defined()) {
      throw StateError("parameter '" + e.name + "' has no gradient; run backward first");
    }
    const auto& shape = e.tensor.shape();
    if (e.channel_axis >= shape.size()) {
      throw ShapeError("parameter '" + e.name + "' has no axis " +
                       std::to_string(e.channel_axis));
    }
    const size_t channels = shape[e.channel_axis];
    size_t inner = 1;
    for (size_t i = e.channel_axis + 1; i < shape.size(); ++i) inner *= shape[i];

    std::vector<double> acc(channels, 0.0);
    const size_t n = e.tensor.numel();
    for (size_t flat = 0; flat < n; ++flat) {
      acc[(flat / inner) % channels] += e.tensor.at(flat) * grad.at(flat);
    }
    ImportanceParam p;
    p.name = e.name;
    p.group = group_of(e.name);
    p.scores.resize(channels);
    for (size_t c = 0; c < channels; ++c) p.scores[c] = std::fabs(acc[c]);
    p.ranking.resize(channels);
    std::iota(p.ranking.begin(), p.ranking.end(), size_t{0});
    std::stable_sort(p.ranking.begin(), p.ranking.end(),
                     [&](size_t a, size_t b) { return p.scores[a] > p.scores[b]; });

    ImportanceGroup& grp = rep.groups[p.group];
    for (double s : p.scores) grp.total += s;
    grp.channels += channels;
    rep.params.push_back(std::move(p));
  }
  for (auto& [name, grp] : rep.groups) {
    grp.mean = grp.channels ? grp.total / static_cast<double>(grp.channels) : 0.0;
  }
  return rep;
}

ImportanceReport taylor_importance(const Model& m, const Tensor& input,
                                   const std::vector<size_t>& labels) {
  std::vector<ParamEntry> params = named_params(m);
  for (ParamEntry& e : params) e.tensor.clear_grad();
  Graph g;
  Tensor logits = model_forward(m, input, Mode::train, &g);
  Tensor loss = softmax_cross_entropy(logits, labels, &g);
  g.backward(loss);
  return importance_from_grads(params);
}

// ---- gradcheck --------------------------------------------------------------------

GradCheckReport gradcheck(const std::string& label,
                          const std::function<Tensor(const Tensor&, Graph*)>& fwd,
                          const Tensor& input, const std::vector<ParamEntry>& params,
                          double tolerance, double eps) {
  if (!(tolerance > 0.0)) throw ValueError("gradcheck tolerance must be positive");
  if (!input.defined()) throw StateError("gradcheck input is undefined");

  Tensor in = input;
  in.set_requires_grad(true);
  in.clear_grad();
  for (const ParamEntry& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(true);
    t.clear_grad();
  }

  Graph g;
  Tensor out = fwd(in, &g);
  Tensor loss = sum_all(out, &g);
  g.backward(loss);

  auto eval_loss = [&](const Tensor& at) { return sum_all(fwd(at, nullptr)).item(); };

  GradCheckReport rep;
  rep.module = label;
  rep.tolerance = tolerance;

  auto compare = [&](const std::string& name, const Tensor& target, const Tensor& fd) {
    Tensor analytic = target.grad();
    GradCheckEntry entry;
    entry.name = name;
    const size_t n = target.numel();
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double a = analytic.defined() ? analytic.at(i) : 0.0;
      const double e = rel_err(a, fd.at(i));
      entry.max_rel_err = std::max(entry.max_rel_err, e);
      sum += e;
    }
    entry.mean_rel_err = sum / static_cast<double>(n);
    rep.worst = std::max(rep.worst, entry.max_rel_err);
    rep.entries.push_back(std::move(entry));
  };

  {
    Tensor fd = finite_diff_grad(eval_loss, in, eps);
    compare("input", in, fd);
  }
  for (const ParamEntry& p : params) {
    Tensor t = p.tensor;
    Tensor saved = t.clone();
    auto f = [&](const Tensor& probe) {
      t.copy_from(probe);
      return eval_loss(in);
    };
    Tensor fd = finite_diff_grad(f, t, eps);
    t.copy_from(saved);
    compare(p.name, t, fd);
  }
  rep.pass = rep.worst < tolerance;
  return rep;
}

// ---- prebuilt gradcheck modules -----------------------------------------------------

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.widths = {8, 8, 8};
  s.depths = {1, 1, 1};
  s.heads = {2, 2, 2};
  s.qk_dim = 8;
  s.ffn_ratio = 2;
  s.n_ffn = 1;
  s.input_resolution = 64;
  s.num_classes = 10;
  s.dw_kernel = 3;
  return s;
}

// Fresh builds start at trunc_normal(0.02); that makes gradients so small
// the relative check would pass vacuously. Re-draw everything at O(1).
void randomize_params(std::vector<ParamEntry>& params, Rng& rng) {
  for (ParamEntry& e : params) {
    const bool is_gamma = e.name.ends_with(".gamma");
    const size_t n = e.tensor.numel();
    for (size_t i = 0; i < n; ++i) {
      e.tensor.set(i, is_gamma ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5));
    }
  }
}

std::vector<ParamEntry> params_with_prefix(const Model& m, const std::string& prefix) {
  std::vector<ParamEntry> out;
  for (ParamEntry& e : named_params(m)) {
    if (e.name.rfind(prefix, 0) == 0) out.push_back(e);
  }
  return out;
}

struct ToyCase {
  std::string name;
  Tensor input;
  std::vector<ParamEntry> params;
  std::function<Tensor(const Tensor&, Graph*)> fwd;
};

ToyCase make_case(const std::string& name, uint64_t seed) {
  const Dtype dt = Dtype::f64;
  Rng rng(derive_seed(seed, 100));
  ToyCase c;
  c.name = name;

  if (name == "linear") {
    Tensor w = Tensor::uniform({5, 3}, rng, -1.0, 1.0, dt);
    Tensor b = Tensor::uniform({3}, rng, -1.0, 1.0, dt);
    c.input = Tensor::uniform({4, 5}, rng, -1.0, 1.0, dt);
    c.params = {{"w", w, false, 0}, {"b", b, false, 0}};
    c.fwd = [w, b](const Tensor& x, Graph* g) {
      return add_bias_lastdim(matmul(x, w, g), b, g);
    };
  } else if (name == "conv") {
    Tensor w = Tensor::uniform({4, 3, 3, 3}, rng, -1.0, 1.0, dt);
    Tensor b = Tensor::uniform({4}, rng, -1.0, 1.0, dt);
    c.input = Tensor::uniform({2, 3, 6, 6}, rng, -1.0, 1.0, dt);
    c.params = {{"w", w, false, 0}, {"b", b, false, 0}};
    c.fwd = [w, b](const Tensor& x, Graph* g) { return conv2d(x, w, b, 2, 1, 1, g); };
  } else if (name == "dwconv") {
    Tensor w = Tensor::uniform({4, 1, 3, 3}, rng, -1.0, 1.0, dt);
    c.input = Tensor::uniform({2, 4, 6, 6}, rng, -1.0, 1.0, dt);
    c.params = {{"w", w, false, 0}};
    c.fwd = [w](const Tensor& x, Graph* g) { return conv2d(x, w, Tensor(), 2, 1, 4, g); };
  } else if (name == "bn") {
    Tensor gamma = Tensor::uniform({4}, rng, 0.5, 1.5, dt);
    Tensor beta = Tensor::uniform({4}, rng, -0.5, 0.5, dt);
    Tensor rm = Tensor::zeros({4}, dt);
    Tensor rv = Tensor::ones({4}, dt);
    Tensor cw = Tensor::uniform({3, 4, 2, 2}, rng, -1.0, 1.0, dt);
    c.input = Tensor::uniform({3, 4, 2, 2}, rng, -1.0, 1.0, dt);
    c.params = {{"gamma", gamma, false, 0}, {"beta", beta, false, 0}};
    // The plain sum of a normalized output is constant in x, so weight the
    // elements to give the input a real gradient.
    c.fwd = [gamma, beta, rm, rv, cw](const Tensor& x, Graph* g) {
      Tensor m = rm, v = rv;
      return mul(batchnorm(x, gamma, beta, m, v, true, 0.1, 1e-5, g), cw, g);
    };
  } else if (name == "softmax") {
    Tensor cw = Tensor::uniform({2, 3, 5}, rng, -1.0, 1.0, dt);
    c.input = Tensor::uniform({2, 3, 5}, rng, -2.0, 2.0, dt);
    c.fwd = [cw](const Tensor& x, Graph* g) { return mul(softmax_lastdim(x, g), cw, g); };
  } else if (name == "cga" || name == "sandwich" || name == "subsample") {
    Model m = build_model(tiny_spec(), derive_seed(seed, 101), AttnKind::cga, dt);
    if (name == "cga") {
      c.params = params_with_prefix(m, "stage1.block0.attn.");
      randomize_params(c.params, rng);
      c.input = Tensor::uniform({2, 8, 4, 4}, rng, -1.0, 1.0, dt);
      Attention attn = m.stages[0][0].attn;
      c.fwd = [attn](const Tensor& x, Graph* g) { return attn.forward(x, {Mode::infer, g}); };
    } else if (name == "sandwich") {
      c.params = params_with_prefix(m, "stage1.block0.");
      randomize_params(c.params, rng);
      c.input = Tensor::uniform({2, 8, 4, 4}, rng, -1.0, 1.0, dt);
      SandwichBlock blk = m.stages[0][0];
      c.fwd = [blk](const Tensor& x, Graph* g) { return blk.forward(x, {Mode::train, g}); };
    } else {
      c.params = params_with_prefix(m, "subsample1.");
      randomize_params(c.params, rng);
      c.input = Tensor::uniform({2, 8, 6, 6}, rng, -1.0, 1.0, dt);
      SubsampleBlock blk = m.subsamples[0];
      c.fwd = [blk](const Tensor& x, Graph* g) { return blk.forward(x, {Mode::train, g}); };
    }
  } else {
    throw ValueError("unknown gradcheck module '" + name + "'");
  }
  return c;
}

}  // namespace

const std::vector<std::string>& gradcheck_module_names() {
  static const std::vector<std::string> names = {"linear", "conv",     "dwconv",   "bn",
                                                 "softmax", "cga",     "sandwich", "subsample"};
  return names;
}

std::vector<GradCheckReport> gradcheck_modules(const std::string& which, uint64_t seed,
                                               double tolerance) {
  std::vector<std::string> selected;
  if (which == "all" || which.empty()) {
    selected = gradcheck_module_names();
  } else {
    selected.push_back(which);
  }
  std::vector<GradCheckReport> reports;
  reports.reserve(selected.size());
  for (const std::string& name : selected) {
    ToyCase c = make_case(name, seed);
    reports.push_back(gradcheck(name, c.fwd, c.input, c.params, tolerance));
  }
  return reports;
}

// ---- serialization -------------------------------------------------------------------

namespace {

nlohmann::ordered_json similarity_report_json(const SimilarityReport& r) {
  nlohmann::ordered_json j;
  j["mean_max_cos"] = r.mean_max_cos;
  j["heads_measured"] = r.heads_measured;
  j["blocks_skipped"] = r.blocks_skipped;
  j["blocks"] = nlohmann::ordered_json::array();
  for (const HeadSimilarityBlock& b : r.blocks) {
    nlohmann::ordered_json jb;
    jb["block"] = b.block;
    jb["heads"] = b.heads;
    jb["max_cos"] = b.max_cos;
    jb["mean_max_cos"] = b.mean_max_cos;
    j["blocks"].push_back(std::move(jb));
  }
  return j;
}

}  // namespace

std::string similarity_to_json(const AttentionComparison& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["batch"] = c.batch;
  j["partial"] = c.partial;
  j["cga"] = similarity_report_json(c.cga);
  j["mhsa"] = similarity_report_json(c.mhsa);
  return j.dump(2) + "\n";
}

std::string similarity_to_table(const AttentionComparison& c) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6);
  auto table = [&](const char* title, const SimilarityReport& r) {
    out << title << " (mean max-cos " << r.mean_max_cos << ", " << r.blocks_skipped
        << " single-head blocks skipped)\n";
    for (const HeadSimilarityBlock& b : r.blocks) {
      out << "  " << std::left << std::setw(18) << b.block << std::right;
      if (b.max_cos.empty()) {
        out << " single head, skipped\n";
        continue;
      }
      for (double v : b.max_cos) out << " " << std::setw(9) << v;
      out << "   mean " << b.mean_max_cos << "\n";
    }
  };
  table("cascaded split attention", c.cga);
  table("full-feature attention", c.mhsa);
  if (c.partial) out << "note: single-head blocks carry no similarity values\n";
  return out.str();
}

std::string similarity_report_csv(const SimilarityReport& r) {
  std::ostringstream out;
  out << "block,head,max_cos\n";
  for (size_t bi = 0; bi < r.blocks.size(); ++bi) {
    const HeadSimilarityBlock& b = r.blocks[bi];
    for (size_t h = 0; h < b.max_cos.size(); ++h) {
      out << bi << "," << h << "," << std::setprecision(17) << b.max_cos[h] << "\n";
    }
  }
  return out.str();
}

std::string similarity_to_csv(const AttentionComparison& c) {
  std::ostringstream out;
  out << "variant,block,head,max_cos\n";
  auto rows = [&](const char* variant, const SimilarityReport& r) {
    for (size_t bi = 0; bi < r.blocks.size(); ++bi) {
      for (size_t h = 0; h < r.blocks[bi].max_cos.size(); ++h) {
        out << variant << "," << bi << "," << h << "," << std::setprecision(17)
            << r.blocks[bi].max_cos[h] << "\n";
      }
    }
  };
  rows("cga", c.cga);
  rows("mhsa", c.mhsa);
  return out.str();
}

std::string importance_to_json(const ImportanceReport& r) {
  nlohmann::ordered_json j;
  j["groups"] = nlohmann::ordered_json::object();
  for (const auto& [name, grp] : r.groups) {
    j["groups"][name] = {{"total", grp.total}, {"channels", grp.channels}, {"mean", grp.mean}};
  }
  j["params"] = nlohmann::ordered_json::array();
  for (const ImportanceParam& p : r.params) {
    nlohmann::ordered_json jp;
    jp["name"] = p.name;
    jp["group"] = p.group;
    jp["scores"] = p.scores;
    jp["ranking"] = p.ranking;
    j["params"].push_back(std::move(jp));
  }
  return j.dump(2) + "\n";
}

std::string importance_to_table(const ImportanceReport& r) {
  std::ostringstream out;
  out << std::scientific << std::setprecision(4);
  out << "group summary (|weight*grad| per output channel)\n";
  for (const auto& [name, grp] : r.groups) {
    out << "  " << std::left << std::setw(8) << name << std::right << " channels "
        << std::setw(6) << grp.channels << "  total " << grp.total << "  mean " << grp.mean
        << "\n";
  }
  out << "per-parameter top channels\n";
  for (const ImportanceParam& p : r.params) {
    out << "  " << std::left << std::setw(44) << p.name << std::right << " [" << p.group << "]";
    const size_t show = std::min<size_t>(4, p.ranking.size());
    for (size_t i = 0; i < show; ++i) {
      out << " #" << p.ranking[i] << "=" << p.scores[p.ranking[i]];
    }
    out << "\n";
  }
  return out.str();
}

std::string gradcheck_to_json(const std::vector<GradCheckReport>& reports) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const GradCheckReport& r : reports) {
    nlohmann::ordered_json jr;
    jr["module"] = r.module;
    jr["tolerance"] = r.tolerance;
    jr["worst_rel_err"] = r.worst;
    jr["pass"] = r.pass;
    jr["entries"] = nlohmann::ordered_json::array();
    for (const GradCheckEntry& e : r.entries) {
      jr["entries"].push_back(
          {{"name", e.name}, {"max_rel_err", e.max_rel_err}, {"mean_rel_err", e.mean_rel_err}});
    }
    j.push_back(std::move(jr));
  }
  return j.dump(2) + "\n";
}

std::string gradcheck_to_table(const std::vector<GradCheckReport>& reports) {
  std::ostringstream out;
  out << std::scientific << std::setprecision(3);
  for (const GradCheckReport& r : reports) {
    out << std::left << std::setw(10) << r.module << std::right << " worst " << r.worst
        << "  tol " << r.tolerance << "  " << (r.pass ? "pass" : "FAIL") << "\n";
    for (const GradCheckEntry& e : r.entries) {
      out << "    " << std::left << std::setw(40) << e.name << std::right << " max "
          << e.max_rel_err << "  mean " << e.mean_rel_err << "\n";
    }
  }
  return out.str();
}

}  // namespace evit
