// End-to-end checks for the shipped library and CLI. Each check prints one
// [PASS]/[FAIL] line with its key numbers and wall time; the exit status is
// the number of failures. Tolerances and time budgets are pinned here, next
// to the check they gate.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "evit/analysis.hpp"
#include "evit/bench.hpp"
#include "evit/cli.hpp"
#include "evit/count.hpp"
#include "evit/io.hpp"
#include "evit/model.hpp"
#include "evit/ops.hpp"
#include "oracles.hpp"

using namespace evit;
namespace fs = std::filesystem;

namespace {

constexpr uint64_t kSeed = 42;

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

bool report(bool ok, const std::string& line) {
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << line << std::endl;
  return ok;
}

std::string num(double v) {
  std::ostringstream ss;
  ss << std::setprecision(3) << v;
  return ss.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

// O(1) redraw of a model's parameters; the build-time init is deliberately
// tiny and makes several of the checks below vacuous at that scale.
void redraw_params(const Model& m, uint64_t seed) {
  Rng rng(seed);
  for (const ParamEntry& e : named_params(m)) {
    const bool is_gamma = e.name.ends_with(".gamma");
    for (size_t i = 0; i < e.tensor.numel(); ++i) {
      e.tensor.set(i, is_gamma ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5));
    }
  }
}

void redraw_attention(const Attention& a, uint64_t seed) {
  Rng rng(seed);
  auto redraw = [&](const Tensor& w) {
    for (size_t i = 0; i < w.numel(); ++i) w.set(i, rng.uniform(-0.5, 0.5));
  };
  for (const AttentionHead& hd : a.head) {
    redraw(hd.q.w);
    redraw(hd.k.w);
    redraw(hd.v.w);
    redraw(hd.qdw.w);
  }
  redraw(a.proj.w);
}

ModelSpec small_spec() {
  ModelSpec s;
  s.widths = {8, 8, 8};
  s.depths = {1, 1, 1};
  s.heads = {2, 2, 2};
  s.qk_dim = 8;
  s.input_resolution = 32;
  s.num_classes = 5;
  return s;
}

struct VariantRow {
  const char* name;
  std::array<size_t, 3> widths, depths, heads;
};
const VariantRow kVariants[6] = {
    {"M0", {64, 128, 192}, {1, 2, 3}, {4, 4, 4}},
    {"M1", {128, 144, 192}, {1, 2, 3}, {2, 3, 3}},
    {"M2", {128, 192, 224}, {1, 2, 3}, {4, 3, 2}},
    {"M3", {128, 240, 320}, {1, 2, 3}, {4, 3, 4}},
    {"M4", {128, 256, 384}, {1, 2, 3}, {4, 4, 4}},
    {"M5", {192, 288, 384}, {1, 3, 4}, {3, 3, 4}},
};
constexpr double kParamTargets[6] = {2.3e6, 3.0e6, 4.2e6, 6.9e6, 8.8e6, 12.4e6};
constexpr double kFlopTargets[6] = {79e6, 167e6, 201e6, 263e6, 299e6, 522e6};

// ---- 01: the six presets build exactly the advertised stage structure ---------

bool check_variant_presets() {
  Timer t;
  bool ok = true;
  for (const VariantRow& row : kVariants) {
    Model m = build_variant(row.name, kSeed);
    ok &= m.spec.widths == row.widths && m.spec.depths == row.depths &&
          m.spec.heads == row.heads;
    ok &= m.spec.qk_dim == 16 && m.spec.ffn_ratio == 2 && m.spec.input_resolution == 224;
    for (size_t s = 0; s < 3; ++s) {
      ok &= m.stages[s].size() == row.depths[s];
      for (const SandwichBlock& blk : m.stages[s]) {
        ok &= blk.attn.heads == row.heads[s];
        ok &= blk.attn.proj.w.dim(0) == row.widths[s];
        ok &= blk.attn.head.at(0).q.w.dim(0) == 16;
      }
    }
  }
  const double dt = t.seconds();
  ok &= dt < 1.0;
  return report(ok, "01 six presets build the advertised widths/depths/heads exactly (" +
                        num(dt) + " s, budget 1 s)");
}

// ---- 02/03: parameter and mac budgets ------------------------------------------

bool check_param_budgets() {
  Timer t;
  constexpr double tol = 0.10;
  bool ok = true;
  double worst = 0.0;
  for (size_t i = 0; i < 6; ++i) {
    Model m = build_variant(kVariants[i].name, kSeed);
    const double got = static_cast<double>(count_params(m));
    const double rel = std::fabs(got - kParamTargets[i]) / kParamTargets[i];
    worst = std::max(worst, rel);
    ok &= rel <= tol;
  }
  const double dt = t.seconds();
  ok &= dt < 5.0;
  return report(ok, "02 parameter counts inside +-10% of the size targets (worst " +
                        num(worst * 100) + "%, " + num(dt) + " s, budget 5 s)");
}

bool check_flop_budgets() {
  Timer t;
  constexpr double tol = 0.15;
  bool ok = true;
  double worst = 0.0;
  for (size_t i = 0; i < 6; ++i) {
    Model m = build_variant(kVariants[i].name, kSeed);
    const double got = static_cast<double>(count_flops(m));  // at the native 224
    const double rel = std::fabs(got - kFlopTargets[i]) / kFlopTargets[i];
    worst = std::max(worst, rel);
    ok &= rel <= tol;
  }
  const double dt = t.seconds();
  ok &= dt < 5.0;
  return report(ok, "03 mac counts at 224 inside +-15% of the size targets (worst " +
                        num(worst * 100) + "%, " + num(dt) + " s, budget 5 s)");
}

// ---- 04: split heads cost exactly 1/h of full-feature qkv weights ---------------

bool check_headwise_split_savings() {
  Timer t;
  bool ok = true;
  for (const VariantRow& row : kVariants) {
    ModelSpec s = spec_for_variant(row.name);
    Model split = build_model(s, kSeed, AttnKind::cga);
    Model full = build_model(s, kSeed, AttnKind::mhsa);
    for (size_t st = 0; st < 3; ++st) {
      const size_t a = attention_qkv_params(split.stages[st][0].attn);
      const size_t b = attention_qkv_params(full.stages[st][0].attn);
      ok &= (b == a * s.heads[st]);  // exact, no tolerance
    }
  }
  return report(ok, "04 split-head qkv weights are exactly 1/h of the full-feature count (" +
                        num(t.seconds()) + " s)");
}

// ---- 05: backward pass against central finite differences ----------------------

bool check_gradients() {
  Timer t;
  const auto reports = gradcheck_modules("all", kSeed, 1e-4);
  bool ok = reports.size() == 8;
  double worst = 0.0;
  for (const GradCheckReport& r : reports) {
    ok &= r.pass;
    worst = std::max(worst, r.worst);
  }
  const double dt = t.seconds();
  ok &= dt < 120.0;
  return report(ok, "05 analytic gradients match finite differences on all 8 modules (worst " +
                        num(worst) + ", tol 1e-4, " + num(dt) + " s, budget 120 s)");
}

// ---- 06: vectorized attention vs the per-token oracle ---------------------------

bool check_attention_oracle() {
  Timer t;
  struct Cfg {
    std::array<size_t, 3> widths, heads;
    size_t qk, stage, h, w, batch;
  };
  const Cfg cfgs[5] = {
      {{8, 8, 8}, {2, 2, 2}, 8, 0, 4, 4, 1},
      {{8, 12, 16}, {2, 3, 4}, 4, 1, 3, 5, 2},
      {{8, 12, 16}, {2, 3, 4}, 4, 2, 5, 3, 1},
      {{16, 16, 16}, {1, 2, 4}, 8, 0, 4, 4, 2},  // single-head edge case
      {{8, 8, 8}, {2, 2, 2}, 4, 2, 2, 6, 1},
  };
  constexpr double tol = 1e-5;
  double worst = 0.0;
  size_t cases = 0;
  for (AttnKind kind : {AttnKind::cga, AttnKind::mhsa}) {
    for (size_t i = 0; i < 10; ++i) {
      const Cfg& c = cfgs[i % 5];
      ModelSpec s;
      s.widths = c.widths;
      s.depths = {1, 1, 1};
      s.heads = c.heads;
      s.qk_dim = c.qk;
      s.input_resolution = 16;
      s.num_classes = 4;
      Model m = build_model(s, derive_seed(kSeed, 200 + i), kind);
      const Attention& attn = m.stages[c.stage][0].attn;
      redraw_attention(attn, derive_seed(kSeed, 300 + i));

      Rng rng(derive_seed(kSeed, 400 + i));
      const size_t C = c.widths[c.stage];
      Tensor x = Tensor::uniform({c.batch, C, c.h, c.w}, rng, -1.0, 1.0);
      Tensor got = attn.forward(x, {Mode::infer, nullptr});
      worst = std::max(worst, oracle::max_abs_diff(got, oracle::attention_ref(attn, x)));
      ++cases;
    }
  }
  const double dt = t.seconds();
  const bool ok = cases == 20 && worst < tol && dt < 30.0;
  return report(ok, "06 vectorized attention matches the per-token oracle on 20 cases (worst " +
                        num(worst) + ", tol 1e-5, " + num(dt) + " s, budget 30 s)");
}

// ---- 07: BN folding keeps logits and throughput ---------------------------------

bool check_bn_folding() {
  Timer t;
  Model m = build_variant("M0", kSeed);
  // move every normalization away from the identity so folding does real work
  Rng rng(derive_seed(kSeed, 7));
  for (const ParamEntry& e : named_params(m)) {
    if (e.name.ends_with(".gamma")) {
      for (size_t i = 0; i < e.tensor.numel(); ++i) e.tensor.set(i, rng.uniform(0.5, 1.5));
    } else if (e.name.ends_with(".beta")) {
      for (size_t i = 0; i < e.tensor.numel(); ++i) e.tensor.set(i, rng.uniform(-0.5, 0.5));
    }
  }
  for (int i = 0; i < 2; ++i) {
    Tensor xb = Tensor::uniform({2, 3, 224, 224}, rng, -1.0, 1.0);
    model_forward(m, xb, Mode::train);
  }
  Model folded = fold_bn(m);

  constexpr double tol = 1e-4;
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    Tensor x = Tensor::uniform({1, 3, 224, 224}, rng, -1.0, 1.0);
    worst = std::max(worst, max_abs_diff(model_forward(m, x), model_forward(folded, x)));
  }
  const bool logits_ok = worst < tol && worst > 0.0;

  // Folding removes only the per-element normalization pass, about 1% of a
  // forward on this conv-dominated engine, which is at the timing floor of a
  // shared box. Timing each model back to back in alternating order and
  // gating on the median paired difference cancels clock drift; the half
  // percent allowance covers timer noise while a real slowdown (folding
  // adding work) would land far outside it.
  auto timed = [](const Model& mm, const Tensor& xx) {
    const auto t0 = std::chrono::steady_clock::now();
    model_forward(mm, xx);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  Tensor probe = Tensor::uniform({1, 3, 224, 224}, rng, -1.0, 1.0);
  std::vector<double> tp, tf, diff;
  for (int i = 0; i < 41; ++i) {
    double a, b;
    if (i % 2 == 0) {
      a = timed(m, probe);
      b = timed(folded, probe);
    } else {
      b = timed(folded, probe);
      a = timed(m, probe);
    }
    tp.push_back(a);
    tf.push_back(b);
    diff.push_back(a - b);
  }
  std::sort(tp.begin(), tp.end());
  std::sort(tf.begin(), tf.end());
  std::sort(diff.begin(), diff.end());
  const double median_plain = tp[tp.size() / 2];
  const double median_folded = tf[tf.size() / 2];
  const double median_diff = diff[diff.size() / 2];
  const bool speed_ok = median_diff >= -0.005 * median_plain;

  return report(logits_ok && speed_ok,
                "07 folded logits within " + num(worst) + " of unfolded (tol 1e-4); " +
                    num(1.0 / median_folded) + " img/s folded vs " +
                    num(1.0 / median_plain) + " unfolded, median paired gain " +
                    num(median_diff * 1e3) + " ms (" + num(t.seconds()) + " s)");
}

// ---- 08: the cascade feeds head j-1's output into head j's split ----------------

bool check_cascade_semantics() {
  Timer t;
  ModelSpec s = small_spec();  // stage 1: C=8, h=2

  // zero the first head: its output becomes exactly zero, so the second
  // head must see its raw channel split unchanged, bit for bit
  Model m = build_model(s, kSeed, AttnKind::cga);
  const Attention& attn = m.stages[0][0].attn;
  redraw_attention(attn, derive_seed(kSeed, 8));
  attn.head[0].q.w.fill(0.0);
  attn.head[0].k.w.fill(0.0);
  attn.head[0].v.w.fill(0.0);
  attn.head[0].qdw.w.fill(0.0);

  Rng rng(derive_seed(kSeed, 80));
  Tensor x = Tensor::uniform({1, 8, 4, 4}, rng, -1.0, 1.0);
  BlockTrace bt;
  bt.capture_inputs = true;
  attn.forward(x, {Mode::infer, nullptr}, &bt);
  const std::vector<Tensor> split = split_channels(x, 2);
  const bool passthrough = max_abs_diff(bt.per_head.at(1).head_input, split[1]) == 0.0;

  // same weights, cascade off: the outputs must diverge on random draws
  Model with = build_model(s, derive_seed(kSeed, 81), AttnKind::cga);
  Model without = build_model(s, derive_seed(kSeed, 81), AttnKind::cga_no_cascade);
  redraw_attention(with.stages[0][0].attn, derive_seed(kSeed, 82));
  redraw_attention(without.stages[0][0].attn, derive_seed(kSeed, 82));
  Tensor ya = with.stages[0][0].attn.forward(x, {Mode::infer, nullptr});
  Tensor yb = without.stages[0][0].attn.forward(x, {Mode::infer, nullptr});
  const bool diverges = max_abs_diff(ya, yb) > 0.0;

  return report(passthrough && diverges,
                "08 zeroed first head leaves the next split untouched; disabling the "
                "cascade changes outputs (" + num(t.seconds()) + " s)");
}

// ---- 09: head similarity control and cosine oracle -------------------------------

double naive_map_cosine(const Tensor& a, const Tensor& b) {
  const size_t B = a.dim(0), plane = a.dim(1) * a.dim(2);
  std::vector<double> ma(plane, 0.0), mb(plane, 0.0);
  for (size_t bi = 0; bi < B; ++bi) {
    for (size_t i = 0; i < plane; ++i) {
      ma[i] += a.at(bi * plane + i) / static_cast<double>(B);
      mb[i] += b.at(bi * plane + i) / static_cast<double>(B);
    }
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < plane; ++i) {
    dot += ma[i] * mb[i];
    na += ma[i] * ma[i];
    nb += mb[i] * mb[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

bool check_head_similarity() {
  Timer t;
  ModelSpec s = small_spec();

  // control: identical weights in every full-feature head must score 1.0
  Model control = build_model(s, kSeed, AttnKind::mhsa);
  redraw_params(control, derive_seed(kSeed, 9));
  for (auto& stage : control.stages) {
    for (SandwichBlock& blk : stage) {
      for (size_t j = 1; j < blk.attn.head.size(); ++j) {
        blk.attn.head[j].q.w.copy_from(blk.attn.head[0].q.w);
        blk.attn.head[j].k.w.copy_from(blk.attn.head[0].k.w);
        blk.attn.head[j].v.w.copy_from(blk.attn.head[0].v.w);
        blk.attn.head[j].qdw.w.copy_from(blk.attn.head[0].qdw.w);
      }
    }
  }
  Rng rng(derive_seed(kSeed, 90));
  Tensor x = Tensor::uniform({2, 3, 32, 32}, rng, -1.0, 1.0);
  AttentionTrace trace;
  model_forward(control, x, Mode::infer, nullptr, &trace);
  SimilarityReport rep = head_similarity(trace);
  bool control_ok = rep.heads_measured > 0;
  double worst_dev = 0.0;
  for (const HeadSimilarityBlock& b : rep.blocks) {
    for (double v : b.max_cos) worst_dev = std::max(worst_dev, std::fabs(v - 1.0));
  }
  control_ok &= worst_dev <= 1e-6;

  // oracle: the library cosine must agree with an independent computation
  Model varied = build_model(s, kSeed, AttnKind::cga);
  redraw_params(varied, derive_seed(kSeed, 91));
  AttentionTrace vt;
  model_forward(varied, x, Mode::infer, nullptr, &vt);
  double worst_cos = 0.0;
  for (const BlockTrace& bt : vt.blocks) {
    for (size_t i = 0; i < bt.per_head.size(); ++i) {
      for (size_t j = i + 1; j < bt.per_head.size(); ++j) {
        const double lib = attention_map_cosine(bt.per_head[i].attn_map, bt.per_head[j].attn_map);
        const double ref = naive_map_cosine(bt.per_head[i].attn_map, bt.per_head[j].attn_map);
        worst_cos = std::max(worst_cos, std::fabs(lib - ref));
      }
    }
  }
  const bool oracle_ok = worst_cos <= 1e-6;

  const bool ok = report(control_ok && oracle_ok,
                         "09 shared-weight control scores max-cos 1.0 (dev " + num(worst_dev) +
                             "); cosine matches an independent oracle (dev " + num(worst_cos) +
                             ", " + num(t.seconds()) + " s)");
  // paired split-vs-full report, for eyeballs only; nothing below is scored
  AttentionComparison comp = compare_attention_variants(s, kSeed, 2);
  std::istringstream table(similarity_to_table(comp));
  for (std::string line; std::getline(table, line);) std::cout << "       " << line << "\n";
  return ok;
}

// ---- 10: channel importance against a closed-form regression -------------------

bool check_importance_oracle() {
  Timer t;
  // y = x w, squared-error loss against fixed targets; every gradient is
  // computable by hand. feature 2 of x is identically zero, so channel 2
  // of w (axis 0) must score exactly zero.
  const size_t B = 4, F = 4, K = 3;
  Rng rng(derive_seed(kSeed, 10));
  std::vector<double> xv(B * F);
  for (size_t b = 0; b < B; ++b) {
    for (size_t f = 0; f < F; ++f) xv[b * F + f] = (f == 2) ? 0.0 : rng.uniform(-1.0, 1.0);
  }
  Tensor x = Tensor::from({B, F}, xv, Dtype::f64);
  Tensor w = Tensor::uniform({F, K}, rng, -1.0, 1.0, Dtype::f64);
  w.set_requires_grad(true);
  Tensor targets = Tensor::uniform({B, K}, rng, -1.0, 1.0, Dtype::f64);
  Tensor neg_targets = targets.clone();
  for (size_t i = 0; i < neg_targets.numel(); ++i) neg_targets.set(i, -targets.at(i));

  auto run_backward = [&](double loss_scale) {
    w.clear_grad();
    Graph g;
    Tensor d = add(matmul(x, w, &g), neg_targets, &g);
    Tensor loss = sum_all(mul(d, d, &g), &g);
    if (loss_scale != 1.0) loss = mul_scalar(loss, loss_scale, &g);
    g.backward(loss);
  };

  run_backward(1.0);
  std::vector<ParamEntry> entries{{"w", w, false, 0}};
  ImportanceReport rep = importance_from_grads(entries);

  // closed form: dL/dw[i,o] = sum_b x[b,i] * 2 * (x w - t)[b,o]
  std::vector<double> want(F, 0.0);
  for (size_t i = 0; i < F; ++i) {
    double acc = 0.0;
    for (size_t o = 0; o < K; ++o) {
      double gio = 0.0;
      for (size_t b = 0; b < B; ++b) {
        double pred = 0.0;
        for (size_t f = 0; f < F; ++f) pred += xv[b * F + f] * w.at(f * K + o);
        gio += xv[b * F + i] * 2.0 * (pred - targets.at(b * K + o));
      }
      acc += w.at(i * K + o) * gio;
    }
    want[i] = std::fabs(acc);
  }
  double worst = 0.0;
  for (size_t i = 0; i < F; ++i) {
    worst = std::max(worst, std::fabs(rep.params[0].scores[i] - want[i]));
  }
  const bool oracle_ok = worst <= 1e-6;
  const bool zero_ok = rep.params[0].scores[2] == 0.0;  // dead input, exactly zero

  run_backward(7.25);  // scale the loss; the ordering must not move
  ImportanceReport scaled = importance_from_grads(entries);
  const bool rank_ok = scaled.params[0].ranking == rep.params[0].ranking;

  return report(oracle_ok && zero_ok && rank_ok,
                "10 importance matches the closed-form regression (dev " + num(worst) +
                    "), dead channels score 0, ranking survives loss scaling (" +
                    num(t.seconds()) + " s)");
}

// ---- 11: profiler bookkeeping ----------------------------------------------------

double fraction_of(const BenchReport& r, const std::string& name) {
  for (const BenchCategory& c : r.categories) {
    if (c.name == name) return c.fraction;
  }
  return -1.0;
}

bool check_bench_harness() {
  Timer t;
  Rng rng(derive_seed(kSeed, 11));
  Tensor a = Tensor::uniform({64, 64}, rng, -1.0, 1.0);
  BenchReport mm = profile_callable([&] { matmul(a, a); }, 1, 3);
  const bool mm_ok = fraction_of(mm, "matmul_conv") == 1.0 && mm.memory_bound_fraction == 0.0;

  Tensor v = Tensor::uniform({8, 4096}, rng, -1.0, 1.0);
  BenchReport ew = profile_callable([&] { add(relu(v), v); }, 1, 3);
  const bool ew_ok = fraction_of(ew, "elementwise") == 1.0 && ew.memory_bound_fraction == 1.0;

  Model m = build_variant("M0", kSeed);
  Tensor x = Tensor::uniform({1, 3, 224, 224}, rng, -1.0, 1.0);
  BenchReport prof = profile_model(m, x, 2, 5);
  double sum = 0.0;
  for (const BenchCategory& c : prof.categories) sum += c.fraction;
  const bool sum_ok = std::fabs(sum - 1.0) <= 0.01;
  const bool overhead_ok = prof.overhead_fraction < 0.20;

  return report(mm_ok && ew_ok && sum_ok && overhead_ok,
                "11 degenerate loads profile at fraction 1.0; full-model fractions sum to " +
                    num(sum) + "; instrumentation overhead " +
                    num(prof.overhead_fraction * 100) + "% (<20%) (" + num(t.seconds()) + " s)");
}

// ---- 12: CLI reruns are byte-identical --------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool check_cli_determinism() {
  Timer t;
  fs::path dir = fs::temp_directory_path() / "evit_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path spec_path = dir / "small.json";
  {
    std::ofstream out(spec_path);
    out << spec_to_json(small_spec());
  }

  auto run_once = [&](const CliConfig& cfg, std::string& out_text, std::string& file_bytes) {
    std::ostringstream out, err;
    const int status = run_cli(cfg, out, err);
    out_text = out.str();
    file_bytes = cfg.output_path.empty() ? std::string() : slurp(cfg.output_path);
    return status;
  };
  auto identical_twice = [&](CliConfig cfg) {
    std::string out1, file1, out2, file2;
    if (run_once(cfg, out1, file1) != 0) return false;
    if (run_once(cfg, out2, file2) != 0) return false;
    return out1 == out2 && file1 == file2;
  };

  CliConfig base;
  base.config_path = spec_path.string();

  bool ok = true;
  CliConfig info = base;
  info.command = "info";
  ok &= identical_twice(info);

  CliConfig count = base;
  count.command = "count";
  count.format = "csv";
  ok &= identical_twice(count);

  CliConfig fwd = base;
  fwd.command = "forward";
  fwd.batch = 2;
  fwd.output_path = (dir / "logits.evt1").string();
  ok &= identical_twice(fwd);

  CliConfig grad;
  grad.command = "gradcheck";
  grad.module = "linear";
  ok &= identical_twice(grad);

  CliConfig sim = base;
  sim.command = "similarity";
  ok &= identical_twice(sim);

  CliConfig imp = base;
  imp.command = "importance";
  imp.batch = 2;  // train-mode head BN normalizes over the batch axis alone
  imp.format = "csv";
  ok &= identical_twice(imp);

  CliConfig fold = base;
  fold.command = "fold";
  fold.output_path = (dir / "folded.evtw").string();
  ok &= identical_twice(fold);

  return report(ok, "12 cli reruns with one seed emit byte-identical reports and tensors (" +
                        num(t.seconds()) + " s)");
}

}  // namespace

int main() {
  int failures = 0;
  failures += !check_variant_presets();
  failures += !check_param_budgets();
  failures += !check_flop_budgets();
  failures += !check_headwise_split_savings();
  failures += !check_gradients();
  failures += !check_attention_oracle();
  failures += !check_bn_folding();
  failures += !check_cascade_semantics();
  failures += !check_head_similarity();
  failures += !check_importance_oracle();
  failures += !check_bench_harness();
  failures += !check_cli_determinism();

  std::cout << (12 - failures) << " of 12 checks passed" << std::endl;
  return failures;
}
