#include "evit/cli.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "evit/analysis.hpp"
#include "evit/bench.hpp"
#include "evit/count.hpp"
#include "evit/io.hpp"
#include "evit/model.hpp"

namespace evit {

namespace {

using ordered_json = nlohmann::ordered_json;

Dtype dtype_from_flag(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw ValueError("unknown dtype '" + s + "' (use f32 or f64)");
}

void check_format(const std::string& fmt) {
  if (fmt != "json" && fmt != "table" && fmt != "csv") {
    throw ValueError("unknown format '" + fmt + "' (use json, table or csv)");
  }
}

ModelSpec spec_of(const CliConfig& cfg) {
  if (!cfg.config_path.empty()) {
    return spec_from_json(read_binary_file(cfg.config_path));
  }
  return spec_for_variant(cfg.variant);
}

// --fold selects the BN-folded architecture, so folding happens before any
// weights load: files written by the fold command reload under --fold, and a
// full checkpoint converts via the fold command first.
Model make_model(const CliConfig& cfg) {
  Model m = build_model(spec_of(cfg), cfg.seed, attn_kind_from_string(cfg.attn),
                        dtype_from_flag(cfg.dtype));
  if (cfg.fold) m = fold_bn(m);
  if (!cfg.weights_path.empty()) load_weights(m, cfg.weights_path);
  return m;
}

Tensor seeded_input(const CliConfig& cfg, const Model& m) {
  Rng rng(derive_seed(cfg.seed, 1));
  const size_t r = m.spec.input_resolution;
  return Tensor::uniform({cfg.batch, 3, r, r}, rng, -1.0, 1.0, m.dtype);
}

void emit(const CliConfig& cfg, std::ostream& out, const std::string& text) {
  if (cfg.output_path.empty()) {
    out << text;
  } else {
    write_text_file(cfg.output_path, text);
  }
}

// ---- info / count ---------------------------------------------------------------

std::string count_csv(const CountReport& rep) {
  std::ostringstream out;
  out << "module,params,flops\n";
  for (const CountRow& row : rep.rows) {
    out << row.module << "," << row.params << "," << row.flops << "\n";
  }
  out << "total," << rep.params << "," << rep.flops << "\n";
  return out.str();
}

std::string count_table(const CountReport& rep) {
  std::ostringstream out;
  out << "resolution " << rep.resolution << "\n";
  for (const CountRow& row : rep.rows) {
    out << "  " << std::left << std::setw(12) << row.module << std::right << std::setw(10)
        << row.params << " params" << std::setw(14) << row.flops << " flops\n";
  }
  out << "  " << std::left << std::setw(12) << "total" << std::right << std::setw(10)
      << rep.params << " params" << std::setw(14) << rep.flops << " flops\n";
  return out.str();
}

ordered_json count_json(const CountReport& rep) {
  ordered_json j;
  j["resolution"] = rep.resolution;
  j["params"] = rep.params;
  j["flops"] = rep.flops;
  j["modules"] = ordered_json::array();
  for (const CountRow& row : rep.rows) {
    j["modules"].push_back(
        {{"module", row.module}, {"params", row.params}, {"flops", row.flops}});
  }
  return j;
}

int cmd_info(const CliConfig& cfg, std::ostream& out) {
  Model m = make_model(cfg);
  CountReport rep = count_report(m, cfg.resolution);
  if (cfg.format == "json") {
    ordered_json j;
    j["variant"] = cfg.config_path.empty() ? cfg.variant : "custom";
    j["attention"] = attn_kind_name(m.attn_kind);
    j["dtype"] = dtype_name(m.dtype);
    j["spec"] = ordered_json::parse(spec_to_json(m.spec));
    j["params"] = rep.params;
    j["flops"] = rep.flops;
    j["resolution"] = rep.resolution;
    emit(cfg, out, j.dump(2) + "\n");
  } else if (cfg.format == "table") {
    std::ostringstream text;
    const ModelSpec& s = m.spec;
    text << (cfg.config_path.empty() ? cfg.variant : "custom") << "  widths {" << s.widths[0]
         << "," << s.widths[1] << "," << s.widths[2] << "}  depths {" << s.depths[0] << ","
         << s.depths[1] << "," << s.depths[2] << "}  heads {" << s.heads[0] << ","
         << s.heads[1] << "," << s.heads[2] << "}\n";
    text << "qk_dim " << s.qk_dim << "  ffn_ratio " << s.ffn_ratio << "  n_ffn " << s.n_ffn
         << "  resolution " << s.input_resolution << "  classes " << s.num_classes << "\n";
    text << "params " << rep.params << "  flops " << rep.flops << " (at " << rep.resolution
         << ")\n";
    emit(cfg, out, text.str());
  } else {
    emit(cfg, out, count_csv(rep));
  }
  return 0;
}

int cmd_count(const CliConfig& cfg, std::ostream& out) {
  Model m = make_model(cfg);
  CountReport rep = count_report(m, cfg.resolution);
  if (cfg.format == "json") {
    emit(cfg, out, count_json(rep).dump(2) + "\n");
  } else if (cfg.format == "table") {
    emit(cfg, out, count_table(rep));
  } else {
    emit(cfg, out, count_csv(rep));
  }
  return 0;
}

// ---- forward -----------------------------------------------------------------

int cmd_forward(const CliConfig& cfg, std::ostream& out) {
  Model m = make_model(cfg);
  Tensor x = cfg.input_path.empty() ? seeded_input(cfg, m) : read_evt1_file(cfg.input_path);
  Tensor logits = model_forward(m, x);
  if (!cfg.output_path.empty() && cfg.output_path.ends_with(".evt1")) {
    write_evt1_file(cfg.output_path, logits);
    return 0;
  }
  ordered_json j;
  j["shape"] = logits.shape();
  ordered_json data = ordered_json::array();
  for (size_t i = 0; i < logits.numel(); ++i) data.push_back(logits.at(i));
  j["logits"] = std::move(data);
  emit(cfg, out, j.dump(2) + "\n");
  return 0;
}

// ---- analysis commands ------------------------------------------------------------

int cmd_gradcheck(const CliConfig& cfg, std::ostream& out) {
  std::vector<GradCheckReport> reports =
      gradcheck_modules(cfg.module, cfg.seed, cfg.tolerance);
  if (cfg.format == "json") {
    emit(cfg, out, gradcheck_to_json(reports));
  } else if (cfg.format == "table") {
    emit(cfg, out, gradcheck_to_table(reports));
  } else {
    std::ostringstream csv;
    csv << "module,entry,max_rel_err,mean_rel_err\n";
    csv << std::setprecision(17);
    for (const GradCheckReport& r : reports) {
      for (const GradCheckEntry& e : r.entries) {
        csv << r.module << "," << e.name << "," << e.max_rel_err << "," << e.mean_rel_err
            << "\n";
      }
    }
    emit(cfg, out, csv.str());
  }
  const bool ok = std::all_of(reports.begin(), reports.end(),
                              [](const GradCheckReport& r) { return r.pass; });
  return ok ? 0 : 1;
}

int cmd_similarity(const CliConfig& cfg, std::ostream& out) {
  AttentionComparison comp = compare_attention_variants(spec_of(cfg), cfg.seed, cfg.batch);
  if (cfg.format == "json") {
    emit(cfg, out, similarity_to_json(comp));
  } else if (cfg.format == "table") {
    emit(cfg, out, similarity_to_table(comp));
  } else {
    emit(cfg, out, similarity_to_csv(comp));
  }
  return 0;
}

int cmd_importance(const CliConfig& cfg, std::ostream& out) {
  Model m = make_model(cfg);
  Tensor x = seeded_input(cfg, m);
  Rng label_rng(derive_seed(cfg.seed, 2));
  std::vector<size_t> labels(cfg.batch);
  for (size_t& l : labels) l = label_rng.next_below(m.spec.num_classes);
  ImportanceReport rep = taylor_importance(m, x, labels);
  if (cfg.format == "json") {
    emit(cfg, out, importance_to_json(rep));
  } else if (cfg.format == "table") {
    emit(cfg, out, importance_to_table(rep));
  } else {
    std::ostringstream csv;
    csv << "param,group,channel,score\n";
    csv << std::setprecision(17);
    for (const ImportanceParam& p : rep.params) {
      for (size_t c = 0; c < p.scores.size(); ++c) {
        csv << p.name << "," << p.group << "," << c << "," << p.scores[c] << "\n";
      }
    }
    emit(cfg, out, csv.str());
  }
  return 0;
}

// ---- bench --------------------------------------------------------------------

int cmd_bench(const CliConfig& cfg, std::ostream& out) {
  Model m = make_model(cfg);
  Tensor x = seeded_input(cfg, m);
  BenchReport prof = profile_model(m, x, cfg.warmup, cfg.repeats);
  BenchReport thr = throughput(m, cfg.batch, cfg.warmup, cfg.repeats, cfg.threads, cfg.seed);
  if (cfg.format == "json") {
    ordered_json j;
    j["profile"] = ordered_json::parse(bench_to_json(prof));
    j["throughput"] = ordered_json::parse(bench_to_json(thr));
    emit(cfg, out, j.dump(2) + "\n");
  } else if (cfg.format == "table") {
    emit(cfg, out,
         "profile\n" + bench_to_table(prof) + "throughput\n" + bench_to_table(thr));
  } else {
    std::ostringstream csv;
    csv << "category,seconds,calls,fraction\n";
    csv << std::setprecision(17);
    for (const BenchCategory& c : prof.categories) {
      csv << c.name << "," << c.seconds << "," << c.calls << "," << c.fraction << "\n";
    }
    emit(cfg, out, csv.str());
  }
  return 0;
}

// ---- fold ----------------------------------------------------------------------

int cmd_fold(const CliConfig& cfg, std::ostream& out) {
  if (cfg.output_path.empty()) {
    throw ValueError("fold needs --output for the folded weights file");
  }
  Model m = make_model(cfg);
  Model folded = fold_bn(m);

  // Sanity probe: the folded net must agree with the original.
  Rng rng(derive_seed(cfg.seed, 1));
  const size_t r = m.spec.input_resolution;
  Tensor x = Tensor::uniform({cfg.batch, 3, r, r}, rng, -1.0, 1.0, m.dtype);
  Tensor ya = model_forward(m, x);
  Tensor yb = model_forward(folded, x);
  double max_diff = 0.0;
  for (size_t i = 0; i < ya.numel(); ++i) {
    max_diff = std::max(max_diff, std::fabs(ya.at(i) - yb.at(i)));
  }

  save_weights(folded, cfg.output_path);

  if (cfg.format == "table") {
    std::ostringstream text;
    text << "folded weights written to " << cfg.output_path << "\n";
    text << std::scientific << std::setprecision(3) << "max abs logit diff " << max_diff
         << "\n";
    text << "params " << count_params(m) << " -> " << count_params(folded) << "\n";
    out << text.str();
  } else if (cfg.format == "json") {
    ordered_json j;
    j["weights"] = cfg.output_path;
    j["max_abs_logit_diff"] = max_diff;
    j["params_before"] = count_params(m);
    j["params_after"] = count_params(folded);
    out << j.dump(2) << "\n";
  } else {
    throw ValueError("fold reports as json or table, not csv");
  }
  return 0;
}

}  // namespace

int run_cli(const CliConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    check_format(cfg.format);
    if (cfg.command == "info") return cmd_info(cfg, out);
    if (cfg.command == "count") return cmd_count(cfg, out);
    if (cfg.command == "forward") return cmd_forward(cfg, out);
    if (cfg.command == "gradcheck") return cmd_gradcheck(cfg, out);
    if (cfg.command == "similarity") return cmd_similarity(cfg, out);
    if (cfg.command == "importance") return cmd_importance(cfg, out);
    if (cfg.command == "bench") return cmd_bench(cfg, out);
    if (cfg.command == "fold") return cmd_fold(cfg, out);
    throw ValueError("unknown command '" + cfg.command + "'");
  } catch (const EvitError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace evit
