#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "evit/model.hpp"

namespace evit {

double rel_err(double a, double b);  // |a-b| / max(1, |a|, |b|)

// ---- attention head similarity ---------------------------------------------

struct HeadSimilarityBlock {
  std::string block;
  size_t heads = 0;
  std::vector<double> max_cos;  // per head: max cosine against any other
                                // head of the block; empty when heads < 2
  double mean_max_cos = 0.0;
};
struct SimilarityReport {
  std::vector<HeadSimilarityBlock> blocks;
  double mean_max_cos = 0.0;  // across every measured head
  size_t heads_measured = 0;
  size_t blocks_skipped = 0;  // single-head blocks carry no similarity
};

// Cosine over flattened batch-averaged maps [B, N, N].
double attention_map_cosine(const Tensor& a, const Tensor& b);

// Needs at least one block with two or more heads.
SimilarityReport head_similarity(const AttentionTrace& trace);

// Builds a cascaded-split model and a full-feature baseline from the same
// spec and seed, feeds both the same batch and reports head similarity
// side by side. Single-head blocks make the comparison partial, not an
// error.
struct AttentionComparison {
  SimilarityReport cga;
  SimilarityReport mhsa;
  bool partial = false;
  uint64_t seed = 0;
  size_t batch = 0;
};
AttentionComparison compare_attention_variants(const ModelSpec& spec, uint64_t seed,
                                               size_t batch);

// ---- first-order channel importance ------------------------------------------

struct ImportanceParam {
  std::string name;
  std::string group;             // qk | v | ffn | other
  std::vector<double> scores;    // per output channel
  std::vector<size_t> ranking;   // channel indices, highest score first
};
struct ImportanceGroup {
  double total = 0.0;
  size_t channels = 0;
  double mean = 0.0;
};
struct ImportanceReport {
  std::vector<ImportanceParam> params;
  std::map<std::string, ImportanceGroup> groups;
};

// Train-mode forward, cross-entropy against the labels, backward, then
// scores every output channel by |sum(weight * grad)| over that channel's
// weights.
ImportanceReport taylor_importance(const Model& m, const Tensor& input,
                                   const std::vector<size_t>& labels);
// Scoring core, separated so tests can drive it with hand-computed
// gradients. Every entry must already hold a gradient.
ImportanceReport importance_from_grads(const std::vector<ParamEntry>& params);

// ---- gradient checking ----------------------------------------------------------

struct GradCheckEntry {
  std::string name;  // "input" or a parameter name
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
};
struct GradCheckReport {
  std::string module;
  double tolerance = 1e-4;
  double worst = 0.0;
  bool pass = false;
  std::vector<GradCheckEntry> entries;
};

// Compares backward-pass gradients of sum(fwd(input)) against central
// finite differences, for the input and every entry in `params`. fwd must
// be a deterministic function of the input and the parameter contents.
GradCheckReport gradcheck(const std::string& label,
                          const std::function<Tensor(const Tensor&, Graph*)>& fwd,
                          const Tensor& input, const std::vector<ParamEntry>& params,
                          double tolerance = 1e-4, double eps = 1e-5);

// Prebuilt f64 toy modules: linear, conv, dwconv, bn, softmax, cga,
// sandwich, subsample. "all" runs every one of them.
const std::vector<std::string>& gradcheck_module_names();
std::vector<GradCheckReport> gradcheck_modules(const std::string& which, uint64_t seed,
                                               double tolerance = 1e-4);

// ---- serialization -------------------------------------------------------------

std::string similarity_to_json(const AttentionComparison& c);
std::string similarity_to_table(const AttentionComparison& c);
std::string similarity_to_csv(const AttentionComparison& c);
std::string similarity_report_csv(const SimilarityReport& r);
std::string importance_to_json(const ImportanceReport& r);
std::string importance_to_table(const ImportanceReport& r);
std::string gradcheck_to_json(const std::vector<GradCheckReport>& reports);
std::string gradcheck_to_table(const std::vector<GradCheckReport>& reports);

}  // namespace evit
