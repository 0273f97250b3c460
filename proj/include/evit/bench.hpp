#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evit/model.hpp"

namespace evit {

struct BenchCategory {
  std::string name;
  double seconds = 0.0;
  uint64_t calls = 0;
  double fraction = 0.0;  // share of summed category time
};

struct BenchReport {
  std::vector<BenchCategory> categories;  // fixed category order; empty for pure throughput
  double median_seconds = 0.0;            // wall time per instrumented run
  double uninstrumented_median_seconds = 0.0;
  double overhead_fraction = 0.0;  // (instrumented - plain) / plain
  double memory_bound_fraction = 0.0;
  double images_per_second = 0.0;
  size_t batch = 0;
  size_t warmup = 0;
  size_t repeats = 0;
  size_t threads = 1;
  bool folded = false;
};

// Runs fn `warmup` times untimed, then `repeats` instrumented runs and
// `repeats` plain runs. Per-category seconds are element-wise medians
// across the instrumented runs; call counts come from the first run.
// warmup must be >= 1 and repeats >= 3.
BenchReport profile_callable(const std::function<void()>& fn, size_t warmup, size_t repeats);

// Category breakdown of a forward pass. Training mode is rejected: its
// cost is dominated by the backward tape, which the per-op timers do not
// attribute, so the breakdown would be misleading.
BenchReport profile_model(const Model& m, const Tensor& input, size_t warmup, size_t repeats,
                          Mode mode = Mode::infer);

// End-to-end images/second on a deterministic random batch. threads > 1
// splits the batch across std::thread workers (per-op profiling stays off;
// the timers are thread-local and only the wall clock is meaningful here).
BenchReport throughput(const Model& m, size_t batch, size_t warmup, size_t repeats,
                       size_t threads, uint64_t seed);

std::string bench_to_json(const BenchReport& r);
std::string bench_to_table(const BenchReport& r);

}  // namespace evit
