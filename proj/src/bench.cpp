#include "evit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "evit/profile.hpp"

namespace evit {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double timed(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

}  // namespace

BenchReport profile_callable(const std::function<void()>& fn, size_t warmup, size_t repeats) {
  if (warmup < 1) throw ValueError("bench warmup must be >= 1");
  if (repeats < 3) throw ValueError("bench repeats must be >= 3");

  // Finite checks are debugging scaffolding; keep them out of the timings.
  FiniteCheckGuard no_checks(false);

  for (size_t i = 0; i < warmup; ++i) fn();

  std::vector<OpProfile> profiles(repeats);
  std::vector<double> instrumented(repeats);
  for (size_t i = 0; i < repeats; ++i) {
    ProfileScope scope(&profiles[i]);
    instrumented[i] = timed(fn);
  }
  std::vector<double> plain(repeats);
  for (size_t i = 0; i < repeats; ++i) plain[i] = timed(fn);

  BenchReport rep;
  rep.warmup = warmup;
  rep.repeats = repeats;
  rep.median_seconds = median(instrumented);
  rep.uninstrumented_median_seconds = median(plain);
  if (rep.uninstrumented_median_seconds > 0.0) {
    rep.overhead_fraction = (rep.median_seconds - rep.uninstrumented_median_seconds) /
                            rep.uninstrumented_median_seconds;
  }

  double total = 0.0;
  for (size_t c = 0; c < kOpCategoryCount; ++c) {
    std::vector<double> per_run(repeats);
    for (size_t i = 0; i < repeats; ++i) per_run[i] = profiles[i].seconds[c];
    BenchCategory cat;
    cat.name = op_category_name(static_cast<OpCategory>(c));
    cat.seconds = median(per_run);
    cat.calls = profiles[0].calls[c];
    total += cat.seconds;
    rep.categories.push_back(std::move(cat));
  }
  if (total > 0.0) {
    for (size_t c = 0; c < kOpCategoryCount; ++c) {
      rep.categories[c].fraction = rep.categories[c].seconds / total;
      if (op_category_memory_bound(static_cast<OpCategory>(c))) {
        rep.memory_bound_fraction += rep.categories[c].fraction;
      }
    }
  }
  return rep;
}

BenchReport profile_model(const Model& m, const Tensor& input, size_t warmup, size_t repeats,
                          Mode mode) {
  if (mode == Mode::train) {
    throw ContractError(
        "profiling covers inference only; training cost lives in the backward tape, "
        "which per-op timers cannot attribute");
  }
  BenchReport rep =
      profile_callable([&] { model_forward(m, input, mode); }, warmup, repeats);
  rep.batch = input.dim(0);
  rep.folded = m.folded;
  if (rep.uninstrumented_median_seconds > 0.0) {
    rep.images_per_second =
        static_cast<double>(rep.batch) / rep.uninstrumented_median_seconds;
  }
  return rep;
}

BenchReport throughput(const Model& m, size_t batch, size_t warmup, size_t repeats,
                       size_t threads, uint64_t seed) {
  if (batch == 0) throw ValueError("batch must be >= 1");
  if (threads == 0) throw ValueError("threads must be >= 1");
  if (warmup < 1) throw ValueError("bench warmup must be >= 1");
  if (repeats < 3) throw ValueError("bench repeats must be >= 3");
  threads = std::min(threads, batch);

  const size_t r = m.spec.input_resolution;
  Rng rng(derive_seed(seed, 1));
  Tensor x = Tensor::uniform({batch, 3, r, r}, rng, -1.0, 1.0, m.dtype);

  // Slice the batch once up front; each worker owns one contiguous chunk.
  std::vector<Tensor> chunks;
  if (threads == 1) {
    chunks.push_back(x);
  } else {
    const size_t rowlen = 3 * r * r;
    const size_t base = batch / threads, extra = batch % threads;
    size_t row = 0;
    for (size_t t = 0; t < threads; ++t) {
      const size_t rows = base + (t < extra ? 1 : 0);
      Tensor chunk = tensor_new({rows, 3, r, r}, m.dtype);
      for (size_t i = 0; i < rows * rowlen; ++i) chunk.set(i, x.at(row * rowlen + i));
      row += rows;
      chunks.push_back(std::move(chunk));
    }
  }

  FiniteCheckGuard no_checks(false);
  auto run = [&] {
    if (chunks.size() == 1) {
      model_forward(m, chunks[0]);
      return;
    }
    std::vector<std::thread> workers;
    workers.reserve(chunks.size());
    for (const Tensor& chunk : chunks) {
      workers.emplace_back([&m, chunk] {
        FiniteCheckGuard off(false);  // the flag is thread-local
        model_forward(m, chunk);
      });
    }
    for (std::thread& w : workers) w.join();
  };

  for (size_t i = 0; i < warmup; ++i) run();
  std::vector<double> times(repeats);
  for (size_t i = 0; i < repeats; ++i) times[i] = timed(run);

  BenchReport rep;
  rep.batch = batch;
  rep.warmup = warmup;
  rep.repeats = repeats;
  rep.threads = threads;
  rep.folded = m.folded;
  rep.median_seconds = rep.uninstrumented_median_seconds = median(times);
  if (rep.median_seconds > 0.0) {
    rep.images_per_second = static_cast<double>(batch) / rep.median_seconds;
  }
  return rep;
}

std::string bench_to_json(const BenchReport& r) {
  nlohmann::ordered_json j;
  j["batch"] = r.batch;
  j["warmup"] = r.warmup;
  j["repeats"] = r.repeats;
  j["threads"] = r.threads;
  j["folded"] = r.folded;
  j["median_seconds"] = r.median_seconds;
  j["uninstrumented_median_seconds"] = r.uninstrumented_median_seconds;
  j["overhead_fraction"] = r.overhead_fraction;
  j["memory_bound_fraction"] = r.memory_bound_fraction;
  j["images_per_second"] = r.images_per_second;
  j["categories"] = nlohmann::ordered_json::array();
  for (const BenchCategory& c : r.categories) {
    j["categories"].push_back({{"name", c.name},
                               {"seconds", c.seconds},
                               {"calls", c.calls},
                               {"fraction", c.fraction}});
  }
  return j.dump(2) + "\n";
}

std::string bench_to_table(const BenchReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6);
  out << "batch " << r.batch << "  threads " << r.threads << "  warmup " << r.warmup
      << "  repeats " << r.repeats << (r.folded ? "  (folded)" : "") << "\n";
  out << "median wall " << r.median_seconds << " s";
  if (r.images_per_second > 0.0) {
    out << "  " << std::setprecision(2) << r.images_per_second << " images/s"
        << std::setprecision(6);
  }
  out << "\n";
  if (!r.categories.empty()) {
    out << "profiling overhead " << std::setprecision(1) << r.overhead_fraction * 100.0
        << "%  memory-bound share " << r.memory_bound_fraction * 100.0 << "%\n"
        << std::setprecision(6);
    for (const BenchCategory& c : r.categories) {
      out << "  " << std::left << std::setw(14) << c.name << std::right << std::setw(10)
          << c.seconds << " s" << std::setw(8) << c.calls << " calls  " << std::setw(5)
          << std::setprecision(1) << c.fraction * 100.0 << "%\n"
          << std::setprecision(6);
    }
  }
  return out.str();
}

}  // namespace evit
