#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

namespace evit {

// Parsed command line. The binary maps flags onto this 1:1; keeping it a
// plain struct lets tests drive every command without spawning a process.
struct CliConfig {
  std::string command;          // info | forward | gradcheck | similarity |
                                // importance | bench | fold | count
  std::string variant = "M0";
  std::string config_path;      // JSON ModelSpec file; overrides --variant
  std::string attn = "cga";     // cga | cga_no_cascade | mhsa
  std::string dtype = "f32";    // f32 | f64
  std::string format = "json";  // json | table | csv
  std::string output_path;      // report/tensor destination; empty = stdout
  std::string input_path;       // forward: EVT1 input tensor
  std::string weights_path;     // load these weights after building
  std::string module = "all";   // gradcheck selector
  uint64_t seed = 42;
  size_t batch = 1;
  size_t warmup = 2;
  size_t repeats = 5;
  size_t threads = 1;
  size_t resolution = 0;  // info/count flop resolution; 0 = the model's own
  double tolerance = 1e-4;
  bool fold = false;  // run the BN-folded architecture (weights files must match it)
};

// Returns the process exit status: 0 on success, 1 when a check ran but
// failed validation (gradcheck above tolerance), 2 on bad input or usage.
// All diagnostics go to `err`; reports go to `out` or --output.
int run_cli(const CliConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace evit
