#include <iostream>

#include "CLI11.hpp"

#include "evit/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"evit: cascaded group attention vision transformer toolkit"};
  app.require_subcommand(1);

  evit::CliConfig cfg;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--variant", cfg.variant, "model preset M0..M5")->capture_default_str();
    sub->add_option("--config", cfg.config_path, "model spec JSON file, overrides --variant");
    sub->add_option("--seed", cfg.seed, "seed for weights and generated data")
        ->capture_default_str();
    sub->add_option("--attn", cfg.attn, "cga, cga_no_cascade or mhsa")->capture_default_str();
    sub->add_option("--dtype", cfg.dtype, "f32 or f64")->capture_default_str();
    sub->add_option("--format", cfg.format, "json, table or csv")->capture_default_str();
    sub->add_option("--output,-o", cfg.output_path, "write here instead of stdout");
    sub->add_option("--weights", cfg.weights_path, "weights file to load into the model");
    return sub;
  };

  auto* info = add_common(app.add_subcommand("info", "model configuration and cost summary"));
  info->add_option("--resolution", cfg.resolution, "count flops at this input size");

  auto* count =
      add_common(app.add_subcommand("count", "per-module parameter and flop breakdown"));
  count->add_option("--resolution", cfg.resolution, "count flops at this input size");

  auto* forward = add_common(app.add_subcommand("forward", "run inference, emit logits"));
  forward->add_option("--input", cfg.input_path, "input tensor file (default: seeded random)");
  forward->add_option("--batch", cfg.batch, "generated batch size")->capture_default_str();
  forward->add_flag("--fold", cfg.fold, "absorb batchnorm before running");

  auto* gradcheck =
      add_common(app.add_subcommand("gradcheck", "compare backward against finite differences"));
  gradcheck->add_option("--module", cfg.module, "module name or 'all'")->capture_default_str();
  gradcheck->add_option("--tol", cfg.tolerance, "max relative error to pass")
      ->capture_default_str();

  auto* similarity = add_common(
      app.add_subcommand("similarity", "attention map similarity, split vs full-feature heads"));
  similarity->add_option("--batch", cfg.batch, "probe batch size")->capture_default_str();

  auto* importance =
      add_common(app.add_subcommand("importance", "first-order channel importance scores"));
  importance->add_option("--batch", cfg.batch, "probe batch size")->capture_default_str();

  auto* bench = add_common(app.add_subcommand("bench", "op category profile and throughput"));
  bench->add_option("--batch", cfg.batch, "batch size")->capture_default_str();
  bench->add_option("--warmup", cfg.warmup, "untimed runs first")->capture_default_str();
  bench->add_option("--repeats", cfg.repeats, "timed runs (median)")->capture_default_str();
  bench->add_option("--threads", cfg.threads, "batch-parallel workers for throughput")
      ->capture_default_str();
  bench->add_flag("--fold", cfg.fold, "absorb batchnorm before timing");

  auto* fold =
      add_common(app.add_subcommand("fold", "absorb batchnorm and save the folded weights"));
  fold->add_option("--batch", cfg.batch, "probe batch for the agreement check")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help exits clean, any usage problem is an input error
  }

  cfg.command = app.get_subcommands().front()->get_name();
  return evit::run_cli(cfg, std::cout, std::cerr);
}
