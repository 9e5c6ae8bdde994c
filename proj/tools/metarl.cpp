// metarl: train, sweep, verify, plot and grad-probe.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "metarl/cli.hpp"

namespace fs = std::filesystem;
using namespace metarl;

namespace {

RunConfig config_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig cfg = load_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-RL with hypernetworks: training, sweeps and analysis"};
  app.require_subcommand(1);

  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1, resamples = 10000, window = 1, updates = 0;
  std::vector<std::string> run_dirs;

  auto* train = app.add_subcommand("train", "train one run, resuming from its checkpoint");
  train->add_option("--config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--out", out, "output directory");

  auto* sweep = app.add_subcommand("sweep", "learning-rate x seed sweep with best-rate selection");
  sweep->add_option("--config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out, "output directory");
  sweep->add_option("--workers", workers, "cells run at once")->check(CLI::PositiveNumber);
  sweep->add_option("--resamples", resamples, "bootstrap resamples")->check(CLI::Range(1000, 10000000));

  auto* verify = app.add_subcommand("verify", "run the named invariant checks");

  auto* plot = app.add_subcommand("plot", "smoothed curves with 68% bootstrap bands");
  plot->add_option("runs", run_dirs, "run directories")->required();
  plot->add_option("--out", out, "output directory")->required();
  plot->add_option("--window", window, "smoothing window")->check(CLI::PositiveNumber);
  plot->add_option("--resamples", resamples, "bootstrap resamples")->check(CLI::Range(1000, 10000000));

  auto* probe = app.add_subcommand("grad-probe", "train with the latent gradient-norm probe on");
  probe->add_option("--config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  probe->add_option("--seed", seed, "override the config seed");
  probe->add_option("--out", out, "output directory");
  probe->add_option("--updates", updates, "updates to run (0: the whole budget)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig cfg = config_with_seed(config, seed);
      const fs::path dir = resolve_output_dir(cfg, out);
      const TrainOutcome o = cmd_train(cfg, dir, &std::cout);
      std::cout << "wrote " << dir.string() << " (" << o.records.size() << " updates)\n";
    } else if (*sweep) {
      const RunConfig cfg = load_config(config);
      const fs::path dir = resolve_output_dir(cfg, out);
      const SweepOutcome o = cmd_sweep(cfg, dir, workers, resamples, &std::cout);
      if (o.result.best_lr) std::cout << "best lr " << *o.result.best_lr << "\n";
      std::cout << "wrote " << dir.string() << "\n";
      if (o.status != SweepStatus::Complete) {
        std::cerr << (o.status == SweepStatus::Partial ? "sweep incomplete: some cells failed\n"
                                                       : "sweep failed: every cell failed\n");
      }
      return static_cast<int>(o.status);
    } else if (*verify) {
      const auto checks = cmd_verify();
      int failed = 0;
      for (const auto& c : checks) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name;
        if (!c.passed) std::cout << ": " << c.detail;
        std::cout << "\n";
        failed += !c.passed;
      }
      std::cout << checks.size() - failed << "/" << checks.size() << " checks passed\n";
      return failed == 0 ? 0 : 1;
    } else if (*plot) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      RunConfig none;
      const fs::path dir = resolve_output_dir(none, out);
      cmd_plot(dirs, dir, PlotOptions{window, resamples});
      std::cout << "wrote " << (dir / "curves.svg").string() << "\n";
    } else if (*probe) {
      const RunConfig cfg = config_with_seed(config, seed);
      const fs::path dir = resolve_output_dir(cfg, out);
      cmd_grad_probe(cfg, dir, updates, &std::cout);
      std::cout << "wrote " << (dir / "probe.tsv").string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
