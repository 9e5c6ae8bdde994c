#pragma once

// Bootstrap intervals, curve smoothing, learning-rate sweeps and the latent
// gradient-norm probe.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metarl/trainer.hpp"

namespace metarl {

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Percentile bootstrap interval of the mean. Needs at least one value and
// 1000 resamples.
Interval bootstrap_ci(const std::vector<double>& values, double level = 0.68,
                      std::size_t resamples = 10000, std::uint64_t seed = 0);

// Moving average with valid padding: output length = n - window + 1.
std::vector<double> smooth_curve(const std::vector<double>& values, std::size_t window);

struct ProbeResult {
  double value = 0.0;
  std::string layer;  // "hypernet.first_hidden" or the substitute that was probed
};

// Mean over rows of the L2 norm of d(policy loss)/d(probed activation). The
// probed activation is the first hidden layer of the hypernetwork; agents
// without one are probed at the policy-input latent unless `strict`, in which
// case the call fails and names that substitute.
ProbeResult latent_grad_norm(const Agent& agent, const ParamSet& params,
                             const RolloutBatch& batch, const PpoConfig& cfg,
                             bool strict = false, double loss_offset = 0.0);

struct CurvePoint {
  std::size_t update = 0;
  std::size_t frames = 0;
  double mean_return = 0.0;
};

struct SweepCell {
  double lr = 0.0;
  std::uint64_t seed = 0;
  std::vector<CurvePoint> curve;
  bool failed = false;
  std::string error;
};

struct SweepResult {
  std::string method;
  std::vector<SweepCell> cells;
  std::optional<double> best_lr;
  // Seed-aggregated curve of the selected learning rate.
  std::vector<std::size_t> frames;
  std::vector<double> mean;
  std::vector<Interval> band;
  bool complete() const;
};

// Mean return over the final 10% of updates (at least one point).
double final_score(const std::vector<CurvePoint>& curve);

// Best learning rate among non-failed cells by mean final score over seeds;
// ties go to the larger rate. Empty when every cell failed.
std::optional<double> select_best_lr(const std::vector<SweepCell>& cells);

struct AggregateOptions {
  double level = 0.68;
  std::size_t resamples = 10000;
  std::uint64_t seed = 0;
};

// Fills frames/mean/band from the cells of `result.best_lr`.
void aggregate_best(SweepResult& result, const AggregateOptions& options);

using CellRunner = std::function<std::vector<CurvePoint>(double lr, std::uint64_t seed)>;

// Runs every lr x seed cell (a throwing cell is recorded as failed), selects
// the best rate and aggregates its seeds. Up to `workers` cells run at once.
SweepResult run_sweep(const std::string& method, const std::vector<double>& lrs,
                      const std::vector<std::uint64_t>& seeds, const CellRunner& run_cell,
                      std::size_t workers = 1, const AggregateOptions& options = {});

}  // namespace metarl
