#include "metarl/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

namespace metarl {

Interval bootstrap_ci(const std::vector<double>& values, double level,
                      std::size_t resamples, std::uint64_t seed) {
  if (values.empty()) throw AnalysisError("bootstrap_ci: no values");
  if (resamples < 1000) throw AnalysisError("bootstrap_ci: need at least 1000 resamples");
  if (!(level > 0.0 && level < 1.0)) throw AnalysisError("bootstrap_ci: level must be in (0, 1)");
  const std::size_t n = values.size();
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> means(resamples);
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[pick(rng)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, resamples - 1);
    const double frac = pos - static_cast<double>(lo);
    return means[lo] + frac * (means[hi] - means[lo]);
  };
  Interval out{quantile(0.5 - level / 2.0), quantile(0.5 + level / 2.0)};
  // Resampling a constant sample reproduces it exactly; avoid rounding drift.
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; })) {
    out = {values[0], values[0]};
  }
  return out;
}

std::vector<double> smooth_curve(const std::vector<double>& values, std::size_t window) {
  if (window == 0) throw AnalysisError("smooth_curve: window must be at least 1");
  if (window > values.size()) {
    throw AnalysisError("smooth_curve: window " + std::to_string(window) +
                        " longer than the series (" + std::to_string(values.size()) + ")");
  }
  if (window == 1) return values;
  std::vector<double> out(values.size() - window + 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < window; ++k) s += values[i + k];
    out[i] = s / static_cast<double>(window);
  }
  return out;
}

ProbeResult latent_grad_norm(const Agent& agent, const ParamSet& params,
                             const RolloutBatch& batch, const PpoConfig& cfg, bool strict,
                             double loss_offset) {
  if (batch.episodes.empty()) throw AnalysisError("latent_grad_norm: empty batch");
  std::vector<const MetaEpisode*> eps;
  for (const auto& e : batch.episodes) eps.push_back(&e);
  Graph g(&params);
  Var logits, probed;
  std::optional<Var> hyper;
  std::string substitute;
  if (agent.flags().multitask_only) {
    const SequenceInputs in = stack_inputs(eps);
    const Agent::MultiVars mv = agent.multitask_forward(
        g, g.constant(stack_labels(eps, agent.label_width())), g.constant(in.obs));
    logits = mv.logits;
    hyper = mv.hyper_hidden;
    probed = mv.embedding;
    substitute = "multi.task_embedding";
  } else {
    const ForwardVars fw = agent.forward(g, stack_inputs(eps), std::nullopt);
    logits = fw.logits;
    hyper = fw.hyper_hidden;
    probed = fw.policy_latent;
    substitute = agent.flags().uses_bottleneck() ? "policy_input_latent(projection)"
                                                 : "policy_input_latent(rnn_output)";
  }
  ProbeResult out;
  if (hyper) {
    probed = *hyper;
    out.layer = "hypernet.first_hidden";
  } else if (strict) {
    throw AnalysisError("agent " + std::string(method_name(agent.method())) +
                        " has no hypernetwork first hidden layer; substitute would be " +
                        substitute);
  } else {
    out.layer = substitute;
  }
  Var loss = policy_surrogate(g, logits, eps, cfg.clip);
  if (loss_offset != 0.0) loss = add_scalar(loss, loss_offset);
  g.backward(loss);
  const Tensor& grad = g.grad(probed);
  double total = 0.0;
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < grad.cols(); ++c) ss += grad(r, c) * grad(r, c);
    total += std::sqrt(ss);
  }
  out.value = total / static_cast<double>(grad.rows());
  return out;
}

bool SweepResult::complete() const {
  return std::none_of(cells.begin(), cells.end(), [](const SweepCell& c) { return c.failed; });
}

double final_score(const std::vector<CurvePoint>& curve) {
  if (curve.empty()) throw AnalysisError("final_score: empty curve");
  const std::size_t k = std::max<std::size_t>(1, curve.size() / 10);
  double s = 0.0;
  for (std::size_t i = curve.size() - k; i < curve.size(); ++i) s += curve[i].mean_return;
  return s / static_cast<double>(k);
}

std::optional<double> select_best_lr(const std::vector<SweepCell>& cells) {
  std::vector<double> lrs;
  for (const auto& c : cells) {
    if (!c.failed && std::find(lrs.begin(), lrs.end(), c.lr) == lrs.end()) lrs.push_back(c.lr);
  }
  std::optional<double> best;
  double best_score = 0.0;
  for (double lr : lrs) {
    double s = 0.0;
    int n = 0;
    for (const auto& c : cells) {
      if (c.failed || c.lr != lr) continue;
      const double f = final_score(c.curve);
      if (!std::isfinite(f)) continue;
      s += f;
      ++n;
    }
    if (n == 0) continue;
    const double score = s / n;
    if (!best || score > best_score || (score == best_score && lr > *best)) {
      best = lr;
      best_score = score;
    }
  }
  return best;
}

void aggregate_best(SweepResult& result, const AggregateOptions& options) {
  result.frames.clear();
  result.mean.clear();
  result.band.clear();
  if (!result.best_lr) return;
  std::vector<const SweepCell*> chosen;
  for (const auto& c : result.cells) {
    if (!c.failed && c.lr == *result.best_lr) chosen.push_back(&c);
  }
  std::size_t len = chosen.front()->curve.size();
  for (const auto* c : chosen) len = std::min(len, c->curve.size());
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> v;
    for (const auto* c : chosen) v.push_back(c->curve[i].mean_return);
    result.frames.push_back(chosen.front()->curve[i].frames);
    result.mean.push_back(std::accumulate(v.begin(), v.end(), 0.0) /
                          static_cast<double>(v.size()));
    result.band.push_back(bootstrap_ci(v, options.level, options.resamples, options.seed + i));
  }
}

SweepResult run_sweep(const std::string& method, const std::vector<double>& lrs,
                      const std::vector<std::uint64_t>& seeds, const CellRunner& run_cell,
                      std::size_t workers, const AggregateOptions& options) {
  SweepResult result;
  result.method = method;
  for (double lr : lrs) {
    for (std::uint64_t s : seeds) result.cells.push_back({lr, s, {}, false, {}});
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < result.cells.size(); i = next++) {
      SweepCell& cell = result.cells[i];
      try {
        cell.curve = run_cell(cell.lr, cell.seed);
        if (cell.curve.empty()) throw AnalysisError("cell produced no records");
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
        cell.curve.clear();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, result.cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  result.best_lr = select_best_lr(result.cells);
  aggregate_best(result, options);
  return result;
}

}  // namespace metarl
