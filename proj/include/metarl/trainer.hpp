#pragma once

// PPO over whole meta-episodes, the multi-task pretraining phase and the
// combined end-to-end + inference objective.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metarl/agents.hpp"

namespace metarl {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PpoConfig {
  double policy_lr = 3e-4;
  double inference_lr = 1e-3;
  double clip = 0.2;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  int epochs = 4;
  int minibatches = 4;
  double gamma = 0.99;
  double lambda = 0.95;
  double max_grad_norm = 0.5;
  std::size_t num_envs = 16;
  bool linear_decay = false;
  double infer_weight = 1.0;
  double prior_weight = 1.0;
  double adam_eps = 1e-5;
  // Divide rewards by a running std of the discounted return before GAE.
  bool normalize_rewards = true;
};

// One meta-episode of one environment, as collected.
struct MetaEpisode {
  std::size_t task = 0;  // label index
  Tensor obs;            // [T, obs_width], what the agent saw
  Tensor prev_action;    // [T, actions]
  Tensor prev_reward;    // [T, 1]
  Tensor prev_done;      // [T, 1]
  Tensor next_obs;       // [T, obs_width], state reached before any reset
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<std::uint8_t> dones;  // inner-episode ends
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t steps() const { return actions.size(); }
  double total_reward() const;
};

struct RolloutBatch {
  std::vector<MetaEpisode> episodes;
  std::size_t frames() const;
  double mean_return() const;
};

// Label rows for `episodes`, time-major like stack_inputs.
Tensor stack_labels(const std::vector<const MetaEpisode*>& episodes, std::size_t width);
SequenceInputs stack_inputs(const std::vector<const MetaEpisode*>& episodes);
TransitionTargets stack_targets(const std::vector<const MetaEpisode*>& episodes,
                                std::size_t actions);

// Independent environments, each with its own RNG stream split from a seed.
class VecEnv {
 public:
  VecEnv(EnvKind kind, std::size_t count, std::uint64_t seed);
  // Re-derives every per-environment stream from `seed`.
  void reseed(std::uint64_t seed);
  std::size_t size() const { return envs_.size(); }
  EnvKind kind() const { return kind_; }
  Env& env(std::size_t i) { return envs_.at(i); }
  Rng& rng(std::size_t i) { return rngs_.at(i); }
  std::size_t meta_length() const;

 private:
  EnvKind kind_;
  std::vector<Env> envs_;
  std::vector<Rng> rngs_;
};

// Runs one meta-episode in every environment with the meta policy. The
// recurrent state starts at zero and persists across inner episodes.
RolloutBatch collect_rollouts(const Agent& agent, const ParamSet& params, VecEnv& envs);
// Same, acting with the privileged multi-task policy.
RolloutBatch collect_multitask_rollouts(const Agent& agent, const ParamSet& params,
                                        VecEnv& envs);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// delta_t = r_t + gamma V_{t+1} (1 - meta_done_t) - V_t,
// A_t = delta_t + gamma lambda (1 - meta_done_t) A_{t+1}; V_T = bootstrap.
GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                      double bootstrap, const std::vector<std::uint8_t>& meta_dones,
                      double gamma, double lambda);

// Fills advantages/returns of every episode (each ends its meta-episode).
// `reward_scale` multiplies the rewards seen by GAE only; stored rewards, and
// so encoder inputs and inference targets, stay raw.
void compute_batch_gae(RolloutBatch& batch, double gamma, double lambda,
                       double reward_scale = 1.0);

// Running variance of per-step discounted returns (Welford, merged per batch).
struct ReturnScaler {
  double count = 0.0;
  double mean = 0.0;
  double m2 = 0.0;

  void update(const RolloutBatch& batch, double gamma);
  // 1 / std of the discounted return, or 1 before any data.
  double reward_scale() const;
};

// Zero mean, unit population standard deviation across the whole batch.
void normalize_advantages(RolloutBatch& batch);

class Adam {
 public:
  explicit Adam(double eps = 1e-5, double beta1 = 0.9, double beta2 = 0.999)
      : eps_(eps), beta1_(beta1), beta2_(beta2) {}
  // Updates the entries of `params` accepted by `include`.
  void step(ParamSet& params, const ParamSet& grads, double lr,
            const std::function<bool(std::string_view)>& include);
  long steps() const { return t_; }

 private:
  double eps_, beta1_, beta2_;
  long t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Scales the accepted entries of `grads` so their joint L2 norm is at most
// `max_norm`. Returns the norm before clipping.
double clip_grad_norm(ParamSet& grads, double max_norm,
                      const std::function<bool(std::string_view)>& include);

struct LossReport {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double j_infer = 0.0;
  double j_prior = 0.0;
};

// Clipped-surrogate policy loss (negated, averaged over rows) for logits laid
// out time-major over `episodes`.
Var policy_surrogate(Graph& g, Var logits, const std::vector<const MetaEpisode*>& episodes,
                     double clip);

// Combined end-to-end + inference objective for RNN-architecture agents:
// (1 - weight) RL + weight |h[:, :k] - target|^2, with target the task label
// (or its learned embedding when `use_embedding`).
struct CombinedObjective {
  double weight = 0.0;
  bool use_embedding = false;
};

// Minibatch of whole meta-episodes.
struct MiniBatch {
  std::vector<const MetaEpisode*> episodes;
  // Archived multi-task sequences mixed into the inference loss (++ variants).
  std::vector<const MetaEpisode*> archive;
};

struct MiniBatchGrads {
  ParamSet grads;
  LossReport report;
};

// Loss and gradients for one minibatch of the meta policy.
MiniBatchGrads ppo_minibatch_gradients(const Agent& agent, const ParamSet& params,
                                       const MiniBatch& mb, const PpoConfig& cfg,
                                       const std::optional<CombinedObjective>& combined,
                                       Rng& noise_rng);
// Same for the multi-task policy (no recurrence, labels as input).
MiniBatchGrads multitask_minibatch_gradients(const Agent& agent, const ParamSet& params,
                                             const MiniBatch& mb, const PpoConfig& cfg);

struct Optimizers {
  Adam policy;
  Adam inference;
  Adam multitask;
  explicit Optimizers(double eps = 1e-5) : policy(eps), inference(eps), multitask(eps) {}
};

struct LearningRates {
  double policy = 0.0;
  double inference = 0.0;
};

// Constant, or linear to zero over `total_updates` when decay is on.
LearningRates lr_schedule(const PpoConfig& cfg, std::size_t update_index,
                          std::size_t total_updates);

// Epochs x minibatches of clipped-surrogate PPO on `batch` (advantages must
// already be computed and normalized). Policy-path parameters are stepped by
// the policy optimizer; inference parameters by the inference optimizer.
LossReport ppo_update(const Agent& agent, ParamSet& params, const RolloutBatch& batch,
                      const PpoConfig& cfg, const LearningRates& lr, Optimizers& opt,
                      Rng& rng, const std::vector<MetaEpisode>* archive = nullptr);

// One update with the combined objective and a single optimizer.
LossReport combined_objective_step(const Agent& agent, ParamSet& params,
                                   const RolloutBatch& batch, const PpoConfig& cfg,
                                   double lr, double weight, bool use_embedding,
                                   Adam& opt, Rng& rng);

LossReport multitask_update(const Agent& agent, ParamSet& params, const RolloutBatch& batch,
                            const PpoConfig& cfg, double lr, Adam& opt, Rng& rng);

// ---- Run-level orchestration ---------------------------------------------------

struct FrameBudget {
  std::size_t total_frames = 4'000'000;
  std::size_t pretrain_updates = 100;
};

struct UpdateRecord {
  std::size_t update = 0;
  std::size_t frames = 0;
  double mean_return = 0.0;
  LossReport losses;
  std::optional<double> latent_grad_norm;
  bool pretrain = false;
};

struct TrainerConfig {
  Method method = Method::RnnHn;
  EnvKind env = EnvKind::Grid;
  std::uint64_t seed = 0;
  PpoConfig ppo;
  FrameBudget budget;
  AgentSizes sizes;
  HyperInit hyper_init = HyperInit::BiasHyper;
  bool probe = false;
  std::optional<CombinedObjective> combined;
};

struct MultiTaskArtifacts {
  ParamSet params;  // multi.* entries
  std::vector<MetaEpisode> archive;
  std::size_t frames = 0;
};

class Trainer {
 public:
  explicit Trainer(TrainerConfig cfg);

  const TrainerConfig& config() const { return cfg_; }
  const Agent& agent() const { return agent_; }
  const ParamSet& params() const { return params_; }
  ParamSet& mutable_params() { return params_; }

  std::size_t frames_per_update() const;
  std::size_t pretrain_updates() const { return pretrain_updates_; }
  std::size_t meta_updates() const { return meta_updates_; }
  std::size_t total_updates() const { return pretrain_updates_ + meta_updates_; }
  std::size_t updates_done() const { return update_; }
  std::size_t frames() const { return frames_; }
  bool finished() const { return update_ >= total_updates(); }

  // Runs the next update (pretraining first) and returns its record.
  UpdateRecord step();
  // Runs every remaining pretraining update and returns the artifacts.
  const MultiTaskArtifacts& pretrain_multitask();
  const MultiTaskArtifacts& artifacts() const { return artifacts_; }

  // Restores counters after loading a checkpoint. Environment and sampling
  // streams are derived from (seed, update index), so the task sequence
  // continues where it stopped; optimizer moments restart from zero.
  void restore(ParamSet params, std::size_t update, std::size_t frames,
               std::vector<MetaEpisode> archive = {});
  const ReturnScaler& return_scaler() const { return scaler_; }
  void restore_return_scaler(const ReturnScaler& s) { scaler_ = s; }

 private:
  void finish_pretrain();

  TrainerConfig cfg_;
  Agent agent_;
  ParamSet params_;
  VecEnv envs_;
  Optimizers opt_;
  Rng rng_;
  MultiTaskArtifacts artifacts_;
  ReturnScaler scaler_;
  std::size_t pretrain_updates_ = 0;
  std::size_t meta_updates_ = 0;
  std::size_t update_ = 0;
  std::size_t frames_ = 0;
  bool handed_off_ = false;
};

// Mean meta-episode return and second-episode final-choice accuracy of the
// greedy meta policy on `count` fresh tasks.
struct Evaluation {
  double mean_return = 0.0;
  double final_choice_accuracy = 0.0;  // memory corridor: 2nd episode final room
};
Evaluation evaluate_greedy(const Agent& agent, const ParamSet& params, std::size_t count,
                           std::uint64_t seed);

}  // namespace metarl
