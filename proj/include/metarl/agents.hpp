#pragma once

// Every meta-RL variant as one configurable agent.
//
// Parameter names are grouped by prefix:
//   enc.*                     trajectory encoder (input embeddings + GRU)
//   proj_mu, proj_sigma       bottleneck heads
//   proj_phi                  projection feeding the policy
//   proj_c, proj_g,
//   proj_phi_prime, decoder.* task-inference heads
//   policy.*, critic.*        meta policy and value head
//   multi.*                   multi-task policy, its critic and the g table

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "metarl/diffcore.hpp"
#include "metarl/envs.hpp"
#include "metarl/nets.hpp"

namespace metarl {

class AgentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method {
  Rnn,
  RnnS,
  RnnHn,
  TiNaive,
  Ti,
  TiPlusPlus,
  TiHn,
  TiPlusPlusHn,
  Vi,
  ViHn,
  BiPlusPlusHn,
  Multi,
  MultiHn,
};

inline constexpr std::array<Method, 13> kAllMethods{
    Method::Rnn,        Method::RnnS,         Method::RnnHn, Method::TiNaive,
    Method::Ti,         Method::TiPlusPlus,   Method::TiHn,  Method::TiPlusPlusHn,
    Method::Vi,         Method::ViHn,         Method::BiPlusPlusHn,
    Method::Multi,      Method::MultiHn};

std::string_view method_name(Method m);
Method parse_method(std::string_view name);

enum class InferenceTarget { None, Given, Learned, Transitions, BaseNet };
// "N/A" rows of the component table have no multi-task phase at all.
enum class MultiTaskPhase { NotApplicable, PretrainOnly, PretrainAndReuse };

struct MethodFlags {
  InferenceTarget target = InferenceTarget::None;
  bool conditions_on_state = false;
  bool hypernetwork = false;
  MultiTaskPhase multitask = MultiTaskPhase::NotApplicable;
  // Multi / Multi+HN: only the privileged multi-task policy is trained.
  bool multitask_only = false;

  bool uses_bottleneck() const { return target != InferenceTarget::None; }
  bool needs_pretrain() const { return multitask != MultiTaskPhase::NotApplicable; }
  bool reuses() const { return multitask == MultiTaskPhase::PretrainAndReuse; }
  friend bool operator==(const MethodFlags&, const MethodFlags&) = default;
};

MethodFlags method_flags(Method m);

struct AgentSizes {
  std::size_t state_embed = 32;  // encoder input embeddings
  std::size_t action_embed = 16;
  std::size_t reward_embed = 16;
  std::size_t gru_hidden = 256;
  std::size_t policy_embed = 256;  // state embedding passed to the policy
  std::vector<std::size_t> policy_hidden{256, 128};
  std::vector<std::size_t> hyper_hidden{256};
  std::size_t critic_embed = 256;
  std::vector<std::size_t> critic_hidden{256, 128};
  std::size_t latent = 25;
  std::size_t projection = 25;
  std::size_t task_embedding = 25;
  std::vector<std::size_t> decoder_hidden{64};
};

// Time-major stacked inputs: row t * batch + b is step t of sequence b.
struct SequenceInputs {
  std::size_t steps = 0;
  std::size_t batch = 0;
  Tensor obs;          // [rows, obs_width]
  Tensor prev_action;  // [rows, actions], one-hot, zero at meta-episode start
  Tensor prev_reward;  // [rows, 1]
  Tensor prev_done;    // [rows, 1], 1 after an inner-episode boundary
  std::size_t rows() const { return steps * batch; }
};

struct ActOutput {
  std::vector<double> probs;  // [batch * actions], row-major
  std::vector<double> values;
  Tensor next_state;  // recurrent state after this step
  std::optional<LatentBelief> belief;
};

struct ForwardVars {
  Var encoding;      // GRU outputs [rows, H]
  Var policy_latent; // what conditions the policy: h, or the projection of (mu, sigma)
  Var logits;
  Var value;
  std::optional<BeliefVars> belief;
  std::optional<Var> hyper_hidden;  // first hidden layer of the hypernetwork
};

struct InferenceLosses {
  Var infer;  // mean squared error, >= 0
  Var prior;  // mean KL to N(0, I), >= 0
};

// Stored meta-episode for inference targets. Obs/actions index the same rows
// as the SequenceInputs they came from.
struct TransitionTargets {
  std::size_t steps = 0;
  std::size_t batch = 0;
  Tensor obs;            // s_i          [rows, obs_width]
  Tensor action;         // one-hot a_i  [rows, actions]
  Tensor next_obs;       // s_{i+1} before any reset
  Tensor reward;         // r_i          [rows, 1]
};

class Agent {
 public:
  Agent(Method method, EnvKind env, AgentSizes sizes = {},
        HyperInit init = HyperInit::BiasHyper);

  Method method() const { return method_; }
  const MethodFlags& flags() const { return flags_; }
  EnvKind env() const { return env_; }
  const AgentSizes& sizes() const { return sizes_; }
  HyperInit hyper_init() const { return init_; }

  std::size_t obs_width() const { return obs_width_; }
  std::size_t action_count() const { return actions_; }
  std::size_t label_width() const { return label_width_; }
  std::size_t gru_input() const;
  const GruSpec& gru_spec() const { return gru_; }
  const MlpSpec& policy_spec() const { return policy_; }
  const HypernetSpec& hyper_spec() const { return hyper_; }
  const BottleneckSpec& bottleneck_spec() const { return bottleneck_; }
  const MlpSpec& decoder_spec() const { return decoder_; }

  ParamSet init_params(std::uint64_t seed) const;
  // Fresh critic weights, used when the multi-task policy is reused.
  void reinit_critic(ParamSet& params, std::uint64_t seed) const;

  bool is_policy_param(std::string_view name) const;
  bool is_inference_param(std::string_view name) const;
  static bool is_multitask_param(std::string_view name);

  // One step for `batch` environments. `state` is [batch, H].
  ActOutput act(const ParamSet& params, const Tensor& obs, const Tensor& prev_action,
                const Tensor& prev_reward, const Tensor& prev_done, const Tensor& state,
                const Tensor& noise) const;

  // Whole-sequence unroll from a zero recurrent state. `noise` is
  // [rows, latent] or invalid (zero noise).
  ForwardVars forward(Graph& g, const SequenceInputs& in, std::optional<Var> noise) const;

  // Multi-task policy conditioned on the privileged label rows.
  struct MultiVars {
    Var embedding;  // g(c)
    Var logits;
    Var value;
    std::optional<Var> hyper_hidden;
  };
  MultiVars multitask_forward(Graph& g, Var labels, Var obs) const;
  ActOutput multitask_act(const ParamSet& params, const Tensor& labels,
                          const Tensor& obs) const;

  // Inference losses for the agent's target. `labels` holds one task-label
  // row per sequence row.
  InferenceLosses inference_losses(Graph& g, const BeliefVars& belief,
                                   const Tensor& labels,
                                   const TransitionTargets& transitions) const;

  // Policy logits for a given policy-input latent and raw observation, for
  // the meta policy or (with `multitask`) the multi-task policy.
  Var policy_logits(Graph& g, Var latent, Var obs, bool multitask = false) const;

  // Encoder-only unroll used for archived sequences.
  BeliefVars encode_belief(Graph& g, const SequenceInputs& in, Var noise) const;

 private:
  Var encode_inputs(Graph& g, Var obs, Var prev_action, Var prev_reward,
                    Var prev_done) const;
  struct Heads {
    Var logits;
    Var value;
    std::optional<Var> hyper_hidden;
  };
  Heads heads(Graph& g, const std::string& root, Var latent, Var obs) const;

  Method method_;
  MethodFlags flags_;
  EnvKind env_;
  AgentSizes sizes_;
  HyperInit init_;
  std::size_t obs_width_;
  std::size_t actions_;
  std::size_t label_width_;
  GruSpec gru_;
  MlpSpec policy_;
  HypernetSpec hyper_;
  MlpSpec critic_;
  BottleneckSpec bottleneck_;
  MlpSpec decoder_;
};

// ---- Inference losses -------------------------------------------------------------

// Mean over rows of the squared L2 distance between rows.
Var mean_squared_rows(Var prediction, Var target);

// J_infer = |c - P^c(z)|^2 and J_prior = KL(IB || N(0, I)), both as losses.
InferenceLosses ti_naive_losses(Graph& g, const BeliefVars& belief, const Tensor& labels);

// J_infer = |g(c) - P^g(z)|^2 against the frozen embedding table read from
// `params` (multi.g). Throws on a label that is not one-hot.
Var ti_losses(Graph& g, const BeliefVars& belief, const Tensor& labels,
              const ParamSet& params);

// Reconstructs (s_{i+1}, r_i) from (z_t, s_i, a_i) for every pair (t, i) of the
// same sequence. With `future_masked` only pairs i <= t contribute.
Var vi_losses(Graph& g, const MlpSpec& decoder, Var z, const TransitionTargets& tr,
              bool future_masked = false);

// J_infer = |phi' - P^{phi'}(z)|^2 where phi' comes from the multi-task
// hypernetwork applied to g(c) and is treated as a constant.
Var bi_losses(Graph& g, const BeliefVars& belief, const Tensor& labels,
              const ParamSet& params, const HypernetSpec& multitask_hyper);

// Value of g(c) for one-hot label rows.
Tensor task_embedding(const ParamSet& params, const Tensor& labels);

// ---- Multi-task reuse and inference batches -----------------------------------------

// Copies multi.policy.* into policy.* (hypernetwork or MLP, plus the state
// embedding) and reinitializes the critic. No-op for configs without reuse.
void reuse_initialize(const Agent& agent, ParamSet& params, std::uint64_t critic_seed);

enum class InferenceMixing { Union, Balanced };

struct InferenceSample {
  bool from_multitask = false;
  std::size_t index = 0;
};

// Draws `count` record references. Plain variants sample only the meta buffer;
// ++ variants sample the union (uniform over records) or, with Balanced, half
// from each buffer.
std::vector<InferenceSample> inference_batch_source(const MethodFlags& flags,
                                                    std::size_t meta_records,
                                                    std::size_t multitask_records,
                                                    std::size_t count,
                                                    InferenceMixing mixing, Rng& rng);

// One-hot rows for action indices.
Tensor one_hot_rows(const std::vector<int>& index, std::size_t width);

}  // namespace metarl
