#include "metarl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "metarl/analysis.hpp"

namespace metarl {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

constexpr std::uint64_t kEnvSalt = 1;
constexpr std::uint64_t kUpdateSalt = 2;
constexpr std::uint64_t kCriticSalt = 3;

int sample_categorical(const double* probs, std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  for (std::size_t a = 0; a + 1 < n; ++a) {
    x -= probs[a];
    if (x < 0.0) return static_cast<int>(a);
  }
  return static_cast<int>(n - 1);
}

Tensor normal_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  std::normal_distribution<double> d(0.0, 1.0);
  for (double& v : t.data) v = d(rng);
  return t;
}

void set_row(Tensor& t, std::size_t r, const std::vector<double>& v) {
  std::copy(v.begin(), v.end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * t.cols()));
}

void init_episode(MetaEpisode& ep, std::size_t T, std::size_t ow, std::size_t A) {
  ep.obs = Tensor({T, ow});
  ep.prev_action = Tensor({T, A});
  ep.prev_reward = Tensor({T, 1});
  ep.prev_done = Tensor({T, 1});
  ep.next_obs = Tensor({T, ow});
  ep.actions.assign(T, 0);
  ep.rewards.assign(T, 0.0);
  ep.log_probs.assign(T, 0.0);
  ep.values.assign(T, 0.0);
  ep.dones.assign(T, 0);
}

using ActFn = std::function<ActOutput(const Tensor& obs, const Tensor& prev_action,
                                      const Tensor& prev_reward, const Tensor& prev_done,
                                      const Tensor& state, const Tensor& labels)>;

RolloutBatch run_meta_episodes(VecEnv& envs, std::size_t actions, std::size_t hidden,
                               const ActFn& act, bool greedy) {
  const std::size_t N = envs.size();
  const std::size_t T = envs.meta_length();
  const std::size_t ow = envs.env(0).observation_width();
  const std::size_t lw = task_label_width(envs.kind());
  RolloutBatch batch;
  batch.episodes.resize(N);
  Tensor obs({N, ow});
  Tensor labels({N, lw});
  for (std::size_t i = 0; i < N; ++i) {
    const Task task = sample_task(envs.kind(), envs.rng(i));
    set_row(obs, i, envs.env(i).reset_meta(task));
    set_row(labels, i, task_label(task));
    batch.episodes[i].task = task.label_index();
    init_episode(batch.episodes[i], T, ow, actions);
  }
  Tensor state({N, hidden});
  Tensor prev_action({N, actions});
  Tensor prev_reward({N, 1});
  Tensor prev_done({N, 1});
  for (std::size_t t = 0; t < T; ++t) {
    const ActOutput out = act(obs, prev_action, prev_reward, prev_done, state, labels);
    Tensor next_obs({N, ow});
    Tensor next_action({N, actions});
    Tensor next_reward({N, 1});
    Tensor next_done({N, 1});
    for (std::size_t i = 0; i < N; ++i) {
      MetaEpisode& ep = batch.episodes[i];
      const double* p = out.probs.data() + i * actions;
      int a = 0;
      if (greedy) {
        a = static_cast<int>(std::max_element(p, p + actions) - p);
      } else {
        a = sample_categorical(p, actions, envs.rng(i));
      }
      StepResult res;
      try {
        res = envs.env(i).step(a);
      } catch (const std::exception& e) {
        throw TrainingError("environment " + std::to_string(i) + " failed: " + e.what());
      }
      for (std::size_t c = 0; c < ow; ++c) ep.obs(t, c) = obs(i, c);
      for (std::size_t c = 0; c < actions; ++c) ep.prev_action(t, c) = prev_action(i, c);
      ep.prev_reward(t, 0) = prev_reward(i, 0);
      ep.prev_done(t, 0) = prev_done(i, 0);
      set_row(ep.next_obs, t, res.next_state);
      ep.actions[t] = a;
      ep.rewards[t] = res.reward;
      ep.log_probs[t] = std::log(std::max(p[a], 1e-300));
      ep.values[t] = out.values.empty() ? 0.0 : out.values[i];
      ep.dones[t] = res.done ? 1 : 0;
      if (t + 1 < T && res.meta_done) {
        throw TrainingError("environment " + std::to_string(i) +
                            " finished its meta-episode early");
      }
      set_row(next_obs, i, res.observation);
      next_action(i, static_cast<std::size_t>(a)) = 1.0;
      next_reward(i, 0) = res.reward;
      next_done(i, 0) = res.done ? 1.0 : 0.0;
    }
    obs = std::move(next_obs);
    prev_action = std::move(next_action);
    prev_reward = std::move(next_reward);
    prev_done = std::move(next_done);
    if (!out.next_state.data.empty()) state = out.next_state;
  }
  return batch;
}

struct RowData {
  std::vector<std::size_t> actions;
  Tensor old_log_probs;
  Tensor advantages;
  Tensor returns;
};

RowData stack_rows(const std::vector<const MetaEpisode*>& eps) {
  const std::size_t B = eps.size();
  const std::size_t T = eps.front()->steps();
  RowData d;
  d.actions.resize(T * B);
  d.old_log_probs = Tensor({T * B, 1});
  d.advantages = Tensor({T * B, 1});
  d.returns = Tensor({T * B, 1});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t r = t * B + b;
      d.actions[r] = static_cast<std::size_t>(eps[b]->actions[t]);
      d.old_log_probs.data[r] = eps[b]->log_probs[t];
      d.advantages.data[r] = eps[b]->advantages.at(t);
      d.returns.data[r] = eps[b]->returns.at(t);
    }
  }
  return d;
}

struct RlTerms {
  Var total;
  Var policy_loss;
  Var value_loss;
  Var entropy;
};

RlTerms rl_loss(Graph& g, Var logits, Var value, const RowData& rows, const PpoConfig& cfg) {
  Var logp_all = log_softmax_rows(logits);
  Var logp = pick_cols(logp_all, rows.actions);
  Var ratio = exp(logp - g.constant(rows.old_log_probs));
  Var adv = g.constant(rows.advantages);
  Var surr = minimum(ratio * adv, clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv);
  RlTerms t;
  t.policy_loss = neg(mean(surr));
  t.value_loss = mean(square(value - g.constant(rows.returns)));
  t.entropy = neg(mean(sum_rows(exp(logp_all) * logp_all)));
  t.total = t.policy_loss + scale(t.value_loss, cfg.value_coef) -
            scale(t.entropy, cfg.entropy_coef);
  return t;
}

void check_finite(const LossReport& r, const char* phase) {
  for (double v : {r.policy_loss, r.value_loss, r.entropy, r.j_infer, r.j_prior}) {
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite loss during " << phase << ": policy=" << r.policy_loss
         << " value=" << r.value_loss << " entropy=" << r.entropy
         << " j_infer=" << r.j_infer << " j_prior=" << r.j_prior;
      throw TrainingError(os.str());
    }
  }
}

void accumulate(LossReport& acc, const LossReport& r, double w) {
  acc.policy_loss += w * r.policy_loss;
  acc.value_loss += w * r.value_loss;
  acc.entropy += w * r.entropy;
  acc.j_infer += w * r.j_infer;
  acc.j_prior += w * r.j_prior;
}

std::vector<std::vector<std::size_t>> split_minibatches(std::size_t n, int count, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t k = std::max<std::size_t>(1, std::min<std::size_t>(n, count));
  std::vector<std::vector<std::size_t>> out(k);
  for (std::size_t i = 0; i < n; ++i) out[i * k / n].push_back(order[i]);
  return out;
}

}  // namespace

// ---- Episodes and batches ----------------------------------------------------------

double MetaEpisode::total_reward() const {
  return std::accumulate(rewards.begin(), rewards.end(), 0.0);
}

std::size_t RolloutBatch::frames() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.steps();
  return n;
}

double RolloutBatch::mean_return() const {
  if (episodes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : episodes) s += e.total_reward();
  return s / static_cast<double>(episodes.size());
}

namespace {

Tensor stack_field(const std::vector<const MetaEpisode*>& eps, Tensor MetaEpisode::*field) {
  const std::size_t B = eps.size();
  const Tensor& first = eps.front()->*field;
  const std::size_t T = first.rows(), w = first.cols();
  Tensor out({T * B, w});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor& src = eps[b]->*field;
    if (src.rows() != T) throw TrainingError("episodes of different lengths in one batch");
    for (std::size_t t = 0; t < T; ++t) {
      std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(t * w), w,
                  out.data.begin() + static_cast<std::ptrdiff_t>((t * B + b) * w));
    }
  }
  return out;
}

}  // namespace

Tensor stack_labels(const std::vector<const MetaEpisode*>& eps, std::size_t width) {
  const std::size_t B = eps.size();
  const std::size_t T = eps.front()->steps();
  Tensor out({T * B, width});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) out(t * B + b, eps[b]->task) = 1.0;
  }
  return out;
}

SequenceInputs stack_inputs(const std::vector<const MetaEpisode*>& eps) {
  if (eps.empty()) throw TrainingError("empty episode list");
  SequenceInputs in;
  in.steps = eps.front()->steps();
  in.batch = eps.size();
  in.obs = stack_field(eps, &MetaEpisode::obs);
  in.prev_action = stack_field(eps, &MetaEpisode::prev_action);
  in.prev_reward = stack_field(eps, &MetaEpisode::prev_reward);
  in.prev_done = stack_field(eps, &MetaEpisode::prev_done);
  return in;
}

TransitionTargets stack_targets(const std::vector<const MetaEpisode*>& eps,
                                std::size_t actions) {
  TransitionTargets tr;
  tr.steps = eps.front()->steps();
  tr.batch = eps.size();
  tr.obs = stack_field(eps, &MetaEpisode::obs);
  tr.next_obs = stack_field(eps, &MetaEpisode::next_obs);
  tr.action = Tensor({tr.steps * tr.batch, actions});
  tr.reward = Tensor({tr.steps * tr.batch, 1});
  for (std::size_t t = 0; t < tr.steps; ++t) {
    for (std::size_t b = 0; b < tr.batch; ++b) {
      const std::size_t r = t * tr.batch + b;
      tr.action(r, static_cast<std::size_t>(eps[b]->actions[t])) = 1.0;
      tr.reward.data[r] = eps[b]->rewards[t];
    }
  }
  return tr;
}

// ---- Environments and rollouts ----------------------------------------------------

VecEnv::VecEnv(EnvKind kind, std::size_t count, std::uint64_t seed) : kind_(kind) {
  if (count == 0) throw TrainingError("need at least one environment");
  for (std::size_t i = 0; i < count; ++i) envs_.emplace_back(kind);
  rngs_.resize(count);
  reseed(seed);
}

void VecEnv::reseed(std::uint64_t seed) {
  for (std::size_t i = 0; i < rngs_.size(); ++i) rngs_[i].seed(derive_seed(seed, i, kEnvSalt));
}

std::size_t VecEnv::meta_length() const {
  return static_cast<std::size_t>(envs_.front().meta_length());
}

RolloutBatch collect_rollouts(const Agent& agent, const ParamSet& params, VecEnv& envs) {
  const std::size_t L = agent.sizes().latent;
  return run_meta_episodes(
      envs, agent.action_count(), agent.sizes().gru_hidden,
      [&](const Tensor& obs, const Tensor& pa, const Tensor& pr, const Tensor& pd,
          const Tensor& state, const Tensor&) {
        return agent.act(params, obs, pa, pr, pd, state, Tensor({obs.rows(), L}));
      },
      false);
}

RolloutBatch collect_multitask_rollouts(const Agent& agent, const ParamSet& params,
                                        VecEnv& envs) {
  return run_meta_episodes(
      envs, agent.action_count(), 1,
      [&](const Tensor& obs, const Tensor&, const Tensor&, const Tensor&, const Tensor&,
          const Tensor& labels) { return agent.multitask_act(params, labels, obs); },
      false);
}

// ---- GAE ----------------------------------------------------------------------------

GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                      double bootstrap, const std::vector<std::uint8_t>& meta_dones,
                      double gamma, double lambda) {
  const std::size_t T = rewards.size();
  if (values.size() != T || meta_dones.size() != T) {
    throw TrainingError("compute_gae: rewards, values and dones must align");
  }
  GaeResult out;
  out.advantages.assign(T, 0.0);
  out.returns.assign(T, 0.0);
  double next_adv = 0.0;
  double next_value = bootstrap;
  for (std::size_t k = T; k-- > 0;) {
    const double live = meta_dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return out;
}

void compute_batch_gae(RolloutBatch& batch, double gamma, double lambda,
                       double reward_scale) {
  for (MetaEpisode& ep : batch.episodes) {
    const std::size_t n = ep.steps();
    if (n == 0) continue;
    std::vector<std::uint8_t> meta_done(n, 0);
    meta_done[n - 1] = 1;
    std::vector<double> rewards = ep.rewards;
    for (double& r : rewards) r *= reward_scale;
    GaeResult r = compute_gae(rewards, ep.values, 0.0, meta_done, gamma, lambda);
    ep.advantages = std::move(r.advantages);
    ep.returns = std::move(r.returns);
  }
}

void ReturnScaler::update(const RolloutBatch& batch, double gamma) {
  double n = 0.0, sum = 0.0;
  std::vector<double> returns;
  for (const MetaEpisode& ep : batch.episodes) {
    double ret = 0.0;
    for (double r : ep.rewards) {
      ret = gamma * ret + r;
      returns.push_back(ret);
      sum += ret;
      n += 1.0;
    }
  }
  if (n == 0.0) return;
  const double bmean = sum / n;
  double bm2 = 0.0;
  for (double r : returns) bm2 += (r - bmean) * (r - bmean);
  const double total = count + n;
  const double delta = bmean - mean;
  mean += delta * n / total;
  m2 += bm2 + delta * delta * count * n / total;
  count = total;
}

double ReturnScaler::reward_scale() const {
  if (count < 2.0) return 1.0;
  return 1.0 / std::sqrt(m2 / count + 1e-8);
}

void normalize_advantages(RolloutBatch& batch) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ep : batch.episodes) {
    for (double a : ep.advantages) sum += a;
    n += ep.advantages.size();
  }
  if (n == 0) return;
  const double m = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& ep : batch.episodes) {
    for (double a : ep.advantages) ss += (a - m) * (a - m);
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  for (auto& ep : batch.episodes) {
    for (double& a : ep.advantages) a = sd > 0.0 ? (a - m) / sd : 0.0;
  }
}

// ---- Optimization -------------------------------------------------------------------

void Adam::step(ParamSet& params, const ParamSet& grads, double lr,
                const std::function<bool(std::string_view)>& include) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, value] : params) {
    if (!include(name)) continue;
    const Tensor& g = grads.at(name);
    auto& [m, v] = moments_[name];
    if (m.empty()) {
      m.assign(value.size(), 0.0);
      v.assign(value.size(), 0.0);
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g.data[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
      value.data[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

double clip_grad_norm(ParamSet& grads, double max_norm,
                      const std::function<bool(std::string_view)>& include) {
  double ss = 0.0;
  for (const auto& [name, g] : grads) {
    if (!include(name)) continue;
    for (double v : g.data) ss += v * v;
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / (norm + 1e-12);
    for (auto& [name, g] : grads) {
      if (!include(name)) continue;
      for (double& v : g.data) v *= k;
    }
  }
  return norm;
}

LearningRates lr_schedule(const PpoConfig& cfg, std::size_t update_index,
                          std::size_t total_updates) {
  if (!cfg.linear_decay || total_updates == 0) return {cfg.policy_lr, cfg.inference_lr};
  const double frac = std::max(
      0.0, 1.0 - static_cast<double>(update_index) / static_cast<double>(total_updates));
  return {cfg.policy_lr * frac, cfg.inference_lr * frac};
}

MiniBatchGrads ppo_minibatch_gradients(const Agent& agent, const ParamSet& params,
                                       const MiniBatch& mb, const PpoConfig& cfg,
                                       const std::optional<CombinedObjective>& combined,
                                       Rng& noise_rng) {
  const SequenceInputs in = stack_inputs(mb.episodes);
  const RowData rows = stack_rows(mb.episodes);
  Graph g(&params);
  std::optional<Var> noise;
  if (agent.flags().uses_bottleneck()) {
    noise = g.constant(normal_tensor(in.rows(), agent.sizes().latent, noise_rng));
  }
  const ForwardVars fw = agent.forward(g, in, noise);
  const RlTerms rl = rl_loss(g, fw.logits, fw.value, rows, cfg);
  MiniBatchGrads out;
  Var total = rl.total;

  if (combined) {
    if (combined->weight < 0.0 || combined->weight > 1.0) {
      throw TrainingError("combined objective weight must lie in [0, 1]");
    }
    if (agent.flags().uses_bottleneck()) {
      throw TrainingError("combined objective needs an RNN-architecture agent");
    }
    if (combined->use_embedding && !params.contains("multi.g.weight")) {
      throw TrainingError("combined objective with an embedding target needs a task "
                          "embedding table (multi.g)");
    }
    const Tensor labels = stack_labels(mb.episodes, agent.label_width());
    const Tensor target = combined->use_embedding ? task_embedding(params, labels) : labels;
    if (target.cols() > fw.encoding.cols()) {
      throw TrainingError("recurrent state narrower than the inference target");
    }
    Var inf = mean_squared_rows(slice_cols(fw.encoding, 0, target.cols()), g.constant(target));
    total = scale(rl.total, 1.0 - combined->weight) + scale(inf, combined->weight);
    out.report.j_infer = inf.value().item();
  }

  if (agent.flags().uses_bottleneck()) {
    const Tensor labels = stack_labels(mb.episodes, agent.label_width());
    const TransitionTargets tr = stack_targets(mb.episodes, agent.action_count());
    InferenceLosses inf = agent.inference_losses(g, *fw.belief, labels, tr);
    if (!mb.archive.empty()) {
      const SequenceInputs ain = stack_inputs(mb.archive);
      Var anoise = g.constant(normal_tensor(ain.rows(), agent.sizes().latent, noise_rng));
      const BeliefVars ab = agent.encode_belief(g, ain, anoise);
      const InferenceLosses ainf = agent.inference_losses(
          g, ab, stack_labels(mb.archive, agent.label_width()),
          stack_targets(mb.archive, agent.action_count()));
      inf.infer = scale(inf.infer + ainf.infer, 0.5);
      inf.prior = scale(inf.prior + ainf.prior, 0.5);
    }
    total = total + scale(inf.infer, cfg.infer_weight) + scale(inf.prior, cfg.prior_weight);
    out.report.j_infer = inf.infer.value().item();
    out.report.j_prior = inf.prior.value().item();
  }

  out.report.policy_loss = rl.policy_loss.value().item();
  out.report.value_loss = rl.value_loss.value().item();
  out.report.entropy = rl.entropy.value().item();
  check_finite(out.report, "ppo minibatch");
  out.grads = g.backward(total);
  return out;
}

MiniBatchGrads multitask_minibatch_gradients(const Agent& agent, const ParamSet& params,
                                             const MiniBatch& mb, const PpoConfig& cfg) {
  const SequenceInputs in = stack_inputs(mb.episodes);
  const RowData rows = stack_rows(mb.episodes);
  Graph g(&params);
  const Tensor labels = stack_labels(mb.episodes, agent.label_width());
  const Agent::MultiVars mv =
      agent.multitask_forward(g, g.constant(labels), g.constant(in.obs));
  const RlTerms rl = rl_loss(g, mv.logits, mv.value, rows, cfg);
  MiniBatchGrads out;
  out.report.policy_loss = rl.policy_loss.value().item();
  out.report.value_loss = rl.value_loss.value().item();
  out.report.entropy = rl.entropy.value().item();
  check_finite(out.report, "multi-task minibatch");
  out.grads = g.backward(rl.total);
  return out;
}

LossReport ppo_update(const Agent& agent, ParamSet& params, const RolloutBatch& batch,
                      const PpoConfig& cfg, const LearningRates& lr, Optimizers& opt,
                      Rng& rng, const std::vector<MetaEpisode>* archive) {
  const bool mix = agent.flags().reuses() && agent.flags().uses_bottleneck();
  if (mix && (archive == nullptr || archive->empty())) {
    throw TrainingError(std::string(method_name(agent.method())) +
                        " trains inference on the multi-task archive, which is empty");
  }
  auto policy_group = [&](std::string_view n) { return agent.is_policy_param(n); };
  auto inference_group = [&](std::string_view n) { return agent.is_inference_param(n); };
  LossReport acc;
  std::size_t count = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& idx : split_minibatches(batch.episodes.size(), cfg.minibatches, rng)) {
      MiniBatch mb;
      for (std::size_t i : idx) mb.episodes.push_back(&batch.episodes[i]);
      if (mix) {
        const auto picks = inference_batch_source(agent.flags(), mb.episodes.size(),
                                                  archive->size(), 2 * mb.episodes.size(),
                                                  InferenceMixing::Balanced, rng);
        for (const auto& s : picks) {
          if (s.from_multitask) mb.archive.push_back(&(*archive)[s.index]);
        }
      }
      MiniBatchGrads r = ppo_minibatch_gradients(agent, params, mb, cfg, std::nullopt, rng);
      clip_grad_norm(r.grads, cfg.max_grad_norm, policy_group);
      opt.policy.step(params, r.grads, lr.policy, policy_group);
      if (agent.flags().uses_bottleneck()) {
        clip_grad_norm(r.grads, cfg.max_grad_norm, inference_group);
        opt.inference.step(params, r.grads, lr.inference, inference_group);
      }
      accumulate(acc, r.report, 1.0);
      ++count;
    }
  }
  LossReport out;
  accumulate(out, acc, 1.0 / static_cast<double>(count));
  return out;
}

LossReport combined_objective_step(const Agent& agent, ParamSet& params,
                                   const RolloutBatch& batch, const PpoConfig& cfg,
                                   double lr, double weight, bool use_embedding, Adam& opt,
                                   Rng& rng) {
  if (weight < 0.0 || weight > 1.0) {
    throw TrainingError("combined objective weight must lie in [0, 1]");
  }
  auto group = [&](std::string_view n) { return agent.is_policy_param(n); };
  LossReport acc;
  std::size_t count = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& idx : split_minibatches(batch.episodes.size(), cfg.minibatches, rng)) {
      MiniBatch mb;
      for (std::size_t i : idx) mb.episodes.push_back(&batch.episodes[i]);
      MiniBatchGrads r = ppo_minibatch_gradients(
          agent, params, mb, cfg, CombinedObjective{weight, use_embedding}, rng);
      clip_grad_norm(r.grads, cfg.max_grad_norm, group);
      opt.step(params, r.grads, lr, group);
      accumulate(acc, r.report, 1.0);
      ++count;
    }
  }
  LossReport out;
  accumulate(out, acc, 1.0 / static_cast<double>(count));
  return out;
}

LossReport multitask_update(const Agent& agent, ParamSet& params, const RolloutBatch& batch,
                            const PpoConfig& cfg, double lr, Adam& opt, Rng& rng) {
  auto group = [](std::string_view n) { return Agent::is_multitask_param(n); };
  LossReport acc;
  std::size_t count = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& idx : split_minibatches(batch.episodes.size(), cfg.minibatches, rng)) {
      MiniBatch mb;
      for (std::size_t i : idx) mb.episodes.push_back(&batch.episodes[i]);
      MiniBatchGrads r = multitask_minibatch_gradients(agent, params, mb, cfg);
      clip_grad_norm(r.grads, cfg.max_grad_norm, group);
      opt.step(params, r.grads, lr, group);
      accumulate(acc, r.report, 1.0);
      ++count;
    }
  }
  LossReport out;
  accumulate(out, acc, 1.0 / static_cast<double>(count));
  return out;
}

Var policy_surrogate(Graph& g, Var logits, const std::vector<const MetaEpisode*>& episodes,
                     double clip) {
  PpoConfig cfg;
  cfg.clip = clip;
  const RowData rows = stack_rows(episodes);
  return rl_loss(g, logits, g.constant(Tensor({rows.actions.size(), 1})), rows, cfg).policy_loss;
}

// ---- Trainer -------------------------------------------------------------------------

Trainer::Trainer(TrainerConfig cfg)
    : cfg_(std::move(cfg)),
      agent_(cfg_.method, cfg_.env, cfg_.sizes, cfg_.hyper_init),
      params_(agent_.init_params(cfg_.seed)),
      envs_(cfg_.env, cfg_.ppo.num_envs, cfg_.seed),
      opt_(cfg_.ppo.adam_eps) {
  const std::size_t fpu = frames_per_update();
  const std::size_t total = cfg_.budget.total_frames;
  if (total == 0 || total % fpu != 0) {
    throw TrainingError("frame budget " + std::to_string(total) +
                        " is not a positive multiple of the " + std::to_string(fpu) +
                        " frames per update");
  }
  const std::size_t updates = total / fpu;
  if (agent_.flags().multitask_only) {
    pretrain_updates_ = updates;
  } else if (agent_.flags().needs_pretrain()) {
    pretrain_updates_ = cfg_.budget.pretrain_updates;
  }
  if (pretrain_updates_ > updates) {
    throw TrainingError("pretraining budget exceeds the total frame budget");
  }
  if (agent_.flags().reuses() && pretrain_updates_ == 0) {
    throw TrainingError(std::string(method_name(cfg_.method)) +
                        " needs a multi-task pretraining budget (its inference "
                        "training uses the multi-task archive)");
  }
  if (cfg_.combined && agent_.flags().uses_bottleneck()) {
    throw TrainingError("combined objective needs an RNN-architecture method");
  }
  meta_updates_ = updates - pretrain_updates_;
}

std::size_t Trainer::frames_per_update() const {
  return cfg_.ppo.num_envs * envs_.meta_length();
}

void Trainer::finish_pretrain() {
  if (handed_off_) return;
  handed_off_ = true;
  if (!agent_.flags().needs_pretrain() || agent_.flags().multitask_only) return;
  artifacts_.params = ParamSet();
  for (const auto& [name, value] : params_) {
    if (Agent::is_multitask_param(name)) artifacts_.params.add(name, value);
  }
  reuse_initialize(agent_, params_, derive_seed(cfg_.seed, 0, kCriticSalt));
}

const MultiTaskArtifacts& Trainer::pretrain_multitask() {
  while (update_ < pretrain_updates_) step();
  finish_pretrain();
  return artifacts_;
}

UpdateRecord Trainer::step() {
  if (finished()) throw TrainingError("training already finished");
  envs_.reseed(derive_seed(cfg_.seed, update_, kEnvSalt));
  rng_.seed(derive_seed(cfg_.seed, update_, kUpdateSalt));
  const LearningRates lr = lr_schedule(cfg_.ppo, update_, total_updates());
  UpdateRecord rec;
  rec.update = update_;
  if (update_ < pretrain_updates_) {
    RolloutBatch batch = collect_multitask_rollouts(agent_, params_, envs_);
    if (cfg_.ppo.normalize_rewards) scaler_.update(batch, cfg_.ppo.gamma);
    compute_batch_gae(batch, cfg_.ppo.gamma, cfg_.ppo.lambda,
                      cfg_.ppo.normalize_rewards ? scaler_.reward_scale() : 1.0);
    rec.mean_return = batch.mean_return();
    normalize_advantages(batch);
    if (cfg_.probe) rec.latent_grad_norm = latent_grad_norm(agent_, params_, batch, cfg_.ppo).value;
    rec.losses = multitask_update(agent_, params_, batch, cfg_.ppo, lr.policy, opt_.multitask, rng_);
    rec.pretrain = true;
    frames_ += batch.frames();
    artifacts_.frames += batch.frames();
    if (agent_.flags().reuses()) {
      for (auto& ep : batch.episodes) artifacts_.archive.push_back(std::move(ep));
    }
  } else {
    finish_pretrain();
    RolloutBatch batch = collect_rollouts(agent_, params_, envs_);
    if (cfg_.ppo.normalize_rewards) scaler_.update(batch, cfg_.ppo.gamma);
    compute_batch_gae(batch, cfg_.ppo.gamma, cfg_.ppo.lambda,
                      cfg_.ppo.normalize_rewards ? scaler_.reward_scale() : 1.0);
    rec.mean_return = batch.mean_return();
    normalize_advantages(batch);
    if (cfg_.probe) rec.latent_grad_norm = latent_grad_norm(agent_, params_, batch, cfg_.ppo).value;
    if (cfg_.combined) {
      rec.losses = combined_objective_step(agent_, params_, batch, cfg_.ppo, lr.policy,
                                           cfg_.combined->weight,
                                           cfg_.combined->use_embedding, opt_.policy, rng_);
    } else {
      rec.losses = ppo_update(agent_, params_, batch, cfg_.ppo, lr, opt_, rng_,
                              &artifacts_.archive);
    }
    frames_ += batch.frames();
  }
  check_finite(rec.losses, "update");
  ++update_;
  if (update_ == pretrain_updates_) finish_pretrain();
  rec.frames = frames_;
  return rec;
}

void Trainer::restore(ParamSet params, std::size_t update, std::size_t frames,
                      std::vector<MetaEpisode> archive) {
  if (update > total_updates() || frames != update * frames_per_update()) {
    throw TrainingError("checkpoint counters do not match this configuration");
  }
  for (const auto& [name, value] : params_) {
    if (!params.contains(name) || params.at(name).shape != value.shape) {
      throw TrainingError("checkpoint lacks parameter '" + name + "' or has a different shape");
    }
  }
  params_ = std::move(params);
  update_ = update;
  frames_ = frames;
  artifacts_.archive = std::move(archive);
  artifacts_.frames = std::min(update, pretrain_updates_) * frames_per_update();
  handed_off_ = update_ >= pretrain_updates_ && update_ > 0;
  if (handed_off_) {
    artifacts_.params = ParamSet();
    for (const auto& [name, value] : params_) {
      if (Agent::is_multitask_param(name)) artifacts_.params.add(name, value);
    }
  }
}

Evaluation evaluate_greedy(const Agent& agent, const ParamSet& params, std::size_t count,
                           std::uint64_t seed) {
  const std::size_t chunk = 100;
  Evaluation ev;
  std::size_t done = 0, correct = 0;
  double total = 0.0;
  const std::size_t L = agent.sizes().latent;
  std::size_t round = 0;
  while (done < count) {
    const std::size_t n = std::min(chunk, count - done);
    VecEnv envs(agent.env(), n, derive_seed(seed, round++, kEnvSalt));
    RolloutBatch batch;
    if (agent.flags().multitask_only) {
      batch = run_meta_episodes(
          envs, agent.action_count(), 1,
          [&](const Tensor& obs, const Tensor&, const Tensor&, const Tensor&, const Tensor&,
              const Tensor& labels) { return agent.multitask_act(params, labels, obs); },
          true);
    } else {
      batch = run_meta_episodes(
          envs, agent.action_count(), agent.sizes().gru_hidden,
          [&](const Tensor& obs, const Tensor& pa, const Tensor& pr, const Tensor& pd,
              const Tensor& state, const Tensor&) {
            return agent.act(params, obs, pa, pr, pd, state, Tensor({obs.rows(), L}));
          },
          true);
    }
    for (const auto& ep : batch.episodes) {
      total += ep.total_reward();
      if (agent.env() == EnvKind::MemoryCorridor) {
        const std::size_t last = ep.steps() - 1;
        correct += ep.actions[last] == static_cast<int>(ep.task);
      }
    }
    done += n;
  }
  ev.mean_return = total / static_cast<double>(count);
  ev.final_choice_accuracy = static_cast<double>(correct) / static_cast<double>(count);
  return ev;
}

}  // namespace metarl
