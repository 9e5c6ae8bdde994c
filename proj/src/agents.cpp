#include "metarl/agents.hpp"

#include <algorithm>
#include <cmath>

namespace metarl {

namespace {

constexpr std::string_view kNames[] = {
    "RNN", "RNN+S", "RNN+HN", "TI-Naive", "TI",      "TI++",    "TI+HN",
    "TI++HN", "VI", "VI+HN", "BI++HN", "Multi", "Multi+HN"};

bool starts_with(std::string_view s, std::string_view p) {
  return s.substr(0, p.size()) == p;
}

Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

std::vector<std::size_t> step_rows(std::size_t t, std::size_t batch) {
  std::vector<std::size_t> idx(batch);
  for (std::size_t b = 0; b < batch; ++b) idx[b] = t * batch + b;
  return idx;
}

void check_one_hot(const Tensor& labels) {
  for (std::size_t r = 0; r < labels.rows(); ++r) {
    int hot = 0;
    for (std::size_t c = 0; c < labels.cols(); ++c) {
      const double v = labels(r, c);
      if (v == 1.0) {
        ++hot;
      } else if (v != 0.0) {
        hot = -1;
        break;
      }
    }
    if (hot != 1) {
      throw AgentError("unknown task label at row " + std::to_string(r) +
                       " (expected a one-hot row)");
    }
  }
}

Tensor gather_tensor_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  Tensor out({idx.size(), t.cols()});
  const std::size_t w = t.cols();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(idx[r] * w), w,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return out;
}

}  // namespace

std::string_view method_name(Method m) { return kNames[static_cast<std::size_t>(m)]; }

Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  std::string known;
  for (Method m : kAllMethods) {
    if (!known.empty()) known += ", ";
    known += method_name(m);
  }
  throw AgentError("unknown method '" + std::string(name) + "' (expected one of " +
                   known + ")");
}

MethodFlags method_flags(Method m) {
  using T = InferenceTarget;
  using P = MultiTaskPhase;
  switch (m) {
    case Method::Rnn:
      return {T::None, false, false, P::NotApplicable, false};
    case Method::RnnS:
      return {T::None, true, false, P::NotApplicable, false};
    case Method::RnnHn:
      return {T::None, true, true, P::NotApplicable, false};
    case Method::TiNaive:
      return {T::Given, true, false, P::NotApplicable, false};
    case Method::Ti:
      return {T::Learned, true, false, P::PretrainOnly, false};
    case Method::TiPlusPlus:
      return {T::Learned, true, false, P::PretrainAndReuse, false};
    case Method::TiHn:
      return {T::Learned, true, true, P::PretrainOnly, false};
    case Method::TiPlusPlusHn:
      return {T::Learned, true, true, P::PretrainAndReuse, false};
    case Method::Vi:
      return {T::Transitions, true, false, P::NotApplicable, false};
    case Method::ViHn:
      return {T::Transitions, true, true, P::NotApplicable, false};
    case Method::BiPlusPlusHn:
      return {T::BaseNet, true, true, P::PretrainAndReuse, false};
    case Method::Multi:
      return {T::None, true, false, P::PretrainOnly, true};
    case Method::MultiHn:
      return {T::None, true, true, P::PretrainOnly, true};
  }
  throw AgentError("unhandled method");
}

// ---- Agent ----------------------------------------------------------------------

Agent::Agent(Method method, EnvKind env, AgentSizes sizes, HyperInit init)
    : method_(method),
      flags_(method_flags(method)),
      env_(env),
      sizes_(std::move(sizes)),
      init_(init) {
  Env probe(env);
  obs_width_ = probe.observation_width();
  actions_ = probe.action_count();
  label_width_ = task_label_width(env);

  if (flags_.needs_pretrain() && sizes_.projection != sizes_.task_embedding &&
      !flags_.multitask_only) {
    throw AgentError("projection width must equal the task-embedding width so the "
                     "multi-task policy can be reused");
  }
  gru_ = {gru_input(), sizes_.gru_hidden};

  std::size_t latent_width = flags_.uses_bottleneck() ? sizes_.projection : sizes_.gru_hidden;
  if (flags_.multitask_only) latent_width = sizes_.task_embedding;

  policy_.hidden = sizes_.policy_hidden;
  policy_.output = actions_;
  policy_.head = HeadKind::CategoricalLogits;
  if (flags_.hypernetwork) {
    policy_.input = sizes_.policy_embed;
    hyper_.latent = latent_width;
    hyper_.hidden = sizes_.hyper_hidden;
    hyper_.target = policy_;
    hyper_.validate();
  } else if (flags_.conditions_on_state) {
    policy_.input = sizes_.policy_embed + latent_width;
  } else {
    policy_.input = latent_width;
  }
  policy_.validate();

  critic_.input = sizes_.critic_embed + latent_width;
  critic_.hidden = sizes_.critic_hidden;
  critic_.output = 1;
  critic_.head = HeadKind::ValueScalar;

  bottleneck_ = {sizes_.gru_hidden, sizes_.latent, sizes_.projection};

  decoder_.input = sizes_.latent + obs_width_ + actions_;
  decoder_.hidden = sizes_.decoder_hidden;
  decoder_.output = obs_width_ + 1;
  decoder_.head = HeadKind::CategoricalLogits;
}

std::size_t Agent::gru_input() const {
  return sizes_.state_embed + sizes_.action_embed + sizes_.reward_embed + 1;
}

ParamSet Agent::init_params(std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet ps;
  auto add_policy = [&](const std::string& root) {
    if (flags_.conditions_on_state) {
      init_linear(ps, root + "policy.embed", obs_width_, sizes_.policy_embed, rng,
                  std::sqrt(2.0));
    }
    if (flags_.hypernetwork) {
      init_hypernet(ps, root + "policy.hyper", hyper_, init_, rng);
    } else {
      init_mlp(ps, root + "policy.mlp", policy_, rng);
    }
    init_linear(ps, root + "critic.embed", obs_width_, sizes_.critic_embed, rng,
                std::sqrt(2.0));
    init_mlp(ps, root + "critic.mlp", critic_, rng);
  };

  if (!flags_.multitask_only) {
    init_linear(ps, "enc.state", obs_width_, sizes_.state_embed, rng, std::sqrt(2.0));
    init_linear(ps, "enc.action", actions_, sizes_.action_embed, rng, std::sqrt(2.0));
    init_linear(ps, "enc.reward", 1, sizes_.reward_embed, rng, std::sqrt(2.0));
    init_gru(ps, "enc.gru", gru_, rng);
    if (flags_.uses_bottleneck()) {
      init_bottleneck(ps, bottleneck_, rng);
      switch (flags_.target) {
        case InferenceTarget::Given:
          init_linear(ps, std::string(projection_prefix(Projection::TaskLabel)),
                      sizes_.latent, label_width_, rng, 1.0);
          break;
        case InferenceTarget::Learned:
          init_linear(ps, std::string(projection_prefix(Projection::TaskEmbedding)),
                      sizes_.latent, sizes_.task_embedding, rng, 1.0);
          break;
        case InferenceTarget::BaseNet:
          init_linear(ps, std::string(projection_prefix(Projection::BaseParams)),
                      sizes_.latent, hyper_.output_width(), rng, 1.0);
          break;
        case InferenceTarget::Transitions:
          init_mlp(ps, "decoder", decoder_, rng);
          break;
        case InferenceTarget::None:
          break;
      }
    }
    add_policy("");
  }
  if (flags_.needs_pretrain()) {
    init_linear(ps, "multi.g", label_width_, sizes_.task_embedding, rng, 1.0);
    add_policy("multi.");
  }
  return ps;
}

void Agent::reinit_critic(ParamSet& params, std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet fresh;
  init_linear(fresh, "critic.embed", obs_width_, sizes_.critic_embed, rng, std::sqrt(2.0));
  init_mlp(fresh, "critic.mlp", critic_, rng);
  params.assign_prefix(fresh, "critic.");
}

bool Agent::is_policy_param(std::string_view name) const {
  if (is_multitask_param(name)) return false;
  if (starts_with(name, "policy.") || starts_with(name, "critic.")) return true;
  if (!flags_.uses_bottleneck()) return starts_with(name, "enc.");
  return starts_with(name, projection_prefix(Projection::Phi)) &&
         !starts_with(name, projection_prefix(Projection::BaseParams));
}

bool Agent::is_inference_param(std::string_view name) const {
  if (!flags_.uses_bottleneck() || is_multitask_param(name)) return false;
  return !is_policy_param(name);
}

bool Agent::is_multitask_param(std::string_view name) { return starts_with(name, "multi."); }

Var Agent::encode_inputs(Graph& g, Var obs, Var prev_action, Var prev_reward,
                         Var prev_done) const {
  Var s = relu(apply_linear(g, "enc.state", obs));
  Var a = relu(apply_linear(g, "enc.action", prev_action));
  Var r = relu(apply_linear(g, "enc.reward", prev_reward));
  return concat_cols({s, a, r, prev_done});
}

Agent::Heads Agent::heads(Graph& g, const std::string& root, Var latent, Var obs) const {
  Heads out;
  Var embed;
  if (flags_.conditions_on_state) embed = relu(apply_linear(g, root + "policy.embed", obs));
  if (flags_.hypernetwork) {
    const HypernetVars hv = hypernet_generate(g, root + "policy.hyper", hyper_, latent);
    out.hyper_hidden = hv.first_hidden;
    out.logits = mlp_forward_generated(g, policy_, hv.generated, embed);
  } else if (flags_.conditions_on_state) {
    out.logits = mlp_forward(g, root + "policy.mlp", policy_, concat_cols({embed, latent}));
  } else {
    out.logits = mlp_forward(g, root + "policy.mlp", policy_, latent);
  }
  Var critic_embed = relu(apply_linear(g, root + "critic.embed", obs));
  out.value = mlp_forward(g, root + "critic.mlp", critic_, concat_cols({critic_embed, latent}));
  return out;
}

Var Agent::policy_logits(Graph& g, Var latent, Var obs, bool multitask) const {
  return heads(g, multitask ? "multi." : "", latent, obs).logits;
}

ActOutput Agent::act(const ParamSet& params, const Tensor& obs, const Tensor& prev_action,
                     const Tensor& prev_reward, const Tensor& prev_done,
                     const Tensor& state, const Tensor& noise) const {
  if (flags_.multitask_only) throw AgentError("multi-task agents act through multitask_act");
  if (obs.cols() != obs_width_) {
    throw AgentError("observation width " + std::to_string(obs.cols()) + " != " +
                     std::to_string(obs_width_));
  }
  if (state.cols() != sizes_.gru_hidden || state.rows() != obs.rows()) {
    throw AgentError("recurrent state must be [batch, " +
                     std::to_string(sizes_.gru_hidden) + "]");
  }
  Graph g(&params, false);
  Var x = encode_inputs(g, g.constant(obs), g.constant(prev_action),
                        g.constant(prev_reward), g.constant(prev_done));
  Var h = gru_step(g, "enc.gru", gru_, g.constant(state), x);
  ActOutput out;
  Var latent = h;
  if (flags_.uses_bottleneck()) {
    const BeliefVars b = bottleneck_forward(g, bottleneck_, h, g.constant(noise));
    latent = b.projected;
    out.belief = LatentBelief{b.mu.value(), b.sigma.value(), b.z.value(),
                              b.projected.value()};
  }
  const Heads hd = heads(g, "", latent, g.constant(obs));
  out.probs = to_vector(softmax_rows(hd.logits).value().data);
  out.values = to_vector(hd.value.value().data);
  out.next_state = h.value();
  return out;
}

ForwardVars Agent::forward(Graph& g, const SequenceInputs& in,
                           std::optional<Var> noise) const {
  if (flags_.multitask_only) throw AgentError("multi-task agents have no recurrent path");
  if (in.obs.rows() != in.rows()) throw AgentError("sequence inputs have inconsistent rows");
  Var x = encode_inputs(g, g.constant(in.obs), g.constant(in.prev_action),
                        g.constant(in.prev_reward), g.constant(in.prev_done));
  Var h = g.constant(zeros(in.batch, sizes_.gru_hidden));
  std::vector<Var> hs;
  hs.reserve(in.steps);
  for (std::size_t t = 0; t < in.steps; ++t) {
    const auto idx = step_rows(t, in.batch);
    h = gru_step(g, "enc.gru", gru_, h, gather_rows(x, idx));
    hs.push_back(h);
  }
  ForwardVars out;
  out.encoding = concat_rows(hs);
  out.policy_latent = out.encoding;
  if (flags_.uses_bottleneck()) {
    Var n = noise ? *noise : g.constant(zeros(in.rows(), sizes_.latent));
    out.belief = bottleneck_forward(g, bottleneck_, out.encoding, n);
    out.policy_latent = out.belief->projected;
  }
  const Heads hd = heads(g, "", out.policy_latent, g.constant(in.obs));
  out.logits = hd.logits;
  out.value = hd.value;
  out.hyper_hidden = hd.hyper_hidden;
  return out;
}

BeliefVars Agent::encode_belief(Graph& g, const SequenceInputs& in, Var noise) const {
  if (!flags_.uses_bottleneck()) throw AgentError("agent has no bottleneck");
  Var x = encode_inputs(g, g.constant(in.obs), g.constant(in.prev_action),
                        g.constant(in.prev_reward), g.constant(in.prev_done));
  Var h = g.constant(zeros(in.batch, sizes_.gru_hidden));
  std::vector<Var> hs;
  for (std::size_t t = 0; t < in.steps; ++t) {
    h = gru_step(g, "enc.gru", gru_, h, gather_rows(x, step_rows(t, in.batch)));
    hs.push_back(h);
  }
  return bottleneck_forward(g, bottleneck_, concat_rows(hs), noise);
}

Agent::MultiVars Agent::multitask_forward(Graph& g, Var labels, Var obs) const {
  if (!flags_.needs_pretrain()) throw AgentError("agent has no multi-task policy");
  MultiVars out;
  out.embedding = apply_linear(g, "multi.g", labels);
  const Heads hd = heads(g, "multi.", out.embedding, obs);
  out.logits = hd.logits;
  out.value = hd.value;
  out.hyper_hidden = hd.hyper_hidden;
  return out;
}

ActOutput Agent::multitask_act(const ParamSet& params, const Tensor& labels,
                               const Tensor& obs) const {
  check_one_hot(labels);
  Graph g(&params, false);
  const MultiVars mv = multitask_forward(g, g.constant(labels), g.constant(obs));
  ActOutput out;
  out.probs = to_vector(softmax_rows(mv.logits).value().data);
  out.values = to_vector(mv.value.value().data);
  return out;
}

InferenceLosses Agent::inference_losses(Graph& g, const BeliefVars& belief,
                                        const Tensor& labels,
                                        const TransitionTargets& transitions) const {
  InferenceLosses out;
  switch (flags_.target) {
    case InferenceTarget::Given:
      return ti_naive_losses(g, belief, labels);
    case InferenceTarget::Learned:
      out.infer = ti_losses(g, belief, labels, *g.params());
      break;
    case InferenceTarget::Transitions:
      out.infer = vi_losses(g, decoder_, belief.z, transitions);
      break;
    case InferenceTarget::BaseNet:
      out.infer = bi_losses(g, belief, labels, *g.params(), hyper_);
      break;
    case InferenceTarget::None:
      throw AgentError("agent has no inference target");
  }
  out.prior = mean(kl_to_standard_normal(belief.mu, belief.sigma));
  return out;
}

// ---- Losses ----------------------------------------------------------------------------

Var mean_squared_rows(Var prediction, Var target) {
  if (prediction.value().shape != target.value().shape) {
    throw ShapeError("mean_squared_rows: prediction " +
                     shape_string(prediction.value().shape) + " vs target " +
                     shape_string(target.value().shape));
  }
  return scale(sum(square(prediction - target)),
               1.0 / static_cast<double>(prediction.rows()));
}

InferenceLosses ti_naive_losses(Graph& g, const BeliefVars& belief, const Tensor& labels) {
  check_one_hot(labels);
  Var c_hat = linear_project(g, Projection::TaskLabel, belief.z);
  return {mean_squared_rows(c_hat, g.constant(labels)),
          mean(kl_to_standard_normal(belief.mu, belief.sigma))};
}

Tensor task_embedding(const ParamSet& params, const Tensor& labels) {
  check_one_hot(labels);
  Graph g(&params, false);
  return apply_linear(g, "multi.g", g.constant(labels)).value();
}

Var ti_losses(Graph& g, const BeliefVars& belief, const Tensor& labels,
              const ParamSet& params) {
  Var g_hat = linear_project(g, Projection::TaskEmbedding, belief.z);
  return mean_squared_rows(g_hat, g.constant(task_embedding(params, labels)));
}

Var vi_losses(Graph& g, const MlpSpec& decoder, Var z, const TransitionTargets& tr,
              bool future_masked) {
  const std::size_t T = tr.steps, B = tr.batch;
  if (z.rows() != T * B) throw ShapeError("vi_losses: latent rows do not match the sequence");
  std::vector<std::size_t> z_idx, s_idx;
  z_idx.reserve(B * T * T);
  s_idx.reserve(B * T * T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < T; ++i) {
        if (future_masked && i > t) continue;
        z_idx.push_back(t * B + b);
        s_idx.push_back(i * B + b);
      }
    }
  }
  Var input = concat_cols({gather_rows(z, z_idx),
                           g.constant(gather_tensor_rows(tr.obs, s_idx)),
                           g.constant(gather_tensor_rows(tr.action, s_idx))});
  if (input.cols() != decoder.input) throw ShapeError("vi_losses: decoder input width");
  Var out = mlp_forward(g, "decoder", decoder, input);
  const Tensor target = concat_cols({g.constant(gather_tensor_rows(tr.next_obs, s_idx)),
                                     g.constant(gather_tensor_rows(tr.reward, s_idx))})
                            .value();
  return mean_squared_rows(out, g.constant(target));
}

Var bi_losses(Graph& g, const BeliefVars& belief, const Tensor& labels,
              const ParamSet& params, const HypernetSpec& multitask_hyper) {
  const Tensor emb = task_embedding(params, labels);
  const GeneratedParams phi = hypernet_generate(multitask_hyper, params, "multi.policy.hyper", emb);
  if (phi.width() != multitask_hyper.output_width()) {
    throw AgentError("multi-task hypernetwork emits " + std::to_string(phi.width()) +
                     " parameters but the base-net spec needs " +
                     std::to_string(multitask_hyper.output_width()));
  }
  Var phi_hat = linear_project(g, Projection::BaseParams, belief.z);
  if (phi_hat.cols() != phi.width()) {
    throw AgentError("base-parameter projection width " + std::to_string(phi_hat.cols()) +
                     " != generated parameter count " + std::to_string(phi.width()));
  }
  return mean_squared_rows(phi_hat, g.constant(phi.flat));
}

// ---- Reuse and inference batches -----------------------------------------------------

void reuse_initialize(const Agent& agent, ParamSet& params, std::uint64_t critic_seed) {
  if (!agent.flags().reuses()) return;
  for (const auto& [name, value] : params) {
    if (!starts_with(name, "multi.policy.")) continue;
    const std::string target = name.substr(6);
    if (!params.contains(target)) {
      throw AgentError("reuse: meta policy has no parameter '" + target + "'");
    }
    if (params.at(target).shape != value.shape) {
      throw AgentError("reuse: shape mismatch for '" + target + "': " +
                       shape_string(params.at(target).shape) + " vs " +
                       shape_string(value.shape));
    }
  }
  std::vector<std::pair<std::string, Tensor>> copies;
  for (const auto& [name, value] : params) {
    if (starts_with(name, "multi.policy.")) copies.emplace_back(name.substr(6), value);
  }
  for (auto& [name, value] : copies) params.at(name) = std::move(value);
  agent.reinit_critic(params, critic_seed);
}

std::vector<InferenceSample> inference_batch_source(const MethodFlags& flags,
                                                    std::size_t meta_records,
                                                    std::size_t multitask_records,
                                                    std::size_t count,
                                                    InferenceMixing mixing, Rng& rng) {
  if (meta_records == 0) throw AgentError("inference batch: meta buffer is empty");
  std::vector<InferenceSample> out;
  out.reserve(count);
  if (!flags.reuses()) {
    std::uniform_int_distribution<std::size_t> pick(0, meta_records - 1);
    for (std::size_t i = 0; i < count; ++i) out.push_back({false, pick(rng)});
    return out;
  }
  if (multitask_records == 0) {
    throw AgentError("inference batch: ++ variants need the multi-task archive, which is "
                     "empty (pretrain budget 0?)");
  }
  if (mixing == InferenceMixing::Union) {
    std::uniform_int_distribution<std::size_t> pick(0, meta_records + multitask_records - 1);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t k = pick(rng);
      out.push_back(k < meta_records ? InferenceSample{false, k}
                                     : InferenceSample{true, k - meta_records});
    }
    return out;
  }
  std::uniform_int_distribution<std::size_t> pick_meta(0, meta_records - 1);
  std::uniform_int_distribution<std::size_t> pick_multi(0, multitask_records - 1);
  for (std::size_t i = 0; i < count; ++i) {
    if (i % 2 == 0) {
      out.push_back({false, pick_meta(rng)});
    } else {
      out.push_back({true, pick_multi(rng)});
    }
  }
  return out;
}

Tensor one_hot_rows(const std::vector<int>& index, std::size_t width) {
  Tensor out({index.size(), width});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= width) {
      throw AgentError("one-hot index out of range");
    }
    out(r, static_cast<std::size_t>(index[r])) = 1.0;
  }
  return out;
}

}  // namespace metarl
