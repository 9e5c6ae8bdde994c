#include <doctest.h>

#include <cmath>
#include <map>

#include "metarl/agents.hpp"
#include "metarl/trainer.hpp"

using namespace metarl;

namespace {

AgentSizes tiny() {
  AgentSizes s;
  s.state_embed = 6;
  s.action_embed = 4;
  s.reward_embed = 3;
  s.gru_hidden = 8;
  s.policy_embed = 5;
  s.policy_hidden = {7, 6};
  s.hyper_hidden = {9};
  s.critic_embed = 5;
  s.critic_hidden = {6};
  s.latent = 4;
  s.projection = 3;
  s.task_embedding = 3;
  s.decoder_hidden = {5};
  return s;
}

RolloutBatch rollout(const Agent& agent, const ParamSet& params, std::size_t envs,
                     std::uint64_t seed) {
  VecEnv v(agent.env(), envs, seed);
  RolloutBatch b = collect_rollouts(agent, params, v);
  compute_batch_gae(b, 0.99, 0.95);
  normalize_advantages(b);
  return b;
}

std::vector<const MetaEpisode*> pointers(const RolloutBatch& b) {
  std::vector<const MetaEpisode*> out;
  for (const auto& e : b.episodes) out.push_back(&e);
  return out;
}

ActOutput act_after(const Agent& agent, const ParamSet& params,
                    const std::vector<std::vector<double>>& history,
                    const std::vector<double>& current) {
  const std::size_t A = agent.action_count();
  Tensor state({1, agent.sizes().gru_hidden});
  Tensor pa({1, A}), pr({1, 1}), pd({1, 1});
  Tensor noise({1, agent.sizes().latent});
  for (const auto& obs : history) {
    ActOutput o = agent.act(params, Tensor({1, obs.size()}, obs), pa, pr, pd, state, noise);
    state = o.next_state;
    pa = Tensor({1, A});
    pa.data[1] = 1.0;
    pr.data[0] = -0.1;
  }
  return agent.act(params, Tensor({1, current.size()}, current), pa, pr, pd, state, noise);
}

}  // namespace

TEST_CASE("component table: every method's flags") {
  using T = InferenceTarget;
  using P = MultiTaskPhase;
  const std::map<std::string, MethodFlags> table{
      {"RNN", {T::None, false, false, P::NotApplicable, false}},
      {"RNN+S", {T::None, true, false, P::NotApplicable, false}},
      {"RNN+HN", {T::None, true, true, P::NotApplicable, false}},
      {"TI-Naive", {T::Given, true, false, P::NotApplicable, false}},
      {"TI", {T::Learned, true, false, P::PretrainOnly, false}},
      {"TI++", {T::Learned, true, false, P::PretrainAndReuse, false}},
      {"TI+HN", {T::Learned, true, true, P::PretrainOnly, false}},
      {"TI++HN", {T::Learned, true, true, P::PretrainAndReuse, false}},
      {"VI", {T::Transitions, true, false, P::NotApplicable, false}},
      {"VI+HN", {T::Transitions, true, true, P::NotApplicable, false}},
      {"BI++HN", {T::BaseNet, true, true, P::PretrainAndReuse, false}},
      {"Multi+HN", {T::None, true, true, P::PretrainOnly, true}},
  };
  for (const auto& [name, flags] : table) {
    CAPTURE(name);
    const Method m = parse_method(name);
    CHECK(method_name(m) == name);
    CHECK(method_flags(m) == flags);
  }
  CHECK_THROWS_AS(parse_method("RNN+XL"), AgentError);
}

TEST_CASE("bias-hyperinit: different histories give identical action distributions") {
  for (Method m : {Method::RnnHn, Method::TiHn, Method::TiPlusPlusHn, Method::ViHn,
                   Method::BiPlusPlusHn}) {
    CAPTURE(method_name(m));
    Agent agent(m, EnvKind::Grid, tiny());
    const ParamSet ps = agent.init_params(4);
    const ActOutput a = act_after(agent, ps, {{0.0, 0.0}, {0.25, 0.0}}, {0.5, 0.5});
    const ActOutput b = act_after(agent, ps, {{0.0, 0.0}, {0.0, 0.25}, {0.0, 0.5}}, {0.5, 0.5});
    CHECK(a.probs == b.probs);
    double sum = 0.0;
    for (double p : a.probs) sum += p;
    CHECK(sum == doctest::Approx(1.0));
  }
}

TEST_CASE("kaiming hypernet: different histories change the distribution") {
  Agent agent(Method::RnnHn, EnvKind::Grid, tiny(), HyperInit::Kaiming);
  const ParamSet ps = agent.init_params(4);
  const ActOutput a = act_after(agent, ps, {{0.0, 0.0}, {0.25, 0.0}}, {0.5, 0.5});
  const ActOutput b = act_after(agent, ps, {{0.0, 0.0}, {0.0, 0.25}}, {0.5, 0.5});
  CHECK(a.probs != b.probs);
}

TEST_CASE("RNN policy sees the state only through the latent") {
  Agent rnn(Method::Rnn, EnvKind::Grid, tiny());
  Agent rnns(Method::RnnS, EnvKind::Grid, tiny());
  const ParamSet p1 = rnn.init_params(2), p2 = rnns.init_params(2);
  Rng rng(1);
  std::normal_distribution<double> d;
  Tensor latent({1, 8});
  for (double& v : latent.data) v = d(rng);
  auto logits = [&](const Agent& a, const ParamSet& p, std::vector<double> obs) {
    Graph g(&p, false);
    return a.policy_logits(g, g.constant(latent), g.constant(Tensor({1, 2}, obs))).value().data;
  };
  CHECK(logits(rnn, p1, {0.0, 0.0}) == logits(rnn, p1, {1.0, 0.75}));
  CHECK(logits(rnns, p2, {0.0, 0.0}) != logits(rnns, p2, {1.0, 0.75}));
}

TEST_CASE("acting path carries no task label") {
  // Two tasks, identical observation histories: the meta policy cannot tell
  // them apart because act() has no label input.
  Agent agent(Method::TiNaive, EnvKind::Grid, tiny());
  const ParamSet ps = agent.init_params(8);
  const ActOutput a = act_after(agent, ps, {{0.0, 0.0}}, {0.25, 0.0});
  const ActOutput b = act_after(agent, ps, {{0.0, 0.0}}, {0.25, 0.0});
  CHECK(a.probs == b.probs);
  CHECK(a.belief.has_value());
  CHECK(a.belief->projected.cols() == 3);
}

TEST_CASE("golden forward: RNN+HN with Kaiming init, fixed seed") {
  Agent agent(Method::RnnHn, EnvKind::Grid, tiny(), HyperInit::Kaiming);
  const ParamSet ps = agent.init_params(2024);
  const ActOutput o = act_after(agent, ps, {{0.0, 0.0}, {0.25, 0.0}}, {0.25, 0.25});
  // Regression snapshot of the current implementation.
  const std::vector<double> golden{0.38439832219320613, 0.18811511644508325,
                                   0.13542764454942333, 0.16593928598800864,
                                   0.12611963082427863};
  REQUIRE(o.probs.size() == golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) {
    CHECK(o.probs[i] == doctest::Approx(golden[i]).epsilon(1e-12));
  }
}

TEST_CASE("golden forward: multi-task policy, fixed seed") {
  Agent agent(Method::MultiHn, EnvKind::Grid, tiny(), HyperInit::Kaiming);
  const ParamSet ps = agent.init_params(77);
  Tensor label({1, 25});
  label.data[7] = 1.0;
  const ActOutput o = agent.multitask_act(ps, label, Tensor({1, 2}, {0.5, 0.25}));
  // Regression snapshot of the current implementation.
  const std::vector<double> golden{0.17673427134217698, 0.1680764758280732,
                                   0.21876789364923033, 0.21028030119977376,
                                   0.22614105798074588};
  REQUIRE(o.probs.size() == golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) {
    CHECK(o.probs[i] == doctest::Approx(golden[i]).epsilon(1e-12));
  }
}

TEST_CASE("multi-task policy: equal embeddings give equal distributions") {
  Agent agent(Method::MultiHn, EnvKind::Grid, tiny(), HyperInit::Kaiming);
  ParamSet ps = agent.init_params(3);
  Tensor& w = ps.at("multi.g.weight");  // [emb, tasks]
  for (std::size_t r = 0; r < w.rows(); ++r) w(r, 4) = w(r, 9);
  Tensor l1({1, 25}), l2({1, 25});
  l1.data[4] = 1.0;
  l2.data[9] = 1.0;
  const Tensor obs({1, 2}, {0.25, 0.5});
  CHECK(agent.multitask_act(ps, l1, obs).probs == agent.multitask_act(ps, l2, obs).probs);
  l2.data[9] = 0.5;
  CHECK_THROWS_AS(agent.multitask_act(ps, l2, obs), AgentError);
}

TEST_CASE("multi-task objective trains the task embedding") {
  Agent agent(Method::MultiHn, EnvKind::Grid, tiny(), HyperInit::Kaiming);
  const ParamSet ps = agent.init_params(3);
  VecEnv envs(EnvKind::Grid, 4, 5);
  RolloutBatch b = collect_multitask_rollouts(agent, ps, envs);
  compute_batch_gae(b, 0.99, 0.95);
  normalize_advantages(b);
  MiniBatch mb;
  mb.episodes = pointers(b);
  const MiniBatchGrads r = multitask_minibatch_gradients(agent, ps, mb, PpoConfig{});
  double norm = 0.0;
  for (double v : r.grads.at("multi.g.weight").data) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("TI naive losses") {
  Agent agent(Method::TiNaive, EnvKind::Grid, tiny());
  ParamSet ps = agent.init_params(1);
  Tensor label({1, 25});
  label.data[6] = 1.0;
  for (const char* p : {"proj_mu", "proj_sigma", "proj_c"}) {
    for (double& v : ps.at(std::string(p) + ".weight").data) v = 0.0;
    for (double& v : ps.at(std::string(p) + ".bias").data) v = 0.0;
  }
  ps.at("proj_c.bias") = Tensor({25}, to_vector(label.data));
  auto losses = [&] {
    Graph g(&ps, false);
    Tensor enc({1, 8}, 0.3);
    const BeliefVars b = bottleneck_forward(g, agent.bottleneck_spec(), g.constant(enc),
                                            g.constant(Tensor({1, 4}, 0.7)));
    const InferenceLosses l = ti_naive_losses(g, b, label);
    return std::pair{l.infer.value().item(), l.prior.value().item()};
  };
  // mu = 0, sigma = 1 and c_hat == c.
  CHECK(losses().first == 0.0);
  CHECK(losses().second == 0.0);
  ps.at("proj_c.bias").data[0] += 1.0;
  CHECK(losses().first == doctest::Approx(1.0));
}

TEST_CASE("TI losses regress onto the frozen embedding") {
  Agent agent(Method::Ti, EnvKind::Grid, tiny());
  ParamSet ps = agent.init_params(1);
  Tensor label({1, 25});
  label.data[3] = 1.0;
  const Tensor target = task_embedding(ps, label);
  for (double& v : ps.at("proj_g.weight").data) v = 0.0;
  ps.at("proj_g.bias") = Tensor({3}, to_vector(target.data));
  auto loss = [&] {
    Graph g(&ps, false);
    const BeliefVars b = bottleneck_forward(g, agent.bottleneck_spec(),
                                            g.constant(Tensor({1, 8}, 0.2)),
                                            g.constant(Tensor({1, 4}, 0.1)));
    return ti_losses(g, b, label, ps).value().item();
  };
  CHECK(loss() == 0.0);
  ps.at("proj_g.bias").data[1] += 2.0;
  CHECK(loss() == doctest::Approx(4.0));

  Tensor bad({1, 25});
  Graph g(&ps, false);
  const BeliefVars b = bottleneck_forward(g, agent.bottleneck_spec(),
                                          g.constant(Tensor({1, 8}, 0.2)),
                                          g.constant(Tensor({1, 4}, 0.1)));
  CHECK_THROWS_AS(ti_losses(g, b, bad, ps), AgentError);
}

TEST_CASE("TI losses: gradient reaches P^g and the encoder, never the g table") {
  Agent agent(Method::Ti, EnvKind::Grid, tiny());
  const ParamSet ps = agent.init_params(5);
  const RolloutBatch batch = rollout(agent, ps, 2, 9);
  const auto eps = pointers(batch);
  const ParamSet grads = grad(
      [&](Graph& g) {
        Rng rng(0);
        const SequenceInputs in = stack_inputs(eps);
        std::normal_distribution<double> d;
        Tensor noise({in.rows(), 4});
        for (double& v : noise.data) v = d(rng);
        const BeliefVars b = agent.encode_belief(g, in, g.constant(noise));
        return ti_losses(g, b, stack_labels(eps, 25), ps);
      },
      ps);
  auto norm = [&](const std::string& name) {
    double s = 0.0;
    for (double v : grads.at(name).data) s += v * v;
    return s;
  };
  CHECK(norm("proj_g.weight") > 0.0);
  CHECK(norm("enc.gru.input_weight") > 0.0);
  CHECK(norm("multi.g.weight") == 0.0);
  CHECK(norm("multi.g.bias") == 0.0);
}

TEST_CASE("VI losses: perfect decoder on a one-step toy sequence") {
  MlpSpec dec{2 + 1 + 2, {3}, 2, HeadKind::CategoricalLogits};
  ParamSet ps;
  Rng rng(1);
  init_mlp(ps, "decoder", dec, rng);
  for (double& v : ps.at("decoder.layer1.weight").data) v = 0.0;
  ps.at("decoder.layer1.bias") = Tensor({2}, {0.75, 1.0});
  TransitionTargets tr;
  tr.steps = 1;
  tr.batch = 1;
  tr.obs = Tensor({1, 1}, {0.0});
  tr.action = Tensor({1, 2}, {0.0, 1.0});
  tr.next_obs = Tensor({1, 1}, {0.75});
  tr.reward = Tensor({1, 1}, {1.0});
  Graph g(&ps, false);
  CHECK(vi_losses(g, dec, g.constant(Tensor({1, 2}, {0.3, -0.2})), tr).value().item() == 0.0);
}

TEST_CASE("VI losses: zero decoder equals the mean squared target, future included") {
  Agent agent(Method::Vi, EnvKind::Grid, tiny());
  ParamSet ps = agent.init_params(6);
  for (auto& [name, t] : ps) {
    if (name.rfind("decoder", 0) == 0) std::fill(t.data.begin(), t.data.end(), 0.0);
  }
  const RolloutBatch batch = rollout(agent, ps, 2, 3);
  const auto eps = pointers(batch);
  const TransitionTargets tr = stack_targets(eps, 5);
  // Direct summation: every (t, i) pair contributes |s_{i+1}|^2 + r_i^2.
  double expect = 0.0;
  std::size_t pairs = 0;
  double masked = 0.0;
  std::size_t masked_pairs = 0;
  for (const MetaEpisode* ep : eps) {
    const std::size_t T = ep->steps();
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < T; ++i) {
        const double sq = ep->next_obs(i, 0) * ep->next_obs(i, 0) +
                          ep->next_obs(i, 1) * ep->next_obs(i, 1) +
                          ep->rewards[i] * ep->rewards[i];
        expect += sq;
        ++pairs;
        if (i <= t) {
          masked += sq;
          ++masked_pairs;
        }
      }
    }
  }
  Graph g(&ps, false);
  Var z = g.constant(Tensor({tr.steps * tr.batch, 4}, 0.5));
  const double full = vi_losses(g, agent.decoder_spec(), z, tr).value().item();
  const double past = vi_losses(g, agent.decoder_spec(), z, tr, true).value().item();
  CHECK(full == doctest::Approx(expect / static_cast<double>(pairs)).epsilon(1e-12));
  CHECK(past == doctest::Approx(masked / static_cast<double>(masked_pairs)).epsilon(1e-12));
  CHECK(full != past);
}

TEST_CASE("BI losses: constant target, exact match, width bookkeeping") {
  Agent agent(Method::BiPlusPlusHn, EnvKind::Grid, tiny());
  ParamSet ps = agent.init_params(2);
  Tensor label({1, 25});
  label.data[12] = 1.0;
  const GeneratedParams phi = hypernet_generate(agent.hyper_spec(), ps, "multi.policy.hyper",
                                                task_embedding(ps, label));
  for (double& v : ps.at("proj_phi_prime.weight").data) v = 0.0;
  ps.at("proj_phi_prime.bias") = Tensor({phi.width()}, to_vector(phi.flat.data));
  auto bi = [&](Graph& g) {
    const BeliefVars b = bottleneck_forward(g, agent.bottleneck_spec(),
                                            g.constant(Tensor({1, 8}, 0.4)),
                                            g.constant(Tensor({1, 4}, -0.3)));
    return bi_losses(g, b, label, ps, agent.hyper_spec());
  };
  {
    Graph g(&ps, false);
    CHECK(bi(g).value().item() == 0.0);
  }
  ps.at("proj_phi_prime.bias").data[0] += 0.5;
  const ParamSet grads = grad(bi, ps);
  for (const auto& [name, t] : grads) {
    if (Agent::is_multitask_param(name)) {
      for (double v : t.data) CHECK(v == 0.0);
    }
  }
  // Default sizes: base net 256 -> [256, 128] -> 5.
  Agent full(Method::BiPlusPlusHn, EnvKind::Grid);
  CHECK(full.hyper_spec().output_width() == 99333);

  HypernetSpec wrong = agent.hyper_spec();
  wrong.target.hidden = {4};
  Graph g(&ps, false);
  const BeliefVars b = bottleneck_forward(g, agent.bottleneck_spec(),
                                          g.constant(Tensor({1, 8}, 0.4)),
                                          g.constant(Tensor({1, 4}, -0.3)));
  CHECK_THROWS(bi_losses(g, b, label, ps, wrong));
}

TEST_CASE("stop-gradient separation: RL loss never reaches inference parameters") {
  for (Method m : {Method::TiNaive, Method::Ti, Method::TiPlusPlus, Method::TiHn,
                   Method::TiPlusPlusHn, Method::Vi, Method::ViHn, Method::BiPlusPlusHn}) {
    CAPTURE(method_name(m));
    Agent agent(m, EnvKind::Grid, tiny(), HyperInit::Kaiming);
    const ParamSet ps = agent.init_params(11);
    const RolloutBatch batch = rollout(agent, ps, 2, 4);
    const auto eps = pointers(batch);
    const ParamSet grads = grad(
        [&](Graph& g) {
          const ForwardVars fw = agent.forward(g, stack_inputs(eps), std::nullopt);
          return policy_surrogate(g, fw.logits, eps, 0.2) + mean(square(fw.value));
        },
        ps);
    double phi = 0.0;
    for (const auto& [name, t] : grads) {
      if (agent.is_inference_param(name)) {
        CAPTURE(name);
        for (double v : t.data) REQUIRE(v == 0.0);
      }
      if (name.rfind("proj_phi.", 0) == 0) {
        for (double v : t.data) phi += v * v;
      }
    }
    CHECK(phi > 0.0);
    CHECK(agent.is_inference_param("proj_mu.weight"));
    CHECK(agent.is_inference_param("proj_sigma.bias"));
    CHECK(agent.is_inference_param("enc.gru.recurrent_weight"));
  }
}

TEST_CASE("parameter groups partition the meta agent") {
  for (Method m : kAllMethods) {
    CAPTURE(method_name(m));
    Agent agent(m, EnvKind::MemoryCorridor, tiny());
    for (const auto& [name, t] : agent.init_params(0)) {
      const int n = agent.is_policy_param(name) + agent.is_inference_param(name) +
                    Agent::is_multitask_param(name);
      CAPTURE(name);
      CHECK(n == 1);
    }
  }
}

TEST_CASE("reuse copies the multi-task policy by value and resets the critic") {
  Agent agent(Method::TiPlusPlusHn, EnvKind::Grid, tiny(), HyperInit::Kaiming);
  ParamSet ps = agent.init_params(21);
  const ParamSet before = ps;
  reuse_initialize(agent, ps, 99);
  Tensor label({1, 25});
  label.data[5] = 1.0;
  const Tensor emb = task_embedding(ps, label);
  const Tensor obs({1, 2}, {0.5, 0.75});
  auto logits = [&](const ParamSet& p, bool multi) {
    Graph g(&p, false);
    return agent.policy_logits(g, g.constant(emb), g.constant(obs), multi).value().data;
  };
  CHECK(logits(ps, false) == logits(ps, true));
  CHECK(logits(before, false) != logits(before, true));
  CHECK(ps.at("critic.embed.weight").data != before.at("critic.embed.weight").data);

  // Later edits to the meta copy leave the multi-task parameters alone.
  ps.at("policy.hyper.layer1.bias").data[0] += 1.0;
  CHECK(ps.at("multi.policy.hyper.layer1.bias").data[0] ==
        before.at("multi.policy.hyper.layer1.bias").data[0]);

  // Plain TI does not reuse.
  Agent ti(Method::Ti, EnvKind::Grid, tiny());
  ParamSet tp = ti.init_params(21);
  const ParamSet tb = tp;
  reuse_initialize(ti, tp, 99);
  CHECK(tp.at("policy.mlp.layer0.weight").data == tb.at("policy.mlp.layer0.weight").data);
  CHECK(tp.at("policy.mlp.layer0.weight").data != tp.at("multi.policy.mlp.layer0.weight").data);

  // Non-HN reuse copies the MLP policy.
  Agent tpp(Method::TiPlusPlus, EnvKind::Grid, tiny());
  ParamSet pp = tpp.init_params(3);
  reuse_initialize(tpp, pp, 1);
  CHECK(pp.at("policy.mlp.layer2.weight").data == pp.at("multi.policy.mlp.layer2.weight").data);

  ParamSet broken = agent.init_params(21);
  broken.at("multi.policy.embed.weight") = Tensor({2, 2});
  CHECK_THROWS_AS(reuse_initialize(agent, broken, 1), AgentError);
}

TEST_CASE("inference batch sources") {
  Rng rng(5);
  const auto plain = inference_batch_source(method_flags(Method::Ti), 10, 50, 1000,
                                            InferenceMixing::Union, rng);
  CHECK(std::none_of(plain.begin(), plain.end(), [](auto s) { return s.from_multitask; }));

  const auto balanced = inference_batch_source(method_flags(Method::TiPlusPlus), 10, 50, 8,
                                               InferenceMixing::Balanced, rng);
  CHECK(std::count_if(balanced.begin(), balanced.end(),
                      [](auto s) { return s.from_multitask; }) == 4);

  CHECK_THROWS_AS(inference_batch_source(method_flags(Method::TiPlusPlusHn), 10, 0, 4,
                                         InferenceMixing::Union, rng),
                  AgentError);

  // Union sampling is uniform over the concatenated records.
  const std::size_t meta = 3, multi = 7, n = 100000;
  const auto draws = inference_batch_source(method_flags(Method::TiPlusPlusHn), meta, multi, n,
                                            InferenceMixing::Union, rng);
  std::vector<int> counts(meta + multi, 0);
  for (const auto& s : draws) ++counts[s.from_multitask ? meta + s.index : s.index];
  const double p = 1.0 / static_cast<double>(meta + multi);
  const double se = std::sqrt(p * (1 - p) / static_cast<double>(n));
  for (int c : counts) CHECK(std::abs(c / static_cast<double>(n) - p) < 3.5 * se);
}

TEST_CASE("config mismatches are reported") {
  Agent agent(Method::RnnHn, EnvKind::Grid, tiny());
  const ParamSet ps = agent.init_params(0);
  CHECK_THROWS_AS(agent.act(ps, Tensor({1, 3}), Tensor({1, 5}), Tensor({1, 1}), Tensor({1, 1}),
                            Tensor({1, 8}), Tensor({1, 4})),
                  AgentError);
  CHECK_THROWS_AS(agent.act(ps, Tensor({1, 2}), Tensor({1, 5}), Tensor({1, 1}), Tensor({1, 1}),
                            Tensor({1, 7}), Tensor({1, 4})),
                  AgentError);
  Agent other(Method::RnnHn, EnvKind::MemoryCorridor, tiny());
  CHECK_THROWS(other.act(ps, Tensor({1, 5}), Tensor({1, 2}), Tensor({1, 1}), Tensor({1, 1}),
                         Tensor({1, 8}), Tensor({1, 4})));
}
