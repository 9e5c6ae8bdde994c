#include <doctest.h>

#include <cmath>
#include <random>

#include "metarl/diffcore.hpp"
#include "metarl/nets.hpp"

using namespace metarl;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (double& v : t.data) v = d(rng);
  return t;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 2}), ShapeError);
  Tensor t({3});
  CHECK(t.rows() == 1);
  CHECK(t.cols() == 3);
}

TEST_CASE("eval: identity matmul, relu, softmax") {
  Graph g;
  Var eye = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var x = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK(matmul(eye, x).value().data == std::vector<double>{1, 2, 3, 4});

  Var v = g.constant(Tensor::row({-1, 0, 2}));
  CHECK(relu(v).value().data == std::vector<double>{0, 0, 2});

  Var s = softmax_rows(g.constant(Tensor::row({0, 0})));
  CHECK(s.value().data[0] == doctest::Approx(0.5));
  CHECK(s.value().data[1] == doctest::Approx(0.5));
}

TEST_CASE("eval: shape mismatch names the node") {
  Graph g;
  Var a = g.constant(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
  Var b = g.constant(Tensor::matrix(2, 2, std::vector<double>(4, 1.0)));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("node") != std::string::npos);
  }
}

TEST_CASE("grad: d(x*x)/dx at 3 is 6") {
  Graph g;
  Var x = g.input(Tensor::scalar(3.0));
  g.backward(x * x);
  CHECK(g.grad(x).item() == doctest::Approx(6.0));
}

TEST_CASE("grad: d(sum(W v))/dW replicates v in every row") {
  ParamSet ps;
  ps.add("w", Tensor::matrix(2, 2, {0.3, -1.0, 2.0, 0.5}));
  const auto grads = grad(
      [](Graph& g) {
        Var v = g.constant(Tensor::matrix(2, 1, {1, 1}));
        return sum(matmul(g.param("w"), v));
      },
      ps);
  CHECK(grads.at("w").data == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("grad: non-scalar output is rejected") {
  Graph g;
  Var x = g.input(Tensor::row({1, 2}));
  CHECK_THROWS_AS(g.backward(x * x), ShapeError);
}

TEST_CASE("grad: non-finite gradient reports the node") {
  Graph g;
  Var x = g.input(Tensor::scalar(0.0));
  // d/dx sqrt-like blowup: log(x*x + tiny) has a huge but finite gradient, so
  // force an infinity through exp.
  Var y = exp(scale(x, 1.0)) * g.constant(Tensor::scalar(INFINITY));
  try {
    g.backward(y);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("node") != std::string::npos);
  }
}

TEST_CASE("gradient map has the parameter key set and shapes") {
  ParamSet ps;
  ps.add("a", Tensor({2, 3}, 0.5));
  ps.add("unused", Tensor({4}, 1.0));
  const auto grads = grad([](Graph& g) { return sum(g.param("a")); }, ps);
  CHECK(grads.names() == ps.names());
  CHECK(grads.at("unused").shape == Shape{4});
  CHECK(grads.at("unused").data == std::vector<double>(4, 0.0));
}

TEST_CASE("stop_gradient blocks exactly and is value-transparent") {
  Graph g;
  Var x = g.input(Tensor::scalar(2.0));
  Var w = g.input(Tensor::scalar(5.0));
  Var y = stop_gradient(x) * w;
  g.backward(y);
  CHECK(g.grad(x).item() == 0.0);
  CHECK(g.grad(w).item() == 2.0);

  Graph h;
  Var a = h.constant(Tensor::row({1.5, -2.25, 3.0}));
  CHECK(stop_gradient(a).value().data == a.value().data);
}

TEST_CASE("stop_gradient through the projection path zeroes producer grads") {
  std::mt19937_64 rng(3);
  ParamSet ps;
  BottleneckSpec spec{6, 3, 4};
  init_bottleneck(ps, spec, rng);
  const Tensor enc = random_tensor({2, 6}, rng);
  const Tensor noise = random_tensor({2, 3}, rng);
  const auto grads = grad(
      [&](Graph& g) {
        const BeliefVars b = bottleneck_forward(g, spec, g.constant(enc), g.constant(noise));
        return sum(square(b.projected));
      },
      ps);
  for (const char* name : {"proj_mu.weight", "proj_mu.bias", "proj_sigma.weight",
                           "proj_sigma.bias"}) {
    for (double v : grads.at(name).data) CHECK(v == 0.0);
  }
  double phi_norm = 0.0;
  for (double v : grads.at("proj_phi.weight").data) phi_norm += v * v;
  CHECK(phi_norm > 0.0);
}

TEST_CASE("finite differences: linear function is exact") {
  ParamSet ps;
  ps.add("w", Tensor::row({0.5, -1.5, 2.0}));
  const double err = finite_diff_check(
      [](Graph& g) {
        return sum(g.param("w") * g.constant(Tensor::row({3.0, 1.0, -2.0})));
      },
      ps, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("finite differences: random 3-layer MLP on 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    MlpSpec spec{5, {7, 6}, 4, HeadKind::CategoricalLogits};
    ParamSet ps;
    init_mlp(ps, "mlp", spec, rng);
    // Larger output layer so the loss is not dominated by tiny logits.
    for (double& v : ps.at("mlp.layer2.weight").data) v *= 100.0;
    const Tensor x = random_tensor({3, 5}, rng);
    const double err = finite_diff_check(
        [&](Graph& g) {
          Var logits = mlp_forward(g, "mlp", spec, g.constant(x));
          return sum(square(tanh(logits)));
        },
        ps, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("finite differences: elementwise and structural ops") {
  std::mt19937_64 rng(11);
  ParamSet ps;
  ps.add("a", random_tensor({3, 4}, rng));
  ps.add("b", random_tensor({4}, rng));
  ps.add("c", random_tensor({3, 1}, rng));
  const std::vector<std::size_t> rows{2, 0, 2, 1};
  const std::vector<std::size_t> cols{0, 3, 1};
  const double err = finite_diff_check(
      [&](Graph& g) {
        Var a = g.param("a"), b = g.param("b"), c = g.param("c");
        Var x = sigmoid(a + b) * c;
        Var y = log_softmax_rows(concat_cols({x, slice_cols(exp(scale(a, 0.3)), 1, 3)}));
        Var z = gather_rows(y, rows);
        Var m = minimum(a, scale(a, 0.5));
        return sum(z) + mean(pick_cols(m, cols)) + sum(sum_rows(clamp(a, -0.5, 0.5)));
      },
      ps, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("finite differences: per-sample linear") {
  std::mt19937_64 rng(5);
  ParamSet ps;
  ps.add("p", random_tensor({3, 4 * 2 + 2 + 5}, rng));
  ps.add("x", random_tensor({3, 4}, rng));
  const double err = finite_diff_check(
      [](Graph& g) {
        return sum(square(per_sample_linear(g.param("x"), g.param("p"), 3, 4, 2)));
      },
      ps, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
  auto run = [] {
    Rng rng(42);
    MlpSpec spec{4, {8}, 3, HeadKind::CategoricalLogits};
    ParamSet ps;
    init_mlp(ps, "m", spec, rng);
    Tensor x({2, 4}, 0.25);
    return mlp_forward(spec, ps, "m", x).data;
  };
  CHECK(run() == run());
}
