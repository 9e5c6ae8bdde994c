#include "metarl/nets.hpp"

#include <Eigen/Core>
#include <Eigen/QR>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

namespace metarl {

namespace {

std::string layer_name(const std::string& prefix, std::size_t layer,
                       std::string_view what) {
  return prefix + ".layer" + std::to_string(layer) + "." + std::string(what);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data) v = dist(rng);
  return t;
}

// Rows of an orthogonal [n,n] block.
std::vector<double> orthogonal(std::size_t n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = dist(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  // Sign fix so the distribution is uniform over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

constexpr double kReluGain = 1.4142135623730951;

}  // namespace

// ---- MlpSpec --------------------------------------------------------------------

std::size_t MlpSpec::layer_in(std::size_t layer) const {
  return layer == 0 ? input : hidden.at(layer - 1);
}

std::size_t MlpSpec::layer_out(std::size_t layer) const {
  return layer < hidden.size() ? hidden[layer] : output;
}

std::size_t MlpSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < layer_count(); ++l) {
    n += layer_in(l) * layer_out(l) + layer_out(l);
  }
  return n;
}

void MlpSpec::validate() const {
  if (input == 0 || output == 0) throw ShapeError("MLP widths must be positive");
  for (auto h : hidden) {
    if (h == 0) throw ShapeError("MLP hidden widths must be positive");
  }
  if (head == HeadKind::ValueScalar && output != 1) {
    throw ShapeError("value head must have a single output");
  }
}

std::size_t ParamSegment::size() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<ParamSegment> GeneratedParams::layout_for(const MlpSpec& spec) {
  std::vector<ParamSegment> out;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t in = spec.layer_in(l), o = spec.layer_out(l);
    out.push_back({"layer" + std::to_string(l) + ".weight", offset, {o, in}});
    offset += o * in;
    out.push_back({"layer" + std::to_string(l) + ".bias", offset, {o}});
    offset += o;
  }
  return out;
}

GeneratedParams GeneratedParams::flatten(const MlpSpec& spec, const ParamSet& params,
                                         const std::string& prefix) {
  GeneratedParams gp;
  gp.layout = layout_for(spec);
  gp.flat = Tensor({1, spec.param_count()});
  for (const auto& seg : gp.layout) {
    const Tensor& t = params.at(prefix + "." + seg.name);
    if (t.size() != seg.size()) {
      throw ShapeError("parameter '" + prefix + "." + seg.name + "' has " +
                       std::to_string(t.size()) + " values, layout expects " +
                       std::to_string(seg.size()));
    }
    std::copy(t.data.begin(), t.data.end(), gp.flat.data.begin() + seg.offset);
  }
  return gp;
}

ParamSet GeneratedParams::slice(std::size_t row, const std::string& prefix) const {
  if (row >= flat.rows()) throw ShapeError("generated parameter row out of range");
  const std::size_t width = flat.cols();
  ParamSet out;
  for (const auto& seg : layout) {
    if (seg.offset + seg.size() > width) {
      throw ShapeError("segment '" + seg.name + "' exceeds generated width");
    }
    auto first = flat.data.begin() + static_cast<std::ptrdiff_t>(row * width + seg.offset);
    out.add(prefix + "." + seg.name,
            Tensor(seg.shape, std::vector<double>(first, first + seg.size())));
  }
  return out;
}

// ---- Layers ----------------------------------------------------------------------

void init_linear(ParamSet& params, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng, double gain) {
  params.add(prefix + ".weight",
             normal_tensor({out, in}, gain / std::sqrt(static_cast<double>(in)), rng));
  params.add(prefix + ".bias", Tensor({out}));
}

Var apply_linear(Graph& g, const std::string& prefix, Var x) {
  return linear(x, g.param(prefix + ".weight"), g.param(prefix + ".bias"));
}

void init_mlp(ParamSet& params, const std::string& prefix, const MlpSpec& spec,
              Rng& rng) {
  spec.validate();
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const bool last = l + 1 == spec.layer_count();
    double gain = kReluGain;
    if (last) gain = spec.head == HeadKind::CategoricalLogits ? 0.01 : 1.0;
    init_linear(params, prefix + ".layer" + std::to_string(l), spec.layer_in(l),
                spec.layer_out(l), rng, gain);
  }
}

ParamSet standard_base_params(const MlpSpec& spec, const std::string& prefix,
                              std::uint64_t seed) {
  Rng rng(seed);
  ParamSet out;
  init_mlp(out, prefix, spec, rng);
  return out;
}

Var mlp_forward(Graph& g, const std::string& prefix, const MlpSpec& spec, Var x) {
  if (x.cols() != spec.input) {
    g.fail_shape("mlp_forward", "input width " + std::to_string(x.cols()) +
                                    " != " + std::to_string(spec.input));
  }
  Var h = x;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    h = linear(h, g.param(layer_name(prefix, l, "weight")),
               g.param(layer_name(prefix, l, "bias")));
    if (l + 1 < spec.layer_count()) h = relu(h);
  }
  return h;
}

Var mlp_forward_generated(Graph& g, const MlpSpec& spec, Var generated, Var x) {
  if (generated.cols() != spec.param_count()) {
    g.fail_shape("mlp_forward_generated",
                 "generated width " + std::to_string(generated.cols()) +
                     " != parameter count " + std::to_string(spec.param_count()));
  }
  if (x.cols() != spec.input) {
    g.fail_shape("mlp_forward_generated", "input width " + std::to_string(x.cols()) +
                                              " != " + std::to_string(spec.input));
  }
  Var h = x;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t in = spec.layer_in(l), out = spec.layer_out(l);
    h = per_sample_linear(h, generated, offset, in, out);
    offset += in * out + out;
    if (l + 1 < spec.layer_count()) h = relu(h);
  }
  return h;
}

Tensor mlp_forward(const MlpSpec& spec, const ParamSet& params,
                   const std::string& prefix, const Tensor& x) {
  Graph g(&params, false);
  return g.value(mlp_forward(g, prefix, spec, g.constant(x)));
}

Tensor mlp_forward(const MlpSpec& spec, const GeneratedParams& generated,
                   const Tensor& x) {
  if (generated.width() != spec.param_count()) {
    throw ShapeError("generated parameter count " + std::to_string(generated.width()) +
                     " != " + std::to_string(spec.param_count()));
  }
  Graph g(nullptr, false);
  Tensor flat = generated.flat;
  if (flat.rows() == 1 && x.rows() > 1) {
    // Broadcast one parameter row over the batch.
    Tensor wide({x.rows(), flat.cols()});
    for (std::size_t r = 0; r < x.rows(); ++r) {
      std::copy(flat.data.begin(), flat.data.end(),
                wide.data.begin() + static_cast<std::ptrdiff_t>(r * flat.cols()));
    }
    flat = std::move(wide);
  }
  return g.value(mlp_forward_generated(g, spec, g.constant(flat), g.constant(x)));
}

// ---- GRU ------------------------------------------------------------------------

void init_gru(ParamSet& params, const std::string& prefix, const GruSpec& spec,
              Rng& rng) {
  const std::size_t h = spec.hidden;
  params.add(prefix + ".input_weight",
             normal_tensor({3 * h, spec.input},
                           1.0 / std::sqrt(static_cast<double>(spec.input)), rng));
  params.add(prefix + ".input_bias", Tensor({3 * h}));
  Tensor recurrent({3 * h, h});
  for (std::size_t gate = 0; gate < 3; ++gate) {
    const auto block = orthogonal(h, rng);
    std::copy(block.begin(), block.end(),
              recurrent.data.begin() + static_cast<std::ptrdiff_t>(gate * h * h));
  }
  params.add(prefix + ".recurrent_weight", std::move(recurrent));
  params.add(prefix + ".recurrent_bias", Tensor({3 * h}));
}

Var gru_step(Graph& g, const std::string& prefix, const GruSpec& spec, Var state,
             Var input) {
  const std::size_t h = spec.hidden;
  if (state.cols() != h || input.cols() != spec.input || state.rows() != input.rows()) {
    g.fail_shape("gru_step", "state " + shape_string(state.value().shape) + ", input " +
                                 shape_string(input.value().shape));
  }
  Var gi = linear(input, g.param(prefix + ".input_weight"),
                  g.param(prefix + ".input_bias"));
  Var gh = linear(state, g.param(prefix + ".recurrent_weight"),
                  g.param(prefix + ".recurrent_bias"));
  Var reset = sigmoid(slice_cols(gi, 0, h) + slice_cols(gh, 0, h));
  Var update = sigmoid(slice_cols(gi, h, 2 * h) + slice_cols(gh, h, 2 * h));
  Var candidate =
      tanh(slice_cols(gi, 2 * h, 3 * h) + reset * slice_cols(gh, 2 * h, 3 * h));
  // h' = (1 - u) * n + u * h = n + u * (h - n)
  return candidate + update * (state - candidate);
}

Tensor gru_step(const GruSpec& spec, const ParamSet& params,
                const std::string& prefix, const Tensor& state, const Tensor& input) {
  Graph g(&params, false);
  return g.value(gru_step(g, prefix, spec, g.constant(state), g.constant(input)));
}

// ---- Hypernetwork ---------------------------------------------------------------

void HypernetSpec::validate() const {
  if (latent == 0) throw ShapeError("hypernetwork latent width must be positive");
  if (hidden.empty()) throw ShapeError("hypernetwork needs at least one hidden layer");
  target.validate();
}

namespace {

MlpSpec generator_spec(const HypernetSpec& spec) {
  MlpSpec g;
  g.input = spec.latent;
  g.hidden = spec.hidden;
  g.output = spec.output_width();
  g.head = HeadKind::CategoricalLogits;
  return g;
}

}  // namespace

void init_bias_hyper(ParamSet& params, const std::string& prefix,
                     const HypernetSpec& spec, Rng& rng) {
  spec.validate();
  const std::uint64_t base_seed = rng();
  const MlpSpec gen = generator_spec(spec);
  for (std::size_t l = 0; l + 1 < gen.layer_count(); ++l) {
    init_linear(params, prefix + ".layer" + std::to_string(l), gen.layer_in(l),
                gen.layer_out(l), rng, kReluGain);
  }
  const std::size_t last = gen.layer_count() - 1;
  const std::string final_name = prefix + ".layer" + std::to_string(last);
  params.add(final_name + ".weight", Tensor({gen.output, gen.layer_in(last)}));
  const ParamSet base = standard_base_params(spec.target, "base", base_seed);
  Tensor bias = GeneratedParams::flatten(spec.target, base, "base").flat;
  bias.shape = {gen.output};
  params.add(final_name + ".bias", std::move(bias));
}

void init_kaiming(ParamSet& params, const std::string& prefix,
                  const HypernetSpec& spec, Rng& rng) {
  spec.validate();
  const MlpSpec gen = generator_spec(spec);
  for (std::size_t l = 0; l < gen.layer_count(); ++l) {
    init_linear(params, prefix + ".layer" + std::to_string(l), gen.layer_in(l),
                gen.layer_out(l), rng, kReluGain);
  }
}

void init_hypernet(ParamSet& params, const std::string& prefix,
                   const HypernetSpec& spec, HyperInit init, Rng& rng) {
  if (init == HyperInit::BiasHyper) {
    init_bias_hyper(params, prefix, spec, rng);
  } else {
    init_kaiming(params, prefix, spec, rng);
  }
}

HypernetVars hypernet_generate(Graph& g, const std::string& prefix,
                               const HypernetSpec& spec, Var latent) {
  if (latent.cols() != spec.latent) {
    g.fail_shape("hypernet_generate", "latent width " + std::to_string(latent.cols()) +
                                          " != " + std::to_string(spec.latent));
  }
  const MlpSpec gen = generator_spec(spec);
  HypernetVars out;
  Var h = latent;
  for (std::size_t l = 0; l < gen.layer_count(); ++l) {
    h = linear(h, g.param(layer_name(prefix, l, "weight")),
               g.param(layer_name(prefix, l, "bias")));
    if (l + 1 < gen.layer_count()) {
      h = relu(h);
      if (l == 0) out.first_hidden = h;
    }
  }
  out.generated = h;
  return out;
}

GeneratedParams hypernet_generate(const HypernetSpec& spec, const ParamSet& params,
                                  const std::string& prefix, const Tensor& latent) {
  Graph g(&params, false);
  GeneratedParams gp;
  gp.flat = g.value(hypernet_generate(g, prefix, spec, g.constant(latent)).generated);
  gp.layout = GeneratedParams::layout_for(spec.target);
  return gp;
}

// ---- Projections and bottleneck -------------------------------------------------

std::string_view projection_prefix(Projection p) {
  switch (p) {
    case Projection::Mu:
      return "proj_mu";
    case Projection::Sigma:
      return "proj_sigma";
    case Projection::TaskLabel:
      return "proj_c";
    case Projection::Phi:
      return "proj_phi";
    case Projection::TaskEmbedding:
      return "proj_g";
    case Projection::BaseParams:
      return "proj_phi_prime";
  }
  return "";
}

Var linear_project(Graph& g, Projection p, Var input) {
  const std::string prefix(projection_prefix(p));
  Var x = p == Projection::Phi ? stop_gradient(input) : input;
  return apply_linear(g, prefix, x);
}

void init_bottleneck(ParamSet& params, const BottleneckSpec& spec, Rng& rng) {
  init_linear(params, std::string(projection_prefix(Projection::Mu)), spec.input,
              spec.latent, rng, 1.0);
  init_linear(params, std::string(projection_prefix(Projection::Sigma)), spec.input,
              spec.latent, rng, 0.1);
  init_linear(params, std::string(projection_prefix(Projection::Phi)), 2 * spec.latent,
              spec.projection, rng, kReluGain);
}

BeliefVars bottleneck_forward(Graph& g, const BottleneckSpec& spec, Var encoding,
                              Var noise) {
  if (noise.cols() != spec.latent || noise.rows() != encoding.rows()) {
    g.fail_shape("bottleneck_forward", "noise " + shape_string(noise.value().shape) +
                                           " for latent width " +
                                           std::to_string(spec.latent));
  }
  BeliefVars b;
  b.mu = linear_project(g, Projection::Mu, encoding);
  b.log_sigma = linear_project(g, Projection::Sigma, encoding);
  b.sigma = exp(b.log_sigma);
  b.z = b.mu + b.sigma * noise;
  b.projected = relu(linear_project(g, Projection::Phi, concat_cols({b.mu, b.sigma})));
  return b;
}

LatentBelief bottleneck_forward(const BottleneckSpec& spec, const ParamSet& params,
                                const Tensor& encoding, const Tensor& noise) {
  Graph g(&params, false);
  const BeliefVars b =
      bottleneck_forward(g, spec, g.constant(encoding), g.constant(noise));
  return {g.value(b.mu), g.value(b.sigma), g.value(b.z), g.value(b.projected)};
}

Var kl_to_standard_normal(Var mu, Var sigma) {
  Var sigma_sq = square(sigma);
  Var terms = add_scalar(sigma_sq + square(mu), -1.0) - scale(log(sigma), 2.0);
  return scale(sum_rows(terms), 0.5);
}

double kl_to_standard_normal(std::span<const double> mu,
                             std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("mu and sigma widths differ");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw std::domain_error("sigma must be positive");
    const double s2 = sigma[i] * sigma[i];
    kl += s2 + mu[i] * mu[i] - 1.0 - std::log(s2);
  }
  return 0.5 * kl;
}

// ---- Checkpoints ----------------------------------------------------------------

void save_params(const ParamSet& params, const std::filesystem::path& blob,
                 const std::filesystem::path& manifest) {
  std::ofstream out(blob, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + blob.string());
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.size();
  }
  nlohmann::ordered_json doc;
  doc["format"] = "float64-le";
  doc["count"] = offset;
  doc["tensors"] = std::move(entries);
  std::ofstream m(manifest);
  if (!m) throw std::runtime_error("cannot write " + manifest.string());
  m << doc.dump(2) << '\n';
}

ParamSet load_params(const std::filesystem::path& blob,
                     const std::filesystem::path& manifest) {
  std::ifstream m(manifest);
  if (!m) throw std::runtime_error("cannot read " + manifest.string());
  const auto doc = nlohmann::json::parse(m);
  const std::size_t count = doc.at("count").get<std::size_t>();
  std::vector<double> flat(count);
  std::ifstream in(blob, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + blob.string());
  in.read(reinterpret_cast<char*>(flat.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double))) {
    throw std::runtime_error("truncated parameter blob " + blob.string());
  }
  ParamSet out;
  for (const auto& e : doc.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (offset + n > count) throw std::runtime_error("manifest offset out of range");
    out.add(e.at("name").get<std::string>(),
            Tensor(std::move(shape),
                   std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                       flat.begin() + static_cast<std::ptrdiff_t>(offset + n))));
  }
  return out;
}

}  // namespace metarl
