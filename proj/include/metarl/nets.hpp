#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "metarl/diffcore.hpp"

namespace metarl {

using Rng = std::mt19937_64;

// ---- Feed-forward networks ------------------------------------------------

enum class HeadKind { CategoricalLogits, ValueScalar };

struct MlpSpec {
  std::size_t input = 0;
  std::vector<std::size_t> hidden{256, 128};
  std::size_t output = 0;
  HeadKind head = HeadKind::CategoricalLogits;

  std::size_t layer_count() const { return hidden.size() + 1; }
  std::size_t layer_in(std::size_t layer) const;
  std::size_t layer_out(std::size_t layer) const;
  std::size_t param_count() const;
  void validate() const;
};

// Where one weight or bias of a base network sits inside a flat vector.
struct ParamSegment {
  std::string name;  // "layer<i>.weight" or "layer<i>.bias"
  std::size_t offset = 0;
  Shape shape;
  std::size_t size() const;
};

// Flat base-network parameters, one row per sample. Each layer stores its
// row-major weight [out,in] followed by its bias [out].
struct GeneratedParams {
  Tensor flat;
  std::vector<ParamSegment> layout;

  static std::vector<ParamSegment> layout_for(const MlpSpec& spec);
  // Packs `prefix`.layer<i>.{weight,bias} from a ParamSet into a [1,P] row.
  static GeneratedParams flatten(const MlpSpec& spec, const ParamSet& params,
                                 const std::string& prefix);
  // Unpacks one row back into named tensors under `prefix`.
  ParamSet slice(std::size_t row, const std::string& prefix) const;
  std::size_t width() const { return flat.cols(); }
};

// Normal(0, gain^2 / fan_in) weights, zero bias.
void init_linear(ParamSet& params, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng, double gain);
Var apply_linear(Graph& g, const std::string& prefix, Var x);

// Hidden layers use ReLU gain; the logits head is scaled down to 0.01 so the
// initial policy is near uniform.
void init_mlp(ParamSet& params, const std::string& prefix, const MlpSpec& spec,
              Rng& rng);
ParamSet standard_base_params(const MlpSpec& spec, const std::string& prefix,
                              std::uint64_t seed);

Var mlp_forward(Graph& g, const std::string& prefix, const MlpSpec& spec, Var x);
// Base network whose weights come from a [B,P] tensor of generated parameters.
Var mlp_forward_generated(Graph& g, const MlpSpec& spec, Var generated, Var x);

Tensor mlp_forward(const MlpSpec& spec, const ParamSet& params,
                   const std::string& prefix, const Tensor& x);
Tensor mlp_forward(const MlpSpec& spec, const GeneratedParams& generated,
                   const Tensor& x);

// ---- Gated recurrent cell ---------------------------------------------------

struct GruSpec {
  std::size_t input = 0;
  std::size_t hidden = 256;
};

// Input weights fan-in scaled, recurrent weights orthogonal per gate block.
void init_gru(ParamSet& params, const std::string& prefix, const GruSpec& spec,
              Rng& rng);
Var gru_step(Graph& g, const std::string& prefix, const GruSpec& spec, Var state,
             Var input);
Tensor gru_step(const GruSpec& spec, const ParamSet& params,
                const std::string& prefix, const Tensor& state, const Tensor& input);

// ---- Hypernetwork ------------------------------------------------------------

enum class HyperInit { BiasHyper, Kaiming };

struct HypernetSpec {
  std::size_t latent = 0;
  std::vector<std::size_t> hidden{256};
  MlpSpec target;

  std::size_t output_width() const { return target.param_count(); }
  void validate() const;
};

// Final weight matrix zero, final bias equal to a standard-initialized base
// network seeded by the first draw from `rng`. Earlier layers Kaiming.
void init_bias_hyper(ParamSet& params, const std::string& prefix,
                     const HypernetSpec& spec, Rng& rng);
// Normal(0, 2/fan_in) on every layer, zero biases.
void init_kaiming(ParamSet& params, const std::string& prefix,
                  const HypernetSpec& spec, Rng& rng);
void init_hypernet(ParamSet& params, const std::string& prefix,
                   const HypernetSpec& spec, HyperInit init, Rng& rng);

struct HypernetVars {
  Var first_hidden;  // post-activation output of the first hidden layer
  Var generated;     // [B, output_width]
};

HypernetVars hypernet_generate(Graph& g, const std::string& prefix,
                               const HypernetSpec& spec, Var latent);
GeneratedParams hypernet_generate(const HypernetSpec& spec, const ParamSet& params,
                                  const std::string& prefix, const Tensor& latent);

// ---- Linear projections and the information bottleneck -----------------------

enum class Projection { Mu, Sigma, TaskLabel, Phi, TaskEmbedding, BaseParams };

std::string_view projection_prefix(Projection p);
// Affine map under projection_prefix(p). The Phi projection always consumes a
// stop-gradient of its input.
Var linear_project(Graph& g, Projection p, Var input);

struct BottleneckSpec {
  std::size_t input = 256;
  std::size_t latent = 25;
  std::size_t projection = 25;
};

// Registers the Mu, Sigma (log-sigma head) and Phi projections.
void init_bottleneck(ParamSet& params, const BottleneckSpec& spec, Rng& rng);

struct BeliefVars {
  Var mu;
  Var log_sigma;
  Var sigma;
  Var z;
  Var projected;  // ReLU(P^phi . stop_gradient(concat(mu, sigma)))
};

BeliefVars bottleneck_forward(Graph& g, const BottleneckSpec& spec, Var encoding,
                              Var noise);

struct LatentBelief {
  Tensor mu;
  Tensor sigma;
  Tensor z;
  Tensor projected;
};

LatentBelief bottleneck_forward(const BottleneckSpec& spec, const ParamSet& params,
                                const Tensor& encoding, const Tensor& noise);

// Per-row 0.5 * sum(sigma^2 + mu^2 - 1 - ln sigma^2), shape [B,1].
Var kl_to_standard_normal(Var mu, Var sigma);
// Throws std::domain_error when any sigma <= 0.
double kl_to_standard_normal(std::span<const double> mu,
                             std::span<const double> sigma);

// ---- Checkpoints ---------------------------------------------------------------

// Flat little-endian float64 blob plus a JSON manifest listing name, shape and
// element offset of every tensor.
void save_params(const ParamSet& params, const std::filesystem::path& blob,
                 const std::filesystem::path& manifest);
ParamSet load_params(const std::filesystem::path& blob,
                     const std::filesystem::path& manifest);

}  // namespace metarl
