#pragma once

// Run configs, line-delimited logs, checkpoints and the subcommands behind the
// metarl command-line tool.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metarl/analysis.hpp"

namespace metarl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Output-root override for relative output directories.
inline constexpr const char* kOutRootEnv = "METARL_OUT_ROOT";

// Flat JSON object; every key is optional and unknown keys are rejected.
struct RunConfig {
  std::string method = "RNN+HN";
  std::string env = "grid";
  std::uint64_t seed = 0;
  PpoConfig ppo;
  std::size_t total_frames = 4'000'000;
  // Unset: 100 updates on grids, 2.4% of the updates elsewhere.
  std::optional<std::size_t> pretrain_updates;
  std::string hyper_init = "bias-hyperinit";  // or "kaiming"
  bool probe = false;
  std::optional<double> combined_weight;
  std::string combined_target = "label";  // or "embedding"
  std::size_t checkpoint_every = 50;
  std::size_t eval_episodes = 0;  // greedy evaluation after training
  std::string output_dir;        // empty: runs/<method>-<env>-s<seed>
  std::vector<double> sweep_lrs{3e-3, 1e-3, 3e-4, 1e-4, 3e-5};
  std::vector<std::uint64_t> sweep_seeds{0, 1, 2};
  AgentSizes sizes;

  friend bool operator==(const RunConfig&, const RunConfig&);
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json config_to_json(const RunConfig& cfg);
// FNV-1a of the serialized config, as 16 hex digits. Output, checkpoint,
// evaluation and sweep keys are left out since they do not change training.
std::string config_hash(const RunConfig& cfg);
TrainerConfig to_trainer_config(const RunConfig& cfg);

// `flag` (when non-empty) wins over cfg.output_dir; relative paths are placed
// under $METARL_OUT_ROOT when it is set.
std::filesystem::path resolve_output_dir(const RunConfig& cfg, const std::string& flag);

// ---- Logs -------------------------------------------------------------------------

// One line with fields update, frames, mean_return, policy_loss, value_loss,
// entropy, j_infer, j_prior, latent_grad_norm, in that order.
std::string log_line(const UpdateRecord& rec);
// Parses a log, skipping a truncated final line from a crashed run.
std::vector<UpdateRecord> read_log(const std::filesystem::path& path);
std::vector<CurvePoint> to_curve(const std::vector<UpdateRecord>& records);

// ---- Checkpoints ------------------------------------------------------------------

struct CheckpointManifest {
  std::string run_id;
  std::size_t update = 0;
  std::size_t frames = 0;
  std::string params_blob;      // relative to the checkpoint directory
  std::string params_manifest;
  std::string archive_blob;     // empty when there is no archive
  std::string config_hash;
  ReturnScaler return_scaler;
};

void save_archive(const std::vector<MetaEpisode>& archive, const std::filesystem::path& path);
std::vector<MetaEpisode> load_archive(const std::filesystem::path& path);

// Writes <dir>/checkpoint/{manifest.json, params.bin, params.json, archive.bin}.
void save_checkpoint(const std::filesystem::path& dir, const std::string& run_id,
                     const Trainer& trainer, const std::string& hash);
std::optional<CheckpointManifest> read_checkpoint(const std::filesystem::path& dir);
// Restores `trainer` from <dir>/checkpoint; the config hash must match.
CheckpointManifest resume_trainer(const std::filesystem::path& dir, Trainer& trainer,
                                  const std::string& hash);

// ---- Subcommands ------------------------------------------------------------------

struct TrainOutcome {
  std::vector<UpdateRecord> records;  // whole log, including resumed history
  std::size_t resumed_from = 0;       // update index the run continued from
  std::optional<Evaluation> evaluation;
};

// Runs (or resumes) one training run into `out`. Progress lines go to
// `progress` when non-null.
TrainOutcome cmd_train(const RunConfig& cfg, const std::filesystem::path& out,
                       std::ostream* progress = nullptr);

enum class SweepStatus { Complete = 0, Partial = 3, Failed = 4 };

struct SweepOutcome {
  SweepResult result;
  SweepStatus status = SweepStatus::Complete;
};

// Every lr x seed cell in its own run directory under `out`/cells, then the
// aggregate of the selected rate in `out`/sweep.json and aggregate.tsv.
SweepOutcome cmd_sweep(const RunConfig& cfg, const std::filesystem::path& out,
                       std::size_t workers, std::size_t resamples,
                       std::ostream* progress = nullptr);
std::string cell_dir_name(double lr, std::uint64_t seed);

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  // Test fixture: replaces the KL used by the non-negativity check.
  std::function<double(const std::vector<double>&, const std::vector<double>&)> kl;
};

std::vector<VerifyCheck> cmd_verify(const VerifyOptions& options = {});

struct PlotOptions {
  std::size_t window = 1;
  std::size_t resamples = 10000;
};

// Groups runs by (method, env) from each directory's config.json, smooths each
// curve and writes curves.tsv and curves.svg into `out`.
void cmd_plot(const std::vector<std::filesystem::path>& run_dirs,
              const std::filesystem::path& out, const PlotOptions& options);

// Trains with the probe on and writes probe.tsv (update, frames, value, layer).
std::vector<UpdateRecord> cmd_grad_probe(const RunConfig& cfg, const std::filesystem::path& out,
                                         std::size_t updates, std::ostream* progress = nullptr);

}  // namespace metarl
