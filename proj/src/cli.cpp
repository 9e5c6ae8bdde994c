#include "metarl/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace metarl {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---- Config fields --------------------------------------------------------------

[[noreturn]] void field_error(const std::string& key, const std::string& what) {
  throw ConfigError("field '" + key + "': " + what);
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) field_error(key, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) field_error(key, "must be finite");
  return d;
}

double as_positive(const json& v, const std::string& key) {
  const double d = as_double(v, key);
  if (d <= 0.0) field_error(key, "must be positive");
  return d;
}

std::size_t as_size(const json& v, const std::string& key) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    field_error(key, "expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

std::size_t as_count(const json& v, const std::string& key) {
  const std::size_t n = as_size(v, key);
  if (n == 0) field_error(key, "must be at least 1");
  return n;
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) field_error(key, "expected true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) field_error(key, "expected a string");
  return v.get<std::string>();
}

std::vector<std::size_t> as_layers(const json& v, const std::string& key) {
  if (!v.is_array()) field_error(key, "expected an array of layer widths");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(as_count(e, key));
  return out;
}

using Setter = std::function<void(RunConfig&, const json&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table{
      {"method",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.method = as_string(v, k);
         try {
           parse_method(c.method);
         } catch (const AgentError& e) {
           field_error(k, e.what());
         }
       }},
      {"env",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.env = as_string(v, k);
         try {
           parse_env(c.env);
         } catch (const EnvError& e) {
           field_error(k, e.what());
         }
       }},
      {"seed", [](RunConfig& c, const json& v, const std::string& k) { c.seed = as_size(v, k); }},
      {"policy_lr",
       [](RunConfig& c, const json& v, const std::string& k) { c.ppo.policy_lr = as_positive(v, k); }},
      {"inference_lr",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.inference_lr = as_positive(v, k);
       }},
      {"clip", [](RunConfig& c, const json& v, const std::string& k) { c.ppo.clip = as_positive(v, k); }},
      {"value_coef",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.value_coef = as_double(v, k);
         if (c.ppo.value_coef < 0) field_error(k, "must be non-negative");
       }},
      {"entropy_coef",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.entropy_coef = as_double(v, k);
         if (c.ppo.entropy_coef < 0) field_error(k, "must be non-negative");
       }},
      {"epochs",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.epochs = static_cast<int>(as_count(v, k));
       }},
      {"minibatches",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.minibatches = static_cast<int>(as_count(v, k));
       }},
      {"gamma",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.gamma = as_double(v, k);
         if (c.ppo.gamma < 0 || c.ppo.gamma >= 1) field_error(k, "must lie in [0, 1)");
       }},
      {"lambda",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.lambda = as_double(v, k);
         if (c.ppo.lambda < 0 || c.ppo.lambda > 1) field_error(k, "must lie in [0, 1]");
       }},
      {"max_grad_norm",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.max_grad_norm = as_positive(v, k);
       }},
      {"num_envs",
       [](RunConfig& c, const json& v, const std::string& k) { c.ppo.num_envs = as_count(v, k); }},
      {"linear_decay",
       [](RunConfig& c, const json& v, const std::string& k) { c.ppo.linear_decay = as_bool(v, k); }},
      {"normalize_rewards",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.normalize_rewards = as_bool(v, k);
       }},
      {"infer_weight",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.infer_weight = as_double(v, k);
         if (c.ppo.infer_weight < 0) field_error(k, "must be non-negative");
       }},
      {"prior_weight",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.ppo.prior_weight = as_double(v, k);
         if (c.ppo.prior_weight < 0) field_error(k, "must be non-negative");
       }},
      {"adam_eps",
       [](RunConfig& c, const json& v, const std::string& k) { c.ppo.adam_eps = as_positive(v, k); }},
      {"total_frames",
       [](RunConfig& c, const json& v, const std::string& k) { c.total_frames = as_count(v, k); }},
      {"pretrain_updates",
       [](RunConfig& c, const json& v, const std::string& k) {
         if (v.is_null()) {
           c.pretrain_updates.reset();
         } else {
           c.pretrain_updates = as_size(v, k);
         }
       }},
      {"hyper_init",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.hyper_init = as_string(v, k);
         if (c.hyper_init != "bias-hyperinit" && c.hyper_init != "kaiming") {
           field_error(k, "expected \"bias-hyperinit\" or \"kaiming\"");
         }
       }},
      {"probe", [](RunConfig& c, const json& v, const std::string& k) { c.probe = as_bool(v, k); }},
      {"combined_weight",
       [](RunConfig& c, const json& v, const std::string& k) {
         if (v.is_null()) {
           c.combined_weight.reset();
           return;
         }
         const double w = as_double(v, k);
         if (w < 0.0 || w > 1.0) field_error(k, "must lie in [0, 1]");
         c.combined_weight = w;
       }},
      {"combined_target",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.combined_target = as_string(v, k);
         if (c.combined_target != "label" && c.combined_target != "embedding") {
           field_error(k, "expected \"label\" or \"embedding\"");
         }
       }},
      {"checkpoint_every",
       [](RunConfig& c, const json& v, const std::string& k) { c.checkpoint_every = as_count(v, k); }},
      {"eval_episodes",
       [](RunConfig& c, const json& v, const std::string& k) { c.eval_episodes = as_size(v, k); }},
      {"output_dir",
       [](RunConfig& c, const json& v, const std::string& k) { c.output_dir = as_string(v, k); }},
      {"sweep_lrs",
       [](RunConfig& c, const json& v, const std::string& k) {
         if (!v.is_array() || v.empty()) field_error(k, "expected a non-empty array");
         c.sweep_lrs.clear();
         for (const auto& e : v) c.sweep_lrs.push_back(as_positive(e, k));
       }},
      {"sweep_seeds",
       [](RunConfig& c, const json& v, const std::string& k) {
         if (!v.is_array() || v.empty()) field_error(k, "expected a non-empty array");
         c.sweep_seeds.clear();
         for (const auto& e : v) c.sweep_seeds.push_back(as_size(e, k));
       }},
      {"state_embed",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.state_embed = as_count(v, k); }},
      {"action_embed",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.action_embed = as_count(v, k); }},
      {"reward_embed",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.reward_embed = as_count(v, k); }},
      {"gru_hidden",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.gru_hidden = as_count(v, k); }},
      {"policy_embed",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.policy_embed = as_count(v, k); }},
      {"policy_hidden",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.policy_hidden = as_layers(v, k); }},
      {"hyper_hidden",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.sizes.hyper_hidden = as_layers(v, k);
         if (c.sizes.hyper_hidden.empty()) field_error(k, "needs at least one hidden layer");
       }},
      {"critic_embed",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.critic_embed = as_count(v, k); }},
      {"critic_hidden",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.critic_hidden = as_layers(v, k); }},
      {"latent",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.latent = as_count(v, k); }},
      {"projection",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.projection = as_count(v, k); }},
      {"task_embedding",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.sizes.task_embedding = as_count(v, k);
       }},
      {"decoder_hidden",
       [](RunConfig& c, const json& v, const std::string& k) { c.sizes.decoder_hidden = as_layers(v, k); }},
  };
  return table;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

json null_or(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ---- Binary archive -------------------------------------------------------------

constexpr char kArchiveMagic[4] = {'M', 'R', 'L', 'A'};

void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("archive truncated");
  return v;
}

void put_doubles(std::ostream& out, std::span<const double> v) {
  put_u64(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_doubles(std::istream& in) {
  std::vector<double> v(get_u64(in));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw std::runtime_error("archive truncated");
  return v;
}

void put_tensor(std::ostream& out, const Tensor& t) {
  put_u64(out, t.shape.size());
  for (std::size_t d : t.shape) put_u64(out, d);
  put_doubles(out, t.data);
}

Tensor get_tensor(std::istream& in) {
  Shape shape(get_u64(in));
  for (auto& d : shape) d = get_u64(in);
  std::vector<double> data = get_doubles(in);
  return Tensor(shape, std::move(data));
}

// ---- Output -----------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

std::string format_lr(double lr) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(0) << lr;
  return os.str();
}

}  // namespace

// ---- Config -------------------------------------------------------------------------

bool operator==(const RunConfig& a, const RunConfig& b) {
  return config_to_json(a).dump() == config_to_json(b).dump();
}

RunConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown key '" + key + "'");
    it->second(cfg, value, key);
  }
  if (cfg.combined_weight && method_flags(parse_method(cfg.method)).uses_bottleneck()) {
    throw ConfigError("field 'combined_weight': only RNN-architecture methods take the "
                      "combined objective");
  }
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

ordered_json config_to_json(const RunConfig& c) {
  ordered_json j;
  j["method"] = c.method;
  j["env"] = c.env;
  j["seed"] = c.seed;
  j["policy_lr"] = c.ppo.policy_lr;
  j["inference_lr"] = c.ppo.inference_lr;
  j["clip"] = c.ppo.clip;
  j["value_coef"] = c.ppo.value_coef;
  j["entropy_coef"] = c.ppo.entropy_coef;
  j["epochs"] = c.ppo.epochs;
  j["minibatches"] = c.ppo.minibatches;
  j["gamma"] = c.ppo.gamma;
  j["lambda"] = c.ppo.lambda;
  j["max_grad_norm"] = c.ppo.max_grad_norm;
  j["num_envs"] = c.ppo.num_envs;
  j["linear_decay"] = c.ppo.linear_decay;
  j["normalize_rewards"] = c.ppo.normalize_rewards;
  j["infer_weight"] = c.ppo.infer_weight;
  j["prior_weight"] = c.ppo.prior_weight;
  j["adam_eps"] = c.ppo.adam_eps;
  j["total_frames"] = c.total_frames;
  j["pretrain_updates"] = c.pretrain_updates ? json(*c.pretrain_updates) : json(nullptr);
  j["hyper_init"] = c.hyper_init;
  j["probe"] = c.probe;
  j["combined_weight"] = null_or(c.combined_weight);
  j["combined_target"] = c.combined_target;
  j["checkpoint_every"] = c.checkpoint_every;
  j["eval_episodes"] = c.eval_episodes;
  j["output_dir"] = c.output_dir;
  j["sweep_lrs"] = c.sweep_lrs;
  j["sweep_seeds"] = c.sweep_seeds;
  j["state_embed"] = c.sizes.state_embed;
  j["action_embed"] = c.sizes.action_embed;
  j["reward_embed"] = c.sizes.reward_embed;
  j["gru_hidden"] = c.sizes.gru_hidden;
  j["policy_embed"] = c.sizes.policy_embed;
  j["policy_hidden"] = c.sizes.policy_hidden;
  j["hyper_hidden"] = c.sizes.hyper_hidden;
  j["critic_embed"] = c.sizes.critic_embed;
  j["critic_hidden"] = c.sizes.critic_hidden;
  j["latent"] = c.sizes.latent;
  j["projection"] = c.sizes.projection;
  j["task_embedding"] = c.sizes.task_embedding;
  j["decoder_hidden"] = c.sizes.decoder_hidden;
  return j;
}

std::string config_hash(const RunConfig& cfg) {
  ordered_json j = config_to_json(cfg);
  // Keys that never change what a single run computes.
  for (const char* key : {"output_dir", "checkpoint_every", "eval_episodes", "sweep_lrs",
                          "sweep_seeds"}) {
    j.erase(key);
  }
  return hex64(fnv1a(j.dump()));
}

TrainerConfig to_trainer_config(const RunConfig& c) {
  TrainerConfig t;
  try {
    t.method = parse_method(c.method);
  } catch (const AgentError& e) {
    field_error("method", e.what());
  }
  try {
    t.env = parse_env(c.env);
  } catch (const EnvError& e) {
    field_error("env", e.what());
  }
  t.seed = c.seed;
  t.ppo = c.ppo;
  t.sizes = c.sizes;
  t.hyper_init = c.hyper_init == "kaiming" ? HyperInit::Kaiming : HyperInit::BiasHyper;
  t.probe = c.probe;
  t.budget.total_frames = c.total_frames;
  if (c.pretrain_updates) {
    t.budget.pretrain_updates = *c.pretrain_updates;
  } else if (t.env == EnvKind::MemoryCorridor) {
    const std::size_t per_update =
        c.ppo.num_envs * static_cast<std::size_t>(Env(t.env).meta_length());
    const double updates = static_cast<double>(c.total_frames / per_update);
    t.budget.pretrain_updates = static_cast<std::size_t>(std::lround(0.024 * updates));
  } else {
    t.budget.pretrain_updates = 100;
  }
  if (c.combined_weight) {
    t.combined = CombinedObjective{*c.combined_weight, c.combined_target == "embedding"};
  }
  return t;
}

fs::path resolve_output_dir(const RunConfig& cfg, const std::string& flag) {
  fs::path dir = !flag.empty() ? fs::path(flag)
                 : !cfg.output_dir.empty()
                     ? fs::path(cfg.output_dir)
                     : fs::path("runs") / (cfg.method + "-" + cfg.env + "-s" + std::to_string(cfg.seed));
  if (dir.is_relative()) {
    if (const char* root = std::getenv(kOutRootEnv); root != nullptr && *root != '\0') {
      dir = fs::path(root) / dir;
    }
  }
  return dir;
}

// ---- Logs -------------------------------------------------------------------------

std::string log_line(const UpdateRecord& r) {
  ordered_json j;
  j["update"] = r.update;
  j["frames"] = r.frames;
  j["mean_return"] = r.mean_return;
  j["policy_loss"] = r.losses.policy_loss;
  j["value_loss"] = r.losses.value_loss;
  j["entropy"] = r.losses.entropy;
  j["j_infer"] = r.losses.j_infer;
  j["j_prior"] = r.losses.j_prior;
  j["latent_grad_norm"] = null_or(r.latent_grad_norm);
  return j.dump();
}

std::vector<UpdateRecord> read_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read log " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  std::vector<UpdateRecord> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error&) {
      if (i + 1 == lines.size()) break;  // crashed mid-write
      throw std::runtime_error(path.string() + ": malformed record on line " +
                               std::to_string(i + 1));
    }
    UpdateRecord r;
    r.update = j.at("update").get<std::size_t>();
    r.frames = j.at("frames").get<std::size_t>();
    r.mean_return = j.at("mean_return").get<double>();
    r.losses.policy_loss = j.at("policy_loss").get<double>();
    r.losses.value_loss = j.at("value_loss").get<double>();
    r.losses.entropy = j.at("entropy").get<double>();
    r.losses.j_infer = j.at("j_infer").get<double>();
    r.losses.j_prior = j.at("j_prior").get<double>();
    if (!j.at("latent_grad_norm").is_null()) {
      r.latent_grad_norm = j.at("latent_grad_norm").get<double>();
    }
    out.push_back(r);
  }
  return out;
}

std::vector<CurvePoint> to_curve(const std::vector<UpdateRecord>& records) {
  std::vector<CurvePoint> out;
  for (const auto& r : records) out.push_back({r.update, r.frames, r.mean_return});
  return out;
}

// ---- Checkpoints ------------------------------------------------------------------

void save_archive(const std::vector<MetaEpisode>& archive, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kArchiveMagic, 4);
  put_u64(out, archive.size());
  for (const auto& ep : archive) {
    put_u64(out, ep.task);
    for (const Tensor* t : {&ep.obs, &ep.prev_action, &ep.prev_reward, &ep.prev_done, &ep.next_obs}) {
      put_tensor(out, *t);
    }
    put_doubles(out, std::vector<double>(ep.actions.begin(), ep.actions.end()));
    put_doubles(out, std::vector<double>(ep.dones.begin(), ep.dones.end()));
    for (const auto* v : {&ep.rewards, &ep.log_probs, &ep.values, &ep.advantages, &ep.returns}) {
      put_doubles(out, *v);
    }
  }
}

std::vector<MetaEpisode> load_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kArchiveMagic)) {
    throw std::runtime_error(path.string() + " is not an archive");
  }
  std::vector<MetaEpisode> out(get_u64(in));
  for (auto& ep : out) {
    ep.task = get_u64(in);
    for (Tensor* t : {&ep.obs, &ep.prev_action, &ep.prev_reward, &ep.prev_done, &ep.next_obs}) {
      *t = get_tensor(in);
    }
    for (double a : get_doubles(in)) ep.actions.push_back(static_cast<int>(a));
    for (double d : get_doubles(in)) ep.dones.push_back(static_cast<std::uint8_t>(d));
    for (auto* v : {&ep.rewards, &ep.log_probs, &ep.values, &ep.advantages, &ep.returns}) {
      *v = get_doubles(in);
    }
  }
  return out;
}

void save_checkpoint(const fs::path& dir, const std::string& run_id, const Trainer& trainer,
                     const std::string& hash) {
  const fs::path tmp = dir / "checkpoint.tmp";
  const fs::path final_dir = dir / "checkpoint";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  save_params(trainer.params(), tmp / "params.bin", tmp / "params.json");
  const bool archive = !trainer.artifacts().archive.empty();
  if (archive) save_archive(trainer.artifacts().archive, tmp / "archive.bin");
  ordered_json m;
  m["run_id"] = run_id;
  m["update"] = trainer.updates_done();
  m["frames"] = trainer.frames();
  m["params_blob"] = "params.bin";
  m["params_manifest"] = "params.json";
  m["archive_blob"] = archive ? "archive.bin" : "";
  m["config_hash"] = hash;
  const ReturnScaler& rs = trainer.return_scaler();
  m["return_scaler"] = {{"count", rs.count}, {"mean", rs.mean}, {"m2", rs.m2}};
  write_json(tmp / "manifest.json", m);
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
}

std::optional<CheckpointManifest> read_checkpoint(const fs::path& dir) {
  const fs::path path = dir / "checkpoint" / "manifest.json";
  if (!fs::exists(path)) return std::nullopt;
  std::ifstream in(path);
  const json j = json::parse(in);
  CheckpointManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.update = j.at("update").get<std::size_t>();
  m.frames = j.at("frames").get<std::size_t>();
  m.params_blob = j.at("params_blob").get<std::string>();
  m.params_manifest = j.at("params_manifest").get<std::string>();
  m.archive_blob = j.at("archive_blob").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  if (j.contains("return_scaler")) {
    const json& rs = j.at("return_scaler");
    m.return_scaler.count = rs.at("count").get<double>();
    m.return_scaler.mean = rs.at("mean").get<double>();
    m.return_scaler.m2 = rs.at("m2").get<double>();
  }
  return m;
}

CheckpointManifest resume_trainer(const fs::path& dir, Trainer& trainer, const std::string& hash) {
  const auto m = read_checkpoint(dir);
  if (!m) throw std::runtime_error("no checkpoint in " + dir.string());
  if (m->config_hash != hash) {
    throw ConfigError("checkpoint in " + dir.string() + " was written by config " +
                      m->config_hash + ", not " + hash);
  }
  const fs::path ck = dir / "checkpoint";
  std::vector<MetaEpisode> archive;
  if (!m->archive_blob.empty()) archive = load_archive(ck / m->archive_blob);
  trainer.restore(load_params(ck / m->params_blob, ck / m->params_manifest), m->update,
                  m->frames, std::move(archive));
  trainer.restore_return_scaler(m->return_scaler);
  return *m;
}

// ---- train ----------------------------------------------------------------------

TrainOutcome cmd_train(const RunConfig& cfg, const fs::path& out, std::ostream* progress) {
  const TrainerConfig tcfg = to_trainer_config(cfg);
  Trainer trainer(tcfg);
  const std::string hash = config_hash(cfg);
  const std::string run_id = cfg.method + "-" + cfg.env + "-s" + std::to_string(cfg.seed) +
                             "-" + hash.substr(0, 8);
  fs::create_directories(out);
  write_json(out / "config.json", config_to_json(cfg));
  const fs::path log_path = out / "log.jsonl";

  TrainOutcome outcome;
  if (read_checkpoint(out)) {
    const CheckpointManifest m = resume_trainer(out, trainer, hash);
    outcome.resumed_from = m.update;
    // Drop records written after the checkpoint so no frames are counted twice.
    if (fs::exists(log_path)) {
      for (const auto& r : read_log(log_path)) {
        if (r.update < m.update) outcome.records.push_back(r);
      }
    }
    std::ofstream rewrite(log_path, std::ios::trunc);
    for (const auto& r : outcome.records) rewrite << log_line(r) << "\n";
    if (progress) *progress << "resuming " << run_id << " at update " << m.update << "\n";
  } else {
    std::ofstream(log_path, std::ios::trunc);
  }

  std::ofstream log(log_path, std::ios::app);
  while (!trainer.finished()) {
    const UpdateRecord rec = trainer.step();
    log << log_line(rec) << "\n" << std::flush;
    outcome.records.push_back(rec);
    if (progress) {
      *progress << "update " << rec.update << " frames " << rec.frames << " return "
                << rec.mean_return << (rec.pretrain ? " (multi-task)" : "") << "\n";
    }
    if (trainer.updates_done() % cfg.checkpoint_every == 0 || trainer.finished()) {
      save_checkpoint(out, run_id, trainer, hash);
    }
  }

  ordered_json summary;
  summary["run_id"] = run_id;
  summary["method"] = cfg.method;
  summary["env"] = cfg.env;
  summary["seed"] = cfg.seed;
  summary["updates"] = trainer.updates_done();
  summary["frames"] = trainer.frames();
  summary["pretrain_updates"] = trainer.pretrain_updates();
  summary["final_score"] =
      outcome.records.empty() ? json(nullptr) : json(final_score(to_curve(outcome.records)));
  summary["config_hash"] = hash;
  if (cfg.eval_episodes > 0) {
    outcome.evaluation = evaluate_greedy(trainer.agent(), trainer.params(), cfg.eval_episodes,
                                         cfg.seed + 1'000'003);
    summary["eval_mean_return"] = outcome.evaluation->mean_return;
    summary["eval_final_choice_accuracy"] = outcome.evaluation->final_choice_accuracy;
  }
  write_json(out / "summary.json", summary);
  return outcome;
}

// ---- sweep ----------------------------------------------------------------------

std::string cell_dir_name(double lr, std::uint64_t seed) {
  return "lr_" + format_lr(lr) + "_seed_" + std::to_string(seed);
}

SweepOutcome cmd_sweep(const RunConfig& cfg, const fs::path& out, std::size_t workers,
                       std::size_t resamples, std::ostream* progress) {
  to_trainer_config(cfg);  // field errors before any cell starts
  fs::create_directories(out / "cells");
  write_json(out / "config.json", config_to_json(cfg));
  std::mutex io;
  const CellRunner runner = [&](double lr, std::uint64_t seed) {
    RunConfig cell = cfg;
    cell.ppo.policy_lr = lr;
    cell.seed = seed;
    const fs::path dir = out / "cells" / cell_dir_name(lr, seed);
    cell.output_dir = dir.string();
    const TrainOutcome o = cmd_train(cell, dir);
    if (progress) {
      std::lock_guard lock(io);
      *progress << "cell " << cell_dir_name(lr, seed) << " final "
                << final_score(to_curve(o.records)) << "\n";
    }
    return to_curve(o.records);
  };
  AggregateOptions agg;
  agg.resamples = resamples;
  SweepOutcome outcome;
  outcome.result = run_sweep(cfg.method, cfg.sweep_lrs, cfg.sweep_seeds, runner, workers, agg);
  const SweepResult& r = outcome.result;
  const std::size_t failed = static_cast<std::size_t>(
      std::count_if(r.cells.begin(), r.cells.end(), [](const SweepCell& c) { return c.failed; }));
  outcome.status = failed == 0            ? SweepStatus::Complete
                   : failed < r.cells.size() ? SweepStatus::Partial
                                             : SweepStatus::Failed;

  ordered_json j;
  j["method"] = r.method;
  j["status"] = failed == 0 ? "complete" : failed < r.cells.size() ? "partial" : "failed";
  j["best_lr"] = null_or(r.best_lr);
  j["cells"] = ordered_json::array();
  for (const auto& c : r.cells) {
    ordered_json cj;
    cj["lr"] = c.lr;
    cj["seed"] = c.seed;
    cj["dir"] = (fs::path("cells") / cell_dir_name(c.lr, c.seed)).string();
    cj["failed"] = c.failed;
    cj["error"] = c.error;
    cj["final_score"] = c.failed ? json(nullptr) : json(final_score(c.curve));
    j["cells"].push_back(cj);
  }
  write_json(out / "sweep.json", j);
  std::ostringstream tsv;
  tsv << "frames\tmean_return\tci_low\tci_high\n";
  for (std::size_t i = 0; i < r.frames.size(); ++i) {
    tsv << r.frames[i] << "\t" << r.mean[i] << "\t" << r.band[i].low << "\t" << r.band[i].high
        << "\n";
  }
  write_text(out / "aggregate.tsv", tsv.str());
  return outcome;
}

// ---- grad-probe -----------------------------------------------------------------

std::vector<UpdateRecord> cmd_grad_probe(const RunConfig& cfg, const fs::path& out,
                                         std::size_t updates, std::ostream* progress) {
  TrainerConfig tcfg = to_trainer_config(cfg);
  tcfg.probe = true;
  Trainer trainer(tcfg);
  fs::create_directories(out);
  write_json(out / "config.json", config_to_json(cfg));
  std::string layer;
  {
    // Name the probed layer once, from a batch at initialization.
    VecEnv envs(tcfg.env, 1, cfg.seed);
    RolloutBatch b = trainer.agent().flags().multitask_only
                         ? collect_multitask_rollouts(trainer.agent(), trainer.params(), envs)
                         : collect_rollouts(trainer.agent(), trainer.params(), envs);
    compute_batch_gae(b, tcfg.ppo.gamma, tcfg.ppo.lambda);
    layer = latent_grad_norm(trainer.agent(), trainer.params(), b, tcfg.ppo).layer;
  }
  std::vector<UpdateRecord> records;
  std::ofstream log(out / "log.jsonl", std::ios::trunc);
  std::ostringstream tsv;
  tsv << "update\tframes\tlatent_grad_norm\tlayer\n";
  const std::size_t n = updates == 0 ? trainer.total_updates()
                                     : std::min(updates, trainer.total_updates());
  for (std::size_t i = 0; i < n; ++i) {
    const UpdateRecord rec = trainer.step();
    records.push_back(rec);
    log << log_line(rec) << "\n";
    tsv << rec.update << "\t" << rec.frames << "\t" << rec.latent_grad_norm.value_or(0.0) << "\t"
        << layer << "\n";
    if (progress) {
      *progress << "update " << rec.update << " probe " << *rec.latent_grad_norm << " (" << layer
                << ")\n";
    }
  }
  write_text(out / "probe.tsv", tsv.str());
  return records;
}

// ---- plot -----------------------------------------------------------------------

namespace {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<Interval> band;
};

std::string svg_plot(const std::vector<PlotSeries>& series) {
  const double W = 800, H = 500, L = 70, R = 180, T = 30, B = 60;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        x0 = x1 = s.x[i];
        y0 = y1 = s.mean[i];
        first = false;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min({y0, s.band[i].low, s.mean[i]});
      y1 = std::max({y1, s.band[i].high, s.mean[i]});
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 1;
    y1 += 1;
  }
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << xv
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15
     << "\" text-anchor=\"middle\">frames</text>\n";
  os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << (T + H - B) / 2 << ")\">mean meta-episode return</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& ser = series[s];
    const char* c = colors[s % 8];
    os << "<polygon fill=\"" << c << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < ser.x.size(); ++i) os << px(ser.x[i]) << "," << py(ser.band[i].high) << " ";
    for (std::size_t i = ser.x.size(); i-- > 0;) os << px(ser.x[i]) << "," << py(ser.band[i].low) << " ";
    os << "\"/>\n";
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < ser.x.size(); ++i) os << px(ser.x[i]) << "," << py(ser.mean[i]) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (s + 1) << "\" fill=\"" << c << "\">"
       << ser.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

void cmd_plot(const std::vector<fs::path>& run_dirs, const fs::path& out,
              const PlotOptions& options) {
  if (run_dirs.empty()) throw std::runtime_error("plot: no run directories given");
  std::vector<std::string> missing;
  for (const auto& d : run_dirs) {
    if (!fs::exists(d / "log.jsonl")) missing.push_back((d / "log.jsonl").string());
  }
  if (!missing.empty()) {
    std::string msg = "plot: missing logs:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw std::runtime_error(msg);
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::vector<CurvePoint>>> groups;
  for (const auto& d : run_dirs) {
    std::string label = d.filename().string();
    if (fs::exists(d / "config.json")) {
      const RunConfig c = load_config(d / "config.json");
      label = c.method + " (" + c.env + ")";
    }
    if (!groups.count(label)) order.push_back(label);
    groups[label].push_back(to_curve(read_log(d / "log.jsonl")));
  }
  std::vector<PlotSeries> series;
  std::ostringstream tsv;
  tsv << "series\tframes\tmean_return\tci_low\tci_high\truns\n";
  for (const auto& label : order) {
    const auto& runs = groups[label];
    std::size_t len = runs.front().size();
    for (const auto& r : runs) len = std::min(len, r.size());
    if (len < options.window) {
      throw std::runtime_error("plot: " + label + " has " + std::to_string(len) +
                               " records, fewer than the window " +
                               std::to_string(options.window));
    }
    std::vector<std::vector<double>> smoothed;
    for (const auto& r : runs) {
      std::vector<double> v;
      for (std::size_t i = 0; i < len; ++i) v.push_back(r[i].mean_return);
      smoothed.push_back(smooth_curve(v, options.window));
    }
    PlotSeries s;
    s.label = label;
    const std::size_t n = smoothed.front().size();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> at;
      for (const auto& v : smoothed) at.push_back(v[i]);
      // Frames of the last point in the smoothing window.
      s.x.push_back(static_cast<double>(runs.front()[i + options.window - 1].frames));
      s.mean.push_back(std::accumulate(at.begin(), at.end(), 0.0) / static_cast<double>(at.size()));
      s.band.push_back(bootstrap_ci(at, 0.68, options.resamples, i));
      tsv << label << "\t" << s.x.back() << "\t" << s.mean.back() << "\t" << s.band.back().low
          << "\t" << s.band.back().high << "\t" << runs.size() << "\n";
    }
    series.push_back(std::move(s));
  }
  fs::create_directories(out);
  write_text(out / "curves.tsv", tsv.str());
  write_text(out / "curves.svg", svg_plot(series));
}

// ---- verify -----------------------------------------------------------------------

namespace {

AgentSizes verify_sizes() {
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

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data) v = n(rng);
  return t;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

// Largest finite-difference relative error over several seeds.
double worst_fd(const std::function<std::pair<ParamSet, LossBuilder>(std::uint64_t)>& make,
                const std::function<bool(std::string_view)>& include = {}) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto [params, loss] = make(seed);
    const double err = include ? finite_diff_check(loss, params, 1e-5, include)
                               : finite_diff_check(loss, params, 1e-5);
    worst = std::max(worst, err);
  }
  return worst;
}

RolloutBatch verify_rollout(const Agent& agent, const ParamSet& params, std::uint64_t seed) {
  VecEnv v(agent.env(), 2, seed);
  RolloutBatch b = collect_rollouts(agent, params, v);
  compute_batch_gae(b, 0.99, 0.95);
  normalize_advantages(b);
  return b;
}

}  // namespace

std::vector<VerifyCheck> cmd_verify(const VerifyOptions& options) {
  std::vector<VerifyCheck> checks;
  auto run = [&](const std::string& name, const std::function<std::string()>& body) {
    VerifyCheck c;
    c.name = name;
    try {
      c.detail = body();
      c.passed = c.detail.empty();
    } catch (const std::exception& e) {
      c.detail = std::string("threw: ") + e.what();
    }
    checks.push_back(c);
  };
  auto fd_detail = [](double err) {
    return err < 1e-4 ? std::string() : "relative error " + fmt(err) + " >= 1e-4";
  };

  run("diffcore.mlp_gradients_match_finite_differences", [&] {
    const MlpSpec spec{4, {6, 5}, 3, HeadKind::CategoricalLogits};
    return fd_detail(worst_fd([&](std::uint64_t seed) {
      Rng rng(seed);
      ParamSet p;
      init_linear(p, "net.layer0", 4, 6, rng, 1.0);
      init_linear(p, "net.layer1", 6, 5, rng, 1.0);
      init_linear(p, "net.layer2", 5, 3, rng, 1.0);
      for (auto& [n, t] : p) {
        if (n.find("bias") != std::string::npos) t = random_tensor(t.shape, rng, 0.5);
      }
      const Tensor x = random_tensor({3, 4}, rng);
      return std::pair{p, LossBuilder([spec, x](Graph& g) {
                         return sum(square(mlp_forward(g, "net", spec, g.constant(x))));
                       })};
    }));
  });

  run("nets.gru_gradients_match_finite_differences", [&] {
    const GruSpec spec{3, 4};
    return fd_detail(worst_fd([&](std::uint64_t seed) {
      Rng rng(seed);
      ParamSet p;
      init_gru(p, "gru", spec, rng);
      const Tensor x = random_tensor({6, 3}, rng);
      return std::pair{p, LossBuilder([spec, x](Graph& g) {
                         Var h = g.constant(Tensor({2, 4}));
                         Var xs = g.constant(x);
                         for (std::size_t t = 0; t < 3; ++t) {
                           const std::vector<std::size_t> rows{2 * t, 2 * t + 1};
                           h = gru_step(g, "gru", spec, h, gather_rows(xs, rows));
                         }
                         return sum(square(h));
                       })};
    }));
  });

  run("nets.hypernetwork_gradients_match_finite_differences", [&] {
    HypernetSpec spec;
    spec.latent = 3;
    spec.hidden = {5};
    spec.target = MlpSpec{2, {3}, 4, HeadKind::CategoricalLogits};
    return fd_detail(worst_fd([&](std::uint64_t seed) {
      Rng rng(seed);
      ParamSet p;
      init_hypernet(p, "hyper", spec, HyperInit::Kaiming, rng);
      const Tensor z = random_tensor({2, 3}, rng);
      const Tensor x = random_tensor({2, 2}, rng);
      return std::pair{p, LossBuilder([spec, z, x](Graph& g) {
                         const HypernetVars hv = hypernet_generate(g, "hyper", spec, g.constant(z));
                         return sum(square(log_softmax_rows(
                             mlp_forward_generated(g, spec.target, hv.generated, g.constant(x)))));
                       })};
    }));
  });

  run("nets.bottleneck_gradients_match_finite_differences", [&] {
    const BottleneckSpec spec{5, 3, 4};
    return fd_detail(worst_fd([&](std::uint64_t seed) {
      Rng rng(seed);
      ParamSet p;
      init_bottleneck(p, spec, rng);
      const Tensor enc = random_tensor({2, 5}, rng);
      const Tensor noise = random_tensor({2, 3}, rng);
      return std::pair{p, LossBuilder([spec, enc, noise](Graph& g) {
                         const BeliefVars b = bottleneck_forward(g, spec, g.constant(enc),
                                                                 g.constant(noise));
                         return sum(square(b.z)) + sum(kl_to_standard_normal(b.mu, b.sigma));
                       })};
    }));
  });

  run("nets.vi_decoder_gradients_match_finite_differences", [&] {
    const MlpSpec dec{3 + 2 + 2, {4}, 3, HeadKind::CategoricalLogits};
    return fd_detail(worst_fd([&](std::uint64_t seed) {
      Rng rng(seed);
      ParamSet p;
      init_linear(p, "decoder.layer0", 7, 4, rng, 1.0);
      init_linear(p, "decoder.layer1", 4, 3, rng, 1.0);
      TransitionTargets tr;
      tr.steps = 3;
      tr.batch = 1;
      tr.obs = random_tensor({3, 2}, rng);
      tr.action = Tensor({3, 2}, {1, 0, 0, 1, 1, 0});
      tr.next_obs = random_tensor({3, 2}, rng);
      tr.reward = random_tensor({3, 1}, rng);
      const Tensor z = random_tensor({3, 3}, rng);
      return std::pair{p, LossBuilder([dec, tr, z](Graph& g) {
                         return vi_losses(g, dec, g.constant(z), tr);
                       })};
    }));
  });

  run("nets.kl_is_non_negative_and_zero_at_the_prior", [&] {
    auto kl = options.kl ? options.kl
                         : [](const std::vector<double>& mu, const std::vector<double>& sigma) {
                             return kl_to_standard_normal(mu, sigma);
                           };
    Rng rng(7);
    std::normal_distribution<double> n;
    for (int i = 0; i < 1000; ++i) {
      std::vector<double> mu(4), sigma(4);
      for (std::size_t k = 0; k < 4; ++k) {
        mu[k] = n(rng);
        sigma[k] = std::exp(n(rng));
      }
      const double v = kl(mu, sigma);
      if (!(v >= 0.0)) return "KL " + fmt(v) + " < 0 at sample " + std::to_string(i);
    }
    const double at_prior = kl({0, 0, 0, 0}, {1, 1, 1, 1});
    return at_prior == 0.0 ? std::string() : "KL at the prior is " + fmt(at_prior);
  });

  run("nets.bias_hyperinit_generates_identical_parameters", [&] {
    HypernetSpec spec;
    spec.latent = 4;
    spec.hidden = {6};
    spec.target = MlpSpec{3, {5}, 5, HeadKind::CategoricalLogits};
    Rng rng(3);
    ParamSet p;
    init_hypernet(p, "hyper", spec, HyperInit::BiasHyper, rng);
    const Tensor first = hypernet_generate(spec, p, "hyper", random_tensor({1, 4}, rng)).flat;
    for (int i = 0; i < 100; ++i) {
      const Tensor other = hypernet_generate(spec, p, "hyper", random_tensor({1, 4}, rng, 3.0)).flat;
      if (other.data != first.data) return "latent " + std::to_string(i) + " changed phi";
    }
    return std::string();
  });

  run("nets.generated_parameters_round_trip", [&] {
    const MlpSpec spec{3, {4}, 2, HeadKind::CategoricalLogits};
    const ParamSet p = standard_base_params(spec, "base", 5);
    const GeneratedParams a = GeneratedParams::flatten(spec, p, "base");
    const GeneratedParams b = GeneratedParams::flatten(spec, a.slice(0, "base"), "base");
    return a.flat.data == b.flat.data ? std::string() : "flatten/slice changed the values";
  });

  run("envs.grid_known_goal_return_closed_form", [&] {
    for (int y = 0; y < kGridSize; ++y) {
      for (int x = 0; x < kGridSize; ++x) {
        if (x == 0 && y == 0) continue;
        Task task;
        task.kind = EnvKind::Grid;
        task.goal = {x, y};
        Env env(EnvKind::Grid);
        env.reset_meta(task);
        double ret = 0.0;
        for (;;) {
          const StepResult r = env.step(shortest_path_action(env.position(), task.goal));
          ret += r.reward;
          if (r.done) break;
        }
        const int d = x + y;
        const double want = (15 - d) - 0.1 * d;
        if (std::abs(ret - want) > 1e-9) {
          return "goal (" + std::to_string(x) + "," + std::to_string(y) + "): " + fmt(ret) +
                 " vs " + fmt(want);
        }
      }
    }
    return std::string();
  });

  run("envs.corridor_oracle_returns_11_2", [&] {
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
      const Task task = sample_task(EnvKind::MemoryCorridor, rng);
      Env env(EnvKind::MemoryCorridor);
      env.reset_meta(task);
      double ret = 0.0;
      while (!env.meta_done()) ret += env.step(corridor_oracle_action(task, env.episode_step())).reward;
      if (std::abs(ret - 11.2) > 1e-9) return "meta-episode return " + fmt(ret);
    }
    return std::string();
  });

  run("envs.task_labels_are_one_hot", [&] {
    Rng rng(2);
    for (EnvKind k : {EnvKind::Grid, EnvKind::GridShow, EnvKind::GridDense, EnvKind::MemoryCorridor}) {
      for (int i = 0; i < 100; ++i) {
        const std::vector<double> l = task_label(sample_task(k, rng));
        if (l.size() != task_label_width(k) || std::accumulate(l.begin(), l.end(), 0.0) != 1.0) {
          return std::string(env_name(k)) + " label is not one-hot";
        }
      }
    }
    return std::string();
  });

  run("agents.policy_loss_never_reaches_inference_parameters", [&] {
    for (Method m : kAllMethods) {
      if (!method_flags(m).uses_bottleneck()) continue;
      Agent agent(m, EnvKind::Grid, verify_sizes(), HyperInit::Kaiming);
      const ParamSet ps = agent.init_params(11);
      const RolloutBatch batch = verify_rollout(agent, ps, 4);
      std::vector<const MetaEpisode*> eps;
      for (const auto& e : batch.episodes) eps.push_back(&e);
      const ParamSet grads = grad(
          [&](Graph& g) {
            const ForwardVars fw = agent.forward(g, stack_inputs(eps), std::nullopt);
            return policy_surrogate(g, fw.logits, eps, 0.2) + mean(square(fw.value));
          },
          ps);
      for (const auto& [name, t] : grads) {
        if (!agent.is_inference_param(name)) continue;
        for (double v : t.data) {
          if (v != 0.0) return std::string(method_name(m)) + ": gradient in " + name;
        }
      }
    }
    return std::string();
  });

  run("agents.parameter_groups_partition_every_agent", [&] {
    for (Method m : kAllMethods) {
      Agent agent(m, EnvKind::Grid, verify_sizes());
      for (const auto& [name, t] : agent.init_params(0)) {
        const int n = agent.is_policy_param(name) + agent.is_inference_param(name) +
                      Agent::is_multitask_param(name);
        if (n != 1) return std::string(method_name(m)) + ": " + name + " in " + std::to_string(n) + " groups";
      }
    }
    return std::string();
  });

  run("analysis.latent_probe_zero_at_bias_hyperinit", [&] {
    Agent bias(Method::RnnHn, EnvKind::Grid, verify_sizes(), HyperInit::BiasHyper);
    const ParamSet pb = bias.init_params(1);
    const double zero = latent_grad_norm(bias, pb, verify_rollout(bias, pb, 2), PpoConfig{}).value;
    Agent kaiming(Method::RnnHn, EnvKind::Grid, verify_sizes(), HyperInit::Kaiming);
    const ParamSet pk = kaiming.init_params(1);
    const double pos = latent_grad_norm(kaiming, pk, verify_rollout(kaiming, pk, 2), PpoConfig{}).value;
    if (zero != 0.0) return "Bias-HyperInit probe " + fmt(zero);
    if (!(pos > 0.0)) return "Kaiming probe " + fmt(pos);
    return std::string();
  });

  run("trainer.gae_matches_brute_force", [&] {
    Rng rng(42);
    std::uniform_int_distribution<int> len(1, 20);
    std::normal_distribution<double> n;
    std::uniform_real_distribution<double> u;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t T = static_cast<std::size_t>(len(rng));
      std::vector<double> r(T), v(T);
      std::vector<std::uint8_t> d(T);
      for (std::size_t t = 0; t < T; ++t) {
        r[t] = n(rng);
        v[t] = n(rng);
        d[t] = u(rng) < 0.2;
      }
      const double boot = n(rng), gamma = u(rng), lambda = u(rng);
      const GaeResult got = compute_gae(r, v, boot, d, gamma, lambda);
      for (std::size_t t = 0; t < T; ++t) {
        double want = 0.0;
        for (std::size_t k = t; k < T; ++k) {
          double w = 1.0;
          for (std::size_t j = t; j < k; ++j) w *= gamma * lambda * (1.0 - d[j]);
          const double next = k + 1 < T ? v[k + 1] : boot;
          want += w * (r[k] + gamma * next * (1.0 - d[k]) - v[k]);
        }
        if (std::abs(got.advantages[t] - want) >= 1e-10) {
          return "trial " + std::to_string(trial) + " step " + std::to_string(t);
        }
      }
    }
    return std::string();
  });

  run("trainer.advantages_normalized_per_batch", [&] {
    Agent agent(Method::Rnn, EnvKind::Grid, verify_sizes());
    const ParamSet ps = agent.init_params(2);
    const RolloutBatch b = verify_rollout(agent, ps, 1);
    std::vector<double> a;
    for (const auto& ep : b.episodes) a.insert(a.end(), ep.advantages.begin(), ep.advantages.end());
    const double m = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    double ss = 0.0;
    for (double v : a) ss += (v - m) * (v - m);
    const double sd = std::sqrt(ss / static_cast<double>(a.size()));
    if (std::abs(m) >= 1e-10 || std::abs(sd - 1.0) >= 1e-10) {
      return "mean " + fmt(m) + ", std " + fmt(sd);
    }
    return std::string();
  });

  run("trainer.frames_add_up_to_the_budget", [&] {
    TrainerConfig cfg;
    cfg.method = Method::TiPlusPlus;
    cfg.sizes = verify_sizes();
    cfg.ppo.num_envs = 2;
    cfg.ppo.epochs = 1;
    cfg.budget.total_frames = 120 * 4;
    cfg.budget.pretrain_updates = 2;
    Trainer tr(cfg);
    const std::size_t pre = tr.pretrain_multitask().frames;
    while (!tr.finished()) tr.step();
    if (pre != 240 || tr.frames() != cfg.budget.total_frames) {
      return "pretrain " + std::to_string(pre) + ", total " + std::to_string(tr.frames());
    }
    return std::string();
  });

  run("analysis.bootstrap_degenerate_on_constant_data", [&] {
    const Interval ci = bootstrap_ci({5.0, 5.0, 5.0});
    return ci.low == 5.0 && ci.high == 5.0 ? std::string()
                                           : "(" + fmt(ci.low) + ", " + fmt(ci.high) + ")";
  });

  run("analysis.smoothing_uses_valid_padding", [&] {
    return smooth_curve({0, 1, 0, 1}, 2) == std::vector<double>{0.5, 0.5, 0.5}
               ? std::string()
               : std::string("unexpected smoothing output");
  });

  run("cli.config_round_trips", [&] {
    RunConfig c;
    c.method = "TI++HN";
    c.env = "memory-corridor";
    c.seed = 9;
    c.ppo.policy_lr = 3e-4;
    c.pretrain_updates = 7;
    c.sizes.policy_hidden = {3, 2};
    const RunConfig back = parse_config(json::parse(config_to_json(c).dump()));
    return back == c ? std::string() : std::string("parse(serialize(c)) != c");
  });

  run("diffcore.stop_gradient_blocks_exactly", [&] {
    ParamSet p;
    p.add("w", Tensor({1, 2}, {0.5, -1.5}));
    const ParamSet gr = grad(
        [](Graph& g) {
          Var w = g.param("w");
          return sum(square(stop_gradient(w))) + sum(w);
        },
        p);
    return gr.at("w").data == std::vector<double>{1.0, 1.0} ? std::string()
                                                             : std::string("gradient leaked");
  });

  run("diffcore.repeated_evaluation_is_bit_identical", [&] {
    const MlpSpec spec{3, {4}, 2, HeadKind::CategoricalLogits};
    const ParamSet p = standard_base_params(spec, "base", 1);
    Rng rng(1);
    const Tensor x = random_tensor({5, 3}, rng);
    auto once = [&] {
      return grad([&](Graph& g) { return sum(square(mlp_forward(g, "base", spec, g.constant(x)))); },
                  p);
    };
    const ParamSet a = once(), b = once();
    for (const auto& [n, t] : a) {
      if (b.at(n).data != t.data) return "gradient of " + n + " differs";
    }
    return std::string();
  });

  run("nets.default_base_net_parameter_count", [&] {
    Agent agent(Method::RnnHn, EnvKind::Grid);
    const std::size_t w = agent.hyper_spec().output_width();
    return w == 99333 ? std::string() : "width " + std::to_string(w);
  });

  run("envs.random_walks_stay_on_the_grid", [&] {
    Rng rng(4);
    std::uniform_int_distribution<int> act(0, 4);
    for (int i = 0; i < 50; ++i) {
      const Task task = sample_task(EnvKind::Grid, rng);
      Env env(EnvKind::Grid);
      env.reset_meta(task);
      int steps = 0;
      while (!env.meta_done()) {
        env.step(act(rng));
        ++steps;
        const Cell c = env.position();
        if (c.x < 0 || c.y < 0 || c.x >= kGridSize || c.y >= kGridSize) return std::string("left the grid");
        if (!(env.task().goal == task.goal)) return std::string("task changed mid meta-episode");
      }
      if (steps != 60) return "meta-episode of " + std::to_string(steps) + " steps";
    }
    return std::string();
  });

  run("agents.reuse_copies_the_multi_task_policy", [&] {
    Agent agent(Method::TiPlusPlusHn, EnvKind::Grid, verify_sizes(), HyperInit::Kaiming);
    ParamSet ps = agent.init_params(21);
    reuse_initialize(agent, ps, 5);
    for (const auto& [name, t] : ps) {
      if (name.rfind("multi.policy.", 0) != 0) continue;
      const std::string meta = name.substr(6);
      if (!ps.contains(meta) || ps.at(meta).data != t.data) return meta + " differs";
    }
    return std::string();
  });

  run("trainer.dual_optimizers_touch_disjoint_groups", [&] {
    Agent agent(Method::TiHn, EnvKind::Grid, verify_sizes(), HyperInit::Kaiming);
    const ParamSet ps = agent.init_params(6);
    const RolloutBatch b = verify_rollout(agent, ps, 8);
    MiniBatch mb;
    for (const auto& e : b.episodes) mb.episodes.push_back(&e);
    Rng rng(2);
    const MiniBatchGrads r = ppo_minibatch_gradients(agent, ps, mb, PpoConfig{}, std::nullopt, rng);
    ParamSet a = ps;
    Adam inf;
    inf.step(a, r.grads, 1e-3, [&](std::string_view n) { return agent.is_inference_param(n); });
    for (const auto& [name, t] : ps) {
      if (!agent.is_inference_param(name) && a.at(name).data != t.data) {
        return "inference step moved " + name;
      }
    }
    ParamSet c = ps;
    Adam pol;
    pol.step(c, r.grads, 1e-3, [&](std::string_view n) { return agent.is_policy_param(n); });
    for (const auto& [name, t] : ps) {
      if (!agent.is_policy_param(name) && c.at(name).data != t.data) return "policy step moved " + name;
    }
    return std::string();
  });

  run("trainer.learning_rate_decays_linearly", [&] {
    PpoConfig cfg;
    cfg.linear_decay = true;
    const double half = lr_schedule(cfg, 50, 100).policy;
    if (std::abs(half - 0.5 * cfg.policy_lr) > 1e-15) return "halfway rate " + fmt(half);
    cfg.linear_decay = false;
    return lr_schedule(cfg, 99, 100).policy == cfg.policy_lr ? std::string()
                                                              : std::string("constant rate moved");
  });

  run("analysis.bootstrap_contains_the_mean", [&] {
    Rng rng(3);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> v(5 + trial);
      for (double& x : v) x = n(rng);
      const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      const Interval ci = bootstrap_ci(v, 0.68, 2000, trial);
      if (ci.low > m || ci.high < m) return "trial " + std::to_string(trial);
    }
    return std::string();
  });

  run("analysis.sweep_selection_is_a_function_of_the_curves", [&] {
    std::vector<SweepCell> cells;
    for (double lr : {1e-3, 3e-4}) {
      for (std::uint64_t s : {0, 1}) {
        cells.push_back({lr, s, {{0, 960, lr * 1e3 + s}}, false, {}});
      }
    }
    const auto a = select_best_lr(cells);
    std::reverse(cells.begin(), cells.end());
    const auto b = select_best_lr(cells);
    return a && b && *a == *b && *a == 1e-3 ? std::string() : std::string("selection changed");
  });

  run("cli.log_fields_in_order", [&] {
    const std::string line = log_line(UpdateRecord{});
    const std::vector<std::string> keys{"update", "frames", "mean_return", "policy_loss",
                                        "value_loss", "entropy", "j_infer", "j_prior",
                                        "latent_grad_norm"};
    std::size_t pos = 0;
    for (const auto& k : keys) {
      const std::size_t at = line.find("\"" + k + "\"", pos);
      if (at == std::string::npos) return k + " missing or out of order";
      pos = at;
    }
    return std::string();
  });

  return checks;
}

}  // namespace metarl
