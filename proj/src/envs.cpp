#include "metarl/envs.hpp"

#include <algorithm>
#include <cstdlib>
#include <json.hpp>
#include <ostream>

namespace metarl {

namespace {

constexpr double kGoalReward = 1.0;
constexpr double kStepPenalty = -0.1;
constexpr double kRoomReward = 0.1;
constexpr double kFinalCorrect = 4.0;
constexpr double kFinalWrong = -3.0;

enum CorridorChannel : std::size_t {
  kSignalRed = 0,
  kSignalGreen = 1,
  kColumnA = 2,
  kColumnB = 3,
  kTerminalRoom = 4,
};

bool is_grid(EnvKind kind) { return kind != EnvKind::MemoryCorridor; }

double scaled(int coord) { return static_cast<double>(coord) / (kGridSize - 1); }

}  // namespace

std::string_view env_name(EnvKind kind) {
  switch (kind) {
    case EnvKind::Grid:
      return "grid";
    case EnvKind::GridShow:
      return "grid-show";
    case EnvKind::GridDense:
      return "grid-dense";
    case EnvKind::MemoryCorridor:
      return "memory-corridor";
  }
  return "";
}

EnvKind parse_env(std::string_view name) {
  for (EnvKind k : {EnvKind::Grid, EnvKind::GridShow, EnvKind::GridDense,
                    EnvKind::MemoryCorridor}) {
    if (env_name(k) == name) return k;
  }
  throw EnvError("unknown environment '" + std::string(name) +
                 "' (expected grid, grid-show, grid-dense or memory-corridor)");
}

int manhattan(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

std::size_t Task::label_index() const {
  if (kind == EnvKind::MemoryCorridor) return static_cast<std::size_t>(signal);
  return static_cast<std::size_t>(goal.y * kGridSize + goal.x);
}

std::size_t task_label_width(EnvKind kind) {
  return is_grid(kind) ? kGridSize * kGridSize : 2;
}

std::size_t task_count(EnvKind kind) { return task_label_width(kind); }

std::vector<double> task_label(const Task& task) {
  std::vector<double> label(task_label_width(task.kind), 0.0);
  label[task.label_index()] = 1.0;
  return label;
}

Task sample_task(EnvKind kind, Rng& rng) {
  Task t;
  t.kind = kind;
  if (is_grid(kind)) {
    std::uniform_int_distribution<int> cell(1, kGridSize * kGridSize - 1);
    const int idx = cell(rng);
    t.goal = {idx % kGridSize, idx / kGridSize};
  } else {
    std::uniform_int_distribution<int> bit(0, 1);
    t.signal = bit(rng);
    for (int& c : t.columns) c = bit(rng);
  }
  return t;
}

// ---- Env -----------------------------------------------------------------------

Env::Env(EnvKind kind) : kind_(kind) {}

std::size_t Env::observation_width() const {
  switch (kind_) {
    case EnvKind::Grid:
      return 2;
    case EnvKind::GridShow:
      return 4;
    case EnvKind::GridDense:
      return 3;
    case EnvKind::MemoryCorridor:
      return 5;
  }
  return 0;
}

std::size_t Env::action_count() const { return is_grid(kind_) ? 5 : 2; }

int Env::episode_length() const {
  return is_grid(kind_) ? kGridEpisodeSteps : kCorridorEpisodeSteps;
}

int Env::episodes_per_meta() const {
  return is_grid(kind_) ? kGridEpisodes : kCorridorEpisodes;
}

Observation Env::reset_meta(const Task& task) {
  if (task.kind != kind_) throw EnvError("task kind does not match environment");
  if (is_grid(kind_)) {
    if (task.goal.x < 0 || task.goal.x >= kGridSize || task.goal.y < 0 ||
        task.goal.y >= kGridSize || task.goal == Cell{0, 0}) {
      throw EnvError("invalid grid goal");
    }
  }
  task_ = task;
  episode_ = 0;
  meta_done_ = false;
  started_ = true;
  start_episode();
  return observe();
}

void Env::start_episode() {
  pos_ = {0, 0};
  episode_step_ = 0;
  last_dense_ = 0.0;
}

Observation Env::observe_grid(bool episode_start) const {
  Observation obs{scaled(pos_.x), scaled(pos_.y)};
  if (kind_ == EnvKind::GridShow) {
    obs.push_back(episode_start ? scaled(task_.goal.x) : 0.0);
    obs.push_back(episode_start ? scaled(task_.goal.y) : 0.0);
  } else if (kind_ == EnvKind::GridDense) {
    obs.push_back(last_dense_);
  }
  return obs;
}

Observation Env::observe() const {
  if (is_grid(kind_)) return observe_grid(episode_step_ == 0);
  Observation obs(5, 0.0);
  if (episode_step_ == 0) {
    obs[task_.signal == 0 ? kSignalRed : kSignalGreen] = 1.0;
  } else if (episode_step_ <= kCorridorRooms) {
    obs[task_.columns[static_cast<std::size_t>(episode_step_ - 1)] == 0 ? kColumnA
                                                                          : kColumnB] = 1.0;
  } else {
    obs[kTerminalRoom] = 1.0;
  }
  return obs;
}

StepResult Env::step(int action) {
  if (!started_) throw EnvError("step() before reset_meta()");
  if (meta_done_) throw EnvError("step() after the meta-episode finished");
  if (action < 0 || static_cast<std::size_t>(action) >= action_count()) {
    throw EnvError("action " + std::to_string(action) + " out of range");
  }
  StepResult res;
  if (is_grid(kind_)) {
    if (kind_ == EnvKind::GridDense) {
      res.reward = dense_reward(pos_, task_.goal);
    } else {
      res.reward = pos_ == task_.goal ? kGoalReward : kStepPenalty;
    }
    switch (action) {
      case kUp:
        pos_.y = std::min(pos_.y + 1, kGridSize - 1);
        break;
      case kDown:
        pos_.y = std::max(pos_.y - 1, 0);
        break;
      case kLeft:
        pos_.x = std::max(pos_.x - 1, 0);
        break;
      case kRight:
        pos_.x = std::min(pos_.x + 1, kGridSize - 1);
        break;
      default:
        break;
    }
    last_dense_ = kind_ == EnvKind::GridDense ? res.reward : 0.0;
  } else {
    if (episode_step_ >= 1 && episode_step_ <= kCorridorRooms) {
      const int column = task_.columns[static_cast<std::size_t>(episode_step_ - 1)];
      res.reward = action == column ? kRoomReward : 0.0;
    } else if (episode_step_ == kCorridorRooms + 1) {
      res.reward = action == task_.signal ? kFinalCorrect : kFinalWrong;
    }
  }
  ++episode_step_;
  res.next_state = observe();
  if (episode_step_ == episode_length()) {
    res.done = true;
    ++episode_;
    if (episode_ == episodes_per_meta()) {
      meta_done_ = true;
      res.meta_done = true;
    } else {
      start_episode();
    }
  }
  res.observation = res.meta_done ? res.next_state : observe();
  return res;
}

// ---- Reference oracles ----------------------------------------------------------

double dense_reward(Cell position, Cell goal) {
  return -0.1 * static_cast<double>(manhattan(position, goal));
}

double known_goal_episode_return(Cell goal) {
  const int d = manhattan(Cell{0, 0}, goal);
  if (d > kGridEpisodeSteps) throw EnvError("goal unreachable within an episode");
  return (kGridEpisodeSteps - d) * kGoalReward + d * kStepPenalty;
}

int shortest_path_action(Cell from, Cell goal) {
  if (from.x < goal.x) return kRight;
  if (from.x > goal.x) return kLeft;
  if (from.y < goal.y) return kUp;
  if (from.y > goal.y) return kDown;
  return kStay;
}

int corridor_oracle_action(const Task& task, int episode_step) {
  if (episode_step >= 1 && episode_step <= kCorridorRooms) {
    return task.columns[static_cast<std::size_t>(episode_step - 1)];
  }
  if (episode_step == kCorridorRooms + 1) return task.signal;
  return kGoLeft;
}

namespace {

// Cell visiting order of a row-by-row serpentine from the start corner.
std::vector<Cell> serpentine_order() {
  std::vector<Cell> order;
  for (int y = 0; y < kGridSize; ++y) {
    for (int i = 0; i < kGridSize; ++i) {
      order.push_back({y % 2 == 0 ? i : kGridSize - 1 - i, y});
    }
  }
  return order;
}

enum class SearchRule { Serpentine, Nearest };

double sweep_meta_return(EnvKind kind, Cell goal, SearchRule rule) {
  const std::vector<Cell> order = serpentine_order();
  std::array<bool, kGridSize * kGridSize> visited{};
  auto mark = [&](Cell c) { visited[static_cast<std::size_t>(c.y * kGridSize + c.x)] = true; };
  auto seen = [&](Cell c) { return visited[static_cast<std::size_t>(c.y * kGridSize + c.x)]; };
  Env env(kind);
  Task task;
  task.kind = kind;
  task.goal = goal;
  env.reset_meta(task);
  bool known = kind == EnvKind::GridShow;  // the goal is revealed on step 0
  double total = 0.0;
  while (!env.meta_done()) {
    const Cell pos = env.position();
    mark(pos);
    if (pos == goal) known = true;
    int action = kStay;
    if (known) {
      action = shortest_path_action(pos, goal);
    } else {
      std::optional<Cell> target;
      if (rule == SearchRule::Serpentine) {
        for (Cell c : order) {
          if (!seen(c)) {
            target = c;
            break;
          }
        }
      } else {
        int best = 1 << 20;
        for (Cell c : order) {
          if (!seen(c) && manhattan(pos, c) < best) {
            best = manhattan(pos, c);
            target = c;
          }
        }
      }
      if (target) action = shortest_path_action(pos, *target);
    }
    total += env.step(action).reward;
  }
  return total;
}

}  // namespace

double grid_sweep_oracle_return(EnvKind kind) {
  if (!is_grid(kind)) throw EnvError("sweep oracle is defined for grid worlds only");
  double best = -1e300;
  for (SearchRule rule : {SearchRule::Serpentine, SearchRule::Nearest}) {
    double sum = 0.0;
    int n = 0;
    for (int y = 0; y < kGridSize; ++y) {
      for (int x = 0; x < kGridSize; ++x) {
        if (x == 0 && y == 0) continue;
        sum += sweep_meta_return(kind, {x, y}, rule);
        ++n;
      }
    }
    best = std::max(best, sum / n);
  }
  return best;
}

void write_trajectory(std::ostream& out, const std::vector<Transition>& steps,
                      const Task& task) {
  for (const Transition& t : steps) {
    nlohmann::ordered_json rec;
    rec["task"] = task.label_index();
    rec["episode"] = t.episode;
    rec["state"] = t.state;
    rec["action"] = t.action;
    rec["reward"] = t.reward;
    rec["next_state"] = t.next_state;
    rec["done"] = t.done;
    out << rec.dump() << '\n';
  }
}

}  // namespace metarl
