#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "metarl/nets.hpp"

namespace metarl {

enum class EnvKind { Grid, GridShow, GridDense, MemoryCorridor };

std::string_view env_name(EnvKind kind);
EnvKind parse_env(std::string_view name);

inline constexpr int kGridSize = 5;
inline constexpr int kGridEpisodeSteps = 15;
inline constexpr int kGridEpisodes = 4;
inline constexpr int kCorridorRooms = 16;
inline constexpr int kCorridorEpisodes = 2;
// Signal step, one step per room, then the final room.
inline constexpr int kCorridorEpisodeSteps = kCorridorRooms + 2;

enum GridAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };
enum CorridorAction : int { kGoLeft = 0, kGoRight = 1 };

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

int manhattan(Cell a, Cell b);

// One sampled MDP. Grid tasks use `goal`; corridor tasks use `signal` and the
// per-room column bits (0 = column-A, pass left; 1 = column-B, pass right).
struct Task {
  EnvKind kind = EnvKind::Grid;
  Cell goal{};
  int signal = 0;
  std::array<int, kCorridorRooms> columns{};

  // Index of the hot entry of the task label.
  std::size_t label_index() const;
};

std::size_t task_label_width(EnvKind kind);
std::size_t task_count(EnvKind kind);
std::vector<double> task_label(const Task& task);

Task sample_task(EnvKind kind, Rng& rng);

using Observation = std::vector<double>;

struct StepResult {
  Observation observation;  // what the agent sees next (after any episode reset)
  Observation next_state;   // state reached by the action, before any reset
  double reward = 0.0;
  bool done = false;        // inner episode ended
  bool meta_done = false;   // meta-episode ended
};

class EnvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Meta-episode environment: the task persists across `episodes_per_meta()`
// inner episodes; each inner episode restarts from the initial state.
class Env {
 public:
  explicit Env(EnvKind kind);

  EnvKind kind() const { return kind_; }
  std::size_t observation_width() const;
  std::size_t action_count() const;
  int episode_length() const;
  int episodes_per_meta() const;
  int meta_length() const { return episode_length() * episodes_per_meta(); }

  Observation reset_meta(const Task& task);
  StepResult step(int action);

  const Task& task() const { return task_; }
  Cell position() const { return pos_; }
  int episode_step() const { return episode_step_; }
  int episode_index() const { return episode_; }
  bool meta_done() const { return meta_done_; }

 private:
  Observation observe() const;
  Observation observe_grid(bool episode_start) const;
  void start_episode();

  EnvKind kind_;
  Task task_{};
  Cell pos_{};
  int episode_step_ = 0;
  int episode_ = 0;
  bool started_ = false;
  bool meta_done_ = false;
  double last_dense_ = 0.0;
};

// -0.1 per unit of Manhattan distance; 0 at the goal.
double dense_reward(Cell position, Cell goal);

// Return of shortest-path-then-stay over one 15-step episode.
double known_goal_episode_return(Cell goal);

// Greedy shortest-path move toward `goal` (x first, then y), or stay.
int shortest_path_action(Cell from, Cell goal);

// Scripted corridor policy that knows the task: correct column choice in
// every room and the signal-matching final action.
int corridor_oracle_action(const Task& task, int episode_step);

// Mean meta-episode return of a scripted searcher that sweeps unvisited cells
// (continuing across episodes) and exploits the goal once found, averaged over
// every grid goal. Evaluated by simulation.
double grid_sweep_oracle_return(EnvKind kind = EnvKind::Grid);

struct Transition {
  Observation state;
  int action = 0;
  double reward = 0.0;
  Observation next_state;
  bool done = false;
  int episode = 0;
};

// One line-delimited JSON record per transition.
void write_trajectory(std::ostream& out, const std::vector<Transition>& steps,
                      const Task& task);

}  // namespace metarl
