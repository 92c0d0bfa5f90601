#pragma once

// The two experimental domains with exact ground-truth oracles: the piecewise
// conditional Gaussian-mixture toy function and a 7x7 stochastic gridworld
// with two ghosts.

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "stw/common.hpp"
#include "stw/metrics.hpp"

namespace stw::envs {

// ---- toy function -------------------------------------------------------------

struct ToySpec {
  std::array<double, 5> rho{0.2, 0.8, 0.3, 0.5, 0.2};
  double sigma = 0.1;
  double boundary_lo = -0.3;
  double boundary_hi = 0.3;
};

struct ToyMixture {
  std::vector<double> weights;
  std::vector<double> means;
};

// Mixture components of p(y|x) on the branch containing x.
ToyMixture toy_components(const ToySpec& spec, double x);
double toy_sample(const ToySpec& spec, double x, Rng& rng);
double toy_density(const ToySpec& spec, double x, double y);
// Conditional mean, the target a squared-error regressor converges to.
double toy_conditional_mean(const ToySpec& spec, double x);

// ---- gridworld -----------------------------------------------------------------

enum class Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
inline constexpr int kNumActions = 4;
Action action_from_index(int i);
const char* action_name(Action a);

struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

struct GridState {
  Cell agent, ghost1, ghost2;
  auto operator<=>(const GridState&) const = default;
  std::array<std::uint8_t, 6> to_bytes() const;
  static GridState from_bytes(const std::array<std::uint8_t, 6>& b);
};

struct GridLayout {
  int width = 7;
  int height = 7;
  std::set<Cell> walls;
  Cell goal{6, 6};
  Cell agent_start{0, 0};
  Cell ghost1_start{3, 3};
  Cell ghost2_start{3, 5};
  double goal_reward = 10.0;
  double step_reward = 0.0;
  int episode_cap = 100;

  bool in_grid(Cell c) const {
    return c.x >= 0 && c.x < width && c.y >= 0 && c.y < height;
  }
  bool is_wall(Cell c) const { return walls.count(c) != 0; }
  bool open(Cell c) const { return in_grid(c) && !is_wall(c); }
  std::vector<Cell> open_cells() const;
  void validate() const;  // starts/goal open, coordinates in range, goal reachable

  GridState start_state() const { return {agent_start, ghost1_start, ghost2_start}; }

  std::string to_json() const;
  static GridLayout from_json(const std::string& text);
  std::uint64_t hash() const;  // FNV-1a of the canonical JSON

  // Two open corridors (bottom row region and a central vertical gap) through
  // otherwise walled bands; approximates the published figures.
  static GridLayout default_layout();
};

struct StepResult {
  GridState next;
  double reward = 0.0;
  bool done = false;  // goal reached; the episode cap is enforced by EpisodeRunner
};

// Agent moves deterministically (blocked moves keep it in place). Ghost 1
// moves uniformly over available directions; ghost 2 with weights
// left/right/up/down = 0.4/0.4/0.05/0.05 renormalized over available
// directions. A fully blocked ghost stays put.
StepResult grid_step(const GridLayout& layout, const GridState& state, Action action,
                     Rng& rng);

// Exact joint next-state distribution: deterministic agent move x ghost-1
// options x ghost-2 options (support size <= 16).
metrics::DistTable<GridState> grid_true_next_dist(const GridLayout& layout,
                                                  const GridState& state,
                                                  Action action);

// Enforces the layout's episode cap on top of grid_step.
class EpisodeRunner {
 public:
  explicit EpisodeRunner(const GridLayout& layout)
      : layout_(&layout), state_(layout.start_state()) {}
  const GridState& state() const { return state_; }
  int steps() const { return steps_; }
  // Returns (result, episode_over). episode_over is true on goal or cap.
  std::pair<StepResult, bool> step(Action action, Rng& rng);
  void reset() {
    state_ = layout_->start_state();
    steps_ = 0;
  }

 private:
  const GridLayout* layout_;
  GridState state_;
  int steps_ = 0;
};

struct Transition {
  GridState state;
  Action action = Action::kUp;
  GridState next;
};

// Uniform draw over non-wall placements for all three entities and a uniform
// action, followed by one environment step.
Transition sample_uncorrelated_transition(const GridLayout& layout, Rng& rng);

// Binary dataset: 13 bytes per record (6xu8 state, u8 action, 6xu8 next),
// plus a JSON header "<path>.json" carrying count, seed and layout hash.
void write_transitions(const std::filesystem::path& path,
                       const std::vector<Transition>& data, std::uint64_t seed,
                       const GridLayout& layout);
std::vector<Transition> read_transitions(const std::filesystem::path& path);

// All states whose three entities sit on open cells.
std::vector<GridState> enumerate_valid_states(const GridLayout& layout);

}  // namespace stw::envs
