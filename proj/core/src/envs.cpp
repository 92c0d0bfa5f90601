#include "stw/envs.hpp"

#include <cmath>
#include <deque>
#include <fstream>

#include <nlohmann/json.hpp>

namespace stw::envs {

using json = nlohmann::ordered_json;

// ---- toy function -------------------------------------------------------------

ToyMixture toy_components(const ToySpec& spec, double x) {
  if (x < -1.0 || x > 1.0) throw DomainError("toy: x must lie in [-1, 1]");
  ToyMixture m;
  if (x < spec.boundary_lo) {
    m.weights = {1.0};
    m.means = {2.5};
  } else if (x < spec.boundary_hi) {
    m.weights = {spec.rho[0], spec.rho[1]};
    m.means = {4.0 * x, -4.0 * x};
  } else {
    m.weights = {spec.rho[2], spec.rho[3], spec.rho[4]};
    m.means = {5.0 + std::log(x + 1.0), -x + 0.2, 5.0 * x * x};
  }
  return m;
}

double toy_sample(const ToySpec& spec, double x, Rng& rng) {
  ToyMixture m = toy_components(spec, x);
  double u = uniform_open(rng);
  std::size_t pick = m.weights.size() - 1;
  double acc = 0.0;
  for (std::size_t i = 0; i < m.weights.size(); ++i) {
    acc += m.weights[i];
    if (u <= acc) {
      pick = i;
      break;
    }
  }
  return m.means[pick] + spec.sigma * normal(rng);
}

double toy_density(const ToySpec& spec, double x, double y) {
  ToyMixture m = toy_components(spec, x);
  const double inv_norm = 1.0 / (spec.sigma * std::sqrt(2.0 * M_PI));
  double p = 0.0;
  for (std::size_t i = 0; i < m.weights.size(); ++i) {
    double z = (y - m.means[i]) / spec.sigma;
    p += m.weights[i] * inv_norm * std::exp(-0.5 * z * z);
  }
  return p;
}

double toy_conditional_mean(const ToySpec& spec, double x) {
  ToyMixture m = toy_components(spec, x);
  double mean = 0.0;
  for (std::size_t i = 0; i < m.weights.size(); ++i) mean += m.weights[i] * m.means[i];
  return mean;
}

// ---- gridworld -----------------------------------------------------------------

Action action_from_index(int i) {
  if (i < 0 || i >= kNumActions) throw DomainError("bad action index");
  return static_cast<Action>(i);
}

const char* action_name(Action a) {
  switch (a) {
    case Action::kUp: return "up";
    case Action::kDown: return "down";
    case Action::kLeft: return "left";
    case Action::kRight: return "right";
  }
  return "?";
}

namespace {

Cell moved(Cell c, Action a) {
  switch (a) {
    case Action::kUp: return {c.x, c.y + 1};
    case Action::kDown: return {c.x, c.y - 1};
    case Action::kLeft: return {c.x - 1, c.y};
    case Action::kRight: return {c.x + 1, c.y};
  }
  return c;
}

// Ghost options in fixed action order (up, down, left, right) with their
// renormalized probabilities. A fully blocked ghost stays put with weight 1.
std::vector<std::pair<Cell, double>> ghost_options(const GridLayout& layout, Cell c,
                                                   const std::array<double, 4>& bias) {
  std::vector<std::pair<Cell, double>> opts;
  double total = 0.0;
  for (int i = 0; i < kNumActions; ++i) {
    Cell n = moved(c, static_cast<Action>(i));
    if (layout.open(n)) {
      opts.emplace_back(n, bias[static_cast<std::size_t>(i)]);
      total += bias[static_cast<std::size_t>(i)];
    }
  }
  if (opts.empty() || total <= 0.0) return {{c, 1.0}};
  for (auto& [cell, w] : opts) w /= total;
  return opts;
}

constexpr std::array<double, 4> kGhost1Bias{0.25, 0.25, 0.25, 0.25};
// up, down, left, right; the 10% vertical mass splits 5%/5%.
constexpr std::array<double, 4> kGhost2Bias{0.05, 0.05, 0.4, 0.4};

Cell sample_option(const std::vector<std::pair<Cell, double>>& opts, Rng& rng) {
  double u = uniform_open(rng);
  double acc = 0.0;
  for (const auto& [cell, w] : opts) {
    acc += w;
    if (u <= acc) return cell;
  }
  return opts.back().first;
}

void check_state(const GridLayout& layout, const GridState& s) {
  for (Cell c : {s.agent, s.ghost1, s.ghost2})
    if (!layout.open(c)) throw DomainError("grid state occupies a wall or off-grid cell");
}

}  // namespace

std::array<std::uint8_t, 6> GridState::to_bytes() const {
  return {static_cast<std::uint8_t>(agent.x),  static_cast<std::uint8_t>(agent.y),
          static_cast<std::uint8_t>(ghost1.x), static_cast<std::uint8_t>(ghost1.y),
          static_cast<std::uint8_t>(ghost2.x), static_cast<std::uint8_t>(ghost2.y)};
}

GridState GridState::from_bytes(const std::array<std::uint8_t, 6>& b) {
  return {{b[0], b[1]}, {b[2], b[3]}, {b[4], b[5]}};
}

std::vector<Cell> GridLayout::open_cells() const {
  std::vector<Cell> cells;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (open({x, y})) cells.push_back({x, y});
  return cells;
}

void GridLayout::validate() const {
  if (width != 7 || height != 7) throw ConfigError("layout: the world is 7x7");
  for (Cell c : walls)
    if (!in_grid(c)) throw ConfigError("layout: wall outside the grid");
  for (Cell c : {goal, agent_start, ghost1_start, ghost2_start})
    if (!open(c)) throw ConfigError("layout: start or goal blocked");
  if (episode_cap < 1) throw ConfigError("layout: episode cap must be >= 1");
  // agent-only BFS: the goal must be reachable from the start
  std::set<Cell> seen{agent_start};
  std::deque<Cell> queue{agent_start};
  bool reachable = false;
  while (!queue.empty()) {
    Cell c = queue.front();
    queue.pop_front();
    if (c == goal) {
      reachable = true;
      break;
    }
    for (int i = 0; i < kNumActions; ++i) {
      Cell n = moved(c, static_cast<Action>(i));
      if (open(n) && !seen.count(n)) {
        seen.insert(n);
        queue.push_back(n);
      }
    }
  }
  if (!reachable) throw ConfigError("layout: goal unreachable from agent start");
}

GridLayout GridLayout::default_layout() {
  GridLayout l;
  for (int x : {0, 1, 2, 4, 5, 6}) {
    l.walls.insert({x, 2});
    l.walls.insert({x, 4});
  }
  l.goal = {6, 6};
  l.agent_start = {0, 0};
  l.ghost1_start = {3, 3};
  l.ghost2_start = {3, 5};
  l.validate();
  return l;
}

std::string GridLayout::to_json() const {
  json j;
  j["width"] = width;
  j["height"] = height;
  json walls_j = json::array();
  for (Cell c : walls) walls_j.push_back({c.x, c.y});
  j["walls"] = walls_j;
  j["goal"] = {goal.x, goal.y};
  j["agent_start"] = {agent_start.x, agent_start.y};
  j["ghost1_start"] = {ghost1_start.x, ghost1_start.y};
  j["ghost2_start"] = {ghost2_start.x, ghost2_start.y};
  j["goal_reward"] = goal_reward;
  j["step_reward"] = step_reward;
  j["episode_cap"] = episode_cap;
  return j.dump();
}

GridLayout GridLayout::from_json(const std::string& text) {
  json j = json::parse(text);
  GridLayout l;
  l.width = j.at("width").get<int>();
  l.height = j.at("height").get<int>();
  for (const auto& w : j.at("walls")) l.walls.insert({w.at(0).get<int>(), w.at(1).get<int>()});
  auto cell = [&](const char* key) {
    return Cell{j.at(key).at(0).get<int>(), j.at(key).at(1).get<int>()};
  };
  l.goal = cell("goal");
  l.agent_start = cell("agent_start");
  l.ghost1_start = cell("ghost1_start");
  l.ghost2_start = cell("ghost2_start");
  if (j.contains("goal_reward")) l.goal_reward = j.at("goal_reward").get<double>();
  if (j.contains("step_reward")) l.step_reward = j.at("step_reward").get<double>();
  if (j.contains("episode_cap")) l.episode_cap = j.at("episode_cap").get<int>();
  l.validate();
  return l;
}

std::uint64_t GridLayout::hash() const { return fnv1a(to_json()); }

StepResult grid_step(const GridLayout& layout, const GridState& state, Action action,
                     Rng& rng) {
  check_state(layout, state);
  StepResult r;
  Cell target = moved(state.agent, action);
  r.next.agent = layout.open(target) ? target : state.agent;
  r.next.ghost1 = sample_option(ghost_options(layout, state.ghost1, kGhost1Bias), rng);
  r.next.ghost2 = sample_option(ghost_options(layout, state.ghost2, kGhost2Bias), rng);
  if (r.next.agent == layout.goal) {
    r.reward = layout.goal_reward;
    r.done = true;
  } else {
    r.reward = layout.step_reward;
  }
  return r;
}

metrics::DistTable<GridState> grid_true_next_dist(const GridLayout& layout,
                                                  const GridState& state,
                                                  Action action) {
  check_state(layout, state);
  Cell target = moved(state.agent, action);
  Cell agent_next = layout.open(target) ? target : state.agent;
  auto g1 = ghost_options(layout, state.ghost1, kGhost1Bias);
  auto g2 = ghost_options(layout, state.ghost2, kGhost2Bias);
  std::map<GridState, double> dist;
  for (const auto& [c1, w1] : g1)
    for (const auto& [c2, w2] : g2) dist[{agent_next, c1, c2}] += w1 * w2;
  return metrics::DistTable<GridState>::from_map(dist);
}

std::pair<StepResult, bool> EpisodeRunner::step(Action action, Rng& rng) {
  StepResult r = grid_step(*layout_, state_, action, rng);
  steps_ += 1;
  state_ = r.next;
  bool over = r.done || steps_ >= layout_->episode_cap;
  return {r, over};
}

Transition sample_uncorrelated_transition(const GridLayout& layout, Rng& rng) {
  std::vector<Cell> cells = layout.open_cells();
  std::uniform_int_distribution<std::size_t> pick(0, cells.size() - 1);
  std::uniform_int_distribution<int> act(0, kNumActions - 1);
  Transition t;
  t.state = {cells[pick(rng)], cells[pick(rng)], cells[pick(rng)]};
  t.action = static_cast<Action>(act(rng));
  t.next = grid_step(layout, t.state, t.action, rng).next;
  return t;
}

void write_transitions(const std::filesystem::path& path,
                       const std::vector<Transition>& data, std::uint64_t seed,
                       const GridLayout& layout) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open dataset for writing: " + path.string());
  for (const Transition& t : data) {
    auto s = t.state.to_bytes();
    auto n = t.next.to_bytes();
    out.write(reinterpret_cast<const char*>(s.data()), 6);
    auto a = static_cast<std::uint8_t>(t.action);
    out.write(reinterpret_cast<const char*>(&a), 1);
    out.write(reinterpret_cast<const char*>(n.data()), 6);
  }
  json header;
  header["count"] = data.size();
  header["seed"] = seed;
  header["layout_hash"] = layout.hash();
  std::ofstream hout(path.string() + ".json");
  hout << header.dump(2) << "\n";
}

std::vector<Transition> read_transitions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset: " + path.string());
  std::vector<Transition> data;
  while (true) {
    std::array<std::uint8_t, 13> rec{};
    in.read(reinterpret_cast<char*>(rec.data()), 13);
    if (!in) break;
    Transition t;
    t.state = GridState::from_bytes({rec[0], rec[1], rec[2], rec[3], rec[4], rec[5]});
    t.action = action_from_index(rec[6]);
    t.next = GridState::from_bytes({rec[7], rec[8], rec[9], rec[10], rec[11], rec[12]});
    data.push_back(t);
  }
  return data;
}

std::vector<GridState> enumerate_valid_states(const GridLayout& layout) {
  std::vector<Cell> cells = layout.open_cells();
  std::vector<GridState> states;
  states.reserve(cells.size() * cells.size() * cells.size());
  for (Cell a : cells)
    for (Cell g1 : cells)
      for (Cell g2 : cells) states.push_back({a, g1, g2});
  return states;
}

}  // namespace stw::envs
