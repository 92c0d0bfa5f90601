#include <array>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "stw/harness.hpp"

namespace stw::harness {

using json = nlohmann::ordered_json;

namespace {

constexpr int kCell = 40;
constexpr int kPad = 10;

// board y grows upward; svg y grows downward
double svg_x(int x) { return kPad + x * kCell; }
double svg_y(const envs::GridLayout& l, int y) { return kPad + (l.height - 1 - y) * kCell; }

struct EntityStyle {
  const char* name;
  const char* color;
};
constexpr std::array<EntityStyle, 3> kEntities{
    EntityStyle{"agent", "#2e8b2e"},
    EntityStyle{"ghost1", "#d03030"},
    EntityStyle{"ghost2", "#3050d0"},
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

}  // namespace

std::string render_grid_svg(const envs::GridLayout& layout, const envs::GridState& s,
                            envs::Action action, const diff::Mat& samples) {
  const int w = 2 * kPad + layout.width * kCell;
  const int h = 2 * kPad + layout.height * kCell + 20;
  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) + "\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" fill=\"white\"/>\n";

  // per-entity marginal next-cell frequencies
  const auto n = samples.rows();
  std::array<std::map<std::pair<int, int>, double>, 3> marginals;
  for (Eigen::Index r = 0; r < n; ++r)
    for (int e = 0; e < 3; ++e) {
      int x = static_cast<int>(samples(r, 2 * e));
      int y = static_cast<int>(samples(r, 2 * e + 1));
      marginals[static_cast<std::size_t>(e)][{x, y}] += 1.0 / static_cast<double>(n);
    }
  for (int e = 0; e < 3; ++e)
    for (const auto& [cell, p] : marginals[static_cast<std::size_t>(e)]) {
      svg += "<rect x=\"" + num(svg_x(cell.first)) + "\" y=\"" +
             num(svg_y(layout, cell.second)) + "\" width=\"" + std::to_string(kCell) +
             "\" height=\"" + std::to_string(kCell) + "\" fill=\"" +
             kEntities[static_cast<std::size_t>(e)].color + "\" fill-opacity=\"" +
             num(std::min(1.0, p)) + "\"/>\n";
    }

  // walls and grid lines
  for (const envs::Cell& c : layout.walls)
    svg += "<rect x=\"" + num(svg_x(c.x)) + "\" y=\"" + num(svg_y(layout, c.y)) +
           "\" width=\"" + std::to_string(kCell) + "\" height=\"" +
           std::to_string(kCell) + "\" fill=\"black\"/>\n";
  for (int i = 0; i <= layout.width; ++i)
    svg += "<line x1=\"" + num(svg_x(i)) + "\" y1=\"" + num(static_cast<double>(kPad)) +
           "\" x2=\"" + num(svg_x(i)) + "\" y2=\"" +
           num(kPad + layout.height * static_cast<double>(kCell)) +
           "\" stroke=\"#999\" stroke-width=\"1\"/>\n";
  for (int i = 0; i <= layout.height; ++i)
    svg += "<line x1=\"" + num(static_cast<double>(kPad)) + "\" y1=\"" +
           num(kPad + i * static_cast<double>(kCell)) + "\" x2=\"" +
           num(kPad + layout.width * static_cast<double>(kCell)) + "\" y2=\"" +
           num(kPad + i * static_cast<double>(kCell)) +
           "\" stroke=\"#999\" stroke-width=\"1\"/>\n";

  // goal marker
  svg += "<rect x=\"" + num(svg_x(layout.goal.x) + 4) + "\" y=\"" +
         num(svg_y(layout, layout.goal.y) + 4) + "\" width=\"" +
         std::to_string(kCell - 8) + "\" height=\"" + std::to_string(kCell - 8) +
         "\" fill=\"none\" stroke=\"#b8860b\" stroke-width=\"3\"/>\n";

  // entities at their current cells
  const envs::Cell cells[3] = {s.agent, s.ghost1, s.ghost2};
  for (int e = 0; e < 3; ++e)
    svg += "<circle cx=\"" + num(svg_x(cells[e].x) + kCell / 2.0) + "\" cy=\"" +
           num(svg_y(layout, cells[e].y) + kCell / 2.0) + "\" r=\"" +
           num(kCell * 0.3) + "\" fill=\"" + kEntities[static_cast<std::size_t>(e)].color +
           "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";

  svg += "<text x=\"" + num(static_cast<double>(kPad)) + "\" y=\"" +
         num(kPad + layout.height * static_cast<double>(kCell) + 15) +
         "\" font-family=\"sans-serif\" font-size=\"13\">action: " +
         envs::action_name(action) + "</text>\n";
  svg += "</svg>\n";
  return svg;
}

void render_grid_predictions(const cvae::TransitionModel& model,
                             const envs::GridLayout& layout,
                             const std::vector<Probe>& probes,
                             const std::filesystem::path& out_dir, int samples,
                             std::uint64_t seed) {
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < probes.size(); ++i) {
    Rng rng = make_rng(seed, 0xa000 + i);
    diff::Mat draws = cvae::sample_prediction(
        model, cvae::encode_grid_x(probes[i].state, probes[i].action), samples, rng);
    std::ofstream out(out_dir / ("predict_" + std::to_string(i) + ".svg"));
    out << render_grid_svg(layout, probes[i].state, probes[i].action, draws);
  }
}

PolicyFn dqn_policy(const agent::DqnConfig& cfg, const diff::ParameterStore& qnet,
                    double eps) {
  return [&cfg, &qnet, eps](const envs::GridState& s, Rng& rng) {
    return agent::epsilon_greedy(agent::q_values(cfg, qnet, s), eps, rng);
  };
}

std::string ModelRollout::to_jsonl() const {
  std::string out;
  for (std::size_t i = 0; i < states.size(); ++i) {
    json j;
    j["step"] = i;
    auto b = states[i].to_bytes();
    j["state"] = {b[0], b[1], b[2], b[3], b[4], b[5]};
    if (i < actions.size()) j["action"] = envs::action_name(actions[i]);
    out += j.dump() + "\n";
  }
  json tail;
  tail["violations"] = violations;
  tail["samples_drawn"] = samples_drawn;
  tail["aborted"] = aborted;
  out += tail.dump() + "\n";
  return out;
}

ModelRollout rollout_in_model(const cvae::TransitionModel& model,
                              const envs::GridLayout& layout, const PolicyFn& policy,
                              const envs::GridState& start, int steps, Rng& rng) {
  ModelRollout roll;
  roll.states.push_back(start);
  envs::GridState cur = start;
  for (int t = 0; t < steps; ++t) {
    envs::Action a = policy(cur, rng);
    roll.actions.push_back(a);
    diff::Vec x = cvae::encode_grid_x(cur, a);
    bool ok = false;
    for (int attempt = 0; attempt < 10; ++attempt) {
      diff::Mat draw = cvae::sample_prediction(model, x, 1, rng);
      roll.samples_drawn += 1;
      std::array<std::uint8_t, 6> b{};
      for (int c = 0; c < 6; ++c)
        b[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(draw(0, c));
      envs::GridState next = envs::GridState::from_bytes(b);
      bool valid = layout.open(next.agent) && layout.open(next.ghost1) &&
                   layout.open(next.ghost2);
      if (valid) {
        cur = next;
        roll.states.push_back(next);
        ok = true;
        break;
      }
      roll.violations += 1;
    }
    if (!ok) {
      roll.aborted = true;
      break;
    }
  }
  return roll;
}

}  // namespace stw::harness
