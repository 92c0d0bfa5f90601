#pragma once

// Experiment orchestration: presets, configuration files (JSON/TOML subset),
// training loops, MLP baselines, probe-set metric reports, SVG board renders,
// and in-model rollouts.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stw/agent.hpp"
#include "stw/cvae.hpp"
#include "stw/envs.hpp"

namespace stw::harness {

enum class Domain { kToy, kGridUncorrelated, kGridOnPolicy };
enum class Variant { kMlpDet, kMlpNoise, kVaeGauss, kVaeFlow, kVaeDiscrete };

std::string domain_name(Domain d);
std::string variant_name(Variant v);
Domain domain_from_name(const std::string& s);
Variant variant_from_name(const std::string& s);

struct ExperimentConfig {
  std::string preset = "custom";
  Domain domain = Domain::kToy;
  Variant variant = Variant::kVaeGauss;
  latents::LatentSpec latent;
  cvae::ObjectiveConfig objective;

  int train_size = 2000;  // toy only; grid domains draw fresh transitions
  int val_size = 500;
  int test_size = 2000;
  int batch_size = 64;
  long long total_steps = 30000;
  diff::Schedule lr{0.005, 0.0005, 0.9, 30000};

  std::uint64_t seed = 0;
  int eval_m = 500;        // importance samples for the test NLL
  int noise_inputs = 3;    // stochastic inputs of the noise-MLP baseline

  int probe_count = 200;      // grid probe set
  int probe_samples = 10000;  // model draws per probe
  std::uint64_t probe_seed = 1000;

  std::vector<int> prior_hidden{30, 30};
  std::vector<int> inference_hidden{30, 30};
  std::vector<int> decoder_hidden{50, 50, 50};

  envs::GridLayout layout;  // grid domains
  agent::DqnConfig dqn;     // on-policy domain

  bool is_grid() const { return domain != Domain::kToy; }
  bool is_vae() const {
    return variant == Variant::kVaeGauss || variant == Variant::kVaeFlow ||
           variant == Variant::kVaeDiscrete;
  }
  cvae::ModelConfig model_config() const;
  void validate() const;

  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);

  // Paper presets: "toy" and "grid" carry the published hyperparameters;
  // "grid-onpolicy" adds the DQN defaults.
  static ExperimentConfig make_preset(const std::string& name, Variant variant);
};

// Minimal TOML reader covering the config schema: [section] / [section.sub],
// key = value with strings, integers, floats, booleans and flat arrays, and
// '#' comments. Returns the equivalent JSON text.
std::string toml_to_json(const std::string& text);
ExperimentConfig load_config_file(const std::filesystem::path& path);

// ---- reports ------------------------------------------------------------------

struct RunReport {
  std::string preset, domain, variant;
  std::uint64_t seed = 0;
  bool vlb_valid = false;
  double vlb = 0.0;
  bool nll_valid = false;
  double nll = 0.0;
  // grid probe metrics (valid when probe_count_used > 0)
  int probe_count_used = 0;
  int probe_samples_used = 0;
  std::uint64_t probe_seed = 0;
  double kl_p_phat = 0.0;
  int kl_p_phat_inf = 0;
  double hellinger = 0.0;
  double kl_phat_p = 0.0;
  int kl_phat_p_inf = 0;
  double agent_mass_frac = 0.0;  // probes with >= 0.9 mass on the true agent cell
  // on-policy extras
  bool onpolicy = false;
  double dqn_success = 0.0;
  double wall_violation_rate = 0.0;
  // diagnostics
  int eval_m = 0;
  double final_recon = 0.0;
  double final_div = 0.0;
  bool failed = false;
  std::string failure;
  double train_seconds = 0.0;  // excluded from the canonical form

  // Deterministic serialization (timing stripped); reproducible bit-for-bit
  // from (config, seed) on the same build.
  std::string canonical_json() const;
  std::string full_json() const;
};

std::string reports_to_csv(const std::vector<RunReport>& reports);
std::string reports_to_json(const std::vector<RunReport>& reports);
// Mean over seeds per (preset, variant); inf probes are excluded from means
// and surfaced as counts.
std::string aggregate_json(const std::vector<RunReport>& reports);

// ---- experiment execution --------------------------------------------------------

struct RunOutput {
  RunReport report;
  std::optional<cvae::TransitionModel> model;
  std::optional<diff::ParameterStore> baseline;  // MLP baselines ("net/...")
  std::optional<diff::ParameterStore> qnet;      // on-policy DQN
};

RunOutput run_experiment(const ExperimentConfig& cfg);

// Deterministic toy data draw: x ~ U(-1,1), y ~ p(y|x).
cvae::Dataset draw_toy_dataset(int n, std::uint64_t seed, std::uint64_t stream);
cvae::Dataset draw_grid_dataset(const envs::GridLayout& layout, int n,
                                std::uint64_t seed, std::uint64_t stream);

// Toy datasets on disk: little-endian f64 (x, y) records plus a JSON header
// at "<path>.json" (count, seed).
void write_toy_dataset(const std::filesystem::path& path, const cvae::Dataset& data,
                       std::uint64_t seed);
cvae::Dataset read_toy_dataset(const std::filesystem::path& path);

// Model directory: model.swve (parameter checkpoint) + model.json (sidecar).
void save_model(const cvae::TransitionModel& model, const std::filesystem::path& dir);
cvae::TransitionModel load_model(const std::filesystem::path& dir);

// MLP baselines (toy): deterministic regressor (MSE) and the noise-input
// density network (Gaussian NLL head, no inference network).
diff::MlpSpec mlp_det_spec(const ExperimentConfig& cfg);
diff::MlpSpec mlp_noise_spec(const ExperimentConfig& cfg);
double mlp_det_predict(const ExperimentConfig& cfg, const diff::ParameterStore& net,
                       double x);
// Plain Monte-Carlo NLL over noise draws for the noise-input baseline.
double mlp_noise_nll(const ExperimentConfig& cfg, const diff::ParameterStore& net,
                     const cvae::Dataset& data, int m, std::uint64_t seed);

// ---- probes ---------------------------------------------------------------------

struct Probe {
  envs::GridState state;
  envs::Action action = envs::Action::kUp;
};
std::vector<Probe> make_probe_set(const envs::GridLayout& layout, int count,
                                  std::uint64_t probe_seed);

struct ProbeMetrics {
  double kl_p_phat = 0.0;
  int kl_p_phat_inf = 0;
  double hellinger = 0.0;
  double kl_phat_p = 0.0;
  int kl_phat_p_inf = 0;
  double agent_mass_frac = 0.0;
  int count = 0;
};
ProbeMetrics evaluate_grid_probes(const cvae::TransitionModel& model,
                                  const envs::GridLayout& layout,
                                  const std::vector<Probe>& probes, int samples,
                                  std::uint64_t seed);

// ---- renders and rollouts ----------------------------------------------------------

// Static SVG of the 7x7 board: walls black, entities as circles, per-entity
// marginal next-cell probabilities as shaded boxes (intensity ~ probability).
std::string render_grid_svg(const envs::GridLayout& layout, const envs::GridState& s,
                            envs::Action action, const diff::Mat& samples);
// One SVG per probe, written to out_dir as predict_<i>.svg.
void render_grid_predictions(const cvae::TransitionModel& model,
                             const envs::GridLayout& layout,
                             const std::vector<Probe>& probes,
                             const std::filesystem::path& out_dir, int samples,
                             std::uint64_t seed);

using PolicyFn = std::function<envs::Action(const envs::GridState&, Rng&)>;
PolicyFn dqn_policy(const agent::DqnConfig& cfg, const diff::ParameterStore& qnet,
                    double eps);

struct ModelRollout {
  std::vector<envs::GridState> states;  // states[0] is the start
  std::vector<envs::Action> actions;
  int violations = 0;     // wall-state draws that were re-sampled
  int samples_drawn = 0;  // total next-state draws
  bool aborted = false;   // > 10 consecutive violations at one step
  std::string to_jsonl() const;
};

// Iteratively samples next states from the model only; the real environment
// is never consulted. Wall draws are re-sampled up to 10 times, then abort.
ModelRollout rollout_in_model(const cvae::TransitionModel& model,
                              const envs::GridLayout& layout, const PolicyFn& policy,
                              const envs::GridState& start, int steps, Rng& rng);

// ---- parallel workers ----------------------------------------------------------------

// STOCHWEAVE_THREADS caps the worker pool (default: hardware concurrency).
int worker_threads();
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace stw::harness
