#pragma once

// Model-free DQN used to generate on-policy correlated data: Q-network,
// periodically synced target network, epsilon-greedy behaviour, 1-step
// Q-learning loss, and the interleaved environment/DQN/transition-model loop.

#include <cstdint>
#include <functional>
#include <vector>

#include "stw/cvae.hpp"
#include "stw/diff.hpp"
#include "stw/envs.hpp"

namespace stw::agent {

using diff::Mat;
using diff::Vec;

struct DqnConfig {
  double gamma = 0.99;
  int target_sync_interval = 500;
  diff::Schedule epsilon{1.0, 0.10, 0.6, 50000};
  std::vector<int> q_hidden{50, 50, 50};
  double lr = 1e-3;
  long long total_steps = 50000;
  int batch = 32;
  double eval_epsilon = 0.05;
  void validate() const;
};

struct QTransition {
  envs::GridState state;
  envs::Action action = envs::Action::kUp;
  double reward = 0.0;
  envs::GridState next;
  bool done = false;
};

diff::MlpSpec q_spec(const DqnConfig& cfg);

// Plain Q-values for one state.
Vec q_values(const DqnConfig& cfg, const diff::ParameterStore& qnet,
             const envs::GridState& s);

// Mean over the batch of (target - Q(s,a))^2 with
// target = r (terminal) or r + gamma * max_a' Q(s',a'; target net). The
// target network is evaluated outside the tape, so no gradient reaches it.
diff::Var build_q_learning_loss(diff::Graph& g, const DqnConfig& cfg,
                                const diff::ParameterStore& target_net,
                                const std::vector<QTransition>& batch);
double q_learning_loss_value(const DqnConfig& cfg, const diff::ParameterStore& qnet,
                             const diff::ParameterStore& target_net,
                             const std::vector<QTransition>& batch);

// With probability eps a uniform action, otherwise the argmax (ties break to
// the lowest index).
envs::Action epsilon_greedy(const Vec& q, double eps, Rng& rng);

struct StepRecord {
  long long step = 0;
  envs::GridState state;
  envs::Action action = envs::Action::kUp;
  double reward = 0.0;
  double epsilon = 0.0;
  double q_loss = 0.0;
  double vae_loss = 0.0;
};

// Consumes the most recent rollout fragment each environment step; typically
// wraps a transition-model update. Returns the model loss for the step log.
using ModelTrainerHook = std::function<double(const std::vector<envs::Transition>&)>;

struct OnPolicyResult {
  diff::ParameterStore qnet;
  std::vector<StepRecord> log;
  long long episodes = 0;
};

// Interleaves environment steps, DQN updates and transition-model updates on
// the same correlated minibatches (a sliding window of the most recent
// `batch` transitions; no replay buffer). The target network re-syncs every
// target_sync_interval steps.
using InspectHook =
    std::function<void(long long, const diff::ParameterStore&, const diff::ParameterStore&)>;

OnPolicyResult run_onpolicy(const envs::GridLayout& layout, const DqnConfig& cfg,
                            const ModelTrainerHook& model_hook, std::uint64_t seed,
                            const InspectHook& inspect = nullptr);

// Fraction of evaluation episodes that reach the goal under an eps-greedy
// policy within the episode cap.
double greedy_success_rate(const envs::GridLayout& layout, const DqnConfig& cfg,
                           const diff::ParameterStore& qnet, int episodes,
                           double eps, std::uint64_t seed);

}  // namespace stw::agent
