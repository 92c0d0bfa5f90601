#include "stw/agent.hpp"

#include <cmath>
#include <deque>

namespace stw::agent {

namespace d = stw::diff;

void DqnConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("dqn: gamma must lie in [0,1]");
  if (target_sync_interval < 1) throw ConfigError("dqn: sync interval must be >= 1");
  if (batch < 1 || total_steps < 1) throw ConfigError("dqn: bad batch/total_steps");
  if (lr <= 0.0) throw ConfigError("dqn: lr must be positive");
}

diff::MlpSpec q_spec(const DqnConfig& cfg) {
  return {cvae::kGridStateWidth, cfg.q_hidden, envs::kNumActions, d::Head::kLinear};
}

Vec q_values(const DqnConfig& cfg, const d::ParameterStore& qnet,
             const envs::GridState& s) {
  Mat in = cvae::encode_grid_state(s).transpose();
  return d::mlp_forward(q_spec(cfg), qnet, "q", in).row(0).transpose();
}

namespace {

Mat encode_states(const std::vector<QTransition>& batch, bool next) {
  Mat x(static_cast<Eigen::Index>(batch.size()), cvae::kGridStateWidth);
  for (std::size_t i = 0; i < batch.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) =
        cvae::encode_grid_state(next ? batch[i].next : batch[i].state).transpose();
  return x;
}

// r + gamma * max_a' Q(s',a'; target), masked at terminals; constant w.r.t.
// the online network.
Vec td_targets(const DqnConfig& cfg, const d::ParameterStore& target_net,
               const std::vector<QTransition>& batch) {
  Mat next_q = d::mlp_forward(q_spec(cfg), target_net, "q",
                              encode_states(batch, /*next=*/true));
  Vec targets(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double t = batch[i].reward;
    if (!batch[i].done)
      t += cfg.gamma * next_q.row(static_cast<Eigen::Index>(i)).maxCoeff();
    targets(static_cast<Eigen::Index>(i)) = t;
  }
  return targets;
}

Mat action_mask(const std::vector<QTransition>& batch) {
  Mat m = Mat::Zero(static_cast<Eigen::Index>(batch.size()), envs::kNumActions);
  for (std::size_t i = 0; i < batch.size(); ++i)
    m(static_cast<Eigen::Index>(i), static_cast<int>(batch[i].action)) = 1.0;
  return m;
}

}  // namespace

diff::Var build_q_learning_loss(diff::Graph& g, const DqnConfig& cfg,
                                const d::ParameterStore& target_net,
                                const std::vector<QTransition>& batch) {
  if (batch.empty()) throw ConfigError("q_learning_loss: empty batch");
  d::Var q_all = d::mlp_forward(q_spec(cfg), g, "q", g.c(encode_states(batch, false)));
  d::Var q_sa = d::sum_rows(d::mul(q_all, g.c(action_mask(batch))));
  d::Var err = d::sub(g.c(td_targets(cfg, target_net, batch)), q_sa);
  d::Var loss = d::mean_all(d::square(err));
  if (!std::isfinite(loss.val()(0, 0)))
    throw NumericalError("q_loss", "non-finite TD error");
  return loss;
}

double q_learning_loss_value(const DqnConfig& cfg, const d::ParameterStore& qnet,
                             const d::ParameterStore& target_net,
                             const std::vector<QTransition>& batch) {
  d::Graph g(qnet);
  return build_q_learning_loss(g, cfg, target_net, batch).val()(0, 0);
}

envs::Action epsilon_greedy(const Vec& q, double eps, Rng& rng) {
  if (q.size() != envs::kNumActions) throw DomainError("epsilon_greedy: need 4 q-values");
  if (eps < 0.0 || eps > 1.0) throw DomainError("epsilon_greedy: eps must lie in [0,1]");
  if (eps > 0.0 && uniform_open(rng) <= eps) {
    std::uniform_int_distribution<int> pick(0, envs::kNumActions - 1);
    return envs::action_from_index(pick(rng));
  }
  int best = 0;
  for (int i = 1; i < envs::kNumActions; ++i)
    if (q(i) > q(best)) best = i;  // strict: ties go to the lowest index
  return envs::action_from_index(best);
}

OnPolicyResult run_onpolicy(const envs::GridLayout& layout, const DqnConfig& cfg,
                            const ModelTrainerHook& model_hook, std::uint64_t seed,
                            const InspectHook& inspect) {
  cfg.validate();
  layout.validate();
  OnPolicyResult result;
  Rng rng = make_rng(seed, 41);
  Rng init_rng = make_rng(seed, 42);
  d::init_mlp(result.qnet, "q", q_spec(cfg), init_rng);
  d::ParameterStore target_net = result.qnet;

  envs::EpisodeRunner episode(layout);
  std::deque<QTransition> window;
  result.log.reserve(static_cast<std::size_t>(cfg.total_steps));

  for (long long step = 0; step < cfg.total_steps; ++step) {
    double eps = cfg.epsilon.value(step);
    envs::GridState s = episode.state();
    envs::Action a = epsilon_greedy(q_values(cfg, result.qnet, s), eps, rng);
    auto [res, over] = episode.step(a, rng);
    QTransition tr{s, a, res.reward, res.next, res.done};
    window.push_back(tr);
    if (window.size() > static_cast<std::size_t>(cfg.batch)) window.pop_front();
    if (over) {
      episode.reset();
      result.episodes += 1;
    }

    StepRecord rec;
    rec.step = step;
    rec.state = s;
    rec.action = a;
    rec.reward = res.reward;
    rec.epsilon = eps;

    if (window.size() == static_cast<std::size_t>(cfg.batch)) {
      std::vector<QTransition> batch(window.begin(), window.end());
      d::Graph g(result.qnet);
      d::Var loss = build_q_learning_loss(g, cfg, target_net, batch);
      g.backward(loss);
      result.qnet.adam_step(g.grads(), cfg.lr);
      rec.q_loss = loss.val()(0, 0);

      if (model_hook) {
        std::vector<envs::Transition> model_batch;
        model_batch.reserve(batch.size());
        for (const QTransition& t : batch)
          model_batch.push_back({t.state, t.action, t.next});
        rec.vae_loss = model_hook(model_batch);
      }
    }

    if ((step + 1) % cfg.target_sync_interval == 0) target_net = result.qnet;
    if (inspect) inspect(step, result.qnet, target_net);
    result.log.push_back(rec);
  }
  return result;
}

double greedy_success_rate(const envs::GridLayout& layout, const DqnConfig& cfg,
                           const d::ParameterStore& qnet, int episodes, double eps,
                           std::uint64_t seed) {
  Rng rng = make_rng(seed, 43);
  int wins = 0;
  for (int e = 0; e < episodes; ++e) {
    envs::EpisodeRunner runner(layout);
    while (true) {
      envs::Action a = epsilon_greedy(q_values(cfg, qnet, runner.state()), eps, rng);
      auto [res, over] = runner.step(a, rng);
      if (res.done) {
        wins += 1;
        break;
      }
      if (over) break;
    }
  }
  return static_cast<double>(wins) / static_cast<double>(episodes);
}

}  // namespace stw::agent
