#include <benchmark/benchmark.h>

#include "stw/cvae.hpp"
#include "stw/envs.hpp"
#include "stw/harness.hpp"

using namespace stw;

namespace {

cvae::TransitionModel grid_model(harness::Variant v) {
  auto cfg = harness::ExperimentConfig::make_preset("grid", v);
  return cvae::TransitionModel::make(cfg.model_config(), 0);
}

void BM_MlpForwardGridDecoder(benchmark::State& state) {
  auto cfg = harness::ExperimentConfig::make_preset("grid", harness::Variant::kVaeGauss);
  auto model = cvae::TransitionModel::make(cfg.model_config(), 0);
  diff::Mat in = diff::Mat::Random(32, model.decoder_spec().in);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        diff::mlp_forward(model.decoder_spec(), model.params(), "decoder", in));
  }
}
BENCHMARK(BM_MlpForwardGridDecoder);

void BM_TrainStepGridGauss(benchmark::State& state) {
  auto cfg = harness::ExperimentConfig::make_preset("grid", harness::Variant::kVaeGauss);
  auto model = grid_model(harness::Variant::kVaeGauss);
  Rng rng = make_rng(0);
  auto data = harness::draw_grid_dataset(cfg.layout, 32, 0, 1);
  for (auto _ : state) {
    auto noise = cvae::draw_latent_noise(cfg.latent, 32, cfg.objective.k, rng);
    diff::Graph g(model.params());
    diff::Var loss = cvae::build_train_loss(g, model, data, noise, cfg.objective, 1.0);
    g.backward(loss);
    model.params().adam_step(g.grads(), 1e-4);
  }
}
BENCHMARK(BM_TrainStepGridGauss);

void BM_GridOracle(benchmark::State& state) {
  auto layout = envs::GridLayout::default_layout();
  auto states = envs::enumerate_valid_states(layout);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        envs::grid_true_next_dist(layout, states[i % states.size()], envs::Action::kLeft));
    ++i;
  }
}
BENCHMARK(BM_GridOracle);

void BM_SamplePrediction(benchmark::State& state) {
  auto model = grid_model(harness::Variant::kVaeGauss);
  auto layout = envs::GridLayout::default_layout();
  Rng rng = make_rng(1);
  diff::Vec x = cvae::encode_grid_x(layout.start_state(), envs::Action::kUp);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        cvae::sample_prediction(model, x, static_cast<int>(state.range(0)), rng));
  }
}
BENCHMARK(BM_SamplePrediction)->Arg(1)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
