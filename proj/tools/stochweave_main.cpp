// stochweave CLI: gen-data, train, eval, rollout, render, report.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stw/harness.hpp"

namespace fs = std::filesystem;
using namespace stw;
using json = nlohmann::ordered_json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string preset;
  std::string variant = "vae-gauss";
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "TOML or JSON experiment config");
  cmd->add_option("--preset", args.preset, "preset name: toy | grid | grid-onpolicy");
  cmd->add_option("--variant", args.variant,
                  "mlp-det | mlp-noise | vae-gauss | vae-flow | vae-discrete");
  cmd->add_option("--seed", args.seed, "run seed");
  cmd->add_option("--out", args.out, "output directory");
}

harness::ExperimentConfig resolve_config(const CommonArgs& args) {
  harness::ExperimentConfig cfg;
  if (!args.config_path.empty()) {
    cfg = harness::load_config_file(args.config_path);
  } else {
    std::string preset = args.preset.empty() ? "toy" : args.preset;
    cfg = harness::ExperimentConfig::make_preset(preset, harness::variant_from_name(args.variant));
  }
  if (args.seed) cfg.seed = *args.seed;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void write_run_reports(const fs::path& dir, const harness::RunReport& rep) {
  write_file(dir / "report.json", rep.full_json() + "\n");
  write_file(dir / "report.canonical.json", rep.canonical_json() + "\n");
  write_file(dir / "report.csv", harness::reports_to_csv({rep}));
}

int cmd_gen_data(const CommonArgs& args) {
  harness::ExperimentConfig cfg = resolve_config(args);
  fs::create_directories(args.out);
  if (cfg.domain == harness::Domain::kToy) {
    harness::write_toy_dataset(fs::path(args.out) / "toy_train.bin",
                               harness::draw_toy_dataset(cfg.train_size, cfg.seed, 1), cfg.seed);
    harness::write_toy_dataset(fs::path(args.out) / "toy_val.bin",
                               harness::draw_toy_dataset(cfg.val_size, cfg.seed, 2), cfg.seed);
    harness::write_toy_dataset(fs::path(args.out) / "toy_test.bin",
                               harness::draw_toy_dataset(cfg.test_size, cfg.seed, 3), cfg.seed);
  } else {
    write_file(fs::path(args.out) / "layout.json", cfg.layout.to_json() + "\n");
    Rng val_rng = make_rng(cfg.seed, 2), test_rng = make_rng(cfg.seed, 3);
    std::vector<envs::Transition> val, test;
    for (int i = 0; i < cfg.val_size; ++i)
      val.push_back(envs::sample_uncorrelated_transition(cfg.layout, val_rng));
    for (int i = 0; i < cfg.test_size; ++i)
      test.push_back(envs::sample_uncorrelated_transition(cfg.layout, test_rng));
    envs::write_transitions(fs::path(args.out) / "grid_val.bin", val, cfg.seed, cfg.layout);
    envs::write_transitions(fs::path(args.out) / "grid_test.bin", test, cfg.seed, cfg.layout);
  }
  std::cout << "datasets written to " << args.out << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  harness::ExperimentConfig cfg = resolve_config(args);
  fs::create_directories(args.out);
  write_file(fs::path(args.out) / "config.json", cfg.to_json() + "\n");
  harness::RunOutput run = harness::run_experiment(cfg);
  if (run.model) harness::save_model(*run.model, args.out);
  if (run.baseline) run.baseline->save(fs::path(args.out) / "baseline.swve");
  if (run.qnet) run.qnet->save(fs::path(args.out) / "qnet.swve");
  write_run_reports(args.out, run.report);
  std::cout << run.report.full_json() << "\n";
  if (run.report.failed) {
    std::cerr << "training failed: " << run.report.failure << "\n";
    return 3;
  }
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& model_dir) {
  harness::ExperimentConfig cfg = resolve_config(args);
  cvae::TransitionModel model = harness::load_model(model_dir);
  harness::RunReport rep;
  rep.preset = cfg.preset;
  rep.domain = harness::domain_name(cfg.domain);
  rep.variant = harness::variant_name(cfg.variant);
  rep.seed = cfg.seed;
  rep.eval_m = cfg.eval_m;
  cvae::Dataset test_ds =
      cfg.domain == harness::Domain::kToy
          ? harness::draw_toy_dataset(cfg.test_size, cfg.seed, 3)
          : harness::draw_grid_dataset(cfg.layout, cfg.test_size, cfg.seed, 3);
  Rng eval_rng = make_rng(cfg.seed, 6);
  rep.vlb = cvae::eval_vr_bound(model, test_ds, cfg.objective.k, cfg.objective.alpha,
                                eval_rng);
  rep.vlb_valid = true;
  rep.nll = cvae::test_nll(model, test_ds, cfg.eval_m, cfg.seed ^ 0x7e57ULL);
  rep.nll_valid = true;
  if (cfg.domain != harness::Domain::kToy && cfg.probe_count > 0) {
    auto probes = harness::make_probe_set(cfg.layout, cfg.probe_count, cfg.probe_seed);
    harness::ProbeMetrics pm = harness::evaluate_grid_probes(
        model, cfg.layout, probes, cfg.probe_samples, cfg.probe_seed ^ cfg.seed);
    rep.probe_count_used = pm.count;
    rep.probe_samples_used = cfg.probe_samples;
    rep.probe_seed = cfg.probe_seed;
    rep.kl_p_phat = pm.kl_p_phat;
    rep.kl_p_phat_inf = pm.kl_p_phat_inf;
    rep.hellinger = pm.hellinger;
    rep.kl_phat_p = pm.kl_phat_p;
    rep.kl_phat_p_inf = pm.kl_phat_p_inf;
    rep.agent_mass_frac = pm.agent_mass_frac;
  }
  write_run_reports(args.out, rep);
  std::cout << rep.full_json() << "\n";
  return 0;
}

int cmd_rollout(const CommonArgs& args, const std::string& model_dir, int steps) {
  harness::ExperimentConfig cfg = resolve_config(args);
  if (cfg.domain == harness::Domain::kToy)
    throw ConfigError("rollout requires a grid config");
  cvae::TransitionModel model = harness::load_model(model_dir);
  harness::PolicyFn policy;
  diff::ParameterStore qnet;
  if (fs::exists(fs::path(model_dir) / "qnet.swve")) {
    qnet = diff::ParameterStore::load(fs::path(model_dir) / "qnet.swve");
    policy = harness::dqn_policy(cfg.dqn, qnet, cfg.dqn.eval_epsilon);
  } else {
    policy = [](const envs::GridState&, Rng& rng) {
      std::uniform_int_distribution<int> pick(0, envs::kNumActions - 1);
      return envs::action_from_index(pick(rng));
    };
  }
  Rng rng = make_rng(cfg.seed, 0x0110);
  harness::ModelRollout roll = harness::rollout_in_model(
      model, cfg.layout, policy, cfg.layout.start_state(), steps, rng);
  fs::create_directories(args.out);
  write_file(fs::path(args.out) / "trajectory.jsonl", roll.to_jsonl());
  // per-step renders of the model's predictive marginals
  for (std::size_t i = 0; i + 1 < roll.states.size(); ++i) {
    Rng render_rng = make_rng(cfg.seed, 0xb000 + i);
    diff::Mat draws = cvae::sample_prediction(
        model, cvae::encode_grid_x(roll.states[i], roll.actions[i]), 10000, render_rng);
    write_file(fs::path(args.out) / ("rollout_" + std::to_string(i) + ".svg"),
               harness::render_grid_svg(cfg.layout, roll.states[i], roll.actions[i], draws));
  }
  std::cout << "rollout: " << roll.states.size() - 1 << " steps, " << roll.violations
            << " wall violations in " << roll.samples_drawn << " draws"
            << (roll.aborted ? " (aborted)" : "") << "\n";
  return 0;
}

int cmd_render(const CommonArgs& args, const std::string& model_dir, int count,
               int samples) {
  harness::ExperimentConfig cfg = resolve_config(args);
  if (cfg.domain == harness::Domain::kToy) throw ConfigError("render requires a grid config");
  cvae::TransitionModel model = harness::load_model(model_dir);
  auto probes = harness::make_probe_set(cfg.layout, count, cfg.probe_seed);
  harness::render_grid_predictions(model, cfg.layout, probes, args.out, samples,
                                   cfg.probe_seed ^ cfg.seed);
  std::cout << count << " renders written to " << args.out << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_dir) {
  std::vector<harness::RunReport> reports;
  for (const std::string& input : inputs) {
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
      for (const auto& entry : fs::recursive_directory_iterator(input))
        if (entry.path().filename() == "report.json") files.push_back(entry.path());
    } else {
      files.push_back(input);
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
      std::ifstream in(f);
      if (!in) throw ConfigError("cannot open report: " + f.string());
      json j = json::parse(in);
      harness::RunReport r;
      r.preset = j.at("preset").get<std::string>();
      r.domain = j.at("domain").get<std::string>();
      r.variant = j.at("variant").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      if (j.at("vlb").is_number()) {
        r.vlb = j.at("vlb").get<double>();
        r.vlb_valid = true;
      }
      if (j.at("nll").is_number()) {
        r.nll = j.at("nll").get<double>();
        r.nll_valid = true;
      }
      r.eval_m = j.value("eval_m", 0);
      if (j.contains("probes")) {
        const json& p = j.at("probes");
        r.probe_count_used = p.at("count").get<int>();
        r.probe_samples_used = p.at("samples").get<int>();
        r.probe_seed = p.at("seed").get<std::uint64_t>();
        r.kl_p_phat = p.at("kl_p_phat").is_number()
                          ? p.at("kl_p_phat").get<double>()
                          : std::numeric_limits<double>::infinity();
        r.kl_p_phat_inf = p.at("kl_p_phat_inf_probes").get<int>();
        r.hellinger = p.at("hellinger").get<double>();
        r.kl_phat_p = p.at("kl_phat_p").is_number()
                          ? p.at("kl_phat_p").get<double>()
                          : std::numeric_limits<double>::infinity();
        r.kl_phat_p_inf = p.at("kl_phat_p_inf_probes").get<int>();
        r.agent_mass_frac = p.at("agent_mass_frac").get<double>();
      }
      if (j.contains("dqn_success")) {
        r.onpolicy = true;
        r.dqn_success = j.at("dqn_success").get<double>();
        r.wall_violation_rate = j.at("wall_violation_rate").get<double>();
      }
      r.final_recon = j.value("final_recon", 0.0);
      r.final_div = j.value("final_div", 0.0);
      r.failed = j.value("failed", false);
      reports.push_back(r);
    }
  }
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "combined.csv", harness::reports_to_csv(reports));
  write_file(fs::path(out_dir) / "combined.json", harness::reports_to_json(reports));
  write_file(fs::path(out_dir) / "aggregate.json", harness::aggregate_json(reports));
  std::cout << "aggregated " << reports.size() << " reports into " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stochweave: multimodal conditional transition models"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, roll_args, render_args;
  std::string eval_model, roll_model, render_model;
  int roll_steps = 12, render_count = 8, render_samples = 10000;
  std::vector<std::string> report_inputs;
  std::string report_out = "out/report";

  CLI::App* gen = app.add_subcommand("gen-data", "generate datasets");
  add_common(gen, gen_args);
  CLI::App* train = app.add_subcommand("train", "train a model per config/preset");
  add_common(train, train_args);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a trained model");
  add_common(eval, eval_args);
  eval->add_option("--model", eval_model, "model directory")->required();
  CLI::App* roll = app.add_subcommand("rollout", "roll out inside the learned model");
  add_common(roll, roll_args);
  roll->add_option("--model", roll_model, "model directory")->required();
  roll->add_option("--steps", roll_steps, "rollout length");
  CLI::App* render = app.add_subcommand("render", "render predictive marginals");
  add_common(render, render_args);
  render->add_option("--model", render_model, "model directory")->required();
  render->add_option("--count", render_count, "number of probe renders");
  render->add_option("--samples", render_samples, "model draws per render");
  CLI::App* report = app.add_subcommand("report", "aggregate run reports");
  report->add_option("inputs", report_inputs, "report files or directories")->required();
  report->add_option("--out", report_out, "output directory");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) return cmd_eval(eval_args, eval_model);
    if (roll->parsed()) return cmd_rollout(roll_args, roll_model, roll_steps);
    if (render->parsed()) return cmd_render(render_args, render_model, render_count, render_samples);
    if (report->parsed()) return cmd_report(report_inputs, report_out);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
