#include "stw/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

namespace stw::harness {

using json = nlohmann::ordered_json;
namespace d = stw::diff;

// rng stream ids within one run seed
namespace stream {
constexpr std::uint64_t kTrainData = 1;
constexpr std::uint64_t kValData = 2;
constexpr std::uint64_t kTestData = 3;
constexpr std::uint64_t kBatch = 4;
constexpr std::uint64_t kNoise = 5;
constexpr std::uint64_t kEval = 6;
constexpr std::uint64_t kBaselineInit = 18;
constexpr std::uint64_t kBaselineNoise = 19;
}  // namespace stream

std::string domain_name(Domain d_) {
  switch (d_) {
    case Domain::kToy: return "toy";
    case Domain::kGridUncorrelated: return "grid-uncorrelated";
    case Domain::kGridOnPolicy: return "grid-onpolicy";
  }
  return "?";
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kMlpDet: return "mlp-det";
    case Variant::kMlpNoise: return "mlp-noise";
    case Variant::kVaeGauss: return "vae-gauss";
    case Variant::kVaeFlow: return "vae-flow";
    case Variant::kVaeDiscrete: return "vae-discrete";
  }
  return "?";
}

Domain domain_from_name(const std::string& s) {
  if (s == "toy") return Domain::kToy;
  if (s == "grid-uncorrelated") return Domain::kGridUncorrelated;
  if (s == "grid-onpolicy") return Domain::kGridOnPolicy;
  throw ConfigError("unknown domain: " + s);
}

Variant variant_from_name(const std::string& s) {
  if (s == "mlp-det") return Variant::kMlpDet;
  if (s == "mlp-noise") return Variant::kMlpNoise;
  if (s == "vae-gauss") return Variant::kVaeGauss;
  if (s == "vae-flow") return Variant::kVaeFlow;
  if (s == "vae-discrete") return Variant::kVaeDiscrete;
  throw ConfigError("unknown variant: " + s);
}

// ---- presets -----------------------------------------------------------------------

namespace {

void apply_variant_latents(ExperimentConfig& cfg, bool grid) {
  const long long total = cfg.total_steps;
  cfg.latent.temperature = {2.0, 0.001, 0.7, total};
  if (grid) {
    switch (cfg.variant) {
      case Variant::kVaeGauss:
        cfg.latent.family = latents::LatentSpec::Family::kGaussian;
        cfg.latent.n = 8;
        break;
      case Variant::kVaeFlow:
        cfg.latent.family = latents::LatentSpec::Family::kGaussianFlow;
        cfg.latent.n = 8;
        cfg.latent.n_flow = 6;
        break;
      case Variant::kVaeDiscrete:
        cfg.latent.family = latents::LatentSpec::Family::kDiscrete;
        cfg.latent.n = 8;
        cfg.latent.k = 4;
        break;
      default:
        break;
    }
  } else {
    switch (cfg.variant) {
      case Variant::kVaeGauss:
        cfg.latent.family = latents::LatentSpec::Family::kGaussian;
        cfg.latent.n = 3;
        break;
      case Variant::kVaeFlow:
        cfg.latent.family = latents::LatentSpec::Family::kGaussianFlow;
        cfg.latent.n = 3;
        cfg.latent.n_flow = 5;
        break;
      case Variant::kVaeDiscrete:
        cfg.latent.family = latents::LatentSpec::Family::kDiscrete;
        cfg.latent.n = 3;
        cfg.latent.k = 3;
        break;
      default:
        break;
    }
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::make_preset(const std::string& name, Variant variant) {
  ExperimentConfig cfg;
  cfg.preset = name;
  cfg.variant = variant;
  if (name == "toy") {
    cfg.domain = Domain::kToy;
    cfg.train_size = 2000;
    cfg.val_size = 500;
    cfg.test_size = 2000;
    cfg.batch_size = 64;
    cfg.total_steps = 30000;
    cfg.lr = {0.005, 0.0005, 0.9, 30000};
    cfg.prior_hidden = {30, 30};
    cfg.inference_hidden = {30, 30};
    cfg.decoder_hidden = {50, 50, 50};
    apply_variant_latents(cfg, false);
  } else if (name == "grid" || name == "grid-onpolicy") {
    cfg.domain = name == "grid" ? Domain::kGridUncorrelated : Domain::kGridOnPolicy;
    cfg.train_size = 0;
    cfg.val_size = 750;
    cfg.test_size = 1500;
    cfg.batch_size = 32;
    cfg.total_steps = name == "grid" ? 75000 : 50000;
    cfg.lr = {0.0005, 0.0001, 0.7, cfg.total_steps};
    cfg.prior_hidden = {100, 100};
    cfg.inference_hidden = {100, 100};
    cfg.decoder_hidden = {250, 250, 250};
    cfg.layout = envs::GridLayout::default_layout();
    apply_variant_latents(cfg, true);
    if (cfg.domain == Domain::kGridOnPolicy) {
      cfg.dqn.total_steps = cfg.total_steps;
      cfg.dqn.batch = 32;
      cfg.dqn.lr = 1e-3;
      cfg.dqn.epsilon = {1.0, 0.10, 0.6, cfg.total_steps};
    }
  } else {
    throw ConfigError("unknown preset: " + name);
  }
  return cfg;
}

cvae::ModelConfig ExperimentConfig::model_config() const {
  cvae::ModelConfig mc;
  mc.latent = latent;
  mc.encoding = is_grid() ? cvae::InputEncoding::kGridOneHot
                          : cvae::InputEncoding::kToyScalar;
  mc.decoder.family = is_grid() ? cvae::DecoderFamily::kFactoredCategorical
                                : cvae::DecoderFamily::kGaussian1d;
  mc.decoder.dims = 6;
  mc.decoder.classes = cvae::kGridClasses;
  mc.prior_hidden = prior_hidden;
  mc.inference_hidden = inference_hidden;
  mc.decoder_hidden = decoder_hidden;
  return mc;
}

void ExperimentConfig::validate() const {
  if (is_vae()) latent.validate();
  objective.validate();
  if (batch_size < 1 || total_steps < 1) throw ConfigError("config: bad batch/steps");
  if (domain == Domain::kToy && train_size < 1)
    throw ConfigError("config: toy domain needs a training set");
  if (test_size < 1) throw ConfigError("config: need a test set");
  if (eval_m < 1) throw ConfigError("config: eval_m must be >= 1");
  if (!is_vae() && domain != Domain::kToy)
    throw ConfigError("config: MLP baselines are toy-only");
  if (domain == Domain::kGridOnPolicy && !is_vae())
    throw ConfigError("config: on-policy runs train a VAE variant");
  if (is_grid()) layout.validate();
  if (domain == Domain::kGridOnPolicy) dqn.validate();
}

// ---- config files --------------------------------------------------------------------

namespace {

json schedule_to_json(const d::Schedule& s) {
  return {{"start", s.start}, {"end", s.end}, {"fraction", s.fraction}, {"total", s.total}};
}

d::Schedule schedule_from_json(const json& j, d::Schedule base) {
  if (j.contains("start")) base.start = j.at("start").get<double>();
  if (j.contains("end")) base.end = j.at("end").get<double>();
  if (j.contains("fraction")) base.fraction = j.at("fraction").get<double>();
  if (j.contains("total")) base.total = j.at("total").get<long long>();
  return base;
}

}  // namespace

std::string ExperimentConfig::to_json() const {
  json j;
  j["preset"] = preset;
  j["domain"] = domain_name(domain);
  j["variant"] = variant_name(variant);
  j["seed"] = seed;
  j["latent"] = {{"family", latent.family == latents::LatentSpec::Family::kGaussian
                                ? "gaussian"
                                : latent.family == latents::LatentSpec::Family::kGaussianFlow
                                      ? "gaussian-flow"
                                      : "discrete"},
                 {"n", latent.n},
                 {"k", latent.k},
                 {"n_flow", latent.n_flow},
                 {"temperature", schedule_to_json(latent.temperature)}};
  j["objective"] = {{"k", objective.k}, {"alpha", objective.alpha}, {"lambda", objective.lambda}};
  j["data"] = {{"train", train_size}, {"val", val_size}, {"test", test_size}};
  j["train"] = {{"batch", batch_size}, {"steps", total_steps}, {"lr", schedule_to_json(lr)}};
  j["eval_m"] = eval_m;
  j["noise_inputs"] = noise_inputs;
  j["probes"] = {{"count", probe_count}, {"samples", probe_samples}, {"seed", probe_seed}};
  j["nets"] = {{"prior", prior_hidden}, {"inference", inference_hidden}, {"decoder", decoder_hidden}};
  if (is_grid()) j["layout"] = json::parse(layout.to_json());
  if (domain == Domain::kGridOnPolicy) {
    j["dqn"] = {{"gamma", dqn.gamma},
                {"sync", dqn.target_sync_interval},
                {"epsilon", schedule_to_json(dqn.epsilon)},
                {"hidden", dqn.q_hidden},
                {"lr", dqn.lr},
                {"steps", dqn.total_steps},
                {"batch", dqn.batch},
                {"eval_eps", dqn.eval_epsilon}};
  }
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  Variant variant = j.contains("variant")
                        ? variant_from_name(j.at("variant").get<std::string>())
                        : Variant::kVaeGauss;
  ExperimentConfig cfg;
  if (j.contains("preset")) {
    cfg = make_preset(j.at("preset").get<std::string>(), variant);
  } else {
    cfg.variant = variant;
    if (j.contains("domain")) cfg.domain = domain_from_name(j.at("domain").get<std::string>());
    if (cfg.is_grid()) cfg.layout = envs::GridLayout::default_layout();
  }
  if (j.contains("domain")) cfg.domain = domain_from_name(j.at("domain").get<std::string>());
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("data")) {
    const json& jd = j.at("data");
    if (jd.contains("train")) cfg.train_size = jd.at("train").get<int>();
    if (jd.contains("val")) cfg.val_size = jd.at("val").get<int>();
    if (jd.contains("test")) cfg.test_size = jd.at("test").get<int>();
  }
  if (j.contains("train")) {
    const json& jt = j.at("train");
    if (jt.contains("batch")) cfg.batch_size = jt.at("batch").get<int>();
    if (jt.contains("steps")) {
      cfg.total_steps = jt.at("steps").get<long long>();
      cfg.lr.total = cfg.total_steps;
      cfg.latent.temperature.total = cfg.total_steps;
      if (cfg.domain == Domain::kGridOnPolicy) {
        cfg.dqn.total_steps = cfg.total_steps;
        cfg.dqn.epsilon.total = cfg.total_steps;
      }
    }
    if (jt.contains("lr")) cfg.lr = schedule_from_json(jt.at("lr"), cfg.lr);
  }
  if (j.contains("latent")) {
    const json& jl = j.at("latent");
    if (jl.contains("family")) {
      std::string f = jl.at("family").get<std::string>();
      if (f == "gaussian") cfg.latent.family = latents::LatentSpec::Family::kGaussian;
      else if (f == "gaussian-flow") cfg.latent.family = latents::LatentSpec::Family::kGaussianFlow;
      else if (f == "discrete") cfg.latent.family = latents::LatentSpec::Family::kDiscrete;
      else throw ConfigError("unknown latent family: " + f);
    }
    if (jl.contains("n")) cfg.latent.n = jl.at("n").get<int>();
    if (jl.contains("k")) cfg.latent.k = jl.at("k").get<int>();
    if (jl.contains("n_flow")) cfg.latent.n_flow = jl.at("n_flow").get<int>();
    if (jl.contains("temperature"))
      cfg.latent.temperature =
          schedule_from_json(jl.at("temperature"), cfg.latent.temperature);
  }
  if (j.contains("objective")) {
    const json& jo = j.at("objective");
    if (jo.contains("k")) cfg.objective.k = jo.at("k").get<int>();
    if (jo.contains("alpha")) cfg.objective.alpha = jo.at("alpha").get<double>();
    if (jo.contains("lambda")) cfg.objective.lambda = jo.at("lambda").get<double>();
  }
  if (j.contains("eval_m")) cfg.eval_m = j.at("eval_m").get<int>();
  if (j.contains("noise_inputs")) cfg.noise_inputs = j.at("noise_inputs").get<int>();
  if (j.contains("probes")) {
    const json& jp = j.at("probes");
    if (jp.contains("count")) cfg.probe_count = jp.at("count").get<int>();
    if (jp.contains("samples")) cfg.probe_samples = jp.at("samples").get<int>();
    if (jp.contains("seed")) cfg.probe_seed = jp.at("seed").get<std::uint64_t>();
  }
  if (j.contains("nets")) {
    const json& jn = j.at("nets");
    if (jn.contains("prior")) cfg.prior_hidden = jn.at("prior").get<std::vector<int>>();
    if (jn.contains("inference"))
      cfg.inference_hidden = jn.at("inference").get<std::vector<int>>();
    if (jn.contains("decoder")) cfg.decoder_hidden = jn.at("decoder").get<std::vector<int>>();
  }
  if (j.contains("layout")) cfg.layout = envs::GridLayout::from_json(j.at("layout").dump());
  if (j.contains("dqn")) {
    const json& jq = j.at("dqn");
    if (jq.contains("gamma")) cfg.dqn.gamma = jq.at("gamma").get<double>();
    if (jq.contains("sync")) cfg.dqn.target_sync_interval = jq.at("sync").get<int>();
    if (jq.contains("epsilon")) cfg.dqn.epsilon = schedule_from_json(jq.at("epsilon"), cfg.dqn.epsilon);
    if (jq.contains("hidden")) cfg.dqn.q_hidden = jq.at("hidden").get<std::vector<int>>();
    if (jq.contains("lr")) cfg.dqn.lr = jq.at("lr").get<double>();
    if (jq.contains("steps")) {
      cfg.dqn.total_steps = jq.at("steps").get<long long>();
      cfg.dqn.epsilon.total = cfg.dqn.total_steps;
    }
    if (jq.contains("batch")) cfg.dqn.batch = jq.at("batch").get<int>();
    if (jq.contains("eval_eps")) cfg.dqn.eval_epsilon = jq.at("eval_eps").get<double>();
  }
  cfg.validate();
  return cfg;
}

// ---- TOML subset -----------------------------------------------------------------------

namespace {

std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

json toml_scalar(const std::string& raw) {
  std::string v = trim(raw);
  if (v.empty()) throw ConfigError("toml: empty value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError("toml: unterminated string");
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  try {
    if (v.find_first_of(".eE") != std::string::npos &&
        v.find_first_not_of("+-0123456789.eE") == std::string::npos) {
      std::size_t used = 0;
      double dv = std::stod(v, &used);
      if (used == v.size()) return dv;
    } else {
      std::size_t used = 0;
      long long iv = std::stoll(v, &used);
      if (used == v.size()) return iv;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("toml: cannot parse value '" + v + "'");
}

json toml_value(const std::string& raw) {
  std::string v = trim(raw);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw ConfigError("toml: unterminated array");
    json arr = json::array();
    std::string inner = v.substr(1, v.size() - 2);
    std::string item;
    int depth = 0;
    bool in_str = false;
    for (char c : inner) {
      if (c == '"') in_str = !in_str;
      if (c == '[' && !in_str) depth++;
      if (c == ']' && !in_str) depth--;
      if (c == ',' && depth == 0 && !in_str) {
        if (!trim(item).empty()) arr.push_back(toml_value(item));
        item.clear();
      } else {
        item.push_back(c);
      }
    }
    if (!trim(item).empty()) arr.push_back(toml_value(item));
    return arr;
  }
  return toml_scalar(v);
}

}  // namespace

std::string toml_to_json(const std::string& text) {
  json root = json::object();
  json* section = &root;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("toml: bad section header: " + line);
      std::string name = trim(line.substr(1, line.size() - 2));
      section = &root;
      std::size_t at = 0;
      while (at != std::string::npos) {
        std::size_t dot = name.find('.', at);
        std::string part =
            trim(dot == std::string::npos ? name.substr(at) : name.substr(at, dot - at));
        if (part.empty()) throw ConfigError("toml: bad section name: " + name);
        section = &((*section)[part]);
        if (section->is_null()) *section = json::object();
        at = dot == std::string::npos ? std::string::npos : dot + 1;
      }
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("toml: expected key = value: " + line);
    std::string key = trim(line.substr(0, eq));
    if (key.size() >= 2 && key.front() == '"' && key.back() == '"')
      key = key.substr(1, key.size() - 2);
    if (key.empty()) throw ConfigError("toml: empty key");
    (*section)[key] = toml_value(line.substr(eq + 1));
  }
  return root.dump();
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (path.extension() == ".toml") return ExperimentConfig::from_json(toml_to_json(text));
  return ExperimentConfig::from_json(text);
}

// ---- datasets ------------------------------------------------------------------------

cvae::Dataset draw_toy_dataset(int n, std::uint64_t seed, std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  envs::ToySpec spec;
  std::vector<double> xs(static_cast<std::size_t>(n)), ys(static_cast<std::size_t>(n));
  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  for (int i = 0; i < n; ++i) {
    xs[static_cast<std::size_t>(i)] = ux(rng);
    ys[static_cast<std::size_t>(i)] = envs::toy_sample(spec, xs[static_cast<std::size_t>(i)], rng);
  }
  return cvae::make_toy_dataset(xs, ys);
}

cvae::Dataset draw_grid_dataset(const envs::GridLayout& layout, int n,
                                std::uint64_t seed, std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  std::vector<envs::Transition> ts;
  ts.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ts.push_back(envs::sample_uncorrelated_transition(layout, rng));
  return cvae::make_grid_dataset(ts);
}

void write_toy_dataset(const std::filesystem::path& path, const cvae::Dataset& data,
                       std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open dataset for writing: " + path.string());
  for (int i = 0; i < data.size(); ++i) {
    double rec[2] = {data.x(i, 0), data.y_obs(i, 0)};
    out.write(reinterpret_cast<const char*>(rec), sizeof(rec));
  }
  json header;
  header["count"] = data.size();
  header["seed"] = seed;
  std::ofstream hout(path.string() + ".json");
  hout << header.dump(2) << "\n";
}

cvae::Dataset read_toy_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset: " + path.string());
  std::vector<double> xs, ys;
  while (true) {
    double rec[2];
    in.read(reinterpret_cast<char*>(rec), sizeof(rec));
    if (!in) break;
    xs.push_back(rec[0]);
    ys.push_back(rec[1]);
  }
  return cvae::make_toy_dataset(xs, ys);
}

void save_model(const cvae::TransitionModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  model.params().save(dir / "model.swve");
  std::ofstream out(dir / "model.json");
  out << model.sidecar_json() << "\n";
}

cvae::TransitionModel load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw ConfigError("cannot open model sidecar: " + (dir / "model.json").string());
  std::string sidecar((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return cvae::TransitionModel::from_sidecar(sidecar,
                                             diff::ParameterStore::load(dir / "model.swve"));
}

// ---- probes --------------------------------------------------------------------------

std::vector<Probe> make_probe_set(const envs::GridLayout& layout, int count,
                                  std::uint64_t probe_seed) {
  Rng rng = make_rng(probe_seed, 7);
  std::vector<envs::Cell> cells = layout.open_cells();
  std::uniform_int_distribution<std::size_t> pick(0, cells.size() - 1);
  std::uniform_int_distribution<int> act(0, envs::kNumActions - 1);
  std::vector<Probe> probes;
  probes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Probe p;
    p.state = {cells[pick(rng)], cells[pick(rng)], cells[pick(rng)]};
    p.action = envs::action_from_index(act(rng));
    probes.push_back(p);
  }
  return probes;
}

namespace {

envs::GridState state_from_sample_row(const diff::Mat& samples, int row) {
  std::array<std::uint8_t, 6> b{};
  for (int c = 0; c < 6; ++c)
    b[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(samples(row, c));
  return envs::GridState::from_bytes(b);
}

}  // namespace

ProbeMetrics evaluate_grid_probes(const cvae::TransitionModel& model,
                                  const envs::GridLayout& layout,
                                  const std::vector<Probe>& probes, int samples,
                                  std::uint64_t seed) {
  ProbeMetrics m;
  m.count = static_cast<int>(probes.size());
  int agent_hits = 0;
  double kl1 = 0.0, kl2 = 0.0, hel = 0.0;
  int kl1_n = 0, kl2_n = 0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const Probe& pr = probes[i];
    auto oracle = envs::grid_true_next_dist(layout, pr.state, pr.action);
    Rng rng = make_rng(seed, 0x9000 + i);
    diff::Mat draws = cvae::sample_prediction(
        model, cvae::encode_grid_x(pr.state, pr.action), samples, rng);
    std::vector<envs::GridState> keys;
    keys.reserve(static_cast<std::size_t>(samples));
    for (int r = 0; r < samples; ++r) keys.push_back(state_from_sample_row(draws, r));
    auto phat = metrics::empirical_dist(keys);

    double v1 = metrics::kl_categorical(oracle, phat);
    if (std::isinf(v1)) {
      m.kl_p_phat_inf += 1;
    } else {
      kl1 += v1;
      kl1_n += 1;
    }
    double v2 = metrics::kl_categorical(phat, oracle);
    if (std::isinf(v2)) {
      m.kl_phat_p_inf += 1;
    } else {
      kl2 += v2;
      kl2_n += 1;
    }
    hel += metrics::hellinger(oracle, phat);

    // deterministic agent move: predicted mass on the true next agent cell
    envs::Cell truth = oracle.support().front().agent;
    int hits = 0;
    for (const envs::GridState& s : keys)
      if (s.agent == truth) hits += 1;
    if (static_cast<double>(hits) / samples >= 0.9) agent_hits += 1;
  }
  m.kl_p_phat = kl1_n > 0 ? kl1 / kl1_n : std::numeric_limits<double>::infinity();
  m.kl_phat_p = kl2_n > 0 ? kl2 / kl2_n : std::numeric_limits<double>::infinity();
  m.hellinger = hel / static_cast<double>(probes.size());
  m.agent_mass_frac = static_cast<double>(agent_hits) / static_cast<double>(probes.size());
  return m;
}

// ---- baselines -----------------------------------------------------------------------

diff::MlpSpec mlp_det_spec(const ExperimentConfig& cfg) {
  return {1, cfg.decoder_hidden, 1, d::Head::kLinear};
}

diff::MlpSpec mlp_noise_spec(const ExperimentConfig& cfg) {
  return {1 + cfg.noise_inputs, cfg.decoder_hidden, 2, d::Head::kMeanAndLogStd};
}

double mlp_det_predict(const ExperimentConfig& cfg, const d::ParameterStore& net,
                       double x) {
  diff::Mat in(1, 1);
  in(0, 0) = x;
  return d::mlp_forward(mlp_det_spec(cfg), net, "net", in)(0, 0);
}

double mlp_noise_nll(const ExperimentConfig& cfg, const d::ParameterStore& net,
                     const cvae::Dataset& data, int m, std::uint64_t seed) {
  constexpr double kHalfLog2Pi = 0.91893853320467274;
  diff::MlpSpec spec = mlp_noise_spec(cfg);
  double acc = 0.0;
  for (int i = 0; i < data.size(); ++i) {
    Rng rng = make_rng(seed, data.hash[static_cast<std::size_t>(i)]);
    diff::Mat in(m, spec.in);
    for (int r = 0; r < m; ++r) {
      in(r, 0) = data.x(i, 0);
      for (int c = 1; c < spec.in; ++c) in(r, c) = normal(rng);
    }
    diff::Mat out = d::mlp_forward(spec, net, "net", in);
    diff::Vec logp(m);
    for (int r = 0; r < m; ++r) {
      double zc = (data.y_obs(i, 0) - out(r, 0)) * std::exp(-out(r, 1));
      logp(r) = -out(r, 1) - 0.5 * zc * zc - kHalfLog2Pi;
    }
    double mlog = logp.maxCoeff();
    double phat = mlog + std::log((logp.array() - mlog).exp().sum()) -
                  std::log(static_cast<double>(m));
    acc += phat;
  }
  return -acc / data.size();
}

// ---- training loops ---------------------------------------------------------------------

namespace {

std::vector<int> draw_batch_indices(int n, int batch, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::vector<int> idx(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) idx[static_cast<std::size_t>(i)] = pick(rng);
  return idx;
}

struct VaeTrainStats {
  double recon = 0.0;
  double div = 0.0;
};

VaeTrainStats train_vae(cvae::TransitionModel& model, const ExperimentConfig& cfg) {
  Rng batch_rng = make_rng(cfg.seed, stream::kBatch);
  Rng noise_rng = make_rng(cfg.seed, stream::kNoise);
  cvae::Dataset train_ds;
  if (cfg.domain == Domain::kToy)
    train_ds = draw_toy_dataset(cfg.train_size, cfg.seed, stream::kTrainData);
  VaeTrainStats stats;
  for (long long step = 0; step < cfg.total_steps; ++step) {
    cvae::Dataset batch;
    if (cfg.domain == Domain::kToy) {
      batch = cvae::slice(train_ds, draw_batch_indices(train_ds.size(), cfg.batch_size, batch_rng));
    } else {
      std::vector<envs::Transition> ts;
      ts.reserve(static_cast<std::size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i)
        ts.push_back(envs::sample_uncorrelated_transition(cfg.layout, batch_rng));
      batch = cvae::make_grid_dataset(ts);
    }
    cvae::LatentNoise noise =
        cvae::draw_latent_noise(cfg.latent, cfg.batch_size, cfg.objective.k, noise_rng);
    double tau = cfg.latent.temperature.value(step);
    diff::Graph g(model.params());
    cvae::TrainParts parts;
    diff::Var loss = cvae::build_train_loss(g, model, batch, noise, cfg.objective, tau, &parts);
    g.backward(loss);
    model.params().adam_step(g.grads(), cfg.lr.value(step));
    stats.recon = parts.recon;
    stats.div = parts.div;
  }
  return stats;
}

// Shared trainer for the two MLP baselines.
VaeTrainStats train_baseline(d::ParameterStore& net, const ExperimentConfig& cfg) {
  constexpr double kHalfLog2Pi = 0.91893853320467274;
  Rng batch_rng = make_rng(cfg.seed, stream::kBatch);
  Rng noise_rng = make_rng(cfg.seed, stream::kBaselineNoise);
  cvae::Dataset train_ds = draw_toy_dataset(cfg.train_size, cfg.seed, stream::kTrainData);
  bool noisy = cfg.variant == Variant::kMlpNoise;
  diff::MlpSpec spec = noisy ? mlp_noise_spec(cfg) : mlp_det_spec(cfg);
  VaeTrainStats stats;
  for (long long step = 0; step < cfg.total_steps; ++step) {
    cvae::Dataset batch =
        cvae::slice(train_ds, draw_batch_indices(train_ds.size(), cfg.batch_size, batch_rng));
    diff::Mat in(batch.size(), spec.in);
    in.col(0) = batch.x.col(0);
    if (noisy)
      for (int r = 0; r < batch.size(); ++r)
        for (int c = 1; c < spec.in; ++c) in(r, c) = normal(noise_rng);
    diff::Graph g(net);
    diff::Var out = d::mlp_forward(spec, g, "net", g.c(in));
    diff::Var loss;
    if (noisy) {
      diff::Var mean = d::slice_cols(out, 0, 1);
      diff::Var logstd = d::slice_cols(out, 1, 1);
      diff::Var zc = d::mul(d::sub(g.c(batch.y_obs), mean), d::exp_v(d::neg(logstd)));
      diff::Var logp = d::add_const(
          d::sub(d::neg(logstd), d::scale(d::square(zc), 0.5)), -kHalfLog2Pi);
      loss = d::neg(d::mean_all(logp));
    } else {
      loss = d::mean_all(d::square(d::sub(out, g.c(batch.y_obs))));
    }
    g.backward(loss);
    net.adam_step(g.grads(), cfg.lr.value(step));
    stats.recon = -loss.val()(0, 0);
  }
  return stats;
}

}  // namespace

RunOutput run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunOutput out;
  RunReport& rep = out.report;
  rep.preset = cfg.preset;
  rep.domain = domain_name(cfg.domain);
  rep.variant = variant_name(cfg.variant);
  rep.seed = cfg.seed;
  rep.eval_m = cfg.eval_m;
  rep.onpolicy = cfg.domain == Domain::kGridOnPolicy;
  auto t0 = std::chrono::steady_clock::now();

  try {
    if (cfg.is_vae() && cfg.domain != Domain::kGridOnPolicy) {
      cvae::TransitionModel model = cvae::TransitionModel::make(cfg.model_config(), cfg.seed);
      VaeTrainStats stats = train_vae(model, cfg);
      rep.final_recon = stats.recon;
      rep.final_div = stats.div;

      cvae::Dataset test_ds =
          cfg.domain == Domain::kToy
              ? draw_toy_dataset(cfg.test_size, cfg.seed, stream::kTestData)
              : draw_grid_dataset(cfg.layout, cfg.test_size, cfg.seed, stream::kTestData);
      Rng eval_rng = make_rng(cfg.seed, stream::kEval);
      rep.vlb = cvae::eval_vr_bound(model, test_ds, cfg.objective.k, cfg.objective.alpha,
                                    eval_rng);
      rep.vlb_valid = true;
      rep.nll = cvae::test_nll(model, test_ds, cfg.eval_m, cfg.seed ^ 0x7e57ULL);
      rep.nll_valid = true;

      if (cfg.domain == Domain::kGridUncorrelated && cfg.probe_count > 0) {
        auto probes = make_probe_set(cfg.layout, cfg.probe_count, cfg.probe_seed);
        ProbeMetrics pm = evaluate_grid_probes(model, cfg.layout, probes, cfg.probe_samples,
                                               cfg.probe_seed ^ cfg.seed);
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
      out.model.emplace(std::move(model));
    } else if (cfg.domain == Domain::kGridOnPolicy) {
      cvae::TransitionModel model = cvae::TransitionModel::make(cfg.model_config(), cfg.seed);
      Rng noise_rng = make_rng(cfg.seed, stream::kNoise);
      long long model_step = 0;
      cvae::TrainParts last_parts;
      agent::ModelTrainerHook hook = [&](const std::vector<envs::Transition>& ts) {
        cvae::Dataset batch = cvae::make_grid_dataset(ts);
        cvae::LatentNoise noise =
            cvae::draw_latent_noise(cfg.latent, batch.size(), cfg.objective.k, noise_rng);
        double tau = cfg.latent.temperature.value(model_step);
        diff::Graph g(model.params());
        diff::Var loss =
            cvae::build_train_loss(g, model, batch, noise, cfg.objective, tau, &last_parts);
        g.backward(loss);
        model.params().adam_step(g.grads(), cfg.lr.value(model_step));
        model_step += 1;
        return loss.val()(0, 0);
      };
      agent::OnPolicyResult rl = agent::run_onpolicy(cfg.layout, cfg.dqn, hook, cfg.seed);
      rep.final_recon = last_parts.recon;
      rep.final_div = last_parts.div;

      rep.dqn_success = agent::greedy_success_rate(cfg.layout, cfg.dqn, rl.qnet, 100,
                                                   cfg.dqn.eval_epsilon, cfg.seed ^ 0xe7a1ULL);

      // model quality on an uncorrelated test set
      cvae::Dataset test_ds =
          draw_grid_dataset(cfg.layout, cfg.test_size, cfg.seed, stream::kTestData);
      Rng eval_rng = make_rng(cfg.seed, stream::kEval);
      rep.vlb = cvae::eval_vr_bound(model, test_ds, cfg.objective.k, cfg.objective.alpha,
                                    eval_rng);
      rep.vlb_valid = true;
      rep.nll = cvae::test_nll(model, test_ds, cfg.eval_m, cfg.seed ^ 0x7e57ULL);
      rep.nll_valid = true;

      // agent-move accuracy along late visited states
      std::vector<Probe> visited;
      std::set<std::array<std::uint8_t, 7>> seen;
      std::size_t tail_start = rl.log.size() - std::min<std::size_t>(rl.log.size(), rl.log.size() / 4);
      for (std::size_t i = tail_start; i < rl.log.size() && visited.size() < 200; ++i) {
        std::array<std::uint8_t, 7> key{};
        auto sb = rl.log[i].state.to_bytes();
        std::copy(sb.begin(), sb.end(), key.begin());
        key[6] = static_cast<std::uint8_t>(rl.log[i].action);
        if (seen.insert(key).second) visited.push_back({rl.log[i].state, rl.log[i].action});
      }
      if (!visited.empty()) {
        ProbeMetrics pm = evaluate_grid_probes(model, cfg.layout, visited, cfg.probe_samples,
                                               cfg.probe_seed ^ cfg.seed);
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

      // Fig.7-style rollouts in the learned model
      Rng roll_rng = make_rng(cfg.seed, 0x0110);
      PolicyFn policy = dqn_policy(cfg.dqn, rl.qnet, cfg.dqn.eval_epsilon);
      int violations = 0, draws = 0;
      for (int r = 0; r < 100; ++r) {
        ModelRollout roll = rollout_in_model(model, cfg.layout, policy,
                                             cfg.layout.start_state(), 12, roll_rng);
        violations += roll.violations;
        draws += roll.samples_drawn;
      }
      rep.wall_violation_rate = draws > 0 ? static_cast<double>(violations) / draws : 0.0;

      out.qnet.emplace(std::move(rl.qnet));
      out.model.emplace(std::move(model));
    } else {
      // MLP baselines
      d::ParameterStore net;
      Rng init_rng = make_rng(cfg.seed, stream::kBaselineInit);
      diff::MlpSpec spec =
          cfg.variant == Variant::kMlpNoise ? mlp_noise_spec(cfg) : mlp_det_spec(cfg);
      d::init_mlp(net, "net", spec, init_rng);
      VaeTrainStats stats = train_baseline(net, cfg);
      rep.final_recon = stats.recon;
      if (cfg.variant == Variant::kMlpNoise) {
        cvae::Dataset test_ds = draw_toy_dataset(cfg.test_size, cfg.seed, stream::kTestData);
        rep.nll = mlp_noise_nll(cfg, net, test_ds, cfg.eval_m, cfg.seed ^ 0x7e57ULL);
        rep.nll_valid = true;
      }
      // vlb stays NA for both baselines, nll NA for the deterministic one
      out.baseline.emplace(std::move(net));
    }
  } catch (const NumericalError& e) {
    rep.failed = true;
    rep.failure = e.what();
  }

  rep.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---- reports -------------------------------------------------------------------------

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json report_core_json(const RunReport& r) {
  json j;
  j["preset"] = r.preset;
  j["domain"] = r.domain;
  j["variant"] = r.variant;
  j["seed"] = r.seed;
  j["vlb"] = r.vlb_valid ? json(r.vlb) : json("NA");
  j["nll"] = r.nll_valid ? json(r.nll) : json("NA");
  j["eval_m"] = r.eval_m;
  if (r.probe_count_used > 0) {
    j["probes"] = {{"count", r.probe_count_used},
                   {"samples", r.probe_samples_used},
                   {"seed", r.probe_seed},
                   {"kl_p_phat", std::isinf(r.kl_p_phat) ? json("inf") : json(r.kl_p_phat)},
                   {"kl_p_phat_inf_probes", r.kl_p_phat_inf},
                   {"hellinger", r.hellinger},
                   {"kl_phat_p", std::isinf(r.kl_phat_p) ? json("inf") : json(r.kl_phat_p)},
                   {"kl_phat_p_inf_probes", r.kl_phat_p_inf},
                   {"agent_mass_frac", r.agent_mass_frac}};
  }
  if (r.onpolicy) {
    j["dqn_success"] = r.dqn_success;
    j["wall_violation_rate"] = r.wall_violation_rate;
  }
  j["final_recon"] = r.final_recon;
  j["final_div"] = r.final_div;
  j["failed"] = r.failed;
  if (r.failed) j["failure"] = r.failure;
  return j;
}

}  // namespace

std::string RunReport::canonical_json() const { return report_core_json(*this).dump(2); }

std::string RunReport::full_json() const {
  json j = report_core_json(*this);
  j["train_seconds"] = train_seconds;
  return j.dump(2);
}

std::string reports_to_csv(const std::vector<RunReport>& reports) {
  std::string csv =
      "preset,domain,variant,seed,vlb,nll,kl_p_phat,kl_p_phat_inf,hellinger,"
      "kl_phat_p,kl_phat_p_inf,agent_mass_frac,dqn_success,wall_violation_rate,"
      "eval_m,probe_count,probe_samples,final_recon,final_div,failed\n";
  for (const RunReport& r : reports) {
    csv += r.preset + "," + r.domain + "," + r.variant + "," + std::to_string(r.seed) + ",";
    csv += (r.vlb_valid ? fmt17(r.vlb) : "NA") + std::string(",");
    csv += (r.nll_valid ? fmt17(r.nll) : "NA") + std::string(",");
    if (r.probe_count_used > 0) {
      csv += (std::isinf(r.kl_p_phat) ? "inf" : fmt17(r.kl_p_phat)) + std::string(",");
      csv += std::to_string(r.kl_p_phat_inf) + ",";
      csv += fmt17(r.hellinger) + ",";
      csv += (std::isinf(r.kl_phat_p) ? "inf" : fmt17(r.kl_phat_p)) + std::string(",");
      csv += std::to_string(r.kl_phat_p_inf) + ",";
      csv += fmt17(r.agent_mass_frac) + ",";
    } else {
      csv += "NA,NA,NA,NA,NA,NA,";
    }
    if (r.onpolicy) {
      csv += fmt17(r.dqn_success) + "," + fmt17(r.wall_violation_rate) + ",";
    } else {
      csv += "NA,NA,";
    }
    csv += std::to_string(r.eval_m) + "," + std::to_string(r.probe_count_used) + "," +
           std::to_string(r.probe_samples_used) + ",";
    csv += fmt17(r.final_recon) + "," + fmt17(r.final_div) + ",";
    csv += (r.failed ? "true" : "false");
    csv += "\n";
  }
  return csv;
}

std::string reports_to_json(const std::vector<RunReport>& reports) {
  json arr = json::array();
  for (const RunReport& r : reports) arr.push_back(json::parse(r.full_json()));
  return arr.dump(2);
}

std::string aggregate_json(const std::vector<RunReport>& reports) {
  struct Acc {
    int n = 0;
    int vlb_n = 0, nll_n = 0, kl1_n = 0, kl2_n = 0, hel_n = 0;
    double vlb = 0, nll = 0, kl1 = 0, kl2 = 0, hel = 0, agent = 0;
    int agent_n = 0;
    std::vector<std::uint64_t> seeds;
  };
  std::map<std::pair<std::string, std::string>, Acc> groups;
  for (const RunReport& r : reports) {
    Acc& a = groups[{r.preset, r.variant}];
    a.n += 1;
    a.seeds.push_back(r.seed);
    if (r.vlb_valid) {
      a.vlb += r.vlb;
      a.vlb_n += 1;
    }
    if (r.nll_valid) {
      a.nll += r.nll;
      a.nll_n += 1;
    }
    if (r.probe_count_used > 0) {
      if (!std::isinf(r.kl_p_phat)) {
        a.kl1 += r.kl_p_phat;
        a.kl1_n += 1;
      }
      if (!std::isinf(r.kl_phat_p)) {
        a.kl2 += r.kl_phat_p;
        a.kl2_n += 1;
      }
      a.hel += r.hellinger;
      a.hel_n += 1;
      a.agent += r.agent_mass_frac;
      a.agent_n += 1;
    }
  }
  json arr = json::array();
  for (const auto& [key, a] : groups) {
    json j;
    j["preset"] = key.first;
    j["variant"] = key.second;
    j["runs"] = a.n;
    j["seeds"] = a.seeds;
    j["mean_vlb"] = a.vlb_n ? json(a.vlb / a.vlb_n) : json("NA");
    j["mean_nll"] = a.nll_n ? json(a.nll / a.nll_n) : json("NA");
    if (a.hel_n) {
      j["mean_kl_p_phat"] = a.kl1_n ? json(a.kl1 / a.kl1_n) : json("inf");
      j["mean_hellinger"] = a.hel / a.hel_n;
      j["mean_kl_phat_p"] = a.kl2_n ? json(a.kl2 / a.kl2_n) : json("inf");
      j["mean_agent_mass_frac"] = a.agent / a.agent_n;
    }
    arr.push_back(j);
  }
  return arr.dump(2);
}

// ---- parallel workers ---------------------------------------------------------------

int worker_threads() {
  if (const char* env = std::getenv("STOCHWEAVE_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(n, worker_threads());
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        while (true) {
          int i = next.fetch_add(1);
          if (i >= n) break;
          fn(i);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace stw::harness
