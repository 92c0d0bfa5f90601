#include "stw/cvae.hpp"

#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace stw::cvae {

using json = nlohmann::ordered_json;
namespace d = stw::diff;

// ---- encodings -----------------------------------------------------------------

int encoding_x_width(InputEncoding kind) {
  switch (kind) {
    case InputEncoding::kToyScalar: return 1;
    case InputEncoding::kGridOneHot: return kGridStateWidth + envs::kNumActions;
  }
  return 0;
}

Vec encode_toy_x(double x) {
  Vec v(1);
  v(0) = x;
  return v;
}

namespace {

void one_hot_coord(Vec& v, int at, int value) {
  if (value < 0 || value >= kGridClasses)
    throw DomainError("grid coordinate out of range [0,6]");
  v(at + value) = 1.0;
}

}  // namespace

Vec encode_grid_state(const envs::GridState& s) {
  Vec v = Vec::Zero(kGridStateWidth);
  const int coords[6] = {s.agent.x,  s.agent.y,  s.ghost1.x,
                         s.ghost1.y, s.ghost2.x, s.ghost2.y};
  for (int i = 0; i < 6; ++i) one_hot_coord(v, i * kGridClasses, coords[i]);
  return v;
}

Vec encode_grid_x(const envs::GridState& s, envs::Action a) {
  Vec v = Vec::Zero(kGridStateWidth + envs::kNumActions);
  v.head(kGridStateWidth) = encode_grid_state(s);
  v(kGridStateWidth + static_cast<int>(a)) = 1.0;
  return v;
}

// ---- model ---------------------------------------------------------------------

void ModelConfig::validate() const {
  latent.validate();
  if (decoder.family == DecoderFamily::kFactoredCategorical &&
      (decoder.dims < 1 || decoder.classes < 2))
    throw ConfigError("decoder: factored-categorical needs dims >= 1, classes >= 2");
  for (const auto* h : {&prior_hidden, &inference_hidden, &decoder_hidden})
    for (int w : *h)
      if (w <= 0) throw ConfigError("model: hidden widths must be positive");
}

TransitionModel::TransitionModel(ModelConfig config, d::ParameterStore params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  if (config_.latent.flow())
    flow_ = latents::FlowStack("flow", config_.latent.n, config_.latent.n_flow);
}

diff::MlpSpec TransitionModel::prior_spec() const {
  return {x_width(), config_.prior_hidden, config_.latent.param_width(),
          d::Head::kLinear};
}

diff::MlpSpec TransitionModel::inference_spec() const {
  return {x_width() + y_width(), config_.inference_hidden,
          config_.latent.param_width(), d::Head::kLinear};
}

diff::MlpSpec TransitionModel::decoder_spec() const {
  return {config_.latent.z_width() + x_width(), config_.decoder_hidden,
          config_.decoder.out_width(), config_.decoder.head()};
}

TransitionModel TransitionModel::make(const ModelConfig& config, std::uint64_t seed) {
  TransitionModel model(config, d::ParameterStore{});
  Rng rng = make_rng(seed, /*stream=*/17);
  d::init_mlp(model.params_, "prior", model.prior_spec(), rng);
  d::init_mlp(model.params_, "inference", model.inference_spec(), rng);
  d::init_mlp(model.params_, "decoder", model.decoder_spec(), rng);
  if (config.latent.flow()) model.flow_.init(model.params_, rng);
  return model;
}

TransitionModel TransitionModel::from_parts(const ModelConfig& config,
                                            d::ParameterStore params) {
  return TransitionModel(config, std::move(params));
}

namespace {

std::string family_name(latents::LatentSpec::Family f) {
  switch (f) {
    case latents::LatentSpec::Family::kGaussian: return "gaussian";
    case latents::LatentSpec::Family::kGaussianFlow: return "gaussian-flow";
    case latents::LatentSpec::Family::kDiscrete: return "discrete";
  }
  return "?";
}

latents::LatentSpec::Family family_from_name(const std::string& s) {
  if (s == "gaussian") return latents::LatentSpec::Family::kGaussian;
  if (s == "gaussian-flow") return latents::LatentSpec::Family::kGaussianFlow;
  if (s == "discrete") return latents::LatentSpec::Family::kDiscrete;
  throw ConfigError("unknown latent family: " + s);
}

}  // namespace

std::string TransitionModel::sidecar_json() const {
  json j;
  j["latent"] = {
      {"family", family_name(config_.latent.family)},
      {"n", config_.latent.n},
      {"k", config_.latent.k},
      {"n_flow", config_.latent.n_flow},
      {"temperature",
       {{"start", config_.latent.temperature.start},
        {"end", config_.latent.temperature.end},
        {"fraction", config_.latent.temperature.fraction},
        {"total", config_.latent.temperature.total}}}};
  j["decoder"] = {
      {"family", config_.decoder.family == DecoderFamily::kGaussian1d
                     ? "gaussian-1d"
                     : "factored-categorical"},
      {"dims", config_.decoder.dims},
      {"classes", config_.decoder.classes}};
  j["encoding"] = config_.encoding == InputEncoding::kToyScalar ? "toy-scalar"
                                                                : "grid-one-hot";
  j["prior_hidden"] = config_.prior_hidden;
  j["inference_hidden"] = config_.inference_hidden;
  j["decoder_hidden"] = config_.decoder_hidden;
  return j.dump(2);
}

TransitionModel TransitionModel::from_sidecar(const std::string& sidecar,
                                              d::ParameterStore params) {
  json j = json::parse(sidecar);
  ModelConfig cfg;
  const auto& jl = j.at("latent");
  cfg.latent.family = family_from_name(jl.at("family").get<std::string>());
  cfg.latent.n = jl.at("n").get<int>();
  cfg.latent.k = jl.at("k").get<int>();
  cfg.latent.n_flow = jl.at("n_flow").get<int>();
  const auto& jt = jl.at("temperature");
  cfg.latent.temperature = {jt.at("start").get<double>(), jt.at("end").get<double>(),
                            jt.at("fraction").get<double>(),
                            jt.at("total").get<long long>()};
  const auto& jd = j.at("decoder");
  cfg.decoder.family = jd.at("family").get<std::string>() == "gaussian-1d"
                           ? DecoderFamily::kGaussian1d
                           : DecoderFamily::kFactoredCategorical;
  cfg.decoder.dims = jd.at("dims").get<int>();
  cfg.decoder.classes = jd.at("classes").get<int>();
  cfg.encoding = j.at("encoding").get<std::string>() == "toy-scalar"
                     ? InputEncoding::kToyScalar
                     : InputEncoding::kGridOneHot;
  cfg.prior_hidden = j.at("prior_hidden").get<std::vector<int>>();
  cfg.inference_hidden = j.at("inference_hidden").get<std::vector<int>>();
  cfg.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
  return from_parts(cfg, std::move(params));
}

// ---- datasets -------------------------------------------------------------------

Dataset make_toy_dataset(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw DomainError("toy dataset: length mismatch");
  const int n = static_cast<int>(xs.size());
  Dataset ds;
  ds.x.resize(n, 1);
  ds.y_enc.resize(n, 1);
  ds.y_obs.resize(n, 1);
  ds.hash.resize(xs.size());
  for (int i = 0; i < n; ++i) {
    ds.x(i, 0) = xs[static_cast<std::size_t>(i)];
    ds.y_enc(i, 0) = ys[static_cast<std::size_t>(i)];
    ds.y_obs(i, 0) = ys[static_cast<std::size_t>(i)];
    double buf[2] = {xs[static_cast<std::size_t>(i)], ys[static_cast<std::size_t>(i)]};
    ds.hash[static_cast<std::size_t>(i)] = fnv1a(buf, sizeof(buf));
  }
  return ds;
}

Dataset make_grid_dataset(const std::vector<envs::Transition>& transitions) {
  const int n = static_cast<int>(transitions.size());
  Dataset ds;
  ds.x.resize(n, kGridStateWidth + envs::kNumActions);
  ds.y_enc.resize(n, kGridStateWidth);
  ds.y_obs.resize(n, 6);
  ds.hash.resize(transitions.size());
  for (int i = 0; i < n; ++i) {
    const envs::Transition& t = transitions[static_cast<std::size_t>(i)];
    ds.x.row(i) = encode_grid_x(t.state, t.action).transpose();
    ds.y_enc.row(i) = encode_grid_state(t.next).transpose();
    auto nb = t.next.to_bytes();
    for (int c = 0; c < 6; ++c) ds.y_obs(i, c) = static_cast<double>(nb[static_cast<std::size_t>(c)]);
    auto sb = t.state.to_bytes();
    std::uint8_t rec[13];
    for (int c = 0; c < 6; ++c) rec[c] = sb[static_cast<std::size_t>(c)];
    rec[6] = static_cast<std::uint8_t>(t.action);
    for (int c = 0; c < 6; ++c) rec[7 + c] = nb[static_cast<std::size_t>(c)];
    ds.hash[static_cast<std::size_t>(i)] = fnv1a(rec, sizeof(rec));
  }
  return ds;
}

Dataset make_categorical_dataset(const Mat& x_encoded, const Eigen::MatrixXi& y_classes,
                                 const DecoderSpec& dec) {
  if (dec.family != DecoderFamily::kFactoredCategorical)
    throw DomainError("categorical dataset needs a factored-categorical decoder");
  if (x_encoded.rows() != y_classes.rows() || y_classes.cols() != dec.dims)
    throw DomainError("categorical dataset: shape mismatch");
  const int n = static_cast<int>(x_encoded.rows());
  Dataset ds;
  ds.x = x_encoded;
  ds.y_enc = Mat::Zero(n, dec.dims * dec.classes);
  ds.y_obs.resize(n, dec.dims);
  ds.hash.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (Eigen::Index c = 0; c < x_encoded.cols(); ++c) {
      double v = x_encoded(i, c);
      h = fnv1a(&v, sizeof(v), h);
    }
    for (int d_i = 0; d_i < dec.dims; ++d_i) {
      int cls = y_classes(i, d_i);
      if (cls < 0 || cls >= dec.classes)
        throw DomainError("categorical dataset: class out of range");
      ds.y_enc(i, d_i * dec.classes + cls) = 1.0;
      ds.y_obs(i, d_i) = static_cast<double>(cls);
      h = fnv1a(&cls, sizeof(cls), h);
    }
    ds.hash[static_cast<std::size_t>(i)] = h;
  }
  return ds;
}

Dataset slice(const Dataset& d, const std::vector<int>& rows) {
  Dataset out;
  const int n = static_cast<int>(rows.size());
  out.x.resize(n, d.x.cols());
  out.y_enc.resize(n, d.y_enc.cols());
  out.y_obs.resize(n, d.y_obs.cols());
  out.hash.resize(rows.size());
  for (int i = 0; i < n; ++i) {
    int r = rows[static_cast<std::size_t>(i)];
    out.x.row(i) = d.x.row(r);
    out.y_enc.row(i) = d.y_enc.row(r);
    out.y_obs.row(i) = d.y_obs.row(r);
    out.hash[static_cast<std::size_t>(i)] = d.hash[static_cast<std::size_t>(r)];
  }
  return out;
}

// ---- noise ----------------------------------------------------------------------

void ObjectiveConfig::validate() const {
  if (k < 1) throw ConfigError("objective: k must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("objective: alpha must lie in (0,1)");
  if (lambda < 0.0) throw ConfigError("objective: lambda must be >= 0");
}

LatentNoise draw_latent_noise(const latents::LatentSpec& spec, int batch, int m,
                              Rng& rng) {
  LatentNoise noise;
  for (int s = 0; s < m; ++s) {
    if (spec.discrete()) {
      Mat g(batch, spec.n * spec.k);
      for (Eigen::Index r = 0; r < g.rows(); ++r)
        for (Eigen::Index c = 0; c < g.cols(); ++c)
          g(r, c) = latents::gumbel_sample(uniform_open(rng));
      noise.gumbel.push_back(std::move(g));
    } else {
      Mat e(batch, spec.n);
      for (Eigen::Index r = 0; r < e.rows(); ++r)
        for (Eigen::Index c = 0; c < e.cols(); ++c) e(r, c) = normal(rng);
      noise.eps.push_back(std::move(e));
    }
  }
  return noise;
}

// ---- shared math ------------------------------------------------------------------

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274;

struct ContVars {
  Var mu, logsig;
};

ContVars cont_split(Var raw, int n) {
  return {d::slice_cols(raw, 0, n),
          d::clamp(d::slice_cols(raw, n, n), kLatentLogSigMin, kLatentLogSigMax)};
}

struct ContMats {
  Mat mu, logsig, sigma;
};

ContMats cont_split(const Mat& raw, int n) {
  ContMats c;
  c.mu = raw.leftCols(n);
  c.logsig = raw.middleCols(n, n).cwiseMax(kLatentLogSigMin).cwiseMin(kLatentLogSigMax);
  c.sigma = c.logsig.array().exp();
  return c;
}

Var gauss_logpdf_rows(Var z, Var mu, Var logsig) {
  Var zc = d::mul(d::sub(z, mu), d::exp_v(d::neg(logsig)));
  Var per = d::add_const(
      d::sub(d::neg(logsig), d::scale(d::square(zc), 0.5)), -kHalfLog2Pi);
  return d::sum_rows(per);
}

Mat gauss_logpdf_rows(const Mat& z, const Mat& mu, const Mat& logsig) {
  Mat zc = (z - mu).array() * (-logsig.array()).exp();
  Mat per = (-logsig).array() - 0.5 * zc.array().square() - kHalfLog2Pi;
  return per.rowwise().sum();
}

// log q(z) at the pathwise sample z = mu + sigma*eps: the (z-mu)/sigma factor
// reduces exactly to eps.
Var gauss_logq_pathwise(Var logsig, Var eps) {
  Var per = d::add_const(
      d::sub(d::neg(logsig), d::scale(d::square(eps), 0.5)), -kHalfLog2Pi);
  return d::sum_rows(per);
}

Mat gauss_logq_pathwise(const Mat& logsig, const Mat& eps) {
  Mat per = (-logsig).array() - 0.5 * eps.array().square() - kHalfLog2Pi;
  return per.rowwise().sum();
}

Var kl_gauss_perdim(const ContVars& q, const ContVars& p) {
  Var t1 = d::sub(p.logsig, q.logsig);
  Var t2 = d::scale(d::exp_v(d::scale(d::sub(q.logsig, p.logsig), 2.0)), 0.5);
  Var t3 = d::scale(
      d::mul(d::square(d::sub(q.mu, p.mu)), d::exp_v(d::scale(p.logsig, -2.0))), 0.5);
  return d::add_const(d::add(d::add(t1, t2), t3), -0.5);
}

Mat kl_gauss_perdim(const ContMats& q, const ContMats& p) {
  Mat t1 = p.logsig - q.logsig;
  Mat t2 = 0.5 * (2.0 * (q.logsig - p.logsig)).array().exp();
  Mat t3 = 0.5 * (q.mu - p.mu).array().square() * (-2.0 * p.logsig).array().exp();
  return (t1 + t2 + t3).array() - 0.5;
}

Var log_softmax_blocks(Var logits, int n, int k) {
  std::vector<Var> parts;
  parts.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    parts.push_back(d::log_softmax_rows(d::slice_cols(logits, i * k, k)));
  return d::hcat(parts);
}

Mat log_softmax_blocks(const Mat& logits, int n, int k) {
  Mat out(logits.rows(), logits.cols());
  for (int i = 0; i < n; ++i) {
    Mat blk = logits.middleCols(i * k, k);
    for (Eigen::Index r = 0; r < blk.rows(); ++r) {
      double m = blk.row(r).maxCoeff();
      double lse = m + std::log((blk.row(r).array() - m).exp().sum());
      out.row(r).segment(i * k, k) = blk.row(r).array() - lse;
    }
  }
  return out;
}

// per-variable KL from log-prob blocks: sum_j q_j (log q_j - log p_j)
Var kl_cat_pervar(Var lq, Var lp, int n, int k) {
  std::vector<Var> per;
  per.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Var lqb = d::slice_cols(lq, i * k, k);
    Var lpb = d::slice_cols(lp, i * k, k);
    per.push_back(d::sum_rows(d::mul(d::exp_v(lqb), d::sub(lqb, lpb))));
  }
  return d::hcat(per);
}

Mat kl_cat_pervar(const Mat& lq, const Mat& lp, int n, int k) {
  Mat out(lq.rows(), n);
  for (int i = 0; i < n; ++i) {
    Mat lqb = lq.middleCols(i * k, k);
    Mat lpb = lp.middleCols(i * k, k);
    out.col(i) = (lqb.array().exp() * (lqb - lpb).array()).rowwise().sum();
  }
  return out;
}

// Relaxed sample: per block softmax((logits + g)/tau). Softmax is invariant
// to the per-row log-normalizer shift, so raw logits are equivalent to log
// class probabilities here.
Var gumbel_softmax_blocks(diff::Graph& g, Var logits, const Mat& gumbel, double tau,
                          int n, int k) {
  if (tau <= 0.0) throw DomainError("gumbel_softmax: tau must be positive");
  Var shifted = d::scale(d::add(logits, g.c(gumbel)), 1.0 / tau);
  std::vector<Var> parts;
  parts.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    parts.push_back(d::softmax_rows(d::slice_cols(shifted, i * k, k)));
  return d::hcat(parts);
}

// Hard Gumbel-Max picks per block. Returns one-hot rows; pick indices go to
// `picks` ([N x n]) when non-null.
Mat hard_onehot_blocks(const Mat& logits, const Mat& gumbel, int n, int k,
                       Eigen::MatrixXi* picks) {
  Mat z = Mat::Zero(logits.rows(), logits.cols());
  if (picks) picks->resize(logits.rows(), n);
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_v = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        double v = logits(r, i * k + j) + gumbel(r, i * k + j);
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      z(r, i * k + best) = 1.0;
      if (picks) (*picks)(r, i) = best;
    }
  return z;
}

// log prob of picked categories under log-prob blocks
Vec picked_log_prob(const Mat& log_blocks, const Eigen::MatrixXi& picks, int n, int k) {
  Vec out = Vec::Zero(log_blocks.rows());
  for (Eigen::Index r = 0; r < log_blocks.rows(); ++r)
    for (int i = 0; i < n; ++i) out(r) += log_blocks(r, i * k + picks(r, i));
  return out;
}

Var decoder_logp(diff::Graph& g, const TransitionModel& model, Var z, Var x,
                 const Dataset& batch) {
  Var in = d::hcat({z, x});
  Var out = d::mlp_forward(model.decoder_spec(), g, "decoder", in);
  const DecoderSpec& dec = model.config().decoder;
  if (dec.family == DecoderFamily::kGaussian1d) {
    Var mean = d::slice_cols(out, 0, 1);
    Var logstd = d::slice_cols(out, 1, 1);
    return gauss_logpdf_rows(g.c(batch.y_obs), mean, logstd);
  }
  std::vector<Var> parts;
  parts.reserve(static_cast<std::size_t>(dec.dims));
  for (int i = 0; i < dec.dims; ++i)
    parts.push_back(d::log_softmax_rows(d::slice_cols(out, i * dec.classes, dec.classes)));
  Var log_sm = d::hcat(parts);
  return d::sum_rows(d::mul(log_sm, g.c(batch.y_enc)));
}

Mat decoder_logp(const TransitionModel& model, const d::ParameterStore& store,
                 const Mat& z, const Mat& x, const Mat& y_enc, const Mat& y_obs) {
  Mat in(z.rows(), z.cols() + x.cols());
  in << z, x;
  Mat out = d::mlp_forward(model.decoder_spec(), store, "decoder", in);
  const DecoderSpec& dec = model.config().decoder;
  if (dec.family == DecoderFamily::kGaussian1d) {
    return gauss_logpdf_rows(y_obs, out.col(0), out.col(1));
  }
  Mat log_sm = log_softmax_blocks(out, dec.dims, dec.classes);
  return (log_sm.array() * y_enc.array()).rowwise().sum();
}

double lse_guarded(const Vec& v) {
  double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf (or a stray +inf)
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v(i) - m);
  return m + std::log(s);
}

void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericalError(term, "term is not finite");
}

}  // namespace

// ---- tape objectives ----------------------------------------------------------------

namespace {

// Latent draws for one importance sample on the tape; continuous families
// also expose the ingredients for density ratios.
struct TapeSample {
  Var z;
  Var log_q;      // continuous only
  Var log_prior;  // continuous only
};

struct TapeLatents {
  ContVars prior, inference;       // continuous
  Var prior_logits, inf_logits;    // discrete
  Var lq_blocks, lp_blocks;        // discrete log-prob blocks
};

TapeLatents build_latent_nets(diff::Graph& g, const TransitionModel& model,
                              const Dataset& batch) {
  const auto& spec = model.config().latent;
  Var x = g.c(batch.x);
  Var prior_raw = d::mlp_forward(model.prior_spec(), g, "prior", x);
  Var inf_raw = d::mlp_forward(model.inference_spec(), g, "inference",
                               d::hcat({x, g.c(batch.y_enc)}));
  TapeLatents out;
  if (spec.discrete()) {
    out.prior_logits = prior_raw;
    out.inf_logits = inf_raw;
    out.lq_blocks = log_softmax_blocks(inf_raw, spec.n, spec.k);
    out.lp_blocks = log_softmax_blocks(prior_raw, spec.n, spec.k);
  } else {
    out.prior = cont_split(prior_raw, spec.n);
    out.inference = cont_split(inf_raw, spec.n);
  }
  return out;
}

TapeSample draw_tape_sample(diff::Graph& g, const TransitionModel& model,
                            const TapeLatents& lat, const LatentNoise& noise, int m,
                            double tau, bool want_densities) {
  const auto& spec = model.config().latent;
  TapeSample s;
  if (spec.discrete()) {
    s.z = gumbel_softmax_blocks(g, lat.inf_logits, noise.gumbel.at(static_cast<std::size_t>(m)),
                                tau, spec.n, spec.k);
    return s;
  }
  Var eps = g.c(noise.eps.at(static_cast<std::size_t>(m)));
  Var z0 = d::add(lat.inference.mu, d::mul(d::exp_v(lat.inference.logsig), eps));
  if (spec.flow()) {
    std::vector<Var> log_dets;
    s.z = model.flow().forward(g, z0, &log_dets);
    if (want_densities) {
      Var log_q = gauss_logq_pathwise(lat.inference.logsig, eps);
      for (Var ld : log_dets) log_q = d::sub(log_q, ld);
      s.log_q = log_q;
      s.log_prior = gauss_logpdf_rows(s.z, lat.prior.mu, lat.prior.logsig);
    }
  } else {
    s.z = z0;
    if (want_densities) {
      s.log_q = gauss_logq_pathwise(lat.inference.logsig, eps);
      s.log_prior = gauss_logpdf_rows(s.z, lat.prior.mu, lat.prior.logsig);
    }
  }
  return s;
}

}  // namespace

Var build_elbo(diff::Graph& g, const TransitionModel& model, const Dataset& batch,
               const LatentNoise& noise, double tau) {
  const auto& spec = model.config().latent;
  TapeLatents lat = build_latent_nets(g, model, batch);
  Var x = g.c(batch.x);
  TapeSample s = draw_tape_sample(g, model, lat, noise, 0, tau, spec.flow());
  Var recon = decoder_logp(g, model, s.z, x, batch);
  Var div_per_point;  // [B x 1]
  if (spec.discrete()) {
    div_per_point = d::sum_rows(kl_cat_pervar(lat.lq_blocks, lat.lp_blocks, spec.n, spec.k));
  } else if (spec.flow()) {
    div_per_point = d::sub(s.log_q, s.log_prior);
  } else {
    div_per_point = d::sum_rows(kl_gauss_perdim(lat.inference, lat.prior));
  }
  return d::mean_all(d::sub(recon, div_per_point));
}

Var build_vr_bound(diff::Graph& g, const TransitionModel& model, const Dataset& batch,
                   const LatentNoise& noise, double alpha) {
  const auto& spec = model.config().latent;
  if (spec.discrete())
    throw ConfigError("vr_bound tape path supports continuous latents only");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ConfigError("vr_bound: alpha must lie in (0,1)");
  int m_total = noise.samples();
  if (m_total < 1) throw ConfigError("vr_bound: need at least one sample");
  TapeLatents lat = build_latent_nets(g, model, batch);
  Var x = g.c(batch.x);
  std::vector<Var> log_ws;
  for (int m = 0; m < m_total; ++m) {
    TapeSample s = draw_tape_sample(g, model, lat, noise, m, /*tau=*/1.0, true);
    Var log_p = decoder_logp(g, model, s.z, x, batch);
    log_ws.push_back(d::sub(d::add(log_p, s.log_prior), s.log_q));
  }
  Var w = d::hcat(log_ws);
  Var lse = d::logsumexp_rows(d::scale(w, 1.0 - alpha));
  Var per_point =
      d::scale(d::add_const(lse, -std::log(static_cast<double>(m_total))), 1.0 / (1.0 - alpha));
  return d::mean_all(per_point);
}

Var build_train_loss(diff::Graph& g, const TransitionModel& model, const Dataset& batch,
                     const LatentNoise& noise, const ObjectiveConfig& obj, double tau,
                     TrainParts* parts) {
  obj.validate();
  const auto& spec = model.config().latent;
  const int m_total = noise.samples();
  TapeLatents lat = build_latent_nets(g, model, batch);
  Var x = g.c(batch.x);

  // VR reconstruction: (1/(1-a)) log (1/M) sum_m p(y|z^m,x)^(1-a)
  std::vector<Var> log_ps;
  std::vector<Var> mc_divs;  // flow only
  for (int m = 0; m < m_total; ++m) {
    TapeSample s = draw_tape_sample(g, model, lat, noise, m, tau, spec.flow());
    log_ps.push_back(decoder_logp(g, model, s.z, x, batch));
    if (spec.flow()) mc_divs.push_back(d::sub(s.log_q, s.log_prior));
  }
  Var recon;
  if (m_total == 1) {
    recon = d::mean_all(log_ps[0]);
  } else {
    Var w = d::hcat(log_ps);
    Var lse = d::logsumexp_rows(d::scale(w, 1.0 - obj.alpha));
    recon = d::mean_all(d::scale(
        d::add_const(lse, -std::log(static_cast<double>(m_total))), 1.0 / (1.0 - obj.alpha)));
  }

  // Free-bits divergence: per-dimension floor for analytic divergences; the
  // flow divergence has no per-dimension decomposition, so the floor applies
  // to the aggregate at lambda * n.
  Var div_sum;
  if (spec.discrete()) {
    Var kl = kl_cat_pervar(lat.lq_blocks, lat.lp_blocks, spec.n, spec.k);
    div_sum = d::sum_all(d::cmax(d::mean_cols(kl), obj.lambda));
  } else if (spec.flow()) {
    std::vector<Var> means;
    for (Var mc : mc_divs) means.push_back(d::mean_all(mc));
    Var avg = means[0];
    for (std::size_t i = 1; i < means.size(); ++i) avg = d::add(avg, means[i]);
    avg = d::scale(avg, 1.0 / static_cast<double>(means.size()));
    div_sum = d::cmax(avg, obj.lambda * spec.n);
  } else {
    Var kl = kl_gauss_perdim(lat.inference, lat.prior);
    div_sum = d::sum_all(d::cmax(d::mean_cols(kl), obj.lambda));
  }

  require_finite(recon.val()(0, 0), "reconstruction");
  require_finite(div_sum.val()(0, 0), "divergence");
  if (parts) {
    parts->recon = recon.val()(0, 0);
    parts->div = div_sum.val()(0, 0);
  }
  return d::neg(d::sub(recon, div_sum));
}

double free_bits_objective(double recon, const Vec& per_dim_divs, double lambda) {
  if (lambda < 0.0) throw DomainError("free_bits: lambda must be >= 0");
  double penalty = 0.0;
  for (Eigen::Index i = 0; i < per_dim_divs.size(); ++i)
    penalty += std::max(lambda, std::max(0.0, per_dim_divs(i)));
  return recon - penalty;
}

// ---- plain evaluation ---------------------------------------------------------------

namespace {

struct PlainLatents {
  ContMats prior, inference;
  Mat prior_logits, inf_logits;
  Mat lq_blocks, lp_blocks;
};

PlainLatents eval_latent_nets(const TransitionModel& model, const Mat& x,
                              const Mat& y_enc) {
  const auto& spec = model.config().latent;
  const auto& store = model.params();
  Mat prior_raw = d::mlp_forward(model.prior_spec(), store, "prior", x);
  Mat xy(x.rows(), x.cols() + y_enc.cols());
  xy << x, y_enc;
  Mat inf_raw = d::mlp_forward(model.inference_spec(), store, "inference", xy);
  PlainLatents out;
  if (spec.discrete()) {
    out.prior_logits = prior_raw;
    out.inf_logits = inf_raw;
    out.lq_blocks = log_softmax_blocks(inf_raw, spec.n, spec.k);
    out.lp_blocks = log_softmax_blocks(prior_raw, spec.n, spec.k);
  } else {
    out.prior = cont_split(prior_raw, spec.n);
    out.inference = cont_split(inf_raw, spec.n);
  }
  return out;
}

Mat draw_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

Mat draw_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = latents::gumbel_sample(uniform_open(rng));
  return m;
}

}  // namespace

double eval_elbo(const TransitionModel& model, const Dataset& data, Rng& rng) {
  const auto& spec = model.config().latent;
  PlainLatents lat = eval_latent_nets(model, data.x, data.y_enc);
  const int n_rows = data.size();
  Mat z;
  Vec div;  // per point
  if (spec.discrete()) {
    Mat g = draw_gumbel(n_rows, spec.n * spec.k, rng);
    z = hard_onehot_blocks(lat.inf_logits, g, spec.n, spec.k, nullptr);
    div = kl_cat_pervar(lat.lq_blocks, lat.lp_blocks, spec.n, spec.k).rowwise().sum();
  } else {
    Mat eps = draw_normal(n_rows, spec.n, rng);
    Mat z0 = lat.inference.mu.array() + lat.inference.sigma.array() * eps.array();
    if (spec.flow()) {
      Mat log_det;
      z = model.flow().forward_batch(model.params(), z0, &log_det);
      Vec log_q = gauss_logq_pathwise(lat.inference.logsig, eps) - log_det;
      Vec log_prior = gauss_logpdf_rows(z, lat.prior.mu, lat.prior.logsig);
      div = log_q - log_prior;
    } else {
      z = z0;
      div = kl_gauss_perdim(lat.inference, lat.prior).rowwise().sum();
    }
  }
  Vec recon = decoder_logp(model, model.params(), z, data.x, data.y_enc, data.y_obs);
  double v = (recon - div).mean();
  require_finite(v, "elbo");
  return v;
}

double eval_vr_bound(const TransitionModel& model, const Dataset& data, int m,
                     double alpha, Rng& rng) {
  if (m < 1) throw ConfigError("vr_bound: m must be >= 1");
  return eval_vr_bound(model, data,
                       draw_latent_noise(model.config().latent, data.size(), m, rng),
                       alpha);
}

double eval_vr_bound(const TransitionModel& model, const Dataset& data,
                     const LatentNoise& noise, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("vr_bound: alpha must lie in (0,1)");
  const int m = noise.samples();
  if (m < 1) throw ConfigError("vr_bound: need at least one sample");
  const auto& spec = model.config().latent;
  PlainLatents lat = eval_latent_nets(model, data.x, data.y_enc);
  const int n_rows = data.size();
  Mat log_w(n_rows, m);
  for (int s = 0; s < m; ++s) {
    Mat z;
    Vec log_q, log_prior;
    if (spec.discrete()) {
      const Mat& g = noise.gumbel.at(static_cast<std::size_t>(s));
      Eigen::MatrixXi picks;
      z = hard_onehot_blocks(lat.inf_logits, g, spec.n, spec.k, &picks);
      log_q = picked_log_prob(lat.lq_blocks, picks, spec.n, spec.k);
      log_prior = picked_log_prob(lat.lp_blocks, picks, spec.n, spec.k);
    } else {
      const Mat& eps = noise.eps.at(static_cast<std::size_t>(s));
      Mat z0 = lat.inference.mu.array() + lat.inference.sigma.array() * eps.array();
      if (spec.flow()) {
        Mat log_det;
        z = model.flow().forward_batch(model.params(), z0, &log_det);
        log_q = gauss_logq_pathwise(lat.inference.logsig, eps) - log_det;
      } else {
        z = z0;
        log_q = gauss_logq_pathwise(lat.inference.logsig, eps);
      }
      log_prior = gauss_logpdf_rows(z, lat.prior.mu, lat.prior.logsig);
    }
    Vec log_p = decoder_logp(model, model.params(), z, data.x, data.y_enc, data.y_obs);
    log_w.col(s) = log_p + log_prior - log_q;
  }
  double acc = 0.0;
  for (int i = 0; i < n_rows; ++i) {
    Vec row = (1.0 - alpha) * log_w.row(i).transpose();
    acc += (lse_guarded(row) - std::log(static_cast<double>(m))) / (1.0 - alpha);
  }
  return acc / n_rows;
}

double test_nll(const TransitionModel& model, const Dataset& data, int m,
                std::uint64_t seed) {
  if (m < 1) throw ConfigError("test_nll: m must be >= 1");
  const auto& spec = model.config().latent;
  PlainLatents lat = eval_latent_nets(model, data.x, data.y_enc);
  const int n_rows = data.size();
  double acc = 0.0;
  for (int i = 0; i < n_rows; ++i) {
    Rng rng = make_rng(seed, data.hash[static_cast<std::size_t>(i)]);
    Mat x_rep = data.x.row(i).replicate(m, 1);
    Mat y_enc_rep = data.y_enc.row(i).replicate(m, 1);
    Mat y_obs_rep = data.y_obs.row(i).replicate(m, 1);
    Mat z;
    Vec log_q, log_prior;
    if (spec.discrete()) {
      Mat g = draw_gumbel(m, spec.n * spec.k, rng);
      Mat inf_rep = lat.inf_logits.row(i).replicate(m, 1);
      Eigen::MatrixXi picks;
      z = hard_onehot_blocks(inf_rep, g, spec.n, spec.k, &picks);
      log_q = picked_log_prob(lat.lq_blocks.row(i).replicate(m, 1), picks, spec.n, spec.k);
      log_prior = picked_log_prob(lat.lp_blocks.row(i).replicate(m, 1), picks, spec.n, spec.k);
    } else {
      Mat eps = draw_normal(m, spec.n, rng);
      Mat mu = lat.inference.mu.row(i).replicate(m, 1);
      Mat sig = lat.inference.sigma.row(i).replicate(m, 1);
      Mat logsig = lat.inference.logsig.row(i).replicate(m, 1);
      Mat z0 = mu.array() + sig.array() * eps.array();
      if (spec.flow()) {
        Mat log_det;
        z = model.flow().forward_batch(model.params(), z0, &log_det);
        log_q = gauss_logq_pathwise(logsig, eps) - log_det;
      } else {
        z = z0;
        log_q = gauss_logq_pathwise(logsig, eps);
      }
      log_prior = gauss_logpdf_rows(z, lat.prior.mu.row(i).replicate(m, 1),
                                    lat.prior.logsig.row(i).replicate(m, 1));
    }
    Vec log_p = decoder_logp(model, model.params(), z, x_rep, y_enc_rep, y_obs_rep);
    Vec lw = log_p + log_prior - log_q;
    double log_phat = lse_guarded(lw) - std::log(static_cast<double>(m));
    if (!std::isfinite(log_phat))
      throw NumericalError("test_nll", "degenerate importance weights");
    acc += log_phat;
  }
  return -acc / n_rows;
}

Mat sample_prediction(const TransitionModel& model, const Vec& x_encoded, int n,
                      Rng& rng) {
  if (n < 1) throw ConfigError("sample_prediction: n must be >= 1");
  const auto& spec = model.config().latent;
  const auto& store = model.params();
  Mat x_row = x_encoded.transpose();
  Mat prior_raw = d::mlp_forward(model.prior_spec(), store, "prior", x_row);
  Mat z;
  if (spec.discrete()) {
    Mat logits_rep = prior_raw.replicate(n, 1);
    Mat g = draw_gumbel(n, spec.n * spec.k, rng);
    z = hard_onehot_blocks(logits_rep, g, spec.n, spec.k, nullptr);
  } else {
    ContMats p = cont_split(prior_raw, spec.n);
    Mat eps = draw_normal(n, spec.n, rng);
    z = (p.mu.replicate(n, 1).array() + p.sigma.replicate(n, 1).array() * eps.array());
  }
  Mat in(n, z.cols() + x_row.cols());
  in << z, x_row.replicate(n, 1);
  Mat out = d::mlp_forward(model.decoder_spec(), store, "decoder", in);
  const DecoderSpec& dec = model.config().decoder;
  if (dec.family == DecoderFamily::kGaussian1d) {
    Mat y(n, 1);
    for (int i = 0; i < n; ++i)
      y(i, 0) = out(i, 0) + std::exp(out(i, 1)) * normal(rng);
    return y;
  }
  Mat y(n, dec.dims);
  for (int i = 0; i < n; ++i)
    for (int dim = 0; dim < dec.dims; ++dim) {
      Eigen::RowVectorXd blk = out.row(i).segment(dim * dec.classes, dec.classes);
      double mx = blk.maxCoeff();
      Eigen::RowVectorXd p = (blk.array() - mx).exp();
      p /= p.sum();
      double u = uniform_open(rng);
      double cum = 0.0;
      int pick = dec.classes - 1;
      for (int c = 0; c < dec.classes; ++c) {
        cum += p(c);
        if (u <= cum) {
          pick = c;
          break;
        }
      }
      y(i, dim) = static_cast<double>(pick);
    }
  return y;
}

}  // namespace stw::cvae
