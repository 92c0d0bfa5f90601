#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "stw/cvae.hpp"
#include "stw/harness.hpp"

using namespace stw;
using namespace stw::cvae;
using diff::Mat;
using diff::Vec;

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274;

// The strictly bimodal fixture: y in {y1, y2} with p(y1|x) = 0.3, one binary
// latent, a decoder that maps z deterministically to y (logits +-40 are exact
// in doubles), and a configurable inference table.
struct TwoPoint {
  TransitionModel model;
  static ModelConfig config() {
    ModelConfig cfg;
    cfg.latent.family = latents::LatentSpec::Family::kDiscrete;
    cfg.latent.n = 1;
    cfg.latent.k = 2;
    cfg.latent.temperature = {1.0, 1.0, 1.0, 1};
    cfg.decoder.family = DecoderFamily::kFactoredCategorical;
    cfg.decoder.dims = 1;
    cfg.decoder.classes = 2;
    cfg.encoding = InputEncoding::kToyScalar;
    return cfg;
  }
  // q_y1 are the inference probabilities given y = class 0
  static TwoPoint make(double q1_given_y1, double q1_given_y2) {
    TwoPoint tp{TransitionModel::make(config(), 0)};
    auto& p = tp.model.params();
    p.get("prior/W0").setZero();
    p.get("prior/b0") << std::log(0.3), std::log(0.7);
    p.get("inference/W0").setZero();
    // inference input: (x, y one-hot); rows: x, y=class0, y=class1
    p.get("inference/W0").row(1) << std::log(q1_given_y1), std::log(1.0 - q1_given_y1);
    p.get("inference/W0").row(2) << std::log(q1_given_y2), std::log(1.0 - q1_given_y2);
    p.get("inference/b0").setZero();
    // decoder input: (z one-hot, x); rows: z=class0, z=class1, x
    p.get("decoder/W0").setZero();
    p.get("decoder/W0").row(0) << 40.0, -40.0;
    p.get("decoder/W0").row(1) << -40.0, 40.0;
    p.get("decoder/b0").setZero();
    return tp;
  }
  // exact posterior: q(z=c | y=c) = 1 with +-40 logits
  static TwoPoint make_exact_posterior() {
    TwoPoint tp{TransitionModel::make(config(), 0)};
    auto& p = tp.model.params();
    p.get("prior/W0").setZero();
    p.get("prior/b0") << std::log(0.3), std::log(0.7);
    p.get("inference/W0").setZero();
    p.get("inference/W0").row(1) << 40.0, -40.0;
    p.get("inference/W0").row(2) << -40.0, 40.0;
    p.get("inference/b0").setZero();
    p.get("decoder/W0").setZero();
    p.get("decoder/W0").row(0) << 40.0, -40.0;
    p.get("decoder/W0").row(1) << -40.0, 40.0;
    p.get("decoder/b0").setZero();
    return tp;
  }
};

Dataset two_point_data(const std::vector<int>& ys) {
  Mat x = Mat::Zero(static_cast<int>(ys.size()), 1);
  Eigen::MatrixXi cls(static_cast<int>(ys.size()), 1);
  for (std::size_t i = 0; i < ys.size(); ++i) cls(static_cast<int>(i), 0) = ys[i];
  DecoderSpec dec;
  dec.family = DecoderFamily::kFactoredCategorical;
  dec.dims = 1;
  dec.classes = 2;
  return make_categorical_dataset(x, cls, dec);
}

double stable_lse(const std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// a small random toy-domain Gaussian model
TransitionModel random_toy_model(latents::LatentSpec::Family family, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.latent.family = family;
  cfg.latent.n = family == latents::LatentSpec::Family::kDiscrete ? 3 : 2;
  cfg.latent.k = 3;
  cfg.latent.n_flow = family == latents::LatentSpec::Family::kGaussianFlow ? 2 : 0;
  cfg.latent.temperature = {1.0, 1.0, 1.0, 1};
  cfg.decoder.family = DecoderFamily::kGaussian1d;
  cfg.encoding = InputEncoding::kToyScalar;
  cfg.prior_hidden = {8};
  cfg.inference_hidden = {8};
  cfg.decoder_hidden = {8};
  return TransitionModel::make(cfg, seed);
}

Dataset small_toy_data(int n, std::uint64_t seed) {
  return harness::draw_toy_dataset(n, seed, 1);
}

diff::Objective tape_objective(const TransitionModel& model,
                               const std::function<diff::Var(diff::Graph&)>& build) {
  (void)model;
  diff::Objective obj;
  obj.value = [build](const diff::ParameterStore& ps) {
    diff::Graph g(ps);
    return build(g).val()(0, 0);
  };
  obj.grads = [build](const diff::ParameterStore& ps) {
    diff::Graph g(ps);
    diff::Var loss = build(g);
    g.backward(loss);
    return g.grads();
  };
  return obj;
}

}  // namespace

TEST_CASE("encode_input: one-hot structure and domain checks") {
  CHECK(encode_toy_x(0.25)(0) == 0.25);
  Vec coord = encode_grid_state({{0, 0}, {3, 3}, {5, 1}});
  CHECK(coord.size() == 42);
  CHECK(coord.sum() == doctest::Approx(6.0));
  CHECK(coord(0) == 1.0);                // agent.x = 0 -> (1,0,...)
  CHECK(coord(7) == 1.0);                // agent.y = 0
  CHECK(coord(14 + 3) == 1.0);           // ghost1.x = 3
  CHECK(coord(28 + 5) == 1.0);           // ghost2.x = 5
  CHECK(coord(35 + 1) == 1.0);           // ghost2.y = 1
  Vec x = encode_grid_x({{0, 0}, {3, 3}, {5, 1}}, envs::Action::kLeft);
  CHECK(x.size() == 46);
  CHECK(x(42 + 2) == 1.0);  // left one-hot
  CHECK_THROWS_AS(encode_grid_state({{0, 0}, {3, 7}, {5, 1}}), DomainError);
}

TEST_CASE("two-point model: ELBO equals ln 0.3 under the sharp posterior") {
  TwoPoint tp = TwoPoint::make_exact_posterior();
  Dataset d = two_point_data({0});  // the (x, y1) pair
  Rng rng = make_rng(1);
  double elbo = eval_elbo(tp.model, d, rng);
  CHECK(elbo == doctest::Approx(std::log(0.3)).epsilon(1e-9));
  // ... which is exactly log p(y1|x) for this model
}

TEST_CASE("two-point model: q = prior with a z-independent decoder") {
  TwoPoint tp = TwoPoint::make(0.3, 0.3);  // q == prior for both outcomes
  auto& p = tp.model.params();
  p.get("decoder/W0").setZero();  // decoder ignores z (and x)
  p.get("decoder/b0") << std::log(0.25), std::log(0.75);
  Dataset d = two_point_data({0, 1, 1, 1});
  Rng rng = make_rng(2);
  double elbo = eval_elbo(tp.model, d, rng);
  // KL term vanishes; ELBO = mean log p(y) under the decoder alone
  double expected = (std::log(0.25) + 3 * std::log(0.75)) / 4.0;
  CHECK(elbo == doctest::Approx(expected).epsilon(1e-9));

  // test_nll with ratio == 1 reduces to the plain Monte-Carlo estimator,
  // which is exact for a z-independent decoder
  double nll = test_nll(tp.model, d, 7, 123);
  CHECK(nll == doctest::Approx(-expected).epsilon(1e-12));
}

TEST_CASE("two-point model: constant-ratio identity for the VR bound") {
  TwoPoint tp = TwoPoint::make_exact_posterior();
  Dataset d = two_point_data({0});
  for (int m : {1, 3, 7}) {
    for (double alpha : {0.25, 0.5, 0.75}) {
      Rng rng = make_rng(static_cast<std::uint64_t>(m * 100) + 3);
      double vr = eval_vr_bound(tp.model, d, m, alpha, rng);
      CHECK(vr == doctest::Approx(std::log(0.3)).epsilon(1e-12));
    }
  }
}

TEST_CASE("two-point model: VR bound matches brute-force enumeration to 1e-10") {
  const double q1 = 0.999;
  TwoPoint tp = TwoPoint::make(q1, 1.0 - q1);
  Dataset d = two_point_data({0});
  const double alpha = 0.5;
  const int m = 3;

  // oracle pieces recomputed independently from the constructed tables
  auto log_softmax2 = [](double a, double b) {
    double mx = std::max(a, b);
    double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    return std::pair<double, double>{a - lse, b - lse};
  };
  auto [lq0, lq1] = log_softmax2(std::log(q1), std::log(1.0 - q1));
  auto [lp0, lp1] = log_softmax2(std::log(0.3), std::log(0.7));
  auto [ld0_y0, ld0_y1] = log_softmax2(40.0, -40.0);   // decoder given z = class0
  auto [ld1_y0, ld1_y1] = log_softmax2(-40.0, 40.0);   // decoder given z = class1
  (void)ld0_y1;
  (void)ld1_y1;
  double logw[2] = {ld0_y0 + lp0 - lq0, ld1_y0 + lp1 - lq1};

  double expectation = 0.0;
  double qprob[2] = {std::exp(lq0), std::exp(lq1)};
  for (int c1 = 0; c1 < 2; ++c1)
    for (int c2 = 0; c2 < 2; ++c2)
      for (int c3 = 0; c3 < 2; ++c3) {
        std::vector<double> scaled = {(1 - alpha) * logw[c1], (1 - alpha) * logw[c2],
                                      (1 - alpha) * logw[c3]};
        double bound =
            (stable_lse(scaled) - std::log(3.0)) / (1 - alpha);
        expectation += qprob[c1] * qprob[c2] * qprob[c3] * bound;

        // force this draw combination through the implementation
        LatentNoise noise;
        for (int c : {c1, c2, c3}) {
          Mat g = Mat::Zero(1, 2);
          g(0, c) = 50.0;
          noise.gumbel.push_back(g);
        }
        double impl = eval_vr_bound(tp.model, d, noise, alpha);
        CHECK(impl == doctest::Approx(bound).epsilon(1e-10));
      }
  // sanity on the oracle itself: the enumeration expectation is a lower
  // bound on log p(y1|x) = ln 0.3 and close to it for this sharp posterior
  CHECK(expectation < std::log(0.3) + 1e-12);
  CHECK(expectation == doctest::Approx(std::log(0.3)).epsilon(0.05));
}

TEST_CASE("two-point model: test NLL converges to the marginal entropy") {
  TwoPoint tp = TwoPoint::make_exact_posterior();
  Rng rng = make_rng(97);
  std::vector<int> ys;
  ys.reserve(10000);
  for (int i = 0; i < 10000; ++i) ys.push_back(uniform_open(rng) <= 0.3 ? 0 : 1);
  Dataset d = two_point_data(ys);
  double nll = test_nll(tp.model, d, 100, 4242);
  double entropy = -(0.3 * std::log(0.3) + 0.7 * std::log(0.7));
  CHECK(nll == doctest::Approx(entropy).epsilon(0.0164));  // 0.01 absolute
  CHECK(std::abs(nll - entropy) < 0.01);
}

TEST_CASE("test_nll is invariant under dataset permutation") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussian, 5);
  Dataset d = small_toy_data(300, 8);
  std::vector<int> rev(300);
  std::iota(rev.begin(), rev.end(), 0);
  std::reverse(rev.begin(), rev.end());
  Dataset d_rev = slice(d, rev);
  double a = test_nll(model, d, 50, 777);
  double b = test_nll(model, d_rev, 50, 777);
  CHECK(std::abs(a - b) < 1e-9);
}

TEST_CASE("vr_bound with M=1 equals the single-sample ELBO estimate") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussian, 6);
  Dataset d = small_toy_data(40, 9);
  Rng rng = make_rng(10);
  LatentNoise noise = draw_latent_noise(model.config().latent, d.size(), 1, rng);

  double vr = eval_vr_bound(model, d, noise, 0.5);

  // independent recomputation: log p(y|z,x) + log p(z|x) - log q(z|x,y)
  const auto& spec = model.config().latent;
  Mat prior_raw = diff::mlp_forward(model.prior_spec(), model.params(), "prior", d.x);
  Mat xy(d.size(), d.x.cols() + d.y_enc.cols());
  xy << d.x, d.y_enc;
  Mat inf_raw = diff::mlp_forward(model.inference_spec(), model.params(), "inference", xy);
  double acc = 0.0;
  for (int i = 0; i < d.size(); ++i) {
    Vec mu_q = inf_raw.row(i).head(spec.n), ls_q = inf_raw.row(i).tail(spec.n);
    Vec mu_p = prior_raw.row(i).head(spec.n), ls_p = prior_raw.row(i).tail(spec.n);
    Vec eps = noise.eps[0].row(i).transpose();
    Vec z = mu_q.array() + ls_q.array().exp() * eps.array();
    double log_q = 0.0, log_p = 0.0;
    for (int j = 0; j < spec.n; ++j) {
      log_q += -ls_q(j) - 0.5 * eps(j) * eps(j) - kHalfLog2Pi;
      double zc = (z(j) - mu_p(j)) * std::exp(-ls_p(j));
      log_p += -ls_p(j) - 0.5 * zc * zc - kHalfLog2Pi;
    }
    Mat din(1, spec.n + 1);
    din << z.transpose(), d.x.row(i);
    Mat out = diff::mlp_forward(model.decoder_spec(), model.params(), "decoder", din);
    double zc = (d.y_obs(i, 0) - out(0, 0)) * std::exp(-out(0, 1));
    double log_lik = -out(0, 1) - 0.5 * zc * zc - kHalfLog2Pi;
    acc += log_lik + log_p - log_q;
  }
  CHECK(vr == doctest::Approx(acc / d.size()).epsilon(1e-12));
}

TEST_CASE("bound ordering: VR(M=3) above ELBO within 2 standard errors") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussian, 7);
  Dataset d = small_toy_data(400, 11);
  const int reps = 30;
  std::vector<double> elbos, vrs;
  Rng rng = make_rng(12);
  for (int r = 0; r < reps; ++r) {
    elbos.push_back(eval_elbo(model, d, rng));
    vrs.push_back(eval_vr_bound(model, d, 3, 0.5, rng));
  }
  auto mean_se = [](const std::vector<double>& v) {
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= (v.size() - 1.0);
    return std::pair<double, double>{mean, std::sqrt(var / v.size())};
  };
  auto [me, se_e] = mean_se(elbos);
  auto [mv, se_v] = mean_se(vrs);
  CHECK(mv >= me - 2.0 * std::sqrt(se_e * se_e + se_v * se_v));
}

TEST_CASE("ELBO lower-bounds the importance-sampled likelihood estimate") {
  // over 10 seeds: mean per-point (elbo_i - log phat_i) <= 0 within MC error
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussian, 20 + seed);
    Dataset d = small_toy_data(200, 30 + seed);
    std::vector<double> diffs;
    Rng rng = make_rng(40 + seed);
    for (int i = 0; i < d.size(); ++i) {
      Dataset one = slice(d, {i});
      double elbo_i = eval_elbo(model, one, rng);
      double ll_i = -test_nll(model, one, 100, 50 + seed);
      diffs.push_back(elbo_i - ll_i);
    }
    double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / diffs.size();
    double var = 0.0;
    for (double x : diffs) var += (x - mean) * (x - mean);
    var /= (diffs.size() - 1.0);
    double se = std::sqrt(var / diffs.size());
    CHECK(mean <= 2.0 * se);
  }
}

TEST_CASE("free_bits_objective arithmetic") {
  Vec divs(2);
  divs << 0.01, 0.2;
  CHECK(free_bits_objective(1.0, divs, 0.07) == doctest::Approx(1.0 - 0.27));
  // lambda = 0: plain reconstruction - sum of (clamped) divergences
  CHECK(free_bits_objective(1.0, divs, 0.0) == doctest::Approx(1.0 - 0.21));
  Vec big(2);
  big << 0.5, 0.9;
  CHECK(free_bits_objective(2.0, big, 0.07) == doctest::Approx(2.0 - 1.4));
  Vec neg(1);
  neg << -1e-15;  // analytic round-off clamps at zero
  CHECK(free_bits_objective(0.0, neg, 0.0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(free_bits_objective(0.0, divs, -0.1), DomainError);
}

TEST_CASE("sample_prediction: point-mass decoder ignores z") {
  TwoPoint tp = TwoPoint::make(0.5, 0.5);
  auto& p = tp.model.params();
  p.get("decoder/W0").setZero();
  p.get("decoder/b0") << 40.0, -40.0;  // always class 0
  Rng rng = make_rng(55);
  Mat draws = sample_prediction(tp.model, encode_toy_x(0.0), 500, rng);
  CHECK(draws.rows() == 500);
  CHECK(draws.cols() == 1);
  CHECK(draws.cwiseAbs().maxCoeff() == 0.0);  // every draw is class 0
}

TEST_CASE("sample_prediction: gaussian decoder shape and spread") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussian, 8);
  Rng rng = make_rng(56);
  Mat draws = sample_prediction(model, encode_toy_x(0.1), 2000, rng);
  CHECK(draws.rows() == 2000);
  CHECK(draws.cols() == 1);
  double mean = draws.col(0).mean();
  CHECK(std::isfinite(mean));
  double var = (draws.col(0).array() - mean).square().mean();
  CHECK(var > 0.0);  // the output head carries noise
}

TEST_CASE("grad_check: Gaussian-latent ELBO below 1e-5") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussian, 9);
  Dataset d = small_toy_data(8, 13);
  Rng rng = make_rng(14);
  LatentNoise noise = draw_latent_noise(model.config().latent, d.size(), 1, rng);
  auto build = [&](diff::Graph& g) { return build_elbo(g, model, d, noise, 1.0); };
  CHECK(diff::grad_check(model.params(), tape_objective(model, build), 1e-5) < 1e-5);
}

TEST_CASE("grad_check: discrete relaxed objective at tau=1 below 1e-4") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kDiscrete, 10);
  Dataset d = small_toy_data(8, 15);
  Rng rng = make_rng(16);
  LatentNoise noise = draw_latent_noise(model.config().latent, d.size(), 1, rng);
  auto build = [&](diff::Graph& g) { return build_elbo(g, model, d, noise, 1.0); };
  CHECK(diff::grad_check(model.params(), tape_objective(model, build), 1e-5) < 1e-4);
}

TEST_CASE("grad_check: composed training loss for all three families") {
  ObjectiveConfig obj;
  for (auto family : {latents::LatentSpec::Family::kGaussian,
                      latents::LatentSpec::Family::kGaussianFlow,
                      latents::LatentSpec::Family::kDiscrete}) {
    TransitionModel model = random_toy_model(family, 11);
    Dataset d = small_toy_data(8, 17);
    Rng rng = make_rng(18);
    LatentNoise noise = draw_latent_noise(model.config().latent, d.size(), obj.k, rng);
    auto build = [&](diff::Graph& g) {
      return build_train_loss(g, model, d, noise, obj, 1.0, nullptr);
    };
    CHECK(diff::grad_check(model.params(), tape_objective(model, build), 1e-5) < 1e-4);
  }
}

TEST_CASE("model sidecar: JSON round-trip preserves behaviour") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussianFlow, 12);
  auto dir = std::filesystem::temp_directory_path() / "stw_model_test";
  std::filesystem::create_directories(dir);
  model.params().save(dir / "model.swve");
  TransitionModel back = TransitionModel::from_sidecar(
      model.sidecar_json(), diff::ParameterStore::load(dir / "model.swve"));
  Dataset d = small_toy_data(30, 19);
  Rng r1 = make_rng(20), r2 = make_rng(20);
  CHECK(eval_elbo(model, d, r1) == doctest::Approx(eval_elbo(back, d, r2)).epsilon(1e-14));
  CHECK(test_nll(model, d, 20, 3) == doctest::Approx(test_nll(back, d, 20, 3)).epsilon(1e-14));
  std::filesystem::remove_all(dir);
}

TEST_CASE("training objective rejects invalid configuration") {
  ObjectiveConfig bad;
  bad.k = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.k = 3;
  bad.alpha = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.alpha = 0.5;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("train loss reports reconstruction and divergence parts") {
  TransitionModel model = random_toy_model(latents::LatentSpec::Family::kGaussian, 13);
  Dataset d = small_toy_data(16, 21);
  Rng rng = make_rng(22);
  ObjectiveConfig obj;
  LatentNoise noise = draw_latent_noise(model.config().latent, d.size(), obj.k, rng);
  diff::Graph g(model.params());
  TrainParts parts;
  diff::Var loss = build_train_loss(g, model, d, noise, obj, 1.0, &parts);
  CHECK(loss.val()(0, 0) == doctest::Approx(-(parts.recon - parts.div)).epsilon(1e-12));
  // the free-bits floor keeps every per-dimension penalty at >= lambda
  CHECK(parts.div >= obj.lambda * model.config().latent.n - 1e-12);
}
