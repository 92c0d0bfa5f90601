#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "stw/latents.hpp"

using namespace stw;
using namespace stw::latents;
using diff::Mat;
using diff::Vec;

namespace {

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("gaussian_reparam: identity and affine cases") {
  CHECK(gaussian_reparam(Vec::Zero(1), Vec::Ones(1), Vec::Zero(1))(0) == 0.0);
  Vec mu = Vec::Constant(1, 2.0), sig = Vec::Constant(1, 0.5), eps = Vec::Ones(1);
  CHECK(gaussian_reparam(mu, sig, eps)(0) == doctest::Approx(2.5));
  CHECK_THROWS_AS(gaussian_reparam(mu, Vec::Zero(1), eps), DomainError);
  CHECK_THROWS_AS(gaussian_reparam(mu, sig, Vec::Zero(2)), DomainError);
}

TEST_CASE("gaussian_reparam: KS test against N(mu, sigma^2)") {
  Rng rng = make_rng(2024);
  const int n = 10000;
  const double mu = 0.7, sigma = 1.9;
  std::vector<double> z(n);
  for (int i = 0; i < n; ++i)
    z[static_cast<std::size_t>(i)] =
        gaussian_reparam(Vec::Constant(1, mu), Vec::Constant(1, sigma),
                         Vec::Constant(1, normal(rng)))(0);
  std::sort(z.begin(), z.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    double cdf = phi((z[static_cast<std::size_t>(i)] - mu) / sigma);
    ks = std::max(ks, std::abs(cdf - (i + 1.0) / n));
    ks = std::max(ks, std::abs(cdf - static_cast<double>(i) / n));
  }
  // significance 0.01: c = 1.628 / sqrt(n)
  CHECK(ks < 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("gumbel_sample: closed-form points, monotonicity, domain") {
  CHECK(gumbel_sample(std::exp(-1.0)) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(gumbel_sample(std::exp(-std::exp(1.0))) == doctest::Approx(-1.0));
  double prev = gumbel_sample(0.01);
  for (double u = 0.02; u < 1.0; u += 0.01) {
    double g = gumbel_sample(u);
    CHECK(g > prev);
    prev = g;
  }
  CHECK_THROWS_AS(gumbel_sample(0.0), DomainError);
  CHECK_THROWS_AS(gumbel_sample(1.0), DomainError);
  CHECK_THROWS_AS(gumbel_sample(-2.0), DomainError);
}

TEST_CASE("gumbel_max: degenerate, by-inspection, tie break") {
  Vec logw = vec2(0.0, -60.0);  // omega ~ (1, 0+)
  Rng rng = make_rng(5);
  for (int i = 0; i < 200; ++i) {
    Vec g = gumbel_vector(2, rng);
    CHECK(gumbel_max_index(logw, g) == 0);
  }
  CHECK(gumbel_max(Vec::Zero(2), vec2(5.0, 0.0))(0) == 1.0);
  // exact tie -> lowest index
  CHECK(gumbel_max_index(Vec::Zero(3), Vec::Zero(3)) == 0);
}

TEST_CASE("gumbel_max: frequencies converge to omega") {
  const int n = 100000;
  Vec logw = vec2(std::log(0.3), std::log(0.7));
  Rng rng = make_rng(99);
  int count0 = 0;
  for (int i = 0; i < n; ++i)
    if (gumbel_max_index(logw, gumbel_vector(2, rng)) == 0) count0++;
  double f0 = static_cast<double>(count0) / n;
  CHECK(std::abs(f0 - 0.3) < 0.01);
}

TEST_CASE("gumbel_softmax: direct evaluation and temperature limits") {
  Vec z = gumbel_softmax(Vec::Zero(2), vec2(1.0, 0.0), 1.0);
  double e = std::exp(1.0);
  CHECK(z(0) == doctest::Approx(e / (e + 1.0)));
  CHECK(z(1) == doctest::Approx(1.0 / (e + 1.0)));

  Vec hot = gumbel_softmax(Vec::Zero(2), vec2(1.0, 0.0), 1e-4);
  CHECK(hot(0) == doctest::Approx(1.0));
  Vec uni = gumbel_softmax(vec2(2.0, -1.0), vec2(1.0, 0.0), 1e7);
  CHECK(uni(0) == doctest::Approx(0.5).epsilon(1e-4));
  CHECK_THROWS_AS(gumbel_softmax(Vec::Zero(2), Vec::Zero(2), 0.0), DomainError);
}

TEST_CASE("gumbel_softmax: strictly inside the simplex for tau > 0") {
  Rng rng = make_rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    Vec logw(4);
    for (int i = 0; i < 4; ++i) logw(i) = 3.0 * normal(rng);
    Vec z = gumbel_softmax(logw, gumbel_vector(4, rng), 0.5);
    CHECK(z.sum() == doctest::Approx(1.0).epsilon(1e-12));
    for (int i = 0; i < 4; ++i) {
      CHECK(z(i) > 0.0);
      CHECK(z(i) < 1.0);
    }
  }
}

TEST_CASE("gumbel: TV between hard argmax draws and softmax-argmax at tau=0.01") {
  const int n = 100000;
  Vec logw(3);
  logw << std::log(0.2), std::log(0.5), std::log(0.3);
  Rng rng1 = make_rng(301), rng2 = make_rng(302);
  std::map<int, double> f_hard, f_soft;
  for (int i = 0; i < n; ++i) {
    f_hard[gumbel_max_index(logw, gumbel_vector(3, rng1))] += 1.0 / n;
    Vec z = gumbel_softmax(logw, gumbel_vector(3, rng2), 0.01);
    int arg = 0;
    z.maxCoeff(&arg);
    f_soft[arg] += 1.0 / n;
  }
  double tv = 0.0;
  for (int c = 0; c < 3; ++c) tv += std::abs(f_hard[c] - f_soft[c]);
  CHECK(tv / 2.0 < 0.02);
}

TEST_CASE("coupling_forward: identity flow and hand-evaluated transform") {
  auto zero = [](const Vec& v) { return Vec::Zero(v.size()).eval(); };
  Vec z = vec2(1.0, 2.0);
  auto [z_id, ld_id] = coupling_forward(z, 1, zero, zero);
  CHECK((z_id - z).cwiseAbs().maxCoeff() == 0.0);
  CHECK(ld_id == 0.0);
  CHECK((coupling_inverse(z, 1, zero, zero) - z).cwiseAbs().maxCoeff() == 0.0);

  auto s_ln2 = [](const Vec&) { return Vec::Constant(1, std::log(2.0)).eval(); };
  auto t_3 = [](const Vec&) { return Vec::Constant(1, 3.0).eval(); };
  auto [zp, ld] = coupling_forward(z, 1, s_ln2, t_3);
  CHECK(zp(0) == doctest::Approx(1.0));
  CHECK(zp(1) == doctest::Approx(7.0));
  CHECK(ld == doctest::Approx(std::log(2.0)));
  Vec back = coupling_inverse(vec2(1.0, 7.0), 1, s_ln2, t_3);
  CHECK(back(0) == doctest::Approx(1.0));
  CHECK(back(1) == doctest::Approx(2.0));

  CHECK_THROWS_AS(coupling_forward(z, 0, zero, zero), DomainError);
  CHECK_THROWS_AS(coupling_forward(z, 2, zero, zero), DomainError);
}

TEST_CASE("flow stack: alternating halves") {
  FlowStack stack("flow", 8, 6);
  for (int l = 0; l < 6; ++l) {
    auto sp = stack.split(l);
    auto sp_prev = stack.split(l == 0 ? 1 : l - 1);
    // layer l transforms exactly the block kept by layer l-1
    CHECK(sp.tr_at == sp_prev.keep_at);
    CHECK(sp.tr_n == sp_prev.keep_n);
    CHECK(sp.keep_n + sp.tr_n == 8);
  }
  // odd dimension: d = floor(D/2)
  FlowStack odd("flow", 3, 2);
  CHECK(odd.split(0).keep_n == 1);
  CHECK(odd.split(0).tr_n == 2);
  CHECK(odd.split(1).keep_n == 2);
  CHECK(odd.split(1).tr_n == 1);
}

TEST_CASE("flow stack: round-trip inverse recovers z (D=8, 6 layers, 1e4 draws)") {
  diff::ParameterStore store;
  FlowStack stack("flow", 8, 6);
  Rng rng = make_rng(8);
  stack.init(store, rng);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    // base-distribution draws, the flow's actual input domain
    Vec z(8);
    for (int j = 0; j < 8; ++j) z(j) = normal(rng);
    Vec round = stack.inverse(store, stack.forward(store, z, nullptr), nullptr);
    worst = std::max(worst, (round - z).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("flow stack: log-det entries count and batch/vector agreement") {
  diff::ParameterStore store;
  FlowStack stack("flow", 4, 5);
  Rng rng = make_rng(81);
  stack.init(store, rng);
  Vec z(4);
  for (int j = 0; j < 4; ++j) z(j) = normal(rng);
  std::vector<double> dets;
  Vec out = stack.forward(store, z, &dets);
  CHECK(dets.size() == 5);  // one entry per layer
  Mat z_batch = z.transpose();
  Mat total;
  Mat out_batch = stack.forward_batch(store, z_batch, &total);
  CHECK((out_batch.row(0).transpose() - out).cwiseAbs().maxCoeff() < 1e-14);
  double sum = 0.0;
  for (double d : dets) sum += d;
  CHECK(total(0, 0) == doctest::Approx(sum).epsilon(1e-14));
}

TEST_CASE("coupling log-det matches a dense finite-difference Jacobian (D<=6)") {
  for (int dim : {2, 4, 6}) {
    diff::ParameterStore store;
    FlowStack stack("flow", dim, 3);
    Rng rng = make_rng(100 + dim);
    stack.init(store, rng);
    Vec z(dim);
    for (int j = 0; j < dim; ++j) z(j) = normal(rng);
    std::vector<double> dets;
    stack.forward(store, z, &dets);
    double analytic = 0.0;
    for (double d : dets) analytic += d;

    const double h = 1e-6;
    Mat jac(dim, dim);
    for (int c = 0; c < dim; ++c) {
      Vec up = z, dn = z;
      up(c) += h;
      dn(c) -= h;
      jac.col(c) = (stack.forward(store, up, nullptr) - stack.forward(store, dn, nullptr)) /
                   (2.0 * h);
    }
    double numeric = std::log(std::abs(jac.fullPivLu().determinant()));
    CHECK(analytic == doctest::Approx(numeric).epsilon(1e-6));
  }
}

TEST_CASE("flow_log_density: empty and single layer") {
  CHECK(flow_log_density(-1.3, {}) == doctest::Approx(-1.3));
  CHECK(flow_log_density(-1.3, {std::log(2.0)}) ==
        doctest::Approx(-1.3 - std::log(2.0)));
}

TEST_CASE("flow density integrates to 1 (grid quadrature)") {
  diff::ParameterStore store;
  FlowStack stack("flow", 2, 2);
  Rng rng = make_rng(12);
  stack.init(store, rng);
  // shrink the random nets so the pushforward stays in the integration window
  for (auto& [name, group] : store.groups()) group.value *= 0.5;

  auto base = [](const Vec& z) {
    return -0.5 * z.squaredNorm() - static_cast<double>(z.size()) * 0.9189385332046727;
  };
  const double lo = -12.0, hi = 12.0, step = 0.03;
  double mass = 0.0, boundary = 0.0;
  for (double y1 = lo; y1 < hi; y1 += step)
    for (double y2 = lo; y2 < hi; y2 += step) {
      double p =
          std::exp(stack.log_density_at(store, vec2(y1 + step / 2, y2 + step / 2), base));
      mass += p * step * step;
      if (y1 + step >= hi || y2 + step >= hi || y1 <= lo + step || y2 <= lo + step)
        boundary = std::max(boundary, p);
    }
  CHECK(boundary < 1e-8);  // the window captured the support
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));

  // 1-D check: density of the transformed coordinate for a fixed first coordinate
  diff::ParameterStore store1;
  FlowStack one("flow", 2, 1);
  Rng rng1 = make_rng(13);
  one.init(store1, rng1);
  for (auto& [name, group] : store1.groups()) group.value *= 0.5;
  const double z1 = 0.4;
  double mass1 = 0.0;
  for (double y2 = lo; y2 < hi; y2 += step) {
    Vec y = vec2(z1, y2 + step / 2);
    std::vector<double> dets;
    Vec z0 = one.inverse(store1, y, &dets);
    double logp = -0.5 * z0(1) * z0(1) - 0.9189385332046727;
    for (double d : dets) logp -= d;
    mass1 += std::exp(logp) * step;
  }
  CHECK(mass1 == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("latent spec validation and widths") {
  LatentSpec s;
  s.family = LatentSpec::Family::kDiscrete;
  s.n = 3;
  s.k = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.k = 3;
  CHECK_NOTHROW(s.validate());
  CHECK(s.param_width() == 9);
  CHECK(s.z_width() == 9);
  LatentSpec f;
  f.family = LatentSpec::Family::kGaussianFlow;
  f.n = 1;
  f.n_flow = 5;
  CHECK_THROWS_AS(f.validate(), ConfigError);
  f.n = 8;
  CHECK_NOTHROW(f.validate());
  CHECK(f.param_width() == 16);
  CHECK(f.z_width() == 8);
}
