#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "stw/metrics.hpp"

using namespace stw;
using namespace stw::metrics;
using diff::Vec;

namespace {

DistTable<int> table(std::vector<double> probs) {
  std::vector<int> keys;
  for (std::size_t i = 0; i < probs.size(); ++i) keys.push_back(static_cast<int>(i));
  return DistTable<int>(keys, probs);
}

std::vector<double> random_simplex(int k, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(k));
  double total = 0.0;
  for (double& x : v) {
    x = -std::log(uniform_open(rng));
    total += x;
  }
  for (double& x : v) x /= total;
  return v;
}

// 1-D quadrature oracle for the Gaussian KL
double kl_gauss_quadrature(double mu1, double s1, double mu2, double s2) {
  auto logpdf = [](double x, double mu, double s) {
    double z = (x - mu) / s;
    return -std::log(s) - 0.5 * z * z - 0.5 * std::log(2.0 * M_PI);
  };
  double lo = mu1 - 12.0 * s1, hi = mu1 + 12.0 * s1, step = (hi - lo) / 400000.0;
  double acc = 0.0;
  for (double x = lo; x < hi; x += step) {
    double m = x + step / 2;
    double p = std::exp(logpdf(m, mu1, s1));
    acc += p * (logpdf(m, mu1, s1) - logpdf(m, mu2, s2)) * step;
  }
  return acc;
}

}  // namespace

TEST_CASE("kl_categorical: identity, paper illustration, closed form") {
  auto p = table({0.4, 0.6});
  CHECK(kl_categorical(p, p) == doctest::Approx(0.0));

  // the bimodal illustration: q one-hot-ish against a (0.3, 0.7) prior
  auto q_sharp = table({0.999, 0.001});
  auto prior = table({0.3, 0.7});
  double kl = kl_categorical(q_sharp, prior);
  double expected = 0.999 * std::log(0.999 / 0.3) + 0.001 * std::log(0.001 / 0.7);
  CHECK(kl == doctest::Approx(expected).epsilon(1e-12));
  CHECK(std::abs(kl - 1.20) < 0.005);

  auto a = table({0.5, 0.5});
  auto b = table({0.25, 0.75});
  CHECK(kl_categorical(a, b) ==
        doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)));
}

TEST_CASE("kl_categorical: +inf marker and 0 ln 0 = 0") {
  auto p = DistTable<int>({0, 1}, {0.5, 0.5});
  auto q = DistTable<int>({0}, {1.0});
  CHECK(std::isinf(kl_categorical(p, q)));
  // p has a zero-mass point where q > 0: no contribution
  auto p0 = DistTable<int>({0, 1}, {1.0, 0.0});
  auto q2 = DistTable<int>({0, 1}, {0.5, 0.5});
  CHECK(kl_categorical(p0, q2) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("kl_categorical: non-negative, zero iff equal (random simplex pairs)") {
  Rng rng = make_rng(70);
  for (int trial = 0; trial < 300; ++trial) {
    auto p = table(random_simplex(5, rng));
    auto q = table(random_simplex(5, rng));
    double kl = kl_categorical(p, q);
    CHECK(kl >= 0.0);
    CHECK(kl > 1e-12);  // random pairs almost surely differ
    CHECK(kl_categorical(p, p) == doctest::Approx(0.0));
  }
}

TEST_CASE("kl_gaussian_diag: closed forms and domain errors") {
  Vec z = Vec::Zero(1), one = Vec::Ones(1);
  CHECK(kl_gaussian_diag(z, one, z, one) == doctest::Approx(0.0));
  CHECK(kl_gaussian_diag(z, one, one, one) == doctest::Approx(0.5));
  Vec two = Vec::Constant(1, 2.0);
  CHECK(kl_gaussian_diag(z, two, z, one) ==
        doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))));
  CHECK_THROWS_AS(kl_gaussian_diag(z, Vec::Zero(1), z, one), DomainError);
  CHECK_THROWS_AS(kl_gaussian_diag(z, one, z, Vec::Constant(1, -1.0)), DomainError);
  // multi-dimensional: sums over dimensions
  Vec mu1(2), s1(2), mu2(2), s2(2);
  mu1 << 0, 0;
  s1 << 1, 2;
  mu2 << 1, 0;
  s2 << 1, 1;
  CHECK(kl_gaussian_diag(mu1, s1, mu2, s2) ==
        doctest::Approx(0.5 + 0.5 * (4.0 - 1.0 - std::log(4.0))));
}

TEST_CASE("kl_gaussian_diag matches 1-D quadrature within 1e-6") {
  struct Case {
    double mu1, s1, mu2, s2;
  };
  for (const Case& c : {Case{0.0, 1.0, 1.0, 1.0}, Case{0.3, 0.5, -0.2, 1.7},
                        Case{-1.0, 2.0, 0.5, 0.8}}) {
    double analytic = kl_gaussian_diag(Vec::Constant(1, c.mu1), Vec::Constant(1, c.s1),
                                       Vec::Constant(1, c.mu2), Vec::Constant(1, c.s2));
    CHECK(analytic == doctest::Approx(kl_gauss_quadrature(c.mu1, c.s1, c.mu2, c.s2))
                          .epsilon(1e-6));
  }
}

TEST_CASE("hellinger: identity, disjoint supports, direct evaluation") {
  auto p = table({0.5, 0.5});
  CHECK(hellinger(p, p) == doctest::Approx(0.0));
  auto a = DistTable<int>({0, 1}, {0.5, 0.5});
  auto b = DistTable<int>({2, 3}, {0.5, 0.5});
  CHECK(hellinger(a, b) == doctest::Approx(1.0));
  auto point = table({1.0, 0.0});
  auto half = table({0.5, 0.5});
  CHECK(hellinger(point, half) == doctest::Approx(std::sqrt(1.0 - std::sqrt(0.5))));
}

TEST_CASE("hellinger: symmetric and triangle inequality on random triples") {
  Rng rng = make_rng(71);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = table(random_simplex(4, rng));
    auto q = table(random_simplex(4, rng));
    auto r = table(random_simplex(4, rng));
    double pq = hellinger(p, q), qp = hellinger(q, p);
    CHECK(pq == doctest::Approx(qp).epsilon(1e-12));
    CHECK(pq <= hellinger(p, r) + hellinger(r, q) + 1e-12);
    CHECK(pq >= 0.0);
    CHECK(pq <= 1.0);
  }
}

TEST_CASE("empirical_dist: frequencies, point mass, empty input") {
  auto t = empirical_dist<std::string>({"a", "a", "b", "b"});
  CHECK(t.prob("a") == doctest::Approx(0.5));
  CHECK(t.prob("b") == doctest::Approx(0.5));
  auto point = empirical_dist<int>({7});
  CHECK(point.prob(7) == doctest::Approx(1.0));
  CHECK(point.size() == 1);
  CHECK_THROWS_AS(empirical_dist<int>({}), DomainError);
}

TEST_CASE("empirical_dist: 1e5 draws concentrate within +-0.01") {
  std::vector<double> truth{0.4, 0.4, 0.1, 0.1};
  Rng rng = make_rng(72);
  std::vector<int> samples;
  samples.reserve(100000);
  for (int i = 0; i < 100000; ++i) {
    double u = uniform_open(rng), acc = 0.0;
    int pick = 3;
    for (int c = 0; c < 4; ++c) {
      acc += truth[static_cast<std::size_t>(c)];
      if (u <= acc) {
        pick = c;
        break;
      }
    }
    samples.push_back(pick);
  }
  auto t = empirical_dist(samples);
  for (int c = 0; c < 4; ++c)
    CHECK(std::abs(t.prob(c) - truth[static_cast<std::size_t>(c)]) < 0.01);
}

TEST_CASE("DistTable validation") {
  CHECK_THROWS_AS(DistTable<int>({0, 1}, {0.5, 0.6}), DomainError);
  CHECK_THROWS_AS(DistTable<int>({0, 1}, {-0.1, 1.1}), DomainError);
  // duplicate keys merge
  auto t = DistTable<int>({1, 1, 2}, {0.25, 0.25, 0.5});
  CHECK(t.size() == 2);
  CHECK(t.prob(1) == doctest::Approx(0.5));
}
