#pragma once

// Exact discrete and diagonal-Gaussian divergences: categorical KL, Hellinger
// distance, Gaussian KL, and empirical-distribution construction.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "stw/common.hpp"
#include "stw/diff.hpp"

namespace stw::metrics {

// Exact finite discrete distribution: sorted unique keys with probabilities
// summing to 1.
template <typename Key>
class DistTable {
 public:
  DistTable() = default;
  DistTable(std::vector<Key> keys, std::vector<double> probs) {
    if (keys.size() != probs.size())
      throw DomainError("dist table: key/prob length mismatch");
    std::map<Key, double> acc;
    for (std::size_t i = 0; i < keys.size(); ++i) acc[keys[i]] += probs[i];
    for (auto& [k, p] : acc) {
      keys_.push_back(k);
      probs_.push_back(p);
    }
    validate();
  }

  static DistTable from_map(const std::map<Key, double>& m) {
    DistTable t;
    for (const auto& [k, p] : m) {
      t.keys_.push_back(k);
      t.probs_.push_back(p);
    }
    t.validate();
    return t;
  }

  const std::vector<Key>& support() const { return keys_; }
  const std::vector<double>& probs() const { return probs_; }
  std::size_t size() const { return keys_.size(); }

  double prob(const Key& k) const {
    auto it = std::lower_bound(keys_.begin(), keys_.end(), k);
    if (it == keys_.end() || *it < k || k < *it) return 0.0;
    return probs_[static_cast<std::size_t>(it - keys_.begin())];
  }

  void validate() const {
    double total = 0.0;
    for (double p : probs_) {
      if (p < 0.0) throw DomainError("dist table: negative probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw DomainError("dist table: probabilities must sum to 1");
  }

 private:
  std::vector<Key> keys_;
  std::vector<double> probs_;
};

// KL(p || q) in nats, 0 ln 0 = 0. Returns +inf (a marker, not an exception)
// when p puts mass where q has none.
template <typename Key>
double kl_categorical(const DistTable<Key>& p, const DistTable<Key>& q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = p.probs()[i];
    if (pi <= 0.0) continue;
    double qi = q.prob(p.support()[i]);
    if (qi <= 0.0) return std::numeric_limits<double>::infinity();
    acc += pi * std::log(pi / qi);
  }
  return acc;
}

// H(p, q) = sqrt(1 - sum_i sqrt(p_i q_i)) over the union of supports.
template <typename Key>
double hellinger(const DistTable<Key>& p, const DistTable<Key>& q) {
  double bc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    bc += std::sqrt(p.probs()[i] * q.prob(p.support()[i]));
  double inside = 1.0 - bc;
  if (inside < 0.0) inside = 0.0;  // round-off when p == q
  return std::sqrt(inside);
}

template <typename Key>
DistTable<Key> empirical_dist(const std::vector<Key>& samples) {
  if (samples.empty()) throw DomainError("empirical_dist: empty sample list");
  std::map<Key, double> counts;
  for (const Key& k : samples) counts[k] += 1.0;
  double n = static_cast<double>(samples.size());
  for (auto& [k, c] : counts) c /= n;
  return DistTable<Key>::from_map(counts);
}

// Sum over dimensions of KL(N(mu1,sigma1^2) || N(mu2,sigma2^2)).
double kl_gaussian_diag(const diff::Vec& mu1, const diff::Vec& sigma1,
                        const diff::Vec& mu2, const diff::Vec& sigma2);

}  // namespace stw::metrics
