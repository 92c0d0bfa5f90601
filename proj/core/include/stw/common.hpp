#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>

namespace stw {

// Malformed configuration, preset, or CLI input. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An argument outside an operation's stated domain (sigma <= 0, u outside
// (0,1), coordinate off-grid, ...). Also exit code 2 at the CLI boundary.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss, gradient, or density came out non-finite. Carries the name of the
// offending term. CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string term, const std::string& what)
      : std::runtime_error("numerical failure in '" + term + "': " + what),
        term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic per-stream engine derivation so that parallel workers never
// share a stream.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::uint64_t s = seed ^ (0x8f1bbcdcbfa53e0bULL * (stream + 1));
  std::uint64_t a = splitmix64(s);
  std::uint64_t b = splitmix64(s);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return Rng(seq);
}

// Uniform on the open interval (0,1); safe input for -log(-log(u)).
inline double uniform_open(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  double u = dist(rng);
  while (u <= 0.0 || u >= 1.0) u = dist(rng);
  return u;
}

inline double normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace stw
