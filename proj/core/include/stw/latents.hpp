#pragma once

// Reparametrized latent families: Gaussian location-scale, Gumbel-Max /
// Gumbel-Softmax discrete variables, and affine coupling flows with
// triangular Jacobians and exact inverses.

#include <functional>
#include <utility>
#include <vector>

#include "stw/diff.hpp"

namespace stw::latents {

using diff::Mat;
using diff::Vec;

struct LatentSpec {
  enum class Family { kGaussian, kGaussianFlow, kDiscrete };
  Family family = Family::kGaussian;
  int n = 1;       // number of independent latent variables
  int k = 0;       // categories per discrete variable
  int n_flow = 0;  // coupling layers
  diff::Schedule temperature;  // Gumbel-Softmax anneal (discrete only)

  void validate() const;
  bool discrete() const { return family == Family::kDiscrete; }
  bool flow() const { return family == Family::kGaussianFlow; }
  // width of the parameter block a prior/inference net must emit
  int param_width() const { return discrete() ? n * k : 2 * n; }
  // width of a latent sample as seen by the decoder
  int z_width() const { return discrete() ? n * k : n; }
};

// ---- elementary reparametrizations -----------------------------------------

// z = mu + sigma .* eps. Throws DomainError unless sigma > 0 elementwise.
Vec gaussian_reparam(const Vec& mu, const Vec& sigma, const Vec& eps);

// g = -log(-log u) for u in (0,1).
double gumbel_sample(double u);
Vec gumbel_vector(int k, Rng& rng);

// One-hot at argmax_j (g_j + log_w_j); ties break to the lowest index.
int gumbel_max_index(const Vec& log_w, const Vec& g);
Vec gumbel_max(const Vec& log_w, const Vec& g);

// Relaxed sample: softmax((log_w + g) / tau). Throws DomainError for tau <= 0.
Vec gumbel_softmax(const Vec& log_w, const Vec& g, double tau);

// ---- coupling transforms -----------------------------------------------------

using VecFn = std::function<Vec(const Vec&)>;

// z'_{1..d} = z_{1..d}; z'_{d+1..D} = t(z_{1..d}) + z_{d+1..D} .* exp(s(z_{1..d})).
// Returns (z', log-det) with log-det = sum of s outputs.
std::pair<Vec, double> coupling_forward(const Vec& z, int d, const VecFn& s,
                                        const VecFn& t);
Vec coupling_inverse(const Vec& z_prime, int d, const VecFn& s, const VecFn& t);

// log q^L(z^L) = log q0(z0) - sum of per-layer log-dets.
double flow_log_density(double log_q0, const std::vector<double>& log_dets);

// A stack of coupling layers over a D-dimensional latent. Layers alternate
// which half is transformed; s-net outputs are soft-clamped to [-5, 5] with a
// tanh. Parameters live in a ParameterStore under "<prefix>/l<i>/{s,t}".
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(std::string prefix, int dim, int layers);

  void init(diff::ParameterStore& store, Rng& rng) const;

  int dim() const { return dim_; }
  int layers() const { return layers_; }
  bool empty() const { return layers_ == 0; }

  // Plain evaluation on a single sample; log_dets (if non-null) receives one
  // entry per layer.
  Vec forward(const diff::ParameterStore& store, const Vec& z0,
              std::vector<double>* log_dets) const;
  Vec inverse(const diff::ParameterStore& store, const Vec& zL,
              std::vector<double>* log_dets) const;

  // Batched plain forward; rows are samples. total_log_det (if non-null)
  // receives the [N x 1] per-row sum of layer log-dets.
  Mat forward_batch(const diff::ParameterStore& store, const Mat& z0,
                    Mat* total_log_det) const;

  // Density of the stack's output when the base sample z0 has log-density
  // log_q0; evaluated at an arbitrary point y via the exact inverse.
  double log_density_at(const diff::ParameterStore& store, const Vec& y,
                        const std::function<double(const Vec&)>& base_log_density) const;

  // Batched tape version used by training objectives; rows are samples.
  // Appends one [B x 1] log-det node per layer to log_dets.
  diff::Var forward(diff::Graph& g, diff::Var z0, std::vector<diff::Var>* log_dets) const;

  // Layer geometry: (input offset, input width, output offset, output width)
  // of the transformed block for layer l.
  struct Split {
    int keep_at, keep_n, tr_at, tr_n;
  };
  Split split(int layer) const;
  diff::MlpSpec s_spec(int layer) const;
  diff::MlpSpec t_spec(int layer) const;
  std::string s_prefix(int layer) const;
  std::string t_prefix(int layer) const;

  static constexpr int kHidden = 32;     // s/t nets: 2 hidden layers of 32
  static constexpr double kScaleCap = 5.0;  // s soft-clamped to [-5, 5]

 private:
  std::string prefix_;
  int dim_ = 0;
  int layers_ = 0;
};

}  // namespace stw::latents
