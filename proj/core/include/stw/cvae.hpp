#pragma once

// Conditional VAE: learned conditional prior p(z|x), inference network
// q(z|x,y), decoder p(y|z,x); ELBO / VR-bound / free-bits objectives;
// prediction sampling and importance-sampled test NLL.

#include <cstdint>
#include <string>
#include <vector>

#include "stw/diff.hpp"
#include "stw/envs.hpp"
#include "stw/latents.hpp"

namespace stw::cvae {

using diff::Mat;
using diff::Var;
using diff::Vec;

// ---- outcome families and input encodings -----------------------------------

enum class DecoderFamily { kGaussian1d, kFactoredCategorical };

struct DecoderSpec {
  DecoderFamily family = DecoderFamily::kGaussian1d;
  int dims = 6;     // categorical outcome dimensions
  int classes = 7;  // classes per dimension

  int y_width() const {
    return family == DecoderFamily::kGaussian1d ? 1 : dims * classes;
  }
  int out_width() const {
    return family == DecoderFamily::kGaussian1d ? 2 : dims * classes;
  }
  diff::Head head() const {
    return family == DecoderFamily::kGaussian1d ? diff::Head::kMeanAndLogStd
                                                : diff::Head::kSoftmaxLogits;
  }
};

enum class InputEncoding { kToyScalar, kGridOneHot };

inline constexpr int kGridClasses = 7;
inline constexpr int kGridStateWidth = 6 * kGridClasses;  // 42

int encoding_x_width(InputEncoding kind);

Vec encode_toy_x(double x);
// 6 coordinates, each one-hot over 7 classes.
Vec encode_grid_state(const envs::GridState& s);
// State encoding with the action appended as a one-hot over 4.
Vec encode_grid_x(const envs::GridState& s, envs::Action a);

// ---- model ---------------------------------------------------------------------

struct ModelConfig {
  latents::LatentSpec latent;
  DecoderSpec decoder;
  InputEncoding encoding = InputEncoding::kToyScalar;
  std::vector<int> prior_hidden;
  std::vector<int> inference_hidden;
  std::vector<int> decoder_hidden;
  void validate() const;
};

// Guard range for latent log-sigmas emitted by the prior/inference nets.
inline constexpr double kLatentLogSigMin = -7.0;
inline constexpr double kLatentLogSigMax = 3.0;

class TransitionModel {
 public:
  static TransitionModel make(const ModelConfig& config, std::uint64_t seed);
  static TransitionModel from_parts(const ModelConfig& config,
                                    diff::ParameterStore params);

  const ModelConfig& config() const { return config_; }
  diff::ParameterStore& params() { return params_; }
  const diff::ParameterStore& params() const { return params_; }
  const latents::FlowStack& flow() const { return flow_; }

  diff::MlpSpec prior_spec() const;
  diff::MlpSpec inference_spec() const;
  diff::MlpSpec decoder_spec() const;

  int x_width() const { return encoding_x_width(config_.encoding); }
  int y_width() const { return config_.decoder.y_width(); }

  // JSON sidecar describing everything needed to rebuild the model around a
  // parameter checkpoint.
  std::string sidecar_json() const;
  static TransitionModel from_sidecar(const std::string& sidecar,
                                      diff::ParameterStore params);

 private:
  TransitionModel(ModelConfig config, diff::ParameterStore params);
  ModelConfig config_;
  latents::FlowStack flow_;
  diff::ParameterStore params_;
};

// ---- datasets -------------------------------------------------------------------

struct Dataset {
  Mat x;      // [N x x_width] encoded inputs
  Mat y_enc;  // [N x y_width] encoded outcomes (inference input / one-hot mask)
  Mat y_obs;  // gaussian: [N x 1] raw values; categorical: [N x dims] class ids
  std::vector<std::uint64_t> hash;  // per-row content hash
  int size() const { return static_cast<int>(x.rows()); }
};

Dataset make_toy_dataset(const std::vector<double>& xs, const std::vector<double>& ys);
Dataset make_grid_dataset(const std::vector<envs::Transition>& transitions);
// General factored-categorical outcomes over already-encoded inputs.
Dataset make_categorical_dataset(const Mat& x_encoded, const Eigen::MatrixXi& y_classes,
                                 const DecoderSpec& dec);
Dataset slice(const Dataset& d, const std::vector<int>& rows);

// ---- objectives -------------------------------------------------------------------

struct ObjectiveConfig {
  int k = 3;            // importance samples in the training objective
  double alpha = 0.5;   // Renyi order
  double lambda = 0.07; // free-bits floor per latent dimension
  void validate() const;
};

// Fixed noise draws for one batch: eps for continuous families, standard
// Gumbel draws for discrete (both per importance sample).
struct LatentNoise {
  std::vector<Mat> eps;
  std::vector<Mat> gumbel;
  int samples() const {
    return static_cast<int>(eps.empty() ? gumbel.size() : eps.size());
  }
};
LatentNoise draw_latent_noise(const latents::LatentSpec& spec, int batch, int m,
                              Rng& rng);

// Tape objectives. All treat the Graph's parameter store as the source of
// parameters; `model` contributes only architecture. Discrete latents take the
// relaxed (Gumbel-Softmax) path at temperature tau.
Var build_elbo(diff::Graph& g, const TransitionModel& model, const Dataset& batch,
               const LatentNoise& noise, double tau);
// Appendix-style importance-weighted bound; continuous families only.
Var build_vr_bound(diff::Graph& g, const TransitionModel& model, const Dataset& batch,
                   const LatentNoise& noise, double alpha);

struct TrainParts {
  double recon = 0.0;  // batch-mean VR reconstruction term
  double div = 0.0;    // summed free-bits divergence penalty
};
// Training loss (to minimize): -(VR reconstruction - free-bits divergence).
Var build_train_loss(diff::Graph& g, const TransitionModel& model, const Dataset& batch,
                     const LatentNoise& noise, const ObjectiveConfig& obj, double tau,
                     TrainParts* parts = nullptr);

// reconstruction - sum_j max(lambda, div_j); negative divergences are clamped
// to zero before the floor.
double free_bits_objective(double recon, const Vec& per_dim_divs, double lambda);

// ---- plain evaluation ---------------------------------------------------------------

// Single-draw ELBO with analytic divergence where available (Monte-Carlo for
// flow); discrete latents use hard samples.
double eval_elbo(const TransitionModel& model, const Dataset& data, Rng& rng);
// Importance-weighted bound estimate; hard samples for discrete latents.
double eval_vr_bound(const TransitionModel& model, const Dataset& data, int m,
                     double alpha, Rng& rng);
// Same estimator with injected noise (one eps/gumbel matrix per sample).
double eval_vr_bound(const TransitionModel& model, const Dataset& data,
                     const LatentNoise& noise, double alpha);
// Importance-sampled negative test log-likelihood (Appendix-B estimator).
// Noise is derived from per-datapoint content hashes, so the result is
// invariant under dataset permutation.
double test_nll(const TransitionModel& model, const Dataset& data, int m,
                std::uint64_t seed);
// n i.i.d. predictive draws: z ~ p(z|x) (hard Gumbel-Max for discrete), then
// y ~ p(y|z,x). Returns [n x 1] values (gaussian) or [n x dims] class ids.
Mat sample_prediction(const TransitionModel& model, const Vec& x_encoded, int n,
                      Rng& rng);

}  // namespace stw::cvae
