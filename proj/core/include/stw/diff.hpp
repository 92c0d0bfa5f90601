#pragma once

// Differentiable-computation substrate: a reverse-mode tape over Eigen
// matrices (rows = batch items), fully connected ReLU networks, Adam,
// linear annealing schedules, parameter checkpoints, and finite-difference
// gradient verification.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stw/common.hpp"

namespace stw::diff {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

class Tape;

// Handle to a tape node. Cheap to copy; valid as long as its tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Mat& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
};

class Tape {
 public:
  Var leaf(const Mat& value);   // differentiable input (parameters)
  Var constant(Mat value);      // data, noise, masks

  // Runs reverse-mode accumulation from a 1x1 root. May be called once per
  // tape. Throws NumericalError if the root value is non-finite.
  void backward(Var root);

  const Mat& val(int id) const { return nodes_[id].value; }
  // Gradient of the last backward() root w.r.t. node `id` (zeros if the node
  // was never reached).
  Mat grad(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }

  // Internal: used by the op builders below.
  using Pull = std::function<void(Tape&, const Mat&)>;
  int emit(Mat value, bool requires_grad, Pull pull);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  void accumulate(int id, const Mat& g);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    Pull pull;
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ---- op builders -----------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);          // same shape
Var add_rowvec(Var a, Var b);   // b is 1 x n, broadcast over rows
Var sub(Var a, Var b);
Var mul(Var a, Var b);          // elementwise
Var neg(Var a);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var relu(Var a);
Var exp_v(Var a);
Var log_v(Var a);
Var tanh_v(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);  // zero gradient outside [lo, hi]
Var cmax(Var a, double c);               // elementwise max(a, c)
Var slice_cols(Var a, int j0, int n);
Var hcat(const std::vector<Var>& parts);
Var sum_rows(Var a);      // [B x n] -> [B x 1]
Var sum_cols(Var a);      // [B x n] -> [1 x n]
Var sum_all(Var a);       // -> [1 x 1]
Var mean_all(Var a);      // mean over every entry -> [1 x 1]
Var mean_cols(Var a);     // column means over rows -> [1 x n]
Var bcast_cols(Var v, int n);     // [B x 1] -> [B x n]
Var logsumexp_rows(Var a);        // stable, [B x n] -> [B x 1]
Var log_softmax_rows(Var a);      // composite
Var softmax_rows(Var a);          // composite

// ---- parameters ------------------------------------------------------------

using GradStore = std::map<std::string, Mat>;

// Named parameter groups with per-group Adam state. Iteration is always in
// name order, which makes serialization and Adam sweeps deterministic.
class ParameterStore {
 public:
  struct Group {
    Mat value;
    Mat m;  // Adam first moment
    Mat v;  // Adam second moment
    long long step = 0;
  };

  Mat& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  bool has(const std::string& name) const { return groups_.count(name) != 0; }
  const Mat& get(const std::string& name) const;
  Mat& get(const std::string& name);
  const std::map<std::string, Group>& groups() const { return groups_; }
  std::map<std::string, Group>& groups() { return groups_; }
  long long scalar_count() const;

  // Standard Adam with bias correction. Throws NumericalError on non-finite
  // gradients. Groups absent from `grads` are left untouched.
  void adam_step(const GradStore& grads, double lr, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);

  // Flat binary checkpoint: magic "SWVE", version u32, then per group
  // name length (u64) + UTF-8 name + rank (u64) + dims (u64 each) +
  // row-major 64-bit little-endian reals. Adam state is not serialized.
  void save(const std::filesystem::path& path) const;
  static ParameterStore load(const std::filesystem::path& path);

 private:
  std::map<std::string, Group> groups_;
};

// Binds tape leaves to named parameters so gradients can be collected per
// group after backward().
class Graph {
 public:
  explicit Graph(const ParameterStore& params) : params_(&params) {}
  Var p(const std::string& name);
  Var c(Mat value) { return tape_.constant(std::move(value)); }
  Tape& tape() { return tape_; }
  void backward(Var loss) { tape_.backward(loss); }
  GradStore grads() const;

 private:
  const ParameterStore* params_;
  Tape tape_;
  std::map<std::string, Var> bound_;
};

// ---- networks ---------------------------------------------------------------

enum class Head {
  kLinear,         // raw outputs
  kSoftmaxLogits,  // raw outputs, interpreted as categorical logits downstream
  kMeanAndLogStd,  // [mean..., log-std...]; log-std clamped to [ln 1e-3, ln 10]
};

struct MlpSpec {
  int in = 0;
  std::vector<int> hidden;
  int out = 0;
  Head head = Head::kLinear;
  void validate() const;
};

inline constexpr double kLogStdMin = -6.907755278982137;  // ln 1e-3
inline constexpr double kLogStdMax = 2.302585092994046;   // ln 10

// Glorot-uniform weights, zero biases, under names "<prefix>/W<i>", "<prefix>/b<i>".
void init_mlp(ParameterStore& store, const std::string& prefix, const MlpSpec& spec,
              Rng& rng);

Mat mlp_forward(const MlpSpec& spec, const ParameterStore& store,
                const std::string& prefix, const Mat& input);
Var mlp_forward(const MlpSpec& spec, Graph& g, const std::string& prefix, Var input);

// ---- schedules ---------------------------------------------------------------

// Piecewise-linear anneal: value(0)=start, linear until fraction*total, then
// flat at end. t past total clamps to end.
struct Schedule {
  double start = 0.0;
  double end = 0.0;
  double fraction = 1.0;
  long long total = 0;
  double value(long long t) const;
};

// ---- gradient verification ----------------------------------------------------

// A scalar objective with fixed noise: value() must be a pure function of the
// parameter store, grads() its claimed reverse-mode gradient.
struct Objective {
  std::function<double(const ParameterStore&)> value;
  std::function<GradStore(const ParameterStore&)> grads;
};

// Max over parameters of |analytic - central difference| / max(1, |analytic|).
double grad_check(const ParameterStore& params, const Objective& objective, double h);

}  // namespace stw::diff
