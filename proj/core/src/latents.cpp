#include "stw/latents.hpp"

#include <cmath>

namespace stw::latents {

void LatentSpec::validate() const {
  if (n < 1) throw ConfigError("latent spec: n must be >= 1");
  switch (family) {
    case Family::kGaussian:
      break;
    case Family::kGaussianFlow:
      if (n_flow < 1) throw ConfigError("latent spec: flow family needs n_flow >= 1");
      if (n < 2) throw ConfigError("latent spec: flow family needs n >= 2");
      break;
    case Family::kDiscrete:
      if (k < 2) throw ConfigError("latent spec: discrete family needs k >= 2");
      break;
  }
}

Vec gaussian_reparam(const Vec& mu, const Vec& sigma, const Vec& eps) {
  if (mu.size() != sigma.size() || mu.size() != eps.size())
    throw DomainError("gaussian_reparam: length mismatch");
  if ((sigma.array() <= 0.0).any())
    throw DomainError("gaussian_reparam: sigma must be positive");
  return mu.array() + sigma.array() * eps.array();
}

double gumbel_sample(double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("gumbel_sample: u must be in (0,1)");
  return -std::log(-std::log(u));
}

Vec gumbel_vector(int k, Rng& rng) {
  Vec g(k);
  for (int i = 0; i < k; ++i) g(i) = gumbel_sample(uniform_open(rng));
  return g;
}

int gumbel_max_index(const Vec& log_w, const Vec& g) {
  if (log_w.size() != g.size()) throw DomainError("gumbel_max: length mismatch");
  int best = 0;
  double best_v = log_w(0) + g(0);
  for (int j = 1; j < log_w.size(); ++j) {
    double v = log_w(j) + g(j);
    if (v > best_v) {  // strict: ties go to the lowest index
      best_v = v;
      best = j;
    }
  }
  return best;
}

Vec gumbel_max(const Vec& log_w, const Vec& g) {
  Vec out = Vec::Zero(log_w.size());
  out(gumbel_max_index(log_w, g)) = 1.0;
  return out;
}

Vec gumbel_softmax(const Vec& log_w, const Vec& g, double tau) {
  if (tau <= 0.0) throw DomainError("gumbel_softmax: tau must be positive");
  if (log_w.size() != g.size()) throw DomainError("gumbel_softmax: length mismatch");
  Vec a = (log_w + g) / tau;
  double m = a.maxCoeff();
  Vec e = (a.array() - m).exp();
  return e / e.sum();
}

std::pair<Vec, double> coupling_forward(const Vec& z, int d, const VecFn& s,
                                        const VecFn& t) {
  const int D = static_cast<int>(z.size());
  if (d < 1 || d >= D) throw DomainError("coupling_forward: split must satisfy 1 <= d < D");
  Vec head = z.head(d);
  Vec s_out = s(head);
  Vec t_out = t(head);
  Vec out(D);
  out.head(d) = head;
  out.tail(D - d) = t_out.array() + z.tail(D - d).array() * s_out.array().exp();
  return {out, s_out.sum()};
}

Vec coupling_inverse(const Vec& z_prime, int d, const VecFn& s, const VecFn& t) {
  const int D = static_cast<int>(z_prime.size());
  if (d < 1 || d >= D) throw DomainError("coupling_inverse: split must satisfy 1 <= d < D");
  Vec head = z_prime.head(d);
  Vec s_out = s(head);
  Vec t_out = t(head);
  Vec out(D);
  out.head(d) = head;
  out.tail(D - d) =
      (z_prime.tail(D - d).array() - t_out.array()) * (-s_out.array()).exp();
  return out;
}

double flow_log_density(double log_q0, const std::vector<double>& log_dets) {
  double acc = log_q0;
  for (double ld : log_dets) acc -= ld;
  return acc;
}

// ---- FlowStack ----------------------------------------------------------------

FlowStack::FlowStack(std::string prefix, int dim, int layers)
    : prefix_(std::move(prefix)), dim_(dim), layers_(layers) {
  if (dim_ < 2) throw ConfigError("flow stack needs dim >= 2");
  if (layers_ < 0) throw ConfigError("flow stack: negative layer count");
}

FlowStack::Split FlowStack::split(int layer) const {
  int d = dim_ / 2;
  if (layer % 2 == 0) return Split{0, d, d, dim_ - d};
  return Split{d, dim_ - d, 0, d};
}

diff::MlpSpec FlowStack::s_spec(int layer) const {
  Split sp = split(layer);
  return diff::MlpSpec{sp.keep_n, {kHidden, kHidden}, sp.tr_n, diff::Head::kLinear};
}

diff::MlpSpec FlowStack::t_spec(int layer) const { return s_spec(layer); }

std::string FlowStack::s_prefix(int layer) const {
  return prefix_ + "/l" + std::to_string(layer) + "/s";
}
std::string FlowStack::t_prefix(int layer) const {
  return prefix_ + "/l" + std::to_string(layer) + "/t";
}

void FlowStack::init(diff::ParameterStore& store, Rng& rng) const {
  for (int l = 0; l < layers_; ++l) {
    diff::init_mlp(store, s_prefix(l), s_spec(l), rng);
    diff::init_mlp(store, t_prefix(l), t_spec(l), rng);
  }
}

namespace {

double soft_clamp(double raw) {
  return FlowStack::kScaleCap * std::tanh(raw / FlowStack::kScaleCap);
}

}  // namespace

Vec FlowStack::forward(const diff::ParameterStore& store, const Vec& z0,
                       std::vector<double>* log_dets) const {
  Vec z = z0;
  for (int l = 0; l < layers_; ++l) {
    Split sp = split(l);
    Vec keep = z.segment(sp.keep_at, sp.keep_n);
    Mat in = keep.transpose();
    Vec s_raw = diff::mlp_forward(s_spec(l), store, s_prefix(l), in).row(0).transpose();
    Vec t_out = diff::mlp_forward(t_spec(l), store, t_prefix(l), in).row(0).transpose();
    Vec s_out = s_raw.unaryExpr([](double v) { return soft_clamp(v); });
    Vec next = z;
    next.segment(sp.tr_at, sp.tr_n) =
        t_out.array() + z.segment(sp.tr_at, sp.tr_n).array() * s_out.array().exp();
    if (log_dets) log_dets->push_back(s_out.sum());
    z = next;
  }
  return z;
}

Vec FlowStack::inverse(const diff::ParameterStore& store, const Vec& zL,
                       std::vector<double>* log_dets) const {
  Vec z = zL;
  std::vector<double> dets(layers_, 0.0);
  for (int l = layers_ - 1; l >= 0; --l) {
    Split sp = split(l);
    Vec keep = z.segment(sp.keep_at, sp.keep_n);
    Mat in = keep.transpose();
    Vec s_raw = diff::mlp_forward(s_spec(l), store, s_prefix(l), in).row(0).transpose();
    Vec t_out = diff::mlp_forward(t_spec(l), store, t_prefix(l), in).row(0).transpose();
    Vec s_out = s_raw.unaryExpr([](double v) { return soft_clamp(v); });
    Vec prev = z;
    prev.segment(sp.tr_at, sp.tr_n) =
        (z.segment(sp.tr_at, sp.tr_n).array() - t_out.array()) *
        (-s_out.array()).exp();
    dets[l] = s_out.sum();
    z = prev;
  }
  if (log_dets) log_dets->insert(log_dets->end(), dets.begin(), dets.end());
  return z;
}

Mat FlowStack::forward_batch(const diff::ParameterStore& store, const Mat& z0,
                             Mat* total_log_det) const {
  Mat z = z0;
  Mat dets = Mat::Zero(z.rows(), 1);
  for (int l = 0; l < layers_; ++l) {
    Split sp = split(l);
    Mat keep = z.middleCols(sp.keep_at, sp.keep_n);
    Mat s_raw = diff::mlp_forward(s_spec(l), store, s_prefix(l), keep);
    Mat t_out = diff::mlp_forward(t_spec(l), store, t_prefix(l), keep);
    Mat s_out = s_raw.unaryExpr([](double v) { return soft_clamp(v); });
    z.middleCols(sp.tr_at, sp.tr_n) =
        t_out.array() + z.middleCols(sp.tr_at, sp.tr_n).array() * s_out.array().exp();
    dets += s_out.rowwise().sum();
  }
  if (total_log_det) *total_log_det = dets;
  return z;
}

double FlowStack::log_density_at(
    const diff::ParameterStore& store, const Vec& y,
    const std::function<double(const Vec&)>& base_log_density) const {
  std::vector<double> dets;
  Vec z0 = inverse(store, y, &dets);
  return flow_log_density(base_log_density(z0), dets);
}

diff::Var FlowStack::forward(diff::Graph& g, diff::Var z0,
                             std::vector<diff::Var>* log_dets) const {
  diff::Var z = z0;
  for (int l = 0; l < layers_; ++l) {
    Split sp = split(l);
    diff::Var keep = diff::slice_cols(z, sp.keep_at, sp.keep_n);
    diff::Var tr = diff::slice_cols(z, sp.tr_at, sp.tr_n);
    diff::Var s_raw = diff::mlp_forward(s_spec(l), g, s_prefix(l), keep);
    diff::Var t_out = diff::mlp_forward(t_spec(l), g, t_prefix(l), keep);
    diff::Var s_out = diff::scale(diff::tanh_v(diff::scale(s_raw, 1.0 / kScaleCap)), kScaleCap);
    diff::Var moved = diff::add(t_out, diff::mul(tr, diff::exp_v(s_out)));
    z = (sp.tr_at == 0) ? diff::hcat({moved, keep}) : diff::hcat({keep, moved});
    if (log_dets) log_dets->push_back(diff::sum_rows(s_out));
  }
  return z;
}

}  // namespace stw::latents
