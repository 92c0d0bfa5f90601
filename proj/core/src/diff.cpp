#include "stw/diff.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace stw::diff {

const Mat& Var::val() const { return tape->val(id); }

int Tape::emit(Mat value, bool requires_grad, Pull pull) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(const Mat& value) {
  return Var{this, emit(value, true, nullptr)};
}

Var Tape::constant(Mat value) {
  return Var{this, emit(std::move(value), false, nullptr)};
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  return Mat::Zero(n.value.rows(), n.value.cols());
}

void Tape::backward(Var root) {
  const Mat& rv = root.val();
  if (rv.rows() != 1 || rv.cols() != 1)
    throw ConfigError("backward root must be a 1x1 scalar");
  if (!std::isfinite(rv(0, 0)))
    throw NumericalError("loss", "root of backward pass is not finite");
  if (ran_backward_) throw ConfigError("backward may run once per tape");
  ran_backward_ = true;
  accumulate(root.id, Mat::Ones(1, 1));
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.has_grad && n.pull) n.pull(*this, n.grad);
  }
}

namespace {

bool rg(Var a) { return a.tape->requires_grad(a.id); }

Var unary(Var a, Mat value, std::function<void(Tape&, const Mat&)> pull) {
  bool need = rg(a);
  return Var{a.tape, a.tape->emit(std::move(value), need, need ? std::move(pull) : Tape::Pull{})};
}

}  // namespace

Var matmul(Var a, Var b) {
  Mat value = a.val() * b.val();
  bool need = rg(a) || rg(b);
  int ia = a.id, ib = b.id;
  Tape::Pull pull;
  if (need) {
    pull = [ia, ib](Tape& t, const Mat& g) {
      if (t.requires_grad(ia)) t.accumulate(ia, g * t.val(ib).transpose());
      if (t.requires_grad(ib)) t.accumulate(ib, t.val(ia).transpose() * g);
    };
  }
  return Var{a.tape, a.tape->emit(std::move(value), need, std::move(pull))};
}

Var add(Var a, Var b) {
  Mat value = a.val() + b.val();
  bool need = rg(a) || rg(b);
  int ia = a.id, ib = b.id;
  Tape::Pull pull;
  if (need) {
    pull = [ia, ib](Tape& t, const Mat& g) {
      t.accumulate(ia, g);
      t.accumulate(ib, g);
    };
  }
  return Var{a.tape, a.tape->emit(std::move(value), need, std::move(pull))};
}

Var add_rowvec(Var a, Var b) {
  Mat value = a.val().rowwise() + Eigen::RowVectorXd(b.val().row(0));
  bool need = rg(a) || rg(b);
  int ia = a.id, ib = b.id;
  Tape::Pull pull;
  if (need) {
    pull = [ia, ib](Tape& t, const Mat& g) {
      t.accumulate(ia, g);
      t.accumulate(ib, g.colwise().sum());
    };
  }
  return Var{a.tape, a.tape->emit(std::move(value), need, std::move(pull))};
}

Var sub(Var a, Var b) {
  Mat value = a.val() - b.val();
  bool need = rg(a) || rg(b);
  int ia = a.id, ib = b.id;
  Tape::Pull pull;
  if (need) {
    pull = [ia, ib](Tape& t, const Mat& g) {
      t.accumulate(ia, g);
      t.accumulate(ib, -g);
    };
  }
  return Var{a.tape, a.tape->emit(std::move(value), need, std::move(pull))};
}

Var mul(Var a, Var b) {
  Mat value = a.val().cwiseProduct(b.val());
  bool need = rg(a) || rg(b);
  int ia = a.id, ib = b.id;
  Tape::Pull pull;
  if (need) {
    pull = [ia, ib](Tape& t, const Mat& g) {
      if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.val(ib)));
      if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.val(ia)));
    };
  }
  return Var{a.tape, a.tape->emit(std::move(value), need, std::move(pull))};
}

Var neg(Var a) {
  int ia = a.id;
  return unary(a, -a.val(), [ia](Tape& t, const Mat& g) { t.accumulate(ia, -g); });
}

Var scale(Var a, double c) {
  int ia = a.id;
  return unary(a, a.val() * c,
               [ia, c](Tape& t, const Mat& g) { t.accumulate(ia, g * c); });
}

Var add_const(Var a, double c) {
  int ia = a.id;
  return unary(a, a.val().array() + c,
               [ia](Tape& t, const Mat& g) { t.accumulate(ia, g); });
}

Var relu(Var a) {
  int ia = a.id;
  Mat value = a.val().cwiseMax(0.0);
  return unary(a, std::move(value), [ia](Tape& t, const Mat& g) {
    Mat mask = (t.val(ia).array() > 0.0).cast<double>();
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

Var exp_v(Var a) {
  int ia = a.id;
  Mat value = a.val().array().exp();
  bool need = rg(a);
  Tape* tp = a.tape;
  int self_id = static_cast<int>(tp->size());
  Tape::Pull pull;
  if (need) {
    pull = [ia, self_id](Tape& t, const Mat& g) {
      t.accumulate(ia, g.cwiseProduct(t.val(self_id)));
    };
  }
  return Var{tp, tp->emit(std::move(value), need, std::move(pull))};
}

Var log_v(Var a) {
  int ia = a.id;
  Mat value = a.val().array().log();
  return unary(a, std::move(value), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseQuotient(t.val(ia)));
  });
}

Var tanh_v(Var a) {
  int ia = a.id;
  Mat value = a.val().array().tanh();
  bool need = rg(a);
  Tape* tp = a.tape;
  int self_id = static_cast<int>(tp->size());
  Tape::Pull pull;
  if (need) {
    pull = [ia, self_id](Tape& t, const Mat& g) {
      Mat one_minus = 1.0 - t.val(self_id).array().square();
      t.accumulate(ia, g.cwiseProduct(one_minus));
    };
  }
  return Var{tp, tp->emit(std::move(value), need, std::move(pull))};
}

Var square(Var a) {
  int ia = a.id;
  return unary(a, a.val().array().square(), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, 2.0 * g.cwiseProduct(t.val(ia)));
  });
}

Var clamp(Var a, double lo, double hi) {
  int ia = a.id;
  Mat value = a.val().cwiseMax(lo).cwiseMin(hi);
  return unary(a, std::move(value), [ia, lo, hi](Tape& t, const Mat& g) {
    Mat mask = ((t.val(ia).array() >= lo) && (t.val(ia).array() <= hi)).cast<double>();
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

Var cmax(Var a, double c) {
  int ia = a.id;
  Mat value = a.val().cwiseMax(c);
  return unary(a, std::move(value), [ia, c](Tape& t, const Mat& g) {
    Mat mask = (t.val(ia).array() > c).cast<double>();
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

Var slice_cols(Var a, int j0, int n) {
  int ia = a.id;
  Mat value = a.val().middleCols(j0, n);
  return unary(a, std::move(value), [ia, j0, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(t.val(ia).rows(), t.val(ia).cols());
    full.middleCols(j0, n) = g;
    t.accumulate(ia, full);
  });
}

Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("hcat of zero parts");
  Tape* tp = parts.front().tape;
  Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool need = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ConfigError("hcat: row mismatch");
    cols += p.cols();
    need = need || rg(p);
  }
  Mat value(rows, cols);
  std::vector<int> ids;
  std::vector<int> widths;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    value.middleCols(at, p.cols()) = p.val();
    ids.push_back(p.id);
    widths.push_back(static_cast<int>(p.cols()));
    at += p.cols();
  }
  Tape::Pull pull;
  if (need) {
    pull = [ids, widths](Tape& t, const Mat& g) {
      int at = 0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        t.accumulate(ids[i], g.middleCols(at, widths[i]));
        at += widths[i];
      }
    };
  }
  return Var{tp, tp->emit(std::move(value), need, std::move(pull))};
}

Var sum_rows(Var a) {
  int ia = a.id;
  Mat value = a.val().rowwise().sum();
  return unary(a, std::move(value), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, g.replicate(1, t.val(ia).cols()));
  });
}

Var sum_cols(Var a) {
  int ia = a.id;
  Mat value = a.val().colwise().sum();
  return unary(a, std::move(value), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, g.replicate(t.val(ia).rows(), 1));
  });
}

Var sum_all(Var a) {
  int ia = a.id;
  Mat value(1, 1);
  value(0, 0) = a.val().sum();
  return unary(a, std::move(value), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat::Constant(t.val(ia).rows(), t.val(ia).cols(), g(0, 0)));
  });
}

Var mean_all(Var a) {
  int ia = a.id;
  double inv = 1.0 / static_cast<double>(a.val().size());
  Mat value(1, 1);
  value(0, 0) = a.val().sum() * inv;
  return unary(a, std::move(value), [ia, inv](Tape& t, const Mat& g) {
    t.accumulate(ia,
                 Mat::Constant(t.val(ia).rows(), t.val(ia).cols(), g(0, 0) * inv));
  });
}

Var mean_cols(Var a) {
  int ia = a.id;
  double inv = 1.0 / static_cast<double>(a.val().rows());
  Mat value = a.val().colwise().mean();
  return unary(a, std::move(value), [ia, inv](Tape& t, const Mat& g) {
    t.accumulate(ia, (g * inv).replicate(t.val(ia).rows(), 1));
  });
}

Var bcast_cols(Var v, int n) {
  int iv = v.id;
  if (v.cols() != 1) throw ConfigError("bcast_cols expects a column vector");
  Mat value = v.val().replicate(1, n);
  return unary(v, std::move(value), [iv](Tape& t, const Mat& g) {
    t.accumulate(iv, g.rowwise().sum());
  });
}

Var logsumexp_rows(Var a) {
  int ia = a.id;
  const Mat& x = a.val();
  Mat value(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    value(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  bool need = rg(a);
  Tape* tp = a.tape;
  Tape::Pull pull;
  int self_id = static_cast<int>(tp->size());  // id this node will get
  if (need) {
    pull = [ia, self_id](Tape& t, const Mat& g) {
      // d lse / d x_ij = softmax(x)_ij; recompute from the stored output.
      const Mat& x = t.val(ia);
      const Mat& out = t.val(self_id);
      Mat sm = (x.colwise() - Eigen::VectorXd(out.col(0))).array().exp();
      t.accumulate(ia, sm.array().colwise() * Eigen::ArrayXd(g.col(0)));
    };
  }
  return Var{tp, tp->emit(std::move(value), need, std::move(pull))};
}

Var log_softmax_rows(Var a) {
  Var lse = logsumexp_rows(a);
  return sub(a, bcast_cols(lse, static_cast<int>(a.cols())));
}

Var softmax_rows(Var a) { return exp_v(log_softmax_rows(a)); }

// ---- parameters ------------------------------------------------------------

Mat& ParameterStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (groups_.count(name)) throw ConfigError("duplicate parameter group: " + name);
  Group g;
  g.value = Mat::Zero(rows, cols);
  g.m = Mat::Zero(rows, cols);
  g.v = Mat::Zero(rows, cols);
  auto [it, ok] = groups_.emplace(name, std::move(g));
  (void)ok;
  return it->second.value;
}

const Mat& ParameterStore::get(const std::string& name) const {
  auto it = groups_.find(name);
  if (it == groups_.end()) throw ConfigError("unknown parameter group: " + name);
  return it->second.value;
}

Mat& ParameterStore::get(const std::string& name) {
  auto it = groups_.find(name);
  if (it == groups_.end()) throw ConfigError("unknown parameter group: " + name);
  return it->second.value;
}

long long ParameterStore::scalar_count() const {
  long long n = 0;
  for (const auto& [name, g] : groups_) n += g.value.size();
  return n;
}

void ParameterStore::adam_step(const GradStore& grads, double lr, double beta1,
                               double beta2, double eps) {
  if (lr <= 0.0) throw ConfigError("adam: lr must be positive");
  for (const auto& [name, grad] : grads) {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ConfigError("adam: unknown group " + name);
    Group& g = it->second;
    if (grad.rows() != g.value.rows() || grad.cols() != g.value.cols())
      throw ConfigError("adam: gradient shape mismatch for " + name);
    if (!grad.allFinite())
      throw NumericalError(name, "non-finite gradient in adam_step");
    g.step += 1;
    g.m = beta1 * g.m + (1.0 - beta1) * grad;
    g.v = beta2 * g.v + (1.0 - beta2) * grad.cwiseProduct(grad);
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(g.step));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(g.step));
    Mat mhat = g.m / c1;
    Mat vhat = g.v / c2;
    Mat denom = vhat.array().sqrt() + eps;
    g.value -= lr * mhat.cwiseQuotient(denom);
  }
}

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t get_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t get_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void ParameterStore::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path.string());
  out.write("SWVE", 4);
  put_u32(out, 1);
  for (const auto& [name, g] : groups_) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, 2);
    put_u64(out, static_cast<std::uint64_t>(g.value.rows()));
    put_u64(out, static_cast<std::uint64_t>(g.value.cols()));
    for (Eigen::Index r = 0; r < g.value.rows(); ++r)
      for (Eigen::Index c = 0; c < g.value.cols(); ++c) {
        double d = g.value(r, c);
        out.write(reinterpret_cast<const char*>(&d), sizeof(d));
      }
  }
  if (!out) throw ConfigError("checkpoint write failed: " + path.string());
}

ParameterStore ParameterStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (std::memcmp(magic, "SWVE", 4) != 0)
    throw ConfigError("bad checkpoint magic: " + path.string());
  std::uint32_t version = get_u32(in);
  if (version != 1) throw ConfigError("unsupported checkpoint version");
  ParameterStore store;
  while (true) {
    std::uint64_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (!in) break;  // clean EOF
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    std::uint64_t rank = get_u64(in);
    if (rank != 2) throw ConfigError("unsupported checkpoint rank");
    auto rows = static_cast<Eigen::Index>(get_u64(in));
    auto cols = static_cast<Eigen::Index>(get_u64(in));
    Mat& value = store.add(name, rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        double d = 0;
        in.read(reinterpret_cast<char*>(&d), sizeof(d));
        value(r, c) = d;
      }
    if (!in) throw ConfigError("truncated checkpoint: " + path.string());
  }
  return store;
}

Var Graph::p(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_.leaf(params_->get(name));
  bound_.emplace(name, v);
  return v;
}

GradStore Graph::grads() const {
  GradStore out;
  for (const auto& [name, var] : bound_) out[name] = tape_.grad(var);
  return out;
}

// ---- networks ---------------------------------------------------------------

void MlpSpec::validate() const {
  if (in <= 0 || out <= 0) throw ConfigError("mlp: widths must be positive");
  for (int h : hidden)
    if (h <= 0) throw ConfigError("mlp: hidden widths must be positive");
  if (head == Head::kMeanAndLogStd && out % 2 != 0)
    throw ConfigError("mlp: mean-and-log-std head needs even output width");
}

void init_mlp(ParameterStore& store, const std::string& prefix, const MlpSpec& spec,
              Rng& rng) {
  spec.validate();
  std::vector<int> widths;
  widths.push_back(spec.in);
  for (int h : spec.hidden) widths.push_back(h);
  widths.push_back(spec.out);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    int fan_in = widths[l], fan_out = widths[l + 1];
    Mat& w = store.add(prefix + "/W" + std::to_string(l), fan_in, fan_out);
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
    store.add(prefix + "/b" + std::to_string(l), 1, fan_out);
  }
}

Mat mlp_forward(const MlpSpec& spec, const ParameterStore& store,
                const std::string& prefix, const Mat& input) {
  if (input.cols() != spec.in)
    throw ConfigError("mlp_forward: input width " + std::to_string(input.cols()) +
                      " does not match spec " + std::to_string(spec.in));
  Mat h = input;
  std::size_t layers = spec.hidden.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const Mat& w = store.get(prefix + "/W" + std::to_string(l));
    const Mat& b = store.get(prefix + "/b" + std::to_string(l));
    h = (h * w).rowwise() + Eigen::RowVectorXd(b.row(0));
    if (l + 1 < layers) h = h.cwiseMax(0.0);
  }
  if (spec.head == Head::kMeanAndLogStd) {
    Eigen::Index half = spec.out / 2;
    h.rightCols(half) = h.rightCols(half).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  }
  return h;
}

Var mlp_forward(const MlpSpec& spec, Graph& g, const std::string& prefix, Var input) {
  if (input.cols() != spec.in)
    throw ConfigError("mlp_forward: input width mismatch for " + prefix);
  Var h = input;
  std::size_t layers = spec.hidden.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    Var w = g.p(prefix + "/W" + std::to_string(l));
    Var b = g.p(prefix + "/b" + std::to_string(l));
    h = add_rowvec(matmul(h, w), b);
    if (l + 1 < layers) h = relu(h);
  }
  if (spec.head == Head::kMeanAndLogStd) {
    int half = spec.out / 2;
    Var mean = slice_cols(h, 0, half);
    Var logstd = clamp(slice_cols(h, half, half), kLogStdMin, kLogStdMax);
    h = hcat({mean, logstd});
  }
  return h;
}

// ---- schedules ---------------------------------------------------------------

double Schedule::value(long long t) const {
  if (t < 0) throw ConfigError("schedule: negative step");
  double span = fraction * static_cast<double>(total);
  if (span <= 0.0 || static_cast<double>(t) >= span) return end;
  double f = static_cast<double>(t) / span;
  return start + f * (end - start);
}

// ---- gradient verification ----------------------------------------------------

double grad_check(const ParameterStore& params, const Objective& objective, double h) {
  if (h <= 0.0) throw ConfigError("grad_check: h must be positive");
  GradStore analytic = objective.grads(params);
  ParameterStore work = params;
  double worst = 0.0;
  for (auto& [name, group] : work.groups()) {
    auto it = analytic.find(name);
    if (it == analytic.end()) continue;
    const Mat& a = it->second;
    Mat& value = group.value;
    for (Eigen::Index r = 0; r < value.rows(); ++r)
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        double saved = value(r, c);
        value(r, c) = saved + h;
        double up = objective.value(work);
        value(r, c) = saved - h;
        double down = objective.value(work);
        value(r, c) = saved;
        double fd = (up - down) / (2.0 * h);
        double err = std::abs(a(r, c) - fd) / std::max(1.0, std::abs(a(r, c)));
        worst = std::max(worst, err);
      }
  }
  return worst;
}

}  // namespace stw::diff
