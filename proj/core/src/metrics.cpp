#include "stw/metrics.hpp"

namespace stw::metrics {

double kl_gaussian_diag(const diff::Vec& mu1, const diff::Vec& sigma1,
                        const diff::Vec& mu2, const diff::Vec& sigma2) {
  if (mu1.size() != sigma1.size() || mu1.size() != mu2.size() ||
      mu1.size() != sigma2.size())
    throw DomainError("kl_gaussian_diag: length mismatch");
  if ((sigma1.array() <= 0.0).any() || (sigma2.array() <= 0.0).any())
    throw DomainError("kl_gaussian_diag: sigma must be positive");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < mu1.size(); ++i) {
    double s1 = sigma1(i), s2 = sigma2(i);
    double dm = mu1(i) - mu2(i);
    acc += std::log(s2 / s1) + (s1 * s1 + dm * dm) / (2.0 * s2 * s2) - 0.5;
  }
  return acc;
}

}  // namespace stw::metrics
