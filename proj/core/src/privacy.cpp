#include "cgt/privacy.hpp"

namespace cgt::privacy {

double gaussian_sigma(double eps, double delta, double sensitivity) {
  if (!(eps > 0.0)) throw ValidationError("gaussian_sigma: eps must be positive");
  if (!(delta > 0.0 && delta < 1.0)) throw ValidationError("gaussian_sigma: delta must be in (0, 1)");
  if (!(sensitivity >= 0.0) || std::isinf(sensitivity)) {
    throw ValidationError("gaussian_sigma: sensitivity must be finite and nonnegative");
  }
  if (std::isinf(eps) || sensitivity == 0.0) return 0.0;
  const double sigma = sensitivity * std::sqrt(2.0 * std::log(1.25 / delta)) / eps;
  if (!std::isfinite(sigma)) throw NumericalError("gaussian_sigma: sigma overflows", sigma);
  return sigma;
}

Budget compose(std::size_t steps, double eps_step, double delta_step) {
  return {static_cast<double>(steps) * eps_step, static_cast<double>(steps) * delta_step};
}

Budget dp_sgd_budget(const DpSgdConfig& cfg) {
  if (cfg.steps == 0) return {0.0, 0.0};
  const double delta_step = cfg.delta / static_cast<double>(cfg.steps);
  if (!(cfg.noise_multiplier > 0.0)) return {std::numeric_limits<double>::infinity(), cfg.delta};
  const double eps_step = std::sqrt(2.0 * std::log(1.25 / delta_step)) / cfg.noise_multiplier;
  return compose(cfg.steps, eps_step, delta_step);
}

}  // namespace cgt::privacy
