#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cgt/error.hpp"
#include "cgt/random.hpp"

namespace cgt::privacy {

/// Gaussian-mechanism noise scale sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / eps.
/// The classical guarantee holds for eps <= 1; larger eps uses the same formula
/// as a heuristic. eps = +inf yields 0. Throws ValidationError on
/// non-positive eps / sensitivity < 0 / delta outside (0, 1), and
/// NumericalError if sigma overflows.
double gaussian_sigma(double eps, double delta, double sensitivity);

struct Budget {
  double eps = 0.0;
  double delta = 0.0;
};

/// Basic composition: (steps * eps_step, steps * delta_step). A loose upper bound.
Budget compose(std::size_t steps, double eps_step, double delta_step);

struct DpSgdConfig {
  double clip_norm = 1.0;
  double noise_multiplier = 1.0;
  double delta = 0.1;
  std::size_t steps = 1;
  double batch_fraction = 1.0;
};

/// Epsilon reported for a DP-SGD run under basic composition: delta is split
/// evenly over steps and each step's Gaussian release (sensitivity clip_norm,
/// std noise_multiplier * clip_norm) is charged sqrt(2 ln(1.25/delta_step)) / sigma.
/// Subsampling amplification is not credited. +inf when sigma == 0.
Budget dp_sgd_budget(const DpSgdConfig& cfg);

/// Scale factor min(1, clip / norm); 1 when norm == 0 or clip == inf.
inline double clip_factor(double norm, double clip) noexcept {
  if (!(norm > 0.0) || std::isinf(clip)) return 1.0;
  return std::min(1.0, clip / norm);
}

/// Clips every example gradient to norm <= clip_norm, sums them in order,
/// adds N(0, (sigma * clip_norm)^2) per coordinate and divides by the batch
/// size. With sigma == 0 no noise is drawn, so the result equals the plain
/// ordered mean bit-for-bit when nothing is clipped.
template <typename Scalar>
std::vector<Scalar> clip_and_noise(std::span<const std::vector<Scalar>> per_example, const DpSgdConfig& cfg,
                                   Rng& rng) {
  if (per_example.empty()) throw ValidationError("clip_and_noise: empty batch");
  const std::size_t dim = per_example.front().size();
  std::vector<Scalar> acc(dim, Scalar{0});
  for (const auto& g : per_example) {
    if (g.size() != dim) throw ValidationError("clip_and_noise: ragged gradients");
    double sq = 0.0;
    for (const Scalar v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    const auto factor = static_cast<Scalar>(clip_factor(std::sqrt(sq), cfg.clip_norm));
    for (std::size_t i = 0; i < dim; ++i) acc[i] += g[i] * factor;
  }
  if (cfg.noise_multiplier > 0.0) {
    const double std = cfg.noise_multiplier * cfg.clip_norm;
    if (!std::isfinite(std)) throw NumericalError("clip_and_noise: infinite noise scale");
    for (auto& v : acc) v += static_cast<Scalar>(std * rng.normal());
  }
  const auto batch = static_cast<Scalar>(per_example.size());
  for (auto& v : acc) v /= batch;
  return acc;
}

template <typename Scalar>
std::vector<Scalar> clip_and_noise(std::span<const std::vector<Scalar>> per_example, const DpSgdConfig& cfg,
                                   std::uint64_t seed) {
  Rng rng(derive_seed(seed, seed_tag("dp-sgd-noise")));
  return clip_and_noise(per_example, cfg, rng);
}

/// Budget block embedded in run manifests and reports.
struct Report {
  std::string mode = "none";
  double eps = std::numeric_limits<double>::infinity();
  double delta = 0.0;
  double sigma = 0.0;
  double clip = std::numeric_limits<double>::infinity();
  std::string accounting = "basic composition (loose upper bound)";
};

}  // namespace cgt::privacy
