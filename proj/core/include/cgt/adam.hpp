#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace cgt {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a flat float parameter vector with bias-corrected moments.
class Adam {
 public:
  explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

  void step(std::span<float> params, std::span<const float> grad, double lr) {
    if (m_.empty()) {
      m_.assign(params.size(), 0.0f);
      v_.assign(params.size(), 0.0f);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(settings_.beta1);
    const auto b2 = static_cast<float>(settings_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0f - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0f - b2) * grad[i] * grad[i];
      const double mh = m_[i] / c1;
      const double vh = v_[i] / c2;
      params[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + settings_.eps));
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  AdamSettings settings_;
  std::vector<float> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace cgt
