#include "upinn/optim.hpp"

#include <cmath>

#include "upinn/error.hpp"

namespace upinn::optim {

Adam::Adam(AdamConfig config) : config_(config) {
  if (!(config_.lr > 0.0) || !(config_.eps > 0.0) || config_.beta1 < 0.0 || config_.beta1 >= 1.0 ||
      config_.beta2 < 0.0 || config_.beta2 >= 1.0 || config_.clip_norm < 0.0) {
    throw ConfigError("invalid Adam hyperparameters");
  }
}

std::size_t Adam::moment_size(std::size_t group) const {
  return group < m_.size() ? m_[group].size() : 0;
}

void Adam::step(std::span<const ParamGroup> groups) {
  double sq = 0.0;
  for (const auto& g : groups) {
    if (g.frozen) {
      continue;
    }
    if (g.grads.size() != g.params.size()) {
      throw DimensionError("Adam: gradient and parameter sizes differ");
    }
    for (double x : g.grads) {
      if (!std::isfinite(x)) {
        throw NonFiniteError("non-finite gradient");
      }
      sq += x * x;
    }
  }
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) {
      scale = config_.clip_norm / norm;
    }
  }

  if (m_.size() < groups.size()) {
    m_.resize(groups.size());
    v_.resize(groups.size());
  }
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    if (g.frozen) {
      continue;
    }
    auto& m = m_[gi];
    auto& v = v_[gi];
    if (m.size() != g.params.size()) {
      m.assign(g.params.size(), 0.0);
      v.assign(g.params.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      const double gr = g.grads[i] * scale;
      m[i] = b1 * m[i] + (1.0 - b1) * gr;
      v[i] = b2 * v[i] + (1.0 - b2) * gr * gr;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      g.params[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

double StepScheduler::lr_at(std::size_t epoch) const {
  if (period == 0) {
    throw ConfigError("scheduler period must be positive");
  }
  const auto k = static_cast<double>(epoch / period);
  return initial_lr * std::pow(1.0 - decay_fraction, k);
}

}  // namespace upinn::optim
