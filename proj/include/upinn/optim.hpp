#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace upinn::optim {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global-norm gradient clipping; 0 disables it.
  double clip_norm = 0.0;
};

// One trainable parameter block (a network) and its gradient.
struct ParamGroup {
  std::span<double> params;
  std::span<const double> grads;
  bool frozen = false;
};

// Bias-corrected Adam. Moment buffers are allocated per group on first use
// and only for unfrozen groups; the group order must stay fixed between
// steps.
class Adam {
 public:
  explicit Adam(AdamConfig config);

  // Throws NonFiniteError (without touching any parameter) if a gradient
  // entry of an unfrozen group is not finite.
  void step(std::span<const ParamGroup> groups);

  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  std::size_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }
  std::size_t moment_size(std::size_t group) const;

 private:
  AdamConfig config_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// lr(e) = initial * (1 - decay)^floor(e / period)
struct StepScheduler {
  double initial_lr = 1e-3;
  double decay_fraction = 0.05;
  std::size_t period = 15000;

  double lr_at(std::size_t epoch) const;
};

}  // namespace upinn::optim
