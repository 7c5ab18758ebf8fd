#pragma once

#include <vector>

#include "tspeft/numkernel.hpp"

namespace tspeft {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam over a fixed list of parameter matrices.
class AdamW {
 public:
  AdamW(AdamWConfig cfg, const std::vector<Matrix*>& params);

  // lr_mult scales the configured learning rate for this step.
  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr_mult = 1.0);

  long steps() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

enum class Schedule { constant, linear };

// Multiplier at 0-based step `step` of `total`: 1 for constant,
// 1 - step/total for linear decay.
double schedule_multiplier(Schedule s, long step, long total);

}  // namespace tspeft
