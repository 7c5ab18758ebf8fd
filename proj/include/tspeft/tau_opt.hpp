#pragma once

// Threshold learning for one gated module: token influences, the
// consistency-masked approximate gradient and the moment-adapted update.

#include <cstdint>
#include <span>
#include <string>

#include "tspeft/numkernel.hpp"

namespace tspeft {

struct GateHyper {
  double s = 1e-3;        // gradient scale
  double lambda = 1e-3;   // sparsity weight
  double alpha = 1.0;     // base step size
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;

  friend bool operator==(const GateHyper&, const GateHyper&) = default;
};

void validate(const GateHyper& h);

struct GateState {
  double tau = 0.0;
  double m = 0.0;
  double v = 0.0;
  std::int64_t k = 0;
  GateHyper hyper;

  friend bool operator==(const GateState&, const GateState&) = default;
};

// mu_i = <grad_h_i, delta_i> for valid rows, 0 for padding.
std::vector<double> token_influence(const Matrix& grad_h, const Matrix& delta, std::span<const std::uint8_t> valid);

// Sum over valid tokens of [1(mu>=0) == 1(r>=tau)] * mu + 1(r>=tau) * lambda,
// accumulated in token order.
double threshold_gradient(std::span<const double> mu, std::span<const double> r, double tau, double lambda,
                          std::span<const std::uint8_t> valid);

// Moment-adapted update; `lr_mult` scales alpha (scheduler multiplier).
// Throws OptimizerError naming `module` when g is not finite.
GateState adam_step(GateState state, double g, double lr_mult = 1.0, const std::string& module = "");

// Ablation: tau += alpha * lr_mult * s * g, no moments.
GateState plain_sgd_step(GateState state, double g, double lr_mult = 1.0, const std::string& module = "");

}  // namespace tspeft
