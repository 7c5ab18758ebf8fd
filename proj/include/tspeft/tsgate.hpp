#pragma once

// Token-level gating: relative update magnitudes, the threshold gate and the
// sparsity statistic.

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "tspeft/numkernel.hpp"

namespace tspeft {

using Mask = std::vector<std::uint8_t>;

// Stand-in for r_i when the base row has zero norm but the delta does not;
// any finite threshold lets such a token through.
inline constexpr double kForcedOnMagnitude = std::numeric_limits<double>::infinity();

struct GateDecision {
  std::vector<double> r;
  Mask mask;
  double tau_used = 0.0;
};

// r_i = |delta_i| / |base_i|. A zero base row gives 0 when the delta row is
// zero as well and kForcedOnMagnitude otherwise.
std::vector<double> relative_magnitudes(const Matrix& base_out, const Matrix& delta);

// mask_i = 1 iff r_i >= tau.
Mask gate(std::span<const double> r, double tau);

GateDecision decide(const Matrix& base_out, const Matrix& delta, double tau);

// h_i = base_i + mask_i * delta_i
Matrix apply_gate(const Matrix& base_out, const Matrix& delta, std::span<const std::uint8_t> mask);

// 1 - sum(valid * mask) / sum(valid); throws EmptyInputError without valid tokens.
double sparsity(std::span<const std::uint8_t> mask, std::span<const std::uint8_t> valid);

}  // namespace tspeft
