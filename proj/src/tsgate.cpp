#include "tspeft/tsgate.hpp"

#include <string>

#include "tspeft/errors.hpp"

namespace tspeft {

std::vector<double> relative_magnitudes(const Matrix& base_out, const Matrix& delta) {
  if (!base_out.same_shape(delta)) throw ShapeError("relative_magnitudes: base and delta shapes differ");
  const auto base_norm = row_l2_norms(base_out);
  const auto delta_norm = row_l2_norms(delta);
  std::vector<double> r(base_norm.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (base_norm[i] == 0.0)
      r[i] = delta_norm[i] == 0.0 ? 0.0 : kForcedOnMagnitude;
    else
      r[i] = delta_norm[i] / base_norm[i];
  }
  return r;
}

Mask gate(std::span<const double> r, double tau) {
  Mask m(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) m[i] = r[i] >= tau ? 1 : 0;
  return m;
}

GateDecision decide(const Matrix& base_out, const Matrix& delta, double tau) {
  GateDecision d;
  d.r = relative_magnitudes(base_out, delta);
  d.mask = gate(d.r, tau);
  d.tau_used = tau;
  return d;
}

Matrix apply_gate(const Matrix& base_out, const Matrix& delta, std::span<const std::uint8_t> mask) {
  if (!base_out.same_shape(delta)) throw ShapeError("apply_gate: base and delta shapes differ");
  if (mask.size() != base_out.rows()) throw ShapeError("apply_gate: mask length != row count");
  Matrix h = base_out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 1) throw ContractError("apply_gate: mask entry " + std::to_string(i) + " is not 0/1");
    if (!mask[i]) continue;
    auto hr = h.row(i);
    auto dr = delta.row(i);
    for (std::size_t j = 0; j < hr.size(); ++j) hr[j] += dr[j];
  }
  return h;
}

double sparsity(std::span<const std::uint8_t> mask, std::span<const std::uint8_t> valid) {
  if (mask.size() != valid.size()) throw ShapeError("sparsity: mask and valid lengths differ");
  std::size_t on = 0, n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!valid[i]) continue;
    ++n;
    on += mask[i] ? 1 : 0;
  }
  if (n == 0) throw EmptyInputError("sparsity: no valid tokens");
  return 1.0 - static_cast<double>(on) / static_cast<double>(n);
}

}  // namespace tspeft
