#include "tspeft/tau_opt.hpp"

#include <cmath>

#include "tspeft/errors.hpp"

namespace tspeft {

void validate(const GateHyper& h) {
  auto finite = [](double x) { return std::isfinite(x); };
  if (!finite(h.s) || !finite(h.lambda) || !finite(h.alpha)) throw ConfigError("ts: s, lambda, alpha must be finite");
  if (!(h.beta1 >= 0.0 && h.beta1 < 1.0)) throw ConfigError("ts: beta1 must be in [0, 1)");
  if (!(h.beta2 >= 0.0 && h.beta2 < 1.0)) throw ConfigError("ts: beta2 must be in [0, 1)");
  if (!(h.eps > 0.0) || !finite(h.eps)) throw ConfigError("ts: eps must be positive");
}

std::vector<double> token_influence(const Matrix& grad_h, const Matrix& delta, std::span<const std::uint8_t> valid) {
  if (!grad_h.same_shape(delta)) throw ShapeError("token_influence: grad_h and delta shapes differ");
  if (valid.size() != delta.rows()) throw ShapeError("token_influence: valid length != row count");
  std::vector<double> mu(delta.rows(), 0.0);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!valid[i]) continue;
    auto g = grad_h.row(i);
    auto d = delta.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < d.size(); ++j) acc += g[j] * d[j];
    mu[i] = acc;
  }
  return mu;
}

double threshold_gradient(std::span<const double> mu, std::span<const double> r, double tau, double lambda,
                          std::span<const std::uint8_t> valid) {
  if (mu.size() != r.size() || mu.size() != valid.size())
    throw ShapeError("threshold_gradient: mu, r, valid lengths differ");
  double g = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!valid[i]) continue;
    const bool on = r[i] >= tau;
    const bool helpful = mu[i] >= 0.0;
    const double loss_term = helpful == on ? mu[i] : 0.0;
    const double sparsity_term = on ? lambda : 0.0;
    g += loss_term + sparsity_term;
  }
  return g;
}

GateState adam_step(GateState st, double g, double lr_mult, const std::string& module) {
  if (!std::isfinite(g)) throw OptimizerError("non-finite threshold gradient for module " + module);
  const auto& h = st.hyper;
  st.k += 1;
  st.m = h.beta1 * st.m + (1.0 - h.beta1) * g;
  st.v = h.beta2 * st.v + (1.0 - h.beta2) * g * g;
  const double kd = static_cast<double>(st.k);
  const double m_hat = st.m / (1.0 - std::pow(h.beta1, kd));
  const double v_hat = st.v / (1.0 - std::pow(h.beta2, kd));
  st.tau += h.alpha * lr_mult * h.s * m_hat / (std::sqrt(v_hat) + h.eps);
  return st;
}

GateState plain_sgd_step(GateState st, double g, double lr_mult, const std::string& module) {
  if (!std::isfinite(g)) throw OptimizerError("non-finite threshold gradient for module " + module);
  st.k += 1;
  st.tau += st.hyper.alpha * lr_mult * st.hyper.s * g;
  return st;
}

}  // namespace tspeft
