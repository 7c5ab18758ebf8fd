#include "tspeft/optim.hpp"

#include <cmath>

#include "tspeft/errors.hpp"

namespace tspeft {

AdamW::AdamW(AdamWConfig cfg, const std::vector<Matrix*>& params) : cfg_(cfg) {
  for (const Matrix* p : params) {
    m_.emplace_back(p->rows(), p->cols());
    v_.emplace_back(p->rows(), p->cols());
  }
}

void AdamW::step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr_mult) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeError("AdamW: parameter list changed since construction");
  ++t_;
  const double lr = cfg_.lr * lr_mult;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data();
    const auto& g = grads[i]->data();
    auto& m = m_[i].data();
    auto& v = v_[i].data();
    if (p.size() != g.size()) throw ShapeError("AdamW: gradient shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p[j] -= lr * cfg_.weight_decay * p[j];
      p[j] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

double schedule_multiplier(Schedule s, long step, long total) {
  if (s == Schedule::constant || total <= 0) return 1.0;
  return 1.0 - static_cast<double>(step) / static_cast<double>(total);
}

}  // namespace tspeft
