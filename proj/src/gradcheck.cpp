#include "tspeft/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tspeft/backbone.hpp"
#include "tspeft/errors.hpp"
#include "tspeft/tau_opt.hpp"
#include "tspeft/trainer.hpp"

namespace tspeft {

namespace {

constexpr std::uint64_t kBackboneStream = 101;
constexpr std::uint64_t kDataStream = 102;
constexpr std::uint64_t kPerturbStream = 103;

double rel_err(const Matrix& a, const Matrix& n) {
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - n.data()[i]));
  const double scale = std::max({max_abs(a), max_abs(n), 1e-300});
  return diff == 0.0 ? 0.0 : diff / scale;
}

void randomize(PeftParams& p, const Matrix& w0, Rng& rng) {
  std::visit(
      [&](auto& q) {
        using T = std::decay_t<decltype(q)>;
        for (Matrix* m : parameters(p))
          for (double& v : m->data()) v = 0.3 * rng.normal();
        if constexpr (std::is_same_v<T, DoraLiteParams>) {
          const auto norms = column_l2_norms(w0);
          for (std::size_t j = 0; j < norms.size(); ++j) q.magnitude(0, j) = norms[j] * rng.uniform(0.7, 1.3);
        }
      },
      p);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.empty() ? 0.0 : v[v.size() / 2];
}

// Term-by-term evaluation written independently of threshold_gradient.
double literal_gk(const std::vector<double>& mu, const std::vector<double>& r, const Mask& valid, double tau,
                  double lambda) {
  double g = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (valid[i] == 0) continue;
    const double on = r[i] >= tau ? 1.0 : 0.0;
    const double pos = mu[i] >= 0.0 ? 1.0 : 0.0;
    const double consistent = on == pos ? 1.0 : 0.0;
    g += consistent * mu[i] + on * lambda;
  }
  return g;
}

}  // namespace

GradcheckReport gradcheck(const RunConfig& c, std::uint64_t seed, const GradcheckOptions& opt) {
  if (c.task.seq_len > 8 || c.backbone.hidden > 16)
    throw ConfigError("gradcheck needs a small configuration (seq_len <= 8, hidden <= 16)");
  GradcheckReport rep;
  rep.seed = seed;
  rep.variant = to_string(c.peft.variant);
  rep.tolerance = opt.tolerance;

  const BackboneWeights w = init_backbone(c.backbone_shape(), derive_seed(seed, kBackboneStream));
  PeftSet peft = build_peft(c, w, seed);
  if (!opt.zero_init) {
    Rng rng(derive_seed(seed, kPerturbStream));
    for (auto& m : peft.modules) randomize(m.params, w.layers[static_cast<std::size_t>(m.point.layer)].site(m.point.site), rng);
  }

  TaskParams tp = c.task_params();
  tp.seed = derive_seed(seed, kDataStream);
  tp.n_examples = opt.batch;
  const Dataset data = gen_sparse_signal_task(tp);
  std::vector<const Example*> batch;
  for (const auto& e : data.examples) batch.push_back(&e);

  // Thresholds at the median r of each module, then gates frozen.
  const std::size_t n_mod = peft.modules.size();
  std::vector<double> taus(n_mod, 0.0);
  {
    ForwardOptions fo;
    fo.gating_enabled = false;
    const auto probe = run_batch(w, peft, taus, batch, fo, true, nullptr, nullptr);
    for (std::size_t m = 0; m < n_mod; ++m) {
      const auto& pt = peft.modules[m].point;
      std::vector<double> rs;
      for (const auto& cache : probe.caches) {
        const auto& sc = cache.site(pt.layer, pt.site);
        for (std::size_t i = 0; i < sc.r.size(); ++i)
          if (cache.valid[i] && std::isfinite(sc.r[i])) rs.push_back(sc.r[i]);
      }
      taus[m] = median(rs);
    }
  }
  std::vector<std::vector<Mask>> masks;
  {
    const auto gated = run_batch(w, peft, taus, batch, {}, true, nullptr, nullptr);
    for (const auto& cache : gated.caches) {
      std::vector<Mask> per(n_mod);
      for (std::size_t m = 0; m < n_mod; ++m) {
        const auto& pt = peft.modules[m].point;
        per[m] = cache.site(pt.layer, pt.site).mask;
      }
      masks.push_back(std::move(per));
    }
  }

  PeftGrads analytic = zero_peft_grads(peft);
  const auto pass = run_batch(w, peft, taus, batch, {}, true, &analytic, nullptr, &masks);
  auto loss_at = [&](const ForwardOptions& fo) { return run_batch(w, peft, taus, batch, fo, false, nullptr, nullptr, &masks).loss; };

  // Parameter gradients.
  for (std::size_t m = 0; m < n_mod; ++m) {
    auto params = parameters(peft.modules[m].params);
    const auto names = parameter_names(peft.modules[m].params);
    for (std::size_t p = 0; p < params.size(); ++p) {
      Matrix numeric(params[p]->rows(), params[p]->cols());
      for (std::size_t i = 0; i < params[p]->size(); ++i) {
        double& x = params[p]->data()[i];
        const double x0 = x;
        x = x0 + opt.step;
        const double lp = loss_at({});
        x = x0 - opt.step;
        const double lm = loss_at({});
        x = x0;
        numeric.data()[i] = (lp - lm) / (2.0 * opt.step);
      }
      ParamCheck pc;
      pc.module = to_string(peft.modules[m].point);
      pc.param = names[p];
      pc.max_rel_err = rel_err(analytic[m][p], numeric);
      pc.analytic_max_abs = max_abs(analytic[m][p]);
      rep.max_param_err = std::max(rep.max_param_err, pc.max_rel_err);
      if (!(pc.max_rel_err <= opt.tolerance))
        rep.failures.push_back("parameter " + pc.module + "." + pc.param + " relative error " +
                               std::to_string(pc.max_rel_err));
      rep.params.push_back(pc);
    }
  }

  // Token influences against the gamma-perturbation oracle, and the
  // threshold gradient against the literal evaluation.
  for (std::size_t m = 0; m < n_mod; ++m) {
    const auto& pt = peft.modules[m].point;
    std::vector<double> mu_all, r_all;
    Mask valid_all;
    double worst = 0.0, scale = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& cache = pass.caches[b];
      const auto& sc = cache.site(pt.layer, pt.site);
      const auto mu = token_influence(sc.grad_h, sc.delta, cache.valid);
      for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!cache.valid[i]) continue;
        scale = std::max(scale, std::abs(mu[i]));
        ForwardOptions fo;
        fo.perturb = Perturbation{static_cast<int>(b), static_cast<int>(m), static_cast<int>(i), opt.step};
        const double lp = loss_at(fo);
        fo.perturb->gamma = -opt.step;
        const double lm = loss_at(fo);
        worst = std::max(worst, std::abs((lp - lm) / (2.0 * opt.step) - mu[i]));
      }
      mu_all.insert(mu_all.end(), mu.begin(), mu.end());
      r_all.insert(r_all.end(), sc.r.begin(), sc.r.end());
      valid_all.insert(valid_all.end(), cache.valid.begin(), cache.valid.end());
    }
    const double err = worst == 0.0 ? 0.0 : worst / std::max(scale, 1e-300);
    rep.mu_max_rel_err = std::max(rep.mu_max_rel_err, err);
    if (!(err <= opt.tolerance))
      rep.failures.push_back("token influence at " + to_string(pt) + " relative error " + std::to_string(err));

    const double lambda = c.ts.hyper.lambda;
    const double got = threshold_gradient(mu_all, r_all, taus[m], lambda, valid_all);
    const double want = literal_gk(mu_all, r_all, valid_all, taus[m], lambda);
    if (std::memcmp(&got, &want, sizeof got) != 0) {
      rep.gk_exact = false;
      rep.failures.push_back("threshold gradient mismatch at " + to_string(pt));
    }
  }
  return rep;
}

nlohmann::json to_json(const GradcheckReport& r) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : r.params)
    params.push_back({{"module", p.module}, {"param", p.param}, {"max_rel_err", p.max_rel_err},
                      {"analytic_max_abs", p.analytic_max_abs}});
  return {{"seed", r.seed},
          {"variant", r.variant},
          {"pass", r.pass()},
          {"tolerance", r.tolerance},
          {"max_param_err", r.max_param_err},
          {"mu_max_rel_err", r.mu_max_rel_err},
          {"gk_exact", r.gk_exact},
          {"failures", r.failures},
          {"params", params}};
}

}  // namespace tspeft
