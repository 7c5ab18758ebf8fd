#include "tspeft/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "tspeft/errors.hpp"
#include "tspeft/optim.hpp"
#include "tspeft/tau_opt.hpp"
#include "tspeft/tsgate.hpp"

namespace tspeft {

using nlohmann::json;

namespace {

// Sub-stream ids for derive_seed.
constexpr std::uint64_t kFinetuneDataStream = 1;
constexpr std::uint64_t kPeftInitStream = 2;
constexpr std::uint64_t kShuffleStream = 3;

std::vector<const Example*> batch_view(const Dataset& d, const std::vector<std::size_t>& order, std::size_t begin,
                                       std::size_t end) {
  std::vector<const Example*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&d.examples[order[i]]);
  return out;
}

std::vector<const Matrix*> const_view(const std::vector<Matrix*>& v) { return {v.begin(), v.end()}; }

std::vector<const Matrix*> flatten(const PeftGrads& g) {
  std::vector<const Matrix*> out;
  for (const auto& per : g)
    for (const auto& m : per) out.push_back(&m);
  return out;
}

std::vector<Matrix*> peft_parameters(PeftSet& peft) {
  std::vector<Matrix*> out;
  for (auto& m : peft.modules)
    for (Matrix* p : parameters(m.params)) out.push_back(p);
  return out;
}

void require_compatible(const BackboneShape& s, const Dataset& d) {
  if (d.seq_len != s.seq_len || d.vocab_size > s.vocab_size || d.num_classes != s.num_classes)
    throw ShapeError("dataset shape does not match the backbone (seq_len/vocab/classes)");
}

}  // namespace

RunData make_run_data(const RunConfig& c) {
  RunData d;
  TaskParams base = c.task_params();
  auto pre = gen_task_splits(base, c.task.n_train, c.task.n_val);
  d.pretrain_train = std::move(pre.train);
  d.pretrain_val = std::move(pre.val);
  TaskParams ft = base;
  ft.seed = derive_seed(c.task.seed, kFinetuneDataStream);
  auto fs = gen_task_splits(ft, c.task.n_train, c.task.n_val);
  d.train = gen_shifted_task(fs.train, c.task.shift_seed, c.task.shift_rule);
  d.val = gen_shifted_task(fs.val, c.task.shift_seed, c.task.shift_rule);
  return d;
}

PretrainResult pretrain(const RunConfig& c, const Dataset& train, const Dataset& val, std::ostream* log) {
  const BackboneShape shape = c.backbone_shape();
  require_compatible(shape, train);
  PretrainResult out;
  out.weights = init_backbone(shape, c.pretrain.seed);
  const PeftSet none;
  const std::vector<double> no_taus;
  if (c.pretrain.epochs > 0) {
    AdamWConfig oc;
    oc.lr = c.pretrain.lr;
    auto params = parameters(out.weights);
    AdamW opt(oc, params);
    Rng rng(derive_seed(c.pretrain.seed, kShuffleStream));
    std::vector<std::size_t> order(train.size());
    const auto bs = static_cast<std::size_t>(c.pretrain.batch_size);
    for (int ep = 0; ep < c.pretrain.epochs; ++ep) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(order);
      double epoch_loss = 0.0;
      long batches = 0;
      for (std::size_t b = 0; b < order.size(); b += bs) {
        const auto batch = batch_view(train, order, b, std::min(order.size(), b + bs));
        BackboneWeights grads = zeros_like(out.weights);
        const auto pass = run_batch(out.weights, none, no_taus, batch, {}, false, nullptr, &grads);
        ++out.steps;
        if (!std::isfinite(pass.loss))
          throw TrainingError("pretrain: loss is not finite at step " + std::to_string(out.steps));
        opt.step(params, const_view(parameters(grads)));
        out.final_loss = pass.loss;
        epoch_loss += pass.loss;
        ++batches;
      }
      if (log) *log << "pretrain epoch " << ep + 1 << "/" << c.pretrain.epochs << " loss " << epoch_loss / batches << "\n";
    }
  }
  const auto ev = evaluate(out.weights, none, {}, false, val, c.optimizer.batch_size);
  out.val_accuracy = ev.accuracy();
  if (log) *log << "pretrain val accuracy " << out.val_accuracy << "\n";
  return out;
}

BackboneWeights obtain_backbone(const RunConfig& c, const RunData& data, std::ostream* log) {
  if (!c.backbone.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(c.backbone.checkpoint);
    if (!(ck.backbone.shape == c.backbone_shape()))
      throw CheckpointError("backbone checkpoint shape does not match the configuration");
    return std::move(ck.backbone);
  }
  return pretrain(c, data.pretrain_train, data.pretrain_val, log).weights;
}

PeftSet build_peft(const RunConfig& c, const BackboneWeights& w, std::uint64_t seed) {
  PeftSet set;
  set.variant = to_string(c.peft.variant);
  Rng rng(derive_seed(seed, kPeftInitStream));
  for (const auto& p : c.peft.attach) {
    const auto [d_in, d_out] = site_dims(w.shape, p.site);
    PeftModule m;
    m.point = p;
    auto rank = static_cast<std::size_t>(c.peft.rank);
    switch (c.peft.variant) {
      case PeftVariant::adalora: {
        auto it = c.peft.rank_overrides.find(to_string(p));
        if (it != c.peft.rank_overrides.end()) rank = static_cast<std::size_t>(it->second);
        m.params = make_lora(d_in, d_out, rank, c.peft.scale, rng);
        break;
      }
      case PeftVariant::lora: m.params = make_lora(d_in, d_out, rank, c.peft.scale, rng); break;
      case PeftVariant::dora:
        m.params = make_dora(w.layers[static_cast<std::size_t>(p.layer)].site(p.site), rank, c.peft.scale, rng);
        break;
      case PeftVariant::adapter:
        m.params = make_adapter(d_in, d_out, static_cast<std::size_t>(c.peft.bottleneck), rng);
        break;
    }
    set.modules.push_back(std::move(m));
  }
  SiteIndex check(w.shape, set);
  return set;
}

double ModuleEval::sparsity() const {
  if (valid == 0) throw EmptyInputError("module sparsity over zero valid tokens");
  return 1.0 - static_cast<double>(on) / static_cast<double>(valid);
}

double ModuleEval::mean_r() const { return finite_r ? sum_r / static_cast<double>(finite_r) : 0.0; }

double ModuleEval::mean_delta_norm() const { return valid ? sum_delta_norm / static_cast<double>(valid) : 0.0; }

double EvalResult::mean_sparsity() const {
  if (modules.empty()) return 0.0;
  double s = 0.0;
  for (const auto& m : modules) s += m.sparsity();
  return s / static_cast<double>(modules.size());
}

EvalResult evaluate(const BackboneWeights& w, const PeftSet& peft, const std::vector<GateState>& gates,
                    bool gating_enabled, const Dataset& data, int batch_size, std::ostream* mask_dump) {
  require_compatible(w.shape, data);
  if (data.size() == 0) throw EmptyInputError("evaluate: empty dataset");
  if (gates.size() != peft.modules.size()) throw ShapeError("evaluate: one gate state per module required");
  std::vector<double> taus;
  for (const auto& g : gates) taus.push_back(g.tau);
  ForwardOptions opt;
  opt.gating_enabled = gating_enabled;
  const SiteIndex index(w.shape, peft);

  EvalResult r;
  for (const auto& m : peft.modules) r.modules.push_back(ModuleEval{m.point});
  double loss_sum = 0.0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto& ex = data.examples[n];
    const ForwardCache c = forward(w, peft, taus, ex.tokens, opt);
    loss_sum += cross_entropy(c.logits, ex.label, 1.0).loss;
    r.correct += argmax_row(c.logits) == ex.label ? 1 : 0;
    ++r.total;
    for (std::size_t m = 0; m < peft.modules.size(); ++m) {
      const auto& pt = peft.modules[m].point;
      const SiteCache& sc = c.site(pt.layer, pt.site);
      const auto norms = row_l2_norms(sc.delta);
      auto& me = r.modules[m];
      std::string bits;
      for (std::size_t i = 0; i < sc.mask.size(); ++i) {
        if (!c.valid[i]) continue;
        ++me.valid;
        me.on += sc.mask[i];
        if (std::isfinite(sc.r[i])) {
          me.sum_r += sc.r[i];
          ++me.finite_r;
        }
        me.sum_delta_norm += norms[i];
        if (mask_dump) bits.push_back(sc.mask[i] ? '1' : '0');
      }
      if (mask_dump)
        *mask_dump << n / static_cast<std::size_t>(batch_size) << ' ' << n << ' ' << m << ' ' << bits << '\n';
    }
  }
  r.mean_loss = loss_sum / static_cast<double>(r.total);
  return r;
}

EvalResult evaluate(const Checkpoint& ck, const Dataset& data, int batch_size, std::ostream* mask_dump) {
  return evaluate(ck.backbone, ck.peft, ck.gates, ck.gating_enabled, data, batch_size, mask_dump);
}

json to_json(const EvalResult& r) {
  json mods = json::array();
  for (std::size_t m = 0; m < r.modules.size(); ++m) {
    const auto& e = r.modules[m];
    mods.push_back({{"id", m},
                    {"layer", e.point.layer},
                    {"site", to_string(e.point.site)},
                    {"sparsity", e.sparsity()},
                    {"mean_r", e.mean_r()},
                    {"tokens", e.valid}});
  }
  return {{"accuracy", r.accuracy()},
          {"correct", r.correct},
          {"total", r.total},
          {"mean_loss", r.mean_loss},
          {"mean_sparsity", r.mean_sparsity()},
          {"per_module", mods}};
}

double RunArtifacts::mean_sparsity() const { return val.mean_sparsity(); }

double tail_std(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  const std::size_t start = xs.size() / 2;
  const double n = static_cast<double>(xs.size() - start);
  double mean = 0.0;
  for (std::size_t i = start; i < xs.size(); ++i) mean += xs[i];
  mean /= n;
  double var = 0.0;
  for (std::size_t i = start; i < xs.size(); ++i) var += (xs[i] - mean) * (xs[i] - mean);
  return std::sqrt(var / n);
}

RunArtifacts finetune(const RunConfig& c, const BackboneWeights& w, const Dataset& train, const Dataset& val,
                      const std::filesystem::path& out_dir, std::ostream* log) {
  validate(c);
  require_compatible(w.shape, train);
  if (train.size() == 0) throw EmptyInputError("finetune: empty training set");
  RunArtifacts out;
  out.backbone_digest_before = weights_digest(w);

  PeftSet peft = build_peft(c, w, c.seed);
  const std::size_t n_mod = peft.modules.size();
  std::vector<GateState> gates(n_mod);
  for (auto& g : gates) g.hyper = c.ts.hyper;
  out.trainable_params = peft.trainable_parameters();
  out.tau_trajectory.assign(n_mod, {});

  AdamWConfig oc;
  oc.lr = c.optimizer.lr;
  oc.weight_decay = c.optimizer.weight_decay;
  auto params = peft_parameters(peft);
  AdamW opt(oc, params);
  Rng rng(derive_seed(c.seed, kShuffleStream));

  const auto bs = static_cast<std::size_t>(c.optimizer.batch_size);
  const long per_epoch = static_cast<long>((train.size() + bs - 1) / bs);
  const long total = per_epoch * c.optimizer.epochs;
  ForwardOptions fo;
  fo.gating_enabled = c.ts.enabled;

  std::ostringstream metrics;
  std::vector<std::size_t> order(train.size());
  std::vector<double> taus(n_mod, 0.0);
  std::vector<double> mu_all, r_all;
  Mask valid_all;
  for (int ep = 0; ep < c.optimizer.epochs; ++ep) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const double mult = schedule_multiplier(c.optimizer.scheduler, out.steps, total);
      const auto batch = batch_view(train, order, b, std::min(order.size(), b + bs));
      for (std::size_t m = 0; m < n_mod; ++m) taus[m] = gates[m].tau;

      PeftGrads grads = zero_peft_grads(peft);
      const BatchPass pass = run_batch(w, peft, taus, batch, fo, true, &grads, nullptr);
      ++out.steps;
      if (!std::isfinite(pass.loss))
        throw TrainingError("finetune: loss is not finite at step " + std::to_string(out.steps));

      // Step 1: PEFT parameters.
      opt.step(params, flatten(grads), mult);
      ++peft.version;

      // Step 2: thresholds, from the same forward/backward caches.
      json per_module = json::array();
      for (std::size_t m = 0; m < n_mod; ++m) {
        const auto& pt = peft.modules[m].point;
        mu_all.clear();
        r_all.clear();
        valid_all.clear();
        long on = 0, n_valid = 0;
        for (const auto& cache : pass.caches) {
          const SiteCache& sc = cache.site(pt.layer, pt.site);
          const auto mu = token_influence(sc.grad_h, sc.delta, cache.valid);
          mu_all.insert(mu_all.end(), mu.begin(), mu.end());
          r_all.insert(r_all.end(), sc.r.begin(), sc.r.end());
          valid_all.insert(valid_all.end(), cache.valid.begin(), cache.valid.end());
          for (std::size_t i = 0; i < sc.mask.size(); ++i) {
            n_valid += cache.valid[i];
            on += cache.valid[i] & sc.mask[i];
          }
        }
        const std::string name = to_string(pt);
        double g;
        if (c.ts.enabled) {
          g = threshold_gradient(mu_all, r_all, gates[m].tau, gates[m].hyper.lambda, valid_all);
          gates[m] = c.tau_optimizer == TauOptimizer::adam ? adam_step(gates[m], g, mult, name)
                                                          : plain_sgd_step(gates[m], g, mult, name);
        } else {
          // Thresholds are inert; log the loss term with every gate on.
          g = threshold_gradient(mu_all, r_all, 0.0, 0.0, valid_all);
        }
        out.tau_trajectory[m].push_back(gates[m].tau);
        const double batch_sparsity = 1.0 - static_cast<double>(on) / static_cast<double>(n_valid);
        per_module.push_back({{"id", m},
                              {"layer", pt.layer},
                              {"site", to_string(pt.site)},
                              {"tau", gates[m].tau},
                              {"g_k", g},
                              {"batch_sparsity", batch_sparsity}});
      }
      json rec = {{"step", out.steps}, {"loss", pass.loss}, {"lr", c.optimizer.lr * mult}, {"per_module", per_module}};
      metrics << rec.dump() << '\n';
      out.final_train_loss = pass.loss;
    }
    if (log) *log << "finetune epoch " << ep + 1 << "/" << c.optimizer.epochs << " last loss " << out.final_train_loss
                  << "\n";
  }

  out.final_state.backbone = w;
  out.final_state.peft = peft;
  out.final_state.gates = gates;
  out.final_state.gating_enabled = c.ts.enabled;
  out.val = evaluate(out.final_state, val, c.optimizer.batch_size);
  out.backbone_digest_after = weights_digest(w);

  json mods = json::array();
  for (std::size_t m = 0; m < n_mod; ++m) {
    ModuleSummary s;
    s.point = peft.modules[m].point;
    s.sparsity = out.val.modules[m].sparsity();
    s.mean_r = out.val.modules[m].mean_r();
    s.tau_final = gates[m].tau;
    s.tau_std_last_half = tail_std(out.tau_trajectory[m]);
    out.modules.push_back(s);
    const auto& traj = out.tau_trajectory[m];
    double tmin = 0.0, tmax = 0.0;
    if (!traj.empty()) {
      tmin = *std::min_element(traj.begin(), traj.end());
      tmax = *std::max_element(traj.begin(), traj.end());
    }
    mods.push_back({{"id", m},
                    {"layer", s.point.layer},
                    {"site", to_string(s.point.site)},
                    {"sparsity", s.sparsity},
                    {"mean_r", s.mean_r},
                    {"tau_final", s.tau_final},
                    {"tau_min", tmin},
                    {"tau_max", tmax},
                    {"tau_std_last_half", s.tau_std_last_half}});
  }
  json summary = {{"summary", true},
                  {"steps", out.steps},
                  {"final_train_loss", out.final_train_loss},
                  {"val_accuracy", out.val.accuracy()},
                  {"val_loss", out.val.mean_loss},
                  {"mean_sparsity", out.val.mean_sparsity()},
                  {"trainable_params", out.trainable_params},
                  {"backbone_digest", std::to_string(out.backbone_digest_after)},
                  {"per_module", mods}};
  metrics << summary.dump() << '\n';
  out.metrics = metrics.str();

  if (out.backbone_digest_before != out.backbone_digest_after)
    throw ContractError("backbone weights changed during fine-tuning");

  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw ArtifactError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    out.metrics_path = out_dir / "metrics.jsonl";
    std::ofstream f(out.metrics_path, std::ios::binary);
    if (!f) throw ArtifactError("cannot write " + out.metrics_path.string());
    f << out.metrics;
    if (!f) throw ArtifactError("failed writing " + out.metrics_path.string());
    out.checkpoint_path = out_dir / "checkpoint.json";
    save_checkpoint(out.final_state, out.checkpoint_path);
  }
  return out;
}

}  // namespace tspeft
