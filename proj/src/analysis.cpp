#include "tspeft/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "tspeft/errors.hpp"

namespace tspeft {

SparsityTable sparsity_table(const EvalResult& ev) {
  SparsityTable t;
  for (const auto& m : ev.modules)
    t.rows.push_back({m.point, m.sparsity(), m.mean_r(), m.mean_delta_norm(), m.valid});
  if (t.rows.empty()) return t;
  const double n = static_cast<double>(t.rows.size());
  for (const auto& r : t.rows) t.mean += r.sparsity;
  t.mean /= n;
  double var = 0.0;
  for (const auto& r : t.rows) var += (r.sparsity - t.mean) * (r.sparsity - t.mean);
  t.std = std::sqrt(var / n);
  return t;
}

SparsityTable module_sparsity_table(const Checkpoint& ck, const Dataset& data, int batch_size) {
  if (ck.peft.modules.empty() || !ck.gating_enabled)
    throw ContractError("sparsity table needs a checkpoint from a token-selective run");
  return sparsity_table(evaluate(ck, data, batch_size));
}

std::string to_csv(const SparsityTable& t) {
  std::string out = "layer,site,sparsity_pct,mean_r,tokens\n";
  char buf[160];
  for (const auto& r : t.rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.4f,%.6g,%ld\n", r.point.layer, to_string(r.point.site).c_str(),
                  100.0 * r.sparsity, r.mean_r, r.tokens);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,,%.4f,,\nstd,,%.4f,,\n", 100.0 * t.mean, 100.0 * t.std);
  out += buf;
  return out;
}

std::size_t selection_count(double percent, std::size_t n) {
  if (!(percent > 0.0 && percent <= 1.0)) throw SelectionError("selection percent must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::lround(percent * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

Ranking rank_modules(const SparsityTable& t, const SelectionStrategy& s) {
  if (t.rows.size() < 2) throw SelectionError("ranking needs at least two modules");
  Ranking out;
  out.kind = s.kind;
  std::vector<SparsityRow> rows = t.rows;
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.point < b.point; });

  auto by = [&](auto key, bool ascending) {
    std::stable_sort(rows.begin(), rows.end(), [&](const auto& a, const auto& b) {
      return ascending ? key(a) < key(b) : key(a) > key(b);
    });
  };
  switch (s.kind) {
    case SelectionKind::s_low: by([](const SparsityRow& r) { return r.sparsity; }, true); break;
    case SelectionKind::s_high: by([](const SparsityRow& r) { return r.sparsity; }, false); break;
    case SelectionKind::norm_relative: by([](const SparsityRow& r) { return r.mean_r; }, false); break;
    case SelectionKind::norm_abs: by([](const SparsityRow& r) { return r.mean_delta_norm; }, false); break;
    case SelectionKind::random: {
      Rng rng(s.seed);
      rng.shuffle(rows);
      break;
    }
    case SelectionKind::half_rank:
      if (s.percent != 1.0) throw SelectionError("half_rank keeps every module; percent must be 1");
      out.halve_rank = true;
      break;
  }
  for (const auto& r : rows) out.order.push_back(r.point);
  const std::size_t k = selection_count(s.percent, rows.size());
  out.selected.assign(out.order.begin(), out.order.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

RetrainResult select_and_retrain(const RunConfig& base, const BackboneWeights& w, const Dataset& train,
                                 const Dataset& val, const Ranking& selection, const std::filesystem::path& out_dir,
                                 std::ostream* log) {
  if (selection.selected.empty()) throw SelectionError("empty module selection");
  RunConfig c = base;
  c.ts.enabled = false;
  c.peft.attach = selection.selected;
  // Keep the attachment order independent of the ranking order.
  std::sort(c.peft.attach.begin(), c.peft.attach.end());
  if (selection.halve_rank) {
    c.peft.rank = std::max(1, c.peft.rank / 2);
    c.peft.bottleneck = std::max(1, c.peft.bottleneck / 2);
    for (auto& [name, r] : c.peft.rank_overrides) r = std::max(1, r / 2);
  }
  if (log) *log << "retrain " << to_string(selection.kind) << " on " << c.peft.attach.size() << " modules, rank "
                << c.peft.rank << "\n";
  RetrainResult out;
  out.run = finetune(c, w, train, val, out_dir, log);
  out.attached = c.peft.attach;
  out.rank = c.peft.rank;
  return out;
}

std::vector<SweepRow> sweep_percentages(const RunConfig& base, const BackboneWeights& w, const Dataset& train,
                                        const Dataset& val, const Ranking& ranking,
                                        const std::vector<double>& percents, const std::vector<std::uint64_t>& seeds,
                                        std::ostream* log) {
  if (ranking.kind != SelectionKind::s_low) throw SelectionError("percentage sweeps use an s_low ranking");
  std::vector<double> ps = percents;
  std::sort(ps.begin(), ps.end());
  std::vector<SweepRow> rows;
  for (double p : ps) {
    Ranking sel = ranking;
    const std::size_t k = selection_count(p, ranking.order.size());
    sel.selected.assign(ranking.order.begin(), ranking.order.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::uint64_t seed : seeds) {
      RunConfig c = base;
      c.seed = seed;
      const auto r = select_and_retrain(c, w, train, val, sel, {}, log);
      rows.push_back({p, seed, r.run.val.accuracy(), r.run.trainable_params});
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "percent,seed,val_metric,trainable_params\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.4f,%llu,%.6f,%zu\n", r.percent, static_cast<unsigned long long>(r.seed),
                  r.val_metric, r.trainable_params);
    out += buf;
  }
  return out;
}

}  // namespace tspeft
