#pragma once

// Module importance from token-level sparsity, and the selection
// experiments built on it.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tspeft/checkpoint.hpp"
#include "tspeft/config.hpp"
#include "tspeft/trainer.hpp"

namespace tspeft {

struct SparsityRow {
  AttachmentPoint point;
  double sparsity = 0.0;
  double mean_r = 0.0;
  double mean_delta_norm = 0.0;
  long tokens = 0;
};

struct SparsityTable {
  std::vector<SparsityRow> rows;  // in checkpoint module order
  double mean = 0.0;
  double std = 0.0;  // population
};

SparsityTable sparsity_table(const EvalResult& ev);
// Throws ContractError when the checkpoint carries no gated modules.
SparsityTable module_sparsity_table(const Checkpoint& ck, const Dataset& data, int batch_size);

// Columns: layer, site, sparsity_pct, mean_r, tokens; then mean and std
// footer rows (population std, in percent).
std::string to_csv(const SparsityTable& t);

struct SelectionStrategy {
  SelectionKind kind = SelectionKind::s_low;
  double percent = 0.5;
  std::uint64_t seed = 0;  // random only
};

struct Ranking {
  SelectionKind kind = SelectionKind::s_low;
  std::vector<AttachmentPoint> order;     // full ranking, most preferred first
  std::vector<AttachmentPoint> selected;  // prefix of order
  bool halve_rank = false;
};

// Number of modules kept: nearest whole count to percent * n, at least 1.
std::size_t selection_count(double percent, std::size_t n);

Ranking rank_modules(const SparsityTable& t, const SelectionStrategy& s);

struct RetrainResult {
  RunArtifacts run;
  std::vector<AttachmentPoint> attached;
  int rank = 0;
};

// Fresh plain-PEFT fine-tune (gating disabled) on the selected points, or on
// every point at half rank for half_rank.
RetrainResult select_and_retrain(const RunConfig& base, const BackboneWeights& w, const Dataset& train,
                                 const Dataset& val, const Ranking& selection,
                                 const std::filesystem::path& out_dir = {}, std::ostream* log = nullptr);

struct SweepRow {
  double percent = 0.0;
  std::uint64_t seed = 0;
  double val_metric = 0.0;
  std::size_t trainable_params = 0;
};

// One retrain per (percent, seed) on the prefix of an s_low ranking.
std::vector<SweepRow> sweep_percentages(const RunConfig& base, const BackboneWeights& w, const Dataset& train,
                                        const Dataset& val, const Ranking& ranking,
                                        const std::vector<double>& percents, const std::vector<std::uint64_t>& seeds,
                                        std::ostream* log = nullptr);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace tspeft
