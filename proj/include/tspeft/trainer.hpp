#pragma once

// Pretraining, token-selective fine-tuning and evaluation.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspeft/backbone.hpp"
#include "tspeft/checkpoint.hpp"
#include "tspeft/config.hpp"
#include "tspeft/tasks.hpp"

namespace tspeft {

struct RunData {
  Dataset pretrain_train, pretrain_val;  // base task
  Dataset train, val;                    // shifted task
};

// Base-task splits come from task.seed; the fine-tuning splits come from a
// derived seed and are then shifted by task.shift_rule.
RunData make_run_data(const RunConfig& c);

struct PretrainResult {
  BackboneWeights weights;
  double final_loss = 0.0;
  double val_accuracy = 0.0;
  long steps = 0;
};

PretrainResult pretrain(const RunConfig& c, const Dataset& train, const Dataset& val, std::ostream* log = nullptr);

// Loads backbone.checkpoint when configured, otherwise pretrains.
BackboneWeights obtain_backbone(const RunConfig& c, const RunData& data, std::ostream* log = nullptr);

// Attaches freshly initialized modules at c.peft.attach; PEFT initialization
// draws from a stream derived from `seed`.
PeftSet build_peft(const RunConfig& c, const BackboneWeights& w, std::uint64_t seed);

struct ModuleEval {
  AttachmentPoint point;
  long on = 0;
  long valid = 0;
  double sum_r = 0.0;   // over finite r only
  long finite_r = 0;
  double sum_delta_norm = 0.0;

  double sparsity() const;
  double mean_r() const;
  double mean_delta_norm() const;
};

struct EvalResult {
  long correct = 0;
  long total = 0;
  double mean_loss = 0.0;
  std::vector<ModuleEval> modules;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  double mean_sparsity() const;
};

// Gating uses the frozen thresholds in `gates`. When `mask_dump` is set,
// writes one line per (sequence, module): "<batch> <seq> <module> <bits>"
// where bits covers the valid tokens in order.
EvalResult evaluate(const BackboneWeights& w, const PeftSet& peft, const std::vector<GateState>& gates,
                    bool gating_enabled, const Dataset& data, int batch_size, std::ostream* mask_dump = nullptr);

EvalResult evaluate(const Checkpoint& ck, const Dataset& data, int batch_size, std::ostream* mask_dump = nullptr);

nlohmann::json to_json(const EvalResult& r);

struct ModuleSummary {
  AttachmentPoint point;
  double sparsity = 0.0;
  double mean_r = 0.0;
  double tau_final = 0.0;
  double tau_std_last_half = 0.0;
};

struct RunArtifacts {
  std::filesystem::path checkpoint_path;  // empty when nothing was written
  std::filesystem::path metrics_path;
  std::string metrics;  // the JSONL stream, also kept in memory
  Checkpoint final_state;
  EvalResult val;
  double final_train_loss = 0.0;
  long steps = 0;
  std::size_t trainable_params = 0;
  std::uint64_t backbone_digest_before = 0;
  std::uint64_t backbone_digest_after = 0;
  std::vector<std::vector<double>> tau_trajectory;  // [module][step]
  std::vector<ModuleSummary> modules;

  double mean_sparsity() const;
};

// Population standard deviation of the final half of a trajectory.
double tail_std(const std::vector<double>& xs);

// Runs the fine-tuning loop. Files (metrics.jsonl, checkpoint.json) are
// written only when out_dir is non-empty.
RunArtifacts finetune(const RunConfig& c, const BackboneWeights& w, const Dataset& train, const Dataset& val,
                      const std::filesystem::path& out_dir = {}, std::ostream* log = nullptr);

}  // namespace tspeft
