#pragma once

// Run configuration: a JSON document with a fixed schema. Unknown keys and
// out-of-range values raise ConfigError before any computation starts.
// The full schema is documented in README.md.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspeft/backbone.hpp"
#include "tspeft/optim.hpp"
#include "tspeft/peft.hpp"
#include "tspeft/tasks.hpp"
#include "tspeft/tau_opt.hpp"

namespace tspeft {

struct TaskConfig {
  std::uint64_t seed = 11;
  int n_train = 4096;
  int n_val = 1024;
  int seq_len = 32;
  int vocab_size = 64;
  int num_classes = 4;
  int k_signal = 4;
  int min_len = 32;
  ShiftRule shift_rule = ShiftRule::permute_classes;
  std::uint64_t shift_seed = 5;
};

struct BackboneConfig {
  int hidden = 32;
  int ffn = 64;
  int layers = 2;
  // Optional pretrained weights; when empty, pretraining runs in-process.
  std::string checkpoint;
};

struct PretrainConfig {
  std::uint64_t seed = 0;
  int epochs = 1;
  double lr = 3e-3;
  int batch_size = 32;
};

enum class PeftVariant { lora, dora, adapter, adalora };
std::string to_string(PeftVariant v);
PeftVariant parse_peft_variant(const std::string& name);

// Default attachment set: q, k, v, up and down projections of every layer.
std::vector<AttachmentPoint> default_attachments(int layers);

struct PeftConfig {
  PeftVariant variant = PeftVariant::lora;
  int rank = 8;
  double scale = 0.5;
  int bottleneck = 8;
  std::vector<AttachmentPoint> attach = default_attachments(2);
  std::map<std::string, int> rank_overrides;  // "L0.q_proj" -> rank (adalora)
};

struct OptimizerConfig {
  double lr = 2e-3;
  double weight_decay = 0.0;
  int batch_size = 32;
  int epochs = 3;
  Schedule scheduler = Schedule::linear;
};

struct TsConfig {
  bool enabled = true;
  GateHyper hyper;
};

enum class TauOptimizer { adam, plain_sgd };
std::string to_string(TauOptimizer t);

enum class SelectionKind { s_low, s_high, norm_relative, norm_abs, random, half_rank };
std::string to_string(SelectionKind k);
SelectionKind parse_selection_kind(const std::string& name);

struct AnalysisConfig {
  SelectionKind strategy = SelectionKind::s_low;
  double percent = 0.5;
  std::vector<double> percents = {0.2, 0.5, 0.8, 1.0};
  std::uint64_t random_seed = 0;
};

struct OutputConfig {
  std::string dir = "runs/default";
  bool dump_masks = false;
};

struct RunConfig {
  std::uint64_t seed = 0;
  TaskConfig task;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  PeftConfig peft;
  OptimizerConfig optimizer;
  TsConfig ts;
  TauOptimizer tau_optimizer = TauOptimizer::adam;
  AnalysisConfig analysis;
  OutputConfig output;

  BackboneShape backbone_shape() const;
  TaskParams task_params() const;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
void validate(const RunConfig& c);

// Fully resolved configuration, every field explicit.
nlohmann::json to_json(const RunConfig& c);

}  // namespace tspeft
