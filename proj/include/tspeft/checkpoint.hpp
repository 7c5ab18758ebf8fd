#pragma once

// Single-document JSON checkpoints. Floats are written as shortest
// round-trip decimals, which parse back to the identical bit pattern;
// non-finite values are refused on both sides.

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "tspeft/backbone.hpp"
#include "tspeft/peft.hpp"
#include "tspeft/tau_opt.hpp"

namespace tspeft {

inline constexpr int kCheckpointSchema = 1;

struct Checkpoint {
  BackboneWeights backbone;
  PeftSet peft;                  // empty for a pretrained backbone
  std::vector<GateState> gates;  // one per PEFT module
  bool gating_enabled = true;
};

nlohmann::json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j, const std::string& what);

}  // namespace tspeft
