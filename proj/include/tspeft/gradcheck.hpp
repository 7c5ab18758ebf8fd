#pragma once

// Finite-difference verification of the analytic PEFT gradients, the token
// influences and the threshold gradient on a small random instance.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspeft/config.hpp"

namespace tspeft {

struct ParamCheck {
  std::string module;  // "L0.q_proj"
  std::string param;   // "A", "B", ...
  double max_rel_err = 0.0;
  double analytic_max_abs = 0.0;
};

struct GradcheckReport {
  std::uint64_t seed = 0;
  std::string variant;
  std::vector<ParamCheck> params;
  double max_param_err = 0.0;
  double mu_max_rel_err = 0.0;
  bool gk_exact = true;
  double tolerance = 1e-4;
  std::vector<std::string> failures;

  bool pass() const { return failures.empty(); }
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  int batch = 3;
  // Zero-initialized PEFT parameters (as built) instead of randomized ones.
  bool zero_init = false;
};

// Requires seq_len <= 8 and hidden <= 16. Builds a random backbone and a
// random PEFT state from `seed`, places each module's threshold at the
// median of its r values so both gate states occur, then holds the gates
// fixed for all differences.
//
// Relative errors are per tensor: max|analytic - numeric| divided by the
// larger of the two tensors' max-abs entries. Token influences are compared
// relative to the module's largest |mu|.
GradcheckReport gradcheck(const RunConfig& c, std::uint64_t seed, const GradcheckOptions& opt = {});

nlohmann::json to_json(const GradcheckReport& r);

}  // namespace tspeft
