#pragma once

// PEFT variants attached to a frozen projection `base = x W0` with W0 stored
// as [d_in x d_out]. Each variant provides a delta-forward M(x) computed for
// every row and a backward that only lets gradient through rows whose gate
// is on.

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tspeft/numkernel.hpp"

namespace tspeft {

enum class Site : int { q_proj = 0, k_proj, v_proj, o_proj, ffn_up, ffn_down };
inline constexpr int kNumSites = 6;

std::string to_string(Site s);
Site parse_site(const std::string& name);

struct AttachmentPoint {
  int layer = 0;
  Site site = Site::q_proj;

  friend auto operator<=>(const AttachmentPoint&, const AttachmentPoint&) = default;
};

std::string to_string(const AttachmentPoint& p);

// M(x) = scale * B (A x)
struct LoraParams {
  Matrix A;  // [rank x d_in]
  Matrix B;  // [d_out x rank]
  double scale = 0.5;

  std::size_t rank() const noexcept { return A.rows(); }
};

// Merged weight V = W0 + scale * (B A)^T; output column j is
// magnitude_j * V[:, j] / |V[:, j]|; M(x) = x (W' - W0).
struct DoraLiteParams {
  Matrix A;
  Matrix B;
  Matrix magnitude;  // [1 x d_out]
  double scale = 0.5;

  std::size_t rank() const noexcept { return A.rows(); }
};

// M(x) = W_up relu(W_down x)
struct AdapterParams {
  Matrix down;  // [bottleneck x d_in]
  Matrix up;    // [d_out x bottleneck]

  std::size_t bottleneck() const noexcept { return down.rows(); }
};

using PeftParams = std::variant<LoraParams, DoraLiteParams, AdapterParams>;

struct LoraCache {
  Matrix xa;  // x A^T
};
struct DoraCache {
  Matrix merged;       // V
  std::vector<double> norms;
  Matrix shift;        // W' - W0
};
struct AdapterCache {
  Matrix pre;
  Matrix act;
};
using PeftCache = std::variant<std::monostate, LoraCache, DoraCache, AdapterCache>;

LoraParams make_lora(std::size_t d_in, std::size_t d_out, std::size_t rank, double scale, Rng& rng);
DoraLiteParams make_dora(const Matrix& w0, std::size_t rank, double scale, Rng& rng);
AdapterParams make_adapter(std::size_t d_in, std::size_t d_out, std::size_t bottleneck, Rng& rng);

Matrix lora_delta_forward(const LoraParams& p, const Matrix& x, LoraCache* cache = nullptr);
Matrix dora_delta_forward(const DoraLiteParams& p, const Matrix& w0, const Matrix& x, DoraCache* cache = nullptr);
Matrix adapter_delta_forward(const AdapterParams& p, const Matrix& x, AdapterCache* cache = nullptr);

// Gradients are returned in parameter order (see parameter_names). When
// grad_x is non-null, the input gradient through M is accumulated into it.
std::vector<Matrix> lora_delta_backward(const LoraParams& p, const Matrix& x, const LoraCache& cache,
                                        const Matrix& grad_h, std::span<const std::uint8_t> gate,
                                        Matrix* grad_x = nullptr);
std::vector<Matrix> dora_delta_backward(const DoraLiteParams& p, const Matrix& x, const DoraCache& cache,
                                        const Matrix& grad_h, std::span<const std::uint8_t> gate,
                                        Matrix* grad_x = nullptr);
std::vector<Matrix> adapter_delta_backward(const AdapterParams& p, const Matrix& x, const AdapterCache& cache,
                                           const Matrix& grad_h, std::span<const std::uint8_t> gate,
                                           Matrix* grad_x = nullptr);

// Variant dispatch.
Matrix delta_forward(const PeftParams& p, const Matrix& w0, const Matrix& x, PeftCache* cache = nullptr);
std::vector<Matrix> delta_backward(const PeftParams& p, const Matrix& w0, const Matrix& x, const PeftCache& cache,
                                   const Matrix& grad_h, std::span<const std::uint8_t> gate,
                                   Matrix* grad_x = nullptr);

std::vector<Matrix*> parameters(PeftParams& p);
std::vector<const Matrix*> parameters(const PeftParams& p);
std::vector<std::string> parameter_names(const PeftParams& p);
std::size_t parameter_count(const PeftParams& p);

// W0 + scale * (B A)^T, the weight that reproduces LoRA's ungated output.
Matrix merge_lora(const LoraParams& p, const Matrix& w0);

struct PeftModule {
  AttachmentPoint point;
  PeftParams params;
};

struct PeftSet {
  // Tag recorded in checkpoints: lora, dora, adapter or adalora.
  std::string variant = "lora";
  std::vector<PeftModule> modules;
  // Bumped whenever parameters change; caches remember the value they saw.
  std::uint64_t version = 0;

  std::size_t trainable_parameters() const;
};

}  // namespace tspeft
