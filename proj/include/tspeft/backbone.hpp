#pragma once

// Small pre-layer-norm transformer encoder with single-head attention and a
// mean-pooled linear classifier. Every projection is a site where a PEFT
// module can be attached; the forward pass gates each module's delta per
// token, and the backward pass returns PEFT gradients together with the
// upstream gradient at every gated site.
//
//   x0 = embed[tok] + pos
//   per layer:  a = LN1(x);  q,k,v = a Wq, a Wk, a Wv
//               x += softmax(q k^T / sqrt(H)) v Wo
//               x += gelu(LN2(x) Wup) Wdown
//   logits = mean_valid(LNf(x)) Whead + bhead

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tspeft/numkernel.hpp"
#include "tspeft/peft.hpp"
#include "tspeft/tasks.hpp"
#include "tspeft/tsgate.hpp"

namespace tspeft {

struct BackboneShape {
  int vocab_size = 64;
  int seq_len = 32;
  int hidden = 32;
  int ffn = 64;
  int layers = 2;
  int num_classes = 4;

  friend bool operator==(const BackboneShape&, const BackboneShape&) = default;
};

void validate(const BackboneShape& s);

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;
  Matrix ln2_gain, ln2_bias;
  Matrix w_up, w_down;

  const Matrix& site(Site s) const;
  Matrix& site(Site s);
};

struct BackboneWeights {
  BackboneShape shape;
  Matrix embed;  // [vocab x H]
  Matrix pos;    // [seq_len x H]
  std::vector<LayerWeights> layers;
  Matrix final_gain, final_bias;  // [1 x H]
  Matrix head;                    // [H x classes]
  Matrix head_bias;               // [1 x classes]

  friend bool operator==(const BackboneWeights& a, const BackboneWeights& b);
};

BackboneWeights init_backbone(const BackboneShape& shape, std::uint64_t seed);
BackboneWeights zeros_like(const BackboneWeights& w);

// Flattened views in a fixed order, with stable names for checkpoints.
std::vector<Matrix*> parameters(BackboneWeights& w);
std::vector<const Matrix*> parameters(const BackboneWeights& w);
std::vector<std::string> parameter_names(const BackboneWeights& w);

std::uint64_t weights_digest(const BackboneWeights& w);

std::pair<std::size_t, std::size_t> site_dims(const BackboneShape& s, Site site);

// Maps (layer, site) to a PeftSet module index; throws on an invalid or
// duplicated attachment point.
class SiteIndex {
 public:
  SiteIndex(const BackboneShape& shape, const PeftSet& peft);
  int module(int layer, Site site) const { return index_[static_cast<std::size_t>(layer * kNumSites + static_cast<int>(site))]; }

 private:
  std::vector<int> index_;
};

struct SiteCache {
  int module = -1;
  Matrix input;
  Matrix base;
  // Only populated when a module is attached.
  Matrix delta;
  std::vector<double> r;
  Mask mask;
  PeftCache peft;
  Matrix grad_h;  // filled by backward
};

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

struct LayerCache {
  LayerNormCache ln1;
  SiteCache sites[kNumSites];
  Matrix q, k, v;
  Matrix probs;
  LayerNormCache ln2;
  Matrix up_out;  // gelu input
};

struct ForwardCache {
  std::vector<int> tokens;
  Mask valid;
  int n_valid = 0;
  std::vector<LayerCache> layers;
  LayerNormCache final_ln;
  Matrix pooled;  // [1 x H]
  Matrix logits;  // [1 x classes]
  const PeftSet* peft = nullptr;
  std::uint64_t peft_version = 0;

  const SiteCache& site(int layer, Site s) const { return layers[static_cast<std::size_t>(layer)].sites[static_cast<int>(s)]; }
  SiteCache& site(int layer, Site s) { return layers[static_cast<std::size_t>(layer)].sites[static_cast<int>(s)]; }
};

struct Perturbation {
  int sequence = 0;  // batch position; ignored by single-sequence forward
  int module = 0;
  int token = 0;
  double gamma = 0.0;
};

struct ForwardOptions {
  bool gating_enabled = true;
  // Module-indexed masks that replace the threshold decision.
  const std::vector<Mask>* fixed_masks = nullptr;
  // h_i += gamma * delta_i at one (module, token); used by influence checks.
  std::optional<Perturbation> perturb;
};

// `taus` is indexed like peft.modules.
ForwardCache forward(const BackboneWeights& w, const PeftSet& peft, std::span<const double> taus,
                     const std::vector<int>& tokens, const ForwardOptions& opt = {});

using PeftGrads = std::vector<std::vector<Matrix>>;

PeftGrads zero_peft_grads(const PeftSet& peft);

// Fills site grad_h in `cache`, accumulates PEFT gradients into `peft_grads`
// and, when given, backbone gradients into `backbone_grads`.
void backward(const BackboneWeights& w, const PeftSet& peft, ForwardCache& cache, const Matrix& grad_logits,
              PeftGrads* peft_grads, BackboneWeights* backbone_grads = nullptr);

struct LossResult {
  double loss = 0.0;
  Matrix grad_logits;
};
LossResult cross_entropy(const Matrix& logits, int label, double weight);

// Mean cross-entropy over a batch. When `grads` is non-null, runs backward
// for every sequence; caches are kept in `caches` when non-null.
struct BatchPass {
  double loss = 0.0;
  int correct = 0;
  std::vector<ForwardCache> caches;
};
// `batch_masks`, when non-null, holds fixed masks per sequence and overrides
// opt.fixed_masks.
BatchPass run_batch(const BackboneWeights& w, const PeftSet& peft, std::span<const double> taus,
                    std::span<const Example* const> batch, const ForwardOptions& opt, bool keep_caches,
                    PeftGrads* peft_grads, BackboneWeights* backbone_grads,
                    const std::vector<std::vector<Mask>>* batch_masks = nullptr);

Mask valid_mask(const std::vector<int>& tokens);

int argmax_row(const Matrix& logits);

}  // namespace tspeft
