#include "tspeft/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tspeft/errors.hpp"

namespace tspeft {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const std::size_t t = x.rows(), h = x.cols();
  Matrix y(t, h);
  cache.xhat = Matrix(t, h);
  cache.rstd.assign(t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    auto xr = x.row(i);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = rstd;
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = (xr[j] - mean) * rstd;
      cache.xhat(i, j) = xh;
      y(i, j) = xh * gain(0, j) + bias(0, j);
    }
  }
  return y;
}

// Returns dL/dx; accumulates gain/bias gradients when the pointers are set.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache, Matrix* dgain,
                           Matrix* dbias) {
  const std::size_t t = dy.rows(), h = dy.cols();
  Matrix dx(t, h);
  std::vector<double> dxhat(h);
  for (std::size_t i = 0; i < t; ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      dxhat[j] = dy(i, j) * gain(0, j);
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * cache.xhat(i, j);
      if (dgain) (*dgain)(0, j) += dy(i, j) * cache.xhat(i, j);
      if (dbias) (*dbias)(0, j) += dy(i, j);
    }
    mean_d /= static_cast<double>(h);
    mean_dx /= static_cast<double>(h);
    for (std::size_t j = 0; j < h; ++j)
      dx(i, j) = cache.rstd[i] * (dxhat[j] - mean_d - cache.xhat(i, j) * mean_dx);
  }
  return dx;
}

struct SiteContext {
  const PeftSet& peft;
  std::span<const double> taus;
  const ForwardOptions& opt;
};

Matrix run_site(const Matrix& w0, const Matrix& x, int module, SiteCache& sc, const SiteContext& ctx) {
  sc.module = module;
  sc.input = x;
  sc.base = matmul(x, w0);
  if (module < 0) return sc.base;
  const auto& params = ctx.peft.modules[static_cast<std::size_t>(module)].params;
  sc.delta = delta_forward(params, w0, x, &sc.peft);
  sc.r = relative_magnitudes(sc.base, sc.delta);
  if (ctx.opt.fixed_masks) {
    sc.mask = (*ctx.opt.fixed_masks)[static_cast<std::size_t>(module)];
    if (sc.mask.size() != x.rows()) throw ShapeError("fixed mask length != sequence length");
  } else if (ctx.opt.gating_enabled) {
    sc.mask = gate(sc.r, ctx.taus[static_cast<std::size_t>(module)]);
  } else {
    sc.mask.assign(x.rows(), 1);
  }
  Matrix h = apply_gate(sc.base, sc.delta, sc.mask);
  if (ctx.opt.perturb && ctx.opt.perturb->module == module) {
    const auto tok = static_cast<std::size_t>(ctx.opt.perturb->token);
    auto hr = h.row(tok);
    auto dr = sc.delta.row(tok);
    for (std::size_t j = 0; j < hr.size(); ++j) hr[j] += ctx.opt.perturb->gamma * dr[j];
  }
  return h;
}

// dL/dx for a site, accumulating PEFT and backbone gradients.
Matrix site_backward(const Matrix& w0, SiteCache& sc, const Matrix& grad_h, const PeftSet& peft,
                     PeftGrads* peft_grads, Matrix* grad_w0) {
  Matrix dx = matmul_bt(grad_h, w0);
  if (grad_w0) matmul_at_accumulate(sc.input, grad_h, *grad_w0);
  if (sc.module >= 0) {
    sc.grad_h = grad_h;
    const auto m = static_cast<std::size_t>(sc.module);
    auto grads = delta_backward(peft.modules[m].params, w0, sc.input, sc.peft, grad_h, sc.mask, &dx);
    if (peft_grads) {
      auto& dst = (*peft_grads)[m];
      for (std::size_t p = 0; p < grads.size(); ++p) add_inplace(dst[p], grads[p]);
    }
  }
  return dx;
}

}  // namespace

void validate(const BackboneShape& s) {
  if (s.vocab_size < 2 || s.seq_len < 1 || s.hidden < 2 || s.ffn < 1 || s.layers < 1 || s.num_classes < 2)
    throw ConfigError("backbone: all dimensions must be positive (hidden >= 2, classes >= 2)");
}

const Matrix& LayerWeights::site(Site s) const {
  switch (s) {
    case Site::q_proj: return wq;
    case Site::k_proj: return wk;
    case Site::v_proj: return wv;
    case Site::o_proj: return wo;
    case Site::ffn_up: return w_up;
    case Site::ffn_down: return w_down;
  }
  throw ContractError("invalid site");
}

Matrix& LayerWeights::site(Site s) { return const_cast<Matrix&>(std::as_const(*this).site(s)); }

bool operator==(const BackboneWeights& a, const BackboneWeights& b) {
  if (!(a.shape == b.shape)) return false;
  auto pa = parameters(a);
  auto pb = parameters(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(*pa[i] == *pb[i])) return false;
  return true;
}

BackboneWeights init_backbone(const BackboneShape& s, std::uint64_t seed) {
  validate(s);
  Rng rng(seed);
  const auto H = static_cast<std::size_t>(s.hidden);
  const auto F = static_cast<std::size_t>(s.ffn);
  BackboneWeights w;
  w.shape = s;
  w.embed = seeded_init(static_cast<std::size_t>(s.vocab_size), H, rng, ScaledNormalInit{4.0});
  w.pos = seeded_init(static_cast<std::size_t>(s.seq_len), H, rng, ScaledNormalInit{100.0});
  for (int l = 0; l < s.layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = Matrix(1, H, 1.0);
    lw.ln1_bias = Matrix(1, H);
    lw.wq = seeded_init(H, H, rng, ScaledNormalInit{static_cast<double>(H)});
    lw.wk = seeded_init(H, H, rng, ScaledNormalInit{static_cast<double>(H)});
    lw.wv = seeded_init(H, H, rng, ScaledNormalInit{static_cast<double>(H)});
    lw.wo = seeded_init(H, H, rng, ScaledNormalInit{static_cast<double>(H)});
    lw.ln2_gain = Matrix(1, H, 1.0);
    lw.ln2_bias = Matrix(1, H);
    lw.w_up = seeded_init(H, F, rng, ScaledNormalInit{static_cast<double>(H)});
    lw.w_down = seeded_init(F, H, rng, ScaledNormalInit{static_cast<double>(F)});
    w.layers.push_back(std::move(lw));
  }
  w.final_gain = Matrix(1, H, 1.0);
  w.final_bias = Matrix(1, H);
  w.head = seeded_init(H, static_cast<std::size_t>(s.num_classes), rng, ScaledNormalInit{static_cast<double>(H)});
  w.head_bias = Matrix(1, static_cast<std::size_t>(s.num_classes));
  return w;
}

BackboneWeights zeros_like(const BackboneWeights& w) {
  BackboneWeights z = w;
  for (Matrix* m : parameters(z)) m->fill(0.0);
  return z;
}

std::vector<Matrix*> parameters(BackboneWeights& w) {
  std::vector<Matrix*> out = {&w.embed, &w.pos};
  for (auto& l : w.layers) {
    for (Matrix* m : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gain, &l.ln2_bias, &l.w_up,
                      &l.w_down})
      out.push_back(m);
  }
  for (Matrix* m : {&w.final_gain, &w.final_bias, &w.head, &w.head_bias}) out.push_back(m);
  return out;
}

std::vector<const Matrix*> parameters(const BackboneWeights& w) {
  auto mut = parameters(const_cast<BackboneWeights&>(w));
  return {mut.begin(), mut.end()};
}

std::vector<std::string> parameter_names(const BackboneWeights& w) {
  std::vector<std::string> out = {"embed", "pos"};
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* n : {"ln1_gain", "ln1_bias", "q_proj", "k_proj", "v_proj", "o_proj", "ln2_gain", "ln2_bias",
                          "ffn_up", "ffn_down"})
      out.push_back(p + n);
  }
  for (const char* n : {"final_gain", "final_bias", "head", "head_bias"}) out.emplace_back(n);
  return out;
}

std::uint64_t weights_digest(const BackboneWeights& w) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Matrix* m : parameters(w)) h = fnv1a(m->data(), h);
  return h;
}

std::pair<std::size_t, std::size_t> site_dims(const BackboneShape& s, Site site) {
  const auto H = static_cast<std::size_t>(s.hidden);
  const auto F = static_cast<std::size_t>(s.ffn);
  switch (site) {
    case Site::ffn_up: return {H, F};
    case Site::ffn_down: return {F, H};
    default: return {H, H};
  }
}

SiteIndex::SiteIndex(const BackboneShape& shape, const PeftSet& peft)
    : index_(static_cast<std::size_t>(shape.layers * kNumSites), -1) {
  for (std::size_t m = 0; m < peft.modules.size(); ++m) {
    const auto& p = peft.modules[m].point;
    if (p.layer < 0 || p.layer >= shape.layers)
      throw ShapeError("attachment point " + to_string(p) + " refers to a missing layer");
    auto& slot = index_[static_cast<std::size_t>(p.layer * kNumSites + static_cast<int>(p.site))];
    if (slot >= 0) throw ConfigError("two PEFT modules attached at " + to_string(p));
    slot = static_cast<int>(m);
  }
}

Mask valid_mask(const std::vector<int>& tokens) {
  Mask v(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) v[i] = tokens[i] != kPadToken ? 1 : 0;
  return v;
}

int argmax_row(const Matrix& logits) {
  auto r = logits.row(0);
  return static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
}

ForwardCache forward(const BackboneWeights& w, const PeftSet& peft, std::span<const double> taus,
                     const std::vector<int>& tokens, const ForwardOptions& opt) {
  const auto& s = w.shape;
  if (static_cast<int>(tokens.size()) != s.seq_len)
    throw ShapeError("forward: sequence length " + std::to_string(tokens.size()) + " != " + std::to_string(s.seq_len));
  if (taus.size() != peft.modules.size()) throw ShapeError("forward: one threshold per PEFT module required");
  const SiteIndex index(s, peft);
  const SiteContext ctx{peft, taus, opt};

  ForwardCache c;
  c.tokens = tokens;
  c.valid = valid_mask(tokens);
  c.n_valid = static_cast<int>(std::count(c.valid.begin(), c.valid.end(), 1));
  if (c.n_valid == 0) throw EmptyInputError("forward: sequence has no valid tokens");
  c.peft = &peft;
  c.peft_version = peft.version;

  const auto T = static_cast<std::size_t>(s.seq_len);
  const auto H = static_cast<std::size_t>(s.hidden);
  Matrix x(T, H);
  for (std::size_t i = 0; i < T; ++i) {
    const int tok = tokens[i];
    if (tok < 0 || tok >= s.vocab_size) throw ShapeError("forward: token id out of range");
    for (std::size_t j = 0; j < H; ++j) x(i, j) = w.embed(static_cast<std::size_t>(tok), j) + w.pos(i, j);
  }

  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(H));
  c.layers.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    auto& lc = c.layers[l];
    const int li = static_cast<int>(l);
    auto site = [&](Site st, const Matrix& in) {
      return run_site(lw.site(st), in, index.module(li, st), lc.sites[static_cast<int>(st)], ctx);
    };

    const Matrix a = layer_norm(x, lw.ln1_gain, lw.ln1_bias, lc.ln1);
    lc.q = site(Site::q_proj, a);
    lc.k = site(Site::k_proj, a);
    lc.v = site(Site::v_proj, a);

    Matrix scores = matmul_bt(lc.q, lc.k);
    lc.probs = Matrix(T, T);
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < T; ++j)
        if (c.valid[j]) mx = std::max(mx, scores(i, j) * inv_sqrt_h);
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        if (!c.valid[j]) continue;
        const double e = std::exp(scores(i, j) * inv_sqrt_h - mx);
        lc.probs(i, j) = e;
        z += e;
      }
      for (std::size_t j = 0; j < T; ++j) lc.probs(i, j) /= z;
    }
    const Matrix attended = matmul(lc.probs, lc.v);
    add_inplace(x, site(Site::o_proj, attended));

    const Matrix b = layer_norm(x, lw.ln2_gain, lw.ln2_bias, lc.ln2);
    lc.up_out = site(Site::ffn_up, b);
    Matrix z = lc.up_out;
    for (double& v : z.data()) v = gelu(v);
    add_inplace(x, site(Site::ffn_down, z));
  }

  const Matrix y = layer_norm(x, w.final_gain, w.final_bias, c.final_ln);
  c.pooled = Matrix(1, H);
  for (std::size_t i = 0; i < T; ++i) {
    if (!c.valid[i]) continue;
    for (std::size_t j = 0; j < H; ++j) c.pooled(0, j) += y(i, j);
  }
  for (double& v : c.pooled.data()) v /= static_cast<double>(c.n_valid);
  c.logits = matmul(c.pooled, w.head);
  add_inplace(c.logits, w.head_bias);
  return c;
}

PeftGrads zero_peft_grads(const PeftSet& peft) {
  PeftGrads g;
  for (const auto& m : peft.modules) {
    std::vector<Matrix> per;
    for (const Matrix* p : parameters(m.params)) per.emplace_back(p->rows(), p->cols());
    g.push_back(std::move(per));
  }
  return g;
}

void backward(const BackboneWeights& w, const PeftSet& peft, ForwardCache& c, const Matrix& grad_logits,
              PeftGrads* peft_grads, BackboneWeights* bg) {
  if (c.peft != &peft || c.peft_version != peft.version)
    throw ContractError("backward: cache is stale (PEFT parameters changed since forward)");
  if (c.layers.size() != w.layers.size()) throw ContractError("backward: cache does not match backbone");
  if (peft_grads && peft_grads->size() != peft.modules.size()) throw ShapeError("backward: gradient buffer size");
  const auto& s = w.shape;
  const auto T = static_cast<std::size_t>(s.seq_len);
  const auto H = static_cast<std::size_t>(s.hidden);
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(H));

  if (bg) {
    matmul_at_accumulate(c.pooled, grad_logits, bg->head);
    add_inplace(bg->head_bias, grad_logits);
  }
  const Matrix dpooled = matmul_bt(grad_logits, w.head);
  Matrix dy(T, H);
  const double inv_n = 1.0 / static_cast<double>(c.n_valid);
  for (std::size_t i = 0; i < T; ++i) {
    if (!c.valid[i]) continue;
    for (std::size_t j = 0; j < H; ++j) dy(i, j) = dpooled(0, j) * inv_n;
  }
  Matrix dx = layer_norm_backward(dy, w.final_gain, c.final_ln, bg ? &bg->final_gain : nullptr,
                                  bg ? &bg->final_bias : nullptr);

  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const auto& lw = w.layers[li];
    auto& lc = c.layers[li];
    LayerWeights* lg = bg ? &bg->layers[li] : nullptr;
    auto site_bwd = [&](Site st, const Matrix& grad_h) {
      return site_backward(lw.site(st), lc.sites[static_cast<int>(st)], grad_h, peft, peft_grads,
                           lg ? &lg->site(st) : nullptr);
    };

    // FFN block
    Matrix dz = site_bwd(Site::ffn_down, dx);
    for (std::size_t i = 0; i < dz.size(); ++i) dz.data()[i] *= gelu_grad(lc.up_out.data()[i]);
    const Matrix db = site_bwd(Site::ffn_up, dz);
    add_inplace(dx, layer_norm_backward(db, lw.ln2_gain, lc.ln2, lg ? &lg->ln2_gain : nullptr,
                                        lg ? &lg->ln2_bias : nullptr));

    // attention block
    const Matrix dattended = site_bwd(Site::o_proj, dx);
    const Matrix dprobs = matmul_bt(dattended, lc.v);
    const Matrix dv = matmul_at(lc.probs, dattended);
    Matrix dscores(T, T);
    for (std::size_t i = 0; i < T; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < T; ++j) dot += lc.probs(i, j) * dprobs(i, j);
      for (std::size_t j = 0; j < T; ++j) dscores(i, j) = lc.probs(i, j) * (dprobs(i, j) - dot) * inv_sqrt_h;
    }
    const Matrix dq = matmul(dscores, lc.k);
    const Matrix dk = matmul_at(dscores, lc.q);
    Matrix da = site_bwd(Site::q_proj, dq);
    add_inplace(da, site_bwd(Site::k_proj, dk));
    add_inplace(da, site_bwd(Site::v_proj, dv));
    add_inplace(dx, layer_norm_backward(da, lw.ln1_gain, lc.ln1, lg ? &lg->ln1_gain : nullptr,
                                        lg ? &lg->ln1_bias : nullptr));
  }

  if (bg) {
    for (std::size_t i = 0; i < T; ++i) {
      const auto tok = static_cast<std::size_t>(c.tokens[i]);
      for (std::size_t j = 0; j < H; ++j) {
        bg->embed(tok, j) += dx(i, j);
        bg->pos(i, j) += dx(i, j);
      }
    }
  }
}

LossResult cross_entropy(const Matrix& logits, int label, double weight) {
  auto row = logits.row(0);
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  LossResult r;
  r.loss = lse - row[static_cast<std::size_t>(label)];
  r.grad_logits = Matrix(1, row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double p = std::exp(row[j] - lse);
    r.grad_logits(0, j) = weight * (p - (static_cast<int>(j) == label ? 1.0 : 0.0));
  }
  return r;
}

BatchPass run_batch(const BackboneWeights& w, const PeftSet& peft, std::span<const double> taus,
                    std::span<const Example* const> batch, const ForwardOptions& opt, bool keep_caches,
                    PeftGrads* peft_grads, BackboneWeights* backbone_grads,
                    const std::vector<std::vector<Mask>>* batch_masks) {
  if (batch.empty()) throw EmptyInputError("run_batch: empty batch");
  if (batch_masks && batch_masks->size() != batch.size()) throw ShapeError("run_batch: one mask set per sequence");
  BatchPass out;
  const double weight = 1.0 / static_cast<double>(batch.size());
  const bool need_backward = peft_grads || backbone_grads;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ForwardOptions o = opt;
    if (batch_masks) o.fixed_masks = &(*batch_masks)[b];
    if (o.perturb && o.perturb->sequence != static_cast<int>(b)) o.perturb.reset();
    ForwardCache cache = forward(w, peft, taus, batch[b]->tokens, o);
    const auto ce = cross_entropy(cache.logits, batch[b]->label, weight);
    out.loss += weight * ce.loss;
    out.correct += argmax_row(cache.logits) == batch[b]->label ? 1 : 0;
    if (need_backward) backward(w, peft, cache, ce.grad_logits, peft_grads, backbone_grads);
    if (keep_caches) out.caches.push_back(std::move(cache));
  }
  return out;
}

}  // namespace tspeft
