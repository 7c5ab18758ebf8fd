#include "tspeft/peft.hpp"

#include <cmath>

#include "tspeft/errors.hpp"

namespace tspeft {

namespace {

constexpr const char* kSiteNames[kNumSites] = {"q_proj", "k_proj", "v_proj", "o_proj", "ffn_up", "ffn_down"};

Matrix gated_rows(const Matrix& grad_h, std::span<const std::uint8_t> gate) {
  if (gate.size() != grad_h.rows()) throw ShapeError("gate length != grad_h rows");
  Matrix g = grad_h;
  for (std::size_t i = 0; i < gate.size(); ++i)
    if (!gate[i])
      for (double& v : g.row(i)) v = 0.0;
  return g;
}

void require_input(const Matrix& x, std::size_t d_in, const char* who) {
  if (x.cols() != d_in)
    throw ShapeError(std::string(who) + ": input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(d_in));
}

InitScheme fan_in_uniform(std::size_t d_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  return UniformInit{-bound, bound};
}

}  // namespace

std::string to_string(Site s) { return kSiteNames[static_cast<int>(s)]; }

Site parse_site(const std::string& name) {
  for (int i = 0; i < kNumSites; ++i)
    if (name == kSiteNames[i]) return static_cast<Site>(i);
  throw ConfigError("unknown site '" + name + "'");
}

std::string to_string(const AttachmentPoint& p) { return "L" + std::to_string(p.layer) + "." + to_string(p.site); }

LoraParams make_lora(std::size_t d_in, std::size_t d_out, std::size_t rank, double scale, Rng& rng) {
  if (rank == 0) throw ConfigError("lora rank must be >= 1");
  LoraParams p;
  p.A = seeded_init(rank, d_in, rng, fan_in_uniform(d_in));
  p.B = Matrix(d_out, rank);
  p.scale = scale;
  return p;
}

DoraLiteParams make_dora(const Matrix& w0, std::size_t rank, double scale, Rng& rng) {
  if (rank == 0) throw ConfigError("dora rank must be >= 1");
  DoraLiteParams p;
  p.A = seeded_init(rank, w0.rows(), rng, fan_in_uniform(w0.rows()));
  p.B = Matrix(w0.cols(), rank);
  p.magnitude = Matrix(1, w0.cols(), column_l2_norms(w0));
  p.scale = scale;
  return p;
}

AdapterParams make_adapter(std::size_t d_in, std::size_t d_out, std::size_t bottleneck, Rng& rng) {
  if (bottleneck == 0) throw ConfigError("adapter bottleneck must be >= 1");
  AdapterParams p;
  p.down = seeded_init(bottleneck, d_in, rng, fan_in_uniform(d_in));
  p.up = Matrix(d_out, bottleneck);
  return p;
}

Matrix lora_delta_forward(const LoraParams& p, const Matrix& x, LoraCache* cache) {
  require_input(x, p.A.cols(), "lora");
  if (p.B.cols() != p.A.rows()) throw ShapeError("lora: B columns != rank");
  Matrix xa = matmul_bt(x, p.A);
  Matrix delta = matmul_bt(xa, p.B);
  for (double& v : delta.data()) v *= p.scale;
  if (cache) cache->xa = std::move(xa);
  return delta;
}

std::vector<Matrix> lora_delta_backward(const LoraParams& p, const Matrix& x, const LoraCache& cache,
                                        const Matrix& grad_h, std::span<const std::uint8_t> gate, Matrix* grad_x) {
  if (cache.xa.rows() != x.rows() || cache.xa.cols() != p.rank())
    throw ContractError("lora backward: cache does not match the forward input");
  if (grad_h.rows() != x.rows() || grad_h.cols() != p.B.rows()) throw ShapeError("lora backward: grad_h shape");
  const Matrix g = gated_rows(grad_h, gate);
  Matrix dB = matmul_at(g, cache.xa);
  for (double& v : dB.data()) v *= p.scale;
  Matrix dxa = matmul(g, p.B);
  for (double& v : dxa.data()) v *= p.scale;
  Matrix dA = matmul_at(dxa, x);
  if (grad_x) add_inplace(*grad_x, matmul(dxa, p.A));
  return {std::move(dA), std::move(dB)};
}

Matrix dora_delta_forward(const DoraLiteParams& p, const Matrix& w0, const Matrix& x, DoraCache* cache) {
  require_input(x, w0.rows(), "dora");
  if (p.A.cols() != w0.rows() || p.B.rows() != w0.cols() || p.B.cols() != p.A.rows() ||
      p.magnitude.cols() != w0.cols())
    throw ShapeError("dora: parameter shapes do not match W0");
  Matrix merged = w0;
  axpy_inplace(merged, p.scale, matmul_at(p.A, p.B.transposed()));
  auto norms = column_l2_norms(merged);
  Matrix shift(w0.rows(), w0.cols());
  for (std::size_t j = 0; j < norms.size(); ++j) {
    if (norms[j] == 0.0) throw NumericalError("dora: merged column " + std::to_string(j) + " has zero norm");
    const double c = p.magnitude(0, j) / norms[j];
    for (std::size_t a = 0; a < w0.rows(); ++a) shift(a, j) = c * merged(a, j) - w0(a, j);
  }
  Matrix delta = matmul(x, shift);
  if (cache) {
    cache->merged = std::move(merged);
    cache->norms = std::move(norms);
    cache->shift = std::move(shift);
  }
  return delta;
}

std::vector<Matrix> dora_delta_backward(const DoraLiteParams& p, const Matrix& x, const DoraCache& cache,
                                        const Matrix& grad_h, std::span<const std::uint8_t> gate, Matrix* grad_x) {
  if (cache.shift.rows() != x.cols() || cache.norms.size() != p.magnitude.cols())
    throw ContractError("dora backward: cache does not match the forward input");
  if (grad_h.rows() != x.rows() || grad_h.cols() != cache.shift.cols()) throw ShapeError("dora backward: grad_h shape");
  const Matrix g = gated_rows(grad_h, gate);
  const Matrix gw = matmul_at(x, g);  // dL/dW'
  if (grad_x) add_inplace(*grad_x, matmul_bt(g, cache.shift));

  const std::size_t d_in = gw.rows(), d_out = gw.cols();
  Matrix dmag(1, d_out);
  Matrix dv(d_in, d_out);
  for (std::size_t j = 0; j < d_out; ++j) {
    const double n = cache.norms[j];
    double vg = 0.0;
    for (std::size_t a = 0; a < d_in; ++a) vg += cache.merged(a, j) * gw(a, j);
    dmag(0, j) = vg / n;
    const double c = p.magnitude(0, j) / n;
    const double proj = vg / (n * n);
    for (std::size_t a = 0; a < d_in; ++a) dv(a, j) = c * (gw(a, j) - proj * cache.merged(a, j));
  }
  // V = W0 + scale * A^T B^T
  Matrix dA = matmul(dv, p.B).transposed();
  for (double& v : dA.data()) v *= p.scale;
  Matrix dB = matmul_at(dv, p.A.transposed());
  for (double& v : dB.data()) v *= p.scale;
  return {std::move(dA), std::move(dB), std::move(dmag)};
}

Matrix adapter_delta_forward(const AdapterParams& p, const Matrix& x, AdapterCache* cache) {
  require_input(x, p.down.cols(), "adapter");
  if (p.up.cols() != p.down.rows()) throw ShapeError("adapter: up columns != bottleneck");
  Matrix pre = matmul_bt(x, p.down);
  Matrix act = pre;
  for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
  Matrix delta = matmul_bt(act, p.up);
  if (cache) {
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return delta;
}

std::vector<Matrix> adapter_delta_backward(const AdapterParams& p, const Matrix& x, const AdapterCache& cache,
                                           const Matrix& grad_h, std::span<const std::uint8_t> gate,
                                           Matrix* grad_x) {
  if (cache.pre.rows() != x.rows() || cache.pre.cols() != p.bottleneck())
    throw ContractError("adapter backward: cache does not match the forward input");
  if (grad_h.rows() != x.rows() || grad_h.cols() != p.up.rows()) throw ShapeError("adapter backward: grad_h shape");
  const Matrix g = gated_rows(grad_h, gate);
  Matrix dup = matmul_at(g, cache.act);
  Matrix dpre = matmul(g, p.up);
  for (std::size_t i = 0; i < dpre.size(); ++i)
    if (!(cache.pre.data()[i] > 0.0)) dpre.data()[i] = 0.0;
  Matrix ddown = matmul_at(dpre, x);
  if (grad_x) add_inplace(*grad_x, matmul(dpre, p.down));
  return {std::move(ddown), std::move(dup)};
}

Matrix delta_forward(const PeftParams& p, const Matrix& w0, const Matrix& x, PeftCache* cache) {
  return std::visit(
      [&](const auto& params) -> Matrix {
        using T = std::decay_t<decltype(params)>;
        if constexpr (std::is_same_v<T, LoraParams>) {
          if (!cache) return lora_delta_forward(params, x);
          LoraCache c;
          Matrix d = lora_delta_forward(params, x, &c);
          *cache = std::move(c);
          return d;
        } else if constexpr (std::is_same_v<T, DoraLiteParams>) {
          if (!cache) return dora_delta_forward(params, w0, x);
          DoraCache c;
          Matrix d = dora_delta_forward(params, w0, x, &c);
          *cache = std::move(c);
          return d;
        } else {
          if (!cache) return adapter_delta_forward(params, x);
          AdapterCache c;
          Matrix d = adapter_delta_forward(params, x, &c);
          *cache = std::move(c);
          return d;
        }
      },
      p);
}

std::vector<Matrix> delta_backward(const PeftParams& p, const Matrix& /*w0*/, const Matrix& x,
                                   const PeftCache& cache, const Matrix& grad_h, std::span<const std::uint8_t> gate,
                                   Matrix* grad_x) {
  return std::visit(
      [&](const auto& params) -> std::vector<Matrix> {
        using T = std::decay_t<decltype(params)>;
        if constexpr (std::is_same_v<T, LoraParams>) {
          const auto* c = std::get_if<LoraCache>(&cache);
          if (!c) throw ContractError("backward: cache was not produced by a LoRA forward");
          return lora_delta_backward(params, x, *c, grad_h, gate, grad_x);
        } else if constexpr (std::is_same_v<T, DoraLiteParams>) {
          const auto* c = std::get_if<DoraCache>(&cache);
          if (!c) throw ContractError("backward: cache was not produced by a DoRA forward");
          return dora_delta_backward(params, x, *c, grad_h, gate, grad_x);
        } else {
          const auto* c = std::get_if<AdapterCache>(&cache);
          if (!c) throw ContractError("backward: cache was not produced by an adapter forward");
          return adapter_delta_backward(params, x, *c, grad_h, gate, grad_x);
        }
      },
      p);
}

std::vector<Matrix*> parameters(PeftParams& p) {
  return std::visit(
      [](auto& q) -> std::vector<Matrix*> {
        using T = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<T, LoraParams>) return {&q.A, &q.B};
        else if constexpr (std::is_same_v<T, DoraLiteParams>) return {&q.A, &q.B, &q.magnitude};
        else return {&q.down, &q.up};
      },
      p);
}

std::vector<const Matrix*> parameters(const PeftParams& p) {
  auto mut = parameters(const_cast<PeftParams&>(p));
  return {mut.begin(), mut.end()};
}

std::vector<std::string> parameter_names(const PeftParams& p) {
  return std::visit(
      [](const auto& q) -> std::vector<std::string> {
        using T = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<T, LoraParams>) return {"A", "B"};
        else if constexpr (std::is_same_v<T, DoraLiteParams>) return {"A", "B", "magnitude"};
        else return {"down", "up"};
      },
      p);
}

std::size_t parameter_count(const PeftParams& p) {
  std::size_t n = 0;
  for (const Matrix* m : parameters(p)) n += m->size();
  return n;
}

Matrix merge_lora(const LoraParams& p, const Matrix& w0) {
  Matrix merged = w0;
  axpy_inplace(merged, p.scale, matmul_at(p.A, p.B.transposed()));
  return merged;
}

std::size_t PeftSet::trainable_parameters() const {
  std::size_t n = 0;
  for (const auto& m : modules) n += parameter_count(m.params);
  return n;
}

}  // namespace tspeft
