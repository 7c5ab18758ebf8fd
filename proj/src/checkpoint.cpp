#include "tspeft/checkpoint.hpp"

#include <cmath>
#include <fstream>

#include "tspeft/errors.hpp"

namespace tspeft {

using nlohmann::json;

namespace {

const json& field(const json& j, const char* key, const std::string& what) {
  if (!j.is_object() || !j.contains(key)) throw CheckpointError(what + ": missing field '" + key + "'");
  return j.at(key);
}

template <typename T>
T number(const json& j, const char* key, const std::string& what) {
  const json& v = field(j, key, what);
  if (!v.is_number()) throw CheckpointError(what + "." + key + ": expected a number");
  return v.get<T>();
}

json shape_to_json(const BackboneShape& s) {
  return {{"vocab_size", s.vocab_size}, {"seq_len", s.seq_len}, {"hidden", s.hidden},
          {"ffn", s.ffn},               {"layers", s.layers},   {"num_classes", s.num_classes}};
}

BackboneShape shape_from_json(const json& j) {
  BackboneShape s;
  s.vocab_size = number<int>(j, "vocab_size", "shape");
  s.seq_len = number<int>(j, "seq_len", "shape");
  s.hidden = number<int>(j, "hidden", "shape");
  s.ffn = number<int>(j, "ffn", "shape");
  s.layers = number<int>(j, "layers", "shape");
  s.num_classes = number<int>(j, "num_classes", "shape");
  try {
    validate(s);
  } catch (const Error& e) {
    throw CheckpointError(std::string("shape: ") + e.what());
  }
  return s;
}

json hyper_to_json(const GateHyper& h) {
  return {{"s", h.s},         {"lambda", h.lambda}, {"alpha", h.alpha},
          {"beta1", h.beta1}, {"beta2", h.beta2},   {"eps", h.eps}};
}

GateHyper hyper_from_json(const json& j) {
  GateHyper h;
  h.s = number<double>(j, "s", "hyper");
  h.lambda = number<double>(j, "lambda", "hyper");
  h.alpha = number<double>(j, "alpha", "hyper");
  h.beta1 = number<double>(j, "beta1", "hyper");
  h.beta2 = number<double>(j, "beta2", "hyper");
  h.eps = number<double>(j, "eps", "hyper");
  return h;
}

void check_shape(const Matrix& got, std::size_t rows, std::size_t cols, const std::string& what) {
  if (got.rows() != rows || got.cols() != cols)
    throw CheckpointError(what + ": shape " + std::to_string(got.rows()) + "x" + std::to_string(got.cols()) +
                          " does not match the expected " + std::to_string(rows) + "x" + std::to_string(cols));
}

double finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw CheckpointError("refusing to serialize a non-finite " + what);
  return v;
}

}  // namespace

json matrix_to_json(const Matrix& m) {
  for (double v : m.data())
    if (!std::isfinite(v)) throw CheckpointError("refusing to serialize a non-finite value");
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

Matrix matrix_from_json(const json& j, const std::string& what) {
  const auto rows = number<std::size_t>(j, "rows", what);
  const auto cols = number<std::size_t>(j, "cols", what);
  const json& d = field(j, "data", what);
  if (!d.is_array() || d.size() != rows * cols)
    throw CheckpointError(what + ": data length does not match rows x cols");
  std::vector<double> data;
  data.reserve(d.size());
  for (const auto& v : d) {
    if (!v.is_number()) throw CheckpointError(what + ": non-numeric entry");
    data.push_back(v.get<double>());
  }
  return Matrix(rows, cols, std::move(data));
}

json to_json(const Checkpoint& c) {
  json j;
  j["schema_version"] = kCheckpointSchema;
  json bb;
  bb["shape"] = shape_to_json(c.backbone.shape);
  const auto names = parameter_names(c.backbone);
  const auto params = parameters(c.backbone);
  json weights = json::object();
  for (std::size_t i = 0; i < names.size(); ++i) weights[names[i]] = matrix_to_json(*params[i]);
  bb["weights"] = std::move(weights);
  j["backbone"] = std::move(bb);

  if (c.gates.size() != c.peft.modules.size()) throw CheckpointError("one gate state per PEFT module required");
  json peft;
  peft["variant"] = c.peft.variant;
  json modules = json::array();
  for (std::size_t m = 0; m < c.peft.modules.size(); ++m) {
    const auto& mod = c.peft.modules[m];
    json e;
    e["layer"] = mod.point.layer;
    e["site"] = to_string(mod.point.site);
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, LoraParams>) e["kind"] = "lora";
          else if constexpr (std::is_same_v<T, DoraLiteParams>) e["kind"] = "dora";
          else e["kind"] = "adapter";
          if constexpr (!std::is_same_v<T, AdapterParams>) e["scale"] = p.scale;
        },
        mod.params);
    const auto pn = parameter_names(mod.params);
    const auto pp = parameters(mod.params);
    json pj = json::object();
    for (std::size_t i = 0; i < pn.size(); ++i) pj[pn[i]] = matrix_to_json(*pp[i]);
    e["params"] = std::move(pj);
    const auto& g = c.gates[m];
    e["gate"] = {{"tau", finite(g.tau, "threshold")},
                 {"m", finite(g.m, "threshold moment")},
                 {"v", finite(g.v, "threshold moment")},
                 {"k", g.k},
                 {"hyper", hyper_to_json(g.hyper)}};
    modules.push_back(std::move(e));
  }
  peft["modules"] = std::move(modules);
  peft["gating_enabled"] = c.gating_enabled;
  j["peft"] = std::move(peft);
  return j;
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object()) throw CheckpointError("checkpoint is not a JSON object");
  const int schema = number<int>(j, "schema_version", "checkpoint");
  if (schema != kCheckpointSchema)
    throw CheckpointError("unsupported schema_version " + std::to_string(schema) + " (expected " +
                          std::to_string(kCheckpointSchema) + ")");
  Checkpoint c;
  const json& bb = field(j, "backbone", "checkpoint");
  const BackboneShape shape = shape_from_json(field(bb, "shape", "backbone"));
  c.backbone = init_backbone(shape, 0);
  const json& weights = field(bb, "weights", "backbone");
  const auto names = parameter_names(c.backbone);
  auto params = parameters(c.backbone);
  if (!weights.is_object() || weights.size() != names.size())
    throw CheckpointError("backbone.weights: expected exactly " + std::to_string(names.size()) + " tensors");
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string what = "backbone.weights." + names[i];
    Matrix m = matrix_from_json(field(weights, names[i].c_str(), "backbone.weights"), what);
    check_shape(m, params[i]->rows(), params[i]->cols(), what);
    *params[i] = std::move(m);
  }

  const json& peft = field(j, "peft", "checkpoint");
  const json& variant = field(peft, "variant", "peft");
  if (!variant.is_string()) throw CheckpointError("peft.variant: expected a string");
  c.peft.variant = variant.get<std::string>();
  const json& gating = field(peft, "gating_enabled", "peft");
  if (!gating.is_boolean()) throw CheckpointError("peft.gating_enabled: expected a boolean");
  c.gating_enabled = gating.get<bool>();
  const json& modules = field(peft, "modules", "peft");
  if (!modules.is_array()) throw CheckpointError("peft.modules: expected a list");
  for (std::size_t m = 0; m < modules.size(); ++m) {
    const json& e = modules[m];
    const std::string what = "peft.modules[" + std::to_string(m) + "]";
    PeftModule mod;
    mod.point.layer = number<int>(e, "layer", what);
    const json& site = field(e, "site", what);
    if (!site.is_string()) throw CheckpointError(what + ".site: expected a string");
    try {
      mod.point.site = parse_site(site.get<std::string>());
    } catch (const Error& err) {
      throw CheckpointError(what + ": " + err.what());
    }
    if (mod.point.layer < 0 || mod.point.layer >= shape.layers)
      throw CheckpointError(what + ": layer out of range");
    const auto [d_in, d_out] = site_dims(shape, mod.point.site);
    const json& kind = field(e, "kind", what);
    const json& pj = field(e, "params", what);
    auto mat = [&](const char* name) { return matrix_from_json(field(pj, name, what + ".params"), what + "." + name); };
    if (kind == "lora") {
      LoraParams p;
      p.A = mat("A");
      p.B = mat("B");
      p.scale = number<double>(e, "scale", what);
      check_shape(p.A, p.A.rows(), d_in, what + ".A");
      check_shape(p.B, d_out, p.A.rows(), what + ".B");
      mod.params = std::move(p);
    } else if (kind == "dora") {
      DoraLiteParams p;
      p.A = mat("A");
      p.B = mat("B");
      p.magnitude = mat("magnitude");
      p.scale = number<double>(e, "scale", what);
      check_shape(p.A, p.A.rows(), d_in, what + ".A");
      check_shape(p.B, d_out, p.A.rows(), what + ".B");
      check_shape(p.magnitude, 1, d_out, what + ".magnitude");
      mod.params = std::move(p);
    } else if (kind == "adapter") {
      AdapterParams p;
      p.down = mat("down");
      p.up = mat("up");
      check_shape(p.down, p.down.rows(), d_in, what + ".down");
      check_shape(p.up, d_out, p.down.rows(), what + ".up");
      mod.params = std::move(p);
    } else {
      throw CheckpointError(what + ": unknown kind " + kind.dump());
    }
    const json& g = field(e, "gate", what);
    GateState gs;
    gs.tau = number<double>(g, "tau", what + ".gate");
    gs.m = number<double>(g, "m", what + ".gate");
    gs.v = number<double>(g, "v", what + ".gate");
    gs.k = number<std::int64_t>(g, "k", what + ".gate");
    gs.hyper = hyper_from_json(field(g, "hyper", what + ".gate"));
    c.peft.modules.push_back(std::move(mod));
    c.gates.push_back(gs);
  }
  try {
    SiteIndex index(shape, c.peft);
  } catch (const Error& e) {
    throw CheckpointError(e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string text = to_json(c).dump() + "\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write checkpoint " + path.string());
  out << text;
  if (!out) throw ArtifactError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace tspeft
