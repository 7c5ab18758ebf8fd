#include "tspeft/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "tspeft/errors.hpp"

namespace tspeft {

using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object and rejects any key that was
// never asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type (" + v.dump() + ")");
    }
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

AttachmentPoint parse_attachment(const std::string& s) {
  // "L<layer>.<site>"
  const auto dot = s.find('.');
  if (s.size() < 4 || s[0] != 'L' || dot == std::string::npos) throw ConfigError("bad attachment point '" + s + "'");
  AttachmentPoint p;
  try {
    std::size_t used = 0;
    p.layer = std::stoi(s.substr(1, dot - 1), &used);
    if (used != dot - 1) throw ConfigError("");
    p.site = parse_site(s.substr(dot + 1));
  } catch (const std::exception&) {
    throw ConfigError("bad attachment point '" + s + "'");
  }
  return p;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

std::string to_string(PeftVariant v) {
  switch (v) {
    case PeftVariant::lora: return "lora";
    case PeftVariant::dora: return "dora";
    case PeftVariant::adapter: return "adapter";
    case PeftVariant::adalora: return "adalora";
  }
  return "?";
}

PeftVariant parse_peft_variant(const std::string& name) {
  for (auto v : {PeftVariant::lora, PeftVariant::dora, PeftVariant::adapter, PeftVariant::adalora})
    if (to_string(v) == name) return v;
  throw ConfigError("unknown PEFT variant '" + name + "'");
}

std::string to_string(TauOptimizer t) { return t == TauOptimizer::adam ? "adam" : "plain_sgd"; }

std::string to_string(SelectionKind k) {
  switch (k) {
    case SelectionKind::s_low: return "s_low";
    case SelectionKind::s_high: return "s_high";
    case SelectionKind::norm_relative: return "norm_relative";
    case SelectionKind::norm_abs: return "norm_abs";
    case SelectionKind::random: return "random";
    case SelectionKind::half_rank: return "half_rank";
  }
  return "?";
}

SelectionKind parse_selection_kind(const std::string& name) {
  for (auto k : {SelectionKind::s_low, SelectionKind::s_high, SelectionKind::norm_relative, SelectionKind::norm_abs,
                 SelectionKind::random, SelectionKind::half_rank})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown selection strategy '" + name + "'");
}

BackboneShape RunConfig::backbone_shape() const {
  BackboneShape s;
  s.vocab_size = task.vocab_size;
  s.seq_len = task.seq_len;
  s.hidden = backbone.hidden;
  s.ffn = backbone.ffn;
  s.layers = backbone.layers;
  s.num_classes = task.num_classes;
  return s;
}

TaskParams RunConfig::task_params() const {
  TaskParams p;
  p.seed = task.seed;
  p.n_examples = task.n_train + task.n_val;
  p.seq_len = task.seq_len;
  p.vocab_size = task.vocab_size;
  p.num_classes = task.num_classes;
  p.k_signal = task.k_signal;
  p.min_len = task.min_len;
  return p;
}

std::vector<AttachmentPoint> default_attachments(int layers) {
  std::vector<AttachmentPoint> out;
  for (int l = 0; l < layers; ++l)
    for (Site s : {Site::q_proj, Site::k_proj, Site::v_proj, Site::ffn_up, Site::ffn_down}) out.push_back({l, s});
  return out;
}

RunConfig parse_config(const json& j) {
  RunConfig c;
  Section top(j, "config");
  top.get("seed", c.seed);

  if (top.has("task")) {
    Section s(top.raw("task"), "task");
    s.get("seed", c.task.seed);
    s.get("n_train", c.task.n_train);
    s.get("n_val", c.task.n_val);
    s.get("seq_len", c.task.seq_len);
    s.get("vocab_size", c.task.vocab_size);
    s.get("num_classes", c.task.num_classes);
    s.get("k_signal", c.task.k_signal);
    c.task.min_len = c.task.seq_len;
    s.get("min_len", c.task.min_len);
    std::string rule = to_string(c.task.shift_rule);
    s.get("shift_rule", rule);
    c.task.shift_rule = parse_shift_rule(rule);
    s.get("shift_seed", c.task.shift_seed);
    s.finish();
  }

  if (top.has("backbone")) {
    Section s(top.raw("backbone"), "backbone");
    s.get("hidden", c.backbone.hidden);
    s.get("ffn", c.backbone.ffn);
    s.get("layers", c.backbone.layers);
    s.get("checkpoint", c.backbone.checkpoint);
    s.finish();
  }

  if (top.has("pretrain")) {
    Section s(top.raw("pretrain"), "pretrain");
    s.get("seed", c.pretrain.seed);
    s.get("epochs", c.pretrain.epochs);
    s.get("lr", c.pretrain.lr);
    s.get("batch_size", c.pretrain.batch_size);
    s.finish();
  }

  bool explicit_attach = false;
  if (top.has("peft")) {
    Section s(top.raw("peft"), "peft");
    std::string variant = to_string(c.peft.variant);
    s.get("variant", variant);
    c.peft.variant = parse_peft_variant(variant);
    s.get("rank", c.peft.rank);
    s.get("scale", c.peft.scale);
    s.get("bottleneck", c.peft.bottleneck);
    if (s.has("attach")) {
      if (s.has("targets") || s.has("layers"))
        throw ConfigError("peft: give either 'attach' or 'targets'/'layers', not both");
      const json& a = s.raw("attach");
      require(a.is_array(), "peft.attach: expected a list of \"L<layer>.<site>\" strings");
      c.peft.attach.clear();
      for (const auto& e : a) {
        require(e.is_string(), "peft.attach: expected strings");
        c.peft.attach.push_back(parse_attachment(e.get<std::string>()));
      }
      explicit_attach = true;
    } else if (s.has("targets") || s.has("layers")) {
      std::vector<Site> targets = {Site::q_proj, Site::k_proj, Site::v_proj, Site::ffn_up, Site::ffn_down};
      std::vector<int> layers;
      for (int l = 0; l < c.backbone.layers; ++l) layers.push_back(l);
      if (s.has("targets")) {
        const json& t = s.raw("targets");
        require(t.is_array(), "peft.targets: expected a list of site names");
        targets.clear();
        for (const auto& e : t) {
          require(e.is_string(), "peft.targets: expected strings");
          try {
            targets.push_back(parse_site(e.get<std::string>()));
          } catch (const Error&) {
            throw ConfigError("peft.targets: unknown site '" + e.get<std::string>() + "'");
          }
        }
      }
      if (s.has("layers")) {
        const json& l = s.raw("layers");
        require(l.is_array(), "peft.layers: expected a list of layer indices");
        layers.clear();
        for (const auto& e : l) {
          require(e.is_number_integer(), "peft.layers: expected integers");
          layers.push_back(e.get<int>());
        }
      }
      c.peft.attach.clear();
      for (int l : layers)
        for (Site t : targets) c.peft.attach.push_back({l, t});
      explicit_attach = true;
    }
    if (s.has("rank_overrides")) {
      const json& r = s.raw("rank_overrides");
      require(r.is_object(), "peft.rank_overrides: expected an object");
      for (auto it = r.begin(); it != r.end(); ++it) {
        parse_attachment(it.key());
        require(it.value().is_number_integer(), "peft.rank_overrides: ranks must be integers");
        c.peft.rank_overrides[it.key()] = it.value().get<int>();
      }
    }
    s.finish();
  }
  if (!explicit_attach) c.peft.attach = default_attachments(c.backbone.layers);

  if (top.has("optimizer")) {
    Section s(top.raw("optimizer"), "optimizer");
    s.get("lr", c.optimizer.lr);
    s.get("weight_decay", c.optimizer.weight_decay);
    s.get("batch_size", c.optimizer.batch_size);
    s.get("epochs", c.optimizer.epochs);
    std::string sched = c.optimizer.scheduler == Schedule::linear ? "linear" : "constant";
    s.get("scheduler", sched);
    if (sched == "linear")
      c.optimizer.scheduler = Schedule::linear;
    else if (sched == "constant")
      c.optimizer.scheduler = Schedule::constant;
    else
      throw ConfigError("optimizer.scheduler: expected 'linear' or 'constant'");
    s.finish();
  }

  if (top.has("ts")) {
    Section s(top.raw("ts"), "ts");
    s.get("enabled", c.ts.enabled);
    s.get("s", c.ts.hyper.s);
    s.get("lambda", c.ts.hyper.lambda);
    s.get("alpha", c.ts.hyper.alpha);
    s.get("beta1", c.ts.hyper.beta1);
    s.get("beta2", c.ts.hyper.beta2);
    s.get("eps", c.ts.hyper.eps);
    s.finish();
  }

  if (top.has("ablation")) {
    Section s(top.raw("ablation"), "ablation");
    std::string t = "adam";
    s.get("tau_optimizer", t);
    if (t == "adam")
      c.tau_optimizer = TauOptimizer::adam;
    else if (t == "plain_sgd")
      c.tau_optimizer = TauOptimizer::plain_sgd;
    else
      throw ConfigError("ablation.tau_optimizer: expected 'adam' or 'plain_sgd'");
    s.finish();
  }

  if (top.has("analysis")) {
    Section s(top.raw("analysis"), "analysis");
    std::string k = to_string(c.analysis.strategy);
    s.get("strategy", k);
    c.analysis.strategy = parse_selection_kind(k);
    s.get("percent", c.analysis.percent);
    if (s.has("percents")) {
      const json& p = s.raw("percents");
      require(p.is_array(), "analysis.percents: expected a list of numbers");
      c.analysis.percents.clear();
      for (const auto& e : p) {
        require(e.is_number(), "analysis.percents: expected numbers");
        c.analysis.percents.push_back(e.get<double>());
      }
    }
    s.get("random_seed", c.analysis.random_seed);
    s.finish();
  }

  if (top.has("output")) {
    Section s(top.raw("output"), "output");
    s.get("dir", c.output.dir);
    s.get("dump_masks", c.output.dump_masks);
    s.finish();
  }
  top.finish();
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

void validate(const RunConfig& c) {
  TaskParams tp = c.task_params();
  tp.n_examples = 1;
  validate_task_params(tp);
  require(c.task.n_train >= 1 && c.task.n_val >= 1, "task: n_train and n_val must be >= 1");
  validate(c.backbone_shape());
  require(c.pretrain.epochs >= 0, "pretrain.epochs must be >= 0");
  require(c.pretrain.lr > 0 && std::isfinite(c.pretrain.lr), "pretrain.lr must be positive");
  require(c.pretrain.batch_size >= 1, "pretrain.batch_size must be >= 1");

  require(c.peft.rank >= 1, "peft.rank must be >= 1");
  require(c.peft.bottleneck >= 1, "peft.bottleneck must be >= 1");
  require(std::isfinite(c.peft.scale), "peft.scale must be finite");
  require(!c.peft.attach.empty(), "peft: at least one attachment point required");
  std::set<AttachmentPoint> seen;
  for (const auto& p : c.peft.attach) {
    require(p.layer >= 0 && p.layer < c.backbone.layers, "peft: attachment " + to_string(p) + " has no such layer");
    require(seen.insert(p).second, "peft: duplicate attachment " + to_string(p));
  }
  if (!c.peft.rank_overrides.empty())
    require(c.peft.variant == PeftVariant::adalora, "peft.rank_overrides is only meaningful for variant adalora");
  for (const auto& [name, r] : c.peft.rank_overrides) require(r >= 1, "peft.rank_overrides: rank must be >= 1");

  require(c.optimizer.lr > 0 && std::isfinite(c.optimizer.lr), "optimizer.lr must be positive");
  require(c.optimizer.weight_decay >= 0, "optimizer.weight_decay must be >= 0");
  require(c.optimizer.batch_size >= 1, "optimizer.batch_size must be >= 1");
  require(c.optimizer.epochs >= 0, "optimizer.epochs must be >= 0");

  try {
    validate(c.ts.hyper);
  } catch (const Error& e) {
    throw ConfigError(std::string("ts: ") + e.what());
  }

  require(c.analysis.percent > 0 && c.analysis.percent <= 1, "analysis.percent must be in (0, 1]");
  for (double p : c.analysis.percents) require(p > 0 && p <= 1, "analysis.percents entries must be in (0, 1]");
  require(!c.output.dir.empty(), "output.dir must not be empty");
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["task"] = {{"seed", c.task.seed},           {"n_train", c.task.n_train},
               {"n_val", c.task.n_val},         {"seq_len", c.task.seq_len},
               {"vocab_size", c.task.vocab_size}, {"num_classes", c.task.num_classes},
               {"k_signal", c.task.k_signal},   {"min_len", c.task.min_len},
               {"shift_rule", to_string(c.task.shift_rule)}, {"shift_seed", c.task.shift_seed}};
  j["backbone"] = {{"hidden", c.backbone.hidden},
                   {"ffn", c.backbone.ffn},
                   {"layers", c.backbone.layers},
                   {"checkpoint", c.backbone.checkpoint}};
  j["pretrain"] = {{"seed", c.pretrain.seed},
                   {"epochs", c.pretrain.epochs},
                   {"lr", c.pretrain.lr},
                   {"batch_size", c.pretrain.batch_size}};
  json attach = json::array();
  for (const auto& p : c.peft.attach) attach.push_back(to_string(p));
  j["peft"] = {{"variant", to_string(c.peft.variant)}, {"rank", c.peft.rank},   {"scale", c.peft.scale},
               {"bottleneck", c.peft.bottleneck},      {"attach", attach},
               {"rank_overrides", json(c.peft.rank_overrides)}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"batch_size", c.optimizer.batch_size},
                    {"epochs", c.optimizer.epochs},
                    {"scheduler", c.optimizer.scheduler == Schedule::linear ? "linear" : "constant"}};
  const auto& h = c.ts.hyper;
  j["ts"] = {{"enabled", c.ts.enabled}, {"s", h.s},         {"lambda", h.lambda}, {"alpha", h.alpha},
             {"beta1", h.beta1},        {"beta2", h.beta2}, {"eps", h.eps}};
  j["ablation"] = {{"tau_optimizer", to_string(c.tau_optimizer)}};
  j["analysis"] = {{"strategy", to_string(c.analysis.strategy)},
                   {"percent", c.analysis.percent},
                   {"percents", c.analysis.percents},
                   {"random_seed", c.analysis.random_seed}};
  j["output"] = {{"dir", c.output.dir}, {"dump_masks", c.output.dump_masks}};
  return j;
}

}  // namespace tspeft
