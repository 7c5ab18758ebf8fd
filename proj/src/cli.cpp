#include "tspeft/cli.hpp"

#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tspeft/analysis.hpp"
#include "tspeft/checkpoint.hpp"
#include "tspeft/config.hpp"
#include "tspeft/errors.hpp"
#include "tspeft/gradcheck.hpp"
#include "tspeft/trainer.hpp"

namespace tspeft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string backbone;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool dump_masks = false;
  bool retrain = false;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("cannot write " + path.string());
  f << text;
  if (!f) throw ArtifactError("failed writing " + path.string());
}

struct Context {
  RunConfig cfg;
  fs::path out;
  std::ostream& log;
};

// Loads and validates the configuration, applies flag overrides, creates the
// output directory and writes the resolved snapshot.
Context prepare(const Flags& f, std::ostream& log) {
  RunConfig c = load_config(f.config);
  if (f.seed_set) c.seed = f.seed;
  if (!f.out.empty()) c.output.dir = f.out;
  if (!f.backbone.empty()) c.backbone.checkpoint = f.backbone;
  if (f.dump_masks) c.output.dump_masks = true;
  validate(c);
  const fs::path out = c.output.dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ArtifactError("cannot create output directory " + out.string() + ": " + ec.message());
  write_file(out / "resolved_config.json", to_json(c).dump(2) + "\n");
  return {c, out, log};
}

Checkpoint checkpoint_or_ts_run(const Context& ctx, const Flags& f, const RunData& data) {
  if (!f.checkpoint.empty()) return load_checkpoint(f.checkpoint);
  RunConfig c = ctx.cfg;
  c.ts.enabled = true;
  const BackboneWeights w = obtain_backbone(c, data, &ctx.log);
  ctx.log << "no --checkpoint given; running a token-selective fine-tune first\n";
  return finetune(c, w, data.train, data.val, ctx.out / "ts_run", &ctx.log).final_state;
}

int cmd_pretrain(const Context& ctx) {
  const RunData data = make_run_data(ctx.cfg);
  const auto r = pretrain(ctx.cfg, data.pretrain_train, data.pretrain_val, &ctx.log);
  Checkpoint ck;
  ck.backbone = r.weights;
  save_checkpoint(ck, ctx.out / "backbone.json");
  const json summary = {{"steps", r.steps},
                        {"final_loss", r.final_loss},
                        {"val_accuracy", r.val_accuracy},
                        {"backbone_digest", std::to_string(weights_digest(r.weights))}};
  write_file(ctx.out / "pretrain.json", summary.dump(2) + "\n");
  return kExitOk;
}

int cmd_finetune(const Context& ctx) {
  const RunData data = make_run_data(ctx.cfg);
  const BackboneWeights w = obtain_backbone(ctx.cfg, data, &ctx.log);
  const auto r = finetune(ctx.cfg, w, data.train, data.val, ctx.out, &ctx.log);
  ctx.log << "val accuracy " << r.val.accuracy() << ", mean sparsity " << r.mean_sparsity() << "\n";
  return kExitOk;
}

int cmd_evaluate(const Context& ctx, const Flags& f) {
  if (f.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint");
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  const RunData data = make_run_data(ctx.cfg);
  std::ostringstream masks;
  const auto ev = evaluate(ck, data.val, ctx.cfg.optimizer.batch_size, ctx.cfg.output.dump_masks ? &masks : nullptr);
  write_file(ctx.out / "eval.json", to_json(ev).dump(2) + "\n");
  if (ctx.cfg.output.dump_masks) write_file(ctx.out / "masks.txt", masks.str());
  ctx.log << "accuracy " << ev.accuracy() << ", mean sparsity " << ev.mean_sparsity() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Context& ctx) {
  json reports = json::array();
  bool ok = true;
  for (std::uint64_t s = ctx.cfg.seed; s < ctx.cfg.seed + 5; ++s) {
    const auto r = gradcheck(ctx.cfg, s);
    ctx.log << "gradcheck seed " << s << ": max param err " << r.max_param_err << ", mu err " << r.mu_max_rel_err
            << ", g_k exact " << (r.gk_exact ? "yes" : "no") << "\n";
    ok = ok && r.pass();
    reports.push_back(to_json(r));
  }
  write_file(ctx.out / "gradcheck.json", json{{"pass", ok}, {"reports", reports}}.dump(2) + "\n");
  if (!ok) throw NumericalError("gradient check failed; see gradcheck.json");
  return kExitOk;
}

int cmd_ablate_tau(const Context& ctx) {
  const RunData data = make_run_data(ctx.cfg);
  const BackboneWeights w = obtain_backbone(ctx.cfg, data, &ctx.log);
  std::string csv = "optimizer,step,module,layer,site,tau\n";
  json summary = json::object();
  for (TauOptimizer t : {TauOptimizer::adam, TauOptimizer::plain_sgd}) {
    RunConfig c = ctx.cfg;
    c.ts.enabled = true;
    c.tau_optimizer = t;
    const std::string name = to_string(t);
    ctx.log << "ablation run: " << name << "\n";
    const auto r = finetune(c, w, data.train, data.val, ctx.out / name, &ctx.log);
    double mean_std = 0.0;
    json mods = json::array();
    for (std::size_t m = 0; m < r.modules.size(); ++m) {
      const auto& pt = r.modules[m].point;
      const auto& traj = r.tau_trajectory[m];
      for (std::size_t k = 0; k < traj.size(); ++k) {
        std::ostringstream line;
        line.precision(17);
        line << name << ',' << k + 1 << ',' << m << ',' << pt.layer << ',' << to_string(pt.site) << ',' << traj[k]
             << '\n';
        csv += line.str();
      }
      mean_std += r.modules[m].tau_std_last_half;
      mods.push_back({{"module", to_string(pt)}, {"tau_std_last_half", r.modules[m].tau_std_last_half}});
    }
    mean_std /= static_cast<double>(r.modules.size());
    summary[name] = {{"mean_tau_std_last_half", mean_std},
                     {"val_accuracy", r.val.accuracy()},
                     {"mean_sparsity", r.mean_sparsity()},
                     {"per_module", mods}};
  }
  write_file(ctx.out / "tau_trajectories.csv", csv);
  write_file(ctx.out / "ablation.json", summary.dump(2) + "\n");
  return kExitOk;
}

int cmd_sparsity_table(const Context& ctx, const Flags& f) {
  const RunData data = make_run_data(ctx.cfg);
  const Checkpoint ck = checkpoint_or_ts_run(ctx, f, data);
  std::ostringstream masks;
  const auto ev = evaluate(ck, data.val, ctx.cfg.optimizer.batch_size, ctx.cfg.output.dump_masks ? &masks : nullptr);
  if (ck.peft.modules.empty() || !ck.gating_enabled)
    throw ContractError("sparsity table needs a checkpoint from a token-selective run");
  write_file(ctx.out / "sparsity_table.csv", to_csv(sparsity_table(ev)));
  if (ctx.cfg.output.dump_masks) write_file(ctx.out / "masks.txt", masks.str());
  return kExitOk;
}

json ranking_json(const Ranking& r) {
  json order = json::array(), selected = json::array();
  for (const auto& p : r.order) order.push_back(to_string(p));
  for (const auto& p : r.selected) selected.push_back(to_string(p));
  return {{"strategy", to_string(r.kind)}, {"order", order}, {"selected", selected}, {"halve_rank", r.halve_rank}};
}

int cmd_rank_modules(const Context& ctx, const Flags& f) {
  const RunData data = make_run_data(ctx.cfg);
  const Checkpoint ck = checkpoint_or_ts_run(ctx, f, data);
  const auto table = module_sparsity_table(ck, data.val, ctx.cfg.optimizer.batch_size);
  const SelectionStrategy st{ctx.cfg.analysis.strategy, ctx.cfg.analysis.percent, ctx.cfg.analysis.random_seed};
  const Ranking r = rank_modules(table, st);
  json doc = ranking_json(r);
  if (f.retrain) {
    const auto rr = select_and_retrain(ctx.cfg, ck.backbone, data.train, data.val, r, ctx.out / "retrain", &ctx.log);
    doc["retrain"] = {{"val_accuracy", rr.run.val.accuracy()},
                      {"trainable_params", rr.run.trainable_params},
                      {"rank", rr.rank}};
  }
  write_file(ctx.out / "ranking.json", doc.dump(2) + "\n");
  return kExitOk;
}

int cmd_sweep(const Context& ctx, const Flags& f) {
  const RunData data = make_run_data(ctx.cfg);
  const Checkpoint ck = checkpoint_or_ts_run(ctx, f, data);
  const auto table = module_sparsity_table(ck, data.val, ctx.cfg.optimizer.batch_size);
  const Ranking r = rank_modules(table, {SelectionKind::s_low, 1.0, 0});
  const auto rows =
      sweep_percentages(ctx.cfg, ck.backbone, data.train, data.val, r, ctx.cfg.analysis.percents, {ctx.cfg.seed}, &ctx.log);
  write_file(ctx.out / "sweep.csv", sweep_csv(rows));
  return kExitOk;
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", kind}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Token-selective PEFT training laboratory", "tspeft"};
  app.require_subcommand(1, 1);
  Flags f;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "run configuration (JSON)")->required();
    sub->add_option("--out", f.out, "output directory (overrides output.dir)");
    sub->add_option("--seed", f.seed, "seed override");
    sub->add_option("--backbone", f.backbone, "pretrained backbone checkpoint (overrides backbone.checkpoint)");
  };
  std::map<std::string, CLI::App*> subs;
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s);
    subs[name] = s;
    return s;
  };
  add("pretrain", "pretrain the backbone on the base task");
  add("finetune", "fine-tune PEFT modules (token-selective when ts.enabled)");
  add("evaluate", "evaluate a checkpoint on the validation split")
      ->add_option("--checkpoint", f.checkpoint, "checkpoint to evaluate")
      ->required();
  subs["evaluate"]->add_flag("--dump-masks", f.dump_masks, "write gate masks to masks.txt");
  add("gradcheck", "finite-difference gradient verification on 5 seeds");
  add("ablate-tau", "paired adam / plain_sgd threshold-optimizer runs");
  add("sparsity-table", "module-wise sparsity table")->add_option("--checkpoint", f.checkpoint, "TS checkpoint");
  subs["sparsity-table"]->add_flag("--dump-masks", f.dump_masks, "write gate masks to masks.txt");
  add("rank-modules", "rank modules and select a subset")->add_option("--checkpoint", f.checkpoint, "TS checkpoint");
  subs["rank-modules"]->add_flag("--retrain", f.retrain, "retrain plain PEFT on the selection");
  add("sweep", "retrain over selection percentages")->add_option("--checkpoint", f.checkpoint, "TS checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << app.help();
    error_line(err, "usage_error", e.what());
    return kExitUsage;
  }

  std::string name;
  for (const auto& [n, s] : subs)
    if (s->parsed()) name = n;
  f.seed_set = subs[name]->count("--seed") > 0;

  try {
    const Context ctx = prepare(f, err);
    if (name == "pretrain") return cmd_pretrain(ctx);
    if (name == "finetune") return cmd_finetune(ctx);
    if (name == "evaluate") return cmd_evaluate(ctx, f);
    if (name == "gradcheck") return cmd_gradcheck(ctx);
    if (name == "ablate-tau") return cmd_ablate_tau(ctx);
    if (name == "sparsity-table") return cmd_sparsity_table(ctx, f);
    if (name == "rank-modules") return cmd_rank_modules(ctx, f);
    return cmd_sweep(ctx, f);
  } catch (const ConfigError& e) {
    error_line(err, e.kind(), e.what());
    return kExitConfig;
  } catch (const Error& e) {
    error_line(err, e.kind(), e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    error_line(err, "runtime_error", e.what());
    return kExitRuntime;
  }
}

}  // namespace tspeft
