#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "impinj/pipeline.h"
#include "impinj/synthetic.h"

namespace {

using impinj::Stage;

struct Common {
  std::string config;
  std::string dataset;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool no_upstream = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed) {
  cmd->add_option("-c,--config", c.config, "TOML run configuration");
  cmd->add_option("--dataset", c.dataset, "dataset CSV (overrides data.path)");
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set cvae.epochs=50");
  cmd->add_option("-o,--out-dir", c.out_dir, "artifact root (overrides IMPINJ_OUT_DIR and run.out_dir)");
  if (with_seed) {
    cmd->add_option("--seed", c.seed, "run seed (default: first configured seed)")->each([&c](const std::string&) {
      c.seed_set = true;
    });
    cmd->add_flag("--no-upstream", c.no_upstream, "fail instead of building missing upstream stages");
  }
}

impinj::RunConfig make_config(const Common& c) {
  impinj::RunConfig cfg = c.config.empty() ? impinj::RunConfig{} : impinj::load_run_config(c.config);
  if (const char* env = std::getenv("IMPINJ_OUT_DIR"); env && *env) cfg.out_dir = env;
  if (!c.dataset.empty()) cfg.dataset = c.dataset;
  for (const auto& o : c.overrides) impinj::apply_override(cfg, o);
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  if (c.seed_set) cfg.seeds = {c.seed};
  impinj::validate(cfg);
  if (cfg.dataset.empty()) throw impinj::ConfigError("no dataset: pass --dataset or set data.path");
  return cfg;
}

impinj::Pipeline make_pipeline(const impinj::RunConfig& cfg) {
  return impinj::Pipeline(cfg, [](const std::string& line) { std::cerr << line << '\n'; });
}

void print_outcome(const impinj::StageOutcome& o) {
  std::cout << impinj::format_log("result", {{"stage", impinj::stage_name(o.stage)},
                                             {"cache_hit", o.cache_hit ? "true" : "false"},
                                             {"key", o.key},
                                             {"dir", o.dir.string()}})
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targeted evasion experiments on API-import malware detectors"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::pair<CLI::App*, std::vector<Stage>>> stage_cmds;

  auto* run = app.add_subcommand("run", "every stage for every seed, then the report");
  add_common(run, common, false);

  auto* split = app.add_subcommand("split", "stratified train/val/test split");
  add_common(split, common, true);
  stage_cmds.push_back({split, {Stage::kSplit}});

  std::string which = "both";
  auto* ens = app.add_subcommand("train-ensemble", "train ensemble A (six classes) and/or B (benign only)");
  add_common(ens, common, true);
  ens->add_option("--which", which, "a, b or both")->check(CLI::IsMember({"a", "b", "both"}));

  auto* targets = app.add_subcommand("assign-targets", "pick each malware sample's benign target class");
  add_common(targets, common, true);
  stage_cmds.push_back({targets, {Stage::kTargets}});

  auto* distill = app.add_subcommand("distill", "distill ensemble A into the proxy network");
  add_common(distill, common, true);
  stage_cmds.push_back({distill, {Stage::kDistill}});

  auto* tune = app.add_subcommand("tune-cvae", "random search over CVAE hyperparameters");
  add_common(tune, common, true);
  stage_cmds.push_back({tune, {Stage::kTuneCvae}});

  auto* train = app.add_subcommand("train-cvae", "train the CVAE with the selected hyperparameters");
  add_common(train, common, true);
  stage_cmds.push_back({train, {Stage::kTrainCvae}});

  std::string method;
  int k = 0;
  auto* attack = app.add_subcommand("attack", "generate adversarial samples for every method and k");
  add_common(attack, common, true);
  attack->add_option("--method", method, "print only this method's file")
      ->check(CLI::IsMember({"cvae", "most_popular", "random"}));
  attack->add_option("--k", k, "injection budget (added to the k grid if absent)")->check(CLI::PositiveNumber);

  auto* evaluate = app.add_subcommand("evaluate", "per-seed evasion metrics");
  add_common(evaluate, common, true);
  stage_cmds.push_back({evaluate, {Stage::kEvaluate}});

  auto* report = app.add_subcommand("report", "aggregate records across seeds");
  add_common(report, common, false);

  auto* emb = app.add_subcommand("export-embeddings", "ensemble-A encoder embeddings as CSV");
  add_common(emb, common, true);

  impinj::SyntheticSpec synth;
  int per_class = 10;
  std::string synth_out;
  auto* syn = app.add_subcommand("synth-dataset", "write a small synthetic dataset");
  syn->add_option("--out", synth_out, "output CSV")->required();
  syn->add_option("--per-class", per_class, "samples per class")->check(CLI::PositiveNumber);
  syn->add_option("--features", synth.features, "feature count");
  syn->add_option("--seed", synth.seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (syn->parsed()) {
      synth.class_sizes.assign(6, per_class);
      impinj::write_dataset(synth_out, impinj::make_synthetic_dataset(synth));
      std::cout << impinj::format_log("synth_dataset", {{"path", synth_out}}) << '\n';
      return 0;
    }
    impinj::RunConfig cfg = make_config(common);
    if (attack->parsed() && k > 0 && std::find(cfg.k_grid.begin(), cfg.k_grid.end(), k) == cfg.k_grid.end()) {
      cfg.k_grid.push_back(k);
      std::sort(cfg.k_grid.begin(), cfg.k_grid.end());
    }
    impinj::Pipeline pipe = make_pipeline(cfg);
    const std::uint64_t seed = cfg.seeds.front();
    const bool upstream = !common.no_upstream;

    if (run->parsed()) {
      const int failed = pipe.run_all();
      return failed == 0 ? 0 : 2;
    }
    if (report->parsed()) {
      const impinj::ReportPaths p = pipe.report();
      std::cout << impinj::format_log("result", {{"records", p.records.string()},
                                                 {"aggregate", p.aggregate.string()},
                                                 {"plot_data", p.plot_data.string()}})
                << '\n';
      return 0;
    }
    if (emb->parsed()) {
      std::cout << impinj::format_log("result", {{"path", pipe.export_embeddings(seed, upstream).string()}}) << '\n';
      return 0;
    }
    if (ens->parsed()) {
      if (which != "b") print_outcome(pipe.run_stage(Stage::kEnsembleA, seed, upstream));
      if (which != "a") print_outcome(pipe.run_stage(Stage::kEnsembleB, seed, upstream));
      return 0;
    }
    if (attack->parsed()) {
      const impinj::StageOutcome o = pipe.run_stage(Stage::kAttack, seed, upstream);
      print_outcome(o);
      for (const std::string m : {"cvae", "most_popular", "random"}) {
        if (!method.empty() && m != method) continue;
        for (int kk : cfg.k_grid) {
          if (k > 0 && kk != k) continue;
          std::cout << impinj::format_log("file", {{"path", (o.dir / (m + "_k" + std::to_string(kk) + ".jsonl")).string()}})
                    << '\n';
        }
      }
      return 0;
    }
    for (const auto& [cmd, stages] : stage_cmds) {
      if (!cmd->parsed()) continue;
      for (Stage s : stages) print_outcome(pipe.run_stage(s, seed, upstream));
      return 0;
    }
  } catch (const impinj::ConfigError& e) {
    std::cerr << impinj::format_log("error", {{"kind", "config"}, {"message", e.what()}}) << '\n';
    return 1;
  } catch (const impinj::StageError& e) {
    std::cerr << impinj::format_log("error", {{"kind", "stage"}, {"stage", impinj::stage_name(e.stage())},
                                              {"message", e.what()}})
              << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << impinj::format_log("error", {{"kind", "stage"}, {"message", e.what()}}) << '\n';
    return 2;
  }
  return 0;
}
