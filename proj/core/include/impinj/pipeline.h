#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "impinj/attack.h"
#include "impinj/config.h"
#include "impinj/metrics.h"

namespace impinj {

enum class Stage { kSplit, kEnsembleA, kEnsembleB, kTargets, kDistill, kTuneCvae, kTrainCvae, kAttack, kEvaluate };

inline constexpr Stage kAllStages[] = {Stage::kSplit,    Stage::kEnsembleA, Stage::kEnsembleB,
                                       Stage::kTargets,  Stage::kDistill,   Stage::kTuneCvae,
                                       Stage::kTrainCvae, Stage::kAttack,   Stage::kEvaluate};

// Directory name of the stage's artifacts.
std::string stage_name(Stage s);
// CLI subcommand that produces the stage.
std::string stage_subcommand(Stage s);

class StageError : public Error {
 public:
  StageError(Stage stage, const std::string& what);
  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

// An upstream artifact is absent or was produced under a different config.
class MissingArtifactError : public StageError {
 public:
  using StageError::StageError;
};

// Line-oriented key=value logging.
using LogSink = std::function<void(const std::string&)>;
std::string format_log(const std::string& event, const std::vector<std::pair<std::string, std::string>>& fields);

struct StageOutcome {
  Stage stage;
  bool cache_hit = false;
  std::string key;
  std::filesystem::path dir;
};

struct ReportPaths {
  std::filesystem::path records;
  std::filesystem::path aggregate;
  std::filesystem::path plot_data;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, LogSink log);

  const RunConfig& config() const { return cfg_; }

  std::filesystem::path seed_dir(std::uint64_t seed) const;
  std::filesystem::path stage_dir(std::uint64_t seed, Stage stage) const;

  // Runs one stage. With build_upstream, stale or missing upstream stages are
  // (re)built first; otherwise they raise MissingArtifactError naming the
  // subcommand to run. A stage whose manifest matches is a cache hit.
  StageOutcome run_stage(Stage stage, std::uint64_t seed, bool build_upstream);

  // Every stage for every seed, then the cross-seed report. Returns the
  // number of seeds that failed; failures are written to failure.json.
  int run_all();

  ReportPaths report();

  // CSV of ensemble-A embeddings for every sample.
  std::filesystem::path export_embeddings(std::uint64_t seed, bool build_upstream);

  // Content key of a stage for a seed (hash of config and upstream keys).
  std::string stage_key(Stage stage, std::uint64_t seed);

  // Stage seed derived from the run seed and the stage name.
  static std::uint64_t stage_seed(std::uint64_t seed, Stage stage);

 private:
  void ensure_upstream(Stage stage, std::uint64_t seed, bool build_upstream);
  bool is_current(Stage stage, std::uint64_t seed);
  void invalidate_downstream(Stage stage, std::uint64_t seed);
  void execute(Stage stage, std::uint64_t seed, const std::filesystem::path& dir);
  void write_manifest(Stage stage, std::uint64_t seed, const std::filesystem::path& dir, const std::string& key);
  const LabeledDataset& dataset();
  const std::string& dataset_hash();

  RunConfig cfg_;
  LogSink log_;
  std::optional<LabeledDataset> dataset_;
  std::string dataset_hash_;
  // Per-process memo: keys are pure functions of the config, and a stage
  // verified or rebuilt here stays current until this object rebuilds it.
  std::map<std::pair<Stage, std::uint64_t>, std::string> keys_;
  std::set<std::pair<Stage, std::uint64_t>> verified_;
};

}  // namespace impinj
