#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "impinj/attack.h"
#include "impinj/cvae.h"
#include "impinj/data.h"
#include "impinj/distill.h"
#include "impinj/ensemble.h"

namespace impinj {

// Value of a TOML-style document: scalars and flat arrays of scalars.
struct TomlValue {
  enum class Kind { kBool, kInt, kFloat, kString, kArray };
  Kind kind = Kind::kInt;
  bool boolean = false;
  long long integer = 0;
  double real = 0.0;
  std::string text;
  std::vector<TomlValue> items;

  double as_double() const;
  long long as_int() const;
  bool as_bool() const;
  const std::string& as_string() const;
  std::vector<double> as_double_array() const;
  std::vector<long long> as_int_array() const;
};

// Keys are flattened as "table.key"; top-level keys have no prefix.
using TomlDocument = std::map<std::string, TomlValue>;

// Supports [table] headers, key = value lines, # comments, strings, integers,
// floats, booleans and single-line arrays of scalars.
TomlDocument parse_toml(const std::string& text);
TomlValue parse_toml_value(const std::string& text);

struct RunConfig {
  std::filesystem::path dataset;
  std::string dataset_format = "csv";
  std::vector<std::uint64_t> seeds{1};
  std::vector<int> k_grid{5, 10, 15, 20, 25, 30, 35, 40, 45, 50};
  SplitFractions fractions;
  EnsembleConfig ensemble;
  DistillConfig distill;
  CvaeConfig cvae;
  TuneConfig tuning;
  bool tune = true;
  std::vector<int> objective_ks{10, 20};
  ObjectiveWeights objective_weights;
  std::filesystem::path out_dir = "runs";
};

// Unknown keys and invalid values raise ConfigError.
void apply_toml(RunConfig& cfg, const TomlDocument& doc);
RunConfig load_run_config(const std::filesystem::path& path);
// "table.key=value" override.
void apply_override(RunConfig& cfg, const std::string& assignment);
void validate(const RunConfig& cfg);

}  // namespace impinj
