#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "impinj/common.h"

namespace impinj {

class ApiVocabulary {
 public:
  ApiVocabulary() = default;
  explicit ApiVocabulary(std::vector<std::string> names);

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  std::optional<std::size_t> index_of(const std::string& name) const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binary API-import feature vectors (one row per sample, entries 0/1)
// with 1-based class labels. Immutable once loaded.
struct LabeledDataset {
  ApiVocabulary vocabulary;
  Matrix features;
  std::vector<ClassId> labels;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  Eigen::Index feature_count() const { return features.cols(); }
  std::vector<int> indices_of_class(ClassId c) const;
};

inline constexpr int kMinImports = 5;

enum class DatasetFormat { kCsv };

DatasetFormat parse_dataset_format(const std::string& id);

class DatasetError : public DataError {
 public:
  enum class Kind {
    kIo,
    kMissingLabelColumn,
    kDuplicateName,
    kMalformedRow,
    kNonBinaryValue,
    kLabelOutOfRange,
    kTooFewImports,
    kEmpty,
  };

  DatasetError(Kind kind, std::size_t row, std::size_t column, const std::string& what);

  Kind kind() const { return kind_; }
  // 1-based line number in the file (header is line 1); 0 when not applicable.
  std::size_t row() const { return row_; }
  // 1-based column; 0 when not applicable.
  std::size_t column() const { return column_; }

 private:
  Kind kind_;
  std::size_t row_;
  std::size_t column_;
};

struct LoadOptions {
  int max_class = 6;
};

// Headered CSV: API names then a literal `label` column; body rows are 0/1
// feature values followed by the class id.
LabeledDataset load_dataset(const std::filesystem::path& path, DatasetFormat format = DatasetFormat::kCsv,
                            const LoadOptions& options = {});
LabeledDataset parse_dataset_csv(const std::string& text, const LoadOptions& options = {});
std::string format_dataset_csv(const LabeledDataset& ds);
void write_dataset(const std::filesystem::path& path, const LabeledDataset& ds);

LabeledDataset subset(const LabeledDataset& ds, std::span<const int> rows);

struct SplitFractions {
  double train = 0.70;
  double val_tune = 0.10;
  double val_es = 0.05;
  double test = 0.15;

  std::array<double, 4> as_array() const { return {train, val_tune, val_es, test}; }
};

struct SplitManifest {
  std::uint64_t seed = 0;
  std::vector<int> train;
  std::vector<int> val_tune;
  std::vector<int> val_es;
  std::vector<int> test;

  bool operator==(const SplitManifest&) const = default;
};

SplitManifest stratified_split(const LabeledDataset& ds, const SplitFractions& fractions, std::uint64_t seed);

// Per-class split sizes from real-valued targets: floor everything, then hand
// the remainder to the splits with the largest fractional parts (ties to the
// earlier split).
std::array<int, 4> stratified_counts(int class_size, const SplitFractions& fractions);

std::string split_to_json(const SplitManifest& m);
SplitManifest split_from_json(const std::string& text);

// count[j] = number of samples of class `c` with feature j set.
std::vector<long> class_frequency(const LabeledDataset& ds, ClassId c);

SparseMatrix to_sparse(const Matrix& dense);

// True when fewer than `max_density` of the entries are nonzero.
bool mostly_zero(const Matrix& x, double max_density = 0.25);

// Rows of `x` selected by `rows`, in order.
Matrix gather(const Matrix& x, std::span<const int> rows);

}  // namespace impinj
