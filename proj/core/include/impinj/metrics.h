#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "impinj/common.h"

namespace impinj {

struct EvasionCounts {
  long m_malware = 0;
  long m_evaded = 0;
  long m_target = 0;
};

struct EvasionRates {
  double uer = 0.0;
  double tsr = 0.0;
  // Unset when nothing evaded.
  std::optional<double> cts;
};

EvasionRates evasion_metrics(const EvasionCounts& counts);

struct ClassificationReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double macro_recall = 0.0;
  // NaN for classes that never occur in the truth labels.
  std::vector<double> per_class_recall;
  std::vector<double> per_class_f1;
  // True when some class in [0, class_count) was absent from the truth and
  // therefore left out of the macro averages.
  bool excluded_absent = false;
};

// Labels are 0-based in [0, class_count).
ClassificationReport classification_metrics(std::span<const int> pred, std::span<const int> truth, int class_count);

double macro_f1(std::span<const int> pred, std::span<const int> truth, int class_count);

struct MetricRecord {
  std::string method;
  int k = 0;
  std::uint64_t seed = 0;
  EvasionCounts counts;
  double uer = 0.0;
  double tsr = 0.0;
  std::optional<double> cts;
  double recall6 = 0.0;
  // Classifier metrics, filled for the k = 0 baseline row.
  std::optional<double> accuracy;
  std::optional<double> macro_f1;
  std::optional<double> macro_recall;
};

MetricRecord make_record(const std::string& method, int k, std::uint64_t seed, const EvasionCounts& counts);

struct Summary {
  int count = 0;
  double mean = 0.0;
  // Sample standard deviation (n - 1); 0 with `single` set when count == 1.
  double stddev = 0.0;
  bool single = false;
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
};

// Throws DataError on an empty input.
Summary summarize(std::span<const double> values);

struct AggregateCell {
  std::string method;
  int k = 0;
  int runs = 0;
  Summary uer;
  Summary tsr;
  // Over the records where CTS is defined; cts_missing counts the rest.
  std::optional<Summary> cts;
  int cts_missing = 0;
  Summary recall6;
};

// Groups by (method, k), ordered by method name then k.
std::vector<AggregateCell> aggregate_runs(std::span<const MetricRecord> records);

std::string records_to_csv(std::span<const MetricRecord> records);
std::vector<MetricRecord> records_from_csv(const std::string& text);
std::string aggregate_to_csv(std::span<const AggregateCell> cells);
// One row per (method, k, metric) with mean, std and IQR band.
std::string plot_data_to_csv(std::span<const AggregateCell> cells);

}  // namespace impinj
