#include "impinj/data.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace impinj {

ApiVocabulary::ApiVocabulary(std::vector<std::string> names) : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!index_.emplace(names_[i], i).second) {
      throw DatasetError(DatasetError::Kind::kDuplicateName, 1, i + 1, "duplicate API name '" + names_[i] + "'");
    }
  }
}

std::optional<std::size_t> ApiVocabulary::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> LabeledDataset::indices_of_class(ClassId c) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == c) out.push_back(static_cast<int>(i));
  }
  return out;
}

DatasetError::DatasetError(Kind kind, std::size_t row, std::size_t column, const std::string& what)
    : DataError(what + (row > 0 ? " (line " + std::to_string(row) + (column > 0 ? ", column " + std::to_string(column) : "") + ")" : "")),
      kind_(kind),
      row_(row),
      column_(column) {}

DatasetFormat parse_dataset_format(const std::string& id) {
  if (id == "csv") return DatasetFormat::kCsv;
  throw ConfigError("unknown dataset format '" + id + "'");
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

LabeledDataset parse_dataset_csv(const std::string& text, const LoadOptions& options) {
  using Kind = DatasetError::Kind;
  std::vector<std::string_view> lines;
  {
    std::string_view rest(text);
    while (!rest.empty()) {
      std::size_t nl = rest.find('\n');
      std::string_view line = rest.substr(0, nl);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      lines.push_back(line);
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
  }
  if (lines.empty()) throw DatasetError(Kind::kEmpty, 0, 0, "dataset file is empty");

  auto header = split_fields(lines[0]);
  if (header.size() < 2 || header.back() != "label") {
    throw DatasetError(Kind::kMissingLabelColumn, 1, header.size(), "last header column must be 'label'");
  }
  std::vector<std::string> names;
  names.reserve(header.size() - 1);
  for (std::size_t j = 0; j + 1 < header.size(); ++j) {
    if (header[j].empty()) throw DatasetError(Kind::kMalformedRow, 1, j + 1, "empty API name");
    names.emplace_back(header[j]);
  }
  LabeledDataset ds;
  ds.vocabulary = ApiVocabulary(std::move(names));
  const std::size_t n = ds.vocabulary.size();
  const std::size_t rows = lines.size() - 1;
  if (rows == 0) throw DatasetError(Kind::kEmpty, 0, 0, "dataset has no samples");

  ds.features = Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
  ds.labels.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t line_no = r + 2;
    std::string_view line = lines[r + 1];
    std::size_t field = 0;
    std::size_t pos = 0;
    int popcount = 0;
    // Features: fast path over single-character fields.
    for (; field < n; ++field) {
      if (pos >= line.size()) throw DatasetError(Kind::kMalformedRow, line_no, field + 1, "row has too few fields");
      const std::size_t end = std::min(line.find(',', pos), line.size());
      std::string_view v = line.substr(pos, end - pos);
      if (end == line.size()) throw DatasetError(Kind::kMalformedRow, line_no, field + 1, "row has too few fields");
      if (v == "1") {
        ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(field)) = 1.0;
        ++popcount;
      } else if (v != "0") {
        throw DatasetError(Kind::kNonBinaryValue, line_no, field + 1, "non-binary feature value '" + std::string(v) + "'");
      }
      pos = end + 1;
    }
    std::string_view label_field = line.substr(pos);
    if (label_field.find(',') != std::string_view::npos) {
      throw DatasetError(Kind::kMalformedRow, line_no, n + 2, "row has too many fields");
    }
    int label = 0;
    auto [ptr, ec] = std::from_chars(label_field.data(), label_field.data() + label_field.size(), label);
    if (ec != std::errc() || ptr != label_field.data() + label_field.size() || label_field.empty()) {
      throw DatasetError(Kind::kMalformedRow, line_no, n + 1, "label is not an integer: '" + std::string(label_field) + "'");
    }
    if (label < 1 || label > options.max_class) {
      throw DatasetError(Kind::kLabelOutOfRange, line_no, n + 1, "label " + std::to_string(label) + " outside 1.." + std::to_string(options.max_class));
    }
    if (popcount < kMinImports) {
      throw DatasetError(Kind::kTooFewImports, line_no, 0, "sample imports " + std::to_string(popcount) + " APIs, fewer than " + std::to_string(kMinImports));
    }
    ds.labels.push_back(label);
    ds.class_count = std::max(ds.class_count, label);
  }
  return ds;
}

LabeledDataset load_dataset(const std::filesystem::path& path, DatasetFormat format, const LoadOptions& options) {
  if (format != DatasetFormat::kCsv) throw ConfigError("unsupported dataset format");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError(DatasetError::Kind::kIo, 0, 0, "cannot open dataset " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_dataset_csv(buf.str(), options);
}

std::string format_dataset_csv(const LabeledDataset& ds) {
  std::string out;
  const auto n = static_cast<std::size_t>(ds.feature_count());
  out.reserve((n * 2 + 4) * (ds.size() + 1) + n * 16);
  for (const std::string& name : ds.vocabulary.names()) {
    out += name;
    out += ',';
  }
  out += "label\n";
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      out += ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) != 0.0 ? '1' : '0';
      out += ',';
    }
    out += std::to_string(ds.labels[r]);
    out += '\n';
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << format_dataset_csv(ds);
}

LabeledDataset subset(const LabeledDataset& ds, std::span<const int> rows) {
  LabeledDataset out;
  out.vocabulary = ds.vocabulary;
  out.class_count = ds.class_count;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = ds.features.row(rows[i]);
    out.labels.push_back(ds.labels.at(static_cast<std::size_t>(rows[i])));
  }
  return out;
}

std::array<int, 4> stratified_counts(int class_size, const SplitFractions& fractions) {
  const auto f = fractions.as_array();
  std::array<int, 4> counts{};
  std::array<double, 4> frac{};
  int assigned = 0;
  for (int s = 0; s < 4; ++s) {
    const double target = class_size * f[static_cast<std::size_t>(s)];
    const double fl = std::floor(target + 1e-9);
    counts[static_cast<std::size_t>(s)] = static_cast<int>(fl);
    // Snap to a 1e-9 grid so 5 * 0.7 and 5 * 0.1 tie as they do in exact arithmetic.
    frac[static_cast<std::size_t>(s)] = std::max(0.0, std::round((target - fl) * 1e9) / 1e9);
    assigned += counts[static_cast<std::size_t>(s)];
  }
  std::array<int, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)];
  });
  for (int i = 0; assigned < class_size; ++i, ++assigned) {
    ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i % 4)])];
  }
  return counts;
}

SplitManifest stratified_split(const LabeledDataset& ds, const SplitFractions& fractions, std::uint64_t seed) {
  const auto f = fractions.as_array();
  double total = 0.0;
  for (double v : f) {
    if (v < 0.0) throw ConfigError("split fractions must be nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::vector<ClassId> classes(ds.labels.begin(), ds.labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  SplitManifest m;
  m.seed = seed;
  std::array<std::vector<int>*, 4> parts{&m.train, &m.val_tune, &m.val_es, &m.test};
  for (ClassId c : classes) {
    std::vector<int> idx = ds.indices_of_class(c);
    if (idx.size() < 4) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " samples; at least 4 are needed to stratify");
    }
    Rng rng(derive_seed(seed, "split/class" + std::to_string(c)));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto counts = stratified_counts(static_cast<int>(idx.size()), fractions);
    std::size_t offset = 0;
    for (std::size_t s = 0; s < 4; ++s) {
      const auto cnt = static_cast<std::size_t>(counts[s]);
      parts[s]->insert(parts[s]->end(), idx.begin() + static_cast<std::ptrdiff_t>(offset),
                       idx.begin() + static_cast<std::ptrdiff_t>(offset + cnt));
      offset += cnt;
    }
  }
  for (auto* p : parts) std::sort(p->begin(), p->end());
  return m;
}

std::string split_to_json(const SplitManifest& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["train"] = m.train;
  j["val_tune"] = m.val_tune;
  j["val_es"] = m.val_es;
  j["test"] = m.test;
  return j.dump() + "\n";
}

SplitManifest split_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  SplitManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.train = j.at("train").get<std::vector<int>>();
  m.val_tune = j.at("val_tune").get<std::vector<int>>();
  m.val_es = j.at("val_es").get<std::vector<int>>();
  m.test = j.at("test").get<std::vector<int>>();
  return m;
}

std::vector<long> class_frequency(const LabeledDataset& ds, ClassId c) {
  std::vector<long> counts(static_cast<std::size_t>(ds.feature_count()), 0);
  bool found = false;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] != c) continue;
    found = true;
    const auto row = ds.features.row(static_cast<Eigen::Index>(i));
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      if (row(j) != 0.0) ++counts[static_cast<std::size_t>(j)];
    }
  }
  if (!found) throw DataError("class " + std::to_string(c) + " has no samples");
  return counts;
}

SparseMatrix to_sparse(const Matrix& dense) {
  SparseMatrix s = dense.sparseView();
  s.makeCompressed();
  return s;
}

bool mostly_zero(const Matrix& x, double max_density) {
  if (x.size() == 0) return false;
  const double nnz = static_cast<double>((x.array() != 0.0).count());
  return nnz / static_cast<double>(x.size()) < max_density;
}

Matrix gather(const Matrix& x, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

}  // namespace impinj
