#include "impinj/metrics.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace impinj {

EvasionRates evasion_metrics(const EvasionCounts& c) {
  if (c.m_malware <= 0) throw DataError("evasion_metrics: no malware samples");
  if (c.m_target < 0 || c.m_target > c.m_evaded || c.m_evaded > c.m_malware) {
    throw DataError("evasion_metrics: counts violate m_target <= m_evaded <= m_malware");
  }
  EvasionRates r;
  const double m = static_cast<double>(c.m_malware);
  r.uer = static_cast<double>(c.m_evaded) / m;
  r.tsr = static_cast<double>(c.m_target) / m;
  if (c.m_evaded > 0) r.cts = static_cast<double>(c.m_target) / static_cast<double>(c.m_evaded);
  return r;
}

ClassificationReport classification_metrics(std::span<const int> pred, std::span<const int> truth, int class_count) {
  if (pred.size() != truth.size()) throw DataError("classification_metrics: length mismatch");
  if (truth.empty()) throw DataError("classification_metrics: no samples");
  const auto cc = static_cast<std::size_t>(class_count);
  std::vector<long> tp(cc, 0), fp(cc, 0), fn(cc, 0), support(cc, 0);
  long correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i];
    const int p = pred[i];
    if (t < 0 || t >= class_count || p < 0 || p >= class_count) {
      throw DataError("classification_metrics: label out of range");
    }
    ++support[static_cast<std::size_t>(t)];
    if (t == p) {
      ++correct;
      ++tp[static_cast<std::size_t>(t)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }
  ClassificationReport r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  r.per_class_recall.assign(cc, std::numeric_limits<double>::quiet_NaN());
  r.per_class_f1.assign(cc, std::numeric_limits<double>::quiet_NaN());
  double f1_sum = 0.0;
  double recall_sum = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < cc; ++c) {
    if (support[c] == 0) {
      r.excluded_absent = true;
      continue;
    }
    const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    const double f1 = denom > 0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
    const double recall = static_cast<double>(tp[c]) / static_cast<double>(support[c]);
    r.per_class_f1[c] = f1;
    r.per_class_recall[c] = recall;
    f1_sum += f1;
    recall_sum += recall;
    ++present;
  }
  r.macro_f1 = f1_sum / present;
  r.macro_recall = recall_sum / present;
  return r;
}

double macro_f1(std::span<const int> pred, std::span<const int> truth, int class_count) {
  return classification_metrics(pred, truth, class_count).macro_f1;
}

MetricRecord make_record(const std::string& method, int k, std::uint64_t seed, const EvasionCounts& counts) {
  const EvasionRates rates = evasion_metrics(counts);
  MetricRecord r;
  r.method = method;
  r.k = k;
  r.seed = seed;
  r.counts = counts;
  r.uer = rates.uer;
  r.tsr = rates.tsr;
  r.cts = rates.cts;
  r.recall6 = static_cast<double>(counts.m_malware - counts.m_evaded) / static_cast<double>(counts.m_malware);
  return r;
}

namespace {

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("bad number '" + s + "' in records CSV");
  return v;
}

template <typename T>
T parse_int(const std::string& s) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("bad integer '" + s + "' in records CSV");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

constexpr const char* kRecordHeader =
    "method,k,seed,m_malware,m_evaded,m_target,uer,tsr,cts,recall6,accuracy,macro_f1,macro_recall";

}  // namespace

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw DataError("summarize: empty cell");
  Summary s;
  s.count = static_cast<int>(values.size());
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / s.count;
  if (s.count == 1) {
    s.single = true;
  } else {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / (s.count - 1));
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  s.q25 = quantile(sorted, 0.25);
  s.median = quantile(sorted, 0.5);
  s.q75 = quantile(sorted, 0.75);
  return s;
}

std::vector<AggregateCell> aggregate_runs(std::span<const MetricRecord> records) {
  std::map<std::pair<std::string, int>, std::vector<const MetricRecord*>> groups;
  for (const MetricRecord& r : records) groups[{r.method, r.k}].push_back(&r);
  std::vector<AggregateCell> cells;
  for (const auto& [key, group] : groups) {
    AggregateCell cell;
    cell.method = key.first;
    cell.k = key.second;
    cell.runs = static_cast<int>(group.size());
    std::vector<double> uer, tsr, cts, recall6;
    for (const MetricRecord* r : group) {
      uer.push_back(r->uer);
      tsr.push_back(r->tsr);
      recall6.push_back(r->recall6);
      if (r->cts) {
        cts.push_back(*r->cts);
      } else {
        ++cell.cts_missing;
      }
    }
    cell.uer = summarize(uer);
    cell.tsr = summarize(tsr);
    cell.recall6 = summarize(recall6);
    if (!cts.empty()) cell.cts = summarize(cts);
    cells.push_back(std::move(cell));
  }
  return cells;
}

std::string records_to_csv(std::span<const MetricRecord> records) {
  std::ostringstream os;
  os << kRecordHeader << '\n';
  for (const MetricRecord& r : records) {
    os << r.method << ',' << r.k << ',' << r.seed << ',' << r.counts.m_malware << ',' << r.counts.m_evaded << ','
       << r.counts.m_target << ',' << num(r.uer) << ',' << num(r.tsr) << ',' << opt_num(r.cts) << ','
       << num(r.recall6) << ',' << opt_num(r.accuracy) << ',' << opt_num(r.macro_f1) << ','
       << opt_num(r.macro_recall) << '\n';
  }
  return os.str();
}

std::vector<MetricRecord> records_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kRecordHeader) throw DataError("records CSV: unexpected header");
  std::vector<MetricRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 13) throw DataError("records CSV: expected 13 fields in '" + line + "'");
    MetricRecord r;
    r.method = f[0];
    r.k = parse_int<int>(f[1]);
    r.seed = parse_int<std::uint64_t>(f[2]);
    r.counts = {parse_int<long>(f[3]), parse_int<long>(f[4]), parse_int<long>(f[5])};
    r.uer = parse_opt(f[6]).value_or(0.0);
    r.tsr = parse_opt(f[7]).value_or(0.0);
    r.cts = parse_opt(f[8]);
    r.recall6 = parse_opt(f[9]).value_or(0.0);
    r.accuracy = parse_opt(f[10]);
    r.macro_f1 = parse_opt(f[11]);
    r.macro_recall = parse_opt(f[12]);
    out.push_back(std::move(r));
  }
  return out;
}

std::string aggregate_to_csv(std::span<const AggregateCell> cells) {
  std::ostringstream os;
  os << "method,k,runs,uer_mean,uer_std,tsr_mean,tsr_std,cts_mean,cts_std,cts_count,cts_missing,recall6_mean,"
        "recall6_std,single_run\n";
  for (const AggregateCell& c : cells) {
    os << c.method << ',' << c.k << ',' << c.runs << ',' << num(c.uer.mean) << ',' << num(c.uer.stddev) << ','
       << num(c.tsr.mean) << ',' << num(c.tsr.stddev) << ',';
    if (c.cts) {
      os << num(c.cts->mean) << ',' << num(c.cts->stddev) << ',' << c.cts->count;
    } else {
      os << ",,0";
    }
    os << ',' << c.cts_missing << ',' << num(c.recall6.mean) << ',' << num(c.recall6.stddev) << ','
       << (c.runs == 1 ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string plot_data_to_csv(std::span<const AggregateCell> cells) {
  std::ostringstream os;
  os << "method,k,metric,mean,std,q25,median,q75,count\n";
  auto row = [&os](const AggregateCell& c, const char* metric, const Summary& s) {
    os << c.method << ',' << c.k << ',' << metric << ',' << num(s.mean) << ',' << num(s.stddev) << ','
       << num(s.q25) << ',' << num(s.median) << ',' << num(s.q75) << ',' << s.count << '\n';
  };
  for (const AggregateCell& c : cells) {
    row(c, "uer", c.uer);
    row(c, "tsr", c.tsr);
    if (c.cts) row(c, "cts", *c.cts);
  }
  return os.str();
}

}  // namespace impinj
