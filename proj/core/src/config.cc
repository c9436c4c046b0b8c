#include "impinj/config.h"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <tuple>

namespace impinj {

double TomlValue::as_double() const {
  if (kind == Kind::kFloat) return real;
  if (kind == Kind::kInt) return static_cast<double>(integer);
  throw ConfigError("expected a number");
}

long long TomlValue::as_int() const {
  if (kind != Kind::kInt) throw ConfigError("expected an integer");
  return integer;
}

bool TomlValue::as_bool() const {
  if (kind != Kind::kBool) throw ConfigError("expected a boolean");
  return boolean;
}

const std::string& TomlValue::as_string() const {
  if (kind != Kind::kString) throw ConfigError("expected a string");
  return text;
}

std::vector<double> TomlValue::as_double_array() const {
  if (kind != Kind::kArray) throw ConfigError("expected an array");
  std::vector<double> out;
  for (const TomlValue& v : items) out.push_back(v.as_double());
  return out;
}

std::vector<long long> TomlValue::as_int_array() const {
  if (kind != Kind::kArray) throw ConfigError("expected an array");
  std::vector<long long> out;
  for (const TomlValue& v : items) out.push_back(v.as_int());
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

TomlValue parse_scalar(const std::string& raw) {
  const std::string s = trim(raw);
  TomlValue v;
  if (s.empty()) throw ConfigError("missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw ConfigError("unterminated string " + s);
    v.kind = TomlValue::Kind::kString;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      if (s[i] == '\\' && i + 2 < s.size()) {
        const char n = s[++i];
        v.text += n == 'n' ? '\n' : n == 't' ? '\t' : n;
      } else {
        v.text += s[i];
      }
    }
    return v;
  }
  if (s == "true" || s == "false") {
    v.kind = TomlValue::Kind::kBool;
    v.boolean = s == "true";
    return v;
  }
  std::string digits;
  for (char c : s) {
    if (c != '_') digits += c;
  }
  const char* b = digits.data();
  const char* e = b + digits.size();
  const bool looks_float = digits.find_first_of(".eE") != std::string::npos;
  if (!looks_float) {
    long long i = 0;
    auto res = std::from_chars(b + (digits[0] == '+' ? 1 : 0), e, i);
    if (res.ec == std::errc() && res.ptr == e) {
      v.kind = TomlValue::Kind::kInt;
      v.integer = i;
      return v;
    }
  }
  double d = 0.0;
  auto res = std::from_chars(b + (digits[0] == '+' ? 1 : 0), e, d);
  if (res.ec != std::errc() || res.ptr != e) throw ConfigError("cannot parse value '" + s + "'");
  v.kind = TomlValue::Kind::kFloat;
  v.real = d;
  return v;
}

}  // namespace

TomlValue parse_toml_value(const std::string& raw) {
  const std::string s = trim(raw);
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') throw ConfigError("unterminated array " + s);
    TomlValue v;
    v.kind = TomlValue::Kind::kArray;
    const std::string inner = trim(s.substr(1, s.size() - 2));
    if (inner.empty()) return v;
    std::string cur;
    bool in_string = false;
    for (char c : inner) {
      if (c == '"') in_string = !in_string;
      if (c == ',' && !in_string) {
        if (!trim(cur).empty()) v.items.push_back(parse_scalar(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!trim(cur).empty()) v.items.push_back(parse_scalar(cur));
    return v;
  }
  return parse_scalar(s);
}

TomlDocument parse_toml(const std::string& text) {
  TomlDocument doc;
  std::istringstream is(text);
  std::string line;
  std::string table;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    try {
      if (s.front() == '[') {
        if (s.back() != ']') throw ConfigError("malformed table header");
        table = trim(s.substr(1, s.size() - 2));
        if (table.empty()) throw ConfigError("empty table name");
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value");
      const std::string key = trim(s.substr(0, eq));
      if (key.empty()) throw ConfigError("empty key");
      const std::string full = table.empty() ? key : table + "." + key;
      if (doc.count(full) != 0) throw ConfigError("duplicate key '" + full + "'");
      doc[full] = parse_toml_value(s.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return doc;
}

namespace {

using Setter = std::function<void(RunConfig&, const TomlValue&)>;

int to_int(const TomlValue& v) { return static_cast<int>(v.as_int()); }

std::pair<double, double> to_range(const TomlValue& v) {
  const auto r = v.as_double_array();
  if (r.size() != 2 || !(r[0] > 0.0) || r[0] > r[1]) throw ConfigError("expected [low, high] with 0 < low <= high");
  return {r[0], r[1]};
}

std::vector<int> to_int_vector(const TomlValue& v) {
  std::vector<int> out;
  for (long long x : v.as_int_array()) out.push_back(static_cast<int>(x));
  return out;
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data.path", [](RunConfig& c, const TomlValue& v) { c.dataset = v.as_string(); }},
      {"data.format", [](RunConfig& c, const TomlValue& v) { c.dataset_format = v.as_string(); }},
      {"data.fractions",
       [](RunConfig& c, const TomlValue& v) {
         const auto f = v.as_double_array();
         if (f.size() != 4) throw ConfigError("fractions needs 4 entries");
         c.fractions = {f[0], f[1], f[2], f[3]};
       }},
      {"run.seeds",
       [](RunConfig& c, const TomlValue& v) {
         c.seeds.clear();
         for (long long s : v.as_int_array()) {
           if (s < 0) throw ConfigError("seeds must be nonnegative");
           c.seeds.push_back(static_cast<std::uint64_t>(s));
         }
       }},
      {"run.k_grid", [](RunConfig& c, const TomlValue& v) { c.k_grid = to_int_vector(v); }},
      {"run.out_dir", [](RunConfig& c, const TomlValue& v) { c.out_dir = v.as_string(); }},
      {"forest.n_trees", [](RunConfig& c, const TomlValue& v) { c.ensemble.forest.n_trees = to_int(v); }},
      {"forest.max_depth", [](RunConfig& c, const TomlValue& v) { c.ensemble.forest.max_depth = to_int(v); }},
      {"forest.min_samples_leaf",
       [](RunConfig& c, const TomlValue& v) { c.ensemble.forest.min_samples_leaf = to_int(v); }},
      {"forest.max_features", [](RunConfig& c, const TomlValue& v) { c.ensemble.forest.max_features = to_int(v); }},
      {"forest.bootstrap", [](RunConfig& c, const TomlValue& v) { c.ensemble.forest.bootstrap = v.as_bool(); }},
      {"forest.threads", [](RunConfig& c, const TomlValue& v) { c.ensemble.forest.threads = to_int(v); }},
      {"logistic.l2", [](RunConfig& c, const TomlValue& v) { c.ensemble.logistic.l2 = v.as_double(); }},
      {"logistic.lr", [](RunConfig& c, const TomlValue& v) { c.ensemble.logistic.lr = v.as_double(); }},
      {"logistic.max_iters", [](RunConfig& c, const TomlValue& v) { c.ensemble.logistic.max_iters = to_int(v); }},
      {"logistic.tol", [](RunConfig& c, const TomlValue& v) { c.ensemble.logistic.tol = v.as_double(); }},
      {"ensemble.grid_step", [](RunConfig& c, const TomlValue& v) { c.ensemble.grid_step = v.as_double(); }},
      {"encoder.hidden1", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.hidden1 = to_int(v); }},
      {"encoder.hidden2", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.hidden2 = to_int(v); }},
      {"encoder.embedding_dim",
       [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.embedding_dim = to_int(v); }},
      {"encoder.dropout", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.dropout = v.as_double(); }},
      {"encoder.arc_scale", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.arc_scale = v.as_double(); }},
      {"encoder.arc_margin", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.arc_margin = v.as_double(); }},
      {"encoder.temperature",
       [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.temperature = v.as_double(); }},
      {"encoder.supcon_weight",
       [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.supcon_weight = v.as_double(); }},
      {"encoder.epochs", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.epochs = to_int(v); }},
      {"encoder.batch_size", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.batch_size = to_int(v); }},
      {"encoder.lr", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.lr = v.as_double(); }},
      {"encoder.patience", [](RunConfig& c, const TomlValue& v) { c.ensemble.encoder.patience = to_int(v); }},
      {"distill.temperature", [](RunConfig& c, const TomlValue& v) { c.distill.temperature = v.as_double(); }},
      {"distill.alpha", [](RunConfig& c, const TomlValue& v) { c.distill.alpha = v.as_double(); }},
      {"distill.epochs", [](RunConfig& c, const TomlValue& v) { c.distill.epochs = to_int(v); }},
      {"distill.batch_size", [](RunConfig& c, const TomlValue& v) { c.distill.batch_size = to_int(v); }},
      {"distill.lr", [](RunConfig& c, const TomlValue& v) { c.distill.lr = v.as_double(); }},
      {"distill.dropout", [](RunConfig& c, const TomlValue& v) { c.distill.dropout = v.as_double(); }},
      {"distill.hidden1", [](RunConfig& c, const TomlValue& v) { c.distill.hidden1 = to_int(v); }},
      {"distill.hidden2", [](RunConfig& c, const TomlValue& v) { c.distill.hidden2 = to_int(v); }},
      {"distill.hidden3", [](RunConfig& c, const TomlValue& v) { c.distill.hidden3 = to_int(v); }},
      {"cvae.lambda_r", [](RunConfig& c, const TomlValue& v) { c.cvae.lambda_r = v.as_double(); }},
      {"cvae.beta", [](RunConfig& c, const TomlValue& v) { c.cvae.beta = v.as_double(); }},
      {"cvae.lambda_s", [](RunConfig& c, const TomlValue& v) { c.cvae.lambda_s = v.as_double(); }},
      {"cvae.lambda_c", [](RunConfig& c, const TomlValue& v) { c.cvae.lambda_c = v.as_double(); }},
      {"cvae.latent_dim", [](RunConfig& c, const TomlValue& v) { c.cvae.latent_dim = to_int(v); }},
      {"cvae.class_embed_dim", [](RunConfig& c, const TomlValue& v) { c.cvae.class_embed_dim = to_int(v); }},
      {"cvae.lr", [](RunConfig& c, const TomlValue& v) { c.cvae.lr = v.as_double(); }},
      {"cvae.epochs", [](RunConfig& c, const TomlValue& v) { c.cvae.epochs = to_int(v); }},
      {"cvae.patience", [](RunConfig& c, const TomlValue& v) { c.cvae.patience = to_int(v); }},
      {"cvae.batch_size", [](RunConfig& c, const TomlValue& v) { c.cvae.batch_size = to_int(v); }},
      {"cvae.clip_norm", [](RunConfig& c, const TomlValue& v) { c.cvae.clip_norm = v.as_double(); }},
      {"cvae.leaky_slope", [](RunConfig& c, const TomlValue& v) { c.cvae.leaky_slope = v.as_double(); }},
      {"cvae.enc_hidden1", [](RunConfig& c, const TomlValue& v) { c.cvae.enc_hidden1 = to_int(v); }},
      {"cvae.enc_hidden2", [](RunConfig& c, const TomlValue& v) { c.cvae.enc_hidden2 = to_int(v); }},
      {"cvae.dec_hidden1", [](RunConfig& c, const TomlValue& v) { c.cvae.dec_hidden1 = to_int(v); }},
      {"cvae.dec_hidden2", [](RunConfig& c, const TomlValue& v) { c.cvae.dec_hidden2 = to_int(v); }},
      {"cvae.dec_hidden3", [](RunConfig& c, const TomlValue& v) { c.cvae.dec_hidden3 = to_int(v); }},
      {"tuning.enabled", [](RunConfig& c, const TomlValue& v) { c.tune = v.as_bool(); }},
      {"tuning.trials", [](RunConfig& c, const TomlValue& v) { c.tuning.trials = to_int(v); }},
      {"tuning.trial_epochs", [](RunConfig& c, const TomlValue& v) { c.tuning.trial_epochs = to_int(v); }},
      {"tuning.objective_ks", [](RunConfig& c, const TomlValue& v) { c.objective_ks = to_int_vector(v); }},
      {"tuning.objective_weights",
       [](RunConfig& c, const TomlValue& v) {
         const auto w = v.as_double_array();
         if (w.size() != 3) throw ConfigError("objective_weights needs [tsr, uer, cts]");
         c.objective_weights = {w[0], w[1], w[2]};
       }},
      {"tuning.lambda_r",
       [](RunConfig& c, const TomlValue& v) {
         std::tie(c.tuning.space.lambda_r_min, c.tuning.space.lambda_r_max) = to_range(v);
       }},
      {"tuning.beta",
       [](RunConfig& c, const TomlValue& v) { std::tie(c.tuning.space.beta_min, c.tuning.space.beta_max) = to_range(v); }},
      {"tuning.lambda_s",
       [](RunConfig& c, const TomlValue& v) {
         std::tie(c.tuning.space.lambda_s_min, c.tuning.space.lambda_s_max) = to_range(v);
       }},
      {"tuning.lambda_c",
       [](RunConfig& c, const TomlValue& v) {
         std::tie(c.tuning.space.lambda_c_min, c.tuning.space.lambda_c_max) = to_range(v);
       }},
      {"tuning.lr",
       [](RunConfig& c, const TomlValue& v) { std::tie(c.tuning.space.lr_min, c.tuning.space.lr_max) = to_range(v); }},
      {"tuning.latent_dims", [](RunConfig& c, const TomlValue& v) { c.tuning.space.latent_dims = to_int_vector(v); }},
      {"tuning.class_embed_dims",
       [](RunConfig& c, const TomlValue& v) { c.tuning.space.class_embed_dims = to_int_vector(v); }},
  };
  return table;
}

void apply_entry(RunConfig& cfg, const std::string& key, const TomlValue& value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

void apply_toml(RunConfig& cfg, const TomlDocument& doc) {
  for (const auto& [key, value] : doc) apply_entry(cfg, key, value);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  apply_toml(cfg, parse_toml(ss.str()));
  if (!cfg.dataset.empty() && cfg.dataset.is_relative()) cfg.dataset = path.parent_path() / cfg.dataset;
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must look like table.key=value: '" + assignment + "'");
  apply_entry(cfg, trim(assignment.substr(0, eq)), parse_toml_value(assignment.substr(eq + 1)));
}

void validate(const RunConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (cfg.k_grid.empty()) throw ConfigError("k grid must be nonempty");
  for (std::size_t i = 0; i < cfg.k_grid.size(); ++i) {
    if (cfg.k_grid[i] <= 0) throw ConfigError("k grid entries must be positive");
    if (i > 0 && cfg.k_grid[i] <= cfg.k_grid[i - 1]) throw ConfigError("k grid must be strictly ascending");
  }
  parse_dataset_format(cfg.dataset_format);
  double total = 0.0;
  for (double f : cfg.fractions.as_array()) {
    if (f < 0.0) throw ConfigError("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  if (cfg.distill.temperature <= 0.0) throw ConfigError("distill temperature must be positive");
  if (cfg.distill.alpha < 0.0 || cfg.distill.alpha > 1.0) throw ConfigError("distill alpha must lie in [0, 1]");
  for (double w : {cfg.cvae.lambda_r, cfg.cvae.beta, cfg.cvae.lambda_s, cfg.cvae.lambda_c}) {
    if (w < 0.0) throw ConfigError("cvae loss weights must be nonnegative");
  }
  if (cfg.tuning.trials < 1) throw ConfigError("tuning budget must be at least 1 trial");
  if (cfg.objective_ks.empty()) throw ConfigError("objective_ks must be nonempty");
  if (cfg.ensemble.forest.n_trees < 1) throw ConfigError("forest needs at least one tree");
  if (cfg.ensemble.encoder.batch_size < 2) throw ConfigError("encoder batch size must be at least 2");
  if (cfg.distill.batch_size < 2) throw ConfigError("distill batch size must be at least 2");
}

}  // namespace impinj
