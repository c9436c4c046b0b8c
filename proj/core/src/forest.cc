#include "impinj/forest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "json.hpp"

namespace impinj {

const std::vector<double>& DecisionTree::leaf_for(std::span<const double> x) const {
  int node = 0;
  while (!nodes[static_cast<std::size_t>(node)].is_leaf()) {
    const TreeNode& n = nodes[static_cast<std::size_t>(node)];
    node = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<std::size_t>(node)].histogram;
}

namespace {

using ColMatrix = Eigen::MatrixXd;

struct Sample {
  int index;
  double weight;
};

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double score = -std::numeric_limits<double>::infinity();
};

// Sum over children of sum_c h_c^2 / W_child; larger is purer.
double purity(const std::vector<double>& left, double wl, const std::vector<double>& right, double wr) {
  double s = 0.0;
  double l = 0.0;
  double r = 0.0;
  for (std::size_t c = 0; c < left.size(); ++c) {
    l += left[c] * left[c];
    r += right[c] * right[c];
  }
  s = l / wl + r / wr;
  return s;
}

class TreeBuilder {
 public:
  TreeBuilder(const ColMatrix& x, std::span<const int> y, const std::vector<char>& binary, int class_count,
              const ForestConfig& cfg, int max_features, Rng& rng)
      : x_(x), y_(y), binary_(binary), classes_(class_count), cfg_(cfg), max_features_(max_features), rng_(rng) {
    features_.resize(static_cast<std::size_t>(x.cols()));
    std::iota(features_.begin(), features_.end(), 0);
  }

  DecisionTree build(std::vector<Sample> samples) {
    DecisionTree tree;
    grow(tree, std::move(samples), 0);
    return tree;
  }

 private:
  int grow(DecisionTree& tree, std::vector<Sample> samples, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.depth = std::max(tree.depth, depth);

    std::vector<double> hist(static_cast<std::size_t>(classes_), 0.0);
    double total = 0.0;
    for (const Sample& s : samples) {
      hist[static_cast<std::size_t>(y_[static_cast<std::size_t>(s.index)])] += s.weight;
      total += s.weight;
    }
    const bool pure = std::count_if(hist.begin(), hist.end(), [](double h) { return h > 0.0; }) <= 1;
    if (pure || depth >= cfg_.max_depth || total < 2.0 * cfg_.min_samples_leaf) {
      tree.nodes[static_cast<std::size_t>(id)].histogram = std::move(hist);
      return id;
    }

    const SplitChoice split = find_split(samples, hist, total);
    if (split.feature < 0) {
      tree.nodes[static_cast<std::size_t>(id)].histogram = std::move(hist);
      return id;
    }

    std::vector<Sample> left;
    std::vector<Sample> right;
    for (const Sample& s : samples) {
      (x_(s.index, split.feature) <= split.threshold ? left : right).push_back(s);
    }
    samples.clear();
    samples.shrink_to_fit();
    const int l = grow(tree, std::move(left), depth + 1);
    const int r = grow(tree, std::move(right), depth + 1);
    TreeNode& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  // Draws features without replacement until `max_features` non-constant
  // ones were evaluated or every feature was visited.
  SplitChoice find_split(const std::vector<Sample>& samples, const std::vector<double>& hist, double total) {
    SplitChoice best;
    const std::size_t d = features_.size();
    int evaluated = 0;
    std::vector<double> right(static_cast<std::size_t>(classes_));
    std::vector<double> left(static_cast<std::size_t>(classes_));
    const double min_leaf = cfg_.min_samples_leaf;
    for (std::size_t i = 0; i < d && evaluated < max_features_; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, d - 1);
      std::swap(features_[i], features_[pick(rng_)]);
      const int f = features_[i];
      if (binary_[static_cast<std::size_t>(f)]) {
        std::fill(right.begin(), right.end(), 0.0);
        double wr = 0.0;
        for (const Sample& s : samples) {
          if (x_(s.index, f) > 0.5) {
            right[static_cast<std::size_t>(y_[static_cast<std::size_t>(s.index)])] += s.weight;
            wr += s.weight;
          }
        }
        const double wl = total - wr;
        if (wr <= 0.0 || wl <= 0.0) continue;
        ++evaluated;
        if (wr < min_leaf || wl < min_leaf) continue;
        for (std::size_t c = 0; c < left.size(); ++c) left[c] = hist[c] - right[c];
        const double score = purity(left, wl, right, wr);
        if (score > best.score) best = {f, 0.5, score};
        continue;
      }
      std::vector<std::pair<double, int>> order;
      order.reserve(samples.size());
      for (std::size_t k = 0; k < samples.size(); ++k) order.emplace_back(x_(samples[k].index, f), static_cast<int>(k));
      std::sort(order.begin(), order.end());
      if (order.front().first == order.back().first) continue;
      ++evaluated;
      std::fill(left.begin(), left.end(), 0.0);
      double wl = 0.0;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        const Sample& s = samples[static_cast<std::size_t>(order[k].second)];
        left[static_cast<std::size_t>(y_[static_cast<std::size_t>(s.index)])] += s.weight;
        wl += s.weight;
        if (order[k].first == order[k + 1].first) continue;
        const double wr = total - wl;
        if (wl < min_leaf || wr < min_leaf) continue;
        for (std::size_t c = 0; c < right.size(); ++c) right[c] = hist[c] - left[c];
        const double score = purity(left, wl, right, wr);
        if (score > best.score) {
          double threshold = 0.5 * (order[k].first + order[k + 1].first);
          if (threshold >= order[k + 1].first) threshold = order[k].first;
          best = {f, threshold, score};
        }
      }
    }
    return best;
  }

  const ColMatrix& x_;
  std::span<const int> y_;
  const std::vector<char>& binary_;
  int classes_;
  const ForestConfig& cfg_;
  int max_features_;
  Rng& rng_;
  std::vector<int> features_;
};

}  // namespace

ForestModel train_forest(const Matrix& x, std::span<const int> y, int class_count, const ForestConfig& cfg) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n == 0 || y.size() != n) throw DataError("train_forest: empty input or label count mismatch");
  if (cfg.n_trees < 1 || cfg.max_depth < 0 || cfg.min_samples_leaf < 1) throw ConfigError("train_forest: invalid config");
  for (int label : y) {
    if (label < 0 || label >= class_count) throw DataError("train_forest: label out of range");
  }
  const int d = static_cast<int>(x.cols());
  const int max_features = std::clamp(cfg.max_features.value_or(static_cast<int>(std::ceil(std::sqrt(static_cast<double>(d))))), 1, d);

  const ColMatrix xc = x;
  std::vector<char> binary(static_cast<std::size_t>(d), 1);
  for (int f = 0; f < d; ++f) {
    for (Eigen::Index i = 0; i < xc.rows(); ++i) {
      const double v = xc(i, f);
      if (v != 0.0 && v != 1.0) {
        binary[static_cast<std::size_t>(f)] = 0;
        break;
      }
    }
  }

  ForestModel model;
  model.feature_count = d;
  model.class_count = class_count;
  model.trees.resize(static_cast<std::size_t>(cfg.n_trees));
  std::vector<std::vector<int>> in_bag_counts(static_cast<std::size_t>(cfg.n_trees));

  auto build_tree = [&](int t) {
    Rng rng(derive_seed(cfg.seed, "tree" + std::to_string(t)));
    std::vector<int> counts(n, 0);
    if (cfg.bootstrap) {
      std::uniform_int_distribution<std::size_t> draw(0, n - 1);
      for (std::size_t i = 0; i < n; ++i) ++counts[draw(rng)];
    } else {
      std::fill(counts.begin(), counts.end(), 1);
    }
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < n; ++i) {
      if (counts[i] > 0) samples.push_back({static_cast<int>(i), static_cast<double>(counts[i])});
    }
    TreeBuilder builder(xc, y, binary, class_count, cfg, max_features, rng);
    model.trees[static_cast<std::size_t>(t)] = builder.build(std::move(samples));
    in_bag_counts[static_cast<std::size_t>(t)] = std::move(counts);
  };

  const int threads = std::max(1, std::min(cfg.threads, cfg.n_trees));
  if (threads == 1) {
    for (int t = 0; t < cfg.n_trees; ++t) build_tree(t);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (int t = w; t < cfg.n_trees; t += threads) build_tree(t);
      });
    }
    for (auto& th : pool) th.join();
  }

  // Out-of-bag estimate.
  std::vector<double> row(static_cast<std::size_t>(d));
  int scored = 0;
  int correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> acc(static_cast<std::size_t>(class_count), 0.0);
    bool any = false;
    for (int c = 0; c < d; ++c) row[static_cast<std::size_t>(c)] = x(static_cast<Eigen::Index>(i), c);
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
      if (in_bag_counts[t][i] > 0) continue;
      const auto& h = model.trees[t].leaf_for(row);
      const double tot = std::accumulate(h.begin(), h.end(), 0.0);
      for (std::size_t c = 0; c < h.size(); ++c) acc[c] += h[c] / tot;
      any = true;
    }
    if (!any) continue;
    ++scored;
    if (argmax(acc) == y[i]) ++correct;
  }
  model.oob_accuracy = scored > 0 ? static_cast<double>(correct) / scored : std::numeric_limits<double>::quiet_NaN();
  return model;
}

Matrix predict_proba(const ForestModel& model, const Matrix& x) {
  if (x.cols() != model.feature_count) throw ShapeError("forest predict: feature width mismatch");
  Matrix out = Matrix::Zero(x.rows(), model.class_count);
  std::vector<double> row(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) row[static_cast<std::size_t>(c)] = x(i, c);
    for (const DecisionTree& tree : model.trees) {
      const auto& h = tree.leaf_for(row);
      const double tot = std::accumulate(h.begin(), h.end(), 0.0);
      for (std::size_t c = 0; c < h.size(); ++c) out(i, static_cast<Eigen::Index>(c)) += h[c] / tot;
    }
  }
  out /= static_cast<double>(model.trees.size());
  return out;
}

std::string forest_to_json(const ForestModel& model) {
  nlohmann::json j;
  j["feature_count"] = model.feature_count;
  j["class_count"] = model.class_count;
  j["oob_accuracy"] = std::isnan(model.oob_accuracy) ? nlohmann::json(nullptr) : nlohmann::json(model.oob_accuracy);
  auto& trees = j["trees"] = nlohmann::json::array();
  for (const DecisionTree& t : model.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& n : t.nodes) {
      if (n.is_leaf()) {
        nodes.push_back({{"h", n.histogram}});
      } else {
        nodes.push_back({{"f", n.feature}, {"t", n.threshold}, {"l", n.left}, {"r", n.right}});
      }
    }
    trees.push_back({{"depth", t.depth}, {"nodes", std::move(nodes)}});
  }
  return j.dump();
}

ForestModel forest_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ForestModel m;
  m.feature_count = j.at("feature_count").get<int>();
  m.class_count = j.at("class_count").get<int>();
  m.oob_accuracy = j.at("oob_accuracy").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                  : j.at("oob_accuracy").get<double>();
  for (const auto& jt : j.at("trees")) {
    DecisionTree t;
    t.depth = jt.at("depth").get<int>();
    for (const auto& jn : jt.at("nodes")) {
      TreeNode n;
      if (jn.contains("h")) {
        n.histogram = jn.at("h").get<std::vector<double>>();
      } else {
        n.feature = jn.at("f").get<int>();
        n.threshold = jn.at("t").get<double>();
        n.left = jn.at("l").get<int>();
        n.right = jn.at("r").get<int>();
      }
      t.nodes.push_back(std::move(n));
    }
    m.trees.push_back(std::move(t));
  }
  return m;
}

}  // namespace impinj
