#include "conforest/rf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "conforest/errors.hpp"
#include "conforest/parallel.hpp"
#include "conforest/rng.hpp"

namespace conforest::rf {

using json = nlohmann::ordered_json;

void validate(const RfConfig& config) {
  if (config.n_trees < 1) throw ConfigError("rf: n_trees must be >= 1");
  if (config.max_depth < 0) throw ConfigError("rf: max_depth must be >= 0");
  if (config.min_samples_leaf < 1)
    throw ConfigError("rf: min_samples_leaf must be >= 1");
  if (config.features_per_split <= 0.0 || config.features_per_split > 1.0)
    throw ConfigError("rf: features_per_split must lie in (0,1]");
}

namespace {

struct BestSplit {
  bool found = false;
  Index feature = -1;
  double threshold = 0.0;
  double score = std::numeric_limits<double>::infinity();  // SSE_L + SSE_R
};

// Scans midpoint thresholds of one feature in ascending order via prefix
// sums. Improvements are strict, so earlier features/thresholds win ties.
void scan_feature(const ConstMatrixRef& x, const ConstVectorRef& y,
                  const std::vector<Index>& rows, Index feature,
                  Index min_leaf, BestSplit& best) {
  const std::size_t n = rows.size();
  std::vector<Index> order(rows);
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    return x(a, feature) < x(b, feature);
  });

  std::vector<double> prefix_y(n + 1, 0.0), prefix_yy(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    prefix_y[i + 1] = prefix_y[i] + y(order[i]);
    prefix_yy[i + 1] = prefix_yy[i] + y(order[i]) * y(order[i]);
  }
  const double total_y = prefix_y[n];
  const double total_yy = prefix_yy[n];

  for (std::size_t i = 1; i < n; ++i) {
    const double lo = x(order[i - 1], feature);
    const double hi = x(order[i], feature);
    if (!(lo < hi)) continue;  // duplicate value, no boundary here
    const auto n_left = static_cast<Index>(i);
    const auto n_right = static_cast<Index>(n - i);
    if (n_left < min_leaf || n_right < min_leaf) continue;
    const double sse_left =
        prefix_yy[i] - prefix_y[i] * prefix_y[i] / static_cast<double>(n_left);
    const double right_y = total_y - prefix_y[i];
    const double sse_right = (total_yy - prefix_yy[i]) -
                             right_y * right_y / static_cast<double>(n_right);
    const double score = sse_left + sse_right;
    if (score < best.score) {
      best.found = true;
      best.feature = feature;
      best.threshold = 0.5 * (lo + hi);
      best.score = score;
    }
  }
}

struct TreeBuilder {
  const ConstMatrixRef& x;
  const ConstVectorRef& y;
  const RfConfig& config;
  Rng& rng;
  CartTree tree;

  Index build(std::vector<Index> rows, int depth) {
    const auto n = static_cast<double>(rows.size());
    double sum = 0.0, sum_sq = 0.0;
    for (Index r : rows) {
      sum += y(r);
      sum_sq += y(r) * y(r);
    }
    const double mean = sum / n;
    const double variance = std::max(0.0, sum_sq / n - mean * mean);
    // Rounding leaves ~1e-16-scale dust on constant targets; treat it as zero.
    const double variance_floor = 1e-12 * std::max(1.0, mean * mean);

    const Index node_index = static_cast<Index>(tree.nodes.size());
    tree.nodes.push_back(CartNode{-1, 0.0, -1, -1, mean});

    if (depth >= config.max_depth || variance <= variance_floor ||
        static_cast<Index>(rows.size()) < 2 * config.min_samples_leaf)
      return node_index;

    // Feature subset, scanned in ascending index order for tie stability.
    const Index d = x.cols();
    Index mtry = static_cast<Index>(
        std::floor(config.features_per_split * static_cast<double>(d)));
    mtry = std::clamp<Index>(mtry, 1, d);
    std::vector<Index> candidates;
    if (mtry == d) {
      candidates.resize(static_cast<std::size_t>(d));
      std::iota(candidates.begin(), candidates.end(), Index{0});
    } else {
      for (auto pick : rng.sample_without_replacement(
               static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(mtry)))
        candidates.push_back(static_cast<Index>(pick));
      std::sort(candidates.begin(), candidates.end());
    }

    BestSplit best;
    for (Index feature : candidates)
      scan_feature(x, y, rows, feature, config.min_samples_leaf, best);
    if (!best.found) return node_index;

    std::vector<Index> left_rows, right_rows;
    left_rows.reserve(rows.size());
    right_rows.reserve(rows.size());
    for (Index r : rows) {
      if (x(r, best.feature) <= best.threshold)
        left_rows.push_back(r);
      else
        right_rows.push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();

    tree.nodes[node_index].feature = best.feature;
    tree.nodes[node_index].threshold = best.threshold;
    const Index left = build(std::move(left_rows), depth + 1);
    tree.nodes[node_index].left = left;
    const Index right = build(std::move(right_rows), depth + 1);
    tree.nodes[node_index].right = right;
    return node_index;
  }
};

}  // namespace

CartTree cart_fit(const ConstMatrixRef& x, const ConstVectorRef& y,
                  const RfConfig& config, Rng& rng) {
  validate(config);
  if (x.rows() == 0) throw DataError("cart_fit: empty input");
  if (x.rows() != y.size()) throw DataError("cart_fit: row count mismatch");
  TreeBuilder builder{x, y, config, rng, {}};
  std::vector<Index> rows(static_cast<std::size_t>(x.rows()));
  std::iota(rows.begin(), rows.end(), Index{0});
  builder.build(std::move(rows), 0);
  return std::move(builder.tree);
}

double cart_predict(const CartTree& tree, const ConstVectorRef& x) {
  Index node = 0;
  while (!tree.nodes[static_cast<std::size_t>(node)].is_leaf()) {
    const CartNode& n = tree.nodes[static_cast<std::size_t>(node)];
    node = x(n.feature) <= n.threshold ? n.left : n.right;
  }
  return tree.nodes[static_cast<std::size_t>(node)].value;
}

Forest rf_fit(const ConstMatrixRef& x, const ConstVectorRef& y,
              const RfConfig& config) {
  validate(config);
  if (x.rows() == 0) throw DataError("rf_fit: empty input");
  if (x.rows() != y.size()) throw DataError("rf_fit: row count mismatch");

  Forest forest;
  forest.config = config;
  forest.trees.resize(static_cast<std::size_t>(config.n_trees));
  const Rng root(config.seed);
  const Index n = x.rows();

  parallel_for(config.n_trees, config.n_threads, [&](Index t) {
    Rng tree_rng = root.spawn(static_cast<std::uint64_t>(t));
    if (config.bootstrap) {
      Matrix bx(n, x.cols());
      Vector by(n);
      for (Index i = 0; i < n; ++i) {
        const Index pick = static_cast<Index>(
            tree_rng.uniform_index(static_cast<std::uint64_t>(n)));
        bx.row(i) = x.row(pick);
        by(i) = y(pick);
      }
      forest.trees[static_cast<std::size_t>(t)] =
          cart_fit(bx, by, config, tree_rng);
    } else {
      forest.trees[static_cast<std::size_t>(t)] =
          cart_fit(x, y, config, tree_rng);
    }
  });
  return forest;
}

double rf_predict(const Forest& forest, const ConstVectorRef& x) {
  double sum = 0.0;
  for (const CartTree& tree : forest.trees) sum += cart_predict(tree, x);
  return sum / static_cast<double>(forest.trees.size());
}

Vector rf_predict_batch(const Forest& forest, const ConstMatrixRef& x) {
  Vector out(x.rows());
  for (Index r = 0; r < x.rows(); ++r)
    out(r) = rf_predict(forest, Vector(x.row(r).transpose()));
  return out;
}

Forest fit_residual_model(const ConstVectorRef& train_predictions,
                          const ConstVectorRef& train_targets,
                          const ConstMatrixRef& x_train,
                          const RfConfig& config) {
  if (train_predictions.size() != train_targets.size() ||
      train_predictions.size() != x_train.rows())
    throw DataError("fit_residual_model: misaligned inputs");
  const Vector abs_residuals =
      (train_targets - train_predictions).cwiseAbs();
  return rf_fit(x_train, abs_residuals, config);
}

namespace {
constexpr const char* kRfFormat = "conforest.rf";
constexpr int kRfVersion = 1;
}  // namespace

std::string to_json(const Forest& forest) {
  json j;
  j["format"] = kRfFormat;
  j["version"] = kRfVersion;
  j["config"] = {{"n_trees", forest.config.n_trees},
                 {"max_depth", forest.config.max_depth},
                 {"min_samples_leaf", forest.config.min_samples_leaf},
                 {"features_per_split", forest.config.features_per_split},
                 {"bootstrap", forest.config.bootstrap},
                 {"seed", forest.config.seed}};
  json trees = json::array();
  for (const CartTree& tree : forest.trees) {
    json nodes = json::array();
    for (const CartNode& node : tree.nodes)
      nodes.push_back({{"feature", node.feature},
                       {"threshold", node.threshold},
                       {"left", node.left},
                       {"right", node.right},
                       {"value", node.value}});
    trees.push_back(std::move(nodes));
  }
  j["trees"] = std::move(trees);
  return j.dump(2);
}

Forest forest_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("rf file is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != kRfFormat)
    throw DataError("rf file has wrong format tag");
  if (j.value("version", 0) != kRfVersion)
    throw DataError("unsupported rf model version");
  Forest forest;
  const json& jc = j.at("config");
  forest.config.n_trees = jc.at("n_trees").get<int>();
  forest.config.max_depth = jc.at("max_depth").get<int>();
  forest.config.min_samples_leaf = jc.at("min_samples_leaf").get<Index>();
  forest.config.features_per_split =
      jc.at("features_per_split").get<double>();
  forest.config.bootstrap = jc.at("bootstrap").get<bool>();
  forest.config.seed = jc.at("seed").get<std::uint64_t>();
  for (const auto& jt : j.at("trees")) {
    CartTree tree;
    for (const auto& jn : jt)
      tree.nodes.push_back(CartNode{jn.at("feature").get<Index>(),
                                    jn.at("threshold").get<double>(),
                                    jn.at("left").get<Index>(),
                                    jn.at("right").get<Index>(),
                                    jn.at("value").get<double>()});
    forest.trees.push_back(std::move(tree));
  }
  return forest;
}

void save_forest(const std::string& path, const Forest& forest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write rf file: " + path);
  out << to_json(forest) << "\n";
}

Forest load_forest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("rf file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return forest_from_json(ss.str());
}

}  // namespace conforest::rf
