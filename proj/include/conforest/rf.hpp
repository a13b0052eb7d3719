#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "conforest/types.hpp"

namespace conforest {
class Rng;
}

namespace conforest::rf {

// Flat CART node; children index into the owning tree's node vector, -1 for
// leaves. Stored in preorder.
struct CartNode {
  Index feature = -1;
  double threshold = 0.0;
  Index left = -1;
  Index right = -1;
  double value = 0.0;  // leaf mean; internal nodes keep it for debugging

  bool is_leaf() const { return left < 0; }
};

struct CartTree {
  std::vector<CartNode> nodes;
};

struct RfConfig {
  int n_trees = 100;
  int max_depth = 12;
  Index min_samples_leaf = 5;
  double features_per_split = 1.0 / 3.0;  // fraction of features per node
  bool bootstrap = true;
  std::uint64_t seed = 0;
  int n_threads = 1;
};

void validate(const RfConfig& config);

struct Forest {
  std::vector<CartTree> trees;
  RfConfig config;
};

// Greedy variance-minimizing CART. Split candidates are midpoints between
// consecutive sorted unique feature values over a seeded feature subset per
// node; ties break toward the lowest feature index, then lowest threshold.
CartTree cart_fit(const ConstMatrixRef& x, const ConstVectorRef& y,
                  const RfConfig& config, conforest::Rng& rng);

double cart_predict(const CartTree& tree, const ConstVectorRef& x);

Forest rf_fit(const ConstMatrixRef& x, const ConstVectorRef& y,
              const RfConfig& config);

double rf_predict(const Forest& forest, const ConstVectorRef& x);
Vector rf_predict_batch(const Forest& forest, const ConstMatrixRef& x);

// RF on absolute residuals |y_i - prediction_i| of the point model over the
// proper training set; its output serves as the per-sample uncertainty.
Forest fit_residual_model(const ConstVectorRef& train_predictions,
                          const ConstVectorRef& train_targets,
                          const ConstMatrixRef& x_train,
                          const RfConfig& config);

std::string to_json(const Forest& forest);
Forest forest_from_json(const std::string& json_text);
void save_forest(const std::string& path, const Forest& forest);
Forest load_forest(const std::string& path);

}  // namespace conforest::rf
