#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "conforest/dataset.hpp"
#include "conforest/nn.hpp"
#include "conforest/types.hpp"

namespace conforest::drf {

// Complete binary tree of a fixed depth. Split nodes live in heap order
// (children of split node i are 2i+1 and 2i+2); the 2^depth leaves sit below
// them, left to right. phi maps each split node to a backbone output column.
struct TreeTopology {
  int depth = 0;
  std::vector<Index> phi;

  Index n_split_nodes() const { return (Index{1} << depth) - 1; }
  Index n_leaves() const { return Index{1} << depth; }
};

void validate(const TreeTopology& topo, Index backbone_width);

struct Tree {
  TreeTopology topology;
  Vector leaf_mu;      // per-leaf Gaussian mean
  Vector leaf_sigma2;  // per-leaf Gaussian variance, floored
};

// Desk-scale defaults: 5 trees of depth 4 routed off a [64, 32] backbone.
// The last backbone width must cover 2^tree_depth - 1 routing outputs.
struct DrfConfig {
  std::vector<Index> backbone_layers{64, 32};
  double dropout_prob = 0.0;
  bool use_batchnorm = true;
  double learning_rate = 1e-4;
  Index batch_size = 256;
  int n_trees = 5;
  int tree_depth = 4;
  int leaf_update_iterations = 20;
  double variance_floor = 1e-6;
  std::uint64_t seed = 0;
};

void validate(const DrfConfig& config);

struct Forest {
  nn::MlpModel backbone;
  std::vector<Tree> trees;
  DrfConfig config;

  Index n_trees() const { return static_cast<Index>(trees.size()); }
};

struct DrfPrediction {
  double mean = 0.0;
  double mixture_std = 0.0;   // sqrt of the mixture (forest) variance
  double ensemble_std = 0.0;  // spread of tree point predictions
};

// Seeded construction: injective random phi per tree, leaf means drawn from
// the training targets, leaf variances set to the target population variance.
Forest init_forest(const DrfConfig& config, Index input_dim,
                   const ConstVectorRef& train_targets);

// s_n = sigmoid(backbone_outputs[phi(n)]), the left-routing probability.
Vector split_probabilities(const TreeTopology& topo,
                           const ConstVectorRef& backbone_outputs);

// P(leaf | x): product of s_n (left) or 1-s_n (right) along each root path.
Vector leaf_reach_probabilities(const TreeTopology& topo,
                                const ConstVectorRef& split_probs);

// Log-space counterpart used wherever products could underflow.
Vector leaf_log_reach_probabilities(const TreeTopology& topo,
                                    const ConstVectorRef& backbone_outputs);

double tree_predict(const Tree& tree, const ConstVectorRef& leaf_probs);

// Mixture variance by the law of total variance:
// sum_l P sigma_l^2 + sum_l P mu_l^2 - (sum_l P mu_l)^2.
double tree_variance(const Tree& tree, const ConstVectorRef& leaf_probs);

double forest_predict(const Forest& forest, const ConstVectorRef& x);
double forest_variance(const Forest& forest, const ConstVectorRef& x);

// Population variance (divide by K) of the tree point predictions.
double ensemble_variance(const Forest& forest, const ConstVectorRef& x);

DrfPrediction predict(const Forest& forest, const ConstVectorRef& x);
std::vector<DrfPrediction> predict_batch(const Forest& forest,
                                         const ConstMatrixRef& x);

// Mean over samples of -(1/K) sum_k log sum_l P_k(l|x) N(y; mu_l, sigma_l^2),
// evaluated with the backbone in eval mode.
double drf_nll(const Forest& forest, const ConstMatrixRef& x,
               const ConstVectorRef& y);

// Same objective given precomputed backbone outputs (one row per sample).
double drf_nll_from_outputs(const Forest& forest,
                            const ConstMatrixRef& backbone_outputs,
                            const ConstVectorRef& y);

// d(nll)/d(backbone outputs); pairs with drf_nll_from_outputs.
Matrix drf_nll_backbone_grad(const Forest& forest,
                             const ConstMatrixRef& backbone_outputs,
                             const ConstVectorRef& y);

// Mixture NLL of one tree given fixed per-sample leaf probabilities.
double tree_nll(const Tree& tree, const ConstMatrixRef& leaf_probs,
                const ConstVectorRef& y);

// One EM pass: responsibilities from the current leaf table, then
// responsibility-weighted mean/variance re-estimation. Leaves with total
// responsibility below kResponsibilityFloor keep their parameters.
void update_leaves_once(Tree& tree, const ConstMatrixRef& leaf_probs,
                        const ConstVectorRef& y, double variance_floor);

inline constexpr double kResponsibilityFloor = 1e-12;

// n_iterations EM passes per tree with frozen routing. leaf_probs_per_tree
// holds one (n x n_leaves) matrix per tree.
void update_leaves(std::vector<Tree>& trees,
                   const std::vector<Matrix>& leaf_probs_per_tree,
                   const ConstVectorRef& y, int n_iterations,
                   double variance_floor);

// Convenience: routes x through the backbone in eval mode, then updates.
void update_leaves(Forest& forest, const ConstMatrixRef& x,
                   const ConstVectorRef& y, int n_iterations);

// Per-tree leaf probabilities for a batch (n x n_leaves each).
std::vector<Matrix> routing_probabilities(const Forest& forest,
                                          const ConstMatrixRef& backbone_outputs);

struct TrainResult {
  Forest forest;  // best-validation snapshot
  nn::TrainHistory history;
};

// Alternates one epoch of backbone Adam steps on the NLL (leaves frozen)
// with EM leaf updates on the epoch's cached routing probabilities (backbone
// frozen). Validation NLL drives the same patience schedule as nn::train.
TrainResult train_drf(const Forest& forest, const data::Dataset& train_set,
                      const data::Dataset& val_set,
                      const nn::TrainSchedule& schedule);

// Central-difference check of drf_nll_backbone_grad plus the full chain into
// backbone parameters. Returns the max relative error.
double grad_check(const Forest& forest, const ConstMatrixRef& x,
                  const ConstVectorRef& y, double epsilon = 1e-5,
                  nn::Mode mode = nn::Mode::kEval,
                  Index max_exact_params = 10000);

std::string to_json(const Forest& forest);
Forest forest_from_json(const std::string& json_text);
void save_forest(const std::string& path, const Forest& forest);
Forest load_forest(const std::string& path);

}  // namespace conforest::drf
