#include "conforest/drf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>

#include <json.hpp>

#include "conforest/errors.hpp"
#include "conforest/rng.hpp"

namespace conforest::drf {

using json = nlohmann::ordered_json;

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

// log(sigmoid(z)) without intermediate underflow.
double log_sigmoid(double z) { return -softplus(-z); }

double log_normal_pdf(double y, double mu, double sigma2) {
  const double diff = y - mu;
  return -0.5 * (kLogTwoPi + std::log(sigma2)) - diff * diff / (2.0 * sigma2);
}

double log_sum_exp(const Vector& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

void validate(const TreeTopology& topo, Index backbone_width) {
  if (topo.depth < 0) throw ConfigError("tree depth must be >= 0");
  if (static_cast<Index>(topo.phi.size()) != topo.n_split_nodes())
    throw ConfigError("phi size must equal the split node count");
  std::vector<bool> used(static_cast<std::size_t>(backbone_width), false);
  for (Index output : topo.phi) {
    if (output < 0 || output >= backbone_width)
      throw ConfigError("phi maps outside the backbone output range");
    if (used[static_cast<std::size_t>(output)])
      throw ConfigError("phi must be injective within a tree");
    used[static_cast<std::size_t>(output)] = true;
  }
}

void validate(const DrfConfig& config) {
  if (config.backbone_layers.empty())
    throw ConfigError("drf backbone needs at least one layer");
  if (config.n_trees < 1) throw ConfigError("drf: n_trees must be >= 1");
  if (config.tree_depth < 0) throw ConfigError("drf: tree_depth must be >= 0");
  if (config.leaf_update_iterations < 1)
    throw ConfigError("drf: leaf_update_iterations must be >= 1");
  if (config.variance_floor <= 0.0)
    throw ConfigError("drf: variance_floor must be positive");
  const Index width = config.backbone_layers.back();
  const Index demand = (Index{1} << config.tree_depth) - 1;
  if (width < demand)
    throw ConfigError("backbone output width " + std::to_string(width) +
                      " cannot route " + std::to_string(demand) +
                      " split nodes");
}

Forest init_forest(const DrfConfig& config, Index input_dim,
                   const ConstVectorRef& train_targets) {
  validate(config);
  if (train_targets.size() == 0)
    throw DataError("init_forest: empty training targets");

  nn::MlpConfig backbone_config;
  backbone_config.layer_sizes = config.backbone_layers;
  backbone_config.dropout_prob = config.dropout_prob;
  backbone_config.use_batchnorm = config.use_batchnorm;
  backbone_config.learning_rate = config.learning_rate;
  backbone_config.batch_size = config.batch_size;
  backbone_config.seed = config.seed;

  Forest forest;
  forest.config = config;
  forest.backbone = nn::init_mlp(backbone_config, input_dim);

  const Index width = forest.backbone.output_dim();
  const double n = static_cast<double>(train_targets.size());
  const double target_mean = train_targets.mean();
  const double target_var = std::max(
      (train_targets.array() - target_mean).square().sum() / n,
      config.variance_floor);

  Rng rng = Rng(config.seed).spawn(0x44);
  forest.trees.reserve(static_cast<std::size_t>(config.n_trees));
  for (int t = 0; t < config.n_trees; ++t) {
    Tree tree;
    tree.topology.depth = config.tree_depth;
    const Index n_split = tree.topology.n_split_nodes();
    for (auto pick : rng.sample_without_replacement(
             static_cast<std::uint64_t>(width),
             static_cast<std::uint64_t>(n_split)))
      tree.topology.phi.push_back(static_cast<Index>(pick));
    const Index n_leaves = tree.topology.n_leaves();
    tree.leaf_mu.resize(n_leaves);
    for (Index l = 0; l < n_leaves; ++l)
      tree.leaf_mu(l) = train_targets(static_cast<Index>(
          rng.uniform_index(static_cast<std::uint64_t>(train_targets.size()))));
    tree.leaf_sigma2 = Vector::Constant(n_leaves, target_var);
    validate(tree.topology, width);
    forest.trees.push_back(std::move(tree));
  }
  return forest;
}

Vector split_probabilities(const TreeTopology& topo,
                           const ConstVectorRef& backbone_outputs) {
  const Index n_split = topo.n_split_nodes();
  Vector s(n_split);
  for (Index i = 0; i < n_split; ++i) {
    const Index column = topo.phi[static_cast<std::size_t>(i)];
    if (column < 0 || column >= backbone_outputs.size())
      throw DataError("split_probabilities: phi index out of range");
    s(i) = stable_sigmoid(backbone_outputs(column));
  }
  return s;
}

Vector leaf_reach_probabilities(const TreeTopology& topo,
                                const ConstVectorRef& split_probs) {
  const Index n_split = topo.n_split_nodes();
  if (split_probs.size() != n_split)
    throw DataError("leaf_reach_probabilities: wrong split vector size");
  const Index n_leaves = topo.n_leaves();
  Vector node_prob(n_split + n_leaves);
  node_prob(0) = 1.0;
  for (Index h = 0; h < n_split; ++h) {
    node_prob(2 * h + 1) = node_prob(h) * split_probs(h);
    node_prob(2 * h + 2) = node_prob(h) * (1.0 - split_probs(h));
  }
  return node_prob.tail(n_leaves);
}

Vector leaf_log_reach_probabilities(const TreeTopology& topo,
                                    const ConstVectorRef& backbone_outputs) {
  const Index n_split = topo.n_split_nodes();
  const Index n_leaves = topo.n_leaves();
  Vector node_log(n_split + n_leaves);
  node_log(0) = 0.0;
  for (Index h = 0; h < n_split; ++h) {
    const double z = backbone_outputs(topo.phi[static_cast<std::size_t>(h)]);
    node_log(2 * h + 1) = node_log(h) + log_sigmoid(z);
    node_log(2 * h + 2) = node_log(h) + log_sigmoid(-z);
  }
  return node_log.tail(n_leaves);
}

double tree_predict(const Tree& tree, const ConstVectorRef& leaf_probs) {
  return leaf_probs.dot(tree.leaf_mu);
}

double tree_variance(const Tree& tree, const ConstVectorRef& leaf_probs) {
  const double within = leaf_probs.dot(tree.leaf_sigma2);
  const double second_moment =
      leaf_probs.dot(tree.leaf_mu.cwiseProduct(tree.leaf_mu));
  const double mean = leaf_probs.dot(tree.leaf_mu);
  const double variance = within + second_moment - mean * mean;
  if (variance < -1e-12 * std::max(1.0, second_moment))
    throw DataError("tree_variance: negative mixture variance (bug)");
  return std::max(variance, 0.0);
}

namespace {

Matrix backbone_eval_outputs(const Forest& forest, const ConstMatrixRef& x) {
  return nn::forward(forest.backbone, x, nn::Mode::kEval, 0).outputs;
}

}  // namespace

double forest_predict(const Forest& forest, const ConstVectorRef& x) {
  return predict(forest, x).mean;
}

double forest_variance(const Forest& forest, const ConstVectorRef& x) {
  const DrfPrediction p = predict(forest, x);
  return p.mixture_std * p.mixture_std;
}

double ensemble_variance(const Forest& forest, const ConstVectorRef& x) {
  const DrfPrediction p = predict(forest, x);
  return p.ensemble_std * p.ensemble_std;
}

DrfPrediction predict(const Forest& forest, const ConstVectorRef& x) {
  Matrix row(1, x.size());
  row.row(0) = x.transpose();
  return predict_batch(forest, row).front();
}

std::vector<DrfPrediction> predict_batch(const Forest& forest,
                                         const ConstMatrixRef& x) {
  const Matrix outputs = backbone_eval_outputs(forest, x);
  const Index n = x.rows();
  const double k = static_cast<double>(forest.n_trees());
  std::vector<DrfPrediction> predictions(static_cast<std::size_t>(n));

  Vector tree_means(forest.n_trees());
  for (Index i = 0; i < n; ++i) {
    double mean_sum = 0.0, var_sum = 0.0;
    Index t = 0;
    for (const Tree& tree : forest.trees) {
      const Vector s = split_probabilities(tree.topology,
                                           outputs.row(i).transpose());
      const Vector p = leaf_reach_probabilities(tree.topology, s);
      const double m = tree_predict(tree, p);
      tree_means(t++) = m;
      mean_sum += m;
      var_sum += tree_variance(tree, p);
    }
    DrfPrediction& out = predictions[static_cast<std::size_t>(i)];
    out.mean = mean_sum / k;
    out.mixture_std = std::sqrt(var_sum / k);
    // Population variance of the per-tree point predictions.
    const double spread =
        (tree_means.array() - out.mean).square().sum() / k;
    out.ensemble_std = std::sqrt(std::max(spread, 0.0));
  }
  return predictions;
}

double drf_nll_from_outputs(const Forest& forest,
                            const ConstMatrixRef& backbone_outputs,
                            const ConstVectorRef& y) {
  const Index n = backbone_outputs.rows();
  if (n != y.size()) throw DataError("drf_nll: row count mismatch");
  if (n == 0) throw DataError("drf_nll: empty batch");
  const double k = static_cast<double>(forest.n_trees());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    double sample_nll = 0.0;
    for (const Tree& tree : forest.trees) {
      const Vector log_p = leaf_log_reach_probabilities(
          tree.topology, backbone_outputs.row(i).transpose());
      Vector terms(log_p.size());
      for (Index l = 0; l < log_p.size(); ++l)
        terms(l) =
            log_p(l) + log_normal_pdf(y(i), tree.leaf_mu(l), tree.leaf_sigma2(l));
      sample_nll -= log_sum_exp(terms);
    }
    total += sample_nll / k;
  }
  return total / static_cast<double>(n);
}

double drf_nll(const Forest& forest, const ConstMatrixRef& x,
               const ConstVectorRef& y) {
  return drf_nll_from_outputs(forest, backbone_eval_outputs(forest, x), y);
}

Matrix drf_nll_backbone_grad(const Forest& forest,
                             const ConstMatrixRef& backbone_outputs,
                             const ConstVectorRef& y) {
  const Index n = backbone_outputs.rows();
  if (n != y.size()) throw DataError("drf_nll_backbone_grad: shape mismatch");
  Matrix grad = Matrix::Zero(n, backbone_outputs.cols());
  const double scale = 1.0 / (static_cast<double>(forest.n_trees()) *
                              static_cast<double>(n));

  for (const Tree& tree : forest.trees) {
    const Index n_split = tree.topology.n_split_nodes();
    const Index n_leaves = tree.topology.n_leaves();
    Vector subtree_mass(n_split + n_leaves);
    for (Index i = 0; i < n; ++i) {
      const Vector log_p = leaf_log_reach_probabilities(
          tree.topology, backbone_outputs.row(i).transpose());
      Vector terms(n_leaves);
      for (Index l = 0; l < n_leaves; ++l)
        terms(l) =
            log_p(l) + log_normal_pdf(y(i), tree.leaf_mu(l), tree.leaf_sigma2(l));
      const double log_mix = log_sum_exp(terms);
      // Posterior leaf responsibilities, then subtree sums bottom-up.
      subtree_mass.tail(n_leaves) = (terms.array() - log_mix).exp();
      for (Index h = n_split; h-- > 0;) {
        const double mass_left = subtree_mass(2 * h + 1);
        const double mass_right = subtree_mass(2 * h + 2);
        subtree_mass(h) = mass_left + mass_right;
        const double z =
            backbone_outputs(i, tree.topology.phi[static_cast<std::size_t>(h)]);
        const double s = stable_sigmoid(z);
        grad(i, tree.topology.phi[static_cast<std::size_t>(h)]) +=
            scale * (s * mass_right - (1.0 - s) * mass_left);
      }
    }
  }
  return grad;
}

double tree_nll(const Tree& tree, const ConstMatrixRef& leaf_probs,
                const ConstVectorRef& y) {
  const Index n = leaf_probs.rows();
  if (n != y.size()) throw DataError("tree_nll: shape mismatch");
  const Index n_leaves = tree.topology.n_leaves();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    Vector terms(n_leaves);
    for (Index l = 0; l < n_leaves; ++l)
      terms(l) = std::log(leaf_probs(i, l)) +
                 log_normal_pdf(y(i), tree.leaf_mu(l), tree.leaf_sigma2(l));
    total -= log_sum_exp(terms);
  }
  return total / static_cast<double>(n);
}

void update_leaves_once(Tree& tree, const ConstMatrixRef& leaf_probs,
                        const ConstVectorRef& y, double variance_floor) {
  const Index n = leaf_probs.rows();
  if (n == 0) throw DataError("update_leaves: empty batch");
  if (n != y.size()) throw DataError("update_leaves: shape mismatch");
  const Index n_leaves = tree.topology.n_leaves();

  Matrix resp(n, n_leaves);
  for (Index i = 0; i < n; ++i) {
    Vector terms(n_leaves);
    for (Index l = 0; l < n_leaves; ++l)
      terms(l) = std::log(leaf_probs(i, l)) +
                 log_normal_pdf(y(i), tree.leaf_mu(l), tree.leaf_sigma2(l));
    const double log_mix = log_sum_exp(terms);
    resp.row(i) = (terms.array() - log_mix).exp();
  }

  const Vector totals = resp.colwise().sum();
  const Vector weighted_y = resp.transpose() * y;
  for (Index l = 0; l < n_leaves; ++l) {
    if (totals(l) < kResponsibilityFloor) continue;  // starved leaf: keep
    const double mu = weighted_y(l) / totals(l);
    const double sigma2 =
        resp.col(l).dot((y.array() - mu).square().matrix()) / totals(l);
    tree.leaf_mu(l) = mu;
    tree.leaf_sigma2(l) = std::max(sigma2, variance_floor);
  }
}

void update_leaves(std::vector<Tree>& trees,
                   const std::vector<Matrix>& leaf_probs_per_tree,
                   const ConstVectorRef& y, int n_iterations,
                   double variance_floor) {
  if (trees.size() != leaf_probs_per_tree.size())
    throw DataError("update_leaves: one probability matrix per tree required");
  for (int it = 0; it < n_iterations; ++it)
    for (std::size_t t = 0; t < trees.size(); ++t)
      update_leaves_once(trees[t], leaf_probs_per_tree[t], y, variance_floor);
}

void update_leaves(Forest& forest, const ConstMatrixRef& x,
                   const ConstVectorRef& y, int n_iterations) {
  const Matrix outputs = backbone_eval_outputs(forest, x);
  const std::vector<Matrix> probs = routing_probabilities(forest, outputs);
  update_leaves(forest.trees, probs, y, n_iterations,
                forest.config.variance_floor);
}

std::vector<Matrix> routing_probabilities(const Forest& forest,
                                          const ConstMatrixRef& backbone_outputs) {
  const Index n = backbone_outputs.rows();
  std::vector<Matrix> probs;
  probs.reserve(forest.trees.size());
  for (const Tree& tree : forest.trees) {
    Matrix p(n, tree.topology.n_leaves());
    for (Index i = 0; i < n; ++i) {
      const Vector s = split_probabilities(tree.topology,
                                           backbone_outputs.row(i).transpose());
      p.row(i) = leaf_reach_probabilities(tree.topology, s).transpose();
    }
    probs.push_back(std::move(p));
  }
  return probs;
}

TrainResult train_drf(const Forest& forest, const data::Dataset& train_set,
                      const data::Dataset& val_set,
                      const nn::TrainSchedule& schedule) {
  nn::validate(schedule);
  if (train_set.rows() == 0 || val_set.rows() == 0)
    throw nn::DivergenceError("train_drf: empty train or validation set");

  Forest current = forest;
  Forest best = forest;
  nn::OptimizerState opt = nn::init_optimizer(current.backbone);
  nn::ScheduleTracker tracker(schedule, current.config.learning_rate);

  Rng shuffle_rng = Rng(current.config.seed).spawn(0x55);
  Rng dropout_rng = Rng(current.config.seed).spawn(0x66);

  const Index n_train = train_set.rows();
  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Index{0});

  for (int epoch = 1; epoch <= schedule.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);

    // Routing probabilities observed this epoch, kept for the leaf update.
    std::vector<Matrix> cached_probs;
    cached_probs.reserve(current.trees.size());
    for (const Tree& tree : current.trees)
      cached_probs.emplace_back(
          Matrix::Zero(n_train, tree.topology.n_leaves()));

    double epoch_loss = 0.0;
    Index seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(current.config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(),
                   start + static_cast<std::size_t>(current.config.batch_size));
      std::span<const Index> rows(order.data() + start, stop - start);
      const data::Dataset batch = train_set.subset(rows);

      nn::ForwardResult fr = nn::forward(current.backbone, batch.features,
                                         nn::Mode::kTrain,
                                         dropout_rng.next_u64());
      nn::apply_bn_updates(current.backbone, fr.cache);

      const double batch_nll =
          drf_nll_from_outputs(current, fr.outputs, batch.targets);
      if (!std::isfinite(batch_nll))
        throw nn::DivergenceError(
            "drf training diverged: non-finite NLL at epoch " +
                std::to_string(epoch),
            tracker.history());
      epoch_loss += batch_nll * static_cast<double>(batch.rows());
      seen += batch.rows();

      const Matrix out_grad =
          drf_nll_backbone_grad(current, fr.outputs, batch.targets);
      const nn::Gradients grads =
          nn::backward(current.backbone, fr.cache, out_grad);
      try {
        nn::adam_step(current.backbone, grads, opt, tracker.lr());
      } catch (nn::DivergenceError& e) {
        e.history = tracker.history();
        throw;
      }

      const std::vector<Matrix> batch_probs =
          routing_probabilities(current, fr.outputs);
      for (std::size_t t = 0; t < current.trees.size(); ++t)
        for (std::size_t b = 0; b < rows.size(); ++b)
          cached_probs[t].row(rows[b]) =
              batch_probs[t].row(static_cast<Index>(b));
    }

    update_leaves(current.trees, cached_probs, train_set.targets,
                  current.config.leaf_update_iterations,
                  current.config.variance_floor);

    const double val_nll =
        drf_nll(current, val_set.features, val_set.targets);
    if (!std::isfinite(val_nll))
      throw nn::DivergenceError(
          "drf training diverged: non-finite validation NLL",
          tracker.history());

    if (tracker.observe(epoch, epoch_loss / static_cast<double>(seen),
                        val_nll))
      best = current;
    if (tracker.should_stop()) break;
  }
  return TrainResult{std::move(best), tracker.take_history()};
}

namespace {

double output_grad_check(const Forest& forest, const Matrix& outputs,
                         const ConstVectorRef& y, double epsilon,
                         Index max_exact_params) {
  const Matrix analytic = drf_nll_backbone_grad(forest, outputs, y);
  Matrix probe = outputs;
  const Index total = probe.size();
  std::vector<Index> chosen(static_cast<std::size_t>(total));
  std::iota(chosen.begin(), chosen.end(), Index{0});
  if (total > max_exact_params) {
    Rng rng(0xFEED);
    chosen.clear();
    for (auto pick : rng.sample_without_replacement(
             static_cast<std::uint64_t>(total),
             static_cast<std::uint64_t>(max_exact_params)))
      chosen.push_back(static_cast<Index>(pick));
  }
  double max_rel = 0.0;
  for (Index flat : chosen) {
    double* cell = probe.data() + flat;
    const double saved = *cell;
    *cell = saved + epsilon;
    const double up = drf_nll_from_outputs(forest, probe, y);
    *cell = saved - epsilon;
    const double down = drf_nll_from_outputs(forest, probe, y);
    *cell = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    // data() walks column-major.
    const double a = analytic(flat % outputs.rows(), flat / outputs.rows());
    const double rel =
        std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-3);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace

double grad_check(const Forest& forest, const ConstMatrixRef& x,
                  const ConstVectorRef& y, double epsilon, nn::Mode mode,
                  Index max_exact_params) {
  if (forest.backbone.config.dropout_prob != 0.0)
    throw ConfigError("drf grad_check requires dropout_prob == 0");

  Forest probe = forest;
  const nn::ForwardResult fr = nn::forward(probe.backbone, x, mode, 0);

  double max_rel = output_grad_check(probe, fr.outputs, y, epsilon,
                                     max_exact_params);

  const Matrix out_grad = drf_nll_backbone_grad(probe, fr.outputs, y);
  const nn::Gradients grads = nn::backward(probe.backbone, fr.cache, out_grad);

  struct ParamRef {
    double* value;
    double analytic;
  };
  std::vector<ParamRef> params;
  for (std::size_t l = 0; l < probe.backbone.layers.size(); ++l) {
    nn::DenseLayer& layer = probe.backbone.layers[l];
    for (Index c = 0; c < layer.weights.cols(); ++c)
      for (Index r = 0; r < layer.weights.rows(); ++r)
        params.push_back({&layer.weights(r, c), grads.weights[l](r, c)});
    for (Index i = 0; i < layer.bias.size(); ++i)
      params.push_back({&layer.bias(i), grads.bias[l](i)});
    if (layer.bn) {
      for (Index i = 0; i < layer.bn->gamma.size(); ++i)
        params.push_back({&layer.bn->gamma(i), grads.gamma[l](i)});
      for (Index i = 0; i < layer.bn->beta.size(); ++i)
        params.push_back({&layer.bn->beta(i), grads.beta[l](i)});
    }
  }
  std::vector<std::size_t> chosen(params.size());
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  if (static_cast<Index>(params.size()) > max_exact_params) {
    Rng rng(0xFACE);
    const auto picks = rng.sample_without_replacement(
        params.size(), static_cast<std::uint64_t>(max_exact_params));
    chosen.assign(picks.begin(), picks.end());
  }
  for (std::size_t idx : chosen) {
    double* theta = params[idx].value;
    const double saved = *theta;
    *theta = saved + epsilon;
    const double up = drf_nll_from_outputs(
        probe, nn::forward(probe.backbone, x, mode, 0).outputs, y);
    *theta = saved - epsilon;
    const double down = drf_nll_from_outputs(
        probe, nn::forward(probe.backbone, x, mode, 0).outputs, y);
    *theta = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double analytic = params[idx].analytic;
    const double rel = std::abs(analytic - numeric) /
                       std::max(std::abs(analytic) + std::abs(numeric), 1e-3);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

namespace {
constexpr const char* kDrfFormat = "conforest.drf";
constexpr int kDrfVersion = 1;

json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Vector vector_from_json(const json& arr) {
  Vector v(static_cast<Index>(arr.size()));
  Index i = 0;
  for (const auto& x : arr) v(i++) = x.get<double>();
  return v;
}
}  // namespace

std::string to_json(const Forest& forest) {
  json j;
  j["format"] = kDrfFormat;
  j["version"] = kDrfVersion;
  j["config"] = {{"backbone_layers", forest.config.backbone_layers},
                 {"dropout_prob", forest.config.dropout_prob},
                 {"use_batchnorm", forest.config.use_batchnorm},
                 {"learning_rate", forest.config.learning_rate},
                 {"batch_size", forest.config.batch_size},
                 {"n_trees", forest.config.n_trees},
                 {"tree_depth", forest.config.tree_depth},
                 {"leaf_update_iterations", forest.config.leaf_update_iterations},
                 {"variance_floor", forest.config.variance_floor},
                 {"seed", forest.config.seed}};
  j["backbone"] = json::parse(nn::to_json(forest.backbone));
  json trees = json::array();
  for (const Tree& tree : forest.trees) {
    trees.push_back({{"depth", tree.topology.depth},
                     {"phi", tree.topology.phi},
                     {"leaf_mu", vector_to_json(tree.leaf_mu)},
                     {"leaf_sigma2", vector_to_json(tree.leaf_sigma2)}});
  }
  j["trees"] = std::move(trees);
  return j.dump(2);
}

Forest forest_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("drf file is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != kDrfFormat)
    throw DataError("drf file has wrong format tag");
  if (j.value("version", 0) != kDrfVersion)
    throw DataError("unsupported drf model version");
  Forest forest;
  const json& jc = j.at("config");
  forest.config.backbone_layers =
      jc.at("backbone_layers").get<std::vector<Index>>();
  forest.config.dropout_prob = jc.at("dropout_prob").get<double>();
  forest.config.use_batchnorm = jc.at("use_batchnorm").get<bool>();
  forest.config.learning_rate = jc.at("learning_rate").get<double>();
  forest.config.batch_size = jc.at("batch_size").get<Index>();
  forest.config.n_trees = jc.at("n_trees").get<int>();
  forest.config.tree_depth = jc.at("tree_depth").get<int>();
  forest.config.leaf_update_iterations =
      jc.at("leaf_update_iterations").get<int>();
  forest.config.variance_floor = jc.at("variance_floor").get<double>();
  forest.config.seed = jc.at("seed").get<std::uint64_t>();
  forest.backbone = nn::mlp_from_json(j.at("backbone").dump());
  for (const auto& jt : j.at("trees")) {
    Tree tree;
    tree.topology.depth = jt.at("depth").get<int>();
    tree.topology.phi = jt.at("phi").get<std::vector<Index>>();
    tree.leaf_mu = vector_from_json(jt.at("leaf_mu"));
    tree.leaf_sigma2 = vector_from_json(jt.at("leaf_sigma2"));
    validate(tree.topology, forest.backbone.output_dim());
    forest.trees.push_back(std::move(tree));
  }
  return forest;
}

void save_forest(const std::string& path, const Forest& forest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write drf file: " + path);
  out << to_json(forest) << "\n";
}

Forest load_forest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("drf file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return forest_from_json(ss.str());
}

}  // namespace conforest::drf
