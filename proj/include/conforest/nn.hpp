#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "conforest/dataset.hpp"
#include "conforest/errors.hpp"
#include "conforest/types.hpp"

namespace conforest::nn {

struct MlpConfig {
  std::vector<Index> layer_sizes;  // output width per layer; last is the head
  double dropout_prob = 0.0;       // applied after every hidden layer
  bool use_batchnorm = false;
  double learning_rate = 1e-4;
  Index batch_size = 256;
  std::uint64_t seed = 0;
};

void validate(const MlpConfig& config, bool scalar_head);

struct BatchNorm {
  Vector gamma, beta;
  Vector running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  std::optional<BatchNorm> bn;
  bool relu = false;
  bool dropout = false;
};

struct MlpModel {
  MlpConfig config;
  Index input_dim = 0;
  std::vector<DenseLayer> layers;

  Index output_dim() const { return layers.back().weights.rows(); }
};

// Seeded He-uniform init; hidden layers get ReLU plus dropout, the final
// layer stays linear with neither.
MlpModel init_mlp(const MlpConfig& config, Index input_dim);

enum class Mode { kTrain, kEval, kMcDropout };

struct ForwardCache {
  Mode mode = Mode::kEval;
  std::vector<Matrix> inputs;        // input fed to each layer
  std::vector<Matrix> linear;        // x * W^T + b
  std::vector<Matrix> bn_xhat;       // normalized pre-scale (train-mode BN)
  std::vector<Vector> bn_mean;       // batch statistics used by this pass
  std::vector<Vector> bn_var;
  std::vector<Matrix> act_input;     // value entering the activation
  std::vector<Matrix> dropout_mask;  // entries in {0, 1/(1-p)}
  std::vector<Vector> new_running_mean;  // pending running-stat updates
  std::vector<Vector> new_running_var;
};

struct ForwardResult {
  Matrix outputs;  // n x output_dim
  ForwardCache cache;
};

// Pure: never mutates the model. Train mode computes fresh batch statistics
// and leaves the running-stat updates in the cache for the caller to apply.
// mc_dropout draws dropout masks but normalizes with running statistics.
ForwardResult forward(const MlpModel& model, const ConstMatrixRef& batch,
                      Mode mode, std::uint64_t seed);

// Commits the pending batchnorm running statistics from a train-mode pass.
void apply_bn_updates(MlpModel& model, const ForwardCache& cache);

double loss_mse(const ConstMatrixRef& outputs, const ConstVectorRef& targets);
Matrix loss_mse_grad(const ConstMatrixRef& outputs,
                     const ConstVectorRef& targets);

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> bias;
  std::vector<Vector> gamma;  // empty vectors for layers without BN
  std::vector<Vector> beta;
};

Gradients backward(const MlpModel& model, const ForwardCache& cache,
                   const ConstMatrixRef& output_grad);

struct OptimizerState {
  std::vector<Matrix> m_weights, v_weights;
  std::vector<Vector> m_bias, v_bias;
  std::vector<Vector> m_gamma, v_gamma;
  std::vector<Vector> m_beta, v_beta;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptimizerState init_optimizer(const MlpModel& model);

// Standard Adam with bias correction. Throws DivergenceError on non-finite
// gradients.
void adam_step(MlpModel& model, const Gradients& grads, OptimizerState& state,
               double lr);

struct TrainSchedule {
  int patience_lr = 5;
  int patience_stop = 10;
  double lr_decay_factor = 10.0;
  int max_epochs = 100;
  double improvement_threshold = 1e-6;  // strict decrease required
};

void validate(const TrainSchedule& schedule);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  bool improved = false;
  bool lr_decayed = false;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

// Shared patience bookkeeping for the nn and drf training loops. observe()
// returns true when the epoch improved on the best validation loss; the
// caller snapshots its model on improvement and stops when should_stop().
class ScheduleTracker {
 public:
  ScheduleTracker(const TrainSchedule& schedule, double initial_lr);

  bool observe(int epoch, double train_loss, double val_loss);
  bool should_stop() const { return stop_; }
  double lr() const { return lr_; }
  const TrainHistory& history() const { return history_; }
  TrainHistory take_history() { return std::move(history_); }

 private:
  TrainSchedule schedule_;
  double lr_;
  int streak_ = 0;
  bool stop_ = false;
  TrainHistory history_;
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg, TrainHistory h = {})
      : std::runtime_error(msg), history(std::move(h)) {}
  TrainHistory history;
};

// Loss on batch outputs; value and gradient wrt outputs.
struct RegressionLoss {
  std::function<double(const ConstMatrixRef&, const ConstVectorRef&)> value;
  std::function<Matrix(const ConstMatrixRef&, const ConstVectorRef&)> grad;
};

RegressionLoss mse_loss();

struct TrainResult {
  MlpModel model;  // best-validation snapshot
  TrainHistory history;
};

// Minibatch Adam with the patience schedule: after patience_lr consecutive
// non-improving validation epochs the learning rate is divided by
// lr_decay_factor; after patience_stop, training halts. Returns the snapshot
// with the best validation loss.
TrainResult train(const MlpModel& model, const data::Dataset& train_set,
                  const data::Dataset& val_set, const TrainSchedule& schedule,
                  const RegressionLoss& loss = mse_loss());

// Central finite differences over every parameter (seeded subset above
// max_exact_params). Returns the max relative error between analytic and
// numeric gradients. Requires dropout_prob == 0.
double grad_check(const MlpModel& model, const ConstMatrixRef& batch,
                  const ConstVectorRef& targets, double epsilon = 1e-5,
                  Mode mode = Mode::kEval, Index max_exact_params = 10000);

std::string to_json(const MlpModel& model);
MlpModel mlp_from_json(const std::string& json_text);
void save_mlp(const std::string& path, const MlpModel& model);
MlpModel load_mlp(const std::string& path);

}  // namespace conforest::nn
