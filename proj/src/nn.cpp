#include "conforest/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>

#include <json.hpp>

#include "conforest/rng.hpp"

namespace conforest::nn {

using json = nlohmann::ordered_json;

void validate(const MlpConfig& config, bool scalar_head) {
  if (config.layer_sizes.empty())
    throw ConfigError("mlp needs at least one layer");
  for (Index size : config.layer_sizes)
    if (size < 1) throw ConfigError("layer sizes must be positive");
  if (scalar_head && config.layer_sizes.back() != 1)
    throw ConfigError("regression head must have output size 1");
  if (config.dropout_prob < 0.0 || config.dropout_prob >= 1.0)
    throw ConfigError("dropout_prob must lie in [0,1)");
  if (config.learning_rate <= 0.0)
    throw ConfigError("learning_rate must be positive");
  if (config.batch_size < 1) throw ConfigError("batch_size must be positive");
}

void validate(const TrainSchedule& schedule) {
  if (schedule.patience_lr < 1 || schedule.patience_stop < 1)
    throw ConfigError("patience values must be positive");
  if (schedule.patience_stop < schedule.patience_lr)
    throw ConfigError("patience_stop must be >= patience_lr");
  if (schedule.lr_decay_factor <= 1.0)
    throw ConfigError("lr_decay_factor must exceed 1");
  if (schedule.max_epochs < 1) throw ConfigError("max_epochs must be positive");
}

MlpModel init_mlp(const MlpConfig& config, Index input_dim) {
  validate(config, /*scalar_head=*/false);
  if (input_dim < 0) throw ConfigError("input_dim must be >= 0");
  MlpModel model;
  model.config = config;
  model.input_dim = input_dim;
  Rng rng = Rng(config.seed).spawn(0x11);

  Index fan_in = input_dim;
  const std::size_t n_layers = config.layer_sizes.size();
  model.layers.reserve(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Index out = config.layer_sizes[l];
    const bool hidden = l + 1 < n_layers;
    DenseLayer layer;
    layer.weights.resize(out, fan_in);
    const double limit =
        std::sqrt(6.0 / static_cast<double>(std::max<Index>(fan_in, 1)));
    for (Index r = 0; r < out; ++r)
      for (Index c = 0; c < fan_in; ++c)
        layer.weights(r, c) = rng.uniform(-limit, limit);
    // Small positive bias keeps ReLU units off the exact kink when an
    // upstream row goes fully dead.
    layer.bias = hidden ? Vector::Constant(out, 0.01) : Vector::Zero(out);
    layer.relu = hidden;
    layer.dropout = hidden && config.dropout_prob > 0.0;
    if (hidden && config.use_batchnorm) {
      BatchNorm bn;
      bn.gamma = Vector::Ones(out);
      bn.beta = Vector::Zero(out);
      bn.running_mean = Vector::Zero(out);
      bn.running_var = Vector::Ones(out);
      layer.bn = std::move(bn);
    }
    model.layers.push_back(std::move(layer));
    fan_in = out;
  }
  return model;
}

ForwardResult forward(const MlpModel& model, const ConstMatrixRef& batch,
                      Mode mode, std::uint64_t seed) {
  if (batch.cols() != model.input_dim)
    throw DataError("forward: batch width " + std::to_string(batch.cols()) +
                    " does not match input_dim " +
                    std::to_string(model.input_dim));
  const Index n = batch.rows();
  const std::size_t n_layers = model.layers.size();
  ForwardResult result;
  ForwardCache& cache = result.cache;
  cache.mode = mode;
  cache.inputs.resize(n_layers);
  cache.linear.resize(n_layers);
  cache.bn_xhat.resize(n_layers);
  cache.bn_mean.resize(n_layers);
  cache.bn_var.resize(n_layers);
  cache.act_input.resize(n_layers);
  cache.dropout_mask.resize(n_layers);
  cache.new_running_mean.resize(n_layers);
  cache.new_running_var.resize(n_layers);

  Rng mask_rng(seed);
  const double p = model.config.dropout_prob;
  Matrix x = batch;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const DenseLayer& layer = model.layers[l];
    cache.inputs[l] = x;
    Matrix z = x * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    cache.linear[l] = z;

    if (layer.bn) {
      const BatchNorm& bn = *layer.bn;
      if (mode == Mode::kTrain) {
        if (n < 2)
          throw DataError("batchnorm needs batches of at least 2 rows");
        const Vector mean = z.colwise().mean();
        Matrix centered = z.rowwise() - mean.transpose();
        const Vector var =
            centered.array().square().colwise().sum() / static_cast<double>(n);
        cache.bn_mean[l] = mean;
        cache.bn_var[l] = var;
        const Array inv_std = (var.array() + bn.eps).sqrt().inverse();
        cache.bn_xhat[l] =
            (centered.array().rowwise() * inv_std.transpose()).matrix();
        z = (cache.bn_xhat[l].array().rowwise() *
             bn.gamma.transpose().array())
                .matrix();
        z.rowwise() += bn.beta.transpose();
        // Unbiased variance feeds the running estimate (PyTorch convention).
        const double bessel = static_cast<double>(n) / (n > 1 ? n - 1.0 : 1.0);
        cache.new_running_mean[l] =
            (1.0 - bn.momentum) * bn.running_mean + bn.momentum * mean;
        cache.new_running_var[l] = (1.0 - bn.momentum) * bn.running_var +
                                   bn.momentum * (bessel * var);
      } else {
        cache.bn_mean[l] = bn.running_mean;
        cache.bn_var[l] = bn.running_var;
        const Array inv_std = (bn.running_var.array() + bn.eps).sqrt().inverse();
        cache.bn_xhat[l] = ((z.rowwise() - bn.running_mean.transpose())
                                .array()
                                .rowwise() *
                            inv_std.transpose())
                               .matrix();
        z = (cache.bn_xhat[l].array().rowwise() *
             bn.gamma.transpose().array())
                .matrix();
        z.rowwise() += bn.beta.transpose();
      }
    }
    cache.act_input[l] = z;
    if (layer.relu) z = z.cwiseMax(0.0);
    if (layer.dropout && mode != Mode::kEval) {
      const double scale = 1.0 / (1.0 - p);
      Matrix mask(n, z.cols());
      for (Index r = 0; r < n; ++r)
        for (Index c = 0; c < z.cols(); ++c)
          mask(r, c) = mask_rng.bernoulli(p) ? 0.0 : scale;
      cache.dropout_mask[l] = mask;
      z = z.cwiseProduct(mask);
    }
    x = std::move(z);
  }
  result.outputs = std::move(x);
  return result;
}

void apply_bn_updates(MlpModel& model, const ForwardCache& cache) {
  if (cache.mode != Mode::kTrain) return;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (!model.layers[l].bn) continue;
    model.layers[l].bn->running_mean = cache.new_running_mean[l];
    model.layers[l].bn->running_var = cache.new_running_var[l];
  }
}

double loss_mse(const ConstMatrixRef& outputs, const ConstVectorRef& targets) {
  if (outputs.cols() != 1 || outputs.rows() != targets.size())
    throw DataError("loss_mse: shape mismatch");
  return (outputs.col(0) - targets).squaredNorm() /
         static_cast<double>(targets.size());
}

Matrix loss_mse_grad(const ConstMatrixRef& outputs,
                     const ConstVectorRef& targets) {
  if (outputs.cols() != 1 || outputs.rows() != targets.size())
    throw DataError("loss_mse_grad: shape mismatch");
  return 2.0 / static_cast<double>(targets.size()) *
         (outputs.col(0) - targets);
}

Gradients backward(const MlpModel& model, const ForwardCache& cache,
                   const ConstMatrixRef& output_grad) {
  const std::size_t n_layers = model.layers.size();
  Gradients grads;
  grads.weights.resize(n_layers);
  grads.bias.resize(n_layers);
  grads.gamma.resize(n_layers);
  grads.beta.resize(n_layers);

  Matrix g = output_grad;
  for (std::size_t li = n_layers; li-- > 0;) {
    const DenseLayer& layer = model.layers[li];
    if (layer.dropout && cache.mode != Mode::kEval)
      g = g.cwiseProduct(cache.dropout_mask[li]);
    if (layer.relu)
      g = (cache.act_input[li].array() > 0.0).select(g, Matrix::Zero(g.rows(), g.cols()));

    if (layer.bn) {
      const BatchNorm& bn = *layer.bn;
      const Matrix& xhat = cache.bn_xhat[li];
      grads.gamma[li] = g.cwiseProduct(xhat).colwise().sum();
      grads.beta[li] = g.colwise().sum();
      const Array inv_std = (cache.bn_var[li].array() + bn.eps).sqrt().inverse();
      Matrix dxhat =
          (g.array().rowwise() * bn.gamma.transpose().array()).matrix();
      if (cache.mode == Mode::kTrain) {
        const double n = static_cast<double>(g.rows());
        const Vector sum_dxhat = dxhat.colwise().sum();
        const Vector sum_dxhat_xhat =
            dxhat.cwiseProduct(xhat).colwise().sum();
        Matrix dz = n * dxhat;
        dz.rowwise() -= sum_dxhat.transpose();
        dz -= (xhat.array().rowwise() * sum_dxhat_xhat.transpose().array())
                  .matrix();
        g = (dz.array().rowwise() * (inv_std.transpose() / n)).matrix();
      } else {
        g = (dxhat.array().rowwise() * inv_std.transpose()).matrix();
      }
    }

    grads.weights[li] = g.transpose() * cache.inputs[li];
    grads.bias[li] = g.colwise().sum();
    if (li > 0) g = g * layer.weights;
  }
  return grads;
}

OptimizerState init_optimizer(const MlpModel& model) {
  OptimizerState state;
  for (const DenseLayer& layer : model.layers) {
    state.m_weights.push_back(Matrix::Zero(layer.weights.rows(),
                                           layer.weights.cols()));
    state.v_weights.push_back(Matrix::Zero(layer.weights.rows(),
                                           layer.weights.cols()));
    state.m_bias.push_back(Vector::Zero(layer.bias.size()));
    state.v_bias.push_back(Vector::Zero(layer.bias.size()));
    const Index bn_size = layer.bn ? layer.bn->gamma.size() : 0;
    state.m_gamma.push_back(Vector::Zero(bn_size));
    state.v_gamma.push_back(Vector::Zero(bn_size));
    state.m_beta.push_back(Vector::Zero(bn_size));
    state.v_beta.push_back(Vector::Zero(bn_size));
  }
  return state;
}

namespace {

template <typename Param>
void adam_update(Param& theta, const Param& grad, Param& m, Param& v,
                 const OptimizerState& s, double lr, double bc1, double bc2) {
  m = s.beta1 * m + (1.0 - s.beta1) * grad;
  v = s.beta2 * v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  theta.array() -= lr * (m.array() / bc1) /
                   ((v.array() / bc2).sqrt() + s.eps);
}

bool all_finite(const Gradients& grads) {
  for (const auto& w : grads.weights)
    if (!w.allFinite()) return false;
  for (const auto& b : grads.bias)
    if (!b.allFinite()) return false;
  for (const auto& gm : grads.gamma)
    if (gm.size() > 0 && !gm.allFinite()) return false;
  for (const auto& bt : grads.beta)
    if (bt.size() > 0 && !bt.allFinite()) return false;
  return true;
}

}  // namespace

void adam_step(MlpModel& model, const Gradients& grads, OptimizerState& state,
               double lr) {
  if (grads.weights.size() != model.layers.size())
    throw DataError("adam_step: gradient/model layer mismatch");
  if (!all_finite(grads))
    throw DivergenceError("adam_step: non-finite gradient rejected");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    DenseLayer& layer = model.layers[l];
    adam_update(layer.weights, grads.weights[l], state.m_weights[l],
                state.v_weights[l], state, lr, bc1, bc2);
    adam_update(layer.bias, grads.bias[l], state.m_bias[l], state.v_bias[l],
                state, lr, bc1, bc2);
    if (layer.bn) {
      adam_update(layer.bn->gamma, grads.gamma[l], state.m_gamma[l],
                  state.v_gamma[l], state, lr, bc1, bc2);
      adam_update(layer.bn->beta, grads.beta[l], state.m_beta[l],
                  state.v_beta[l], state, lr, bc1, bc2);
    }
  }
}

ScheduleTracker::ScheduleTracker(const TrainSchedule& schedule,
                                 double initial_lr)
    : schedule_(schedule), lr_(initial_lr) {
  validate(schedule);
  history_.best_val_loss = std::numeric_limits<double>::infinity();
}

bool ScheduleTracker::observe(int epoch, double train_loss, double val_loss) {
  EpochRecord rec;
  rec.epoch = epoch;
  rec.train_loss = train_loss;
  rec.val_loss = val_loss;
  rec.lr = lr_;
  rec.improved =
      val_loss <= history_.best_val_loss - schedule_.improvement_threshold;
  if (rec.improved) {
    history_.best_val_loss = val_loss;
    history_.best_epoch = epoch;
    streak_ = 0;
  } else {
    ++streak_;
    if (streak_ == schedule_.patience_lr) {
      lr_ /= schedule_.lr_decay_factor;
      rec.lr_decayed = true;
    }
    if (streak_ >= schedule_.patience_stop) {
      stop_ = true;
      history_.stopped_early = true;
    }
  }
  history_.epochs.push_back(rec);
  return rec.improved;
}

RegressionLoss mse_loss() {
  RegressionLoss loss;
  loss.value = [](const ConstMatrixRef& o, const ConstVectorRef& t) {
    return loss_mse(o, t);
  };
  loss.grad = [](const ConstMatrixRef& o, const ConstVectorRef& t) {
    return loss_mse_grad(o, t);
  };
  return loss;
}

TrainResult train(const MlpModel& model, const data::Dataset& train_set,
                  const data::Dataset& val_set, const TrainSchedule& schedule,
                  const RegressionLoss& loss) {
  validate(schedule);
  if (train_set.rows() == 0 || val_set.rows() == 0)
    throw DataError("train: empty train or validation set");

  MlpModel current = model;
  MlpModel best = model;
  OptimizerState opt = init_optimizer(current);
  ScheduleTracker tracker(schedule, model.config.learning_rate);

  Rng shuffle_rng = Rng(model.config.seed).spawn(0x22);
  Rng dropout_rng = Rng(model.config.seed).spawn(0x33);

  std::vector<Index> order(static_cast<std::size_t>(train_set.rows()));
  std::iota(order.begin(), order.end(), Index{0});

  for (int epoch = 1; epoch <= schedule.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    Index seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(model.config.batch_size)) {
      const std::size_t stop = std::min(
          order.size(), start + static_cast<std::size_t>(model.config.batch_size));
      std::span<const Index> rows(order.data() + start, stop - start);
      const data::Dataset batch = train_set.subset(rows);
      ForwardResult fr =
          forward(current, batch.features, Mode::kTrain, dropout_rng.next_u64());
      apply_bn_updates(current, fr.cache);
      const double batch_loss = loss.value(fr.outputs, batch.targets);
      if (!std::isfinite(batch_loss))
        throw DivergenceError(
            "training diverged: non-finite loss at epoch " +
                std::to_string(epoch),
            tracker.history());
      epoch_loss += batch_loss * static_cast<double>(batch.rows());
      seen += batch.rows();
      const Gradients grads =
          backward(current, fr.cache, loss.grad(fr.outputs, batch.targets));
      try {
        adam_step(current, grads, opt, tracker.lr());
      } catch (DivergenceError& e) {
        e.history = tracker.history();
        throw;
      }
    }

    const ForwardResult val_fr =
        forward(current, val_set.features, Mode::kEval, 0);
    const double val_loss = loss.value(val_fr.outputs, val_set.targets);
    if (!std::isfinite(val_loss))
      throw DivergenceError("training diverged: non-finite validation loss",
                            tracker.history());

    if (tracker.observe(epoch, epoch_loss / static_cast<double>(seen),
                        val_loss))
      best = current;
    if (tracker.should_stop()) break;
  }
  return TrainResult{std::move(best), tracker.take_history()};
}

namespace {

struct ParamRef {
  double* value;
  double analytic;
};

void collect_params(MlpModel& model, const Gradients& grads,
                    std::vector<ParamRef>& out) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    DenseLayer& layer = model.layers[l];
    for (Index c = 0; c < layer.weights.cols(); ++c)
      for (Index r = 0; r < layer.weights.rows(); ++r)
        out.push_back({&layer.weights(r, c), grads.weights[l](r, c)});
    for (Index i = 0; i < layer.bias.size(); ++i)
      out.push_back({&layer.bias(i), grads.bias[l](i)});
    if (layer.bn) {
      for (Index i = 0; i < layer.bn->gamma.size(); ++i)
        out.push_back({&layer.bn->gamma(i), grads.gamma[l](i)});
      for (Index i = 0; i < layer.bn->beta.size(); ++i)
        out.push_back({&layer.bn->beta(i), grads.beta[l](i)});
    }
  }
}

}  // namespace

double grad_check(const MlpModel& model, const ConstMatrixRef& batch,
                  const ConstVectorRef& targets, double epsilon, Mode mode,
                  Index max_exact_params) {
  if (model.config.dropout_prob != 0.0)
    throw ConfigError("grad_check requires dropout_prob == 0");

  MlpModel probe = model;
  const ForwardResult fr = forward(probe, batch, mode, 0);
  const Gradients grads =
      backward(probe, fr.cache, loss_mse_grad(fr.outputs, targets));

  std::vector<ParamRef> params;
  collect_params(probe, grads, params);

  std::vector<std::size_t> chosen(params.size());
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  if (static_cast<Index>(params.size()) > max_exact_params) {
    Rng rng(0xC0FFEE);
    const auto picks = rng.sample_without_replacement(
        params.size(), static_cast<std::uint64_t>(max_exact_params));
    chosen.assign(picks.begin(), picks.end());
  }

  double max_rel = 0.0;
  for (std::size_t idx : chosen) {
    double* theta = params[idx].value;
    const double saved = *theta;
    *theta = saved + epsilon;
    const double up = loss_mse(forward(probe, batch, mode, 0).outputs, targets);
    *theta = saved - epsilon;
    const double down =
        loss_mse(forward(probe, batch, mode, 0).outputs, targets);
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

json matrix_to_json_row_major(const Matrix& m) {
  json arr = json::array();
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) arr.push_back(m(r, c));
  return arr;
}

Matrix matrix_from_json_row_major(const json& arr, Index rows, Index cols) {
  if (static_cast<Index>(arr.size()) != rows * cols)
    throw DataError("model file: matrix size mismatch");
  Matrix m(rows, cols);
  Index k = 0;
  for (const auto& x : arr) {
    m(k / cols, k % cols) = x.get<double>();
    ++k;
  }
  return m;
}

constexpr const char* kMlpFormat = "conforest.mlp";
constexpr int kMlpVersion = 1;

}  // namespace

std::string to_json(const MlpModel& model) {
  json j;
  j["format"] = kMlpFormat;
  j["version"] = kMlpVersion;
  j["config"] = {{"layer_sizes", model.config.layer_sizes},
                 {"dropout_prob", model.config.dropout_prob},
                 {"use_batchnorm", model.config.use_batchnorm},
                 {"learning_rate", model.config.learning_rate},
                 {"batch_size", model.config.batch_size},
                 {"seed", model.config.seed}};
  j["input_dim"] = model.input_dim;
  json layers = json::array();
  for (const DenseLayer& layer : model.layers) {
    json jl;
    jl["rows"] = layer.weights.rows();
    jl["cols"] = layer.weights.cols();
    jl["weights"] = matrix_to_json_row_major(layer.weights);
    jl["bias"] = vector_to_json(layer.bias);
    jl["relu"] = layer.relu;
    jl["dropout"] = layer.dropout;
    if (layer.bn) {
      jl["batchnorm"] = {{"gamma", vector_to_json(layer.bn->gamma)},
                         {"beta", vector_to_json(layer.bn->beta)},
                         {"running_mean", vector_to_json(layer.bn->running_mean)},
                         {"running_var", vector_to_json(layer.bn->running_var)},
                         {"momentum", layer.bn->momentum},
                         {"eps", layer.bn->eps}};
    } else {
      jl["batchnorm"] = nullptr;
    }
    layers.push_back(std::move(jl));
  }
  j["layers"] = std::move(layers);
  return j.dump(2);
}

MlpModel mlp_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model file is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != kMlpFormat)
    throw DataError("model file has wrong format tag");
  if (j.value("version", 0) != kMlpVersion)
    throw DataError("unsupported mlp model version");
  MlpModel model;
  const json& jc = j.at("config");
  model.config.layer_sizes = jc.at("layer_sizes").get<std::vector<Index>>();
  model.config.dropout_prob = jc.at("dropout_prob").get<double>();
  model.config.use_batchnorm = jc.at("use_batchnorm").get<bool>();
  model.config.learning_rate = jc.at("learning_rate").get<double>();
  model.config.batch_size = jc.at("batch_size").get<Index>();
  model.config.seed = jc.at("seed").get<std::uint64_t>();
  model.input_dim = j.at("input_dim").get<Index>();
  for (const auto& jl : j.at("layers")) {
    DenseLayer layer;
    const Index rows = jl.at("rows").get<Index>();
    const Index cols = jl.at("cols").get<Index>();
    layer.weights = matrix_from_json_row_major(jl.at("weights"), rows, cols);
    layer.bias = vector_from_json(jl.at("bias"));
    layer.relu = jl.at("relu").get<bool>();
    layer.dropout = jl.at("dropout").get<bool>();
    if (!jl.at("batchnorm").is_null()) {
      BatchNorm bn;
      const auto& jb = jl.at("batchnorm");
      bn.gamma = vector_from_json(jb.at("gamma"));
      bn.beta = vector_from_json(jb.at("beta"));
      bn.running_mean = vector_from_json(jb.at("running_mean"));
      bn.running_var = vector_from_json(jb.at("running_var"));
      bn.momentum = jb.at("momentum").get<double>();
      bn.eps = jb.at("eps").get<double>();
      layer.bn = std::move(bn);
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

void save_mlp(const std::string& path, const MlpModel& model) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write model file: " + path);
  out << to_json(model) << "\n";
}

MlpModel load_mlp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("model file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return mlp_from_json(ss.str());
}

}  // namespace conforest::nn
