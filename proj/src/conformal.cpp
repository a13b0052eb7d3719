#include "conforest/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "conforest/errors.hpp"
#include "conforest/rng.hpp"

namespace conforest::conformal {

QuantileMode quantile_mode_from_string(const std::string& name) {
  if (name == "finite_sample") return QuantileMode::kFiniteSample;
  if (name == "plain") return QuantileMode::kPlain;
  throw ConfigError("unknown quantile mode: " + name);
}

std::string to_string(QuantileMode mode) {
  return mode == QuantileMode::kFiniteSample ? "finite_sample" : "plain";
}

double score(double prediction, double target) {
  if (!std::isfinite(prediction) || !std::isfinite(target))
    throw DataError("score: non-finite input");
  return std::abs(target - prediction);
}

double normalized_score(double prediction, double target, double sigma,
                        double beta) {
  const double denom = sigma + beta;
  if (!(denom > 0.0))
    throw DataError("normalized_score: sigma + beta must be positive, got " +
                    std::to_string(denom));
  return score(prediction, target) / denom;
}

double calibrate(std::vector<double> scores, double alpha, QuantileMode mode) {
  if (scores.empty()) throw DataError("calibrate: empty score list");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ConfigError("calibrate: alpha must lie in (0,1)");
  for (double s : scores)
    if (!std::isfinite(s)) throw DataError("calibrate: non-finite score");

  const auto m = static_cast<double>(scores.size());
  const double position = mode == QuantileMode::kFiniteSample
                              ? (m + 1.0) * (1.0 - alpha)
                              : m * (1.0 - alpha);
  const auto k = static_cast<long>(std::ceil(position));
  if (k > static_cast<long>(scores.size()))
    return std::numeric_limits<double>::infinity();
  const long rank = std::max<long>(k, 1) - 1;  // 0-based k-th smallest
  std::nth_element(scores.begin(), scores.begin() + rank, scores.end());
  return scores[static_cast<std::size_t>(rank)];
}

PredictionInterval interval_constant(double prediction, double q_hat) {
  if (q_hat < 0.0) throw DataError("interval_constant: negative q_hat");
  return {prediction - q_hat, prediction + q_hat};
}

PredictionInterval interval_normalized(double prediction, double sigma,
                                       double q_hat, double beta) {
  if (sigma < 0.0 || beta < 0.0)
    throw DataError("interval_normalized: sigma and beta must be >= 0");
  const double half_width = q_hat * (sigma + beta);
  return {prediction - half_width, prediction + half_width};
}

UncertaintyEstimator constant_estimator() {
  UncertaintyEstimator est;
  est.label = "constant";
  est.constant = true;
  est.sigma = [](const ConstMatrixRef& x) {
    return Vector::Zero(x.rows()).eval();
  };
  return est;
}

Vector sigma_mcd(const nn::MlpModel& model, const ConstMatrixRef& x,
                 int passes, std::uint64_t seed) {
  if (model.config.dropout_prob <= 0.0)
    throw ConfigError(
        "sigma_mcd: model has dropout disabled, the MCD spread would always "
        "be zero");
  if (passes < 2) throw ConfigError("sigma_mcd: need at least 2 passes");

  const Index n = x.rows();
  Vector sum = Vector::Zero(n);
  Vector sum_sq = Vector::Zero(n);
  Rng pass_rng(seed);
  for (int t = 0; t < passes; ++t) {
    const Vector out =
        nn::forward(model, x, nn::Mode::kMcDropout, pass_rng.next_u64())
            .outputs.col(0);
    sum += out;
    sum_sq += out.cwiseProduct(out);
  }
  const double p = static_cast<double>(passes);
  Vector variance = sum_sq / p - (sum / p).cwiseProduct(sum / p);
  return variance.cwiseMax(0.0).cwiseSqrt();
}

UncertaintyEstimator mcd_estimator(const nn::MlpModel& model, int passes,
                                   std::uint64_t seed) {
  if (model.config.dropout_prob <= 0.0)
    throw ConfigError("mcd_estimator: model has dropout disabled");
  UncertaintyEstimator est;
  est.label = "mcd";
  est.sigma = [&model, passes, seed](const ConstMatrixRef& x) {
    return sigma_mcd(model, x, passes, seed);
  };
  return est;
}

UncertaintyEstimator rf_residual_estimator(const rf::Forest& residual_model) {
  UncertaintyEstimator est;
  est.label = "rf_residual";
  est.sigma = [&residual_model](const ConstMatrixRef& x) {
    return rf::rf_predict_batch(residual_model, x).cwiseMax(0.0).eval();
  };
  return est;
}

double sigma_drf(const drf::Forest& forest, const ConstVectorRef& x,
                 bool include_ensemble) {
  const drf::DrfPrediction p = drf::predict(forest, x);
  return include_ensemble ? p.mixture_std + p.ensemble_std : p.mixture_std;
}

UncertaintyEstimator drf_estimator(const drf::Forest& forest,
                                   bool include_ensemble) {
  UncertaintyEstimator est;
  est.label = include_ensemble ? "drf_std_ens" : "drf_std";
  est.sigma = [&forest, include_ensemble](const ConstMatrixRef& x) {
    const auto preds = drf::predict_batch(forest, x);
    Vector out(x.rows());
    for (Index i = 0; i < x.rows(); ++i) {
      const auto& p = preds[static_cast<std::size_t>(i)];
      out(i) = include_ensemble ? p.mixture_std + p.ensemble_std
                                : p.mixture_std;
    }
    return out;
  };
  return est;
}

PointPredictor mlp_predictor(const nn::MlpModel& model) {
  return [&model](const ConstMatrixRef& x) {
    return nn::forward(model, x, nn::Mode::kEval, 0).outputs.col(0).eval();
  };
}

PointPredictor drf_predictor(const drf::Forest& forest) {
  return [&forest](const ConstMatrixRef& x) {
    const auto preds = drf::predict_batch(forest, x);
    Vector out(x.rows());
    for (Index i = 0; i < x.rows(); ++i)
      out(i) = preds[static_cast<std::size_t>(i)].mean;
    return out;
  };
}

IcpResult run_icp(const PointPredictor& predict,
                  const UncertaintyEstimator& estimator,
                  const data::Dataset& cal_set, const data::Dataset& test_set,
                  double alpha, double beta, QuantileMode mode) {
  if (cal_set.rows() == 0 || test_set.rows() == 0)
    throw DataError("run_icp: empty calibration or test set");
  if (beta < 0.0) throw ConfigError("run_icp: beta must be >= 0");

  const Vector cal_predictions = predict(cal_set.features);
  std::vector<double> scores(static_cast<std::size_t>(cal_set.rows()));

  IcpResult result;
  result.test_predictions = predict(test_set.features);

  if (estimator.constant) {
    for (Index i = 0; i < cal_set.rows(); ++i)
      scores[static_cast<std::size_t>(i)] =
          score(cal_predictions(i), cal_set.targets(i));
    result.test_sigmas = Vector::Zero(test_set.rows());
  } else {
    const Vector cal_sigmas = estimator.sigma(cal_set.features);
    if (!cal_sigmas.allFinite() || (cal_sigmas.array() < 0.0).any())
      throw DataError("run_icp: estimator produced an invalid sigma");
    for (Index i = 0; i < cal_set.rows(); ++i)
      scores[static_cast<std::size_t>(i)] = normalized_score(
          cal_predictions(i), cal_set.targets(i), cal_sigmas(i), beta);
    result.test_sigmas = estimator.sigma(test_set.features);
    if (!result.test_sigmas.allFinite() ||
        (result.test_sigmas.array() < 0.0).any())
      throw DataError("run_icp: estimator produced an invalid sigma");
  }

  Calibration& cal = result.calibration;
  cal.sorted_scores = scores;
  std::sort(cal.sorted_scores.begin(), cal.sorted_scores.end());
  cal.alpha = alpha;
  cal.beta = beta;
  cal.mode = mode;
  cal.q_hat = calibrate(scores, alpha, mode);

  result.intervals.reserve(static_cast<std::size_t>(test_set.rows()));
  for (Index i = 0; i < test_set.rows(); ++i) {
    if (estimator.constant)
      result.intervals.push_back(
          interval_constant(result.test_predictions(i), cal.q_hat));
    else
      result.intervals.push_back(interval_normalized(
          result.test_predictions(i), result.test_sigmas(i), cal.q_hat, beta));
  }
  return result;
}

namespace {

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_intervals_csv(const std::string& path, const IcpResult& result,
                         const data::Dataset& test_set,
                         bool sort_by_prediction) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write intervals file: " + path);
  std::vector<Index> order(static_cast<std::size_t>(test_set.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  if (sort_by_prediction)
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return result.test_predictions(a) < result.test_predictions(b);
    });

  out << "id,prediction,sigma,lower,upper,target,covered\n";
  for (Index i : order) {
    const auto& interval = result.intervals[static_cast<std::size_t>(i)];
    const std::string id = test_set.ids.empty()
                               ? std::to_string(i)
                               : test_set.ids[static_cast<std::size_t>(i)];
    out << id << ',' << format_double(result.test_predictions(i)) << ','
        << format_double(result.test_sigmas(i)) << ','
        << format_double(interval.lower) << ',' << format_double(interval.upper)
        << ',' << format_double(test_set.targets(i)) << ','
        << (interval.covers(test_set.targets(i)) ? 1 : 0) << "\n";
  }
}

}  // namespace conforest::conformal
