#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "conforest/dataset.hpp"
#include "conforest/drf.hpp"
#include "conforest/nn.hpp"
#include "conforest/rf.hpp"
#include "conforest/types.hpp"

namespace conforest::conformal {

enum class QuantileMode {
  kFiniteSample,  // k = ceil((m+1)(1-alpha)); k > m yields q_hat = +inf
  kPlain,         // k = ceil(m(1-alpha)), the plain percentile
};

QuantileMode quantile_mode_from_string(const std::string& name);
std::string to_string(QuantileMode mode);

// Absolute residual |target - prediction|.
double score(double prediction, double target);

// |target - prediction| / (sigma + beta); sigma + beta must be positive.
double normalized_score(double prediction, double target, double sigma,
                        double beta);

// k-th smallest of the scores at the mode's index; never interpolates.
double calibrate(std::vector<double> scores, double alpha, QuantileMode mode);

struct Calibration {
  std::vector<double> sorted_scores;
  double alpha = 0.0;
  double beta = 0.0;
  QuantileMode mode = QuantileMode::kFiniteSample;
  double q_hat = 0.0;  // +inf when the finite-sample index exceeds m

  bool unbounded() const { return !std::isfinite(q_hat); }
};

struct PredictionInterval {
  double lower = 0.0;
  double upper = 0.0;

  double center() const { return 0.5 * (lower + upper); }
  double width() const { return upper - lower; }
  bool unbounded() const { return !std::isfinite(lower) || !std::isfinite(upper); }
  bool covers(double y) const { return lower <= y && y <= upper; }
};

PredictionInterval interval_constant(double prediction, double q_hat);
PredictionInterval interval_normalized(double prediction, double sigma,
                                       double q_hat, double beta);

// Maps feature rows to per-sample uncertainty estimates sigma_i >= 0. The
// constant variant marks the traditional (non-normalized) ICP path.
struct UncertaintyEstimator {
  std::string label;
  bool constant = false;
  std::function<Vector(const ConstMatrixRef&)> sigma;
};

UncertaintyEstimator constant_estimator();

// Population std of T Monte-Carlo dropout passes; model must have dropout.
UncertaintyEstimator mcd_estimator(const nn::MlpModel& model, int passes,
                                   std::uint64_t seed);

Vector sigma_mcd(const nn::MlpModel& model, const ConstMatrixRef& x,
                 int passes, std::uint64_t seed);

// Residual-forest prediction as sigma.
UncertaintyEstimator rf_residual_estimator(const rf::Forest& residual_model);

// sqrt(forest variance), optionally plus sqrt(ensemble variance).
UncertaintyEstimator drf_estimator(const drf::Forest& forest,
                                   bool include_ensemble);

double sigma_drf(const drf::Forest& forest, const ConstVectorRef& x,
                 bool include_ensemble);

using PointPredictor = std::function<Vector(const ConstMatrixRef&)>;

PointPredictor mlp_predictor(const nn::MlpModel& model);
PointPredictor drf_predictor(const drf::Forest& forest);

struct IcpResult {
  Calibration calibration;
  std::vector<PredictionInterval> intervals;  // one per test row
  Vector test_predictions;
  Vector test_sigmas;  // zeros for the constant estimator
};

// Scores the calibration set, takes the quantile, and builds intervals for
// the test set. The estimator is applied identically to both sets.
IcpResult run_icp(const PointPredictor& predict,
                  const UncertaintyEstimator& estimator,
                  const data::Dataset& cal_set, const data::Dataset& test_set,
                  double alpha, double beta, QuantileMode mode);

// Interval CSV: id, prediction, sigma, lower, upper, target, covered.
void write_intervals_csv(const std::string& path, const IcpResult& result,
                         const data::Dataset& test_set,
                         bool sort_by_prediction = false);

}  // namespace conforest::conformal
