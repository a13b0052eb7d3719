#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "conforest/conformal.hpp"
#include "conforest/types.hpp"

namespace conforest::metrics {

// Target-range bins: (-inf, b1], (b1, b2], ..., (b_last, inf). The defaults
// follow the Low / Med / High convention with boundaries at 2 and 4.
struct BinSpec {
  std::vector<double> boundaries{2.0, 4.0};
  std::vector<std::string> labels{"Low", "Med", "High"};
};

void validate(const BinSpec& bins);
std::size_t bin_of(const BinSpec& bins, double target);

struct BinCoverage {
  double coverage = 0.0;
  Index count = 0;
};

double r2(const ConstVectorRef& predictions, const ConstVectorRef& targets);

double pcc(const ConstVectorRef& a, const ConstVectorRef& b);

double coverage(const std::vector<conformal::PredictionInterval>& intervals,
                const ConstVectorRef& targets);

struct WidthSummary {
  double mean_width = 0.0;  // +inf when any interval is unbounded
  Index unbounded_count = 0;
};

WidthSummary mean_width(
    const std::vector<conformal::PredictionInterval>& intervals);

// Coverage restricted to samples whose target falls in each bin. Empty bins
// are absent from the map.
std::map<std::string, BinCoverage> conditional_coverage(
    const std::vector<conformal::PredictionInterval>& intervals,
    const ConstVectorRef& targets, const BinSpec& bins);

// Unweighted mean over non-empty bins of |bin coverage - confidence_level|.
double mad_conditional_coverage(
    const std::map<std::string, BinCoverage>& per_bin,
    double confidence_level);

struct EvaluationReport {
  std::string method;
  double confidence_level = 0.0;
  int partition = -1;  // -1 marks a partition-averaged aggregate
  double r2 = 0.0;
  std::optional<double> pcc_uncertainty_error;  // absent for constant ICP
  double coverage = 0.0;
  double mean_width = 0.0;
  Index unbounded_intervals = 0;
  std::map<std::string, BinCoverage> bin_coverage;
  double mad_conditional_coverage = 0.0;
};

}  // namespace conforest::metrics
