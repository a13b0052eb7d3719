#include "conforest/metrics.hpp"

#include <cmath>
#include <limits>

#include "conforest/errors.hpp"

namespace conforest::metrics {

void validate(const BinSpec& bins) {
  if (bins.labels.size() != bins.boundaries.size() + 1)
    throw ConfigError("bin spec needs one label per bin");
  for (std::size_t i = 1; i < bins.boundaries.size(); ++i)
    if (!(bins.boundaries[i - 1] < bins.boundaries[i]))
      throw ConfigError("bin boundaries must be strictly increasing");
}

std::size_t bin_of(const BinSpec& bins, double target) {
  std::size_t b = 0;
  while (b < bins.boundaries.size() && target > bins.boundaries[b]) ++b;
  return b;
}

double r2(const ConstVectorRef& predictions, const ConstVectorRef& targets) {
  if (predictions.size() != targets.size())
    throw DataError("r2: length mismatch");
  if (targets.size() < 2) throw DataError("r2: need at least 2 samples");
  const double mean = targets.mean();
  const double ss_tot = (targets.array() - mean).square().sum();
  if (ss_tot <= 0.0) throw DataError("r2: zero target variance");
  const double ss_res = (targets - predictions).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

double pcc(const ConstVectorRef& a, const ConstVectorRef& b) {
  if (a.size() != b.size()) throw DataError("pcc: length mismatch");
  if (a.size() < 2) throw DataError("pcc: need at least 2 samples");
  const Array da = a.array() - a.mean();
  const Array db = b.array() - b.mean();
  const double var_a = da.square().sum();
  const double var_b = db.square().sum();
  if (var_a <= 0.0 || var_b <= 0.0)
    throw DataError("pcc: constant input has no correlation");
  return (da * db).sum() / std::sqrt(var_a * var_b);
}

double coverage(const std::vector<conformal::PredictionInterval>& intervals,
                const ConstVectorRef& targets) {
  if (static_cast<Index>(intervals.size()) != targets.size())
    throw DataError("coverage: length mismatch");
  if (intervals.empty()) throw DataError("coverage: no intervals");
  Index covered = 0;
  for (Index i = 0; i < targets.size(); ++i)
    if (intervals[static_cast<std::size_t>(i)].covers(targets(i))) ++covered;
  return static_cast<double>(covered) / static_cast<double>(targets.size());
}

WidthSummary mean_width(
    const std::vector<conformal::PredictionInterval>& intervals) {
  if (intervals.empty()) throw DataError("mean_width: no intervals");
  WidthSummary summary;
  double total = 0.0;
  for (const auto& interval : intervals) {
    if (interval.unbounded()) {
      ++summary.unbounded_count;
      continue;
    }
    total += interval.width();
  }
  summary.mean_width =
      summary.unbounded_count > 0
          ? std::numeric_limits<double>::infinity()
          : total / static_cast<double>(intervals.size());
  return summary;
}

std::map<std::string, BinCoverage> conditional_coverage(
    const std::vector<conformal::PredictionInterval>& intervals,
    const ConstVectorRef& targets, const BinSpec& bins) {
  validate(bins);
  if (static_cast<Index>(intervals.size()) != targets.size())
    throw DataError("conditional_coverage: length mismatch");

  std::vector<Index> hits(bins.labels.size(), 0);
  std::vector<Index> counts(bins.labels.size(), 0);
  for (Index i = 0; i < targets.size(); ++i) {
    const std::size_t b = bin_of(bins, targets(i));
    ++counts[b];
    if (intervals[static_cast<std::size_t>(i)].covers(targets(i))) ++hits[b];
  }

  std::map<std::string, BinCoverage> out;
  for (std::size_t b = 0; b < bins.labels.size(); ++b) {
    if (counts[b] == 0) continue;  // empty bins stay absent
    out[bins.labels[b]] = BinCoverage{
        static_cast<double>(hits[b]) / static_cast<double>(counts[b]),
        counts[b]};
  }
  return out;
}

double mad_conditional_coverage(
    const std::map<std::string, BinCoverage>& per_bin,
    double confidence_level) {
  if (per_bin.empty())
    throw DataError("mad_conditional_coverage: no populated bins");
  double total = 0.0;
  for (const auto& [label, bin] : per_bin)
    total += std::abs(bin.coverage - confidence_level);
  return total / static_cast<double>(per_bin.size());
}

}  // namespace conforest::metrics
