#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "conforest/errors.hpp"
#include "conforest/metrics.hpp"
#include "conforest/rng.hpp"

using namespace conforest;
using namespace conforest::metrics;
using conforest::conformal::PredictionInterval;

namespace {

std::vector<PredictionInterval> intervals_around(const Vector& centers,
                                                 double half_width) {
  std::vector<PredictionInterval> out;
  for (Index i = 0; i < centers.size(); ++i)
    out.push_back({centers(i) - half_width, centers(i) + half_width});
  return out;
}

}  // namespace

TEST_CASE("r2: perfect fit, mean predictor, invariances") {
  Vector targets(4);
  targets << 1.0, 2.0, 3.0, 4.0;
  CHECK(r2(targets, targets) == doctest::Approx(1.0));

  const Vector mean_pred = Vector::Constant(4, targets.mean());
  CHECK(r2(mean_pred, targets) == doctest::Approx(0.0));

  Vector noisy(4);
  noisy << 1.1, 1.9, 3.2, 3.8;
  const double base = r2(noisy, targets);
  CHECK(base <= 1.0);
  CHECK(r2(noisy.array() + 5.0, targets.array() + 5.0) ==
        doctest::Approx(base).epsilon(1e-12));

  CHECK_THROWS_AS(r2(noisy, Vector::Constant(4, 2.0)), DataError);
}

TEST_CASE("pcc: self, anti, affine invariance, constant rejection") {
  Vector a(5);
  a << 1, 2, 3, 4, 7;
  CHECK(pcc(a, a) == doctest::Approx(1.0));
  CHECK(pcc(a, -a) == doctest::Approx(-1.0));

  Vector b(5);
  b << 2, 1, 5, 3, 6;
  const double base = pcc(a, b);
  CHECK(pcc((3.0 * a.array() + 2.0).matrix(), b) ==
        doctest::Approx(base).epsilon(1e-12));
  CHECK(base >= -1.0);
  CHECK(base <= 1.0);

  CHECK_THROWS_AS(pcc(a, Vector::Constant(5, 1.0)), DataError);
}

TEST_CASE("coverage counts closed-interval membership") {
  Vector targets(10);
  targets << 0, 1, 2, 3, 4, 5, 6, 7, 8, 100;
  auto ivals = intervals_around(targets, 0.5);
  ivals[9] = {0.0, 9.0};  // miss the outlier
  CHECK(coverage(ivals, targets) == doctest::Approx(0.9));

  // Target exactly on a bound counts as covered.
  std::vector<PredictionInterval> edge = {{1.0, 2.0}};
  Vector on_bound(1);
  on_bound << 2.0;
  CHECK(coverage(edge, on_bound) == doctest::Approx(1.0));

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<PredictionInterval> unbounded = {{-inf, inf}, {-inf, inf}};
  Vector any(2);
  any << -1e9, 1e9;
  CHECK(coverage(unbounded, any) == doctest::Approx(1.0));
}

TEST_CASE("mean_width averages widths and flags unbounded intervals") {
  std::vector<PredictionInterval> ivals = {{0.0, 1.0}, {0.0, 3.0}};
  const WidthSummary summary = mean_width(ivals);
  CHECK(summary.mean_width == doctest::Approx(2.0));
  CHECK(summary.unbounded_count == 0);

  const double inf = std::numeric_limits<double>::infinity();
  ivals.push_back({-inf, inf});
  const WidthSummary flagged = mean_width(ivals);
  CHECK(std::isinf(flagged.mean_width));
  CHECK(flagged.unbounded_count == 1);
}

TEST_CASE("conditional coverage bins by target value") {
  const BinSpec bins;  // Low <= 2 < Med <= 4 < High
  CHECK(bin_of(bins, 2.0) == 0);
  CHECK(bin_of(bins, 2.0001) == 1);
  CHECK(bin_of(bins, 4.0) == 1);
  CHECK(bin_of(bins, 4.0001) == 2);

  Vector targets(6);
  targets << 1.0, 1.5, 3.0, 3.5, 5.0, 6.0;
  auto ivals = intervals_around(targets, 0.1);
  ivals[1].upper = 1.2;  // miss one Low target
  ivals[1].lower = 1.1;
  const auto per_bin = conditional_coverage(ivals, targets, bins);
  CHECK(per_bin.at("Low").coverage == doctest::Approx(0.5));
  CHECK(per_bin.at("Low").count == 2);
  CHECK(per_bin.at("Med").coverage == doctest::Approx(1.0));
  CHECK(per_bin.at("High").coverage == doctest::Approx(1.0));

  // All targets in one bin: that bin equals the marginal, others absent.
  Vector low_only(3);
  low_only << 0.5, 1.0, 1.5;
  const auto single =
      conditional_coverage(intervals_around(low_only, 0.2), low_only, bins);
  CHECK(single.size() == 1);
  CHECK(single.at("Low").coverage ==
        doctest::Approx(coverage(intervals_around(low_only, 0.2), low_only)));
}

TEST_CASE("count-weighted bin coverages recover the marginal coverage") {
  Rng rng(8);
  Vector targets(200);
  for (Index i = 0; i < targets.size(); ++i)
    targets(i) = rng.uniform(0.0, 6.0);
  std::vector<PredictionInterval> ivals;
  for (Index i = 0; i < targets.size(); ++i) {
    const double center = targets(i) + rng.normal(0.0, 0.5);
    ivals.push_back({center - 0.5, center + 0.5});
  }
  const BinSpec bins;
  const auto per_bin = conditional_coverage(ivals, targets, bins);
  double weighted = 0.0;
  Index total = 0;
  for (const auto& [label, bin] : per_bin) {
    weighted += bin.coverage * static_cast<double>(bin.count);
    total += bin.count;
  }
  CHECK(total == targets.size());
  CHECK(weighted / static_cast<double>(total) ==
        doctest::Approx(coverage(ivals, targets)).epsilon(1e-12));
}

TEST_CASE("mad_conditional_coverage on a reference 70% conditional-coverage row") {
  std::map<std::string, BinCoverage> bins;
  bins["Low"] = {0.77102, 100};
  bins["Med"] = {0.48562, 100};
  bins["High"] = {0.44949, 100};
  const double mad = mad_conditional_coverage(bins, 0.7);
  CHECK(mad == doctest::Approx(0.17864).epsilon(5e-5));
  CHECK(mad == doctest::Approx((0.07102 + 0.21438 + 0.25051) / 3.0)
                   .epsilon(1e-12));
}

TEST_CASE("mad_conditional_coverage edge cases") {
  std::map<std::string, BinCoverage> at_cl;
  at_cl["Low"] = {0.8, 10};
  at_cl["High"] = {0.8, 10};
  CHECK(mad_conditional_coverage(at_cl, 0.8) == doctest::Approx(0.0));

  std::map<std::string, BinCoverage> single;
  single["Low"] = {0.9, 10};
  CHECK(mad_conditional_coverage(single, 0.8) == doctest::Approx(0.1));

  std::map<std::string, BinCoverage> empty;
  CHECK_THROWS_AS(mad_conditional_coverage(empty, 0.8), DataError);
}

TEST_CASE("bin spec validation") {
  BinSpec bad;
  bad.boundaries = {4.0, 2.0};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  BinSpec mislabeled;
  mislabeled.labels = {"only"};
  CHECK_THROWS_AS(validate(mislabeled), ConfigError);
}
