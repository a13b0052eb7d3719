#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conforest/types.hpp"

namespace conforest::data {

// Feature matrix plus targets. Immutable by convention once built: every
// operation below returns a fresh Dataset instead of mutating in place.
struct Dataset {
  Matrix features;               // n_samples x n_features
  Vector targets;                // n_samples
  std::vector<std::string> ids;  // empty, or one id per row

  Index rows() const { return features.rows(); }
  Index cols() const { return features.cols(); }

  Dataset subset(std::span<const Index> row_indices) const;
};

// Throws DataError if row counts disagree, ids are mis-sized, or any entry is
// non-finite.
void validate(const Dataset& ds);

struct SplitSpec {
  double train_fraction = 0.8;
  double cal_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
  int n_partitions = 5;
};

void validate(const SplitSpec& spec);

struct SplitResult {
  Dataset train, cal, test;
  std::vector<Index> train_indices, cal_indices, test_indices;
};

// Disjoint, exhaustive row assignment. Sizes are floor(fraction * n) for cal
// and test with the remainder going to train. Deterministic in
// (spec.seed + partition_index).
SplitResult split(const Dataset& ds, const SplitSpec& spec,
                  int partition_index);

// Per-feature standardization statistics estimated on training rows only.
// Columns whose population std falls below kStdFloor are treated as constant
// and transform to exactly zero.
struct Standardizer {
  Vector mean;
  Vector std;  // floored at kStdFloor

  static constexpr double kStdFloor = 1e-8;
};

Standardizer fit_standardizer(const Dataset& train);
Dataset apply_standardizer(const Standardizer& s, const Dataset& ds);
Matrix transform(const Standardizer& s, const ConstMatrixRef& features);
Matrix inverse_transform(const Standardizer& s, const ConstMatrixRef& features);

// CSV ingestion: UTF-8, comma separated, first row is the header. All columns
// must be numeric; the named target column supplies the response.
Dataset load_csv(const std::string& path, const std::string& target_column);

// Keyed feature table: first CSV column is a string key, remaining columns
// are numeric features in header order.
struct KeyedTable {
  std::vector<std::string> keys;
  Matrix features;
};

KeyedTable load_keyed_csv(const std::string& path);

struct ResponseRow {
  std::string drug_key;
  std::string cell_key;
  double response = 0.0;
};

std::vector<ResponseRow> load_response_csv(const std::string& path);

// One row per response; features are the drug descriptor vector concatenated
// before the cell expression vector. Row ids are "drug_key::cell_key".
Dataset join_drug_cell(const KeyedTable& drug_features,
                       const KeyedTable& cell_features,
                       const std::vector<ResponseRow>& responses);

// Two informative features x1, x2 ~ U[0,4] plus noise_features more U[0,4]
// columns; y = 2*sin(x1) + x2 + e with e ~ N(0, (0.1 + 0.4*x2)^2).
Dataset synth_heteroskedastic(Index n, std::uint64_t seed,
                              Index noise_features = 8);

// Noise scale of the synthetic generator at a feature row (0.1 + 0.4*x2).
double synth_noise_std(const ConstVectorRef& features_row);

// Conditional mean of the synthetic generator (2*sin(x1) + x2).
double synth_true_mean(const ConstVectorRef& features_row);

void write_csv(const std::string& path, const Dataset& ds,
               const std::string& target_column = "y");

}  // namespace conforest::data
