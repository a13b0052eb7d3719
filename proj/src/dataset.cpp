#include "conforest/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "conforest/errors.hpp"
#include "conforest/rng.hpp"

namespace conforest::data {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string strip(const std::string& s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

// Locale-independent numeric parse; accepts scientific notation.
bool parse_double(const std::string& raw, double& out) {
  const std::string s = strip(raw);
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!strip(line).empty()) lines.push_back(line);
  }
  return lines;
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Dataset Dataset::subset(std::span<const Index> row_indices) const {
  Dataset out;
  out.features.resize(static_cast<Index>(row_indices.size()), features.cols());
  out.targets.resize(static_cast<Index>(row_indices.size()));
  if (!ids.empty()) out.ids.reserve(row_indices.size());
  Index r = 0;
  for (Index src : row_indices) {
    out.features.row(r) = features.row(src);
    out.targets(r) = targets(src);
    if (!ids.empty()) out.ids.push_back(ids[static_cast<std::size_t>(src)]);
    ++r;
  }
  return out;
}

void validate(const Dataset& ds) {
  if (ds.features.rows() != ds.targets.size())
    throw DataError("dataset row count mismatch: " +
                    std::to_string(ds.features.rows()) + " feature rows vs " +
                    std::to_string(ds.targets.size()) + " targets");
  if (!ds.ids.empty() &&
      static_cast<Index>(ds.ids.size()) != ds.features.rows())
    throw DataError("dataset id count mismatch");
  if (!ds.features.allFinite())
    throw DataError("dataset features contain non-finite entries");
  if (!ds.targets.allFinite())
    throw DataError("dataset targets contain non-finite entries");
}

void validate(const SplitSpec& spec) {
  auto in_unit = [](double f) { return f > 0.0 && f < 1.0; };
  if (!in_unit(spec.train_fraction) || !in_unit(spec.cal_fraction) ||
      !in_unit(spec.test_fraction))
    throw ConfigError("split fractions must lie in (0,1)");
  const double total =
      spec.train_fraction + spec.cal_fraction + spec.test_fraction;
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1, got " +
                      std::to_string(total));
  if (spec.n_partitions < 1) throw ConfigError("n_partitions must be >= 1");
}

SplitResult split(const Dataset& ds, const SplitSpec& spec,
                  int partition_index) {
  validate(spec);
  if (partition_index < 0 || partition_index >= spec.n_partitions)
    throw ConfigError("partition_index " + std::to_string(partition_index) +
                      " out of range for " + std::to_string(spec.n_partitions) +
                      " partitions");
  const Index n = ds.rows();
  if (n == 0) throw DataError("cannot split an empty dataset");

  const Index n_cal =
      static_cast<Index>(std::floor(spec.cal_fraction * static_cast<double>(n)));
  const Index n_test = static_cast<Index>(
      std::floor(spec.test_fraction * static_cast<double>(n)));
  const Index n_train = n - n_cal - n_test;  // remainder rows go to train
  if (n_train <= 0 || n_cal <= 0 || n_test <= 0)
    throw DataError("split would produce an empty subset for n=" +
                    std::to_string(n));

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(spec.seed + static_cast<std::uint64_t>(partition_index));
  rng.shuffle(order);

  SplitResult result;
  result.train_indices.assign(order.begin(), order.begin() + n_train);
  result.cal_indices.assign(order.begin() + n_train,
                            order.begin() + n_train + n_cal);
  result.test_indices.assign(order.begin() + n_train + n_cal, order.end());

  // Carry provenance: generate row-index ids when the source has none.
  Dataset tagged;
  const Dataset* src = &ds;
  if (ds.ids.empty()) {
    tagged = ds;
    tagged.ids.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) tagged.ids.push_back(std::to_string(i));
    src = &tagged;
  }
  result.train = src->subset(result.train_indices);
  result.cal = src->subset(result.cal_indices);
  result.test = src->subset(result.test_indices);
  return result;
}

Standardizer fit_standardizer(const Dataset& train) {
  if (train.rows() == 0)
    throw DataError("cannot fit standardizer on an empty dataset");
  Standardizer s;
  const double n = static_cast<double>(train.rows());
  s.mean = train.features.colwise().mean();
  Matrix centered = train.features.rowwise() - s.mean.transpose();
  s.std = (centered.array().square().colwise().sum() / n).sqrt();
  s.std = s.std.cwiseMax(Standardizer::kStdFloor);
  return s;
}

Matrix transform(const Standardizer& s, const ConstMatrixRef& features) {
  if (features.cols() != s.mean.size())
    throw DataError("standardizer width mismatch");
  Matrix out = (features.rowwise() - s.mean.transpose()).array().rowwise() /
               s.std.transpose().array();
  for (Index c = 0; c < s.std.size(); ++c)
    if (s.std(c) <= Standardizer::kStdFloor) out.col(c).setZero();
  return out;
}

Matrix inverse_transform(const Standardizer& s, const ConstMatrixRef& features) {
  if (features.cols() != s.mean.size())
    throw DataError("standardizer width mismatch");
  Matrix out =
      (features.array().rowwise() * s.std.transpose().array()).matrix();
  out.rowwise() += s.mean.transpose();
  return out;
}

Dataset apply_standardizer(const Standardizer& s, const Dataset& ds) {
  Dataset out = ds;
  out.features = transform(s, ds.features);
  return out;
}

Dataset load_csv(const std::string& path, const std::string& target_column) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw DataError("empty CSV file: " + path);

  const auto header = split_line(lines[0]);
  Index target_col = -1;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (strip(header[c]) == target_column) {
      target_col = static_cast<Index>(c);
      break;
    }
  if (target_col < 0)
    throw DataError("target column '" + target_column + "' not found in " +
                    path);
  if (lines.size() < 2) throw DataError("CSV has a header but no rows: " + path);

  const Index n = static_cast<Index>(lines.size()) - 1;
  const Index width = static_cast<Index>(header.size());
  Dataset ds;
  ds.features.resize(n, width - 1);
  ds.targets.resize(n);

  for (Index r = 0; r < n; ++r) {
    const auto cells = split_line(lines[static_cast<std::size_t>(r) + 1]);
    if (static_cast<Index>(cells.size()) != width)
      throw DataError(path + ": row " + std::to_string(r + 2) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(width));
    Index f = 0;
    for (Index c = 0; c < width; ++c) {
      double value;
      if (!parse_double(cells[static_cast<std::size_t>(c)], value))
        throw DataError(path + ": non-numeric cell at row " +
                        std::to_string(r + 2) + ", column '" +
                        strip(header[static_cast<std::size_t>(c)]) + "'");
      if (c == target_col)
        ds.targets(r) = value;
      else
        ds.features(r, f++) = value;
    }
  }
  if (ds.cols() == 0)
    std::cerr << "warning: " << path
              << " has only the target column; feature matrix is empty\n";
  validate(ds);
  return ds;
}

KeyedTable load_keyed_csv(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw DataError("empty CSV file: " + path);
  const auto header = split_line(lines[0]);
  if (header.size() < 2)
    throw DataError(path + ": keyed table needs a key column plus features");

  const Index n = static_cast<Index>(lines.size()) - 1;
  const Index d = static_cast<Index>(header.size()) - 1;
  KeyedTable table;
  table.keys.reserve(static_cast<std::size_t>(n));
  table.features.resize(n, d);
  for (Index r = 0; r < n; ++r) {
    const auto cells = split_line(lines[static_cast<std::size_t>(r) + 1]);
    if (static_cast<Index>(cells.size()) != d + 1)
      throw DataError(path + ": row " + std::to_string(r + 2) +
                      " has wrong cell count");
    table.keys.push_back(strip(cells[0]));
    for (Index c = 0; c < d; ++c) {
      double value;
      if (!parse_double(cells[static_cast<std::size_t>(c) + 1], value))
        throw DataError(path + ": non-numeric cell at row " +
                        std::to_string(r + 2) + ", column '" +
                        strip(header[static_cast<std::size_t>(c) + 1]) + "'");
      table.features(r, c) = value;
    }
  }
  return table;
}

std::vector<ResponseRow> load_response_csv(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.size() < 2) throw DataError("empty response CSV: " + path);
  std::vector<ResponseRow> rows;
  rows.reserve(lines.size() - 1);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = split_line(lines[r]);
    if (cells.size() != 3)
      throw DataError(path + ": response row " + std::to_string(r + 1) +
                      " must have (drug_key, cell_key, y)");
    ResponseRow row;
    row.drug_key = strip(cells[0]);
    row.cell_key = strip(cells[1]);
    if (!parse_double(cells[2], row.response))
      throw DataError(path + ": non-numeric response at row " +
                      std::to_string(r + 1));
    rows.push_back(std::move(row));
  }
  return rows;
}

Dataset join_drug_cell(const KeyedTable& drug_features,
                       const KeyedTable& cell_features,
                       const std::vector<ResponseRow>& responses) {
  auto index_keys = [](const KeyedTable& t, const char* what) {
    std::unordered_map<std::string, Index> map;
    map.reserve(t.keys.size());
    for (std::size_t i = 0; i < t.keys.size(); ++i) {
      auto [it, inserted] = map.emplace(t.keys[i], static_cast<Index>(i));
      if (!inserted)
        throw DataError(std::string("duplicate ") + what + " key: " +
                        t.keys[i]);
    }
    return map;
  };
  const auto drug_index = index_keys(drug_features, "drug");
  const auto cell_index = index_keys(cell_features, "cell");

  const Index n = static_cast<Index>(responses.size());
  const Index d_drug = drug_features.features.cols();
  const Index d_cell = cell_features.features.cols();

  Dataset ds;
  ds.features.resize(n, d_drug + d_cell);
  ds.targets.resize(n);
  ds.ids.reserve(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const auto& row = responses[static_cast<std::size_t>(r)];
    const auto drug_it = drug_index.find(row.drug_key);
    if (drug_it == drug_index.end())
      throw DataError("response references unknown drug key: " + row.drug_key);
    const auto cell_it = cell_index.find(row.cell_key);
    if (cell_it == cell_index.end())
      throw DataError("response references unknown cell key: " + row.cell_key);
    ds.features.row(r).head(d_drug) =
        drug_features.features.row(drug_it->second);
    ds.features.row(r).tail(d_cell) =
        cell_features.features.row(cell_it->second);
    ds.targets(r) = row.response;
    ds.ids.push_back(row.drug_key + "::" + row.cell_key);
  }
  validate(ds);
  return ds;
}

Dataset synth_heteroskedastic(Index n, std::uint64_t seed,
                              Index noise_features) {
  if (n < 1) throw DataError("synth_heteroskedastic requires n >= 1");
  if (noise_features < 0) throw DataError("noise_features must be >= 0");
  Rng rng(seed);
  Dataset ds;
  const Index d = 2 + noise_features;
  ds.features.resize(n, d);
  ds.targets.resize(n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < d; ++c) ds.features(r, c) = rng.uniform(0.0, 4.0);
    const double x1 = ds.features(r, 0);
    const double x2 = ds.features(r, 1);
    ds.targets(r) = 2.0 * std::sin(x1) + x2 + rng.normal(0.0, 0.1 + 0.4 * x2);
  }
  return ds;
}

double synth_noise_std(const ConstVectorRef& features_row) {
  return 0.1 + 0.4 * features_row(1);
}

double synth_true_mean(const ConstVectorRef& features_row) {
  return 2.0 * std::sin(features_row(0)) + features_row(1);
}

void write_csv(const std::string& path, const Dataset& ds,
               const std::string& target_column) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  for (Index c = 0; c < ds.cols(); ++c) out << "f" << (c + 1) << ",";
  out << target_column << "\n";
  for (Index r = 0; r < ds.rows(); ++r) {
    for (Index c = 0; c < ds.cols(); ++c)
      out << format_double(ds.features(r, c)) << ",";
    out << format_double(ds.targets(r)) << "\n";
  }
}

}  // namespace conforest::data
