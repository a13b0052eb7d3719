#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "conforest/conformal.hpp"
#include "conforest/dataset.hpp"
#include "conforest/drf.hpp"
#include "conforest/metrics.hpp"
#include "conforest/nn.hpp"
#include "conforest/rf.hpp"

namespace conforest::experiment {

enum class Method { kAnnCp, kAnnMcd, kAnnRf, kDrfStd, kDrfStdEns };

Method method_from_string(const std::string& name);
std::string to_string(Method method);
bool needs_ann(Method method);
bool needs_drf(Method method);
bool needs_rf(Method method);

struct SyntheticSpec {
  Index n = 3000;
  Index noise_features = 8;
};

struct CsvSpec {
  std::string path;
  std::string target_column = "y";
};

struct JoinSpec {
  std::string drug_csv;
  std::string cell_csv;
  std::string response_csv;
};

struct DataSpec {
  enum class Kind { kSynthetic, kCsv, kJoin };
  Kind kind = Kind::kSynthetic;
  SyntheticSpec synthetic;
  CsvSpec csv;
  JoinSpec join;
};

struct ExperimentConfig {
  DataSpec data;
  data::SplitSpec split;
  bool standardize = true;
  nn::MlpConfig ann;
  nn::TrainSchedule ann_schedule;
  drf::DrfConfig drf;
  nn::TrainSchedule drf_schedule;
  rf::RfConfig rf;
  std::vector<Method> methods;
  std::vector<double> confidence_levels{0.7, 0.8, 0.9};
  double beta = 0.0;
  conformal::QuantileMode quantile_mode =
      conformal::QuantileMode::kFiniteSample;
  int mcd_passes = 50;
  metrics::BinSpec bins;
  std::string output_dir = "runs/default";
  std::uint64_t master_seed = 42;
};

void validate(const ExperimentConfig& config);

// JSON schema documented in the README. Unknown keys are rejected;
// CONFOREST_OUTPUT_DIR and CONFOREST_THREADS env vars override the output
// directory and rf thread count.
ExperimentConfig config_from_json(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& config);

// FNV-1a over the canonical JSON dump.
std::string config_hash(const ExperimentConfig& config);

// Per-partition seed: master_seed + partition_index.
std::uint64_t partition_seed(const ExperimentConfig& config, int partition);

// Filesystem layout of a run directory.
std::string data_dir(const ExperimentConfig& c, int partition);
std::string models_dir(const ExperimentConfig& c, int partition);
std::string reports_dir(const ExperimentConfig& c, int partition);
std::string aggregate_dir(const ExperimentConfig& c);
std::string intervals_dir(const ExperimentConfig& c, int partition);
std::string calibration_dir(const ExperimentConfig& c, int partition);
std::string run_tag(Method method, double confidence_level);

struct PartitionData {
  data::Dataset train, cal, test;  // standardized when configured
  data::Standardizer standardizer;
};

// Loads (or synthesizes) the full dataset, splits partition `index`, fits the
// standardizer on the training rows and applies it everywhere.
PartitionData prepare_partition(const ExperimentConfig& config, int partition);

// synth: write per-partition train/cal/test CSVs plus the manifest.
void run_synth(const ExperimentConfig& config);

// train: fit exactly the models the method list requires for one partition
// (or all when partition < 0) and persist them with the standardizer and the
// per-model training histories.
void run_train(const ExperimentConfig& config, int partition = -1);

// calibrate: persist the calibration (sorted scores and q_hat) for one
// (method, confidence level, partition) cell.
void run_calibrate(const ExperimentConfig& config, Method method,
                   double confidence_level, int partition);

struct EvaluationOutput {
  std::vector<metrics::EvaluationReport> per_run;    // one per (m, cl, part)
  std::vector<metrics::EvaluationReport> aggregates; // one per (m, cl)
};

// evaluate: run ICP for every (method, confidence level, partition), write
// per-run and aggregate reports plus the two summary tables.
EvaluationOutput run_evaluate(const ExperimentConfig& config);

// intervals: per-sample interval CSV plus a companion sorted by prediction.
void run_intervals(const ExperimentConfig& config, Method method,
                   double confidence_level, int partition);

// report: rebuild aggregates and tables from existing per-run reports.
EvaluationOutput run_report(const ExperimentConfig& config);

std::string report_to_json(const metrics::EvaluationReport& report);
metrics::EvaluationReport report_from_json(const std::string& json_text);

void write_manifest(const ExperimentConfig& config);

}  // namespace conforest::experiment
