// conforest command-line driver: synthesize data, train models, calibrate,
// evaluate, and export prediction intervals from a single JSON config.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "conforest/errors.hpp"
#include "conforest/experiment.hpp"
#include "conforest/nn.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitMissingArtifact = 5;

struct CommonOptions {
  std::string config_path;
  int partition = -1;
  std::string method;
  double confidence_level = -1.0;
  std::optional<std::uint64_t> seed;
  std::string quantile_mode;
};

conforest::experiment::ExperimentConfig resolve_config(
    const CommonOptions& options) {
  auto config = conforest::experiment::load_config(options.config_path);
  if (options.seed) config.master_seed = *options.seed;
  if (!options.quantile_mode.empty())
    config.quantile_mode =
        conforest::conformal::quantile_mode_from_string(options.quantile_mode);
  return config;
}

void add_common(CLI::App* cmd, CommonOptions& options) {
  cmd->add_option("--config", options.config_path, "experiment config JSON")
      ->required();
  cmd->add_option("--seed", options.seed, "override the master seed");
  cmd->add_option("--quantile-mode", options.quantile_mode,
                  "finite_sample or plain");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normalized inductive conformal prediction with deep "
               "regression forest uncertainty"};
  app.require_subcommand(1);

  CommonOptions options;

  CLI::App* synth = app.add_subcommand(
      "synth", "write per-partition train/cal/test CSVs for synthetic data");
  CLI::App* train =
      app.add_subcommand("train", "train the models the method list needs");
  CLI::App* calibrate = app.add_subcommand(
      "calibrate", "persist calibration scores and q_hat for one run cell");
  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "run ICP for every method/CL/partition and write reports");
  CLI::App* intervals = app.add_subcommand(
      "intervals", "export per-sample prediction intervals as CSV");
  CLI::App* report = app.add_subcommand(
      "report", "rebuild aggregates and tables from existing reports");

  for (CLI::App* cmd : {synth, train, calibrate, evaluate, intervals, report})
    add_common(cmd, options);
  train->add_option("--partition", options.partition,
                    "train a single partition (default: all)");
  for (CLI::App* cmd : {calibrate, intervals}) {
    cmd->add_option("--method", options.method, "method label")->required();
    cmd->add_option("--cl", options.confidence_level, "confidence level")
        ->required();
    cmd->add_option("--partition", options.partition, "partition index")
        ->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    const auto config = resolve_config(options);
    using namespace conforest::experiment;
    if (synth->parsed()) {
      run_synth(config);
    } else if (train->parsed()) {
      run_train(config, options.partition);
    } else if (calibrate->parsed()) {
      run_calibrate(config, method_from_string(options.method),
                    options.confidence_level, options.partition);
    } else if (evaluate->parsed()) {
      run_evaluate(config);
    } else if (intervals->parsed()) {
      run_intervals(config, method_from_string(options.method),
                    options.confidence_level, options.partition);
    } else if (report->parsed()) {
      run_report(config);
    }
  } catch (const conforest::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const conforest::nn::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const conforest::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissingArtifact;
  } catch (const conforest::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
