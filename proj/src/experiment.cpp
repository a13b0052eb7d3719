#include "conforest/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "conforest/errors.hpp"
#include "conforest/rng.hpp"

namespace conforest::experiment {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

Method method_from_string(const std::string& name) {
  if (name == "ann_cp") return Method::kAnnCp;
  if (name == "ann_mcd") return Method::kAnnMcd;
  if (name == "ann_rf") return Method::kAnnRf;
  if (name == "drf_std") return Method::kDrfStd;
  if (name == "drf_std_ens") return Method::kDrfStdEns;
  throw ConfigError("unknown method: " + name);
}

std::string to_string(Method method) {
  switch (method) {
    case Method::kAnnCp: return "ann_cp";
    case Method::kAnnMcd: return "ann_mcd";
    case Method::kAnnRf: return "ann_rf";
    case Method::kDrfStd: return "drf_std";
    case Method::kDrfStdEns: return "drf_std_ens";
  }
  throw ConfigError("unknown method enum value");
}

bool needs_ann(Method m) {
  return m == Method::kAnnCp || m == Method::kAnnMcd || m == Method::kAnnRf;
}
bool needs_drf(Method m) {
  return m == Method::kDrfStd || m == Method::kDrfStdEns;
}
bool needs_rf(Method m) { return m == Method::kAnnRf; }

void validate(const ExperimentConfig& config) {
  data::validate(config.split);
  nn::validate(config.ann, /*scalar_head=*/true);
  nn::validate(config.ann_schedule);
  drf::validate(config.drf);
  nn::validate(config.drf_schedule);
  rf::validate(config.rf);
  metrics::validate(config.bins);
  if (config.methods.empty()) throw ConfigError("method list must not be empty");
  if (config.confidence_levels.empty())
    throw ConfigError("confidence level list must not be empty");
  for (double cl : config.confidence_levels)
    if (!(cl > 0.0 && cl < 1.0))
      throw ConfigError("confidence levels must lie in (0,1)");
  if (config.beta < 0.0) throw ConfigError("beta must be >= 0");
  if (config.mcd_passes < 2) throw ConfigError("mcd_passes must be >= 2");
  if (config.output_dir.empty()) throw ConfigError("output_dir must be set");
  for (Method m : config.methods)
    if (m == Method::kAnnMcd && config.ann.dropout_prob <= 0.0)
      throw ConfigError("ann_mcd requires ann.dropout_prob > 0");
  if (config.data.kind == DataSpec::Kind::kSynthetic &&
      config.data.synthetic.n < 1)
    throw ConfigError("synthetic.n must be >= 1");
}

namespace {

void expect_keys(const json& j, const std::vector<std::string>& allowed,
                 const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown config key '" + key + "' in " + where);
  }
}

nn::TrainSchedule schedule_from_json(const json& j, const std::string& where) {
  expect_keys(j,
              {"patience_lr", "patience_stop", "lr_decay_factor", "max_epochs",
               "improvement_threshold"},
              where);
  nn::TrainSchedule s;
  s.patience_lr = j.value("patience_lr", s.patience_lr);
  s.patience_stop = j.value("patience_stop", s.patience_stop);
  s.lr_decay_factor = j.value("lr_decay_factor", s.lr_decay_factor);
  s.max_epochs = j.value("max_epochs", s.max_epochs);
  s.improvement_threshold =
      j.value("improvement_threshold", s.improvement_threshold);
  return s;
}

json schedule_to_json(const nn::TrainSchedule& s) {
  return {{"patience_lr", s.patience_lr},
          {"patience_stop", s.patience_stop},
          {"lr_decay_factor", s.lr_decay_factor},
          {"max_epochs", s.max_epochs},
          {"improvement_threshold", s.improvement_threshold}};
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_cl(double cl) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", cl * 100.0);
  return buf;
}

}  // namespace

ExperimentConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  expect_keys(j,
              {"data", "split", "standardize", "ann", "ann_schedule", "drf",
               "drf_schedule", "rf", "methods", "confidence_levels", "beta",
               "quantile_mode", "mcd_passes", "bins", "output_dir", "seed"},
              "root");
  ExperimentConfig c;

  if (!j.contains("data")) throw ConfigError("config requires a 'data' block");
  const json& jd = j.at("data");
  const std::string kind = jd.value("kind", "synthetic");
  if (kind == "synthetic") {
    expect_keys(jd, {"kind", "n", "noise_features"}, "data");
    c.data.kind = DataSpec::Kind::kSynthetic;
    c.data.synthetic.n = jd.value("n", c.data.synthetic.n);
    c.data.synthetic.noise_features =
        jd.value("noise_features", c.data.synthetic.noise_features);
  } else if (kind == "csv") {
    expect_keys(jd, {"kind", "path", "target_column"}, "data");
    c.data.kind = DataSpec::Kind::kCsv;
    c.data.csv.path = jd.at("path").get<std::string>();
    c.data.csv.target_column =
        jd.value("target_column", c.data.csv.target_column);
  } else if (kind == "join_csv") {
    expect_keys(jd, {"kind", "drug_csv", "cell_csv", "response_csv"}, "data");
    c.data.kind = DataSpec::Kind::kJoin;
    c.data.join.drug_csv = jd.at("drug_csv").get<std::string>();
    c.data.join.cell_csv = jd.at("cell_csv").get<std::string>();
    c.data.join.response_csv = jd.at("response_csv").get<std::string>();
  } else {
    throw ConfigError("data.kind must be synthetic, csv, or join_csv");
  }

  if (j.contains("split")) {
    const json& js = j.at("split");
    expect_keys(js,
                {"train_fraction", "cal_fraction", "test_fraction",
                 "n_partitions"},
                "split");
    c.split.train_fraction = js.value("train_fraction", c.split.train_fraction);
    c.split.cal_fraction = js.value("cal_fraction", c.split.cal_fraction);
    c.split.test_fraction = js.value("test_fraction", c.split.test_fraction);
    c.split.n_partitions = js.value("n_partitions", c.split.n_partitions);
  }
  c.standardize = j.value("standardize", true);

  // Desk-scale defaults; full-scale architectures belong in the config file.
  c.ann.layer_sizes = {64, 32, 1};
  c.ann.dropout_prob = 0.1;
  c.ann.use_batchnorm = false;
  c.ann.learning_rate = 1e-3;
  c.ann.batch_size = 64;
  if (j.contains("ann")) {
    const json& ja = j.at("ann");
    expect_keys(ja,
                {"layer_sizes", "dropout_prob", "use_batchnorm",
                 "learning_rate", "batch_size"},
                "ann");
    if (ja.contains("layer_sizes"))
      c.ann.layer_sizes = ja.at("layer_sizes").get<std::vector<Index>>();
    c.ann.dropout_prob = ja.value("dropout_prob", c.ann.dropout_prob);
    c.ann.use_batchnorm = ja.value("use_batchnorm", c.ann.use_batchnorm);
    c.ann.learning_rate = ja.value("learning_rate", c.ann.learning_rate);
    c.ann.batch_size = ja.value("batch_size", c.ann.batch_size);
  }
  c.ann_schedule.max_epochs = 60;
  if (j.contains("ann_schedule"))
    c.ann_schedule = schedule_from_json(j.at("ann_schedule"), "ann_schedule");

  c.drf.backbone_layers = {64, 32};
  c.drf.dropout_prob = 0.0;
  c.drf.use_batchnorm = true;
  c.drf.learning_rate = 1e-3;
  c.drf.batch_size = 64;
  c.drf.n_trees = 5;
  c.drf.tree_depth = 4;
  if (j.contains("drf")) {
    const json& jf = j.at("drf");
    expect_keys(jf,
                {"backbone_layers", "dropout_prob", "use_batchnorm",
                 "learning_rate", "batch_size", "n_trees", "tree_depth",
                 "leaf_update_iterations"},
                "drf");
    if (jf.contains("backbone_layers"))
      c.drf.backbone_layers =
          jf.at("backbone_layers").get<std::vector<Index>>();
    c.drf.dropout_prob = jf.value("dropout_prob", c.drf.dropout_prob);
    c.drf.use_batchnorm = jf.value("use_batchnorm", c.drf.use_batchnorm);
    c.drf.learning_rate = jf.value("learning_rate", c.drf.learning_rate);
    c.drf.batch_size = jf.value("batch_size", c.drf.batch_size);
    c.drf.n_trees = jf.value("n_trees", c.drf.n_trees);
    c.drf.tree_depth = jf.value("tree_depth", c.drf.tree_depth);
    c.drf.leaf_update_iterations =
        jf.value("leaf_update_iterations", c.drf.leaf_update_iterations);
  }
  c.drf_schedule.max_epochs = 40;
  if (j.contains("drf_schedule"))
    c.drf_schedule = schedule_from_json(j.at("drf_schedule"), "drf_schedule");

  if (j.contains("rf")) {
    const json& jr = j.at("rf");
    expect_keys(jr,
                {"n_trees", "max_depth", "min_samples_leaf",
                 "features_per_split", "bootstrap"},
                "rf");
    c.rf.n_trees = jr.value("n_trees", c.rf.n_trees);
    c.rf.max_depth = jr.value("max_depth", c.rf.max_depth);
    c.rf.min_samples_leaf =
        jr.value("min_samples_leaf", c.rf.min_samples_leaf);
    c.rf.features_per_split =
        jr.value("features_per_split", c.rf.features_per_split);
    c.rf.bootstrap = jr.value("bootstrap", c.rf.bootstrap);
  }

  if (j.contains("methods")) {
    for (const auto& name : j.at("methods"))
      c.methods.push_back(method_from_string(name.get<std::string>()));
  } else {
    c.methods = {Method::kAnnCp, Method::kAnnMcd, Method::kAnnRf,
                 Method::kDrfStd, Method::kDrfStdEns};
  }
  if (j.contains("confidence_levels"))
    c.confidence_levels =
        j.at("confidence_levels").get<std::vector<double>>();
  c.beta = j.value("beta", 0.0);
  c.quantile_mode = conformal::quantile_mode_from_string(
      j.value("quantile_mode", "finite_sample"));
  c.mcd_passes = j.value("mcd_passes", 50);
  if (j.contains("bins")) {
    const json& jb = j.at("bins");
    expect_keys(jb, {"boundaries", "labels"}, "bins");
    c.bins.boundaries = jb.at("boundaries").get<std::vector<double>>();
    c.bins.labels = jb.at("labels").get<std::vector<std::string>>();
  }
  c.output_dir = j.value("output_dir", c.output_dir);
  c.master_seed = j.value("seed", c.master_seed);

  if (const char* env_out = std::getenv("CONFOREST_OUTPUT_DIR"))
    c.output_dir = env_out;
  if (const char* env_threads = std::getenv("CONFOREST_THREADS"))
    c.rf.n_threads = std::max(1, std::atoi(env_threads));

  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  json jd;
  switch (c.data.kind) {
    case DataSpec::Kind::kSynthetic:
      jd = {{"kind", "synthetic"},
            {"n", c.data.synthetic.n},
            {"noise_features", c.data.synthetic.noise_features}};
      break;
    case DataSpec::Kind::kCsv:
      jd = {{"kind", "csv"},
            {"path", c.data.csv.path},
            {"target_column", c.data.csv.target_column}};
      break;
    case DataSpec::Kind::kJoin:
      jd = {{"kind", "join_csv"},
            {"drug_csv", c.data.join.drug_csv},
            {"cell_csv", c.data.join.cell_csv},
            {"response_csv", c.data.join.response_csv}};
      break;
  }
  j["data"] = jd;
  j["split"] = {{"train_fraction", c.split.train_fraction},
                {"cal_fraction", c.split.cal_fraction},
                {"test_fraction", c.split.test_fraction},
                {"n_partitions", c.split.n_partitions}};
  j["standardize"] = c.standardize;
  j["ann"] = {{"layer_sizes", c.ann.layer_sizes},
              {"dropout_prob", c.ann.dropout_prob},
              {"use_batchnorm", c.ann.use_batchnorm},
              {"learning_rate", c.ann.learning_rate},
              {"batch_size", c.ann.batch_size}};
  j["ann_schedule"] = schedule_to_json(c.ann_schedule);
  j["drf"] = {{"backbone_layers", c.drf.backbone_layers},
              {"dropout_prob", c.drf.dropout_prob},
              {"use_batchnorm", c.drf.use_batchnorm},
              {"learning_rate", c.drf.learning_rate},
              {"batch_size", c.drf.batch_size},
              {"n_trees", c.drf.n_trees},
              {"tree_depth", c.drf.tree_depth},
              {"leaf_update_iterations", c.drf.leaf_update_iterations}};
  j["drf_schedule"] = schedule_to_json(c.drf_schedule);
  j["rf"] = {{"n_trees", c.rf.n_trees},
             {"max_depth", c.rf.max_depth},
             {"min_samples_leaf", c.rf.min_samples_leaf},
             {"features_per_split", c.rf.features_per_split},
             {"bootstrap", c.rf.bootstrap}};
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  j["methods"] = std::move(methods);
  j["confidence_levels"] = c.confidence_levels;
  j["beta"] = c.beta;
  j["quantile_mode"] = conformal::to_string(c.quantile_mode);
  j["mcd_passes"] = c.mcd_passes;
  j["bins"] = {{"boundaries", c.bins.boundaries}, {"labels", c.bins.labels}};
  j["output_dir"] = c.output_dir;
  j["seed"] = c.master_seed;
  return j.dump(2);
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string dump = config_to_json(config);
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char ch : dump) {
    hash ^= ch;
    hash *= 0x100000001b3ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fnv1a:%016llx",
                static_cast<unsigned long long>(hash));
  return buf;
}

std::uint64_t partition_seed(const ExperimentConfig& config, int partition) {
  return config.master_seed + static_cast<std::uint64_t>(partition);
}

namespace {

void ensure_run_dir(const std::string& dir) {
  const fs::path path(dir);
  if (fs::exists(path)) {
    if (!fs::is_directory(path))
      throw DataError("output path exists and is not a directory: " + dir);
    return;
  }
  const fs::path parent = path.has_parent_path() ? path.parent_path()
                                                 : fs::path(".");
  if (!fs::exists(parent))
    throw DataError("parent of output_dir does not exist: " +
                    parent.string());
  fs::create_directory(path);
}

void ensure_subdir(const std::string& dir) { fs::create_directories(dir); }

std::string join_path(const std::string& a, const std::string& b) {
  return (fs::path(a) / b).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string data_dir(const ExperimentConfig& c, int partition) {
  return join_path(c.output_dir, "data/part" + std::to_string(partition));
}
std::string models_dir(const ExperimentConfig& c, int partition) {
  return join_path(c.output_dir, "models/part" + std::to_string(partition));
}
std::string reports_dir(const ExperimentConfig& c, int partition) {
  return join_path(c.output_dir, "reports/part" + std::to_string(partition));
}
std::string aggregate_dir(const ExperimentConfig& c) {
  return join_path(c.output_dir, "reports/aggregate");
}
std::string intervals_dir(const ExperimentConfig& c, int partition) {
  return join_path(c.output_dir, "intervals/part" + std::to_string(partition));
}
std::string calibration_dir(const ExperimentConfig& c, int partition) {
  return join_path(c.output_dir,
                   "calibration/part" + std::to_string(partition));
}
std::string run_tag(Method method, double confidence_level) {
  return to_string(method) + "_cl" + format_cl(confidence_level);
}

namespace {

data::Dataset load_full_dataset(const ExperimentConfig& config) {
  switch (config.data.kind) {
    case DataSpec::Kind::kSynthetic:
      return data::synth_heteroskedastic(config.data.synthetic.n,
                                         config.master_seed,
                                         config.data.synthetic.noise_features);
    case DataSpec::Kind::kCsv:
      return data::load_csv(config.data.csv.path,
                            config.data.csv.target_column);
    case DataSpec::Kind::kJoin: {
      const auto drugs = data::load_keyed_csv(config.data.join.drug_csv);
      const auto cells = data::load_keyed_csv(config.data.join.cell_csv);
      const auto responses =
          data::load_response_csv(config.data.join.response_csv);
      return data::join_drug_cell(drugs, cells, responses);
    }
  }
  throw ConfigError("unreachable data kind");
}

json standardizer_to_json(const data::Standardizer& s) {
  json j;
  j["format"] = "conforest.standardizer";
  j["version"] = 1;
  json mean = json::array(), std = json::array();
  for (Index i = 0; i < s.mean.size(); ++i) {
    mean.push_back(s.mean(i));
    std.push_back(s.std(i));
  }
  j["mean"] = std::move(mean);
  j["std"] = std::move(std);
  return j;
}

data::Standardizer standardizer_from_json(const std::string& text) {
  const json j = json::parse(text);
  data::Standardizer s;
  const auto& jm = j.at("mean");
  const auto& js = j.at("std");
  s.mean.resize(static_cast<Index>(jm.size()));
  s.std.resize(static_cast<Index>(js.size()));
  for (Index i = 0; i < s.mean.size(); ++i) {
    s.mean(i) = jm[static_cast<std::size_t>(i)].get<double>();
    s.std(i) = js[static_cast<std::size_t>(i)].get<double>();
  }
  return s;
}

json history_to_json(const nn::TrainHistory& history) {
  json epochs = json::array();
  for (const auto& rec : history.epochs)
    epochs.push_back({{"epoch", rec.epoch},
                      {"train_loss", rec.train_loss},
                      {"val_loss", rec.val_loss},
                      {"lr", rec.lr},
                      {"improved", rec.improved},
                      {"lr_decayed", rec.lr_decayed}});
  return {{"best_epoch", history.best_epoch},
          {"best_val_loss", history.best_val_loss},
          {"stopped_early", history.stopped_early},
          {"epochs", std::move(epochs)}};
}

}  // namespace

PartitionData prepare_partition(const ExperimentConfig& config,
                                int partition) {
  data::Dataset full = load_full_dataset(config);
  data::SplitSpec spec = config.split;
  spec.seed = config.master_seed;
  data::SplitResult split = data::split(full, spec, partition);
  PartitionData out;
  out.standardizer = data::fit_standardizer(split.train);
  if (config.standardize) {
    out.train = data::apply_standardizer(out.standardizer, split.train);
    out.cal = data::apply_standardizer(out.standardizer, split.cal);
    out.test = data::apply_standardizer(out.standardizer, split.test);
  } else {
    out.train = std::move(split.train);
    out.cal = std::move(split.cal);
    out.test = std::move(split.test);
  }
  return out;
}

void write_manifest(const ExperimentConfig& config) {
  json j;
  j["format"] = "conforest.manifest";
  j["version"] = 1;
  j["config_hash"] = config_hash(config);
  j["master_seed"] = config.master_seed;
  j["config"] = json::parse(config_to_json(config));
  json partitions = json::array();
  for (int p = 0; p < config.split.n_partitions; ++p) {
    json jp;
    jp["index"] = p;
    jp["seed"] = partition_seed(config, p);
    jp["models_dir"] = models_dir(config, p);
    jp["reports_dir"] = reports_dir(config, p);
    partitions.push_back(std::move(jp));
  }
  j["partitions"] = std::move(partitions);
  j["created_unix"] = static_cast<long long>(std::time(nullptr));
  write_text(join_path(config.output_dir, "manifest.json"), j.dump(2) + "\n");
}

void run_synth(const ExperimentConfig& config) {
  if (config.data.kind != DataSpec::Kind::kSynthetic)
    throw ConfigError("synth requires data.kind == synthetic");
  ensure_run_dir(config.output_dir);
  for (int p = 0; p < config.split.n_partitions; ++p) {
    const PartitionData part = [&] {
      // Emit raw (unstandardized) CSVs; training re-derives the scaler.
      ExperimentConfig raw = config;
      raw.standardize = false;
      return prepare_partition(raw, p);
    }();
    ensure_subdir(data_dir(config, p));
    data::write_csv(join_path(data_dir(config, p), "train.csv"), part.train);
    data::write_csv(join_path(data_dir(config, p), "cal.csv"), part.cal);
    data::write_csv(join_path(data_dir(config, p), "test.csv"), part.test);
  }
  write_manifest(config);
}

namespace {

struct PartitionModels {
  std::optional<nn::MlpModel> ann;
  std::optional<drf::Forest> drf_forest;
  std::optional<rf::Forest> residual_rf;
};

bool any_of_methods(const ExperimentConfig& c, bool (*pred)(Method)) {
  return std::any_of(c.methods.begin(), c.methods.end(), pred);
}

// The evaluation re-derives the split and scaler from the config; the scaler
// persisted at training time must agree, or the models belong to a
// different configuration.
void verify_standardizer(const ExperimentConfig& config, int partition,
                         const data::Standardizer& derived) {
  const std::string path =
      join_path(models_dir(config, partition), "standardizer.json");
  const data::Standardizer persisted = standardizer_from_json(read_text(path));
  if (persisted.mean != derived.mean || persisted.std != derived.std)
    throw MissingArtifactError(
        "persisted standardizer does not match the current config; retrain "
        "before evaluating (" + path + ")");
}

PartitionModels load_models(const ExperimentConfig& config, int partition,
                            const PartitionData& part) {
  verify_standardizer(config, partition, part.standardizer);
  PartitionModels models;
  const std::string dir = models_dir(config, partition);
  if (any_of_methods(config, needs_ann))
    models.ann = nn::load_mlp(join_path(dir, "ann.json"));
  if (any_of_methods(config, needs_drf))
    models.drf_forest = drf::load_forest(join_path(dir, "drf.json"));
  if (any_of_methods(config, needs_rf))
    models.residual_rf = rf::load_forest(join_path(dir, "rf_residual.json"));
  return models;
}

}  // namespace

void run_train(const ExperimentConfig& config, int partition) {
  ensure_run_dir(config.output_dir);
  const int first = partition < 0 ? 0 : partition;
  const int last = partition < 0 ? config.split.n_partitions - 1 : partition;
  if (first >= config.split.n_partitions)
    throw ConfigError("partition index out of range");

  for (int p = first; p <= last; ++p) {
    const PartitionData part = prepare_partition(config, p);
    const std::string dir = models_dir(config, p);
    ensure_subdir(dir);
    write_text(join_path(dir, "standardizer.json"),
               standardizer_to_json(part.standardizer).dump(2) + "\n");

    const std::uint64_t pseed = partition_seed(config, p);
    std::optional<nn::MlpModel> ann;

    if (any_of_methods(config, needs_ann)) {
      nn::MlpConfig ann_config = config.ann;
      ann_config.seed = Rng(pseed).spawn(0xA).next_u64();
      const nn::MlpModel init = nn::init_mlp(ann_config, part.train.cols());
      nn::TrainResult trained =
          nn::train(init, part.train, part.cal, config.ann_schedule);
      nn::save_mlp(join_path(dir, "ann.json"), trained.model);
      write_text(join_path(dir, "ann_history.json"),
                 history_to_json(trained.history).dump(2) + "\n");
      ann = std::move(trained.model);
    }

    if (any_of_methods(config, needs_drf)) {
      drf::DrfConfig drf_config = config.drf;
      drf_config.seed = Rng(pseed).spawn(0xB).next_u64();
      const drf::Forest init = drf::init_forest(drf_config, part.train.cols(),
                                                part.train.targets);
      drf::TrainResult trained =
          drf::train_drf(init, part.train, part.cal, config.drf_schedule);
      drf::save_forest(join_path(dir, "drf.json"), trained.forest);
      write_text(join_path(dir, "drf_history.json"),
                 history_to_json(trained.history).dump(2) + "\n");
    }

    if (any_of_methods(config, needs_rf)) {
      rf::RfConfig rf_config = config.rf;
      rf_config.seed = Rng(pseed).spawn(0xC).next_u64();
      const Vector train_predictions =
          nn::forward(*ann, part.train.features, nn::Mode::kEval, 0)
              .outputs.col(0);
      const rf::Forest residual = rf::fit_residual_model(
          train_predictions, part.train.targets, part.train.features,
          rf_config);
      rf::save_forest(join_path(dir, "rf_residual.json"), residual);
    }
  }
  write_manifest(config);
}

namespace {

// Predictions and sigmas are computed once per (partition, method) and reused
// for every confidence level.
struct MethodContext {
  conformal::PointPredictor predict;
  conformal::UncertaintyEstimator estimator;
};

MethodContext make_context(const ExperimentConfig& config, Method method,
                           const PartitionModels& models, int partition) {
  MethodContext ctx;
  switch (method) {
    case Method::kAnnCp:
      ctx.predict = conformal::mlp_predictor(*models.ann);
      ctx.estimator = conformal::constant_estimator();
      break;
    case Method::kAnnMcd:
      ctx.predict = conformal::mlp_predictor(*models.ann);
      ctx.estimator = conformal::mcd_estimator(
          *models.ann, config.mcd_passes,
          Rng(partition_seed(config, partition)).spawn(0xD).next_u64());
      break;
    case Method::kAnnRf:
      ctx.predict = conformal::mlp_predictor(*models.ann);
      ctx.estimator = conformal::rf_residual_estimator(*models.residual_rf);
      break;
    case Method::kDrfStd:
      ctx.predict = conformal::drf_predictor(*models.drf_forest);
      ctx.estimator = conformal::drf_estimator(*models.drf_forest, false);
      break;
    case Method::kDrfStdEns:
      ctx.predict = conformal::drf_predictor(*models.drf_forest);
      ctx.estimator = conformal::drf_estimator(*models.drf_forest, true);
      break;
  }
  return ctx;
}

struct CachedIcpInputs {
  Vector cal_predictions, cal_sigmas;
  Vector test_predictions, test_sigmas;
  bool constant = false;
};

CachedIcpInputs cache_icp_inputs(const MethodContext& ctx,
                                 const PartitionData& part) {
  CachedIcpInputs cache;
  cache.constant = ctx.estimator.constant;
  cache.cal_predictions = ctx.predict(part.cal.features);
  cache.test_predictions = ctx.predict(part.test.features);
  if (cache.constant) {
    cache.cal_sigmas = Vector::Zero(part.cal.rows());
    cache.test_sigmas = Vector::Zero(part.test.rows());
  } else {
    cache.cal_sigmas = ctx.estimator.sigma(part.cal.features);
    cache.test_sigmas = ctx.estimator.sigma(part.test.features);
  }
  return cache;
}

conformal::IcpResult icp_from_cache(const CachedIcpInputs& cache,
                                    const data::Dataset& cal,
                                    double alpha, double beta,
                                    conformal::QuantileMode mode) {
  std::vector<double> scores(static_cast<std::size_t>(cal.rows()));
  for (Index i = 0; i < cal.rows(); ++i)
    scores[static_cast<std::size_t>(i)] =
        cache.constant
            ? conformal::score(cache.cal_predictions(i), cal.targets(i))
            : conformal::normalized_score(cache.cal_predictions(i),
                                          cal.targets(i), cache.cal_sigmas(i),
                                          beta);
  conformal::IcpResult result;
  result.calibration.sorted_scores = scores;
  std::sort(result.calibration.sorted_scores.begin(),
            result.calibration.sorted_scores.end());
  result.calibration.alpha = alpha;
  result.calibration.beta = beta;
  result.calibration.mode = mode;
  result.calibration.q_hat = conformal::calibrate(scores, alpha, mode);
  result.test_predictions = cache.test_predictions;
  result.test_sigmas = cache.test_sigmas;
  result.intervals.reserve(
      static_cast<std::size_t>(cache.test_predictions.size()));
  for (Index i = 0; i < cache.test_predictions.size(); ++i) {
    if (cache.constant)
      result.intervals.push_back(conformal::interval_constant(
          cache.test_predictions(i), result.calibration.q_hat));
    else
      result.intervals.push_back(conformal::interval_normalized(
          cache.test_predictions(i), cache.test_sigmas(i),
          result.calibration.q_hat, beta));
  }
  return result;
}

metrics::EvaluationReport evaluate_run(const ExperimentConfig& config,
                                       Method method, double cl, int partition,
                                       const CachedIcpInputs& cache,
                                       const conformal::IcpResult& icp,
                                       const PartitionData& part) {
  metrics::EvaluationReport report;
  report.method = to_string(method);
  report.confidence_level = cl;
  report.partition = partition;
  report.r2 = metrics::r2(icp.test_predictions, part.test.targets);
  if (!cache.constant) {
    const Vector abs_residuals =
        (part.test.targets - icp.test_predictions).cwiseAbs();
    report.pcc_uncertainty_error = metrics::pcc(icp.test_sigmas, abs_residuals);
  }
  report.coverage = metrics::coverage(icp.intervals, part.test.targets);
  const metrics::WidthSummary width = metrics::mean_width(icp.intervals);
  report.mean_width = width.mean_width;
  report.unbounded_intervals = width.unbounded_count;
  report.bin_coverage = metrics::conditional_coverage(
      icp.intervals, part.test.targets, config.bins);
  report.mad_conditional_coverage =
      metrics::mad_conditional_coverage(report.bin_coverage, cl);
  return report;
}

json calibration_to_json(const conformal::Calibration& cal) {
  json scores = json::array();
  for (double s : cal.sorted_scores) scores.push_back(s);
  return {{"format", "conforest.calibration"},
          {"version", 1},
          {"alpha", cal.alpha},
          {"beta", cal.beta},
          {"quantile_mode", conformal::to_string(cal.mode)},
          {"m", cal.sorted_scores.size()},
          {"q_hat", cal.unbounded() ? json(nullptr) : json(cal.q_hat)},
          {"unbounded", cal.unbounded()},
          {"sorted_scores", std::move(scores)}};
}

}  // namespace

std::string report_to_json(const metrics::EvaluationReport& report) {
  json j;
  j["format"] = "conforest.report";
  j["version"] = 1;
  j["method"] = report.method;
  j["confidence_level"] = report.confidence_level;
  j["partition"] = report.partition;
  j["r2"] = report.r2;
  j["pcc_uncertainty_error"] = report.pcc_uncertainty_error
                                   ? json(*report.pcc_uncertainty_error)
                                   : json(nullptr);
  j["coverage"] = report.coverage;
  j["mean_width"] = std::isfinite(report.mean_width) ? json(report.mean_width)
                                                     : json(nullptr);
  j["unbounded_intervals"] = report.unbounded_intervals;
  json bins;
  for (const auto& [label, bin] : report.bin_coverage)
    bins[label] = {{"coverage", bin.coverage}, {"count", bin.count}};
  j["bin_coverage"] = std::move(bins);
  j["mad_conditional_coverage"] = report.mad_conditional_coverage;
  return j.dump(2);
}

metrics::EvaluationReport report_from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  metrics::EvaluationReport report;
  report.method = j.at("method").get<std::string>();
  report.confidence_level = j.at("confidence_level").get<double>();
  report.partition = j.at("partition").get<int>();
  report.r2 = j.at("r2").get<double>();
  if (!j.at("pcc_uncertainty_error").is_null())
    report.pcc_uncertainty_error =
        j.at("pcc_uncertainty_error").get<double>();
  report.coverage = j.at("coverage").get<double>();
  report.mean_width = j.at("mean_width").is_null()
                          ? std::numeric_limits<double>::infinity()
                          : j.at("mean_width").get<double>();
  report.unbounded_intervals = j.at("unbounded_intervals").get<Index>();
  for (const auto& [label, jb] : j.at("bin_coverage").items())
    report.bin_coverage[label] =
        metrics::BinCoverage{jb.at("coverage").get<double>(),
                             jb.at("count").get<Index>()};
  report.mad_conditional_coverage =
      j.at("mad_conditional_coverage").get<double>();
  return report;
}

namespace {

metrics::EvaluationReport average_reports(
    const std::vector<metrics::EvaluationReport>& runs) {
  metrics::EvaluationReport agg;
  agg.method = runs.front().method;
  agg.confidence_level = runs.front().confidence_level;
  agg.partition = -1;
  const double n = static_cast<double>(runs.size());
  bool any_pcc = false;
  double pcc_sum = 0.0;
  std::map<std::string, std::pair<double, std::pair<Index, int>>> bin_acc;
  for (const auto& r : runs) {
    agg.r2 += r.r2 / n;
    agg.coverage += r.coverage / n;
    agg.mean_width += r.mean_width / n;  // inf propagates
    agg.unbounded_intervals += r.unbounded_intervals;
    agg.mad_conditional_coverage += r.mad_conditional_coverage / n;
    if (r.pcc_uncertainty_error) {
      any_pcc = true;
      pcc_sum += *r.pcc_uncertainty_error;
    }
    for (const auto& [label, bin] : r.bin_coverage) {
      auto& acc = bin_acc[label];
      acc.first += bin.coverage;
      acc.second.first += bin.count;
      acc.second.second += 1;
    }
  }
  if (any_pcc) agg.pcc_uncertainty_error = pcc_sum / n;
  for (const auto& [label, acc] : bin_acc)
    agg.bin_coverage[label] = metrics::BinCoverage{
        acc.first / static_cast<double>(acc.second.second),
        acc.second.first};
  return agg;
}

void write_tables(const ExperimentConfig& config,
                  const std::vector<metrics::EvaluationReport>& aggregates) {
  auto find = [&](Method m, double cl) -> const metrics::EvaluationReport* {
    for (const auto& r : aggregates)
      if (r.method == to_string(m) && r.confidence_level == cl) return &r;
    return nullptr;
  };

  // Conditional-coverage table: R2 and PCC rows, then per-CL bin coverages
  // and the MAD row.
  std::ostringstream cond;
  cond << "cl,metric";
  for (Method m : config.methods) cond << ',' << to_string(m);
  cond << "\n";
  auto emit_row = [&](std::optional<double> cl, const std::string& metric,
                      auto getter) {
    cond << (cl ? format_double(*cl) : "") << ',' << metric;
    for (Method m : config.methods) {
      // R2/PCC rows do not vary with CL; read them off the first level.
      const auto* r = find(m, cl ? *cl : config.confidence_levels.front());
      const std::optional<double> v =
          r ? getter(*r) : std::optional<double>();
      cond << ',' << (v ? format_double(*v) : "NA");
    }
    cond << "\n";
  };
  emit_row(std::nullopt, "r2", [](const metrics::EvaluationReport& r) {
    return std::optional<double>(r.r2);
  });
  emit_row(std::nullopt, "pcc_uncertainty_error",
           [](const metrics::EvaluationReport& r) {
             return r.pcc_uncertainty_error;
           });
  for (double cl : config.confidence_levels) {
    for (const std::string& label : config.bins.labels) {
      emit_row(cl, "coverage_" + label,
               [&label](const metrics::EvaluationReport& r)
                   -> std::optional<double> {
                 const auto it = r.bin_coverage.find(label);
                 if (it == r.bin_coverage.end()) return std::nullopt;
                 return it->second.coverage;
               });
    }
    emit_row(cl, "mad_conditional_coverage",
             [](const metrics::EvaluationReport& r) {
               return std::optional<double>(r.mad_conditional_coverage);
             });
  }
  write_text(join_path(config.output_dir, "reports/table_conditional.csv"),
             cond.str());

  // Marginal table: coverage and width per CL.
  std::ostringstream marg;
  marg << "cl,metric";
  for (Method m : config.methods) marg << ',' << to_string(m);
  marg << "\n";
  for (double cl : config.confidence_levels) {
    marg << format_double(cl) << ",coverage";
    for (Method m : config.methods) {
      const auto* r = find(m, cl);
      marg << ',' << (r ? format_double(r->coverage) : "NA");
    }
    marg << "\n" << format_double(cl) << ",interval_width";
    for (Method m : config.methods) {
      const auto* r = find(m, cl);
      marg << ',' << (r ? format_double(r->mean_width) : "NA");
    }
    marg << "\n";
  }
  write_text(join_path(config.output_dir, "reports/table_marginal.csv"),
             marg.str());
}

}  // namespace

EvaluationOutput run_evaluate(const ExperimentConfig& config) {
  ensure_run_dir(config.output_dir);
  EvaluationOutput output;

  for (int p = 0; p < config.split.n_partitions; ++p) {
    const PartitionData part = prepare_partition(config, p);
    const PartitionModels models = load_models(config, p, part);
    ensure_subdir(reports_dir(config, p));
    ensure_subdir(calibration_dir(config, p));

    for (Method method : config.methods) {
      const MethodContext ctx = make_context(config, method, models, p);
      const CachedIcpInputs cache = cache_icp_inputs(ctx, part);
      for (double cl : config.confidence_levels) {
        const conformal::IcpResult icp = icp_from_cache(
            cache, part.cal, 1.0 - cl, config.beta, config.quantile_mode);
        const metrics::EvaluationReport report =
            evaluate_run(config, method, cl, p, cache, icp, part);
        const std::string tag = run_tag(method, cl);
        write_text(join_path(reports_dir(config, p), tag + ".json"),
                   report_to_json(report) + "\n");
        write_text(join_path(calibration_dir(config, p), tag + ".json"),
                   calibration_to_json(icp.calibration).dump(2) + "\n");
        output.per_run.push_back(report);
      }
    }
  }

  ensure_subdir(aggregate_dir(config));
  for (Method method : config.methods) {
    for (double cl : config.confidence_levels) {
      std::vector<metrics::EvaluationReport> runs;
      for (const auto& r : output.per_run)
        if (r.method == to_string(method) && r.confidence_level == cl)
          runs.push_back(r);
      const metrics::EvaluationReport agg = average_reports(runs);
      write_text(join_path(aggregate_dir(config),
                           run_tag(method, cl) + ".json"),
                 report_to_json(agg) + "\n");
      output.aggregates.push_back(agg);
    }
  }
  write_tables(config, output.aggregates);
  write_manifest(config);
  return output;
}

void run_calibrate(const ExperimentConfig& config, Method method,
                   double confidence_level, int partition) {
  if (std::find(config.methods.begin(), config.methods.end(), method) ==
      config.methods.end())
    throw ConfigError("method " + to_string(method) +
                      " is not in the configured method list");
  const PartitionData part = prepare_partition(config, partition);
  const PartitionModels models = load_models(config, partition, part);
  const MethodContext ctx = make_context(config, method, models, partition);
  const CachedIcpInputs cache = cache_icp_inputs(ctx, part);
  const conformal::IcpResult icp =
      icp_from_cache(cache, part.cal, 1.0 - confidence_level, config.beta,
                     config.quantile_mode);
  ensure_run_dir(config.output_dir);
  ensure_subdir(calibration_dir(config, partition));
  write_text(join_path(calibration_dir(config, partition),
                       run_tag(method, confidence_level) + ".json"),
             calibration_to_json(icp.calibration).dump(2) + "\n");
}

void run_intervals(const ExperimentConfig& config, Method method,
                   double confidence_level, int partition) {
  if (std::find(config.methods.begin(), config.methods.end(), method) ==
      config.methods.end())
    throw ConfigError("method " + to_string(method) +
                      " is not in the configured method list");
  const PartitionData part = prepare_partition(config, partition);
  const PartitionModels models = load_models(config, partition, part);
  const MethodContext ctx = make_context(config, method, models, partition);
  const CachedIcpInputs cache = cache_icp_inputs(ctx, part);
  const conformal::IcpResult icp =
      icp_from_cache(cache, part.cal, 1.0 - confidence_level, config.beta,
                     config.quantile_mode);
  ensure_run_dir(config.output_dir);
  ensure_subdir(intervals_dir(config, partition));
  const std::string tag = run_tag(method, confidence_level);
  conformal::write_intervals_csv(
      join_path(intervals_dir(config, partition), tag + ".csv"), icp,
      part.test, /*sort_by_prediction=*/false);
  conformal::write_intervals_csv(
      join_path(intervals_dir(config, partition), tag + "_sorted.csv"), icp,
      part.test, /*sort_by_prediction=*/true);
}

EvaluationOutput run_report(const ExperimentConfig& config) {
  EvaluationOutput output;
  for (int p = 0; p < config.split.n_partitions; ++p)
    for (Method method : config.methods)
      for (double cl : config.confidence_levels)
        output.per_run.push_back(report_from_json(read_text(
            join_path(reports_dir(config, p), run_tag(method, cl) + ".json"))));

  ensure_subdir(aggregate_dir(config));
  for (Method method : config.methods) {
    for (double cl : config.confidence_levels) {
      std::vector<metrics::EvaluationReport> runs;
      for (const auto& r : output.per_run)
        if (r.method == to_string(method) && r.confidence_level == cl)
          runs.push_back(r);
      const metrics::EvaluationReport agg = average_reports(runs);
      write_text(join_path(aggregate_dir(config),
                           run_tag(method, cl) + ".json"),
                 report_to_json(agg) + "\n");
      output.aggregates.push_back(agg);
    }
  }
  write_tables(config, output.aggregates);
  return output;
}

}  // namespace conforest::experiment
