#include "run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

#include "bunet/decimal.hpp"
#include "bunet/errors.hpp"
#include "bunet/random.hpp"

namespace bunet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_train(const json& j, TrainConfig& t, const std::string& where) {
  check_keys(j, {"lr", "beta1", "beta2", "eps", "batch_size", "max_epochs", "patience"}, where);
  read(j, "lr", t.lr);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "eps", t.eps);
  read(j, "batch_size", t.batch_size);
  read(j, "max_epochs", t.max_epochs);
  read(j, "patience", t.patience);
}

json train_json(const TrainConfig& t) {
  return {{"lr", shortest_decimal(t.lr)},
          {"beta1", shortest_decimal(t.beta1)},
          {"beta2", shortest_decimal(t.beta2)},
          {"eps", shortest_decimal(t.eps)},
          {"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"patience", t.patience}};
}

}  // namespace

fs::path resolve_run_dir(const fs::path& run) {
  if (run.is_absolute()) return run;
  if (const char* root = std::getenv(kRunRootEnv); root && *root) return fs::path(root) / run;
  return run;
}

ThresholdPolicy parse_threshold_policy(const std::string& name) {
  if (name == "histogram_auto") return ThresholdPolicy::histogram_auto;
  if (name == "fixed") return ThresholdPolicy::fixed;
  throw ConfigError("threshold_policy must be 'histogram_auto' or 'fixed', got '" + name + "'");
}

RunConfig load_run_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    const json j = json::parse(in);
    check_keys(j, {"data", "run_dir", "model", "train", "stage2_train", "mc_samples", "patch", "threshold_policy",
                   "fixed_threshold", "seed"},
               path.string());
    if (j.contains("data")) base.data = j.at("data").get<std::string>();
    if (j.contains("run_dir")) base.run_dir = j.at("run_dir").get<std::string>();
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, {"base_filters", "levels", "kernel", "dropout_rate", "final_kernel"}, path.string() + " model");
      read(m, "base_filters", base.model.base_filters);
      read(m, "levels", base.model.levels);
      read(m, "kernel", base.model.kernel);
      read(m, "dropout_rate", base.model.dropout_rate);
      read(m, "final_kernel", base.model.final_kernel);
    }
    if (j.contains("train")) {
      read_train(j.at("train"), base.stage1, path.string() + " train");
      // Stage 2 follows stage 1 unless configured separately.
      if (!j.contains("stage2_train")) read_train(j.at("train"), base.stage2, path.string() + " train");
    }
    if (j.contains("stage2_train")) read_train(j.at("stage2_train"), base.stage2, path.string() + " stage2_train");
    read(j, "mc_samples", base.mc_samples);
    read(j, "patch", base.patch);
    if (j.contains("threshold_policy")) base.threshold_policy = parse_threshold_policy(j.at("threshold_policy"));
    read(j, "fixed_threshold", base.fixed_threshold);
    read(j, "seed", base.seed);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return base;
}

std::string run_config_json(const RunConfig& c) {
  // run_dir is left out: a saved config lives in its run directory.
  const json j{{"data", c.data.string()},
               {"model",
                {{"base_filters", c.model.base_filters},
                 {"levels", c.model.levels},
                 {"kernel", c.model.kernel},
                 {"dropout_rate", shortest_decimal(c.model.dropout_rate)},
                 {"final_kernel", c.model.final_kernel}}},
               {"train", train_json(c.stage1)},
               {"stage2_train", train_json(c.stage2)},
               {"mc_samples", c.mc_samples},
               {"patch", c.patch},
               {"threshold_policy", c.threshold_policy == ThresholdPolicy::fixed ? "fixed" : "histogram_auto"},
               {"fixed_threshold", c.fixed_threshold},
               {"seed", c.seed}};
  return j.dump(2) + "\n";
}

void save_run_config(const RunConfig& config, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << run_config_json(config);
  if (!out) throw IoError("failed writing " + path.string());
}

PipelineConfig to_pipeline(const RunConfig& c) {
  if (c.mc_samples < 1) throw ConfigError("mc_samples must be at least 1");
  if (c.patch == 0) throw ConfigError("patch must be positive");
  PipelineConfig p;
  p.run_dir = c.run_dir;
  p.model = c.model;
  p.stage1 = c.stage1;
  p.stage2 = c.stage2;
  p.stage1.seed = mix_seed(c.seed, 101);
  p.stage2.seed = mix_seed(c.seed, 102);
  p.mc_samples = c.mc_samples;
  p.patch = c.patch;
  p.threshold_policy = c.threshold_policy;
  p.fixed_threshold = c.fixed_threshold;
  p.model_seed = c.seed;
  p.mc_seed = mix_seed(c.seed, 103);
  return p;
}

}  // namespace bunet::cli
