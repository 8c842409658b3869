#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace bunet::cli {

/// Misuse of the command line (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenerateOptions {
  std::filesystem::path out;
  std::size_t train = 144;
  std::size_t val = 50;
  std::size_t test = 50;
  std::size_t size = 256;
  double looks = 4.0;
  std::uint64_t seed = 0;
  bool force = false;
};

/// Command-line overrides applied on top of the config file; unset fields keep
/// the configured value.
struct TrainOverrides {
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> run;
  std::optional<float> lr;
  std::optional<int> epochs;
  std::optional<int> patience;
  std::optional<std::size_t> batch_size;
  std::optional<float> dropout_rate;
  std::optional<std::size_t> mc_samples;
  std::optional<std::size_t> base_filters;
  std::optional<std::size_t> levels;
  std::optional<std::size_t> kernel;
  std::optional<std::size_t> patch;
  std::optional<std::string> threshold_policy;
  std::optional<double> fixed_threshold;
  std::optional<std::uint64_t> seed;
};

struct TrainOptions {
  int stage = 1;
  std::optional<std::filesystem::path> config;
  TrainOverrides overrides;
  bool force = false;
};

struct PredictOptions {
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> images;
  std::filesystem::path out;
  std::optional<std::filesystem::path> uncertainty;
  std::size_t mc_samples = 20;
  std::uint64_t seed = 0;
  std::optional<double> threshold;
  std::size_t patch = 256;
  bool overlay = false;
  bool force = false;
};

struct EvaluateOptions {
  std::filesystem::path run;
  std::string split = "test";
  std::vector<std::filesystem::path> baselines;
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> report;
  bool force = false;
};

void cmd_generate(const GenerateOptions& options);
void cmd_train(const TrainOptions& options);
void cmd_predict(const PredictOptions& options);
void cmd_evaluate(const EvaluateOptions& options);

/// Config resolution for `train`: defaults, then the saved run config (stage
/// 2 only), then the config file, then flags.
RunConfig resolve_train_config(const TrainOptions& options);

}  // namespace bunet::cli
