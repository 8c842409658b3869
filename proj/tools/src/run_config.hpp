#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "bunet/optim.hpp"
#include "bunet/pipeline.hpp"
#include "bunet/unet.hpp"

namespace bunet::cli {

/// Everything a training run needs, as read from a JSON config file and
/// command-line overrides. Defaults follow the full-size setup.
struct RunConfig {
  std::filesystem::path data = "data";
  std::filesystem::path run_dir = "run";
  UNetSpec model;
  TrainConfig stage1;
  TrainConfig stage2;
  std::size_t mc_samples = 20;
  std::size_t patch = 256;
  ThresholdPolicy threshold_policy = ThresholdPolicy::histogram_auto;
  double fixed_threshold = 0.125;
  std::uint64_t seed = 0;
};

/// Run directories given as relative paths are resolved against this root:
/// $BUNET_RUN_ROOT when set, the working directory otherwise.
inline constexpr const char* kRunRootEnv = "BUNET_RUN_ROOT";
std::filesystem::path resolve_run_dir(const std::filesystem::path& run);

/// Overlays the keys present in a JSON file onto `base`. Unknown keys and
/// ill-typed values raise ConfigError. Saved configs omit run_dir.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);
std::string run_config_json(const RunConfig& config);

/// Pipeline settings with per-stage seeds derived from config.seed.
PipelineConfig to_pipeline(const RunConfig& config);

ThresholdPolicy parse_threshold_policy(const std::string& name);

}  // namespace bunet::cli
