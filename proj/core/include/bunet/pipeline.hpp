#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bunet/bayes.hpp"
#include "bunet/data.hpp"
#include "bunet/metrics.hpp"
#include "bunet/optim.hpp"
#include "bunet/unet.hpp"

namespace bunet {

enum class ThresholdPolicy { histogram_auto, fixed };

struct PipelineConfig {
  std::filesystem::path run_dir;
  /// Architecture shared by both stages; in_channels is set per stage (1, then 2).
  UNetSpec model;
  TrainConfig stage1;
  TrainConfig stage2;
  std::size_t mc_samples = 20;
  /// Images larger than this are predicted on overlapping patch x patch tiles.
  std::size_t patch = 256;
  ThresholdPolicy threshold_policy = ThresholdPolicy::histogram_auto;
  double fixed_threshold = 0.125;
  std::uint64_t model_seed = 0;
  std::uint64_t mc_seed = 0;
  /// Splits predicted and scored after stage 2.
  std::vector<std::string> stage2_eval_splits = {"val", "test"};
};

struct StageArtifacts {
  int stage = 0;
  std::string method;
  std::filesystem::path dir;
  std::filesystem::path checkpoint;
  std::filesystem::path uncertainty_dir;
  double threshold = 0.0;
  TrainingLog log;
  std::map<std::string, MetricsReport> metrics;  // keyed by split
};

using ProgressFn = std::function<void(const std::string&)>;

struct Prediction {
  Tensor mask;  // [h, w], MC mean >= 0.5
  Tensor mean;  // [h, w]
  UncertaintyMap uncertainty;
};

inline constexpr float kMaskThreshold = 0.5f;

/// MC-dropout prediction of a [c, h, w] image: mean of `passes` samples
/// thresholded at 0.5, variance binarized at `threshold`.
Prediction predict(UNet& net, const Tensor& image, std::size_t passes, std::uint64_t seed, double threshold);

/// Same as predict() on overlapping patch x patch tiles, stitched by averaging
/// the per-tile mean and variance.
Prediction predict_tiled(UNet& net, const Tensor& image, std::size_t patch, std::size_t stride, std::size_t passes,
                         std::uint64_t seed, double threshold);

/// predict() for images that fit in one patch, predict_tiled() with half-patch
/// stride otherwise.
Prediction predict_image(UNet& net, const Tensor& image, std::size_t patch, std::size_t passes, std::uint64_t seed,
                         double threshold);

std::filesystem::path stage_dir(const std::filesystem::path& run_dir, int stage);
/// Label used in reports: deterministic baseline, Bayesian stage 1 or stage 2.
std::string method_label(int stage, float dropout_rate);

/// Per-image MC seed base, distinct for every (split, index) pair.
std::uint64_t image_seed(std::uint64_t mc_seed, const std::string& split, std::size_t index);

/// Trains the single-channel network, generates an uncertainty map and a
/// prediction for every image of every split, selects the binarization
/// threshold from the training maps and persists everything under
/// <run_dir>/stage1.
StageArtifacts run_stage1(const PipelineConfig& config, const DatasetSplit& dataset, const ProgressFn& progress = {});

/// Trains a fresh two-channel network on (image, binarized stage-1 map)
/// pairs and predicts the configured splits under <run_dir>/stage2. Throws
/// DataError when stage-1 artifacts or any uncertainty map are missing.
StageArtifacts run_stage2(const PipelineConfig& config, const DatasetSplit& dataset, const ProgressFn& progress = {});

/// Stacks an image with its binarized uncertainty map as channel 1.
Tensor two_channel_input(const Tensor& image, const Tensor& binarized);

/// Reads <dir>/metrics.json written by a stage.
std::map<std::string, MetricsReport> read_stage_metrics(const std::filesystem::path& dir);

/// Scores <stage dir>/predictions/<split>/<id>.pgm against the dataset masks.
/// Throws DataError when a prediction is missing or has the wrong size.
MetricsReport evaluate_predictions(const std::filesystem::path& stage, const DatasetSplit& dataset,
                                   const std::string& split, const std::string& method);

/// Echo of the configuration written as the first training-log record.
std::string config_header_json(const PipelineConfig& config, int stage);

}  // namespace bunet
