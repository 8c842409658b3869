#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "bunet/tensor.hpp"
#include "bunet/unet.hpp"

namespace bunet {

/// T stochastic forward passes for one input. Pass t used an RNG stream
/// seeded with seed_base + t.
struct McSampleSet {
  std::vector<Tensor> samples;  // each [h, w], values in (0, 1)
  std::uint64_t seed_base = 0;

  std::size_t count() const noexcept { return samples.size(); }
};

/// Monte-Carlo dropout: dropout active, batch norm in eval mode, no tape.
/// x is [c, h, w] or [1, c, h, w]. Throws ConfigError when passes < 1.
McSampleSet mc_sample(UNet& net, const Tensor& x, std::size_t passes, std::uint64_t seed_base);

/// Elementwise mean over the samples, (1/T) sum_t p_t.
Tensor posterior_mean(const McSampleSet& set);
/// Elementwise population variance (1/T) sum_t (p_t - mean)^2, accumulated in double.
Tensor posterior_variance(const McSampleSet& set);

inline constexpr std::size_t kThresholdBins = 10;
inline constexpr float kMaxBernoulliVariance = 0.25f;

struct Histogram {
  double min = 0.0;
  double max = 0.0;
  std::array<double, kThresholdBins + 1> edges{};
  std::array<std::size_t, kThresholdBins> counts{};
};

/// Equal-width 10-bin histogram of all values pooled across the tensors.
Histogram pooled_histogram(const std::vector<Tensor>& variances);

/// Lower edge of the last histogram bin, i.e. min + 0.9 (max - min); the
/// maximum itself when all values coincide. Throws DataError on empty input.
double select_threshold(const std::vector<Tensor>& variances);

/// 1 where variance >= threshold, else 0. Throws ContractError on a negative threshold.
Tensor binarize(const Tensor& variance, double threshold);

struct UncertaintyMap {
  Tensor variance;   // [h, w]
  Tensor binarized;  // [h, w], {0, 1}
  double threshold = 0.0;
};

UncertaintyMap make_uncertainty_map(const Tensor& variance, double threshold);

/// Variance mapped linearly from [0, 0.25] onto [0, 255].
void write_uncertainty_heatmap(const Tensor& variance, const std::filesystem::path& path);

/// Raw float32 little-endian payload at `path` plus a JSON sidecar at
/// path + ".json" holding shape and threshold.
void write_variance_raw(const UncertaintyMap& map, const std::filesystem::path& path);
UncertaintyMap read_variance_raw(const std::filesystem::path& path);

}  // namespace bunet
