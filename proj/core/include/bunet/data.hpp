#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bunet/tensor.hpp"

namespace bunet {

/// One training/evaluation example. image: [channels, h, w] in [0, 1];
/// mask: [1, h, w] with entries in {0, 1}.
struct Sample {
  std::string id;
  Tensor image;
  Tensor mask;
};

/// Stacks samples[indices] into ([b, c, h, w] images, [b, 1, h, w] masks).
std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

// --- 8-bit grayscale images ---------------------------------------------------

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Binary PGM (P5, maxval 255). Other formats raise FormatError.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const GrayImage& image, const std::filesystem::path& path);

/// 8-bit [0, 255] -> [0, 1] as a [1, h, w] tensor.
Tensor normalize(const GrayImage& image);
/// Inverse of normalize for values on the 1/255 grid; other values round to nearest, clamped.
GrayImage to_gray(const Tensor& image);
/// Mask pixels >= 128 become 1, others 0; result is [1, h, w].
Tensor mask_from_gray(const GrayImage& image);
GrayImage mask_to_gray(const Tensor& mask);

// --- synthetic scenes ---------------------------------------------------------

/// Synthetic SAR-like calving-front scene: a smooth front splits glacier
/// from ice melange, both regions carry multiplicative gamma speckle with
/// `looks` looks, and bright iceberg blobs are scattered on the melange
/// side near the front.
struct SceneParams {
  std::size_t height = 256;
  std::size_t width = 256;
  std::size_t min_control_points = 4;
  std::size_t max_control_points = 8;
  /// Lateral spread of control points as a fraction of the cross-front extent.
  double amplitude = 0.25;
  double glacier_mean = 0.55;
  double melange_mean = 0.25;
  double looks = 4.0;
  /// Expected iceberg blobs per 1000 melange pixels inside the near-front band.
  double blob_density = 0.6;
  /// Width of the near-front melange band, as a fraction of the cross-front extent.
  double blob_band = 0.2;
  std::uint64_t seed = 0;
};

struct Scene {
  Tensor image;  // [1, h, w]
  Tensor mask;   // [h, w], 1 = glacier
};

inline constexpr double kMinForeground = 0.2;
inline constexpr double kMaxForeground = 0.8;

/// Throws DataError if no scene inside the foreground band is found in 10 attempts.
Scene generate_scene(const SceneParams& params);

// --- datasets on disk -------------------------------------------------------------

struct DatasetEntry {
  std::string id;
  std::filesystem::path image;  // relative to the dataset root
  std::filesystem::path mask;
  std::string image_sha256;
  std::string mask_sha256;
};

struct DatasetSplit {
  std::filesystem::path root;
  std::vector<DatasetEntry> train;
  std::vector<DatasetEntry> val;
  std::vector<DatasetEntry> test;

  const std::vector<DatasetEntry>& split(const std::string& name) const;
};

inline const std::vector<std::string> kSplitNames = {"train", "val", "test"};

/// Writes <root>/<split>/{images,masks}/NNNN.pgm and <root>/manifest.json.
/// Throws IoError on filesystem failures, ConfigError on zero counts.
DatasetSplit make_dataset(const std::filesystem::path& root, std::size_t n_train, std::size_t n_val,
                          std::size_t n_test, const SceneParams& params, std::uint64_t seed);

/// Reads <root>/manifest.json.
DatasetSplit load_dataset(const std::filesystem::path& root);

std::vector<Sample> load_samples(const DatasetSplit& dataset, const std::string& split);

std::string sha256_file(const std::filesystem::path& path);

// --- tiling ---------------------------------------------------------------------

struct Patch {
  Tensor data;  // [c, patch, patch]
  std::size_t y = 0;
  std::size_t x = 0;
};

/// Overlapping tiles of a [c, h, w] image; the last row/column of tiles is
/// clamped to the border. Throws ShapeError when patch exceeds the image.
std::vector<Patch> tile(const Tensor& image, std::size_t patch, std::size_t stride);
/// Averages overlapping [c, patch, patch] tiles back onto a [c, h, w] canvas.
Tensor stitch(const std::vector<Patch>& patches, std::size_t height, std::size_t width);

}  // namespace bunet
