#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "bunet/data.hpp"
#include "bunet/random.hpp"
#include "bunet/unet.hpp"

namespace bunet::test {

/// Small, fast network used throughout the tests.
inline UNetSpec tiny_spec(std::size_t in_channels = 1, float dropout_rate = 0.5f) {
  UNetSpec s;
  s.in_channels = in_channels;
  s.base_filters = 4;
  s.levels = 3;
  s.kernel = 3;
  s.dropout_rate = dropout_rate;
  return s;
}

/// Left/right split image: foreground brighter, plus mild noise.
inline std::vector<Sample> stripe_samples(std::size_t count, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t edge = size / 4 + rng.below(size / 2);
    std::vector<float> img(size * size), mask(size * size);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const bool fg = x < edge;
        mask[y * size + x] = fg ? 1.0f : 0.0f;
        img[y * size + x] = static_cast<float>((fg ? 0.7 : 0.3) + rng.uniform(-0.05, 0.05));
      }
    out.push_back({"s" + std::to_string(i), Tensor::from_vector({1, size, size}, img),
                   Tensor::from_vector({1, size, size}, mask)});
  }
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("bunet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace bunet::test
