#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bunet/nn.hpp"
#include "bunet/random.hpp"
#include "bunet/tensor.hpp"

namespace bunet {

/// Declarative description of the Bayesian U-Net. Defaults are the full-size
/// configuration: 5 levels of 5x5 convolutions with 32..512 filters, dropout
/// 0.5 and a 3x3 single-channel head.
struct UNetSpec {
  std::size_t in_channels = 1;
  std::size_t base_filters = 32;
  std::size_t levels = 5;
  std::size_t kernel = 5;
  float dropout_rate = 0.5f;
  std::size_t final_kernel = 3;
  std::size_t out_channels = 1;

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  std::size_t filters(std::size_t level) const { return base_filters << level; }
  /// Spatial dims of the input must be multiples of this.
  std::size_t size_multiple() const { return std::size_t{1} << (levels - 1); }

  bool operator==(const UNetSpec&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// conv -> ReLU -> batch norm.
struct ConvUnit {
  Conv2d conv;
  BatchNorm2d bn;

  Tensor forward(const Tensor& x, BnMode mode);
};

struct EncoderBlock {
  ConvUnit first;
  ConvUnit second;
  std::optional<Dropout> dropout;
};

/// upsample -> conv unit -> concat skip -> two conv units -> optional dropout.
struct DecoderBlock {
  ConvUnit up;
  ConvUnit first;
  ConvUnit second;
  std::optional<Dropout> dropout;
};

struct ForwardOptions {
  DropoutMode dropout = DropoutMode::inactive;
  BnMode bn = BnMode::eval;
};

class UNet {
 public:
  /// He-initialized network; encoder block i has filters(i) channels, the
  /// deepest encoder block is the bottleneck, and every block except the
  /// last decoder block ends with dropout.
  UNet(const UNetSpec& spec, std::uint64_t seed);

  /// x: [b, in_channels, h, w] with h, w multiples of size_multiple().
  /// Returns per-pixel foreground probabilities [b, 1, h, w].
  Tensor forward(const Tensor& x, ForwardOptions options, Rng& rng);
  /// Pre-sigmoid logits, same contract as forward().
  Tensor logits(const Tensor& x, ForwardOptions options, Rng& rng);

  const UNetSpec& spec() const noexcept { return spec_; }
  std::uint64_t seed() const noexcept { return seed_; }

  /// Trainable tensors (conv weights/biases, BN affine), in a fixed order.
  std::vector<NamedTensor> parameters();
  /// Parameters plus BN running statistics; the full persisted state.
  std::vector<NamedTensor> state();
  std::vector<NamedTensor> state() const;

  std::size_t parameter_count() const;
  std::size_t dropout_layer_count() const;

  const std::vector<EncoderBlock>& encoder() const noexcept { return encoder_; }
  const std::vector<DecoderBlock>& decoder() const noexcept { return decoder_; }
  const Conv2d& head() const noexcept { return head_; }

  /// Copies of every state tensor's values, in state() order.
  std::vector<std::vector<float>> snapshot() const;
  void restore(const std::vector<std::vector<float>>& values);

 private:
  UNetSpec spec_;
  std::uint64_t seed_ = 0;
  std::vector<EncoderBlock> encoder_;  // last entry is the bottleneck
  std::vector<DecoderBlock> decoder_;  // deepest first; last entry has no dropout
  Conv2d head_;
};

/// Training metadata persisted alongside the weights.
struct CheckpointMeta {
  int epoch = 0;
  double val_loss = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> threshold;  // uncertainty binarization threshold (stage 1)
};

inline constexpr char kCheckpointMagic[4] = {'B', 'U', 'N', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Layout: "BUNT" | version u8 | header length u32 LE | JSON header (spec,
/// meta, tensor manifest with shapes and byte offsets) | float32 LE payload.
void save_checkpoint(const UNet& net, const CheckpointMeta& meta, const std::filesystem::path& path);

struct LoadedCheckpoint {
  UNet net;
  CheckpointMeta meta;
};

/// Throws FormatError on bad magic, version, header, manifest/spec mismatch or truncation.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bunet
