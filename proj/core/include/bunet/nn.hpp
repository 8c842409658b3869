#pragma once

#include <cstddef>
#include <string>

#include "bunet/random.hpp"
#include "bunet/tensor.hpp"

namespace bunet {

enum class DropoutMode { active, inactive };
enum class BnMode { train, eval };

inline constexpr float kBnEpsilon = 1e-5f;
inline constexpr float kBnMomentum = 0.1f;
inline constexpr float kBceClamp = 1e-7f;

// Functional kernels. All inputs are NCHW unless noted; every op records
// itself on the active tape.

/// Stride-1 cross-correlation with same padding: (k-1)/2 before, k/2 after.
/// x: [b, in, h, w], weight: [out, in, k, k], bias: [out].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Batch normalization over (b, h, w) per channel. In train mode the running
/// statistics are updated in place by exponential moving average.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BnMode mode, float momentum = kBnMomentum, float epsilon = kBnEpsilon);

/// Inverted dropout: keeps each element with probability 1 - rate, scaled by 1/(1 - rate).
Tensor dropout(const Tensor& x, float rate, DropoutMode mode, Rng& rng);

/// Non-overlapping 2x2 max; ties resolve to the first element in row-major window order.
Tensor maxpool2x2(const Tensor& x);
Tensor upsample2x_nearest(const Tensor& x);
/// Channel-axis concatenation of two NCHW tensors with equal b, h, w.
Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor sigmoid(const Tensor& x);
/// Mean binary cross-entropy; p is clamped to [kBceClamp, 1 - kBceClamp] and y must be in {0, 1}.
Tensor bce_loss(const Tensor& p, const Tensor& y);

// Layers.

class Conv2d {
 public:
  Conv2d() = default;
  /// Weights drawn from N(0, 2 / fan_in), zero bias.
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng);

  Tensor forward(const Tensor& x) const;

  std::size_t in_channels() const { return weight_.size(1); }
  std::size_t out_channels() const { return weight_.size(0); }
  std::size_t kernel() const { return weight_.size(2); }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels, float momentum = kBnMomentum, float epsilon = kBnEpsilon);

  Tensor forward(const Tensor& x, BnMode mode);

  std::size_t channels() const { return gamma_.numel(); }
  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  const Tensor& gamma() const { return gamma_; }
  const Tensor& beta() const { return beta_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }

 private:
  Tensor gamma_;
  Tensor beta_;
  Tensor running_mean_;
  Tensor running_var_;
  float momentum_ = kBnMomentum;
  float epsilon_ = kBnEpsilon;
};

class Dropout {
 public:
  Dropout() = default;
  /// Throws ConfigError unless 0 <= rate < 1.
  explicit Dropout(float rate);

  Tensor forward(const Tensor& x, DropoutMode mode, Rng& rng) const { return dropout(x, rate_, mode, rng); }
  float rate() const { return rate_; }

 private:
  float rate_ = 0.0f;
};

}  // namespace bunet
