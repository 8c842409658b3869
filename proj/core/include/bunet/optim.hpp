#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "bunet/data.hpp"
#include "bunet/tensor.hpp"
#include "bunet/unet.hpp"

namespace bunet {

/// Adam with bias-corrected moments. Moment buffers are created lazily on the
/// first step and keyed by parameter position, so the parameter list must keep
/// its order across steps.
class Adam {
 public:
  explicit Adam(float lr = 1e-4f, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

  /// Applies one update to every parameter, then clears their gradients.
  /// Throws ContractError when a parameter has no gradient.
  void step(std::vector<Tensor>& params);

  float lr() const noexcept { return lr_; }
  std::int64_t steps() const noexcept { return t_; }
  const std::vector<std::vector<float>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<float>>& second_moments() const noexcept { return v_; }

 private:
  float lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

/// Tracks the best validation loss and decides when to stop. Epochs are 1-based.
class EarlyStopper {
 public:
  EarlyStopper(int patience = 30, int max_epochs = 250);

  /// Records an epoch's monitored value; returns true when it is a new best.
  bool update(int epoch, double val_loss);
  /// True once `patience` epochs passed without improvement or max_epochs is reached.
  bool should_stop(int epoch) const;

  int best_epoch() const noexcept { return best_epoch_; }
  double best_value() const noexcept { return best_; }
  int patience() const noexcept { return patience_; }
  int max_epochs() const noexcept { return max_epochs_; }

 private:
  int patience_;
  int max_epochs_;
  int best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct TrainConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::size_t batch_size = 4;
  int max_epochs = 250;
  int patience = 30;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::string timestamp;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch training with shuffling, dropout active and batch-norm in train
/// mode; validation runs deterministically (dropout inactive, BN eval). On
/// return the network holds the weights of the best validation epoch.
/// Throws DataError on empty splits and DivergenceError on a non-finite loss
/// or parameter.
TrainingLog train(UNet& net, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Mean BCE over a split, deterministic forward.
double evaluate_loss(UNet& net, const std::vector<Sample>& samples, std::size_t batch_size);

/// Line-delimited JSON: one header record followed by one record per epoch.
void write_training_log(const TrainingLog& log, const std::string& header_json, const std::filesystem::path& path);

}  // namespace bunet
