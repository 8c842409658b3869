#include "bunet/optim.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "bunet/errors.hpp"
#include "bunet/nn.hpp"
#include "bunet/random.hpp"

namespace bunet {

// --- Adam -------------------------------------------------------------------

Adam::Adam(float lr, float beta1, float beta2, float eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0f)) throw ConfigError("Adam: learning rate must be positive");
  if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) {
    throw ConfigError("Adam: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0f)) throw ConfigError("Adam: eps must be positive");
}

void Adam::step(std::vector<Tensor>& params) {
  for (const auto& p : params) {
    if (!p.has_grad()) throw ContractError("Adam: parameter without gradient");
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter list changed between steps");
  ++t_;
  const float c1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
  const float c2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_data();
    const auto g = params[k].grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != w.size()) throw ContractError("Adam: parameter size changed between steps");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
      const float m_hat = m[i] / c1;
      const float v_hat = v[i] / c2;
      w[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
    params[k].clear_grad();
  }
}

// --- early stopping ------------------------------------------------------------

EarlyStopper::EarlyStopper(int patience, int max_epochs) : patience_(patience), max_epochs_(max_epochs) {
  if (patience < 1) throw ConfigError("EarlyStopper: patience must be at least 1");
  if (max_epochs < 1) throw ConfigError("EarlyStopper: max_epochs must be at least 1");
}

bool EarlyStopper::update(int epoch, double val_loss) {
  if (val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch;
    return true;
  }
  return false;
}

bool EarlyStopper::should_stop(int epoch) const {
  return epoch >= max_epochs_ || epoch - best_epoch_ >= patience_;
}

// --- training loop ----------------------------------------------------------------

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require_finite(const std::vector<Tensor>& params, int epoch) {
  for (const auto& p : params) {
    for (float v : p.data()) {
      if (!std::isfinite(v)) {
        throw DivergenceError("non-finite parameter after update in epoch " + std::to_string(epoch));
      }
    }
  }
}

}  // namespace

double evaluate_loss(UNet& net, const std::vector<Sample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw DataError("evaluate_loss: empty split");
  NoGradScope no_grad;
  Rng unused(0);
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
    auto [x, y] = make_batch(samples, idx);
    const Tensor p = net.forward(x, {DropoutMode::inactive, BnMode::eval}, unused);
    total += static_cast<double>(bce_loss(p, y).item()) * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(samples.size());
}

TrainingLog train(UNet& net, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  if (train_set.empty()) throw DataError("training split is empty");
  if (val_set.empty()) throw DataError("validation split is empty");
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");

  Adam adam(config.lr, config.beta1, config.beta2, config.eps);
  EarlyStopper stopper(config.patience, config.max_epochs);
  Rng shuffle_rng(mix_seed(config.seed, 1));
  Rng dropout_rng(mix_seed(config.seed, 2));

  std::vector<Tensor> params;
  for (auto& [name, t] : net.parameters()) params.push_back(t);

  TrainingLog log;
  std::vector<std::vector<float>> best_state = net.snapshot();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double train_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + config.batch_size)));
      auto [x, y] = make_batch(train_set, idx);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = bce_loss(net.forward(x, {DropoutMode::active, BnMode::train}, dropout_rng), y);
      }
      const float value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite training loss in epoch " + std::to_string(epoch));
      }
      backward(loss, tape);
      adam.step(params);
      require_finite(params, epoch);
      train_total += static_cast<double>(value) * static_cast<double>(idx.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(train_set.size());
    rec.val_loss = evaluate_loss(net, val_set, config.batch_size);
    rec.timestamp = utc_timestamp();
    if (!std::isfinite(rec.val_loss)) throw DivergenceError("non-finite validation loss in epoch " + std::to_string(epoch));
    log.epochs.push_back(rec);
    if (stopper.update(epoch, rec.val_loss)) best_state = net.snapshot();
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop(epoch)) {
      log.early_stopped = epoch < config.max_epochs;
      break;
    }
  }
  net.restore(best_state);
  log.best_epoch = stopper.best_epoch();
  log.best_val_loss = stopper.best_value();
  return log;
}

void write_training_log(const TrainingLog& log, const std::string& header_json, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << header_json << '\n';
  for (const auto& e : log.epochs) {
    const nlohmann::json rec{
        {"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"timestamp", e.timestamp}};
    out << rec.dump() << '\n';
  }
  const nlohmann::json summary{{"best_epoch", log.best_epoch},
                               {"best_val_loss", log.best_val_loss},
                               {"early_stopped", log.early_stopped}};
  out << summary.dump() << '\n';
}

}  // namespace bunet
