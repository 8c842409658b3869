#include "bunet/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bunet/decimal.hpp"
#include "bunet/errors.hpp"

namespace bunet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::size_t split_index(const std::string& split) {
  for (std::size_t i = 0; i < kSplitNames.size(); ++i) {
    if (kSplitNames[i] == split) return i;
  }
  throw DataError("unknown split '" + split + "'");
}

void say(const ProgressFn& progress, const std::string& line) {
  if (progress) progress(line);
}

json train_config_json(const TrainConfig& c) {
  return json{{"lr", shortest_decimal(c.lr)},     {"beta1", shortest_decimal(c.beta1)},           {"beta2", shortest_decimal(c.beta2)},       {"eps", shortest_decimal(c.eps)},
              {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs}, {"patience", c.patience}, {"seed", c.seed}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_metrics(const fs::path& dir, const std::string& method, double threshold,
                   const std::map<std::string, MetricsReport>& metrics) {
  json splits = json::object();
  for (const auto& [split, report] : metrics) splits[split] = json::parse(report_to_json(report));
  const json j{{"method", method}, {"threshold", threshold}, {"splits", splits}};
  write_text(dir / "metrics.json", j.dump(2) + "\n");
}

/// Predicts every sample of a split, writing masks and uncertainty maps, and scores it.
MetricsReport predict_split(UNet& net, const std::vector<Sample>& samples, const std::vector<Tensor>& inputs,
                            const std::string& split, const PipelineConfig& config, double threshold,
                            const fs::path& stage, const std::string& method, std::vector<Tensor>* variances,
                            const ProgressFn& progress) {
  const fs::path pred_dir = stage / "predictions" / split;
  const fs::path unc_dir = stage / "uncertainty" / split;
  fs::create_directories(pred_dir);
  fs::create_directories(unc_dir);
  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Prediction p =
        predict_image(net, inputs[i], config.patch, config.mc_samples, image_seed(config.mc_seed, split, i), threshold);
    const std::string& id = samples[i].id;
    write_pgm(mask_to_gray(p.mask), pred_dir / (id + ".pgm"));
    write_uncertainty_heatmap(p.uncertainty.variance, unc_dir / (id + ".pgm"));
    write_variance_raw(p.uncertainty, unc_dir / (id + ".f32"));
    if (variances) variances->push_back(p.uncertainty.variance);
    const OverlapCounts c = overlap(p.mask, samples[i].mask);
    rows.push_back({id, dice(c), iou(c)});
  }
  say(progress, split + ": " + std::to_string(samples.size()) + " images predicted");
  return aggregate(std::move(rows), method);
}

/// Re-binarizes stage-1 maps once the pooled threshold is known.
void rewrite_threshold(const fs::path& unc_root, const std::vector<Sample>& samples, const std::string& split,
                       const std::vector<Tensor>& variances, double threshold) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    write_variance_raw(make_uncertainty_map(variances[i], threshold), unc_root / split / (samples[i].id + ".f32"));
  }
}

}  // namespace

std::uint64_t image_seed(std::uint64_t mc_seed, const std::string& split, std::size_t index) {
  return mix_seed(mix_seed(mc_seed, split_index(split)), index);
}

fs::path stage_dir(const fs::path& run_dir, int stage) { return run_dir / ("stage" + std::to_string(stage)); }

std::string method_label(int stage, float dropout_rate) {
  if (stage == 2) return "Bayesian U-Net II";
  return dropout_rate == 0.0f ? "U-Net (deterministic)" : "Bayesian U-Net I";
}

Prediction predict(UNet& net, const Tensor& image, std::size_t passes, std::uint64_t seed, double threshold) {
  if (image.dim() != 3) throw ShapeError("predict: expected [c, h, w] image, got " + shape_to_string(image.shape()));
  if (image.size(0) != net.spec().in_channels) {
    throw ShapeError("predict: image has " + std::to_string(image.size(0)) + " channels, model expects " +
                     std::to_string(net.spec().in_channels));
  }
  const McSampleSet set = mc_sample(net, image, passes, seed);
  Prediction p;
  p.mean = posterior_mean(set);
  std::vector<float> mask(p.mean.numel());
  const auto m = p.mean.data();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = m[i] >= kMaskThreshold ? 1.0f : 0.0f;
  p.mask = Tensor::from_vector(p.mean.shape(), std::move(mask));
  p.uncertainty = make_uncertainty_map(posterior_variance(set), threshold);
  return p;
}

Prediction predict_tiled(UNet& net, const Tensor& image, std::size_t patch, std::size_t stride, std::size_t passes,
                         std::uint64_t seed, double threshold) {
  if (patch % net.spec().size_multiple() != 0) {
    throw ConfigError("predict_tiled: patch size must be a multiple of " + std::to_string(net.spec().size_multiple()));
  }
  const std::size_t h = image.size(1);
  const std::size_t w = image.size(2);
  std::vector<Patch> means;
  std::vector<Patch> vars;
  const auto tiles = tile(image, patch, stride);
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    const Prediction p = predict(net, tiles[k].data, passes, mix_seed(seed, k), threshold);
    means.push_back({p.mean.reshape({1, patch, patch}), tiles[k].y, tiles[k].x});
    vars.push_back({p.uncertainty.variance.reshape({1, patch, patch}), tiles[k].y, tiles[k].x});
  }
  Prediction out;
  out.mean = stitch(means, h, w).reshape({h, w});
  std::vector<float> mask(out.mean.numel());
  const auto m = out.mean.data();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = m[i] >= kMaskThreshold ? 1.0f : 0.0f;
  out.mask = Tensor::from_vector({h, w}, std::move(mask));
  out.uncertainty = make_uncertainty_map(stitch(vars, h, w).reshape({h, w}), threshold);
  return out;
}

Prediction predict_image(UNet& net, const Tensor& image, std::size_t patch, std::size_t passes, std::uint64_t seed,
                         double threshold) {
  if (image.dim() == 3 && (image.size(1) > patch || image.size(2) > patch)) {
    return predict_tiled(net, image, patch, std::max<std::size_t>(1, patch / 2), passes, seed, threshold);
  }
  return predict(net, image, passes, seed, threshold);
}

MetricsReport evaluate_predictions(const fs::path& stage, const DatasetSplit& dataset, const std::string& split,
                                   const std::string& method) {
  const auto& entries = dataset.split(split);
  if (entries.empty()) throw DataError("split '" + split + "' is empty");
  std::vector<MetricsRow> rows;
  for (const auto& e : entries) {
    const fs::path pred_path = stage / "predictions" / split / (e.id + ".pgm");
    if (!fs::exists(pred_path)) throw DataError("missing prediction " + pred_path.string());
    const Tensor pred = mask_from_gray(read_pgm(pred_path));
    const Tensor truth = mask_from_gray(read_pgm(dataset.root / e.mask));
    if (pred.shape() != truth.shape()) throw DataError("prediction size mismatch for " + pred_path.string());
    const OverlapCounts c = overlap(pred, truth);
    rows.push_back({e.id, dice(c), iou(c)});
  }
  return aggregate(std::move(rows), method);
}

Tensor two_channel_input(const Tensor& image, const Tensor& binarized) {
  if (image.dim() != 3 || image.size(0) != 1) throw ShapeError("two_channel_input: image must be [1, h, w]");
  if (binarized.numel() != image.numel()) throw ShapeError("two_channel_input: uncertainty map size mismatch");
  for (float v : binarized.data()) {
    if (v != 0.0f && v != 1.0f) throw ContractError("two_channel_input: uncertainty channel must be binary");
  }
  std::vector<float> values(image.data().begin(), image.data().end());
  values.insert(values.end(), binarized.data().begin(), binarized.data().end());
  return Tensor::from_vector({2, image.size(1), image.size(2)}, std::move(values));
}

std::string config_header_json(const PipelineConfig& config, int stage) {
  const TrainConfig& tc = stage == 1 ? config.stage1 : config.stage2;
  const json j{{"record", "header"},
               {"stage", stage},
               {"method", method_label(stage, config.model.dropout_rate)},
               {"lr", shortest_decimal(tc.lr)},
               {"patience", tc.patience},
               {"max_epochs", tc.max_epochs},
               {"batch_size", tc.batch_size},
               {"mc_samples", config.mc_samples},
               {"patch", config.patch},
               {"dropout_rate", shortest_decimal(config.model.dropout_rate)},
               {"base_filters", config.model.base_filters},
               {"levels", config.model.levels},
               {"kernel", config.model.kernel},
               {"in_channels", stage == 1 ? 1 : 2},
               {"train", train_config_json(tc)},
               {"threshold_policy", config.threshold_policy == ThresholdPolicy::fixed ? "fixed" : "histogram_auto"},
               {"model_seed", config.model_seed},
               {"mc_seed", config.mc_seed}};
  return j.dump();
}

StageArtifacts run_stage1(const PipelineConfig& config, const DatasetSplit& dataset, const ProgressFn& progress) {
  StageArtifacts art;
  art.stage = 1;
  art.method = method_label(1, config.model.dropout_rate);
  art.dir = stage_dir(config.run_dir, 1);
  art.checkpoint = art.dir / "checkpoint.bunt";
  art.uncertainty_dir = art.dir / "uncertainty";
  fs::create_directories(art.dir);

  std::map<std::string, std::vector<Sample>> samples;
  for (const auto& split : kSplitNames) samples[split] = load_samples(dataset, split);

  UNetSpec spec = config.model;
  spec.in_channels = 1;
  UNet net(spec, config.model_seed);
  say(progress, "stage 1: training " + art.method + " (" + std::to_string(net.parameter_count()) + " parameters)");
  art.log = train(net, samples["train"], samples["val"], config.stage1, [&](const EpochRecord& r) {
    std::ostringstream os;
    os << "stage 1 epoch " << r.epoch << " train_loss " << r.train_loss << " val_loss " << r.val_loss;
    say(progress, os.str());
  });
  write_training_log(art.log, config_header_json(config, 1), art.dir / "log.jsonl");

  // Predict every split with a provisional threshold; the training maps then fix the real one.
  std::map<std::string, std::vector<Tensor>> variances;
  for (const auto& split : kSplitNames) {
    std::vector<Tensor> inputs;
    for (const auto& s : samples[split]) inputs.push_back(s.image);
    art.metrics[split] = predict_split(net, samples[split], inputs, split, config, 0.0, art.dir, art.method,
                                       &variances[split], progress);
  }
  art.threshold = config.threshold_policy == ThresholdPolicy::fixed ? config.fixed_threshold
                                                                     : select_threshold(variances["train"]);
  for (const auto& split : kSplitNames) {
    rewrite_threshold(art.uncertainty_dir, samples[split], split, variances[split], art.threshold);
  }
  say(progress, "stage 1: uncertainty threshold " + std::to_string(art.threshold));

  save_checkpoint(net, CheckpointMeta{art.log.best_epoch, art.log.best_val_loss, config.model_seed, art.threshold},
                  art.checkpoint);
  write_metrics(art.dir, art.method, art.threshold, art.metrics);
  return art;
}

StageArtifacts run_stage2(const PipelineConfig& config, const DatasetSplit& dataset, const ProgressFn& progress) {
  const fs::path s1 = stage_dir(config.run_dir, 1);
  if (!fs::exists(s1 / "checkpoint.bunt") || !fs::exists(s1 / "metrics.json")) {
    throw DataError("stage1 artifacts not found in " + s1.string());
  }
  const LoadedCheckpoint stage1 = load_checkpoint(s1 / "checkpoint.bunt");
  if (!stage1.meta.threshold) throw DataError("stage1 checkpoint carries no uncertainty threshold");
  const double stage1_threshold = *stage1.meta.threshold;

  StageArtifacts art;
  art.stage = 2;
  art.method = method_label(2, config.model.dropout_rate);
  art.dir = stage_dir(config.run_dir, 2);
  art.checkpoint = art.dir / "checkpoint.bunt";
  art.uncertainty_dir = art.dir / "uncertainty";
  art.threshold = stage1_threshold;
  fs::create_directories(art.dir);

  std::map<std::string, std::vector<Sample>> samples;
  for (const auto& split : kSplitNames) {
    for (auto& s : load_samples(dataset, split)) {
      const fs::path map_path = s1 / "uncertainty" / split / (s.id + ".f32");
      if (!fs::exists(map_path)) throw DataError("missing stage-1 uncertainty map " + map_path.string());
      const UncertaintyMap m = read_variance_raw(map_path);
      s.image = two_channel_input(s.image, binarize(m.variance, stage1_threshold));
      samples[split].push_back(std::move(s));
    }
  }

  UNetSpec spec = config.model;
  spec.in_channels = 2;
  const std::uint64_t seed = mix_seed(config.model_seed, 2);
  UNet net(spec, seed);
  say(progress, "stage 2: training " + art.method + " (" + std::to_string(net.parameter_count()) + " parameters)");
  art.log = train(net, samples["train"], samples["val"], config.stage2, [&](const EpochRecord& r) {
    std::ostringstream os;
    os << "stage 2 epoch " << r.epoch << " train_loss " << r.train_loss << " val_loss " << r.val_loss;
    say(progress, os.str());
  });
  write_training_log(art.log, config_header_json(config, 2), art.dir / "log.jsonl");
  save_checkpoint(net, CheckpointMeta{art.log.best_epoch, art.log.best_val_loss, seed, stage1_threshold},
                  art.checkpoint);

  for (const auto& split : config.stage2_eval_splits) {
    std::vector<Tensor> inputs;
    for (const auto& s : samples.at(split)) inputs.push_back(s.image);
    art.metrics[split] = predict_split(net, samples.at(split), inputs, split, config, stage1_threshold, art.dir,
                                       art.method, nullptr, progress);
  }
  write_metrics(art.dir, art.method, stage1_threshold, art.metrics);
  return art;
}

std::map<std::string, MetricsReport> read_stage_metrics(const fs::path& dir) {
  std::ifstream in(dir / "metrics.json");
  if (!in) throw DataError("no metrics in " + dir.string());
  std::map<std::string, MetricsReport> out;
  try {
    const json j = json::parse(in);
    for (const auto& [split, report] : j.at("splits").items()) out[split] = report_from_json(report.dump());
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/metrics.json: " + e.what());
  }
  return out;
}

}  // namespace bunet
