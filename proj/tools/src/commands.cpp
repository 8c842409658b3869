#include "commands.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "bunet/bayes.hpp"
#include "bunet/data.hpp"
#include "bunet/errors.hpp"
#include "bunet/metrics.hpp"
#include "bunet/pipeline.hpp"
#include "bunet/random.hpp"
#include "bunet/unet.hpp"

namespace bunet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kRunConfigFile = "config.json";

void log_progress(const std::string& line) { spdlog::info("{}", line); }

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void summarize(const StageArtifacts& art) {
  for (const auto& [split, report] : art.metrics) {
    spdlog::info("stage {} {}: Dice {:.2f}% (+- {:.2f}), IoU {:.2f}% (+- {:.2f})", art.stage, split,
                 100.0 * report.mean_dice, 100.0 * report.sd_dice, 100.0 * report.mean_iou, 100.0 * report.sd_iou);
  }
}

/// RGB P6 image: the input in gray, uncertain pixels tinted blue, the
/// predicted front (mask pixels with a 4-neighbour of the other class) in red.
void write_overlay(const Tensor& image, const Prediction& p, const fs::path& path) {
  const std::size_t h = p.mask.size(0);
  const std::size_t w = p.mask.size(1);
  const auto img = image.data();
  const auto mask = p.mask.data();
  const auto unc = p.uncertainty.binarized.data();
  std::string pixels(h * w * 3, '\0');
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const auto g = static_cast<unsigned char>(std::lround(std::clamp(img[i], 0.0f, 1.0f) * 255.0f));
      unsigned char r = g, gg = g, b = g;
      if (unc[i] == 1.0f) {
        r = static_cast<unsigned char>(g / 2);
        gg = static_cast<unsigned char>(g / 2);
        b = static_cast<unsigned char>(std::min(255, g / 2 + 128));
      }
      const bool front = (x > 0 && mask[i - 1] != mask[i]) || (x + 1 < w && mask[i + 1] != mask[i]) ||
                         (y > 0 && mask[i - w] != mask[i]) || (y + 1 < h && mask[i + w] != mask[i]);
      if (front) r = 255, gg = 0, b = 0;
      pixels[3 * i] = static_cast<char>(r);
      pixels[3 * i + 1] = static_cast<char>(gg);
      pixels[3 * i + 2] = static_cast<char>(b);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::string stage_method(const fs::path& stage, const std::string& fallback) {
  std::ifstream in(stage / "metrics.json");
  if (!in) return fallback;
  try {
    return json::parse(in).at("method").get<std::string>();
  } catch (const json::exception&) {
    return fallback;
  }
}

fs::path run_data_dir(const fs::path& run) {
  std::ifstream in(run / kRunConfigFile);
  if (!in) throw DataError("no run configuration in " + run.string() + "; pass --data");
  return load_run_config(run / kRunConfigFile, RunConfig{}).data;
}

}  // namespace

void cmd_generate(const GenerateOptions& o) {
  if (o.out.empty()) throw UsageError("generate: --out is required");
  if (non_empty_dir(o.out)) {
    if (!o.force) throw UsageError(o.out.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(o.out);
  }
  SceneParams params;
  params.height = o.size;
  params.width = o.size;
  params.looks = o.looks;
  const DatasetSplit ds = make_dataset(o.out, o.train, o.val, o.test, params, o.seed);
  spdlog::info("wrote {} train, {} val, {} test scenes of {}x{} to {}", ds.train.size(), ds.val.size(),
               ds.test.size(), o.size, o.size, o.out.string());
}

RunConfig resolve_train_config(const TrainOptions& o) {
  const TrainOverrides& f = o.overrides;
  RunConfig c;
  if (o.config) c = load_run_config(*o.config, c);
  if (f.run) c.run_dir = *f.run;
  c.run_dir = resolve_run_dir(c.run_dir);
  if (o.stage == 2 && fs::exists(c.run_dir / kRunConfigFile)) {
    // The stage-1 configuration is the base; an explicit config file and flags still win.
    const fs::path run_dir = c.run_dir;
    c = load_run_config(run_dir / kRunConfigFile, RunConfig{});
    if (o.config) c = load_run_config(*o.config, c);
    c.run_dir = run_dir;
  }
  TrainConfig& t = o.stage == 1 ? c.stage1 : c.stage2;
  if (f.data) c.data = *f.data;
  if (f.lr) t.lr = *f.lr;
  if (f.epochs) t.max_epochs = *f.epochs;
  if (f.patience) t.patience = *f.patience;
  if (f.batch_size) t.batch_size = *f.batch_size;
  if (f.dropout_rate) c.model.dropout_rate = *f.dropout_rate;
  if (f.mc_samples) c.mc_samples = *f.mc_samples;
  if (f.base_filters) c.model.base_filters = *f.base_filters;
  if (f.levels) c.model.levels = *f.levels;
  if (f.kernel) c.model.kernel = *f.kernel;
  if (f.patch) c.patch = *f.patch;
  if (f.threshold_policy) c.threshold_policy = parse_threshold_policy(*f.threshold_policy);
  if (f.fixed_threshold) c.fixed_threshold = *f.fixed_threshold;
  if (f.seed) c.seed = *f.seed;
  c.model.validate();
  return c;
}

void cmd_train(const TrainOptions& o) {
  if (o.stage != 1 && o.stage != 2) throw UsageError("train: --stage must be 1 or 2");
  const RunConfig config = resolve_train_config(o);
  const PipelineConfig pipeline = to_pipeline(config);
  const fs::path stage = stage_dir(config.run_dir, o.stage);
  if (fs::exists(stage)) {
    if (!o.force) throw UsageError(stage.string() + " already exists; pass --force to overwrite");
    fs::remove_all(stage);
    // Stage 2 is derived from stage 1 and goes stale with it.
    if (o.stage == 1) fs::remove_all(stage_dir(config.run_dir, 2));
  }
  const DatasetSplit dataset = load_dataset(config.data);
  if (o.stage == 1) {
    fs::create_directories(config.run_dir);
    save_run_config(config, config.run_dir / kRunConfigFile);
    summarize(run_stage1(pipeline, dataset, log_progress));
  } else {
    summarize(run_stage2(pipeline, dataset, log_progress));
  }
}

void cmd_predict(const PredictOptions& o) {
  if (o.images.empty()) throw UsageError("predict: at least one image is required");
  if (o.mc_samples < 1) throw ConfigError("--mc-samples must be at least 1");
  LoadedCheckpoint ckpt = load_checkpoint(o.checkpoint);
  UNet& net = ckpt.net;
  const std::size_t channels = net.spec().in_channels;
  const std::size_t requested = o.uncertainty ? 2 : 1;
  if (channels != requested) {
    throw ConfigError("channel mismatch: checkpoint expects " + std::to_string(channels) +
                      "-channel input, request provides " + std::to_string(requested) +
                      (channels == 2 ? " (pass --uncertainty with stage-1 maps)" : " (drop --uncertainty)"));
  }
  const std::optional<double> threshold = o.threshold ? o.threshold : ckpt.meta.threshold;
  if (!threshold) throw ConfigError("checkpoint carries no uncertainty threshold; pass --threshold");

  fs::create_directories(o.out);
  for (std::size_t i = 0; i < o.images.size(); ++i) {
    const std::string stem = o.images[i].stem().string();
    const std::vector<fs::path> outputs{o.out / (stem + ".mask.pgm"), o.out / (stem + ".uncertainty.pgm"),
                                        o.out / (stem + ".variance.f32")};
    for (const auto& p : outputs) {
      if (fs::exists(p) && !o.force) throw UsageError(p.string() + " exists; pass --force to overwrite");
    }
    Tensor image = normalize(read_pgm(o.images[i]));
    Tensor input = image;
    if (channels == 2) {
      const fs::path map_path = *o.uncertainty / (stem + ".f32");
      if (!fs::exists(map_path)) throw DataError("missing stage-1 uncertainty map " + map_path.string());
      const UncertaintyMap m = read_variance_raw(map_path);
      input = two_channel_input(image, binarize(m.variance, m.threshold));
    }
    const Prediction p = predict_image(net, input, o.patch, o.mc_samples, mix_seed(o.seed, i), *threshold);
    write_pgm(mask_to_gray(p.mask), outputs[0]);
    write_uncertainty_heatmap(p.uncertainty.variance, outputs[1]);
    write_variance_raw(p.uncertainty, outputs[2]);
    if (o.overlay) write_overlay(image, p, o.out / (stem + ".overlay.ppm"));
    spdlog::info("{}: foreground {:.1f}%, uncertain {:.1f}%", o.images[i].string(),
                 100.0 * sum(p.mask).item() / static_cast<double>(p.mask.numel()),
                 100.0 * sum(p.uncertainty.binarized).item() / static_cast<double>(p.mask.numel()));
  }
}

void cmd_evaluate(const EvaluateOptions& o) {
  const fs::path run = resolve_run_dir(o.run);
  const DatasetSplit dataset = load_dataset(o.data ? *o.data : run_data_dir(run));

  std::vector<std::pair<fs::path, std::string>> sources;
  for (const auto& b : o.baselines) {
    const fs::path s = stage_dir(resolve_run_dir(b), 1);
    sources.emplace_back(s, stage_method(s, method_label(1, 0.0f)));
  }
  for (int stage : {1, 2}) {
    const fs::path s = stage_dir(run, stage);
    if (fs::is_directory(s / "predictions" / o.split)) {
      sources.emplace_back(s, stage_method(s, method_label(stage, 0.5f)));
    }
  }
  if (sources.empty()) throw DataError("no predictions for split '" + o.split + "' under " + run.string());

  const fs::path report_path = o.report ? *o.report : run / ("report_" + o.split + ".json");
  if (fs::exists(report_path) && !o.force) {
    throw UsageError(report_path.string() + " exists; pass --force to overwrite");
  }
  std::vector<MetricsReport> reports;
  json methods = json::array();
  for (const auto& [stage, method] : sources) {
    reports.push_back(evaluate_predictions(stage, dataset, o.split, method));
    methods.push_back(json::parse(report_to_json(reports.back())));
  }
  const json doc{{"split", o.split}, {"methods", methods}};
  if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
  write_text(report_path, doc.dump(2) + "\n");
  std::cout << format_table(reports);
  spdlog::info("report written to {}", report_path.string());
}

}  // namespace bunet::cli
