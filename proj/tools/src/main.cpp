#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "bunet/errors.hpp"
#include "commands.hpp"

namespace {

enum ExitCode : int { kSuccess = 0, kUsage = 1, kData = 2, kDivergence = 3 };

}  // namespace

int main(int argc, char** argv) {
  using namespace bunet::cli;

  CLI::App app{"Bayesian U-Net calving-front segmentation with MC-dropout uncertainty"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  GenerateOptions gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic SAR-like dataset");
  generate->add_option("-o,--out", gen.out, "Dataset directory")->required();
  generate->add_option("--train", gen.train, "Training scenes")->capture_default_str();
  generate->add_option("--val", gen.val, "Validation scenes")->capture_default_str();
  generate->add_option("--test", gen.test, "Test scenes")->capture_default_str();
  generate->add_option("--size", gen.size, "Scene width and height in pixels")->capture_default_str();
  generate->add_option("--looks", gen.looks, "Speckle looks L")->capture_default_str();
  generate->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  generate->add_flag("--force", gen.force, "Replace a non-empty output directory");

  TrainOptions train;
  TrainOverrides& ov = train.overrides;
  auto* tr = app.add_subcommand("train", "Train stage 1 or stage 2 of a run");
  tr->add_option("--stage", train.stage, "1: image only, 2: image + stage-1 uncertainty")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  tr->add_option("-c,--config", train.config, "JSON run configuration")->check(CLI::ExistingFile);
  tr->add_option("--run", ov.run, "Run directory (relative paths resolve against $BUNET_RUN_ROOT)");
  tr->add_option("--data", ov.data, "Dataset directory");
  tr->add_option("--lr", ov.lr, "Adam learning rate [1e-4]");
  tr->add_option("--epochs", ov.epochs, "Maximum epochs [250]");
  tr->add_option("--patience", ov.patience, "Early-stopping patience [30]");
  tr->add_option("--batch-size", ov.batch_size, "Mini-batch size [4]");
  tr->add_option("--dropout-rate", ov.dropout_rate, "Dropout rate; 0 trains the deterministic baseline [0.5]");
  tr->add_option("--mc-samples", ov.mc_samples, "MC-dropout forward passes T [20]");
  tr->add_option("--base-filters", ov.base_filters, "Filters of the first level [32]");
  tr->add_option("--levels", ov.levels, "U-Net levels [5]");
  tr->add_option("--kernel", ov.kernel, "Convolution kernel size [5]");
  tr->add_option("--patch", ov.patch, "Inference patch size [256]");
  tr->add_option("--threshold-policy", ov.threshold_policy, "histogram_auto or fixed [histogram_auto]");
  tr->add_option("--fixed-threshold", ov.fixed_threshold, "Threshold for the fixed policy [0.125]");
  tr->add_option("--seed", ov.seed, "Run seed [0]");
  tr->add_flag("--force", train.force, "Replace existing stage output");

  PredictOptions pred;
  auto* pr = app.add_subcommand("predict", "MC-dropout prediction with uncertainty maps");
  pr->add_option("--checkpoint", pred.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  pr->add_option("images", pred.images, "Input PGM images")->required()->check(CLI::ExistingFile);
  pr->add_option("-o,--out", pred.out, "Output directory")->required();
  pr->add_option("--uncertainty", pred.uncertainty, "Stage-1 map directory (<stem>.f32), for 2-channel models");
  pr->add_option("--mc-samples", pred.mc_samples, "MC-dropout forward passes T")->capture_default_str();
  pr->add_option("--seed", pred.seed, "MC seed")->capture_default_str();
  pr->add_option("--threshold", pred.threshold, "Variance threshold [from checkpoint]");
  pr->add_option("--patch", pred.patch, "Tile size for large images")->capture_default_str();
  pr->add_flag("--overlay", pred.overlay, "Also write an RGB overlay (front in red, uncertainty in blue)");
  pr->add_flag("--force", pred.force, "Overwrite existing outputs");

  EvaluateOptions eval;
  auto* ev = app.add_subcommand("evaluate", "Score predictions and print the comparison table");
  ev->add_option("--run", eval.run, "Run directory")->required();
  ev->add_option("--split", eval.split, "Split to score")->capture_default_str()->check(
      CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--baseline", eval.baselines, "Run directories of deterministic baselines");
  ev->add_option("--data", eval.data, "Dataset directory [from run configuration]");
  ev->add_option("--report", eval.report, "JSON report path [<run>/report_<split>.json]");
  ev->add_flag("--force", eval.force, "Overwrite an existing report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kUsage;
  }

  auto logger = spdlog::stderr_color_mt("bunet");
  logger->set_pattern("[%H:%M:%S] %v");
  logger->set_level(quiet ? spdlog::level::warn : spdlog::level::info);
  spdlog::set_default_logger(logger);

  try {
    if (*generate) cmd_generate(gen);
    if (*tr) cmd_train(train);
    if (*pr) cmd_predict(pred);
    if (*ev) cmd_evaluate(eval);
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const bunet::ConfigError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const bunet::DivergenceError& e) {
    spdlog::error("{}", e.what());
    return kDivergence;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kData;
  }
  return kSuccess;
}
