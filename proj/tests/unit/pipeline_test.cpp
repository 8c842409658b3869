#include <doctest.h>

#include <fstream>
#include <iterator>

#include "bunet/errors.hpp"
#include "bunet/pipeline.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace bunet;
using namespace bunet::test;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

PipelineConfig tiny_config(const fs::path& run_dir) {
  PipelineConfig c;
  c.run_dir = run_dir;
  c.model = tiny_spec();
  c.stage1.lr = 1e-3f;
  c.stage1.max_epochs = 2;
  c.stage1.seed = 1;
  c.stage2 = c.stage1;
  c.stage2.seed = 2;
  c.mc_samples = 3;
  c.model_seed = 5;
  c.mc_seed = 6;
  return c;
}

DatasetSplit tiny_dataset(const std::string& name) {
  SceneParams p;
  p.height = 32;
  p.width = 32;
  return make_dataset(scratch_dir(name), 3, 2, 2, p, 9);
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST_CASE("predict thresholds the MC mean and reports the variance") {
  UNet net(tiny_spec(), 1);
  Rng rng(2);
  const Tensor x = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
  const Prediction p = predict(net, x, 4, 11, 0.01);
  CHECK(p.mask.shape() == Shape{16, 16});
  for (std::size_t i = 0; i < p.mask.numel(); ++i) {
    CHECK(p.mask.data()[i] == (p.mean.data()[i] >= 0.5f ? 1.0f : 0.0f));
    CHECK(p.uncertainty.binarized.data()[i] == (p.uncertainty.variance.data()[i] >= 0.01f ? 1.0f : 0.0f));
  }
  CHECK(p.uncertainty.threshold == 0.01);
  CHECK_THROWS_AS(predict(net, Tensor::zeros({2, 16, 16}), 4, 0, 0.1), ShapeError);
}

TEST_CASE("a deterministic network yields zero uncertainty everywhere") {
  UNet net(tiny_spec(1, 0.0f), 1);
  Rng rng(3);
  const Prediction p = predict(net, random_tensor({1, 16, 16}, rng, 0.0, 1.0), 5, 0, 0.0);
  for (float v : p.uncertainty.variance.data()) CHECK(v == 0.0f);
  CHECK(method_label(1, 0.0f) == "U-Net (deterministic)");
  CHECK(method_label(1, 0.5f) == "Bayesian U-Net I");
  CHECK(method_label(2, 0.5f) == "Bayesian U-Net II");
}

TEST_CASE("tiled prediction with a single tile equals whole-image prediction") {
  UNet net(tiny_spec(), 1);
  Rng rng(4);
  const Tensor x = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
  const Prediction whole = predict(net, x, 3, mix_seed(7, 0), 0.0);
  const Prediction tiled = predict_tiled(net, x, 16, 8, 3, 7, 0.0);
  CHECK(tiled.mean.to_vector() == whole.mean.to_vector());
  const Prediction overlapping = predict_tiled(net, random_tensor({1, 24, 24}, rng, 0.0, 1.0), 16, 8, 3, 7, 0.0);
  CHECK(overlapping.mask.shape() == Shape{24, 24});
  CHECK_THROWS_AS(predict_tiled(net, x, 6, 2, 3, 7, 0.0), ConfigError);
}

TEST_CASE("two-channel input stacks a binary map") {
  const Tensor img = Tensor::full({1, 2, 2}, 0.5f);
  const Tensor two = two_channel_input(img, Tensor::from_vector({2, 2}, {0, 1, 1, 0}));
  CHECK(two.shape() == Shape{2, 2, 2});
  CHECK(two.to_vector() == std::vector<float>{0.5f, 0.5f, 0.5f, 0.5f, 0, 1, 1, 0});
  CHECK_THROWS_AS(two_channel_input(img, Tensor::full({2, 2}, 0.3f)), ContractError);
  CHECK_THROWS_AS(two_channel_input(img, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("stage 2 refuses to run before stage 1") {
  const DatasetSplit ds = tiny_dataset("pipe_order");
  CHECK_THROWS_AS(run_stage2(tiny_config(scratch_dir("pipe_order_run")), ds), DataError);
}

TEST_CASE("two-stage pipeline writes consistent artifacts") {
  const DatasetSplit ds = tiny_dataset("pipe_ds");
  const PipelineConfig cfg = tiny_config(scratch_dir("pipe_run"));
  const StageArtifacts s1 = run_stage1(cfg, ds);

  for (const auto& split : kSplitNames) {
    const std::size_t n = ds.split(split).size();
    CHECK(count_files(s1.uncertainty_dir / split, ".f32") == n);
    CHECK(count_files(s1.uncertainty_dir / split, ".pgm") == n);
    CHECK(count_files(s1.dir / "predictions" / split, ".pgm") == n);
  }
  // The pooled training threshold is the one recorded everywhere.
  std::vector<Tensor> train_maps;
  for (const auto& e : ds.train) {
    const UncertaintyMap m = read_variance_raw(s1.uncertainty_dir / "train" / (e.id + ".f32"));
    CHECK(m.threshold == s1.threshold);
    CHECK(m.binarized.to_vector() == binarize(m.variance, s1.threshold).to_vector());
    train_maps.push_back(m.variance);
  }
  CHECK(select_threshold(train_maps) == s1.threshold);
  CHECK(load_checkpoint(s1.checkpoint).meta.threshold == s1.threshold);
  CHECK(read_stage_metrics(s1.dir).at("test").method == "Bayesian U-Net I");
  CHECK(read_bytes(s1.dir / "log.jsonl").find("\"lr\"") != std::string::npos);

  const StageArtifacts s2 = run_stage2(cfg, ds);
  CHECK(s2.threshold == s1.threshold);
  CHECK(load_checkpoint(s2.checkpoint).net.spec().in_channels == 2);
  CHECK(s2.metrics.count("val") == 1);
  CHECK(s2.metrics.count("test") == 1);
  CHECK(s2.metrics.at("test").rows.size() == ds.test.size());
  CHECK(count_files(s2.uncertainty_dir / "test", ".f32") == ds.test.size());

  // Stage 2 on stage-1 output is a pure function of the configuration.
  const std::string first = read_bytes(s2.checkpoint);
  (void)run_stage2(cfg, ds);
  CHECK(read_bytes(s2.checkpoint) == first);
}
