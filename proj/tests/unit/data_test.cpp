#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>

#include "bunet/data.hpp"
#include "bunet/errors.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace bunet;
using namespace bunet::test;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SceneParams small_params(std::uint64_t seed) {
  SceneParams p;
  p.height = 64;
  p.width = 64;
  p.seed = seed;
  return p;
}

}  // namespace

TEST_CASE("scenes without speckle are piecewise constant") {
  SceneParams p = small_params(1);
  p.looks = 1e6;
  p.blob_density = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    p.seed = seed;
    const Scene s = generate_scene(p);
    for (std::size_t i = 0; i < s.mask.numel(); ++i) {
      const double expected = s.mask.data()[i] == 1.0f ? p.glacier_mean : p.melange_mean;
      CHECK(std::abs(s.image.data()[i] - expected) < 0.01 * expected + 1e-6);
    }
  }
}

TEST_CASE("scene masks are binary with foreground in the allowed band") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = generate_scene(small_params(seed));
    double fg = 0.0;
    for (float v : s.mask.data()) {
      CHECK((v == 0.0f || v == 1.0f));
      fg += v;
    }
    fg /= static_cast<double>(s.mask.numel());
    CHECK(fg >= kMinForeground);
    CHECK(fg <= kMaxForeground);
    for (float v : s.image.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("speckle has the gamma variance of L looks") {
  SceneParams p = small_params(2);
  p.height = 128;
  p.width = 128;
  p.glacier_mean = 0.12;
  p.melange_mean = 0.08;
  p.blob_density = 0.0;
  p.looks = 4.0;
  const Scene s = generate_scene(p);
  for (float cls : {0.0f, 1.0f}) {
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (std::size_t i = 0; i < s.mask.numel(); ++i) {
      if (s.mask.data()[i] != cls) continue;
      sum += s.image.data()[i];
      sq += static_cast<double>(s.image.data()[i]) * s.image.data()[i];
      n += 1.0;
    }
    const double mean = sum / n;
    const double ratio = (sq / n - mean * mean) / (mean * mean);
    CHECK(std::abs(ratio - 0.25) / 0.25 < 0.1);
  }
}

TEST_CASE("scene generation is deterministic and validates its parameters") {
  const Scene a = generate_scene(small_params(7));
  const Scene b = generate_scene(small_params(7));
  const Scene c = generate_scene(small_params(8));
  CHECK(a.image.to_vector() == b.image.to_vector());
  CHECK(a.mask.to_vector() == b.mask.to_vector());
  CHECK(a.image.to_vector() != c.image.to_vector());
  SceneParams bad = small_params(1);
  bad.looks = 0.0;
  CHECK_THROWS_AS(generate_scene(bad), ConfigError);
  bad = small_params(1);
  bad.height = 1;
  CHECK_THROWS_AS(generate_scene(bad), ConfigError);
}

TEST_CASE("datasets are laid out, checksummed and reproducible") {
  const auto root_a = scratch_dir("ds_a");
  const auto root_b = scratch_dir("ds_b");
  SceneParams p = small_params(0);
  p.height = 32;
  p.width = 32;
  const DatasetSplit a = make_dataset(root_a, 4, 2, 3, p, 42);
  (void)make_dataset(root_b, 4, 2, 3, p, 42);
  CHECK(a.train.size() == 4);
  CHECK(a.val.size() == 2);
  CHECK(a.test.size() == 3);
  CHECK(read_bytes(root_a / "manifest.json") == read_bytes(root_b / "manifest.json"));
  for (const auto& split : kSplitNames) {
    for (const auto& e : a.split(split)) {
      CHECK(read_bytes(root_a / e.image) == read_bytes(root_b / e.image));
      CHECK(read_bytes(root_a / e.mask) == read_bytes(root_b / e.mask));
      CHECK(sha256_file(root_a / e.image) == e.image_sha256);
      const GrayImage m = read_pgm(root_a / e.mask);
      for (auto px : m.pixels) CHECK((px == 0 || px == 255));
    }
  }
  const DatasetSplit loaded = load_dataset(root_a);
  CHECK(loaded.test.size() == 3);
  const auto samples = load_samples(loaded, "train");
  REQUIRE(samples.size() == 4);
  CHECK(samples[0].image.shape() == Shape{1, 32, 32});
  CHECK(samples[0].mask.shape() == Shape{1, 32, 32});
  CHECK_THROWS_AS(make_dataset(scratch_dir("ds_c"), 0, 1, 1, p, 1), ConfigError);
  CHECK_THROWS_AS(load_dataset(scratch_dir("ds_empty")), DataError);
}

TEST_CASE("sha256 of a known string") {
  const auto dir = scratch_dir("sha");
  std::ofstream(dir / "abc.txt", std::ios::binary) << "abc";
  CHECK(sha256_file(dir / "abc.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("PGM round trip and normalization") {
  const auto dir = scratch_dir("pgm");
  GrayImage g{3, 2, {0, 1, 127, 128, 200, 255}};
  write_pgm(g, dir / "g.pgm");
  const GrayImage back = read_pgm(dir / "g.pgm");
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.pixels == g.pixels);
  CHECK(to_gray(normalize(g)).pixels == g.pixels);
  CHECK(normalize(g).data()[5] == 1.0f);
  CHECK(mask_from_gray(g).to_vector() == std::vector<float>{0, 0, 0, 1, 1, 1});
  CHECK(mask_to_gray(mask_from_gray(g)).pixels == std::vector<std::uint8_t>{0, 0, 0, 255, 255, 255});
}

TEST_CASE("malformed PGM files raise FormatError") {
  const auto dir = scratch_dir("pgm_bad");
  std::ofstream(dir / "p2.pgm", std::ios::binary) << "P2\n2 1\n255\n0 0\n";
  std::ofstream(dir / "deep.pgm", std::ios::binary) << "P5\n2 1\n65535\n\0\0\0\0";
  std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n4 4\n255\nabc";
  CHECK_THROWS_AS(read_pgm(dir / "p2.pgm"), FormatError);
  CHECK_THROWS_AS(read_pgm(dir / "deep.pgm"), FormatError);
  CHECK_THROWS_AS(read_pgm(dir / "short.pgm"), FormatError);
  CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), IoError);
}

TEST_CASE("tiling covers the image and stitching inverts it") {
  Rng rng(3);
  const Tensor img = random_tensor({2, 10, 7}, rng);
  const auto exact = tile(Tensor::zeros({1, 4, 4}), 2, 2);
  CHECK(exact.size() == 4);

  const auto tiles = tile(img, 4, 3);
  // rows at 0, 3, 6 (clamped); columns at 0, 3 (clamped)
  CHECK(tiles.size() == 6);
  CHECK(tiles.back().y == 6);
  CHECK(tiles.back().x == 3);
  for (const auto& t : tiles) CHECK(t.data.shape() == Shape{2, 4, 4});
  const Tensor back = stitch(tiles, 10, 7);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(back.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));

  CHECK_THROWS_AS(tile(img, 11, 2), ShapeError);
  CHECK_THROWS_AS(tile(img, 4, 0), ConfigError);
}

TEST_CASE("stitching averages overlapping tiles") {
  std::vector<Patch> patches{{Tensor::full({1, 2, 2}, 1.0f), 0, 0}, {Tensor::full({1, 2, 2}, 3.0f), 0, 1}};
  const Tensor s = stitch(patches, 2, 3);
  CHECK(s.to_vector() == std::vector<float>{1, 2, 3, 1, 2, 3});
}
