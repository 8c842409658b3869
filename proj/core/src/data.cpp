#include "bunet/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <memory>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "bunet/errors.hpp"
#include "bunet/random.hpp"

namespace bunet {

namespace fs = std::filesystem;
using nlohmann::json;

std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("make_batch: empty batch");
  const Shape& is = samples.at(indices.front()).image.shape();
  const Shape& ms = samples.at(indices.front()).mask.shape();
  Shape image_shape{indices.size()};
  image_shape.insert(image_shape.end(), is.begin(), is.end());
  Shape mask_shape{indices.size()};
  mask_shape.insert(mask_shape.end(), ms.begin(), ms.end());
  std::vector<float> images;
  std::vector<float> masks;
  images.reserve(shape_numel(image_shape));
  masks.reserve(shape_numel(mask_shape));
  for (auto i : indices) {
    const Sample& s = samples.at(i);
    if (s.image.shape() != is || s.mask.shape() != ms) throw ShapeError("make_batch: samples differ in shape");
    images.insert(images.end(), s.image.data().begin(), s.image.data().end());
    masks.insert(masks.end(), s.mask.data().begin(), s.mask.data().end());
  }
  return {Tensor::from_vector(image_shape, std::move(images)), Tensor::from_vector(mask_shape, std::move(masks))};
}

// --- PGM ----------------------------------------------------------------------

namespace {

void skip_ws_and_comments(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

std::size_t read_header_int(std::istream& in, const fs::path& path) {
  skip_ws_and_comments(in);
  long long v = -1;
  in >> v;
  if (!in || v <= 0) throw FormatError(path.string() + ": malformed PGM header");
  return static_cast<std::size_t>(v);
}

}  // namespace

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') throw FormatError(path.string() + ": not a binary PGM (P5) file");
  GrayImage img;
  img.width = read_header_int(in, path);
  img.height = read_header_int(in, path);
  const std::size_t maxval = read_header_int(in, path);
  if (maxval != 255) throw FormatError(path.string() + ": only 8-bit PGM (maxval 255) is supported");
  if (!std::isspace(in.get())) throw FormatError(path.string() + ": malformed PGM header");
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) throw FormatError(path.string() + ": truncated pixel data");
  return img;
}

void write_pgm(const GrayImage& image, const fs::path& path) {
  if (image.pixels.size() != image.width * image.height || image.pixels.empty()) {
    throw ContractError("write_pgm: pixel buffer does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor normalize(const GrayImage& image) {
  std::vector<float> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(image.pixels[i]) / 255.0f;
  return Tensor::from_vector({1, image.height, image.width}, std::move(v));
}

namespace {
std::pair<std::size_t, std::size_t> plane_dims(const Tensor& t) {
  const auto& s = t.shape();
  if (s.size() == 2) return {s[0], s[1]};
  if (s.size() == 3 && s[0] == 1) return {s[1], s[2]};
  throw ShapeError("expected [h, w] or [1, h, w] image, got " + shape_to_string(s));
}
}  // namespace

GrayImage to_gray(const Tensor& image) {
  const auto [h, w] = plane_dims(image);
  GrayImage g{w, h, std::vector<std::uint8_t>(h * w)};
  const auto v = image.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v[i], 0.0f, 1.0f) * 255.0f));
  }
  return g;
}

Tensor mask_from_gray(const GrayImage& image) {
  std::vector<float> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = image.pixels[i] >= 128 ? 1.0f : 0.0f;
  return Tensor::from_vector({1, image.height, image.width}, std::move(v));
}

GrayImage mask_to_gray(const Tensor& mask) {
  const auto [h, w] = plane_dims(mask);
  GrayImage g{w, h, std::vector<std::uint8_t>(h * w)};
  const auto v = mask.data();
  for (std::size_t i = 0; i < v.size(); ++i) g.pixels[i] = v[i] >= 0.5f ? 255 : 0;
  return g;
}

// --- scene generation ---------------------------------------------------------------

namespace {

/// Catmull-Rom interpolation of evenly spaced control values at parameter s in [0, n-1].
double catmull_rom(const std::vector<double>& ctrl, double s) {
  const auto n = static_cast<long>(ctrl.size());
  const long i = std::clamp(static_cast<long>(std::floor(s)), 0L, n - 2);
  const double t = s - static_cast<double>(i);
  auto at = [&](long k) { return ctrl[static_cast<std::size_t>(std::clamp(k, 0L, n - 1))]; };
  const double p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
  const double t2 = t * t;
  const double t3 = t2 * t;
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3);
}

std::optional<Scene> try_generate(const SceneParams& p, Rng& rng) {
  const bool transposed = rng.bernoulli(0.5);   // front runs horizontally
  const bool glacier_low = rng.bernoulli(0.5);  // glacier on the low-coordinate side
  const std::size_t along = transposed ? p.width : p.height;
  const std::size_t across = transposed ? p.height : p.width;
  const auto across_d = static_cast<double>(across);

  const std::size_t n_ctrl =
      p.min_control_points + static_cast<std::size_t>(rng.below(p.max_control_points - p.min_control_points + 1));
  std::vector<double> ctrl(n_ctrl);
  for (auto& c : ctrl) c = across_d * (0.5 + p.amplitude * rng.uniform(-1.0, 1.0));

  std::vector<double> front(along);
  for (std::size_t a = 0; a < along; ++a) {
    const double s = along > 1 ? static_cast<double>(a) * static_cast<double>(n_ctrl - 1) / static_cast<double>(along - 1)
                               : 0.0;
    front[a] = catmull_rom(ctrl, s);
  }

  const std::size_t h = p.height;
  const std::size_t w = p.width;
  std::vector<float> mask(h * w);
  std::vector<double> signed_dist(h * w);  // > 0 on the melange side, in pixels across the front
  std::size_t foreground = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t a = transposed ? x : y;
      const double c = static_cast<double>(transposed ? y : x) + 0.5;
      const double d = glacier_low ? c - front[a] : front[a] - c;
      const bool glacier = d < 0.0;
      mask[y * w + x] = glacier ? 1.0f : 0.0f;
      signed_dist[y * w + x] = d;
      foreground += glacier;
    }
  }
  const double fraction = static_cast<double>(foreground) / static_cast<double>(h * w);
  if (fraction < kMinForeground || fraction > kMaxForeground) return std::nullopt;

  std::vector<double> intensity(h * w);
  for (std::size_t i = 0; i < h * w; ++i) intensity[i] = mask[i] == 1.0f ? p.glacier_mean : p.melange_mean;

  // Iceberg blobs: bright discs on the melange side within the near-front band.
  const double band = p.blob_band * across_d;
  std::size_t band_pixels = 0;
  for (std::size_t i = 0; i < h * w; ++i) band_pixels += signed_dist[i] > 0.0 && signed_dist[i] < band;
  const auto n_blobs = static_cast<std::size_t>(std::lround(p.blob_density * static_cast<double>(band_pixels) / 1000.0));
  for (std::size_t b = 0; b < n_blobs; ++b) {
    const auto a = static_cast<std::size_t>(rng.below(along));
    const double offset = rng.uniform(1.0, std::max(1.0, band));
    const double radius = rng.uniform(1.5, 4.0);
    const double c_center = glacier_low ? front[a] + offset : front[a] - offset;
    const double cy = transposed ? c_center : static_cast<double>(a) + 0.5;
    const double cx = transposed ? static_cast<double>(a) + 0.5 : c_center;
    const auto r = static_cast<long>(std::ceil(radius));
    for (long dy = -r; dy <= r; ++dy) {
      for (long dx = -r; dx <= r; ++dx) {
        const long y = static_cast<long>(std::floor(cy)) + dy;
        const long x = static_cast<long>(std::floor(cx)) + dx;
        if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
        const double ddy = static_cast<double>(y) + 0.5 - cy;
        const double ddx = static_cast<double>(x) + 0.5 - cx;
        const std::size_t i = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
        if (ddy * ddy + ddx * ddx <= radius * radius && mask[i] == 0.0f) intensity[i] = p.glacier_mean;
      }
    }
  }

  std::vector<float> image(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double speckle = rng.gamma(p.looks, 1.0 / p.looks);
    image[i] = static_cast<float>(std::clamp(intensity[i] * speckle, 0.0, 1.0));
  }
  return Scene{Tensor::from_vector({1, h, w}, std::move(image)), Tensor::from_vector({h, w}, std::move(mask))};
}

}  // namespace

Scene generate_scene(const SceneParams& params) {
  if (params.height < 2 || params.width < 2) throw ConfigError("scene dimensions must be at least 2x2");
  if (params.min_control_points < 2 || params.max_control_points < params.min_control_points) {
    throw ConfigError("invalid control point range");
  }
  if (!(params.looks > 0.0)) throw ConfigError("speckle looks must be positive");
  constexpr int kMaxAttempts = 10;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng(mix_seed(params.seed, static_cast<std::uint64_t>(attempt)));
    if (auto scene = try_generate(params, rng)) return std::move(*scene);
  }
  throw DataError("scene generation failed: foreground fraction outside [0.2, 0.8] after 10 attempts (seed " +
                  std::to_string(params.seed) + ")");
}

// --- datasets -------------------------------------------------------------------------

const std::vector<DatasetEntry>& DatasetSplit::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw DataError("unknown split '" + name + "'");
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed for " + path.string());
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return os.str();
}

namespace {

json params_to_json(const SceneParams& p) {
  return json{{"height", p.height},
              {"width", p.width},
              {"min_control_points", p.min_control_points},
              {"max_control_points", p.max_control_points},
              {"amplitude", p.amplitude},
              {"glacier_mean", p.glacier_mean},
              {"melange_mean", p.melange_mean},
              {"looks", p.looks},
              {"blob_density", p.blob_density},
              {"blob_band", p.blob_band}};
}

std::string index_name(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%04zu", i);
  return buf;
}

}  // namespace

DatasetSplit make_dataset(const fs::path& root, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                          const SceneParams& params, std::uint64_t seed) {
  if (n_train == 0 || n_val == 0 || n_test == 0) throw ConfigError("every split needs at least one scene");
  DatasetSplit ds;
  ds.root = root;
  json splits = json::object();
  const std::size_t counts[3] = {n_train, n_val, n_test};
  std::size_t global = 0;
  try {
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string& name = kSplitNames[s];
      fs::create_directories(root / name / "images");
      fs::create_directories(root / name / "masks");
      auto& entries = s == 0 ? ds.train : (s == 1 ? ds.val : ds.test);
      json list = json::array();
      for (std::size_t i = 0; i < counts[s]; ++i, ++global) {
        SceneParams p = params;
        p.seed = mix_seed(seed, global);
        const Scene scene = generate_scene(p);
        DatasetEntry e;
        e.id = index_name(i);
        e.image = fs::path(name) / "images" / (e.id + ".pgm");
        e.mask = fs::path(name) / "masks" / (e.id + ".pgm");
        write_pgm(to_gray(scene.image), root / e.image);
        write_pgm(mask_to_gray(scene.mask), root / e.mask);
        e.image_sha256 = sha256_file(root / e.image);
        e.mask_sha256 = sha256_file(root / e.mask);
        list.push_back({{"id", e.id},
                        {"image", e.image.generic_string()},
                        {"mask", e.mask.generic_string()},
                        {"image_sha256", e.image_sha256},
                        {"mask_sha256", e.mask_sha256}});
        entries.push_back(std::move(e));
      }
      splits[name] = std::move(list);
    }
    const json manifest{{"format", "bunet-dataset"}, {"version", 1},   {"seed", seed},
                        {"params", params_to_json(params)}, {"splits", splits}};
    std::ofstream out(root / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
    out << manifest.dump(2) << '\n';
  } catch (const fs::filesystem_error& e) {
    throw IoError(e.what());
  }
  return ds;
}

DatasetSplit load_dataset(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw DataError("no dataset manifest at " + (root / "manifest.json").string());
  DatasetSplit ds;
  ds.root = root;
  try {
    const json manifest = json::parse(in);
    for (const auto& name : kSplitNames) {
      auto& entries = name == "train" ? ds.train : (name == "val" ? ds.val : ds.test);
      for (const auto& item : manifest.at("splits").at(name)) {
        entries.push_back(DatasetEntry{item.at("id").get<std::string>(), item.at("image").get<std::string>(),
                                       item.at("mask").get<std::string>(), item.at("image_sha256").get<std::string>(),
                                       item.at("mask_sha256").get<std::string>()});
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset manifest: " + std::string(e.what()));
  }
  return ds;
}

std::vector<Sample> load_samples(const DatasetSplit& dataset, const std::string& split) {
  std::vector<Sample> out;
  for (const auto& e : dataset.split(split)) {
    const GrayImage img = read_pgm(dataset.root / e.image);
    const GrayImage msk = read_pgm(dataset.root / e.mask);
    if (img.width != msk.width || img.height != msk.height) {
      throw DataError("image/mask size mismatch for " + split + "/" + e.id);
    }
    out.push_back(Sample{e.id, normalize(img), mask_from_gray(msk)});
  }
  return out;
}

// --- tiling -------------------------------------------------------------------------

namespace {
std::vector<std::size_t> tile_starts(std::size_t extent, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0;; s += stride) {
    if (s + patch >= extent) {
      starts.push_back(extent - patch);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}
}  // namespace

std::vector<Patch> tile(const Tensor& image, std::size_t patch, std::size_t stride) {
  if (image.dim() != 3) throw ShapeError("tile: expected [c, h, w], got " + shape_to_string(image.shape()));
  if (patch == 0 || stride == 0) throw ConfigError("tile: patch and stride must be positive");
  const std::size_t c = image.size(0);
  const std::size_t h = image.size(1);
  const std::size_t w = image.size(2);
  if (patch > h || patch > w) {
    throw ShapeError("tile: patch " + std::to_string(patch) + " exceeds image " + shape_to_string(image.shape()));
  }
  const auto v = image.data();
  std::vector<Patch> out;
  for (auto y0 : tile_starts(h, patch, stride)) {
    for (auto x0 : tile_starts(w, patch, stride)) {
      std::vector<float> buf(c * patch * patch);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < patch; ++y) {
          const float* src = v.data() + (ch * h + y0 + y) * w + x0;
          std::copy_n(src, patch, buf.data() + (ch * patch + y) * patch);
        }
      }
      out.push_back(Patch{Tensor::from_vector({c, patch, patch}, std::move(buf)), y0, x0});
    }
  }
  return out;
}

Tensor stitch(const std::vector<Patch>& patches, std::size_t height, std::size_t width) {
  if (patches.empty()) throw DataError("stitch: no patches");
  const Shape& ps = patches.front().data.shape();
  if (ps.size() != 3 || ps[1] != ps[2]) throw ShapeError("stitch: patches must be [c, p, p]");
  const std::size_t c = ps[0];
  const std::size_t patch = ps[1];
  std::vector<float> acc(c * height * width, 0.0f);
  std::vector<float> weight(height * width, 0.0f);
  for (const auto& p : patches) {
    if (p.data.shape() != ps) throw ShapeError("stitch: patches differ in shape");
    if (p.y + patch > height || p.x + patch > width) throw ShapeError("stitch: patch outside canvas");
    const auto v = p.data.data();
    for (std::size_t y = 0; y < patch; ++y) {
      for (std::size_t x = 0; x < patch; ++x) weight[(p.y + y) * width + p.x + x] += 1.0f;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t x = 0; x < patch; ++x) {
          acc[(ch * height + p.y + y) * width + p.x + x] += v[(ch * patch + y) * patch + x];
        }
      }
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < height * width; ++i) {
      if (weight[i] == 0.0f) throw DataError("stitch: patches do not cover the canvas");
      acc[ch * height * width + i] /= weight[i];
    }
  }
  return Tensor::from_vector({c, height, width}, std::move(acc));
}

}  // namespace bunet
