#include "bunet/bayes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "bunet/data.hpp"
#include "bunet/errors.hpp"

namespace bunet {

McSampleSet mc_sample(UNet& net, const Tensor& x, std::size_t passes, std::uint64_t seed_base) {
  if (passes < 1) throw ConfigError("mc_sample: at least one forward pass is required");
  Tensor input = x;
  if (x.dim() == 3) input = x.reshape({1, x.size(0), x.size(1), x.size(2)});
  if (input.dim() != 4 || input.size(0) != 1) throw ShapeError("mc_sample: expected a single image");
  const std::size_t h = input.size(2);
  const std::size_t w = input.size(3);

  NoGradScope no_grad;
  McSampleSet set;
  set.seed_base = seed_base;
  set.samples.reserve(passes);
  for (std::size_t t = 0; t < passes; ++t) {
    Rng rng(seed_base + t);
    set.samples.push_back(net.forward(input, {DropoutMode::active, BnMode::eval}, rng).reshape({h, w}));
  }
  return set;
}

namespace {
void require_samples(const McSampleSet& set) {
  if (set.samples.empty()) throw DataError("empty sample set");
  for (const auto& s : set.samples) {
    if (s.shape() != set.samples.front().shape()) throw ShapeError("sample set has mixed shapes");
  }
}
}  // namespace

Tensor posterior_mean(const McSampleSet& set) {
  require_samples(set);
  const std::size_t n = set.samples.front().numel();
  std::vector<double> acc(n, 0.0);
  for (const auto& s : set.samples) {
    const auto v = s.data();
    for (std::size_t i = 0; i < n; ++i) acc[i] += v[i];
  }
  const double inv = 1.0 / static_cast<double>(set.samples.size());
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i] * inv);
  return Tensor::from_vector(set.samples.front().shape(), std::move(out));
}

Tensor posterior_variance(const McSampleSet& set) {
  require_samples(set);
  const std::size_t n = set.samples.front().numel();
  std::vector<double> mean(n, 0.0);
  for (const auto& s : set.samples) {
    const auto v = s.data();
    for (std::size_t i = 0; i < n; ++i) mean[i] += v[i];
  }
  const double inv = 1.0 / static_cast<double>(set.samples.size());
  for (auto& m : mean) m *= inv;
  // Two passes: identical samples give exactly zero.
  std::vector<double> sq(n, 0.0);
  for (const auto& s : set.samples) {
    const auto v = s.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double d = v[i] - mean[i];
      sq[i] += d * d;
    }
  }
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(sq[i] * inv);
  return Tensor::from_vector(set.samples.front().shape(), std::move(out));
}

Histogram pooled_histogram(const std::vector<Tensor>& variances) {
  Histogram h;
  h.min = std::numeric_limits<double>::infinity();
  h.max = -std::numeric_limits<double>::infinity();
  std::size_t total = 0;
  for (const auto& t : variances) {
    if (!t.defined()) continue;
    for (float v : t.data()) {
      h.min = std::min(h.min, static_cast<double>(v));
      h.max = std::max(h.max, static_cast<double>(v));
    }
    total += t.numel();
  }
  if (total == 0) throw DataError("threshold selection needs at least one value");
  const double width = (h.max - h.min) / static_cast<double>(kThresholdBins);
  for (std::size_t i = 0; i <= kThresholdBins; ++i) h.edges[i] = h.min + width * static_cast<double>(i);
  h.edges[kThresholdBins] = h.max;
  for (const auto& t : variances) {
    if (!t.defined()) continue;
    for (float v : t.data()) {
      std::size_t bin = width > 0.0 ? static_cast<std::size_t>((static_cast<double>(v) - h.min) / width) : 0;
      bin = std::min(bin, kThresholdBins - 1);
      ++h.counts[bin];
    }
  }
  return h;
}

double select_threshold(const std::vector<Tensor>& variances) {
  const Histogram h = pooled_histogram(variances);
  if (h.max == h.min) return h.max;
  return h.edges[kThresholdBins - 1];
}

Tensor binarize(const Tensor& variance, double threshold) {
  if (!(threshold >= 0.0)) throw ContractError("binarize: threshold must be non-negative");
  std::vector<float> out(variance.numel());
  const auto v = variance.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v[i]) >= threshold ? 1.0f : 0.0f;
  return Tensor::from_vector(variance.shape(), std::move(out));
}

UncertaintyMap make_uncertainty_map(const Tensor& variance, double threshold) {
  return UncertaintyMap{variance, binarize(variance, threshold), threshold};
}

void write_uncertainty_heatmap(const Tensor& variance, const std::filesystem::path& path) {
  std::vector<float> scaled(variance.numel());
  const auto v = variance.data();
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = v[i] / kMaxBernoulliVariance;
  write_pgm(to_gray(Tensor::from_vector(variance.shape(), std::move(scaled))), path);
}

void write_variance_raw(const UncertaintyMap& map, const std::filesystem::path& path) {
  std::string bytes;
  bytes.reserve(map.variance.numel() * 4);
  for (float v : map.variance.data()) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

  const nlohmann::json sidecar{{"dtype", "float32-le"}, {"shape", map.variance.shape()}, {"threshold", map.threshold}};
  std::ofstream meta(path.string() + ".json", std::ios::trunc);
  if (!meta) throw IoError("cannot write " + path.string() + ".json");
  meta << sidecar.dump(2) << '\n';
}

UncertaintyMap read_variance_raw(const std::filesystem::path& path) {
  std::ifstream meta(path.string() + ".json");
  if (!meta) throw DataError("missing uncertainty sidecar " + path.string() + ".json");
  Shape shape;
  double threshold = 0.0;
  try {
    const auto j = nlohmann::json::parse(meta);
    if (j.at("dtype").get<std::string>() != "float32-le") throw FormatError(path.string() + ": unsupported dtype");
    shape = j.at("shape").get<Shape>();
    threshold = j.at("threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ".json: " + e.what());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing uncertainty map " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != shape_numel(shape) * 4) throw FormatError(path.string() + ": payload does not match sidecar shape");
  std::vector<float> values(shape_numel(shape));
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(raw[4 * i]) | (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    values[i] = std::bit_cast<float>(u);
  }
  return make_uncertainty_map(Tensor::from_vector(shape, std::move(values)), threshold);
}

}  // namespace bunet
