// Acceptance harness: prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.
//
//   bunet_acceptance [--cli PATH] [--work DIR] [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bunet/bayes.hpp"
#include "bunet/data.hpp"
#include "bunet/metrics.hpp"
#include "bunet/nn.hpp"
#include "bunet/pipeline.hpp"
#include "bunet/unet.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace bunet;
using namespace bunet::test;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// --- 1: gradient suite ------------------------------------------------------------

/// Identity whose backward is deliberately 1% too large; the suite must reject it.
Tensor skewed_identity(const Tensor& x) {
  Tensor out = x.detach().clone();
  if (needs_recording({&x})) {
    Tape::current()->record("skewed_identity", {x}, out, [](const Tape::Node& n) {
      Tensor in = n.inputs[0];
      std::vector<float> g(n.output.grad().begin(), n.output.grad().end());
      for (auto& v : g) v *= 1.01f;
      accumulate_grad(in, g);
    });
  }
  return out;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  constexpr int kInstances = 20;
  std::size_t ops = 0, checked = 0, failures = 0, literal_failures = 0;
  std::string worst;
  for (const auto& c : grad_cases()) {
    ++ops;
    for (int i = 0; i < kInstances; ++i) {
      Rng rng(90000 + static_cast<std::uint64_t>(i));
      const auto inputs = c.make_inputs(rng);
      const auto r = gradcheck(c.op, inputs, static_cast<std::uint64_t>(i), 1e-3, 1e-3, 1e-5);
      Rng rng2(90000 + static_cast<std::uint64_t>(i));
      const auto literal = gradcheck(c.op, c.make_inputs(rng2), static_cast<std::uint64_t>(i), 1e-3, 1e-3, 1e-5, false);
      checked += r.checked;
      failures += r.failures;
      literal_failures += literal.failures;
      if (!r.ok() && worst.empty()) worst = c.name + ": " + r.worst;
    }
  }
  Rng rng(7);
  const auto control = gradcheck([](const std::vector<Tensor>& in) { return skewed_identity(in[0]); },
                                 {random_tensor({4, 5}, rng, 0.5, 1.0)}, 1);
  const bool control_rejected = !control.ok();
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures == 0 && control_rejected && secs < 60.0;
  o.detail = std::to_string(ops) + " ops x " + std::to_string(kInstances) + " instances, " + std::to_string(checked) +
             " elements, " + std::to_string(failures) + " outside 1e-3 rel / 1e-5 abs plus float32 rounding bound (" +
             std::to_string(literal_failures) + " need the rounding bound); 1% gradient error " +
             (control_rejected ? "rejected" : "NOT rejected") + "; " + fmt(secs, 3) + " s";
  if (!worst.empty()) o.detail += "; first failure " + worst;
  return o;
}

// --- 2: MC-dropout moment oracle ----------------------------------------------------

Outcome moment_oracle() {
  const auto t0 = Clock::now();
  constexpr std::size_t kSamples = 100000;
  bool ok = true;
  std::string detail;
  for (const float theta : {0.2f, 0.5f}) {
    const float w = 0.8f, x = 1.5f;
    const Tensor input = Tensor::full({1, 1}, x);
    McSampleSet set;
    set.seed_base = 1234;
    set.samples.reserve(kSamples);
    for (std::size_t t = 0; t < kSamples; ++t) {
      Rng rng(set.seed_base + t);
      set.samples.push_back(scale(dropout(input, theta, DropoutMode::active, rng), w));
    }
    const double wx = static_cast<double>(w) * x;
    const double mean = posterior_mean(set).item();
    const double var = posterior_variance(set).item();
    const double expected_var = theta / (1.0 - theta) * wx * wx;
    const double mean_err = std::abs(mean - wx) / wx;
    const double var_err = std::abs(var - expected_var) / expected_var;
    ok = ok && mean_err < 0.01 && var_err < 0.03;
    detail += "theta " + fmt(theta, 2) + ": mean err " + fmt(100 * mean_err, 3) + "%, variance err " +
              fmt(100 * var_err, 3) + "%; ";
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 30.0, detail + fmt(secs, 3) + " s"};
}

// --- 3: posterior mean / variance oracles ----------------------------------------------

Outcome posterior_oracles() {
  Rng rng(3);
  double max_mean_err = 0.0, max_var_err = 0.0;
  bool bounded = true;
  auto check = [&](const std::vector<std::vector<float>>& values, Shape shape) {
    McSampleSet set;
    for (const auto& v : values) set.samples.push_back(Tensor::from_vector(shape, v));
    const Tensor m = posterior_mean(set);
    const Tensor v = posterior_variance(set);
    const auto mean = streaming_mean(values);
    const auto var = two_pass_variance(values);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      max_mean_err = std::max(max_mean_err, std::abs(m.data()[i] - mean[i]));
      max_var_err = std::max(max_var_err, std::abs(v.data()[i] - var[i]));
      bounded = bounded && v.data()[i] >= 0.0f && v.data()[i] <= 0.25f;
    }
  };
  std::size_t sets = 0;
  for (int k = 0; k < 200; ++k) {
    const std::size_t t = 1 + rng.below(40);
    std::vector<std::vector<float>> values;
    for (std::size_t i = 0; i < t; ++i) {
      auto v = random_values(64, rng, 0.0, 1.0);
      // Mix in values at the extremes of (0, 1) to probe the 0.25 bound.
      for (auto& x : v) {
        if (rng.bernoulli(0.2)) x = rng.bernoulli(0.5) ? 1e-6f : 1.0f - 1e-6f;
      }
      values.push_back(std::move(v));
    }
    check(values, {8, 8});
    ++sets;
  }
  // Sample sets drawn from an actual network.
  UNetSpec spec;
  spec.base_filters = 4;
  spec.levels = 3;
  spec.kernel = 3;
  UNet net(spec, 1);
  for (int k = 0; k < 5; ++k) {
    const McSampleSet s = mc_sample(net, random_tensor({1, 16, 16}, rng, 0.0, 1.0), 10, 100 * k);
    std::vector<std::vector<float>> values;
    for (const auto& x : s.samples) values.push_back(x.to_vector());
    check(values, {16, 16});
    ++sets;
  }
  const bool ok = max_mean_err <= 1e-6 && max_var_err <= 1e-6 && bounded;
  return {ok, std::to_string(sets) + " sample sets; max |mean - oracle| " + fmt(max_mean_err, 3) +
                  ", max |variance - oracle| " + fmt(max_var_err, 3) + (bounded ? ", variance in [0, 0.25]" : ", variance OUT OF [0, 0.25]")};
}

// --- 4: metric oracles -----------------------------------------------------------------

Outcome metric_oracles() {
  struct Fixture {
    std::vector<float> pred, truth;
    double dice, iou;
  };
  // Hand-counted: |P n G|, |P|, |G| written out for each case.
  const std::vector<Fixture> fixtures = {
      {{1, 1, 0, 0}, {1, 0, 1, 0}, 2.0 * 1 / (2 + 2), 1.0 / 3},
      {{1, 1, 1, 1}, {1, 1, 1, 1}, 1.0, 1.0},
      {{1, 1, 0, 0}, {0, 0, 1, 1}, 0.0, 0.0},
      {{0, 0, 0, 0}, {0, 0, 0, 0}, 1.0, 1.0},
      {{1, 0, 0, 0, 0, 0}, {1, 1, 1, 0, 0, 0}, 2.0 * 1 / (1 + 3), 1.0 / 3},
      {{1, 1, 1, 0, 1, 0, 0, 0}, {1, 1, 0, 0, 1, 1, 0, 0}, 2.0 * 3 / (4 + 4), 3.0 / 5},
  };
  bool exact = true;
  for (const auto& f : fixtures) {
    const std::size_t n = f.pred.size();
    const Tensor p = Tensor::from_vector({n}, f.pred);
    const Tensor g = Tensor::from_vector({n}, f.truth);
    exact = exact && dice(p, g) == f.dice && iou(p, g) == f.iou;
  }
  Rng rng(4);
  double max_dev = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 16 + rng.below(200);
    std::vector<float> a(n), b(n);
    const double pa = rng.uniform(), pb = rng.uniform();
    for (std::size_t k = 0; k < n; ++k) {
      a[k] = rng.bernoulli(pa) ? 1.0f : 0.0f;
      b[k] = rng.bernoulli(pb) ? 1.0f : 0.0f;
    }
    const Tensor ta = Tensor::from_vector({n}, a), tb = Tensor::from_vector({n}, b);
    const double d = dice(ta, tb), j = iou(ta, tb);
    max_dev = std::max(max_dev, std::abs(d - 2.0 * j / (1.0 + j)));
  }
  return {exact && max_dev <= 1e-12, std::to_string(fixtures.size()) + " hand fixtures " +
                                         (exact ? "exact" : "MISMATCH") +
                                         "; max |dice - 2 iou / (1 + iou)| over 1000 pairs " + fmt(max_dev, 3)};
}

// --- 5: baseline degeneracy -------------------------------------------------------------

Outcome baseline_degeneracy() {
  UNetSpec spec;
  spec.base_filters = 8;
  spec.dropout_rate = 0.0f;
  UNet net(spec, 21);
  Rng rng(5);
  std::size_t images = 0, identical = 0;
  for (int k = 0; k < 4; ++k) {
    const Tensor x = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
    Rng unused(0);
    const Tensor deterministic = net.forward(x.reshape({1, 1, 32, 32}), {DropoutMode::inactive, BnMode::eval}, unused);
    const McSampleSet s = mc_sample(net, x, 1, 1000 + k);
    ++images;
    identical += s.samples[0].to_vector() == deterministic.to_vector();
  }
  return {identical == images, std::to_string(identical) + "/" + std::to_string(images) +
                                   " images bit-identical (dropout 0, T = 1 vs deterministic forward)"};
}

// --- 8: threshold procedure ------------------------------------------------------------

Outcome threshold_procedure() {
  Rng rng(8);
  double max_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tensor> maps;
    std::vector<double> pooled;
    const std::size_t n_maps = 1 + rng.below(6);
    for (std::size_t m = 0; m < n_maps; ++m) {
      const auto v = random_values(30 + rng.below(100), rng, 0.0, rng.uniform(0.01, 0.25));
      pooled.insert(pooled.end(), v.begin(), v.end());
      maps.push_back(Tensor::from_vector({v.size()}, v));
    }
    max_err = std::max(max_err, std::abs(select_threshold(maps) - histogram_last_border(pooled)));
  }
  const double documented_case = select_threshold({Tensor::from_vector({3}, {0.0f, 0.07f, 0.1389f})});
  const double documented_expected = 0.9 * static_cast<double>(0.1389f);
  max_err = std::max(max_err, std::abs(documented_case - documented_expected));
  return {max_err <= 1e-9, "100 pooled trials; max |threshold - 10-bin oracle| " + fmt(max_err, 3) +
                               "; [0, 0.1389] -> " + fmt(documented_case, 6)};
}

// --- 6, 7, 9: end-to-end --------------------------------------------------------------------

struct E2E {
  fs::path cli;
  fs::path work;
  std::string last_error;

  bool run(const std::string& args, const fs::path& log) {
    const std::string cmd = "\"" + cli.string() + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc != 0) last_error = "command failed (" + std::to_string(rc) + "): " + args + ", see " + log.string();
    return rc == 0;
  }

  /// Trains stage 1 and stage 2, then evaluates. Returns false on any command failure.
  bool pipeline(const fs::path& data, const fs::path& run_dir, const std::string& tag) {
    const std::string common = " --base-filters 8 --epochs 60 --seed 7 -q";
    return run("train --stage 1 --data \"" + data.string() + "\" --run \"" + run_dir.string() + "\"" + common,
               work / ("train1_" + tag + ".log")) &&
           run("train --stage 2 --run \"" + run_dir.string() + "\" --epochs 60 -q", work / ("train2_" + tag + ".log")) &&
           run("evaluate --run \"" + run_dir.string() + "\" --split test", work / ("evaluate_" + tag + ".log"));
  }
};

std::map<std::string, MetricsReport> load_report(const fs::path& path) {
  const json doc = json::parse(read_bytes(path));
  std::map<std::string, MetricsReport> out;
  for (const auto& m : doc.at("methods")) {
    MetricsReport r = report_from_json(m.dump());
    out[r.method] = std::move(r);
  }
  return out;
}

Outcome end_to_end(E2E& e2e, const fs::path& data, const fs::path& run) {
  const auto t0 = Clock::now();
  if (!e2e.run("generate --out \"" + data.string() + "\" --train 32 --val 8 --test 8 --size 128 --seed 7 -q",
               e2e.work / "generate_a.log") ||
      !e2e.pipeline(data, run, "a")) {
    return {false, e2e.last_error};
  }
  const double secs = seconds_since(t0);
  const auto report = load_report(run / "report_test.json");
  if (!report.count("Bayesian U-Net I") || !report.count("Bayesian U-Net II")) {
    return {false, "report lacks stage rows: " + (run / "report_test.json").string()};
  }
  const double d1 = report.at("Bayesian U-Net I").mean_dice;
  const double d2 = report.at("Bayesian U-Net II").mean_dice;
  const bool ok = d1 >= 0.90 && d2 >= d1 - 0.01 && secs < 1800.0;
  return {ok, "stage-1 test Dice " + fmt(d1, 5) + " (>= 0.90), stage-2 " + fmt(d2, 5) + " (>= stage-1 - 0.01, " +
                  (d2 >= d1 ? "+" : "") + fmt(100.0 * (d2 - d1), 3) + " points), " + fmt(secs / 60.0, 3) +
                  " min (< 30)"};
}

/// Mask pixels whose 5x5 neighbourhood contains the other class.
std::vector<bool> boundary_band(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
  std::vector<bool> band(h * w, false);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool fg = mask[y * w + x] >= 128;
      for (long dy = -2; dy <= 2 && !band[y * w + x]; ++dy) {
        for (long dx = -2; dx <= 2; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
          if ((mask[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] >= 128) != fg) {
            band[y * w + x] = true;
            break;
          }
        }
      }
    }
  }
  return band;
}

Outcome uncertainty_localization(const fs::path& data, const fs::path& run) {
  const DatasetSplit ds = load_dataset(data);
  std::size_t scenes = 0, localized = 0;
  double ratio_sum = 0.0;
  for (const auto& e : ds.test) {
    const GrayImage mask = read_pgm(ds.root / e.mask);
    const UncertaintyMap map = read_variance_raw(stage_dir(run, 1) / "uncertainty" / "test" / (e.id + ".f32"));
    const auto band = boundary_band(mask.pixels, mask.height, mask.width);
    double in = 0.0, out = 0.0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t i = 0; i < band.size(); ++i) {
      (band[i] ? in : out) += map.variance.data()[i];
      ++(band[i] ? n_in : n_out);
    }
    const double mean_in = in / static_cast<double>(std::max<std::size_t>(1, n_in));
    const double mean_out = out / static_cast<double>(std::max<std::size_t>(1, n_out));
    ++scenes;
    localized += mean_in > mean_out;
    ratio_sum += mean_out > 0.0 ? mean_in / mean_out : 0.0;
  }
  const double fraction = scenes ? static_cast<double>(localized) / static_cast<double>(scenes) : 0.0;
  return {scenes > 0 && fraction >= 0.9,
          std::to_string(localized) + "/" + std::to_string(scenes) +
              " test scenes with boundary-band variance > off-band variance (>= 90%); mean band/off-band ratio " +
              fmt(scenes ? ratio_sum / static_cast<double>(scenes) : 0.0, 4)};
}

/// Relative paths of all regular files below `root`, sorted.
std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Training logs carry wall-clock timestamps; compare them with those removed.
std::string log_without_timestamps(const fs::path& p) {
  std::istringstream in(read_bytes(p));
  std::string line, out;
  while (std::getline(in, line)) {
    json j = json::parse(line);
    j.erase("timestamp");
    out += j.dump() + "\n";
  }
  return out;
}

Outcome reproducibility(E2E& e2e, const fs::path& data_a, const fs::path& run_a) {
  const fs::path data_b = e2e.work / "data_b";
  const fs::path run_b = e2e.work / "run_b";
  if (!e2e.run("generate --out \"" + data_b.string() + "\" --train 32 --val 8 --test 8 --size 128 --seed 7 -q",
               e2e.work / "generate_b.log")) {
    return {false, e2e.last_error};
  }
  std::size_t data_files = 0, data_diff = 0;
  for (const auto& rel : files_under(data_a)) {
    ++data_files;
    data_diff += read_bytes(data_a / rel) != read_bytes(data_b / rel);
  }
  // Run B reads the same dataset directory so the recorded data path matches.
  if (!e2e.pipeline(data_a, run_b, "b")) return {false, e2e.last_error};

  const auto files_a = files_under(run_a);
  const auto files_b = files_under(run_b);
  std::size_t compared = 0, logs = 0;
  std::vector<std::string> differing;
  std::map<std::string, std::size_t> kinds;
  for (const auto& rel : files_a) {
    const bool is_log = rel.filename() == "log.jsonl";
    const bool same = is_log ? log_without_timestamps(run_a / rel) == log_without_timestamps(run_b / rel)
                             : read_bytes(run_a / rel) == read_bytes(run_b / rel);
    ++compared;
    logs += is_log;
    if (!is_log) ++kinds[rel.extension().string()];
    if (!same) differing.push_back(rel.string());
  }
  const bool ok = files_a == files_b && differing.empty() && data_diff == 0 && kinds[".bunt"] == 2;
  std::string detail = std::to_string(compared) + " run files compared (";
  for (const auto& [ext, n] : kinds) detail += std::to_string(n) + " " + ext + ", ";
  detail += std::to_string(logs) + " logs modulo timestamps), " + std::to_string(differing.size()) + " differ";
  if (files_a != files_b) detail += "; file sets differ";
  if (!differing.empty()) detail += "; first: " + differing.front();
  detail += "; dataset regenerated: " + std::to_string(data_files - data_diff) + "/" + std::to_string(data_files) +
            " files identical";
  return {ok, detail};
}

const char* kTitles[] = {"",
                         "gradient suite",
                         "MC-dropout moment oracle",
                         "posterior mean/variance oracles",
                         "metric oracles",
                         "baseline degeneracy",
                         "synthetic end-to-end",
                         "uncertainty localization",
                         "threshold procedure",
                         "reproducibility"};

}  // namespace

int main(int argc, char** argv) {
  fs::path cli = BUNET_CLI_PATH;
  fs::path work = fs::temp_directory_path() / "bunet_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (arg == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: " << argv[0] << " [--cli PATH] [--work DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  auto wanted = [&](int k) { return only.empty() || only.count(k) > 0; };

  std::map<int, Outcome> results;
  auto record = [&](int k, Outcome o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << k << " " << kTitles[k] << ": " << o.detail << std::endl;
    results[k] = std::move(o);
  };
  auto guarded = [&](int k, auto&& fn) {
    try {
      record(k, fn());
    } catch (const std::exception& e) {
      record(k, {false, std::string("exception: ") + e.what()});
    }
  };

  if (wanted(1)) guarded(1, gradient_suite);
  if (wanted(2)) guarded(2, moment_oracle);
  if (wanted(3)) guarded(3, posterior_oracles);
  if (wanted(4)) guarded(4, metric_oracles);
  if (wanted(5)) guarded(5, baseline_degeneracy);

  if (wanted(6) || wanted(7) || wanted(9)) {
    fs::remove_all(work);
    fs::create_directories(work);
    E2E e2e{cli, work, {}};
    const fs::path data = work / "data_a";
    const fs::path run = work / "run_a";
    guarded(6, [&] { return end_to_end(e2e, data, run); });
    const bool have_run = fs::exists(run / "report_test.json");
    if (wanted(7)) {
      if (have_run) {
        guarded(7, [&] { return uncertainty_localization(data, run); });
      } else {
        record(7, {false, "needs the end-to-end run of criterion 6"});
      }
    }
    if (wanted(8)) guarded(8, threshold_procedure);
    if (wanted(9)) {
      if (have_run) {
        guarded(9, [&] { return reproducibility(e2e, data, run); });
      } else {
        record(9, {false, "needs the end-to-end run of criterion 6"});
      }
    }
  } else if (wanted(8)) {
    guarded(8, threshold_procedure);
  }

  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.pass; });
  std::cout << results.size() - static_cast<std::size_t>(failed) << "/" << results.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
