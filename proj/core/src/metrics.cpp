#include "bunet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "bunet/errors.hpp"

namespace bunet {

OverlapCounts overlap(const Tensor& pred, const Tensor& truth) {
  if (pred.numel() != truth.numel()) {
    throw ShapeError("mask sizes differ: " + shape_to_string(pred.shape()) + " vs " + shape_to_string(truth.shape()));
  }
  OverlapCounts c;
  const auto p = pred.data();
  const auto g = truth.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if ((p[i] != 0.0f && p[i] != 1.0f) || (g[i] != 0.0f && g[i] != 1.0f)) {
      throw ContractError("metrics require binary masks");
    }
    const bool a = p[i] == 1.0f;
    const bool b = g[i] == 1.0f;
    c.pred += a;
    c.truth += b;
    c.intersection += a && b;
  }
  return c;
}

double dice(const OverlapCounts& c) {
  const std::size_t denom = c.pred + c.truth;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(denom);
}

double iou(const OverlapCounts& c) {
  const std::size_t u = c.union_size();
  if (u == 0) return 1.0;
  return static_cast<double>(c.intersection) / static_cast<double>(u);
}

double dice(const Tensor& pred, const Tensor& truth) { return dice(overlap(pred, truth)); }
double iou(const Tensor& pred, const Tensor& truth) { return iou(overlap(pred, truth)); }

MetricsReport aggregate(std::vector<MetricsRow> rows, std::string method) {
  if (rows.empty()) throw DataError("cannot aggregate an empty metrics table");
  MetricsReport r;
  r.method = std::move(method);
  const auto n = static_cast<double>(rows.size());
  for (const auto& row : rows) {
    r.mean_dice += row.dice;
    r.mean_iou += row.iou;
  }
  r.mean_dice /= n;
  r.mean_iou /= n;
  double vd = 0.0;
  double vi = 0.0;
  for (const auto& row : rows) {
    vd += (row.dice - r.mean_dice) * (row.dice - r.mean_dice);
    vi += (row.iou - r.mean_iou) * (row.iou - r.mean_iou);
  }
  r.sd_dice = std::sqrt(vd / n);
  r.sd_iou = std::sqrt(vi / n);
  r.rows = std::move(rows);
  return r;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) rows.push_back({{"id", row.id}, {"dice", row.dice}, {"iou", row.iou}});
  const nlohmann::json j{{"method", report.method},
                         {"rows", rows},
                         {"aggregate",
                          {{"mean_dice", report.mean_dice},
                           {"sd_dice", report.sd_dice},
                           {"mean_iou", report.mean_iou},
                           {"sd_iou", report.sd_iou}}}};
  return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    for (const auto& row : j.at("rows")) {
      r.rows.push_back({row.at("id").get<std::string>(), row.at("dice").get<double>(), row.at("iou").get<double>()});
    }
    const auto& a = j.at("aggregate");
    r.mean_dice = a.at("mean_dice").get<double>();
    r.sd_dice = a.at("sd_dice").get<double>();
    r.mean_iou = a.at("mean_iou").get<double>();
    r.sd_iou = a.at("sd_iou").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metrics report: ") + e.what());
  }
}

std::string format_table(const std::vector<MetricsReport>& reports) {
  std::size_t width = 6;
  for (const auto& r : reports) width = std::max(width, r.method.size());
  auto cell = [](double mean, double sd) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%6.2f (+- %5.2f)", 100.0 * mean, 100.0 * sd);
    return std::string(buf);
  };
  std::ostringstream os;
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size(), ' '); };
  os << pad("Method") << " | " << "Dice% (+- SD)    " << " | " << "IoU% (+- SD)" << '\n';
  os << std::string(width, '-') << "-+-" << std::string(17, '-') << "-+-" << std::string(17, '-') << '\n';
  for (const auto& r : reports) {
    os << pad(r.method) << " | " << cell(r.mean_dice, r.sd_dice) << " | " << cell(r.mean_iou, r.sd_iou) << '\n';
  }
  return os.str();
}

}  // namespace bunet
