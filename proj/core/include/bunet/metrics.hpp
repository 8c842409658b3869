#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bunet/tensor.hpp"

namespace bunet {

struct OverlapCounts {
  std::size_t intersection = 0;
  std::size_t pred = 0;
  std::size_t truth = 0;

  std::size_t union_size() const noexcept { return pred + truth - intersection; }
};

/// Foreground pixel counts of two binary masks of equal size.
/// Throws ShapeError on size mismatch and ContractError on non-binary values.
OverlapCounts overlap(const Tensor& pred, const Tensor& truth);

/// 2|P n G| / (|P| + |G|); 1 when both masks are empty.
double dice(const OverlapCounts& c);
double dice(const Tensor& pred, const Tensor& truth);
/// |P n G| / |P u G|; 1 when both masks are empty.
double iou(const OverlapCounts& c);
double iou(const Tensor& pred, const Tensor& truth);

struct MetricsRow {
  std::string id;
  double dice = 0.0;
  double iou = 0.0;
};

struct MetricsReport {
  std::string method;
  std::vector<MetricsRow> rows;
  double mean_dice = 0.0;
  double sd_dice = 0.0;
  double mean_iou = 0.0;
  double sd_iou = 0.0;
};

/// Mean and population standard deviation over the rows. Throws DataError when empty.
MetricsReport aggregate(std::vector<MetricsRow> rows, std::string method);

/// Machine-readable report (JSON text).
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);

/// Aligned console table with one row per method:
///   Method | Dice% (+- SD) | IoU% (+- SD)
std::string format_table(const std::vector<MetricsReport>& reports);

}  // namespace bunet
