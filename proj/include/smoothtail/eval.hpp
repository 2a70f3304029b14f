#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "smoothtail/dataset.hpp"
#include "smoothtail/detector.hpp"

namespace smoothtail {

struct Detection {
  ImageId image_id = 0;
  CategoryId category = 0;
  Box bbox;
  double score = 0.0;
};

// Where the precision/recall curve starts before the 101-point sampling.
//   kUnitStart: the curve is anchored at (recall 0, precision 1) whenever the
//     category has at least one true positive, so the recall-0 sample reads 1.
//   kCocoReference: no anchor; identical to the pycocotools accumulation.
enum class PrCurveStart { kUnitStart, kCocoReference };

std::vector<double> default_iou_thresholds();  // 0.50, 0.55, ..., 0.95

struct ApResult {
  // Only categories with at least one ground-truth instance appear.
  std::map<CategoryId, double> per_category;
  std::map<CategoryId, std::vector<double>> per_threshold;
};

ApResult average_precision(std::span<const Detection> detections,
                           std::span<const Annotation> ground_truth,
                           const std::vector<double>& iou_thresholds = default_iou_thresholds(),
                           PrCurveStart start = PrCurveStart::kUnitStart);

struct MetricsTable {
  std::map<CategoryId, double> per_category;
  double ap = 0.0;  // AP^b, mean over all evaluated categories
  std::optional<double> ap_rare;
  std::optional<double> ap_common;
  std::optional<double> ap_frequent;
};

MetricsTable grouped_metrics(const std::map<CategoryId, double>& per_category_ap,
                             const FrequencyGroups& groups);

/// Every (query, class) pair becomes a detection scored by its sigmoid
/// probability; boxes are clipped to the image.
std::vector<Detection> detections_from_output(const ForwardOutput& out, const ImageRecord& image,
                                              const std::vector<CategoryId>& class_ids);

std::vector<Detection> detect_all(const DetectorModel& model, const DetectionDataset& ds,
                                  std::span<const Image> images);

MetricsTable evaluate(const DetectorModel& model, const DetectionDataset& ds,
                      std::span<const Image> images, const FrequencyGroups& groups,
                      PrCurveStart start = PrCurveStart::kUnitStart);

}  // namespace smoothtail
