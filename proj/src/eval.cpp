#include "smoothtail/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace smoothtail {

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct CategoryData {
  std::vector<const Detection*> dets;
  std::map<ImageId, std::vector<const Annotation*>> gts;
  int num_gt = 0;
};

double ap_at_threshold(const CategoryData& data, double threshold, PrCurveStart start) {
  std::map<ImageId, std::vector<char>> matched;
  for (const auto& [img, list] : data.gts) matched[img].assign(list.size(), 0);

  const std::size_t n = data.dets.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Detection& d = *data.dets[i];
    int best = -1;
    double best_iou = std::min(threshold, 1.0 - 1e-10);
    auto it = data.gts.find(d.image_id);
    if (it != data.gts.end()) {
      auto& used = matched[d.image_id];
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (used[g]) continue;
        const double overlap = iou(d.bbox, it->second[g]->bbox);
        if (overlap < best_iou) continue;
        best_iou = overlap;
        best = static_cast<int>(g);
      }
      if (best >= 0) used[best] = 1;
    }
    (best >= 0 ? tp : fp) += 1;
    recall[i] = static_cast<double>(tp) / data.num_gt;
    precision[i] = static_cast<double>(tp) / (tp + fp);
  }
  if (start == PrCurveStart::kUnitStart) {
    if (tp == 0) return 0.0;
    recall.insert(recall.begin(), 0.0);
    precision.insert(precision.begin(), 1.0);
  }
  // Monotone precision envelope.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto pos = std::lower_bound(recall.begin(), recall.end(), r) - recall.begin();
    if (pos < static_cast<std::ptrdiff_t>(precision.size())) sum += precision[pos];
  }
  return sum / 101.0;
}

}  // namespace

ApResult average_precision(std::span<const Detection> detections,
                           std::span<const Annotation> ground_truth,
                           const std::vector<double>& iou_thresholds, PrCurveStart start) {
  if (iou_thresholds.empty()) throw std::invalid_argument("need at least one IoU threshold");
  std::map<CategoryId, CategoryData> data;
  for (const auto& a : ground_truth) {
    auto& cd = data[a.category];
    cd.gts[a.image_id].push_back(&a);
    ++cd.num_gt;
  }
  for (const auto& d : detections) {
    auto it = data.find(d.category);
    if (it != data.end()) it->second.dets.push_back(&d);
  }
  ApResult result;
  for (auto& [category, cd] : data) {
    // Descending score; ties resolved by image id, then input order.
    std::stable_sort(cd.dets.begin(), cd.dets.end(), [](const Detection* a, const Detection* b) {
      if (a->score != b->score) return a->score > b->score;
      return a->image_id < b->image_id;
    });
    std::vector<double> aps;
    for (double t : iou_thresholds) aps.push_back(ap_at_threshold(cd, t, start));
    result.per_category[category] = std::accumulate(aps.begin(), aps.end(), 0.0) / aps.size();
    result.per_threshold[category] = std::move(aps);
  }
  return result;
}

MetricsTable grouped_metrics(const std::map<CategoryId, double>& per_category_ap,
                             const FrequencyGroups& groups) {
  MetricsTable m;
  m.per_category = per_category_ap;
  auto mean_of = [&](const std::set<CategoryId>* group) -> std::optional<double> {
    double sum = 0.0;
    int n = 0;
    for (const auto& [c, ap] : per_category_ap) {
      if (group && !group->count(c)) continue;
      sum += ap;
      ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
  };
  m.ap = mean_of(nullptr).value_or(0.0);
  m.ap_rare = mean_of(&groups.rare);
  m.ap_common = mean_of(&groups.common);
  m.ap_frequent = mean_of(&groups.frequent);
  return m;
}

std::vector<Detection> detections_from_output(const ForwardOutput& out, const ImageRecord& image,
                                              const std::vector<CategoryId>& class_ids) {
  if (static_cast<std::size_t>(out.class_logits.cols()) != class_ids.size()) {
    throw std::invalid_argument("detections: class table does not match model output");
  }
  std::vector<Detection> dets;
  dets.reserve(static_cast<std::size_t>(out.class_logits.size()));
  for (Eigen::Index q = 0; q < out.boxes.rows(); ++q) {
    const NormBox nb{out.boxes(q, 0), out.boxes(q, 1), out.boxes(q, 2), out.boxes(q, 3)};
    Box b = from_normalized(nb, image.width, image.height);
    b.x_min = std::clamp(b.x_min, 0.0, double(image.width));
    b.x_max = std::clamp(b.x_max, 0.0, double(image.width));
    b.y_min = std::clamp(b.y_min, 0.0, double(image.height));
    b.y_max = std::clamp(b.y_max, 0.0, double(image.height));
    if (!b.valid()) continue;
    for (Eigen::Index c = 0; c < out.class_logits.cols(); ++c) {
      const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(out.class_logits(q, c))));
      dets.push_back(Detection{image.id, class_ids[c], b, score});
    }
  }
  return dets;
}

std::vector<Detection> detect_all(const DetectorModel& model, const DetectionDataset& ds,
                                  std::span<const Image> images) {
  if (images.size() != ds.images().size()) {
    throw std::invalid_argument("detect_all: rendered images do not match the dataset");
  }
  const std::vector<CategoryId> class_ids = ds.category_ids();
  std::vector<Detection> all;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto dets = detections_from_output(model.forward(images[i]), ds.images()[i], class_ids);
    all.insert(all.end(), dets.begin(), dets.end());
  }
  return all;
}

MetricsTable evaluate(const DetectorModel& model, const DetectionDataset& ds,
                      std::span<const Image> images, const FrequencyGroups& groups,
                      PrCurveStart start) {
  const auto dets = detect_all(model, ds, images);
  const ApResult ap = average_precision(dets, ds.annotations(), default_iou_thresholds(), start);
  return grouped_metrics(ap.per_category, groups);
}

}  // namespace smoothtail
