#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "smoothtail/dataset.hpp"
#include "smoothtail/detector.hpp"

namespace smoothtail {

struct ScoredInstance {
  AnnotationId annotation_id = 0;
  ImageId image_id = 0;
  CategoryId category = 0;
  double score = 0.0;

  friend bool operator==(const ScoredInstance&, const ScoredInstance&) = default;
};

inline constexpr double kScoreMatchIou = 0.5;

/// One entry per annotation: the highest probability of the annotation's own
/// class among predictions whose box overlaps it at IoU >= 0.5, else 0.
/// `outputs` are the model outputs for ds.images() in order.
std::vector<ScoredInstance> score_instances(const DetectionDataset& ds,
                                            std::span<const ForwardOutput> outputs);
std::vector<ScoredInstance> score_instances(const DetectorModel& model,
                                            const DetectionDataset& ds,
                                            std::span<const Image> images);

/// Confidence-guided selection for a single category. Phase one scans
/// instances with score > tau in descending score and takes at most one per
/// image; phase two backfills from the remainder in descending score. Ties
/// are broken by ascending annotation id.
std::vector<AnnotationId> select_exemplars(std::span<const ScoredInstance> scored, int quota,
                                           double tau = 0.5);

// std::nullopt means "all instances".
using Quota = std::optional<int>;

struct ReplayBudget {
  Quota head;
  Quota tail;
  double tau = 0.5;
};

ReplayBudget head_dominant_budget();  // 200 per head category, 30 per tail category
ReplayBudget tail_dominant_budget();  // 50 per head category, every tail instance

struct ReplaySubset {
  std::string source;
  std::set<AnnotationId> valid;
  std::vector<ImageId> images;  // ascending
  std::map<ImageId, double> repeat_factors;

  bool is_valid(AnnotationId id) const { return valid.count(id) != 0; }
  friend bool operator==(const ReplaySubset&, const ReplaySubset&) = default;
};

ReplaySubset build_replay_subset(const DetectionDataset& ds, std::span<const ScoredInstance> scores,
                                 const CategoryPartition& partition, const ReplayBudget& budget);
ReplaySubset build_head_dominant(const DetectionDataset& ds,
                                 std::span<const ScoredInstance> scores,
                                 const CategoryPartition& partition,
                                 const ReplayBudget& budget = head_dominant_budget());
ReplaySubset build_tail_dominant(const DetectionDataset& ds,
                                 std::span<const ScoredInstance> scores,
                                 const CategoryPartition& partition,
                                 const ReplayBudget& budget = tail_dominant_budget());

/// Valid-instance counts per category (every dataset category present).
std::map<CategoryId, int> valid_instance_counts(const DetectionDataset& ds,
                                                const ReplaySubset& subset);

inline constexpr double kDefaultRfsThreshold = 0.001;

double category_repeat_factor(double image_fraction, double threshold);

/// r(c) = max(1, sqrt(t / f(c))), f(c) = fraction of subset images with a
/// valid instance of c. Categories without valid instances are omitted.
std::map<CategoryId, double> category_repeat_factors(const DetectionDataset& ds,
                                                     const ReplaySubset& subset, double threshold);
/// r(I) = max over the categories of I's valid instances.
std::map<ImageId, double> repeat_factors(const DetectionDataset& ds, const ReplaySubset& subset,
                                         double threshold);

/// floor(r) copies of every image plus one more with probability frac(r),
/// shuffled. Missing factors count as 1.
std::vector<ImageId> epoch_sampling_plan(const ReplaySubset& subset, std::uint64_t seed);

// ---- persistence ----
void save_scores(std::span<const ScoredInstance> scores, const std::filesystem::path& path);
std::vector<ScoredInstance> load_scores(const std::filesystem::path& path);
std::string subset_to_json(const ReplaySubset& subset);
ReplaySubset subset_from_json(const std::string& text);
void save_subset(const ReplaySubset& subset, const std::filesystem::path& path);
ReplaySubset load_subset(const std::filesystem::path& path);

}  // namespace smoothtail
