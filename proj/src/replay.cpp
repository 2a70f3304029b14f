#include "smoothtail/replay.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "smoothtail/rng.hpp"

namespace smoothtail {

using json = nlohmann::json;

std::vector<ScoredInstance> score_instances(const DetectionDataset& ds,
                                            std::span<const ForwardOutput> outputs) {
  if (outputs.size() != ds.images().size()) {
    throw std::invalid_argument("score_instances: one model output per image is required");
  }
  std::vector<ScoredInstance> scored;
  scored.reserve(ds.annotations().size());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const ImageRecord& rec = ds.images()[i];
    const ForwardOutput& out = outputs[i];
    if (static_cast<std::size_t>(out.class_logits.cols()) != ds.num_categories()) {
      throw std::invalid_argument("score_instances: model has " +
                                  std::to_string(out.class_logits.cols()) +
                                  " classes, dataset has " + std::to_string(ds.num_categories()));
    }
    std::vector<Box> pred_boxes;
    for (Eigen::Index q = 0; q < out.boxes.rows(); ++q) {
      pred_boxes.push_back(from_normalized({out.boxes(q, 0), out.boxes(q, 1), out.boxes(q, 2),
                                            out.boxes(q, 3)},
                                           rec.width, rec.height));
    }
    for (std::size_t idx : ds.annotations_of(rec.id)) {
      const Annotation& ann = ds.annotations()[idx];
      const int cls = ds.class_index(ann.category);
      double best = 0.0;
      for (std::size_t q = 0; q < pred_boxes.size(); ++q) {
        if (iou(pred_boxes[q], ann.bbox) < kScoreMatchIou) continue;
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(out.class_logits(q, cls))));
        best = std::max(best, p);
      }
      scored.push_back(ScoredInstance{ann.id, ann.image_id, ann.category, best});
    }
  }
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.annotation_id < b.annotation_id; });
  return scored;
}

std::vector<ScoredInstance> score_instances(const DetectorModel& model,
                                            const DetectionDataset& ds,
                                            std::span<const Image> images) {
  if (static_cast<std::size_t>(model.config().num_classes) != ds.num_categories()) {
    throw std::invalid_argument("score_instances: model/category table mismatch");
  }
  if (images.size() != ds.images().size()) {
    throw std::invalid_argument("score_instances: rendered images do not match the dataset");
  }
  std::vector<ForwardOutput> outputs;
  outputs.reserve(images.size());
  for (const auto& img : images) outputs.push_back(model.forward(img));
  return score_instances(ds, outputs);
}

std::vector<AnnotationId> select_exemplars(std::span<const ScoredInstance> scored, int quota,
                                           double tau) {
  if (quota <= 0) throw std::invalid_argument("select_exemplars: quota must be positive");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("select_exemplars: tau in [0, 1]");
  if (!scored.empty()) {
    const CategoryId c = scored.front().category;
    for (const auto& s : scored) {
      if (s.category != c) {
        throw std::invalid_argument("select_exemplars: instances span several categories");
      }
    }
  }
  std::vector<const ScoredInstance*> order;
  order.reserve(scored.size());
  for (const auto& s : scored) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](const ScoredInstance* a, const ScoredInstance* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->annotation_id < b->annotation_id;
  });

  const std::size_t limit = std::min<std::size_t>(quota, order.size());
  std::vector<AnnotationId> picked;
  std::vector<char> taken(order.size(), 0);
  std::set<ImageId> images_used;
  for (std::size_t i = 0; i < order.size() && picked.size() < limit; ++i) {
    if (!(order[i]->score > tau)) break;
    if (!images_used.insert(order[i]->image_id).second) continue;
    picked.push_back(order[i]->annotation_id);
    taken[i] = 1;
  }
  for (std::size_t i = 0; i < order.size() && picked.size() < limit; ++i) {
    if (taken[i]) continue;
    picked.push_back(order[i]->annotation_id);
  }
  return picked;
}

ReplayBudget head_dominant_budget() { return ReplayBudget{200, 30, 0.5}; }
ReplayBudget tail_dominant_budget() { return ReplayBudget{50, std::nullopt, 0.5}; }

ReplaySubset build_replay_subset(const DetectionDataset& ds, std::span<const ScoredInstance> scores,
                                 const CategoryPartition& partition, const ReplayBudget& budget) {
  for (const Quota& q : {budget.head, budget.tail}) {
    if (q && *q < 1) throw std::invalid_argument("replay budget quotas must be >= 1 or 'all'");
  }
  std::map<CategoryId, std::vector<ScoredInstance>> by_category;
  for (const auto& s : scores) {
    if (!ds.has_annotation(s.annotation_id)) {
      throw std::invalid_argument("score for unknown annotation " +
                                  std::to_string(s.annotation_id));
    }
    by_category[s.category].push_back(s);
  }
  ReplaySubset subset;
  for (auto& [category, list] : by_category) {
    const bool head = partition.head.count(category) != 0;
    if (!head && !partition.tail.count(category)) {
      throw std::invalid_argument("category " + std::to_string(category) +
                                  " is in neither head nor tail");
    }
    const Quota& quota = head ? budget.head : budget.tail;
    if (!quota) {
      for (const auto& s : list) subset.valid.insert(s.annotation_id);
    } else {
      for (AnnotationId id : select_exemplars(list, *quota, budget.tau)) subset.valid.insert(id);
    }
  }
  std::set<ImageId> images;
  for (AnnotationId id : subset.valid) images.insert(ds.annotation(id).image_id);
  subset.images.assign(images.begin(), images.end());
  for (ImageId id : subset.images) subset.repeat_factors[id] = 1.0;
  return subset;
}

ReplaySubset build_head_dominant(const DetectionDataset& ds,
                                 std::span<const ScoredInstance> scores,
                                 const CategoryPartition& partition, const ReplayBudget& budget) {
  if (partition.head.empty()) {
    throw std::invalid_argument("head-dominant replay needs at least one head category");
  }
  return build_replay_subset(ds, scores, partition, budget);
}

ReplaySubset build_tail_dominant(const DetectionDataset& ds,
                                 std::span<const ScoredInstance> scores,
                                 const CategoryPartition& partition, const ReplayBudget& budget) {
  if (partition.tail.empty()) {
    throw std::invalid_argument("tail-dominant replay needs at least one tail category");
  }
  return build_replay_subset(ds, scores, partition, budget);
}

std::map<CategoryId, int> valid_instance_counts(const DetectionDataset& ds,
                                                const ReplaySubset& subset) {
  std::map<CategoryId, int> counts;
  for (const auto& c : ds.categories()) counts[c.id] = 0;
  for (AnnotationId id : subset.valid) ++counts[ds.annotation(id).category];
  return counts;
}

double category_repeat_factor(double image_fraction, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("repeat factor threshold must lie in (0, 1]");
  }
  if (image_fraction <= 0.0) throw std::invalid_argument("image fraction must be positive");
  return std::max(1.0, std::sqrt(threshold / image_fraction));
}

namespace {

std::map<ImageId, std::set<CategoryId>> valid_categories_per_image(const DetectionDataset& ds,
                                                                   const ReplaySubset& subset) {
  std::map<ImageId, std::set<CategoryId>> out;
  for (AnnotationId id : subset.valid) {
    const Annotation& a = ds.annotation(id);
    out[a.image_id].insert(a.category);
  }
  return out;
}

}  // namespace

std::map<CategoryId, double> category_repeat_factors(const DetectionDataset& ds,
                                                     const ReplaySubset& subset, double threshold) {
  if (subset.images.empty()) throw std::invalid_argument("repeat factors of an empty subset");
  std::map<CategoryId, int> image_counts;
  for (const auto& [img, cats] : valid_categories_per_image(ds, subset)) {
    for (CategoryId c : cats) ++image_counts[c];
  }
  const double n = static_cast<double>(subset.images.size());
  std::map<CategoryId, double> factors;
  for (const auto& [c, count] : image_counts) {
    factors[c] = category_repeat_factor(count / n, threshold);
  }
  return factors;
}

std::map<ImageId, double> repeat_factors(const DetectionDataset& ds, const ReplaySubset& subset,
                                         double threshold) {
  const auto per_category = category_repeat_factors(ds, subset, threshold);
  const auto per_image = valid_categories_per_image(ds, subset);
  std::map<ImageId, double> factors;
  for (ImageId img : subset.images) {
    double r = 1.0;
    auto it = per_image.find(img);
    if (it != per_image.end()) {
      for (CategoryId c : it->second) r = std::max(r, per_category.at(c));
    }
    factors[img] = r;
  }
  return factors;
}

std::vector<ImageId> epoch_sampling_plan(const ReplaySubset& subset, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ImageId> plan;
  for (ImageId img : subset.images) {
    auto it = subset.repeat_factors.find(img);
    const double r = it == subset.repeat_factors.end() ? 1.0 : it->second;
    const double whole = std::floor(r);
    int copies = static_cast<int>(whole);
    if (rng.uniform() < r - whole) ++copies;
    plan.insert(plan.end(), copies, img);
  }
  rng.shuffle(std::span<ImageId>(plan));
  return plan;
}

void save_scores(std::span<const ScoredInstance> scores, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : scores) {
    out << json{{"annotation_id", s.annotation_id},
                {"image_id", s.image_id},
                {"category", s.category},
                {"score", s.score}}
               .dump()
        << '\n';
  }
}

std::vector<ScoredInstance> load_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<ScoredInstance> scores;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ScoredInstance s{j.at("annotation_id"), j.at("image_id"), j.at("category"), j.at("score")};
      if (!(s.score >= 0.0 && s.score <= 1.0)) throw std::runtime_error("score outside [0, 1]");
      scores.push_back(s);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return scores;
}

std::string subset_to_json(const ReplaySubset& subset) {
  json factors = json::array();
  for (ImageId img : subset.images) {
    auto it = subset.repeat_factors.find(img);
    factors.push_back({img, it == subset.repeat_factors.end() ? 1.0 : it->second});
  }
  return json{{"source", subset.source},
              {"valid_annotation_ids", subset.valid},
              {"repeat_factors", factors}}
      .dump();
}

ReplaySubset subset_from_json(const std::string& text) {
  const json j = json::parse(text);
  ReplaySubset s;
  s.source = j.at("source").get<std::string>();
  for (const auto& id : j.at("valid_annotation_ids")) s.valid.insert(id.get<AnnotationId>());
  for (const auto& entry : j.at("repeat_factors")) {
    const ImageId img = entry.at(0).get<ImageId>();
    const double r = entry.at(1).get<double>();
    if (!(r >= 1.0)) throw std::runtime_error("repeat factor below 1 for image " + std::to_string(img));
    s.images.push_back(img);
    s.repeat_factors[img] = r;
  }
  if (!std::is_sorted(s.images.begin(), s.images.end())) {
    throw std::runtime_error("replay subset images must be in ascending order");
  }
  return s;
}

void save_subset(const ReplaySubset& subset, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << subset_to_json(subset);
}

ReplaySubset load_subset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return subset_from_json(buffer.str());
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace smoothtail
