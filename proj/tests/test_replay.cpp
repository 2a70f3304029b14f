#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "smoothtail/replay.hpp"

using namespace smoothtail;

namespace {

DetectionDataset one_object_dataset() {
  return DetectionDataset({{1, 32, 32, 0}}, {{10, 1, 1, {8, 8, 16, 16}}},
                          {{1, "a", Glyph::kSquare, 0}, {2, "b", Glyph::kCircle, 1}});
}

ForwardOutput output_with(const std::vector<std::pair<NormBox, double>>& preds, int classes,
                          int cls) {
  ForwardOutput out;
  out.boxes = Matrix::Zero(static_cast<Eigen::Index>(preds.size()), 4);
  out.class_logits = Matrix::Constant(static_cast<Eigen::Index>(preds.size()), classes, -10.0f);
  for (std::size_t q = 0; q < preds.size(); ++q) {
    for (int k = 0; k < 4; ++k) out.boxes(q, k) = static_cast<float>(preds[q].first[k]);
    const double p = preds[q].second;
    out.class_logits(q, cls) = static_cast<float>(std::log(p / (1 - p)));
  }
  return out;
}

std::vector<ScoredInstance> random_scores(const DetectionDataset& ds, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ScoredInstance> s;
  for (const auto& a : ds.annotations()) s.push_back({a.id, a.image_id, a.category, rng.uniform()});
  return s;
}

}  // namespace

TEST_SUITE("replay") {

TEST_CASE("instance scoring") {
  const auto ds = one_object_dataset();
  const NormBox gt = to_normalized({8, 8, 16, 16}, 32, 32);
  const NormBox far{0.85, 0.85, 0.2, 0.2};

  SUBCASE("max over overlapping correct-class predictions") {
    const ForwardOutput out = output_with({{gt, 0.9}, {gt, 0.6}, {far, 0.99}}, 2, 0);
    const auto s = score_instances(ds, std::vector<ForwardOutput>{out});
    REQUIRE(s.size() == 1);
    CHECK(s[0].score == doctest::Approx(0.9).epsilon(1e-6));
  }
  SUBCASE("no overlapping prediction gives 0") {
    const ForwardOutput out = output_with({{far, 0.99}}, 2, 0);
    CHECK(score_instances(ds, std::vector<ForwardOutput>{out})[0].score == doctest::Approx(0.0).epsilon(1e-4));
  }
  SUBCASE("wrong class counts only through its own logit") {
    const ForwardOutput out = output_with({{gt, 0.95}}, 2, 1);
    CHECK(score_instances(ds, std::vector<ForwardOutput>{out})[0].score < 1e-4);
  }
  SUBCASE("class table mismatch") {
    const ForwardOutput out = output_with({{gt, 0.9}}, 3, 0);
    CHECK_THROWS(score_instances(ds, std::vector<ForwardOutput>{out}));
  }
}

TEST_CASE("exemplar selection examples") {
  const std::vector<ScoredInstance> s{{1, 1, 5, 0.9}, {2, 1, 5, 0.8}, {3, 2, 5, 0.7}};
  CHECK(select_exemplars(s, 2, 0.5) == std::vector<AnnotationId>{1, 3});
  CHECK(select_exemplars(s, 3, 0.5) == std::vector<AnnotationId>{1, 3, 2});
  CHECK(select_exemplars(s, 10, 0.5).size() == 3);
  CHECK_THROWS(select_exemplars(s, 0, 0.5));
  const std::vector<ScoredInstance> mixed{{1, 1, 5, 0.9}, {2, 1, 6, 0.8}};
  CHECK_THROWS(select_exemplars(mixed, 1, 0.5));
}

TEST_CASE("exemplar selection matches the two-pass oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ScoredInstance> s;
    for (int i = 0; i < 500; ++i) {
      // Coarse scores force ties; few images force the diversity rule.
      const double score = std::round(rng.uniform() * 20.0) / 20.0;
      s.push_back({1000 + i, static_cast<ImageId>(rng.uniform_int(std::uint64_t{120})), 3, score});
    }
    const auto expected = oracle::two_pass_selection(s, 200, 0.5);
    CHECK(select_exemplars(s, 200, 0.5) == expected);
    rng.shuffle(std::span<ScoredInstance>(s));
    CHECK(select_exemplars(s, 200, 0.5) == expected);
  }
}

TEST_CASE("smooth-tail subsets on a Zipf dataset") {
  const auto ds = generate_shapeworld({.num_categories = 40, .zipf_exponent = 1.2, .num_images = 4000, .seed = 7});
  const auto scores = random_scores(ds, 5);
  const auto partition = partition_head_tail(ds, 30);
  REQUIRE_FALSE(partition.head.empty());
  REQUIRE_FALSE(partition.tail.empty());

  std::map<CategoryId, int> available;
  for (const auto& a : ds.annotations()) ++available[a.category];

  const ReplaySubset d_head = build_head_dominant(ds, scores, partition);
  const ReplaySubset d_tail = build_tail_dominant(ds, scores, partition);
  const auto head_counts = valid_instance_counts(ds, d_head);
  const auto tail_counts = valid_instance_counts(ds, d_tail);
  for (const auto& [c, n] : available) {
    const bool head = partition.head.count(c) != 0;
    CHECK(head_counts.at(c) == std::min(head ? 200 : 30, n));
    CHECK(tail_counts.at(c) == (head ? std::min(50, n) : n));
  }
  for (const auto& a : ds.annotations()) {
    if (partition.tail.count(a.category)) CHECK(d_tail.is_valid(a.id));
  }
  // Every valid annotation's image is included.
  for (AnnotationId id : d_head.valid) {
    CHECK(std::binary_search(d_head.images.begin(), d_head.images.end(), ds.annotation(id).image_id));
  }

  auto ratio = [](const std::map<CategoryId, int>& counts, const std::set<CategoryId>& cats) {
    int lo = 1 << 30, hi = 0;
    for (CategoryId c : cats) {
      lo = std::min(lo, counts.at(c));
      hi = std::max(hi, counts.at(c));
    }
    return static_cast<double>(hi) / lo;
  };
  CHECK(ratio(head_counts, partition.head) <= ratio(available, partition.head));

  CategoryPartition no_head{{}, partition.tail, 30};
  for (CategoryId c : partition.head) no_head.tail.insert(c);
  CHECK_THROWS(build_head_dominant(ds, scores, no_head));
}

TEST_CASE("repeat factors") {
  CHECK(category_repeat_factor(0.01, 0.01) == 1.0);
  CHECK(category_repeat_factor(0.0025, 0.01) == doctest::Approx(2.0));
  CHECK(category_repeat_factor(0.5, 0.01) == 1.0);
  CHECK_THROWS(category_repeat_factor(0.1, 0.0));

  // Four images: category 1 everywhere, category 2 in one image (f = 1/4).
  DetectionDataset ds({{1, 32, 32, 0}, {2, 32, 32, 0}, {3, 32, 32, 0}, {4, 32, 32, 0}},
                      {{1, 1, 1, {0, 0, 4, 4}},
                       {2, 2, 1, {0, 0, 4, 4}},
                       {3, 3, 1, {0, 0, 4, 4}},
                       {4, 4, 1, {0, 0, 4, 4}},
                       {5, 4, 2, {8, 8, 12, 12}}},
                      {{1, "a", Glyph::kSquare, 0}, {2, "b", Glyph::kCircle, 1}});
  ReplaySubset s;
  s.valid = {1, 2, 3, 4, 5};
  s.images = {1, 2, 3, 4};
  const auto per_cat = category_repeat_factors(ds, s, 0.5);
  CHECK(per_cat.at(1) == 1.0);
  CHECK(per_cat.at(2) == doctest::Approx(std::sqrt(2.0)));
  const auto per_image = repeat_factors(ds, s, 0.5);
  CHECK(per_image.at(1) == 1.0);
  CHECK(per_image.at(4) == doctest::Approx(std::sqrt(2.0)));

  // Masked annotations do not count.
  s.valid.erase(5);
  CHECK(repeat_factors(ds, s, 0.5).at(4) == 1.0);
  CHECK_THROWS(repeat_factors(ds, ReplaySubset{}, 0.5));
}

TEST_CASE("epoch sampling plan") {
  ReplaySubset s;
  for (ImageId i = 1; i <= 20; ++i) {
    s.images.push_back(i);
    s.repeat_factors[i] = 1.0;
  }
  auto plan = epoch_sampling_plan(s, 3);
  CHECK(plan == epoch_sampling_plan(s, 3));
  std::sort(plan.begin(), plan.end());
  CHECK(plan == s.images);

  ReplaySubset single;
  single.images = {42};
  single.repeat_factors[42] = 2.5;
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) total += epoch_sampling_plan(single, seed).size();
  CHECK(std::abs(total / 10000.0 - 2.5) < 0.05);
}

TEST_CASE("persistence round trips") {
  const auto dir = std::filesystem::temp_directory_path() / "smoothtail_tests";
  std::filesystem::create_directories(dir);
  const auto ds = generate_shapeworld({.num_categories = 6, .num_images = 60, .seed = 1});
  const auto scores = random_scores(ds, 2);
  save_scores(scores, dir / "scores.jsonl");
  CHECK(load_scores(dir / "scores.jsonl") == scores);

  ReplaySubset d = build_tail_dominant(ds, scores, partition_head_tail(ds, 10), {5, std::nullopt, 0.5});
  d.repeat_factors = repeat_factors(ds, d, 0.3);
  d.source = "train.json";
  save_subset(d, dir / "subset.json");
  CHECK(load_subset(dir / "subset.json") == d);
  CHECK_THROWS(subset_from_json(R"({"source":"x","valid_annotation_ids":[1],"repeat_factors":[[1,0.5]]})"));
}

}  // TEST_SUITE
