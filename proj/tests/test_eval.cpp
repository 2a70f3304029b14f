#include <algorithm>

#include "doctest.h"
#include "oracles.hpp"
#include "smoothtail/eval.hpp"

using namespace smoothtail;

namespace {

constexpr CategoryId kCat = 1;

double ap_at(const std::vector<Detection>& dets, const std::vector<Annotation>& gts, double t,
             PrCurveStart start = PrCurveStart::kUnitStart) {
  return average_precision(dets, gts, {t}, start).per_category.at(kCat);
}

// Box of IoU 0.9 with {0, 0, 10, 10}.
const Box kNearGt{0, 0, 10, 9};
const Box kFar{20, 20, 30, 30};

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("exact detections give AP 1, none give 0") {
  const std::vector<Annotation> gts{{1, 1, kCat, {0, 0, 10, 10}}, {2, 2, kCat, {5, 5, 15, 12}}};
  std::vector<Detection> dets;
  for (const auto& g : gts) dets.push_back({g.image_id, g.category, g.bbox, 1.0});
  CHECK(average_precision(dets, gts).per_category.at(kCat) == doctest::Approx(1.0));
  CHECK(average_precision({}, gts).per_category.at(kCat) == 0.0);
  CHECK(average_precision({}, gts, default_iou_thresholds(), PrCurveStart::kCocoReference)
            .per_category.at(kCat) == 0.0);
}

TEST_CASE("hand-traced fixtures") {
  const std::vector<Annotation> one{{1, 1, kCat, {0, 0, 10, 10}}};

  SUBCASE("correct detection ranked first") {
    const std::vector<Detection> dets{{1, kCat, kNearGt, 0.9}, {1, kCat, kFar, 0.8}};
    CHECK(ap_at(dets, one, 0.5) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("false detection ranked first") {
    const std::vector<Detection> dets{{1, kCat, kNearGt, 0.8}, {1, kCat, kFar, 0.9}};
    CHECK(std::abs(ap_at(dets, one, 0.5) - 0.50495) < 1e-5);
    CHECK(std::abs(ap_at(dets, one, 0.5) - 51.0 / 101.0) < 1e-12);
    CHECK(ap_at(dets, one, 0.5, PrCurveStart::kCocoReference) == doctest::Approx(0.5));
  }
  SUBCASE("two GT: TP, FP, TP") {
    const std::vector<Annotation> two{{1, 1, kCat, {0, 0, 10, 10}}, {2, 1, kCat, {20, 0, 30, 10}}};
    const std::vector<Detection> dets{
        {1, kCat, {0, 0, 10, 10}, 0.9}, {1, kCat, {0, 20, 10, 30}, 0.8}, {1, kCat, {20, 0, 30, 10}, 0.7}};
    const double expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    CHECK(ap_at(dets, two, 0.5) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(ap_at(dets, two, 0.5, PrCurveStart::kCocoReference) == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("three GT: FP, TP, TP, FP") {
    const std::vector<Annotation> three{
        {1, 1, kCat, {0, 0, 10, 10}}, {2, 1, kCat, {20, 0, 30, 10}}, {3, 2, kCat, {0, 0, 8, 8}}};
    const std::vector<Detection> dets{{1, kCat, {0, 20, 10, 30}, 0.95},
                                      {1, kCat, {0, 0, 10, 10}, 0.9},
                                      {2, kCat, {0, 0, 8, 8}, 0.8},
                                      {2, kCat, {20, 20, 28, 28}, 0.7}};
    CHECK(ap_at(dets, three, 0.5) == doctest::Approx(45.0 / 101.0).epsilon(1e-12));
    CHECK(ap_at(dets, three, 0.5, PrCurveStart::kCocoReference) ==
          doctest::Approx((67.0 * 2.0 / 3.0) / 101.0).epsilon(1e-12));
  }
  SUBCASE("IoU 0.72 passes five of ten thresholds") {
    const std::vector<Detection> dets{{1, kCat, {0, 0, 10, 7.2}, 0.9}};
    const auto r = average_precision(dets, one);
    CHECK(r.per_category.at(kCat) == doctest::Approx(0.5));
    CHECK(r.per_threshold.at(kCat).size() == 10);
  }
  SUBCASE("detections in images without GT are false positives") {
    const std::vector<Detection> dets{{7, kCat, {0, 0, 10, 10}, 0.9}, {1, kCat, {0, 0, 10, 10}, 0.5}};
    CHECK(ap_at(dets, one, 0.5, PrCurveStart::kCocoReference) == doctest::Approx(0.5));
  }
  SUBCASE("categories without GT are excluded") {
    const std::vector<Detection> dets{{1, 99, {0, 0, 10, 10}, 0.9}};
    const auto r = average_precision(dets, one);
    CHECK(r.per_category.count(99) == 0);
    CHECK(r.per_category.at(kCat) == 0.0);
  }
}

TEST_CASE("random fixtures: oracle agreement and monotonicity") {
  Rng rng(2024);
  auto random_box = [&] {
    const double x = rng.uniform(0, 12), y = rng.uniform(0, 12);
    return Box{x, y, x + rng.uniform(3, 8), y + rng.uniform(3, 8)};
  };
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Annotation> gts;
    const int n_gt = 1 + static_cast<int>(rng.uniform_int(std::uint64_t{3}));
    for (int g = 0; g < n_gt; ++g) {
      gts.push_back({g + 1, 1 + static_cast<ImageId>(rng.uniform_int(std::uint64_t{2})), kCat, random_box()});
    }
    std::vector<Detection> dets;
    const int n_det = static_cast<int>(rng.uniform_int(std::uint64_t{5}));
    for (int d = 0; d < n_det; ++d) {
      // Half the detections are jittered copies of a GT box.
      Box b = random_box();
      ImageId img = 1 + static_cast<ImageId>(rng.uniform_int(std::uint64_t{2}));
      if (rng.uniform() < 0.5) {
        const Annotation& g = gts[rng.uniform_int(gts.size())];
        const double j = rng.uniform(0, 1.5);
        b = {g.bbox.x_min + j, g.bbox.y_min, g.bbox.x_max + j, g.bbox.y_max};
        img = g.image_id;
      }
      dets.push_back({img, kCat, b, rng.uniform()});
    }

    const auto thresholds = default_iou_thresholds();
    const ApResult r = average_precision(dets, gts);
    const ApResult coco = average_precision(dets, gts, thresholds, PrCurveStart::kCocoReference);
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      CHECK(r.per_threshold.at(kCat)[i] ==
            doctest::Approx(oracle::reference_ap(dets, gts, thresholds[i], true)).epsilon(1e-12));
      CHECK(coco.per_threshold.at(kCat)[i] ==
            doctest::Approx(oracle::reference_ap(dets, gts, thresholds[i], false)).epsilon(1e-12));
      if (i > 0) CHECK(r.per_threshold.at(kCat)[i] <= r.per_threshold.at(kCat)[i - 1] + 1e-12);
    }

    // A top-scored exact copy of a GT that no detection overlaps never lowers AP. A copy of an
    // already-matched GT can: it takes the match and pushes the old TP down as a FP.
    for (const Annotation& g : gts) {
      const bool covered = std::any_of(dets.begin(), dets.end(), [&](const Detection& d) {
        return d.image_id == g.image_id && iou(d.bbox, g.bbox) >= 0.5;
      });
      if (covered) continue;
      auto with_copy = dets;
      with_copy.push_back({g.image_id, kCat, g.bbox, 2.0});
      const ApResult more_r = average_precision(with_copy, gts);
      for (std::size_t i = 0; i < thresholds.size(); ++i) {
        CHECK(more_r.per_threshold.at(kCat)[i] >= r.per_threshold.at(kCat)[i] - 1e-12);
      }
      break;
    }

    // A lowest-scored detection in an image without GT cannot change interpolated precision.
    auto more = dets;
    more.push_back({99, kCat, random_box(), -1.0});
    CHECK(average_precision(more, gts).per_category.at(kCat) == r.per_category.at(kCat));

    // Input order does not matter (scores are distinct almost surely).
    auto shuffled = dets;
    rng.shuffle(std::span<Detection>(shuffled));
    CHECK(average_precision(shuffled, gts).per_category.at(kCat) == r.per_category.at(kCat));
  }
}

TEST_CASE("grouped metrics") {
  FrequencyGroups groups{{1}, {2}, {3}};
  const auto equal = grouped_metrics({{1, 0.4}, {2, 0.4}, {3, 0.4}}, groups);
  CHECK(equal.ap == doctest::Approx(0.4));
  CHECK(*equal.ap_rare == doctest::Approx(0.4));
  CHECK(*equal.ap_common == doctest::Approx(0.4));
  CHECK(*equal.ap_frequent == doctest::Approx(0.4));

  const auto m = grouped_metrics({{10, 0.2}, {20, 0.6}}, FrequencyGroups{{10}, {}, {20}});
  CHECK(*m.ap_rare == doctest::Approx(0.2));
  CHECK(*m.ap_frequent == doctest::Approx(0.6));
  CHECK(m.ap == doctest::Approx(0.4));
  CHECK_FALSE(m.ap_common.has_value());
}

}  // TEST_SUITE
