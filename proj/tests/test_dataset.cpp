#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "smoothtail/dataset.hpp"

using namespace smoothtail;

namespace {

std::vector<CategoryInfo> two_categories() {
  return {{1, "a", Glyph::kSquare, 0}, {2, "b", Glyph::kCircle, 1}};
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "smoothtail_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("constructor rejects broken invariants") {
  const std::vector<ImageRecord> images{{1, 32, 32, 7}};
  CHECK_NOTHROW(DetectionDataset(images, {{1, 1, 1, {0, 0, 4, 4}}}, two_categories()));
  CHECK_THROWS_AS(DetectionDataset(images, {{1, 9, 1, {0, 0, 4, 4}}}, two_categories()), DataError);
  CHECK_THROWS_AS(DetectionDataset(images, {{1, 1, 3, {0, 0, 4, 4}}}, two_categories()), DataError);
  CHECK_THROWS_AS(DetectionDataset(images, {{1, 1, 1, {4, 0, 4, 4}}}, two_categories()), DataError);
  CHECK_THROWS_AS(DetectionDataset(images, {{1, 1, 1, {0, 0, 40, 4}}}, two_categories()), DataError);
  CHECK_THROWS_AS(
      DetectionDataset(images, {{1, 1, 1, {0, 0, 4, 4}}, {1, 1, 2, {0, 0, 4, 4}}}, two_categories()),
      DataError);
}

TEST_CASE("image-level category counts") {
  SUBCASE("two instances in one image count once") {
    DetectionDataset ds({{1, 32, 32, 0}}, {{1, 1, 1, {0, 0, 4, 4}}, {2, 1, 1, {8, 8, 12, 12}}},
                        two_categories());
    const auto counts = count_images_per_category(ds);
    CHECK(counts.at(1) == 1);
    CHECK(counts.at(2) == 0);
  }
  SUBCASE("empty dataset gives zeros") {
    DetectionDataset ds({}, {}, two_categories());
    for (auto [c, n] : count_images_per_category(ds)) CHECK(n == 0);
  }
  SUBCASE("{a}, {a,b}, {b}") {
    DetectionDataset ds({{1, 32, 32, 0}, {2, 32, 32, 0}, {3, 32, 32, 0}},
                        {{1, 1, 1, {0, 0, 4, 4}},
                         {2, 2, 1, {0, 0, 4, 4}},
                         {3, 2, 2, {8, 8, 12, 12}},
                         {4, 3, 2, {0, 0, 4, 4}}},
                        two_categories());
    const auto counts = count_images_per_category(ds);
    CHECK(counts.at(1) == 2);
    CHECK(counts.at(2) == 2);
  }
}

TEST_CASE("head/tail partition") {
  const std::map<CategoryId, int> counts{{1, 100}, {2, 30}, {3, 5}};
  const auto p = partition_head_tail(counts, 30);
  CHECK(p.head == std::set<CategoryId>{1, 2});
  CHECK(p.tail == std::set<CategoryId>{3});

  const auto all_tail = partition_head_tail({{1, 10}, {2, 10}}, 100);
  CHECK(all_tail.head.empty());
  CHECK(all_tail.tail == std::set<CategoryId>{1, 2});
  CHECK(kDefaultHeadThreshold == 30);

  const auto ds = generate_shapeworld({.num_categories = 12, .num_images = 300, .seed = 4});
  for (int m : {1, 5, 30, 80, 1000}) {
    const auto part = partition_head_tail(ds, m);
    std::set<CategoryId> both;
    std::set_intersection(part.head.begin(), part.head.end(), part.tail.begin(), part.tail.end(),
                          std::inserter(both, both.end()));
    CHECK(both.empty());
    CHECK(part.head.size() + part.tail.size() == ds.num_categories());
  }
}

TEST_CASE("frequency groups") {
  const auto g = frequency_groups({{1, 5}, {2, 50}, {3, 500}});
  CHECK(g.rare == std::set<CategoryId>{1});
  CHECK(g.common == std::set<CategoryId>{2});
  CHECK(g.frequent == std::set<CategoryId>{3});
  CHECK(frequency_groups({{1, 10}}).common.count(1));
  CHECK(frequency_groups({{1, 100}}).common.count(1));
  CHECK(frequency_groups({{1, 101}}).frequent.count(1));
  CHECK_THROWS(frequency_groups({{1, 5}}, {50, 10}));
}

TEST_CASE("generator: uniform exponent spreads images evenly") {
  const auto ds = generate_shapeworld(
      {.num_categories = 2, .zipf_exponent = 0.0, .num_images = 10, .max_objects_per_image = 1, .seed = 1});
  const auto counts = count_images_per_category(ds);
  CHECK(counts.at(ds.categories()[0].id) == 5);
  CHECK(counts.at(ds.categories()[1].id) == 5);
}

TEST_CASE("generator: Zipf head/tail ratio") {
  const auto ds = generate_shapeworld({.num_categories = 40, .zipf_exponent = 1.2, .num_images = 4000, .seed = 11});
  const auto counts = count_images_per_category(ds);
  const double first = counts.at(ds.categories().front().id);
  const double last = counts.at(ds.categories().back().id);
  const double expected = std::pow(40.0, 1.2);
  CHECK(first / last > expected * 0.8);
  CHECK(first / last < expected * 1.25);
  // Monotone non-increasing with rank.
  int previous = 1 << 30;
  for (const auto& c : ds.categories()) {
    CHECK(counts.at(c.id) <= previous);
    previous = counts.at(c.id);
  }
}

TEST_CASE("generator: deterministic and distinct categories") {
  const ShapeWorldConfig cfg{.num_categories = 48, .num_images = 200, .seed = 3};
  const auto a = generate_shapeworld(cfg);
  const auto b = generate_shapeworld(cfg);
  CHECK(a == b);
  CHECK(render_image(a, a.images()[5].id).pixels == render_image(b, b.images()[5].id).pixels);
  std::set<std::pair<int, int>> looks;
  for (const auto& c : a.categories()) looks.insert({static_cast<int>(c.glyph), c.color});
  CHECK(looks.size() == 48);
  CHECK_THROWS_AS(generate_shapeworld({.num_categories = 49}), std::invalid_argument);
  CHECK_THROWS_AS(generate_shapeworld({.num_categories = 1}), std::invalid_argument);
}

TEST_CASE("generator: boxes inside image and pixels in range") {
  const auto ds = generate_shapeworld({.num_categories = 6, .num_images = 50, .seed = 2});
  for (const auto& a : ds.annotations()) {
    CHECK(a.bbox.valid());
    CHECK(a.bbox.x_min >= 0);
    CHECK(a.bbox.x_max <= 32);
  }
  const Image img = render_image(ds, ds.images()[0].id);
  CHECK(img.pixels.size() == 32u * 32u * 3u);
  for (float v : img.pixels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("annotation JSON round trip and errors") {
  const auto ds = generate_shapeworld({.num_categories = 5, .num_images = 40, .seed = 9});
  const auto path = temp_file("roundtrip.json");
  save_annotations(ds, path);
  CHECK(load_annotations(path) == ds);

  const std::string missing_image = R"({"images":[{"id":1,"width":32,"height":32}],
    "categories":[{"id":1,"name":"a"}],
    "annotations":[{"id":5,"image_id":2,"category_id":1,"bbox":[0,0,4,4]}],
    "bbox_format":"xyxy"})";
  CHECK_THROWS_AS(annotations_from_json(missing_image), DataError);

  const std::string inverted = R"({"images":[{"id":1,"width":32,"height":32}],
    "categories":[{"id":1,"name":"a"}],
    "annotations":[{"id":77,"image_id":1,"category_id":1,"bbox":[6,0,4,4]}],
    "bbox_format":"xyxy"})";
  try {
    annotations_from_json(inverted);
    FAIL("expected a validation error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("77") != std::string::npos);
  }
}

}  // TEST_SUITE
