#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoothtail/box.hpp"

namespace smoothtail {

using CategoryId = int;
using ImageId = std::int64_t;
using AnnotationId = std::int64_t;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Glyph { kSquare, kCircle, kTriangle, kCross, kRing, kDiamond };
inline constexpr int kNumGlyphs = 6;
inline constexpr int kNumColors = 8;

const char* glyph_name(Glyph g);
const char* color_name(int color);

struct CategoryInfo {
  CategoryId id = 0;
  std::string name;
  Glyph glyph = Glyph::kSquare;
  int color = 0;

  friend bool operator==(const CategoryInfo&, const CategoryInfo&) = default;
};

struct ImageRecord {
  ImageId id = 0;
  int width = 0;
  int height = 0;
  std::uint64_t render_seed = 0;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct Annotation {
  AnnotationId id = 0;
  ImageId image_id = 0;
  CategoryId category = 0;
  Box bbox;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

// Immutable after construction; the constructor validates every invariant
// (ids unique, references resolve, boxes non-degenerate and inside the image).
class DetectionDataset {
 public:
  DetectionDataset() = default;
  DetectionDataset(std::vector<ImageRecord> images, std::vector<Annotation> annotations,
                   std::vector<CategoryInfo> categories);

  const std::vector<ImageRecord>& images() const { return images_; }
  const std::vector<Annotation>& annotations() const { return annotations_; }
  const std::vector<CategoryInfo>& categories() const { return categories_; }
  std::size_t num_categories() const { return categories_.size(); }

  const ImageRecord& image(ImageId id) const;
  const Annotation& annotation(AnnotationId id) const;
  bool has_annotation(AnnotationId id) const { return annotation_index_.count(id) != 0; }
  // Indices into annotations(), in file order.
  const std::vector<std::size_t>& annotations_of(ImageId id) const;
  // Position of a category in categories(); the model's class index.
  int class_index(CategoryId id) const;
  std::vector<CategoryId> category_ids() const;

  friend bool operator==(const DetectionDataset& a, const DetectionDataset& b) {
    return a.images_ == b.images_ && a.annotations_ == b.annotations_ &&
           a.categories_ == b.categories_;
  }

 private:
  std::vector<ImageRecord> images_;
  std::vector<Annotation> annotations_;
  std::vector<CategoryInfo> categories_;
  std::map<ImageId, std::size_t> image_index_;
  std::map<AnnotationId, std::size_t> annotation_index_;
  std::map<ImageId, std::vector<std::size_t>> by_image_;
  std::map<CategoryId, int> class_index_;
};

struct ShapeWorldConfig {
  int num_categories = 40;
  double zipf_exponent = 1.2;
  int num_images = 4000;
  int image_size = 32;
  int max_objects_per_image = 2;
  int min_glyph = 8;
  int max_glyph = 14;
  std::uint64_t seed = 0;
  // Offset for image/annotation ids, so train and val splits never collide.
  std::int64_t first_id = 1;
};

// Category c (0-based rank) receives an image share proportional to
// (c + 1)^-exponent. Deterministic in config.seed.
DetectionDataset generate_shapeworld(const ShapeWorldConfig& config);

// Row-major RGB, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // height * width * 3

  float at(int y, int x, int channel) const { return pixels[(y * width + x) * 3 + channel]; }
};

Image render_image(const DetectionDataset& ds, ImageId id);
std::vector<Image> render_all(const DetectionDataset& ds);

// Number of images containing at least one instance of each category.
std::map<CategoryId, int> count_images_per_category(const DetectionDataset& ds);

struct CategoryPartition {
  std::set<CategoryId> head;
  std::set<CategoryId> tail;
  int threshold = 30;
};

inline constexpr int kDefaultHeadThreshold = 30;

// Head: categories with >= threshold images.
CategoryPartition partition_head_tail(const std::map<CategoryId, int>& counts, int threshold);
CategoryPartition partition_head_tail(const DetectionDataset& ds,
                                      int threshold = kDefaultHeadThreshold);

struct FrequencyThresholds {
  int rare_below = 10;       // rare: count < rare_below
  int frequent_above = 100;  // frequent: count > frequent_above
};

struct FrequencyGroups {
  std::set<CategoryId> rare;
  std::set<CategoryId> common;
  std::set<CategoryId> frequent;
};

FrequencyGroups frequency_groups(const std::map<CategoryId, int>& counts,
                                 FrequencyThresholds thresholds = {});
FrequencyGroups frequency_groups(const DetectionDataset& ds, FrequencyThresholds thresholds = {});

// COCO-style JSON with `images`, `annotations`, `categories` arrays.
void save_annotations(const DetectionDataset& ds, const std::filesystem::path& path);
DetectionDataset load_annotations(const std::filesystem::path& path);
std::string annotations_to_json(const DetectionDataset& ds);
DetectionDataset annotations_from_json(const std::string& text);

}  // namespace smoothtail
