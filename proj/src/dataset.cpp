#include "smoothtail/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "smoothtail/rng.hpp"

namespace smoothtail {

namespace {

using json = nlohmann::json;

constexpr std::array<const char*, kNumGlyphs> kGlyphNames = {"square", "circle", "triangle",
                                                            "cross",  "ring",   "diamond"};

constexpr std::array<const char*, kNumColors> kColorNames = {
    "red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange"};

constexpr std::array<std::array<float, 3>, kNumColors> kColorRgb = {{
    {0.90f, 0.15f, 0.15f},
    {0.15f, 0.80f, 0.20f},
    {0.20f, 0.30f, 0.95f},
    {0.95f, 0.90f, 0.15f},
    {0.90f, 0.20f, 0.85f},
    {0.15f, 0.85f, 0.90f},
    {0.95f, 0.95f, 0.95f},
    {1.00f, 0.55f, 0.10f},
}};

// Rank k -> (glyph, color). For a fixed glyph the colors cycle through all
// eight, so every pair is distinct and neighbouring ranks differ in glyph.
CategoryInfo make_category(int rank) {
  CategoryInfo info;
  info.id = rank + 1;
  info.glyph = static_cast<Glyph>(rank % kNumGlyphs);
  info.color = (rank / kNumGlyphs + 3 * (rank % kNumGlyphs)) % kNumColors;
  info.name = std::string(kColorNames[info.color]) + "_" + kGlyphNames[rank % kNumGlyphs];
  return info;
}

bool inside_glyph(Glyph glyph, double u, double v) {
  switch (glyph) {
    case Glyph::kSquare:
      return true;
    case Glyph::kCircle:
      return u * u + v * v <= 1.0;
    case Glyph::kTriangle:
      return std::abs(u) <= (v + 1.0) * 0.5;
    case Glyph::kCross:
      return std::abs(u) <= 0.33 || std::abs(v) <= 0.33;
    case Glyph::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case Glyph::kDiamond:
      return std::abs(u) + std::abs(v) <= 1.0;
  }
  return false;
}

// Largest-remainder apportionment of `total` slots by Zipf weights.
std::vector<int> zipf_quotas(int num_categories, double exponent, int total) {
  std::vector<double> weights(num_categories);
  for (int k = 0; k < num_categories; ++k) weights[k] = std::pow(k + 1.0, -exponent);
  const double norm = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<int> quotas(num_categories);
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (int k = 0; k < num_categories; ++k) {
    const double exact = total * weights[k] / norm;
    quotas[k] = static_cast<int>(std::floor(exact));
    assigned += quotas[k];
    remainders.emplace_back(exact - quotas[k], k);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; assigned < total; ++i, ++assigned) ++quotas[remainders[i].second];
  return quotas;
}

}  // namespace

const char* glyph_name(Glyph g) { return kGlyphNames[static_cast<int>(g)]; }
const char* color_name(int color) { return kColorNames.at(color); }

DetectionDataset::DetectionDataset(std::vector<ImageRecord> images,
                                   std::vector<Annotation> annotations,
                                   std::vector<CategoryInfo> categories)
    : images_(std::move(images)),
      annotations_(std::move(annotations)),
      categories_(std::move(categories)) {
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    if (!class_index_.emplace(categories_[i].id, static_cast<int>(i)).second) {
      throw DataError("duplicate category id " + std::to_string(categories_[i].id));
    }
  }
  for (std::size_t i = 0; i < images_.size(); ++i) {
    const auto& img = images_[i];
    if (img.width <= 0 || img.height <= 0) {
      throw DataError("image " + std::to_string(img.id) + " has non-positive size");
    }
    if (!image_index_.emplace(img.id, i).second) {
      throw DataError("duplicate image id " + std::to_string(img.id));
    }
    by_image_[img.id];
  }
  for (std::size_t i = 0; i < annotations_.size(); ++i) {
    const auto& ann = annotations_[i];
    const std::string tag = "annotation " + std::to_string(ann.id);
    if (!annotation_index_.emplace(ann.id, i).second) {
      throw DataError("duplicate annotation id " + std::to_string(ann.id));
    }
    auto it = image_index_.find(ann.image_id);
    if (it == image_index_.end()) {
      throw DataError(tag + " references missing image " + std::to_string(ann.image_id));
    }
    if (!class_index_.count(ann.category)) {
      throw DataError(tag + " references unknown category " + std::to_string(ann.category));
    }
    if (!(ann.bbox.x_min < ann.bbox.x_max) || !(ann.bbox.y_min < ann.bbox.y_max)) {
      throw DataError(tag + " has a degenerate box (min >= max)");
    }
    const auto& img = images_[it->second];
    if (ann.bbox.x_min < 0 || ann.bbox.y_min < 0 || ann.bbox.x_max > img.width ||
        ann.bbox.y_max > img.height) {
      throw DataError(tag + " box lies outside image " + std::to_string(img.id));
    }
    by_image_[ann.image_id].push_back(i);
  }
}

const ImageRecord& DetectionDataset::image(ImageId id) const {
  auto it = image_index_.find(id);
  if (it == image_index_.end()) throw DataError("unknown image id " + std::to_string(id));
  return images_[it->second];
}

const Annotation& DetectionDataset::annotation(AnnotationId id) const {
  auto it = annotation_index_.find(id);
  if (it == annotation_index_.end()) {
    throw DataError("unknown annotation id " + std::to_string(id));
  }
  return annotations_[it->second];
}

const std::vector<std::size_t>& DetectionDataset::annotations_of(ImageId id) const {
  auto it = by_image_.find(id);
  if (it == by_image_.end()) throw DataError("unknown image id " + std::to_string(id));
  return it->second;
}

int DetectionDataset::class_index(CategoryId id) const {
  auto it = class_index_.find(id);
  if (it == class_index_.end()) throw DataError("unknown category id " + std::to_string(id));
  return it->second;
}

std::vector<CategoryId> DetectionDataset::category_ids() const {
  std::vector<CategoryId> ids;
  ids.reserve(categories_.size());
  for (const auto& c : categories_) ids.push_back(c.id);
  return ids;
}

DetectionDataset generate_shapeworld(const ShapeWorldConfig& config) {
  if (config.num_categories < 2) {
    throw std::invalid_argument("shape-world needs at least 2 categories");
  }
  if (config.num_categories > kNumGlyphs * kNumColors) {
    throw std::invalid_argument(
        "shape-world can render at most " + std::to_string(kNumGlyphs * kNumColors) +
        " distinct categories (" + std::to_string(kNumGlyphs) + " glyphs x " +
        std::to_string(kNumColors) + " colors), requested " +
        std::to_string(config.num_categories));
  }
  if (config.num_images < 0 || config.max_objects_per_image < 1) {
    throw std::invalid_argument("num_images must be >= 0 and max_objects_per_image >= 1");
  }
  if (config.min_glyph < 3 || config.min_glyph > config.max_glyph ||
      config.max_glyph >= config.image_size) {
    throw std::invalid_argument("glyph sizes must satisfy 3 <= min <= max < image_size");
  }

  std::vector<CategoryInfo> categories;
  for (int k = 0; k < config.num_categories; ++k) categories.push_back(make_category(k));

  Rng rng(config.seed);
  std::vector<int> objects_per_image(config.num_images);
  int total = 0;
  for (auto& n : objects_per_image) {
    n = rng.uniform_int(1, config.max_objects_per_image);
    total += n;
  }

  // Each category's quota is its number of images; a category appears at most
  // once per image, so a quota beyond num_images cannot be met.
  std::vector<int> quotas = zipf_quotas(config.num_categories, config.zipf_exponent, total);
  std::vector<int> slots;
  for (int k = 0; k < config.num_categories; ++k) {
    const int q = std::min(quotas[k], config.num_images);
    slots.insert(slots.end(), q, k);
  }
  rng.shuffle(std::span<int>(slots));
  if (static_cast<int>(slots.size()) < total) {
    // Drop objects from the largest images first until the totals agree.
    int excess = total - static_cast<int>(slots.size());
    for (int i = 0; excess > 0; i = (i + 1) % config.num_images) {
      if (objects_per_image[i] > 0) {
        --objects_per_image[i];
        --excess;
      }
    }
  }

  std::vector<std::size_t> offsets(config.num_images + 1, 0);
  for (int i = 0; i < config.num_images; ++i) offsets[i + 1] = offsets[i] + objects_per_image[i];
  auto image_of_slot = [&](std::size_t s) {
    return static_cast<int>(std::upper_bound(offsets.begin(), offsets.end(), s) -
                            offsets.begin()) -
           1;
  };
  auto contains = [&](int img, int category, std::size_t skip) {
    for (std::size_t s = offsets[img]; s < offsets[img + 1]; ++s) {
      if (s != skip && slots[s] == category) return true;
    }
    return false;
  };
  // Repair duplicate categories within an image by swapping with random slots.
  for (int img = 0; img < config.num_images; ++img) {
    for (std::size_t s = offsets[img]; s < offsets[img + 1]; ++s) {
      for (int attempt = 0; attempt < 200 && contains(img, slots[s], s); ++attempt) {
        const std::size_t other = rng.uniform_int(slots.size());
        const int other_img = image_of_slot(other);
        if (other_img == img) continue;
        if (contains(img, slots[other], s) || contains(other_img, slots[s], other)) continue;
        std::swap(slots[s], slots[other]);
      }
    }
  }

  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  images.reserve(config.num_images);
  AnnotationId next_ann = config.first_id;
  for (int img = 0; img < config.num_images; ++img) {
    ImageRecord rec;
    rec.id = config.first_id + img;
    rec.width = config.image_size;
    rec.height = config.image_size;
    rec.render_seed = mix_seed(config.seed, 2 * static_cast<std::uint64_t>(img));
    images.push_back(rec);

    Rng layout(mix_seed(config.seed, 2 * static_cast<std::uint64_t>(img) + 1));
    std::vector<Box> placed;
    for (std::size_t s = offsets[img]; s < offsets[img + 1]; ++s) {
      Box box;
      for (int attempt = 0; attempt < 50; ++attempt) {
        const int w = layout.uniform_int(config.min_glyph, config.max_glyph);
        const int h = std::clamp(
            static_cast<int>(std::lround(w * layout.uniform(0.8, 1.25))), config.min_glyph,
            config.max_glyph);
        const int x = layout.uniform_int(0, config.image_size - w);
        const int y = layout.uniform_int(0, config.image_size - h);
        box = Box{double(x), double(y), double(x + w), double(y + h)};
        const bool clear = std::all_of(placed.begin(), placed.end(),
                                       [&](const Box& other) { return iou(box, other) < 0.1; });
        if (clear) break;
      }
      placed.push_back(box);
      annotations.push_back(Annotation{next_ann++, rec.id, categories[slots[s]].id, box});
    }
  }
  return DetectionDataset(std::move(images), std::move(annotations), std::move(categories));
}

Image render_image(const DetectionDataset& ds, ImageId id) {
  const ImageRecord& rec = ds.image(id);
  Image out;
  out.width = rec.width;
  out.height = rec.height;
  out.pixels.assign(static_cast<std::size_t>(rec.width) * rec.height * 3, 0.0f);

  Rng rng(rec.render_seed);
  const double gray = rng.uniform(0.05, 0.3);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = gray + rng.uniform(-0.03, 0.03);
  for (int y = 0; y < rec.height; ++y) {
    for (int x = 0; x < rec.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.pixels[(y * rec.width + x) * 3 + c] = static_cast<float>(bg[c] + 0.03 * rng.normal());
      }
    }
  }

  for (std::size_t idx : ds.annotations_of(id)) {
    const Annotation& ann = ds.annotations()[idx];
    const CategoryInfo& cat = ds.categories()[ds.class_index(ann.category)];
    const double shade = rng.uniform(0.8, 1.0);
    const auto& rgb = kColorRgb[cat.color];
    const int x0 = static_cast<int>(std::floor(ann.bbox.x_min));
    const int y0 = static_cast<int>(std::floor(ann.bbox.y_min));
    const int x1 = static_cast<int>(std::ceil(ann.bbox.x_max));
    const int y1 = static_cast<int>(std::ceil(ann.bbox.y_max));
    const double cx = 0.5 * (ann.bbox.x_min + ann.bbox.x_max);
    const double cy = 0.5 * (ann.bbox.y_min + ann.bbox.y_max);
    const double hw = 0.5 * ann.bbox.width();
    const double hh = 0.5 * ann.bbox.height();
    for (int y = std::max(0, y0); y < std::min(rec.height, y1); ++y) {
      for (int x = std::max(0, x0); x < std::min(rec.width, x1); ++x) {
        const double u = (x + 0.5 - cx) / hw;
        const double v = (y + 0.5 - cy) / hh;
        if (!inside_glyph(cat.glyph, u, v)) continue;
        for (int c = 0; c < 3; ++c) {
          const double value = rgb[c] * shade + 0.03 * rng.normal();
          out.pixels[(y * rec.width + x) * 3 + c] = static_cast<float>(value);
        }
      }
    }
  }
  for (auto& p : out.pixels) p = std::clamp(p, 0.0f, 1.0f);
  return out;
}

std::vector<Image> render_all(const DetectionDataset& ds) {
  std::vector<Image> out;
  out.reserve(ds.images().size());
  for (const auto& rec : ds.images()) out.push_back(render_image(ds, rec.id));
  return out;
}

std::map<CategoryId, int> count_images_per_category(const DetectionDataset& ds) {
  std::map<CategoryId, int> counts;
  for (const auto& c : ds.categories()) counts[c.id] = 0;
  for (const auto& rec : ds.images()) {
    std::set<CategoryId> present;
    for (std::size_t idx : ds.annotations_of(rec.id)) {
      present.insert(ds.annotations()[idx].category);
    }
    for (CategoryId c : present) ++counts[c];
  }
  return counts;
}

CategoryPartition partition_head_tail(const std::map<CategoryId, int>& counts, int threshold) {
  if (threshold < 1) throw std::invalid_argument("head/tail threshold must be >= 1");
  CategoryPartition p;
  p.threshold = threshold;
  for (const auto& [category, count] : counts) {
    (count >= threshold ? p.head : p.tail).insert(category);
  }
  return p;
}

CategoryPartition partition_head_tail(const DetectionDataset& ds, int threshold) {
  return partition_head_tail(count_images_per_category(ds), threshold);
}

FrequencyGroups frequency_groups(const std::map<CategoryId, int>& counts,
                                 FrequencyThresholds thresholds) {
  if (thresholds.rare_below > thresholds.frequent_above) {
    throw std::invalid_argument("frequency thresholds must be increasing");
  }
  FrequencyGroups g;
  for (const auto& [category, count] : counts) {
    if (count < thresholds.rare_below) {
      g.rare.insert(category);
    } else if (count > thresholds.frequent_above) {
      g.frequent.insert(category);
    } else {
      g.common.insert(category);
    }
  }
  return g;
}

FrequencyGroups frequency_groups(const DetectionDataset& ds, FrequencyThresholds thresholds) {
  return frequency_groups(count_images_per_category(ds), thresholds);
}

std::string annotations_to_json(const DetectionDataset& ds) {
  json doc;
  doc["bbox_format"] = "xyxy";
  doc["images"] = json::array();
  for (const auto& img : ds.images()) {
    doc["images"].push_back({{"id", img.id},
                             {"width", img.width},
                             {"height", img.height},
                             {"render_seed", img.render_seed}});
  }
  doc["annotations"] = json::array();
  for (const auto& a : ds.annotations()) {
    doc["annotations"].push_back(
        {{"id", a.id},
         {"image_id", a.image_id},
         {"category_id", a.category},
         {"bbox", {a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max}}});
  }
  doc["categories"] = json::array();
  for (const auto& c : ds.categories()) {
    doc["categories"].push_back({{"id", c.id},
                                 {"name", c.name},
                                 {"glyph", glyph_name(c.glyph)},
                                 {"color", color_name(c.color)}});
  }
  return doc.dump();
}

DetectionDataset annotations_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("annotation file is not valid JSON: ") + e.what());
  }
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw DataError(std::string("annotation file lacks a '") + key + "' array");
    }
  }
  const std::string format = doc.value("bbox_format", std::string("xywh"));
  if (format != "xyxy" && format != "xywh") throw DataError("unknown bbox_format " + format);

  std::vector<CategoryInfo> categories;
  for (const auto& c : doc["categories"]) {
    try {
      CategoryInfo info;
      info.id = c.at("id").get<int>();
      info.name = c.value("name", std::string());
      const std::string glyph = c.value("glyph", std::string("square"));
      const std::string color = c.value("color", std::string("red"));
      auto g = std::find(kGlyphNames.begin(), kGlyphNames.end(), glyph);
      auto col = std::find(kColorNames.begin(), kColorNames.end(), color);
      if (g == kGlyphNames.end() || col == kColorNames.end()) {
        throw DataError("category " + std::to_string(info.id) + " has unknown glyph or color");
      }
      info.glyph = static_cast<Glyph>(g - kGlyphNames.begin());
      info.color = static_cast<int>(col - kColorNames.begin());
      categories.push_back(std::move(info));
    } catch (const json::exception& e) {
      throw DataError("malformed category record " + c.dump() + ": " + e.what());
    }
  }
  std::vector<ImageRecord> images;
  for (const auto& i : doc["images"]) {
    try {
      images.push_back(ImageRecord{i.at("id").get<ImageId>(), i.at("width").get<int>(),
                                   i.at("height").get<int>(),
                                   i.value("render_seed", std::uint64_t{0})});
    } catch (const json::exception& e) {
      throw DataError("malformed image record " + i.dump() + ": " + e.what());
    }
  }
  std::vector<Annotation> annotations;
  for (const auto& a : doc["annotations"]) {
    try {
      Annotation ann;
      ann.id = a.at("id").get<AnnotationId>();
      ann.image_id = a.at("image_id").get<ImageId>();
      ann.category = a.at("category_id").get<CategoryId>();
      const auto& b = a.at("bbox");
      if (!b.is_array() || b.size() != 4) {
        throw DataError("annotation " + std::to_string(ann.id) + " bbox must have 4 numbers");
      }
      ann.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                  b[3].get<double>()};
      if (format == "xywh") {
        ann.bbox.x_max += ann.bbox.x_min;
        ann.bbox.y_max += ann.bbox.y_min;
      }
      annotations.push_back(ann);
    } catch (const json::exception& e) {
      throw DataError("malformed annotation record " + a.dump() + ": " + e.what());
    }
  }
  return DetectionDataset(std::move(images), std::move(annotations), std::move(categories));
}

void save_annotations(const DetectionDataset& ds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << annotations_to_json(ds);
  if (!out) throw DataError("write failed for " + path.string());
}

DetectionDataset load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return annotations_from_json(buffer.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace smoothtail
