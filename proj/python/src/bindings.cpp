#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "smoothtail/pipeline.hpp"

namespace py = pybind11;
using namespace smoothtail;

namespace {

using BoxTuple = std::tuple<double, double, double, double>;

Box to_box(const BoxTuple& t) { return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)}; }
BoxTuple from_box(const Box& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }
NormBox to_norm(const BoxTuple& t) { return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)}; }

Image to_image(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("image must have shape (h, w, 3)");
  Image img{static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), {}};
  img.pixels.assign(a.data(), a.data() + a.size());
  return img;
}

py::array_t<float> from_image(const Image& img) {
  py::array_t<float> out({img.height, img.width, 3});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

py::dict forward_dict(const ForwardOutput& o) {
  py::dict d;
  d["class_logits"] = o.class_logits;
  d["boxes"] = o.boxes;
  d["query_features"] = o.query_features;
  d["features"] = o.features;
  d["feature_shape"] = py::make_tuple(o.feature_height, o.feature_width);
  return d;
}

std::vector<Target> to_targets(const std::vector<std::pair<int, BoxTuple>>& targets) {
  std::vector<Target> out;
  for (const auto& [cls, box] : targets) out.push_back({cls, to_norm(box)});
  return out;
}

HeadMask to_mask(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& m) {
  if (m.ndim() != 2) throw std::invalid_argument("mask must be 2-D");
  HeadMask mask{static_cast<int>(m.shape(0)), static_cast<int>(m.shape(1)), {}, 0};
  for (py::ssize_t i = 0; i < m.size(); ++i) {
    const std::uint8_t bit = m.data()[i] ? 1 : 0;
    mask.bits.push_back(bit);
    mask.count += bit;
  }
  return mask;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Step-wise learning on smooth-tail data for long-tailed detection";

  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);

  // ---- dataset ----
  py::class_<DetectionDataset>(m, "Dataset")
      .def_property_readonly("num_images", [](const DetectionDataset& d) { return d.images().size(); })
      .def_property_readonly("num_categories", &DetectionDataset::num_categories)
      .def_property_readonly("category_ids", &DetectionDataset::category_ids)
      .def_property_readonly("image_ids",
                             [](const DetectionDataset& d) {
                               std::vector<ImageId> ids;
                               for (const auto& i : d.images()) ids.push_back(i.id);
                               return ids;
                             })
      .def_property_readonly("annotations",
                             [](const DetectionDataset& d) {
                               std::vector<std::tuple<AnnotationId, ImageId, CategoryId, BoxTuple>> out;
                               for (const auto& a : d.annotations()) out.emplace_back(a.id, a.image_id, a.category, from_box(a.bbox));
                               return out;
                             })
      .def("images_per_category", [](const DetectionDataset& d) { return count_images_per_category(d); })
      .def("partition",
           [](const DetectionDataset& d, int threshold) {
             const CategoryPartition p = partition_head_tail(d, threshold);
             return py::make_tuple(p.head, p.tail);
           },
           py::arg("threshold") = kDefaultHeadThreshold, "(head, tail) category sets; head has >= threshold images")
      .def("render", [](const DetectionDataset& d, ImageId id) { return from_image(render_image(d, id)); })
      .def("to_json", &annotations_to_json)
      .def("save", [](const DetectionDataset& d, const std::filesystem::path& p) { save_annotations(d, p); });

  m.def("generate_shapeworld",
        [](int num_categories, double zipf_exponent, int num_images, std::uint64_t seed) {
          ShapeWorldConfig c;
          c.num_categories = num_categories;
          c.zipf_exponent = zipf_exponent;
          c.num_images = num_images;
          c.seed = seed;
          return generate_shapeworld(c);
        },
        py::arg("num_categories") = 40, py::arg("zipf_exponent") = 1.2, py::arg("num_images") = 4000,
        py::arg("seed") = 0);
  m.def("load_annotations", [](const std::filesystem::path& p) { return load_annotations(p); });
  m.def("dataset_from_json", &annotations_from_json);

  // ---- losses ----
  m.def("giou", [](const BoxTuple& a, const BoxTuple& b) { return giou(to_box(a), to_box(b)); },
        "Generalized IoU of two (x_min, y_min, x_max, y_max) boxes");
  m.def("box_loss", [](const BoxTuple& target, const BoxTuple& pred) { return box_loss(to_norm(target), to_norm(pred)); },
        "5 * L1 + 2 * (1 - GIoU) on (cx, cy, w, h) boxes");
  m.def("focal_element", &focal_element, py::arg("logit"), py::arg("target"), py::arg("alpha") = 0.25,
        py::arg("gamma") = 2.0);
  m.def("match_cost", [](const MatrixD& cost) {
    const MatchResult r = match_cost(cost);
    return py::make_tuple(r.query_of_target, r.cost);
  }, "Optimal (query_of_target, cost) for a targets x queries cost matrix");
  m.def("hungarian_loss",
        [](const MatrixD& logits, const MatrixD& boxes, const std::vector<std::pair<int, BoxTuple>>& targets) {
          const HungarianLoss l = hungarian_loss(logits, boxes, to_targets(targets));
          py::dict d;
          d["value"] = l.value;
          d["class_term"] = l.class_term;
          d["box_term"] = l.box_term;
          d["grad_logits"] = l.grad_logits;
          d["grad_boxes"] = l.grad_boxes;
          d["query_of_target"] = l.match.query_of_target;
          return d;
        },
        py::arg("logits"), py::arg("boxes"), py::arg("targets"),
        "targets: list of (class_index, (cx, cy, w, h))");
  m.def("build_head_mask",
        [](const std::vector<BoxTuple>& boxes, double width, double height, int fh, int fw) {
          std::vector<Box> b;
          for (const auto& t : boxes) b.push_back(to_box(t));
          const HeadMask mask = build_head_mask(b, width, height, fh, fw);
          py::array_t<std::uint8_t> out({fh, fw});
          std::copy(mask.bits.begin(), mask.bits.end(), out.mutable_data());
          return out;
        });
  m.def("feature_distill",
        [](const MatrixD& f_unify, const MatrixD& f_head,
           const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
          const DistillLoss l = feature_distill(f_unify, f_head, to_mask(mask));
          return py::make_tuple(l.value, l.grad_a, l.grad_b);
        },
        "(value, grad_unify, grad_head); features are (h*w) x c rows in mask order");
  m.def("class_distill", [](const MatrixD& p_shared, const MatrixD& p_head) {
    const DistillLoss l = class_distill(p_shared, p_head);
    return py::make_tuple(l.value, l.grad_a, l.grad_b);
  }, "(value, grad_shared, grad_head) of the mean Bernoulli KL(p_head || p_shared)");

  // ---- eval ----
  m.def("average_precision",
        [](const std::vector<std::tuple<ImageId, CategoryId, BoxTuple, double>>& detections,
           const std::vector<std::tuple<AnnotationId, ImageId, CategoryId, BoxTuple>>& ground_truth,
           std::optional<std::vector<double>> thresholds, bool coco_reference) {
          std::vector<Detection> dets;
          for (const auto& [img, cat, box, score] : detections) dets.push_back({img, cat, to_box(box), score});
          std::vector<Annotation> gts;
          for (const auto& [id, img, cat, box] : ground_truth) gts.push_back({id, img, cat, to_box(box)});
          const ApResult r = average_precision(dets, gts, thresholds.value_or(default_iou_thresholds()),
                                               coco_reference ? PrCurveStart::kCocoReference : PrCurveStart::kUnitStart);
          return py::make_tuple(r.per_category, r.per_threshold);
        },
        py::arg("detections"), py::arg("ground_truth"), py::arg("thresholds") = py::none(),
        py::arg("coco_reference") = false,
        "(per_category, per_threshold) AP; detections are (image_id, category, box, score)");

  // ---- replay ----
  m.def("select_exemplars",
        [](const std::vector<std::tuple<AnnotationId, ImageId, CategoryId, double>>& scored, int quota, double tau) {
          std::vector<ScoredInstance> s;
          for (const auto& [a, i, c, sc] : scored) s.push_back({a, i, c, sc});
          return select_exemplars(s, quota, tau);
        },
        py::arg("scored"), py::arg("quota"), py::arg("tau") = 0.5,
        "Confidence-guided selection for one category; scored is (annotation, image, category, score)");
  m.def("category_repeat_factor", &category_repeat_factor, py::arg("frequency"), py::arg("threshold"));

  // ---- detector ----
  py::class_<DetectorModel>(m, "Detector")
      .def("forward", [](const DetectorModel& d, const py::array_t<float, py::array::c_style | py::array::forcecast>& img) {
        return forward_dict(d.forward(to_image(img)));
      })
      .def("classify_external_queries", &DetectorModel::classify_external_queries)
      .def("parameter_hash", [](const DetectorModel& d) { return d.parameter_hash(); })
      .def("class_agnostic_hash", [](const DetectorModel& d) { return d.parameter_hash(ParamGroup::kClassAgnostic); })
      .def_property_readonly("num_classes", [](const DetectorModel& d) { return d.config().num_classes; })
      .def("save", [](const DetectorModel& d, const std::filesystem::path& p) { save_checkpoint(d, p); });
  m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p); });

  // ---- pipeline ----
  m.def("preset_config", [](const std::string& name, std::uint64_t seed) { return config_to_text(preset_config(name, seed)); },
        py::arg("name") = "toy-default", py::arg("seed") = 0, "Config text of a preset");
  m.def("run_stepwise",
        [](const std::string& config_text, std::optional<std::filesystem::path> run_dir) {
          const RunConfig config = config_from_text(config_text);
          RunResult r = [&] {
            py::gil_scoped_release release;
            return run_stepwise(config, run_dir);
          }();
          return py::make_tuple(std::move(r.model), metrics_to_json(r.report));
        },
        py::arg("config_text"), py::arg("run_dir") = py::none(),
        "Runs the whole chain; returns (unified detector, metrics JSON text)");
}
