#include "smoothtail/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "smoothtail/hungarian.hpp"

namespace smoothtail {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

// Zero-area boxes are allowed (a saturated box head can emit them); inverted ones are not.
void require_valid(const Box& b) {
  if (!(b.x_min <= b.x_max) || !(b.y_min <= b.y_max)) {
    throw std::invalid_argument("giou: inverted box");
  }
}

// d/d(cx, cy, w, h) from d/d(x_min, y_min, x_max, y_max).
NormBox corner_grad_to_center(const std::array<double, 4>& d) {
  return {d[0] + d[2], d[1] + d[3], 0.5 * (d[2] - d[0]), 0.5 * (d[3] - d[1])};
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

double giou(const Box& a, const Box& b) { return giou_with_grad(a, b).value; }

GiouGrad giou_with_grad(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  const double area_a = a.width() * a.height();
  const double area_b = b.width() * b.height();

  const double ix1 = std::max(a.x_min, b.x_min), ix2 = std::min(a.x_max, b.x_max);
  const double iy1 = std::max(a.y_min, b.y_min), iy2 = std::min(a.y_max, b.y_max);
  const bool overlap_x = ix2 > ix1, overlap_y = iy2 > iy1;
  const double iw = overlap_x ? ix2 - ix1 : 0.0;
  const double ih = overlap_y ? iy2 - iy1 : 0.0;
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;

  const double hx1 = std::min(a.x_min, b.x_min), hx2 = std::max(a.x_max, b.x_max);
  const double hy1 = std::min(a.y_min, b.y_min), hy2 = std::max(a.y_max, b.y_max);
  const double cw = hx2 - hx1, ch = hy2 - hy1;
  const double hull = cw * ch;
  if (!(uni > 0.0) || !(hull > 0.0)) throw std::invalid_argument("giou: both boxes have zero area");

  GiouGrad g;
  g.value = inter / uni - (hull - uni) / hull;

  // giou = I/U - 1 + U/C with U = A + B - I.
  const double d_inter = 1.0 / uni + inter / (uni * uni) - 1.0 / hull;
  const double d_area = -inter / (uni * uni) + 1.0 / hull;
  const double d_hull = -uni / (hull * hull);

  auto fill = [&](const Box& self, const Box& other, std::array<double, 4>& d) {
    // intersection extents
    const double dix1 = (overlap_x && self.x_min >= other.x_min) ? -1.0 : 0.0;
    const double dix2 = (overlap_x && self.x_max <= other.x_max) ? 1.0 : 0.0;
    const double diy1 = (overlap_y && self.y_min >= other.y_min) ? -1.0 : 0.0;
    const double diy2 = (overlap_y && self.y_max <= other.y_max) ? 1.0 : 0.0;
    // hull extents
    const double dcx1 = self.x_min <= other.x_min ? -1.0 : 0.0;
    const double dcx2 = self.x_max >= other.x_max ? 1.0 : 0.0;
    const double dcy1 = self.y_min <= other.y_min ? -1.0 : 0.0;
    const double dcy2 = self.y_max >= other.y_max ? 1.0 : 0.0;
    const double w = self.width(), h = self.height();
    d[0] = d_inter * dix1 * ih + d_area * (-h) + d_hull * dcx1 * ch;
    d[1] = d_inter * diy1 * iw + d_area * (-w) + d_hull * dcy1 * cw;
    d[2] = d_inter * dix2 * ih + d_area * h + d_hull * dcx2 * ch;
    d[3] = d_inter * diy2 * iw + d_area * w + d_hull * dcy2 * cw;
  };
  // On coincident edges each box takes the one-sided derivative.
  fill(a, b, g.d_a);
  fill(b, a, g.d_b);
  return g;
}

double box_loss(const NormBox& target, const NormBox& pred, const LossWeights& w) {
  return box_loss_with_grad(target, pred, w).value;
}

BoxLossGrad box_loss_with_grad(const NormBox& target, const NormBox& pred, const LossWeights& w) {
  BoxLossGrad out;
  double l1 = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double diff = target[k] - pred[k];
    l1 += std::abs(diff);
    const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    out.d_target[k] = w.l1 * sign;
    out.d_pred[k] = -w.l1 * sign;
  }
  const GiouGrad g = giou_with_grad(corners(target), corners(pred));
  out.value = w.l1 * l1 + w.giou * (1.0 - g.value);
  const NormBox dt = corner_grad_to_center(g.d_a);
  const NormBox dp = corner_grad_to_center(g.d_b);
  for (int k = 0; k < 4; ++k) {
    out.d_target[k] -= w.giou * dt[k];
    out.d_pred[k] -= w.giou * dp[k];
  }
  return out;
}

double focal_element(double logit, double target, double alpha, double gamma) {
  const double p = sigmoid(logit);
  const double ce = softplus(logit) - target * logit;
  const double p_t = p * target + (1.0 - p) * (1.0 - target);
  double loss = ce * std::pow(1.0 - p_t, gamma);
  if (alpha >= 0) loss *= alpha * target + (1.0 - alpha) * (1.0 - target);
  return loss;
}

double focal_element_grad(double logit, double target, double alpha, double gamma) {
  const double p = sigmoid(logit);
  const double ce = softplus(logit) - target * logit;
  const double p_t = p * target + (1.0 - p) * (1.0 - target);
  const double one_minus = 1.0 - p_t;
  double grad = (p - target) * std::pow(one_minus, gamma);
  if (gamma != 0.0 && one_minus > 0.0) {
    grad += ce * (-gamma) * std::pow(one_minus, gamma - 1.0) * (2.0 * target - 1.0) * p * (1.0 - p);
  }
  if (alpha >= 0) grad *= alpha * target + (1.0 - alpha) * (1.0 - target);
  return grad;
}

MatrixLoss sigmoid_focal_loss(const MatrixD& logits, const MatrixD& targets, double alpha,
                              double gamma, double normalizer) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw std::invalid_argument("focal loss: logits/targets shape mismatch");
  }
  if (normalizer <= 0) throw std::invalid_argument("focal loss: normalizer must be positive");
  MatrixLoss out;
  out.grad.resize(logits.rows(), logits.cols());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      sum += focal_element(logits(i, j), targets(i, j), alpha, gamma);
      out.grad(i, j) = focal_element_grad(logits(i, j), targets(i, j), alpha, gamma) / normalizer;
    }
  }
  out.value = sum / normalizer;
  return out;
}

MatrixD match_cost_matrix(const MatrixD& logits, const MatrixD& boxes,
                          const std::vector<Target>& targets, const LossWeights& w) {
  const Eigen::Index nq = logits.rows();
  if (boxes.rows() != nq || boxes.cols() != 4) {
    throw std::invalid_argument("matching: boxes must be N_q x 4");
  }
  MatrixD cost(static_cast<Eigen::Index>(targets.size()), nq);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Target& tgt = targets[t];
    if (tgt.class_index < 0 || tgt.class_index >= logits.cols()) {
      throw std::invalid_argument("matching: target class out of range");
    }
    for (Eigen::Index q = 0; q < nq; ++q) {
      const double p = sigmoid(logits(q, tgt.class_index));
      const double neg = (1.0 - w.focal_alpha) * std::pow(p, w.focal_gamma) *
                         -std::log(1.0 - p + 1e-8);
      const double pos = w.focal_alpha * std::pow(1.0 - p, w.focal_gamma) * -std::log(p + 1e-8);
      const NormBox pred{boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3)};
      double l1 = 0.0;
      for (int k = 0; k < 4; ++k) l1 += std::abs(tgt.box[k] - pred[k]);
      const double g = giou(corners(tgt.box), corners(pred));
      cost(static_cast<Eigen::Index>(t), q) =
          w.match_class * (pos - neg) + w.match_l1 * l1 + w.match_giou * (1.0 - g);
    }
  }
  return cost;
}

MatchResult match_cost(const MatrixD& cost) {
  if (cost.rows() > cost.cols()) {
    throw std::invalid_argument("matching: more targets (" + std::to_string(cost.rows()) +
                                ") than queries (" + std::to_string(cost.cols()) + ")");
  }
  MatchResult r;
  r.query_of_target = solve_assignment(cost);
  for (std::size_t t = 0; t < r.query_of_target.size(); ++t) {
    r.cost += cost(static_cast<Eigen::Index>(t), r.query_of_target[t]);
  }
  return r;
}

MatchResult match_hungarian(const MatrixD& logits, const MatrixD& boxes,
                            const std::vector<Target>& targets, const LossWeights& w) {
  if (static_cast<Eigen::Index>(targets.size()) > logits.rows()) {
    throw std::invalid_argument("matching: more targets than queries");
  }
  return match_cost(match_cost_matrix(logits, boxes, targets, w));
}

HungarianLoss hungarian_loss_fixed(const MatrixD& logits, const MatrixD& boxes,
                                   const std::vector<Target>& targets, const MatchResult& match,
                                   const LossWeights& w) {
  HungarianLoss out;
  out.match = match;
  const double normalizer = std::max<double>(1.0, static_cast<double>(targets.size()));

  MatrixD class_targets = MatrixD::Zero(logits.rows(), logits.cols());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    class_targets(match.query_of_target[t], targets[t].class_index) = 1.0;
  }
  MatrixLoss focal =
      sigmoid_focal_loss(logits, class_targets, w.focal_alpha, w.focal_gamma, normalizer);
  out.class_term = w.class_loss * focal.value;
  out.grad_logits = w.class_loss * focal.grad;

  out.grad_boxes = MatrixD::Zero(boxes.rows(), 4);
  double box_sum = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const int q = match.query_of_target[t];
    const NormBox pred{boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3)};
    const BoxLossGrad b = box_loss_with_grad(targets[t].box, pred, w);
    box_sum += b.value;
    for (int k = 0; k < 4; ++k) out.grad_boxes(q, k) += b.d_pred[k] / normalizer;
  }
  out.box_term = box_sum / normalizer;
  out.value = out.class_term + out.box_term;
  return out;
}

HungarianLoss hungarian_loss(const MatrixD& logits, const MatrixD& boxes,
                             const std::vector<Target>& targets, const LossWeights& w) {
  return hungarian_loss_fixed(logits, boxes, targets, match_hungarian(logits, boxes, targets, w),
                              w);
}

HeadMask build_head_mask(const std::vector<Box>& head_boxes, double image_width,
                         double image_height, int feature_height, int feature_width) {
  HeadMask mask;
  mask.height = feature_height;
  mask.width = feature_width;
  mask.bits.assign(static_cast<std::size_t>(feature_height) * feature_width, 0);
  const double sx = image_width / feature_width;
  const double sy = image_height / feature_height;
  for (int i = 0; i < feature_height; ++i) {
    const double cy = (i + 0.5) * sy;
    for (int j = 0; j < feature_width; ++j) {
      const double cx = (j + 0.5) * sx;
      for (const Box& b : head_boxes) {
        if (cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max) {
          mask.bits[i * feature_width + j] = 1;
          ++mask.count;
          break;
        }
      }
    }
  }
  return mask;
}

DistillLoss feature_distill(const MatrixD& f_unify, const MatrixD& f_head, const HeadMask& mask) {
  if (f_unify.rows() != f_head.rows() || f_unify.cols() != f_head.cols()) {
    throw std::invalid_argument("feature distillation: feature shapes differ");
  }
  if (f_unify.rows() != static_cast<Eigen::Index>(mask.bits.size())) {
    throw std::invalid_argument("feature distillation: mask does not match feature map");
  }
  DistillLoss out;
  out.grad_a = MatrixD::Zero(f_unify.rows(), f_unify.cols());
  out.grad_b = MatrixD::Zero(f_unify.rows(), f_unify.cols());
  if (mask.count == 0) return out;
  const double scale = 1.0 / (2.0 * mask.count);
  double sum = 0.0;
  for (Eigen::Index r = 0; r < f_unify.rows(); ++r) {
    if (!mask.bits[r]) continue;
    for (Eigen::Index c = 0; c < f_unify.cols(); ++c) {
      const double diff = f_unify(r, c) - f_head(r, c);
      sum += diff * diff;
      out.grad_a(r, c) = 2.0 * scale * diff;
      out.grad_b(r, c) = -2.0 * scale * diff;
    }
  }
  out.value = scale * sum;
  return out;
}

DistillLoss class_distill(const MatrixD& p_shared, const MatrixD& p_head) {
  if (p_shared.rows() != p_head.rows() || p_shared.cols() != p_head.cols()) {
    throw std::invalid_argument("class distillation: probability shapes differ");
  }
  const double n = static_cast<double>(p_shared.size());
  DistillLoss out;
  out.grad_a = MatrixD::Zero(p_shared.rows(), p_shared.cols());
  out.grad_b = MatrixD::Zero(p_shared.rows(), p_shared.cols());
  if (n == 0) return out;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < p_shared.rows(); ++i) {
    for (Eigen::Index j = 0; j < p_shared.cols(); ++j) {
      const double raw_s = p_shared(i, j), raw_h = p_head(i, j);
      if (!(raw_s >= 0.0 && raw_s <= 1.0) || !(raw_h >= 0.0 && raw_h <= 1.0)) {
        throw std::invalid_argument("class distillation: probability outside [0, 1]");
      }
      const double s = std::clamp(raw_s, kProbEpsilon, 1.0 - kProbEpsilon);
      const double h = std::clamp(raw_h, kProbEpsilon, 1.0 - kProbEpsilon);
      sum += h * std::log(h / s) + (1.0 - h) * std::log((1.0 - h) / (1.0 - s));
      if (raw_s == s) out.grad_a(i, j) = (-h / s + (1.0 - h) / (1.0 - s)) / n;
      if (raw_h == h) {
        out.grad_b(i, j) = (std::log(h / s) - std::log((1.0 - h) / (1.0 - s))) / n;
      }
    }
  }
  out.value = sum / n;
  return out;
}

TotalLoss total_loss(const StudentOutputs& student, const std::vector<Target>& targets,
                     const TeacherOutputs& teacher, const HeadMask& mask, const LossWeights& w) {
  TotalLoss out;
  HungarianLoss hg = hungarian_loss(student.logits, student.boxes, targets, w);
  out.match = hg.match;
  out.grad_logits = std::move(hg.grad_logits);
  out.grad_boxes = std::move(hg.grad_boxes);

  DistillLoss fm = feature_distill(student.features, teacher.features, mask);
  out.grad_features = w.feature_distill * fm.grad_a;

  MatrixD p_shared(student.shared_logits.rows(), student.shared_logits.cols());
  for (Eigen::Index i = 0; i < p_shared.size(); ++i) {
    p_shared.data()[i] = sigmoid(student.shared_logits.data()[i]);
  }
  DistillLoss cd = class_distill(p_shared, teacher.probs);
  out.grad_shared_logits =
      w.class_distill * (cd.grad_a.array() * p_shared.array() * (1.0 - p_shared.array())).matrix();

  auto& b = out.breakdown;
  b.hungarian = hg.value;
  b.feature_distill = fm.value;
  b.class_distill = cd.value;
  b.weighted_feature = w.feature_distill * fm.value;
  b.weighted_class = w.class_distill * cd.value;
  b.total = b.hungarian + b.weighted_feature + b.weighted_class;
  return out;
}

}  // namespace smoothtail
