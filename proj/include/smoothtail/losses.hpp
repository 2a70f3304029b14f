#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <vector>

#include "smoothtail/box.hpp"

namespace smoothtail {

using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Loss and matching hyperparameters. Defaults follow the Deformable DETR
/// configuration for the detection terms and (0.1, 1) for the distillation
/// weights.
struct LossWeights {
  double feature_distill = 0.1;  // lambda_fm
  double class_distill = 1.0;    // lambda_cls
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double class_loss = 2.0;  // focal term weight inside the Hungarian loss
  double l1 = 5.0;
  double giou = 2.0;
  double match_class = 2.0;
  double match_l1 = 5.0;
  double match_giou = 2.0;
};

// One ground-truth target at the model boundary: class index into the
// model's class list and a normalized (cx, cy, w, h) box.
struct Target {
  int class_index = 0;
  NormBox box{};
};

// ---- box terms ------------------------------------------------------------

/// Generalized IoU of two corner-form boxes. Throws on zero-area input.
double giou(const Box& a, const Box& b);

struct GiouGrad {
  double value = 0.0;
  std::array<double, 4> d_a{};  // w.r.t. (x_min, y_min, x_max, y_max) of a
  std::array<double, 4> d_b{};
};
GiouGrad giou_with_grad(const Box& a, const Box& b);

struct BoxLossGrad {
  double value = 0.0;
  NormBox d_target{};
  NormBox d_pred{};
};

/// l1 * |target - pred|_1 + giou_w * (1 - giou), boxes in normalized cxcywh.
double box_loss(const NormBox& target, const NormBox& pred, const LossWeights& w = {});
BoxLossGrad box_loss_with_grad(const NormBox& target, const NormBox& pred,
                               const LossWeights& w = {});

// ---- classification --------------------------------------------------------

double focal_element(double logit, double target, double alpha, double gamma);
double focal_element_grad(double logit, double target, double alpha, double gamma);

struct MatrixLoss {
  double value = 0.0;
  MatrixD grad;
};

/// Sum of per-element sigmoid focal terms divided by `normalizer`
/// (the number of matched targets, clamped to >= 1 by callers).
MatrixLoss sigmoid_focal_loss(const MatrixD& logits, const MatrixD& targets, double alpha,
                              double gamma, double normalizer = 1.0);

// ---- matching ---------------------------------------------------------------

struct MatchResult {
  std::vector<int> query_of_target;  // injective target -> query map
  double cost = 0.0;
};

/// Pairwise matching cost, targets x queries.
MatrixD match_cost_matrix(const MatrixD& logits, const MatrixD& boxes,
                          const std::vector<Target>& targets, const LossWeights& w = {});

/// Optimal assignment for an explicit cost matrix (targets x queries).
MatchResult match_cost(const MatrixD& cost);

MatchResult match_hungarian(const MatrixD& logits, const MatrixD& boxes,
                            const std::vector<Target>& targets, const LossWeights& w = {});

struct HungarianLoss {
  double value = 0.0;
  double class_term = 0.0;
  double box_term = 0.0;
  MatrixD grad_logits;  // N_q x C
  MatrixD grad_boxes;   // N_q x 4
  MatchResult match;
};

/// Set-prediction loss over the optimal matching; unmatched queries are pushed
/// toward all-zero class targets. Normalized by max(1, #targets).
HungarianLoss hungarian_loss(const MatrixD& logits, const MatrixD& boxes,
                             const std::vector<Target>& targets, const LossWeights& w = {});
/// Same loss under a fixed assignment (used for finite-difference checks).
HungarianLoss hungarian_loss_fixed(const MatrixD& logits, const MatrixD& boxes,
                                   const std::vector<Target>& targets, const MatchResult& match,
                                   const LossWeights& w = {});

// ---- distillation ------------------------------------------------------------

struct HeadMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;  // row-major, height * width
  int count = 0;                   // N^head

  bool at(int row, int col) const { return bits[row * width + col] != 0; }
};

/// Cell (i, j) is set iff its center, mapped to image coordinates, lies inside
/// any of the given (head-class) boxes.
HeadMask build_head_mask(const std::vector<Box>& head_boxes, double image_width,
                         double image_height, int feature_height, int feature_width);

struct DistillLoss {
  double value = 0.0;
  MatrixD grad_a;  // w.r.t. the first argument (student)
  MatrixD grad_b;  // w.r.t. the second argument (teacher)
};

/// Masked feature imitation, features are (h*w) x c with rows in mask order.
/// Returns exactly 0 when the mask is empty.
DistillLoss feature_distill(const MatrixD& f_unify, const MatrixD& f_head, const HeadMask& mask);

inline constexpr double kProbEpsilon = 1e-7;

/// Mean per-class Bernoulli KL(p_head || p_shared) over all queries and classes.
DistillLoss class_distill(const MatrixD& p_shared, const MatrixD& p_head);

// ---- total objective -----------------------------------------------------------

struct LossBreakdown {
  double hungarian = 0.0;
  double feature_distill = 0.0;  // raw, unweighted
  double class_distill = 0.0;    // raw, unweighted
  double weighted_feature = 0.0;
  double weighted_class = 0.0;
  double total = 0.0;  // hungarian + weighted_feature + weighted_class
};

struct TotalLoss {
  LossBreakdown breakdown;
  MatrixD grad_logits;
  MatrixD grad_boxes;
  MatrixD grad_features;       // student projected features
  MatrixD grad_shared_logits;  // logits of the student's head on teacher queries
  MatchResult match;
};

struct StudentOutputs {
  const MatrixD& logits;
  const MatrixD& boxes;
  const MatrixD& features;
  const MatrixD& shared_logits;  // student classification of teacher queries
};

struct TeacherOutputs {
  const MatrixD& features;
  const MatrixD& probs;
};

TotalLoss total_loss(const StudentOutputs& student, const std::vector<Target>& targets,
                     const TeacherOutputs& teacher, const HeadMask& mask,
                     const LossWeights& w = {});

double sigmoid(double x);

}  // namespace smoothtail
