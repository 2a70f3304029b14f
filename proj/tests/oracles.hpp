#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Deliberately naive: clarity over speed.

#include <functional>
#include <span>
#include <vector>

#include "smoothtail/box.hpp"
#include "smoothtail/eval.hpp"
#include "smoothtail/losses.hpp"
#include "smoothtail/replay.hpp"
#include "smoothtail/rng.hpp"

namespace smoothtail::oracle {

struct BruteForceMatch {
  double cost = 0.0;
  std::vector<int> query_of_target;
  int optima = 0;  // number of assignments attaining the minimum (within 1e-12)
};

/// Enumerates every injective target -> query map.
BruteForceMatch brute_force_match(const MatrixD& cost);

/// Cost of an assignment summed in target order.
double assignment_cost(const MatrixD& cost, const std::vector<int>& query_of_target);

/// GIoU from areas estimated on a regular grid over the enclosing hull.
double grid_giou(const Box& a, const Box& b, int resolution);

/// Central finite differences of f around x.
MatrixD numeric_gradient(const std::function<double(const MatrixD&)>& f, const MatrixD& x,
                         double step = 1e-3);

/// max |a - n| / max(1, |a|, |n|) over all entries.
double max_relative_error(const MatrixD& analytic, const MatrixD& numeric);

/// Two passes written from the selection rule, no shared code with the library.
std::vector<AnnotationId> two_pass_selection(std::vector<ScoredInstance> scored, int quota,
                                             double tau);

MatrixD random_matrix(Rng& rng, int rows, int cols, double lo, double hi);
NormBox random_norm_box(Rng& rng);

/// Single-category AP at one IoU threshold straight from the definitions:
/// greedy matching, then for each of the 101 recall levels the best precision
/// reached at that recall or beyond.
double reference_ap(std::vector<Detection> detections, const std::vector<Annotation>& ground_truth,
                    double threshold, bool unit_start);

}  // namespace smoothtail::oracle
