#pragma once

#include <Eigen/Core>
#include <vector>

namespace smoothtail {

// Minimum-cost assignment of every row to a distinct column (rows <= cols),
// shortest-augmenting-path form of the Kuhn-Munkres algorithm, O(rows^2 cols).
// Returns the column assigned to each row.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

}  // namespace smoothtail
