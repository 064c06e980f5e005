#pragma once

#include <Eigen/Core>
#include <vector>

#include "vloss/core/tensor.hpp"

namespace vloss {

/// Minimum-cost assignment between the rows and columns of a cost matrix.
struct Assignment {
  std::vector<Index> col_of_row;  // -1 for unassigned rows
  double total = 0.0;

  std::vector<Index> row_of_col(Index cols) const;
};

/// Globally minimal assignment of min(rows, cols) pairs.
///
/// Among all optimal assignments, returns the lexicographically smallest
/// `col_of_row` (with "unassigned" ordered after every column). Ties are
/// detected with a relative tolerance of 1e-12 on the total. NaN or infinite
/// entries are rejected.
Assignment match_hungarian(const Eigen::MatrixXd& cost);

/// Exhaustive reference: tries every injective map. Only for tiny matrices.
double brute_force_min_cost(const Eigen::MatrixXd& cost);

}  // namespace vloss
