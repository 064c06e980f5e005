#include "vloss/losses/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vloss {
namespace {

// Shortest augmenting path with potentials; requires rows <= cols.
// Returns col_of_row for every row.
std::vector<Index> solve_wide(const Eigen::MatrixXd& a) {
  const Index n = a.rows(), m = a.cols();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<Index> p(m + 1, 0), way(m + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, false);
    do {
      used[j0] = true;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<Index> col_of_row(n, -1);
  for (Index j = 1; j <= m; ++j)
    if (p[j] != 0) col_of_row[p[j] - 1] = j - 1;
  return col_of_row;
}

// Optimal total over the sub-matrix of live rows/cols.
double optimal_total(const Eigen::MatrixXd& cost, const std::vector<Index>& rows,
                     const std::vector<Index>& cols) {
  if (rows.empty() || cols.empty()) return 0.0;
  const bool wide = rows.size() <= cols.size();
  Eigen::MatrixXd sub(wide ? rows.size() : cols.size(), wide ? cols.size() : rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (wide)
        sub(r, c) = cost(rows[r], cols[c]);
      else
        sub(c, r) = cost(rows[r], cols[c]);
    }
  const auto sol = solve_wide(sub);
  double total = 0;
  for (Index i = 0; i < sub.rows(); ++i) total += sub(i, sol[i]);
  return total;
}

}  // namespace

std::vector<Index> Assignment::row_of_col(Index cols) const {
  std::vector<Index> out(cols, -1);
  for (std::size_t r = 0; r < col_of_row.size(); ++r)
    if (col_of_row[r] >= 0) out[col_of_row[r]] = static_cast<Index>(r);
  return out;
}

Assignment match_hungarian(const Eigen::MatrixXd& cost) {
  for (Index i = 0; i < cost.size(); ++i) {
    if (!std::isfinite(cost.data()[i])) throw ValidationError("match_hungarian: non-finite cost");
  }
  const Index n = cost.rows(), m = cost.cols();
  Assignment result;
  result.col_of_row.assign(n, -1);
  if (n == 0 || m == 0) return result;

  std::vector<Index> rows(n), cols(m);
  std::iota(rows.begin(), rows.end(), Index{0});
  std::iota(cols.begin(), cols.end(), Index{0});
  const double best = optimal_total(cost, rows, cols);
  const double tol = 1e-12 * (1.0 + std::abs(best));
  const Index pairs = std::min(n, m);

  // Fix rows in order, each to the smallest choice that keeps an optimal completion.
  std::vector<Index> live_rows(rows.begin(), rows.end());
  std::vector<Index> live_cols(cols.begin(), cols.end());
  double fixed = 0;
  Index placed = 0;
  for (Index i = 0; i < n; ++i) {
    live_rows.erase(std::find(live_rows.begin(), live_rows.end(), i));
    bool done = false;
    for (std::size_t k = 0; k < live_cols.size() && !done; ++k) {
      const Index j = live_cols[k];
      std::vector<Index> rest_cols = live_cols;
      rest_cols.erase(rest_cols.begin() + k);
      const Index completes = placed + 1 + std::min<Index>(live_rows.size(), rest_cols.size());
      if (completes < pairs) continue;
      const double completion = optimal_total(cost, live_rows, rest_cols);
      if (std::abs(fixed + cost(i, j) + completion - best) <= tol) {
        result.col_of_row[i] = j;
        fixed += cost(i, j);
        live_cols = std::move(rest_cols);
        ++placed;
        done = true;
      }
    }
    if (!done) {
      // Leaving row i unassigned must still allow `pairs` matches overall.
      const Index reachable = placed + std::min<Index>(live_rows.size(), live_cols.size());
      if (reachable < pairs) throw RuntimeAbort("match_hungarian: no optimal completion found");
    }
  }
  result.total = fixed;
  return result;
}

double brute_force_min_cost(const Eigen::MatrixXd& cost) {
  const Index n = cost.rows(), m = cost.cols();
  const Index pairs = std::min(n, m);
  double best = std::numeric_limits<double>::infinity();
  std::vector<char> used(m, false);
  // Rows in order; each takes a free column or is skipped while enough rows remain.
  auto visit = [&](auto&& self, Index row, Index placed, double total) -> void {
    if (placed == pairs) {
      best = std::min(best, total);
      return;
    }
    if (row == n) return;
    for (Index j = 0; j < m; ++j) {
      if (used[j]) continue;
      used[j] = true;
      self(self, row + 1, placed + 1, total + cost(row, j));
      used[j] = false;
    }
    if (n - row - 1 >= pairs - placed) self(self, row + 1, placed, total);
  };
  visit(visit, 0, 0, 0.0);
  return pairs == 0 ? 0.0 : best;
}

}  // namespace vloss
