#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "qdiff/point_cloud.hpp"

namespace qdiff {

struct Assignment {
  /// row_to_col[i] = column assigned to row i.
  std::vector<std::size_t> row_to_col;
  double cost = 0.0;
};

/// Minimum-cost perfect matching on a square n x n cost matrix (row-major),
/// Kuhn-Munkres with potentials, O(n^3).
inline Assignment solve_assignment(const std::vector<double>& cost, std::size_t n) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based working arrays; index 0 is the virtual column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
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
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment out;
  out.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.row_to_col[p[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) out.cost += cost[i * n + out.row_to_col[i]];
  return out;
}

/// sigma minimizing ||x - sigma(y)||^2. Point j of y is matched to point sigma(j) of x.
inline Permutation best_alignment(const PointCloud& x, const PointCloud& y) {
  require_same_shape(x, y);
  const std::size_t n = x.n();
  // rows: points of y, columns: points of x.
  std::vector<double> cost(n * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) cost[j * n + i] = squared_distance(y.point(j), x.point(i));
  return Permutation(solve_assignment(cost, n).row_to_col);
}

/// min over sigma in S_N of ||x - sigma(y)||, via exact linear assignment.
inline double orbit_distance(const PointCloud& x, const PointCloud& y) {
  const Permutation sigma = best_alignment(x, y);
  return std::sqrt(squared_distance(x, apply(sigma, y)));
}

}  // namespace qdiff
