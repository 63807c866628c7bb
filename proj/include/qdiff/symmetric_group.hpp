#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qdiff/errors.hpp"
#include "qdiff/point_cloud.hpp"

namespace qdiff {

/// Largest N for which sums over S_N are evaluated by enumeration (9! = 362880).
inline constexpr std::size_t kEnumerationCap = 9;

constexpr std::uint64_t factorial(std::size_t n) noexcept {
  std::uint64_t f = 1;
  for (std::size_t k = 2; k <= n; ++k) f *= k;
  return f;
}

inline void require_enumerable(std::size_t n, std::size_t cap = kEnumerationCap) {
  if (n > cap)
    throw CapacityError("N = " + std::to_string(n) + " exceeds the exact-enumeration cap of " +
                        std::to_string(cap) + "; use the mcmc estimator instead");
}

/// Visits every element of S_n exactly once in Heap's-algorithm order,
/// starting from the identity. Returns the number of visits.
template <class Fn>
std::uint64_t for_each_permutation(std::size_t n, Fn&& fn) {
  std::vector<std::size_t> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = i;
  std::vector<std::size_t> c(n, 0);
  std::uint64_t visits = 1;
  fn(static_cast<const std::vector<std::size_t>&>(a));
  std::size_t i = 1;
  while (i < n) {
    if (c[i] < i) {
      if (i % 2 == 0)
        std::swap(a[0], a[i]);
      else
        std::swap(a[c[i]], a[i]);
      fn(static_cast<const std::vector<std::size_t>&>(a));
      ++visits;
      ++c[i];
      i = 1;
    } else {
      c[i] = 0;
      ++i;
    }
  }
  return visits;
}

/// All of S_n in enumeration order.
inline std::vector<Permutation> all_permutations(std::size_t n) {
  std::vector<Permutation> out;
  out.reserve(factorial(n));
  for_each_permutation(n, [&](const std::vector<std::size_t>& m) { out.emplace_back(m); });
  return out;
}

/// Numerically stable log(sum(exp(v))). Returns -inf for an empty range.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Streaming log-sum-exp accumulator; order of `add` calls is the reduction order.
class LogSumExp {
 public:
  void add(double v) {
    if (v == -std::numeric_limits<double>::infinity()) return;
    if (v <= max_) {
      sum_ += std::exp(v - max_);
    } else {
      sum_ = sum_ * std::exp(max_ - v) + 1.0;
      max_ = v;
    }
  }
  double value() const {
    if (sum_ == 0.0) return -std::numeric_limits<double>::infinity();
    return max_ + std::log(sum_);
  }

 private:
  double max_ = -std::numeric_limits<double>::infinity();
  double sum_ = 0.0;
};

}  // namespace qdiff
