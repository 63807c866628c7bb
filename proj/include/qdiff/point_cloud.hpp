#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "qdiff/errors.hpp"

namespace qdiff {

/// An ordered representative x = (x_1, ..., x_N) of a point in R^(d x N).
/// Storage is row-major: point i occupies [i*d, (i+1)*d).
class PointCloud {
 public:
  PointCloud() = default;

  PointCloud(std::size_t n, std::size_t d) : n_(n), d_(d), data_(n * d, 0.0) {
    if (n == 0 || d == 0) throw DimensionError("point cloud needs n >= 1 and d >= 1");
  }

  PointCloud(std::size_t n, std::size_t d, std::vector<double> data)
      : n_(n), d_(d), data_(std::move(data)) {
    if (n == 0 || d == 0) throw DimensionError("point cloud needs n >= 1 and d >= 1");
    if (data_.size() != n * d)
      throw DimensionError("point cloud data has " + std::to_string(data_.size()) +
                           " entries, expected " + std::to_string(n * d));
    for (double v : data_)
      if (!std::isfinite(v)) throw DomainError("point cloud entries must be finite");
  }

  /// Builds a cloud from a list of points; all points must share a dimension.
  static PointCloud from_points(const std::vector<std::vector<double>>& pts) {
    if (pts.empty()) throw DimensionError("point cloud needs at least one point");
    const std::size_t d = pts.front().size();
    std::vector<double> flat;
    flat.reserve(pts.size() * d);
    for (const auto& p : pts) {
      if (p.size() != d) throw DimensionError("points have inconsistent dimension");
      flat.insert(flat.end(), p.begin(), p.end());
    }
    return PointCloud(pts.size(), d, std::move(flat));
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t d() const noexcept { return d_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> point(std::size_t i) const { return {data_.data() + i * d_, d_}; }
  std::span<double> point(std::size_t i) { return {data_.data() + i * d_, d_}; }

  double operator()(std::size_t i, std::size_t k) const { return data_[i * d_ + k]; }
  double& operator()(std::size_t i, std::size_t k) { return data_[i * d_ + k]; }

  std::span<const double> flat() const noexcept { return data_; }
  std::span<double> flat() noexcept { return data_; }

  bool same_shape(const PointCloud& o) const noexcept { return n_ == o.n_ && d_ == o.d_; }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t d_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const PointCloud& x, const PointCloud& y) {
  if (!x.same_shape(y))
    throw DimensionError("shape mismatch: (" + std::to_string(x.n()) + "x" + std::to_string(x.d()) +
                         ") vs (" + std::to_string(y.n()) + "x" + std::to_string(y.d()) + ")");
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

/// ||x - y||^2 over the whole cloud.
inline double squared_distance(const PointCloud& x, const PointCloud& y) {
  require_same_shape(x, y);
  return squared_distance(x.flat(), y.flat());
}

/// Element of S_N stored 0-based as the image table: mapping()[i] = sigma(i).
///
/// Action on clouds: sigma(x)_i = x_{sigma^-1(i)}, i.e. point j of the input
/// lands in slot sigma(j) of the output.
class Permutation {
 public:
  Permutation() = default;

  explicit Permutation(std::vector<std::size_t> mapping) : map_(std::move(mapping)) {
    std::vector<char> seen(map_.size(), 0);
    for (std::size_t v : map_) {
      if (v >= map_.size() || seen[v]) throw DomainError("permutation mapping is not a bijection");
      seen[v] = 1;
    }
  }

  static Permutation identity(std::size_t n) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), std::size_t{0});
    return Permutation(std::move(m), unchecked{});
  }

  std::size_t size() const noexcept { return map_.size(); }
  std::size_t operator()(std::size_t i) const { return map_[i]; }
  const std::vector<std::size_t>& mapping() const noexcept { return map_; }

  Permutation inverse() const {
    std::vector<std::size_t> inv(map_.size());
    for (std::size_t i = 0; i < map_.size(); ++i) inv[map_[i]] = i;
    return Permutation(std::move(inv), unchecked{});
  }

  bool is_identity() const noexcept {
    for (std::size_t i = 0; i < map_.size(); ++i)
      if (map_[i] != i) return false;
    return true;
  }

  /// Exchanges the images of a and b: returns sigma o (a b).
  Permutation with_swapped_images(std::size_t a, std::size_t b) const {
    Permutation out = *this;
    std::swap(out.map_[a], out.map_[b]);
    return out;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;
  friend auto operator<=>(const Permutation& a, const Permutation& b) { return a.map_ <=> b.map_; }

 private:
  struct unchecked {};
  Permutation(std::vector<std::size_t> m, unchecked) : map_(std::move(m)) {}

  std::vector<std::size_t> map_;
};

/// (sigma o tau)(i) = sigma(tau(i)).
inline Permutation compose(const Permutation& sigma, const Permutation& tau) {
  if (sigma.size() != tau.size()) throw DimensionError("cannot compose permutations of different size");
  std::vector<std::size_t> m(sigma.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = sigma(tau(i));
  return Permutation(std::move(m));
}

inline PointCloud apply(const Permutation& sigma, const PointCloud& x) {
  if (sigma.size() != x.n())
    throw DimensionError("permutation of size " + std::to_string(sigma.size()) +
                         " applied to cloud with n = " + std::to_string(x.n()));
  PointCloud out(x.n(), x.d());
  for (std::size_t j = 0; j < x.n(); ++j) {
    auto src = x.point(j);
    std::copy(src.begin(), src.end(), out.point(sigma(j)).begin());
  }
  return out;
}

/// Orbit of x under S_N represented by its lexicographically sorted member.
class QuotientPoint {
 public:
  const PointCloud& representative() const noexcept { return rep_; }
  friend bool operator==(const QuotientPoint&, const QuotientPoint&) = default;

 private:
  explicit QuotientPoint(PointCloud rep) : rep_(std::move(rep)) {}
  friend QuotientPoint canonicalize(const PointCloud& x);

  PointCloud rep_;
};

/// Permutation that sorts the points of x lexicographically (stable).
inline Permutation sorting_permutation(const PointCloud& x) {
  std::vector<std::size_t> order(x.n());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    auto pa = x.point(a);
    auto pb = x.point(b);
    return std::lexicographical_compare(pa.begin(), pa.end(), pb.begin(), pb.end());
  });
  // order[k] is the source index that lands in slot k, i.e. sigma^-1(k).
  return Permutation(std::move(order)).inverse();
}

inline QuotientPoint canonicalize(const PointCloud& x) {
  return QuotientPoint(apply(sorting_permutation(x), x));
}

inline PointCloud canonical(const PointCloud& x) { return canonicalize(x).representative(); }

}  // namespace qdiff
