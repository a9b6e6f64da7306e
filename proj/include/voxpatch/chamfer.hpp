#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "voxpatch/error.hpp"
#include "voxpatch/voxel_grid.hpp"

namespace voxpatch {

using Point3 = std::array<int, 3>;

inline std::vector<Point3> occupied_points(const VoxelGrid& g) {
  std::vector<Point3> pts;
  const Dims3 d = g.dims();
  for (int x = 0; x < d.x; ++x) {
    for (int y = 0; y < d.y; ++y) {
      for (int z = 0; z < d.z; ++z) {
        if (g.at(x, y, z)) pts.push_back({x, y, z});
      }
    }
  }
  return pts;
}

inline std::int64_t squared_distance(const Point3& a, const Point3& b) {
  std::int64_t s = 0;
  for (int i = 0; i < 3; ++i) {
    const std::int64_t d = a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)];
    s += d * d;
  }
  return s;
}

/// Static 3-d tree over integer points; queries return the exact squared
/// distance to the nearest stored point.
class KdTree {
 public:
  explicit KdTree(std::vector<Point3> points) : pts_(std::move(points)) {
    require(!pts_.empty(), ErrorKind::EmptyGrid, "k-d tree needs at least one point");
    nodes_.reserve(pts_.size());
    root_ = build(0, static_cast<int>(pts_.size()), 0);
  }

  std::int64_t nearest_squared(const Point3& q) const {
    std::int64_t best = std::numeric_limits<std::int64_t>::max();
    search(root_, q, best);
    return best;
  }

  std::size_t size() const { return pts_.size(); }

 private:
  struct Node {
    int point = -1;  // index into pts_
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build(int begin, int end, int depth) {
    if (begin >= end) return -1;
    const int axis = depth % 3;
    const int mid = begin + (end - begin) / 2;
    std::nth_element(pts_.begin() + begin, pts_.begin() + mid, pts_.begin() + end,
                     [axis](const Point3& a, const Point3& b) { return a[axis] < b[axis]; });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({mid, axis, -1, -1});
    const int l = build(begin, mid, depth + 1);
    const int r = build(mid + 1, end, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  void search(int id, const Point3& q, std::int64_t& best) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Point3& p = pts_[static_cast<std::size_t>(n.point)];
    best = std::min(best, squared_distance(p, q));
    const std::int64_t diff = q[static_cast<std::size_t>(n.axis)] - p[static_cast<std::size_t>(n.axis)];
    const int near = diff < 0 ? n.left : n.right;
    const int far = diff < 0 ? n.right : n.left;
    search(near, q, best);
    if (diff * diff < best) search(far, q, best);
  }

  std::vector<Point3> pts_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

namespace detail {

/// mean over `from` of the nearest squared distance supplied by `nearest`.
template <class F>
double mean_nearest(const std::vector<Point3>& from, F nearest) {
  double total = 0.0;
  for (const auto& p : from) total += static_cast<double>(nearest(p));
  return total / static_cast<double>(from.size());
}

inline void check_nonempty(const std::vector<Point3>& a, const std::vector<Point3>& b) {
  require(!a.empty() && !b.empty(), ErrorKind::EmptyGrid, "chamfer distance needs two non-empty grids");
}

}  // namespace detail

/// Symmetric Chamfer distance between occupied voxel coordinates: mean squared
/// nearest-neighbour distance from a to b plus from b to a.
inline double chamfer(const VoxelGrid& a, const VoxelGrid& b) {
  auto pa = occupied_points(a);
  auto pb = occupied_points(b);
  detail::check_nonempty(pa, pb);
  const KdTree ta(pa), tb(pb);
  return detail::mean_nearest(pa, [&](const Point3& p) { return tb.nearest_squared(p); }) +
         detail::mean_nearest(pb, [&](const Point3& p) { return ta.nearest_squared(p); });
}

/// O(n*m) reference.
inline double chamfer_brute_force(const VoxelGrid& a, const VoxelGrid& b) {
  auto pa = occupied_points(a);
  auto pb = occupied_points(b);
  detail::check_nonempty(pa, pb);
  auto scan = [](const std::vector<Point3>& set) {
    return [&set](const Point3& p) {
      std::int64_t best = std::numeric_limits<std::int64_t>::max();
      for (const auto& s : set) best = std::min(best, squared_distance(p, s));
      return best;
    };
  };
  return detail::mean_nearest(pa, scan(pb)) + detail::mean_nearest(pb, scan(pa));
}

}  // namespace voxpatch
