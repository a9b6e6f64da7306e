#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <queue>
#include <string>
#include <vector>

#include "voxpatch/error.hpp"
#include "voxpatch/random.hpp"
#include "voxpatch/voxel_grid.hpp"

// Procedural captioned shapes standing in for a scanned-object corpus.
namespace voxpatch {

inline const std::vector<std::string>& shape_categories() {
  static const std::vector<std::string> kCategories = {"box_table", "cross_plane", "sphere_pod", "l_bracket",
                                                       "ring"};
  return kCategories;
}

/// Geometry of one procedural shape, in voxels. Field meaning per category:
///
///   category     size              secondary            thickness
///   box_table    top half-width    leg height           slab thickness
///   cross_plane  fuselage half-len wing half-span       tail fin height
///   sphere_pod   radius            z stretch factor     (unused)
///   l_bracket    horizontal arm    vertical arm         plate thickness
///   ring         centerline radius (unused)             tube radius
struct ShapeParams {
  double size = 0.0;
  double secondary = 0.0;
  double thickness = 0.0;
  std::array<int, 2> attributes{0, 0};  // binary attribute choices used in captions
};

struct GeneratedShape {
  VoxelGrid grid;
  std::array<std::string, 3> captions;
};

namespace detail {

inline int category_index(const std::string& category) {
  const auto& cats = shape_categories();
  for (std::size_t i = 0; i < cats.size(); ++i) {
    if (cats[i] == category) {
      return static_cast<int>(i);
    }
  }
  fail(ErrorKind::UnknownCategory, "unknown shape category '" + category + "'");
}

struct CategoryText {
  const char* noun;
  std::array<const char*, 2> first;   // attribute 0 phrases
  std::array<const char*, 2> second;  // attribute 1 phrases
};

inline const CategoryText& category_text(int idx) {
  static const std::array<CategoryText, 5> kText = {{
      {"box table", {"short legs", "long legs"}, {"a narrow top", "a wide top"}},
      {"cross plane", {"short wings", "long wings"}, {"a low tail", "a high tail"}},
      {"sphere pod", {"a small body", "a large body"}, {"a round profile", "a tall profile"}},
      {"l bracket", {"short arms", "long arms"}, {"thin plates", "thick plates"}},
      {"ring", {"a small opening", "a wide opening"}, {"a thin band", "a thick band"}},
  }};
  return kText[static_cast<std::size_t>(idx)];
}

}  // namespace detail

/// The three paraphrases of one shape's description.
inline std::array<std::string, 3> shape_captions(const std::string& category, const ShapeParams& params) {
  const auto& text = detail::category_text(detail::category_index(category));
  const std::string noun = text.noun;
  const std::string a1 = text.first[static_cast<std::size_t>(params.attributes[0] & 1)];
  const std::string a2 = text.second[static_cast<std::size_t>(params.attributes[1] & 1)];
  return {
      "a " + noun + " with " + a1 + " and " + a2 + ".",
      "3d model of a " + noun + " featuring " + a2 + " and " + a1 + ".",
      "this " + noun + " has " + a1 + ", " + a2 + ".",
  };
}

/// Draws parameters for a cubic grid of side n. Every shape stays inside the
/// ball of radius n/2 - 1 about the center so rotations never clip it.
inline ShapeParams sample_shape_params(const std::string& category, int n, Rng& rng) {
  const int idx = detail::category_index(category);
  const double u = n / 32.0;
  ShapeParams p;
  p.attributes = {static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2))};
  const bool a0 = p.attributes[0] == 1;
  const bool a1 = p.attributes[1] == 1;
  switch (idx) {
    case 0:  // box_table
      p.secondary = a0 ? rng.uniform(7.0, 9.0) * u : rng.uniform(4.0, 6.0) * u;
      p.size = a1 ? rng.uniform(7.5, 9.0) * u : rng.uniform(5.0, 6.5) * u;
      p.thickness = std::max(1.0, 3.0 * u);
      break;
    case 1:  // cross_plane
      p.size = rng.uniform(9.0, 12.0) * u;
      p.secondary = a0 ? rng.uniform(9.0, 11.0) * u : rng.uniform(5.0, 7.0) * u;
      p.thickness = a1 ? rng.uniform(6.0, 7.0) * u : rng.uniform(3.0, 4.0) * u;
      break;
    case 2:  // sphere_pod
      p.size = a0 ? rng.uniform(7.5, 9.0) * u : rng.uniform(5.0, 6.5) * u;
      p.secondary = a1 ? 1.4 : 1.0;
      break;
    case 3:  // l_bracket
      p.size = a0 ? rng.uniform(14.0, 17.0) * u : rng.uniform(9.0, 11.0) * u;
      p.secondary = a0 ? rng.uniform(14.0, 17.0) * u : rng.uniform(9.0, 11.0) * u;
      p.thickness = a1 ? std::max(2.0, 5.0 * u) : std::max(1.0, 3.0 * u);
      break;
    default:  // ring
      p.size = a0 ? rng.uniform(8.5, 10.0) * u : rng.uniform(5.5, 7.0) * u;
      p.thickness = a1 ? std::max(1.5, 3.0 * u) : std::max(1.2, 2.0 * u);
      break;
  }
  return p;
}

/// 6-neighborhood connectivity of the occupied set (empty counts as connected).
inline bool is_connected(const VoxelGrid& grid) {
  const Dims3 d = grid.dims();
  std::size_t start = grid.size();
  std::size_t total = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i]) {
      ++total;
      if (start == grid.size()) {
        start = i;
      }
    }
  }
  if (total == 0) {
    return true;
  }
  std::vector<std::uint8_t> seen(grid.size(), 0);
  std::queue<std::size_t> frontier;
  frontier.push(start);
  seen[start] = 1;
  std::size_t reached = 0;
  const std::size_t sz = static_cast<std::size_t>(d.z);
  const std::size_t syz = static_cast<std::size_t>(d.y) * sz;
  while (!frontier.empty()) {
    const std::size_t c = frontier.front();
    frontier.pop();
    ++reached;
    const int x = static_cast<int>(c / syz);
    const int y = static_cast<int>((c / sz) % static_cast<std::size_t>(d.y));
    const int z = static_cast<int>(c % sz);
    const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
    for (const auto& q : nb) {
      if (!grid.contains(q[0], q[1], q[2])) {
        continue;
      }
      const std::size_t qi = grid.index(q[0], q[1], q[2]);
      if (grid[qi] && !seen[qi]) {
        seen[qi] = 1;
        frontier.push(qi);
      }
    }
  }
  return reached == total;
}

/// Rasterizes one shape into an n^3 grid centered at n/2 (plus an integer jitter
/// of at most one voxel per axis drawn from `rng`).
inline GeneratedShape generate_shape(const std::string& category, const ShapeParams& params, int n, Rng& rng) {
  const int idx = detail::category_index(category);
  require(n >= 8, ErrorKind::ConfigError, "grid side must be at least 8");
  require(params.size > 0.0, ErrorKind::EmptyShape, category + " with non-positive size");

  const int cx = n / 2 + static_cast<int>(rng.range(-1, 1));
  const int cy = n / 2 + static_cast<int>(rng.range(-1, 1));
  const int cz = n / 2 + static_cast<int>(rng.range(-1, 1));

  VoxelGrid grid(Dims3::cube(n));
  for (int x = 0; x < n; ++x) {
    for (int y = 0; y < n; ++y) {
      for (int z = 0; z < n; ++z) {
        const double dx = x - cx;
        const double dy = y - cy;
        const double dz = z - cz;
        bool inside = false;
        switch (idx) {
          case 0: {  // slab on four corner legs
            const double w = std::round(params.size);
            const double t = std::round(params.thickness);
            const double h = std::round(params.secondary);
            const double bottom = -std::floor((h + t) / 2.0);
            const double top = bottom + h;
            const bool in_top = std::abs(dx) <= w && std::abs(dy) <= w && dz >= top && dz < top + t;
            const bool leg_x = std::abs(dx) <= w && std::abs(dx) > w - t;
            const bool leg_y = std::abs(dy) <= w && std::abs(dy) > w - t;
            const bool in_leg = leg_x && leg_y && dz >= bottom && dz < top;
            inside = in_top || in_leg;
            break;
          }
          case 1: {  // fuselage + wings + tail fin
            const double len = params.size;
            const double span = params.secondary;
            const double fin = params.thickness;
            const double body_r = std::max(1.0, 2.2 * n / 32.0);
            const bool body = std::abs(dx) <= len && dy * dy + dz * dz <= body_r * body_r;
            const double chord = std::max(1.0, 2.0 * n / 32.0);
            const bool wing = std::abs(dx) <= chord && std::abs(dy) <= span && std::abs(dz) <= 1.0;
            const bool tail = dx <= -len + chord + 1.0 && dx >= -len && std::abs(dy) <= 1.0 && dz >= 0 &&
                              dz <= fin;
            inside = body || wing || tail;
            break;
          }
          case 2: {  // ellipsoid, stretched along z
            const double r = params.size;
            const double stretch = params.secondary > 0.0 ? params.secondary : 1.0;
            const double zz = dz / stretch;
            inside = dx * dx + dy * dy + zz * zz <= r * r;
            break;
          }
          case 3: {  // L of two plates sharing an edge
            const double a = std::round(params.size);
            const double b = std::round(params.secondary);
            const double t = std::round(params.thickness);
            const double half_w = std::max(2.0, std::round(4.0 * n / 32.0));
            const double x0 = -std::floor(a / 2.0);
            const double z0 = -std::floor(b / 2.0);
            const bool in_y = std::abs(dy) <= half_w;
            const bool horizontal = dx >= x0 && dx < x0 + a && dz >= z0 && dz < z0 + t;
            const bool vertical = dx >= x0 && dx < x0 + t && dz >= z0 && dz < z0 + b;
            inside = in_y && (horizontal || vertical);
            break;
          }
          default: {  // torus in the xy plane
            const double major = params.size;
            const double tube = params.thickness;
            const double radial = std::sqrt(dx * dx + dy * dy) - major;
            inside = radial * radial + dz * dz <= tube * tube;
            break;
          }
        }
        if (inside) {
          grid.set(x, y, z);
        }
      }
    }
  }
  require(occupied_count(grid) > 0, ErrorKind::EmptyShape, category + " rasterized to an empty grid");
  return {std::move(grid), shape_captions(category, params)};
}

}  // namespace voxpatch
