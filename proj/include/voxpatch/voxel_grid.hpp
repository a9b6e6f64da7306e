#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "voxpatch/error.hpp"

namespace voxpatch {

/// Extent of a box of voxels along (x, y, z).
struct Dims3 {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t volume() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  bool positive() const { return x > 0 && y > 0 && z > 0; }
  bool cubic() const { return x == y && y == z; }
  friend bool operator==(const Dims3&, const Dims3&) = default;

  static Dims3 cube(int n) { return {n, n, n}; }
};

inline std::string to_string(const Dims3& d) {
  return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

enum class Axis { x = 0, y = 1, z = 2 };

inline std::string to_string(Axis a) {
  switch (a) {
    case Axis::x: return "x";
    case Axis::y: return "y";
    case Axis::z: return "z";
  }
  return "?";
}

inline Axis parse_axis(const std::string& s) {
  if (s == "x") return Axis::x;
  if (s == "y") return Axis::y;
  if (s == "z") return Axis::z;
  fail(ErrorKind::FormatError, "unknown axis '" + s + "'");
}

/// Dense binary occupancy volume. Cell (x, y, z) lives at x*W*D + y*D + z.
class VoxelGrid {
 public:
  VoxelGrid() = default;

  explicit VoxelGrid(Dims3 dims) : dims_(dims), cells_(checked_volume(dims), 0) {}

  VoxelGrid(Dims3 dims, std::vector<std::uint8_t> cells) : dims_(dims), cells_(std::move(cells)) {
    require(cells_.size() == checked_volume(dims), ErrorKind::DimensionMismatch,
            "cell buffer does not match dims " + voxpatch::to_string(dims));
    for (auto& c : cells_) {
      c = c ? 1 : 0;
    }
  }

  const Dims3& dims() const { return dims_; }
  std::size_t size() const { return cells_.size(); }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(x) * dims_.y + static_cast<std::size_t>(y)) * dims_.z +
           static_cast<std::size_t>(z);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.x && y < dims_.y && z < dims_.z;
  }

  bool at(int x, int y, int z) const { return cells_[index(x, y, z)] != 0; }
  void set(int x, int y, int z, bool occupied = true) { cells_[index(x, y, z)] = occupied ? 1 : 0; }

  bool operator[](std::size_t i) const { return cells_[i] != 0; }
  void set_linear(std::size_t i, bool occupied) { cells_[i] = occupied ? 1 : 0; }
  void flip_linear(std::size_t i) { cells_[i] ^= 1; }

  const std::vector<std::uint8_t>& cells() const { return cells_; }

  friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;

 private:
  static std::size_t checked_volume(Dims3 dims) {
    require(dims.positive(), ErrorKind::DimensionMismatch,
            "grid dims must be positive, got " + voxpatch::to_string(dims));
    return dims.volume();
  }

  Dims3 dims_{};
  std::vector<std::uint8_t> cells_;
};

/// A patch is a small occupancy volume; it shares the grid representation.
using Patch = VoxelGrid;

/// Ordered patches of a grid; patch (i, j, k) sits at i*Gj*Gk + j*Gk + k.
struct PatchSequence {
  Dims3 patch_grid{};
  Dims3 patch_dims{};
  std::vector<Patch> patches;

  std::size_t size() const { return patches.size(); }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * patch_grid.y + static_cast<std::size_t>(j)) * patch_grid.z +
           static_cast<std::size_t>(k);
  }
  friend bool operator==(const PatchSequence&, const PatchSequence&) = default;
};

inline std::size_t occupied_count(const VoxelGrid& grid) {
  return static_cast<std::size_t>(std::count(grid.cells().begin(), grid.cells().end(), std::uint8_t{1}));
}

/// |a & b| / |a | b|, defined as 1 when both grids are empty.
inline double iou(const VoxelGrid& a, const VoxelGrid& b) {
  require(a.dims() == b.dims(), ErrorKind::DimensionMismatch,
          "iou of " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  std::size_t inter = 0;
  std::size_t uni = 0;
  const auto& ca = a.cells();
  const auto& cb = b.cells();
  for (std::size_t i = 0; i < ca.size(); ++i) {
    inter += static_cast<std::size_t>(ca[i] & cb[i]);
    uni += static_cast<std::size_t>(ca[i] | cb[i]);
  }
  if (uni == 0) {
    return 1.0;
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline Dims3 patch_grid_dims(Dims3 grid, Dims3 patch) {
  require(patch.positive(), ErrorKind::DimensionMismatch, "patch dims must be positive");
  require(grid.x % patch.x == 0 && grid.y % patch.y == 0 && grid.z % patch.z == 0,
          ErrorKind::DimensionMismatch,
          "patch dims " + to_string(patch) + " do not divide grid dims " + to_string(grid));
  return {grid.x / patch.x, grid.y / patch.y, grid.z / patch.z};
}

/// Splits a grid into p = (H/h)(W/w)(D/d) patches with P_ijk(x,y,z) = V(ih+x, jw+y, kd+z).
inline PatchSequence patchify(const VoxelGrid& grid, Dims3 patch_dims) {
  const Dims3 g = patch_grid_dims(grid.dims(), patch_dims);
  PatchSequence seq;
  seq.patch_grid = g;
  seq.patch_dims = patch_dims;
  seq.patches.reserve(g.volume());
  for (int i = 0; i < g.x; ++i) {
    for (int j = 0; j < g.y; ++j) {
      for (int k = 0; k < g.z; ++k) {
        Patch p(patch_dims);
        for (int x = 0; x < patch_dims.x; ++x) {
          for (int y = 0; y < patch_dims.y; ++y) {
            for (int z = 0; z < patch_dims.z; ++z) {
              if (grid.at(i * patch_dims.x + x, j * patch_dims.y + y, k * patch_dims.z + z)) {
                p.set(x, y, z);
              }
            }
          }
        }
        seq.patches.push_back(std::move(p));
      }
    }
  }
  return seq;
}

/// Exact inverse of patchify.
inline VoxelGrid depatchify(const PatchSequence& seq, Dims3 patch_dims) {
  require(patch_dims.positive() && seq.patch_grid.positive(), ErrorKind::DimensionMismatch,
          "patch grid and patch dims must be positive");
  require(seq.patches.size() == seq.patch_grid.volume(), ErrorKind::DimensionMismatch,
          "sequence holds " + std::to_string(seq.patches.size()) + " patches but patch grid " +
              to_string(seq.patch_grid) + " needs " + std::to_string(seq.patch_grid.volume()));
  const Dims3 g = seq.patch_grid;
  VoxelGrid grid({g.x * patch_dims.x, g.y * patch_dims.y, g.z * patch_dims.z});
  for (int i = 0; i < g.x; ++i) {
    for (int j = 0; j < g.y; ++j) {
      for (int k = 0; k < g.z; ++k) {
        const Patch& p = seq.patches[seq.index(i, j, k)];
        require(p.dims() == patch_dims, ErrorKind::DimensionMismatch,
                "patch has dims " + to_string(p.dims()) + ", expected " + to_string(patch_dims));
        for (int x = 0; x < patch_dims.x; ++x) {
          for (int y = 0; y < patch_dims.y; ++y) {
            for (int z = 0; z < patch_dims.z; ++z) {
              if (p.at(x, y, z)) {
                grid.set(i * patch_dims.x + x, j * patch_dims.y + y, k * patch_dims.z + z);
              }
            }
          }
        }
      }
    }
  }
  return grid;
}

namespace detail {

// One exact quarter turn. About z: (x,y,z) -> (W-1-y, x, z); the other axes follow
// the same right-handed convention as the general rotation below.
inline VoxelGrid quarter_turn(const VoxelGrid& g, Axis axis) {
  const Dims3 d = g.dims();
  Dims3 out_dims = d;
  switch (axis) {
    case Axis::x: out_dims = {d.x, d.z, d.y}; break;
    case Axis::y: out_dims = {d.z, d.y, d.x}; break;
    case Axis::z: out_dims = {d.y, d.x, d.z}; break;
  }
  VoxelGrid out(out_dims);
  for (int x = 0; x < d.x; ++x) {
    for (int y = 0; y < d.y; ++y) {
      for (int z = 0; z < d.z; ++z) {
        if (!g.at(x, y, z)) {
          continue;
        }
        switch (axis) {
          case Axis::x: out.set(x, d.z - 1 - z, y); break;
          case Axis::y: out.set(z, y, d.x - 1 - x); break;
          case Axis::z: out.set(d.y - 1 - y, x, z); break;
        }
      }
    }
  }
  return out;
}

}  // namespace detail

/// Rotates about the grid center. Multiples of 90 degrees are exact cell
/// permutations (and may swap dims); other angles need a cubic grid and use
/// nearest-neighbor inverse mapping, with cells sourced from outside left empty.
inline VoxelGrid rotate(const VoxelGrid& grid, Axis axis, double angle_deg) {
  double a = std::fmod(angle_deg, 360.0);
  if (a < 0.0) {
    a += 360.0;
  }
  const double quarters = a / 90.0;
  const double nearest = std::round(quarters);
  if (std::abs(quarters - nearest) < 1e-9) {
    const int turns = static_cast<int>(nearest) % 4;
    VoxelGrid out = grid;
    for (int t = 0; t < turns; ++t) {
      out = detail::quarter_turn(out, axis);
    }
    return out;
  }

  const Dims3 d = grid.dims();
  require(d.cubic(), ErrorKind::UnsupportedRotation,
          "arbitrary-angle rotation needs a cubic grid, got " + to_string(d));
  const double rad = a * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  const double center = (d.x - 1) / 2.0;
  VoxelGrid out(d);
  for (int x = 0; x < d.x; ++x) {
    for (int y = 0; y < d.y; ++y) {
      for (int z = 0; z < d.z; ++z) {
        const double px = x - center;
        const double py = y - center;
        const double pz = z - center;
        // Source = R^T * destination.
        double sx = px;
        double sy = py;
        double sz = pz;
        switch (axis) {
          case Axis::x:
            sy = c * py + s * pz;
            sz = -s * py + c * pz;
            break;
          case Axis::y:
            sx = c * px - s * pz;
            sz = s * px + c * pz;
            break;
          case Axis::z:
            sx = c * px + s * py;
            sy = -s * px + c * py;
            break;
        }
        const int ix = static_cast<int>(std::floor(sx + center + 0.5));
        const int iy = static_cast<int>(std::floor(sy + center + 0.5));
        const int iz = static_cast<int>(std::floor(sz + center + 0.5));
        if (grid.contains(ix, iy, iz) && grid.at(ix, iy, iz)) {
          out.set(x, y, z);
        }
      }
    }
  }
  return out;
}

}  // namespace voxpatch
