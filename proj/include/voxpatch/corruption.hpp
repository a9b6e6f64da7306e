#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxpatch/error.hpp"
#include "voxpatch/random.hpp"
#include "voxpatch/voxel_grid.hpp"

namespace voxpatch {

enum class CorruptionKind { random_mask, plane_mask, random_noise };

inline std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::random_mask: return "random_mask";
    case CorruptionKind::plane_mask: return "plane_mask";
    case CorruptionKind::random_noise: return "random_noise";
  }
  return "?";
}

inline CorruptionKind parse_corruption_kind(const std::string& s) {
  if (s == "random_mask") return CorruptionKind::random_mask;
  if (s == "plane_mask") return CorruptionKind::plane_mask;
  if (s == "random_noise") return CorruptionKind::random_noise;
  fail(ErrorKind::FormatError, "unknown corruption kind '" + s + "'");
}

/// Fully determines a corruption: the same spec on the same grid gives the same result.
///
/// ratio is the mask ratio (random_mask), the occupied fraction to cut away
/// (plane_mask) or the flipped-cell fraction (random_noise). A plane_mask
/// without ratio draws its cut uniformly over the occupied extent instead.
struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::random_mask;
  std::optional<double> ratio;
  std::optional<Axis> axis;
  std::uint64_t seed = 0;

  void validate() const {
    if (ratio) {
      require(*ratio >= 0.0 && *ratio <= 1.0, ErrorKind::InvalidRatio,
              "ratio " + std::to_string(*ratio) + " outside [0,1]");
    } else {
      require(kind == CorruptionKind::plane_mask, ErrorKind::InvalidRatio,
              to_string(kind) + " needs a ratio");
    }
    require(axis.has_value() == (kind == CorruptionKind::plane_mask), ErrorKind::ConfigError,
            "axis must be set exactly for plane_mask");
  }

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

inline void check_ratio(double r) {
  require(r >= 0.0 && r <= 1.0 && std::isfinite(r), ErrorKind::InvalidRatio,
          "ratio " + std::to_string(r) + " outside [0,1]");
}

/// Replaces exactly round(ratio * p) distinct patches with empty ones.
inline PatchSequence random_mask(const PatchSequence& seq, double ratio, Rng& rng) {
  check_ratio(ratio);
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(seq.size())));
  PatchSequence out = seq;
  for (std::size_t idx : rng.sample_without_replacement(seq.size(), count)) {
    out.patches[idx] = Patch(seq.patch_dims);
  }
  return out;
}

namespace detail {

inline int coord_along(Axis axis, int x, int y, int z) {
  switch (axis) {
    case Axis::x: return x;
    case Axis::y: return y;
    case Axis::z: return z;
  }
  return x;
}

inline int extent_along(Axis axis, Dims3 d) {
  switch (axis) {
    case Axis::x: return d.x;
    case Axis::y: return d.y;
    case Axis::z: return d.z;
  }
  return d.x;
}

}  // namespace detail

/// Cuts the grid with a plane normal to `axis` and empties the upper side.
///
/// With a fraction the cut is the one whose discarded side holds the smallest
/// occupied count that is still >= fraction * occupied. Without one the cut
/// coordinate is uniform over the occupied extent [a1, a2].
inline VoxelGrid plane_mask(const VoxelGrid& grid, Axis axis, std::optional<double> fraction, Rng& rng) {
  if (fraction) {
    check_ratio(*fraction);
  }
  const Dims3 d = grid.dims();
  const int extent = detail::extent_along(axis, d);
  std::vector<std::size_t> per_slab(static_cast<std::size_t>(extent), 0);
  std::size_t total = 0;
  for (int x = 0; x < d.x; ++x) {
    for (int y = 0; y < d.y; ++y) {
      for (int z = 0; z < d.z; ++z) {
        if (grid.at(x, y, z)) {
          ++per_slab[static_cast<std::size_t>(detail::coord_along(axis, x, y, z))];
          ++total;
        }
      }
    }
  }
  require(total > 0, ErrorKind::EmptyGrid, "plane_mask on a grid with no occupied voxel");

  int first = 0;
  while (per_slab[static_cast<std::size_t>(first)] == 0) {
    ++first;
  }
  int last = extent - 1;
  while (per_slab[static_cast<std::size_t>(last)] == 0) {
    --last;
  }

  int cut = last;
  if (fraction) {
    // discarded(c) = occupied with coord > c, non-increasing in c: take the largest
    // c that still discards enough.
    const double target = *fraction * static_cast<double>(total);
    std::size_t discarded = 0;  // occupied voxels with coord > c
    for (int c = last; c >= first - 1; --c) {
      if (static_cast<double>(discarded) >= target) {
        cut = c;
        break;
      }
      discarded += per_slab[static_cast<std::size_t>(c)];
    }
  } else {
    cut = static_cast<int>(rng.range(first, last));
  }

  VoxelGrid out = grid;
  for (int x = 0; x < d.x; ++x) {
    for (int y = 0; y < d.y; ++y) {
      for (int z = 0; z < d.z; ++z) {
        if (detail::coord_along(axis, x, y, z) > cut) {
          out.set(x, y, z, false);
        }
      }
    }
  }
  return out;
}

/// Inverts exactly round(level * cells) distinct cells.
inline VoxelGrid random_noise(const VoxelGrid& grid, double level, Rng& rng) {
  check_ratio(level);
  const auto count = static_cast<std::size_t>(std::llround(level * static_cast<double>(grid.size())));
  VoxelGrid out = grid;
  for (std::size_t idx : rng.sample_without_replacement(grid.size(), count)) {
    out.flip_linear(idx);
  }
  return out;
}

/// Parameter intervals used when corruptions are drawn for training.
struct TrainRanges {
  double mask_min = 0.1;
  double mask_max = 0.8;
  double noise_min = 0.005;
  double noise_max = 0.02;
};

/// Picks one of the three strategies with probability 1/3 each.
inline CorruptionSpec sample_corruption(Rng& rng, const TrainRanges& ranges) {
  CorruptionSpec spec;
  switch (rng.below(3)) {
    case 0:
      spec.kind = CorruptionKind::random_mask;
      spec.ratio = rng.uniform(ranges.mask_min, ranges.mask_max);
      break;
    case 1:
      spec.kind = CorruptionKind::plane_mask;
      spec.axis = static_cast<Axis>(rng.below(3));
      break;
    default:
      spec.kind = CorruptionKind::random_noise;
      spec.ratio = rng.uniform(ranges.noise_min, ranges.noise_max);
      break;
  }
  spec.seed = rng.next_u64();
  return spec;
}

inline VoxelGrid apply_corruption(const CorruptionSpec& spec, const VoxelGrid& grid, Dims3 patch_dims) {
  spec.validate();
  Rng rng(spec.seed);
  switch (spec.kind) {
    case CorruptionKind::random_mask:
      return depatchify(random_mask(patchify(grid, patch_dims), *spec.ratio, rng), patch_dims);
    case CorruptionKind::plane_mask:
      return plane_mask(grid, *spec.axis, spec.ratio, rng);
    case CorruptionKind::random_noise:
      return random_noise(grid, *spec.ratio, rng);
  }
  return grid;
}

/// Named evaluation setting: "Seg N%" plane cuts and "Noise N%" flips.
struct CorruptionPreset {
  std::string name;
  CorruptionKind kind;
  double ratio;
  std::optional<Axis> axis;

  CorruptionSpec spec(std::uint64_t seed) const { return {kind, ratio, axis, seed}; }
};

inline std::vector<CorruptionPreset> evaluation_presets() {
  return {
      {"seg20", CorruptionKind::plane_mask, 0.2, Axis::x},
      {"seg50", CorruptionKind::plane_mask, 0.5, Axis::x},
      {"seg80", CorruptionKind::plane_mask, 0.8, Axis::x},
      {"noise1", CorruptionKind::random_noise, 0.01, std::nullopt},
      {"noise2", CorruptionKind::random_noise, 0.02, std::nullopt},
  };
}

}  // namespace voxpatch
