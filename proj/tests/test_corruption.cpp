#include <gtest/gtest.h>

#include <set>

#include "voxpatch/corruption.hpp"

using namespace voxpatch;

namespace {

VoxelGrid random_grid(Dims3 dims, double density, Rng& rng) {
  VoxelGrid g(dims);
  for (std::size_t i = 0; i < g.size(); ++i) g.set_linear(i, rng.bernoulli(density));
  return g;
}

bool subset(const VoxelGrid& a, const VoxelGrid& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && !b[i]) return false;
  }
  return true;
}

std::size_t xor_count(const VoxelGrid& a, const VoxelGrid& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

// Independent oracle: for every candidate cut count the removed voxels directly
// and keep the one with the smallest removal that still meets the target.
std::size_t oracle_plane_removed(const VoxelGrid& g, Axis axis, double fraction) {
  const std::size_t total = occupied_count(g);
  std::size_t best = total;
  for (int c = -1; c < 64; ++c) {
    std::size_t removed = 0;
    for (int x = 0; x < g.dims().x; ++x)
      for (int y = 0; y < g.dims().y; ++y)
        for (int z = 0; z < g.dims().z; ++z) {
          const int coord = axis == Axis::x ? x : axis == Axis::y ? y : z;
          if (coord > c && g.at(x, y, z)) ++removed;
        }
    if (static_cast<double>(removed) >= fraction * static_cast<double>(total)) best = std::min(best, removed);
  }
  return best;
}

}  // namespace

TEST(RandomMask, ZeroesExactlyRoundedCount) {
  Rng data(1);
  VoxelGrid g(Dims3::cube(32));
  for (std::size_t i = 0; i < g.size(); ++i) g.set_linear(i, true);
  const auto seq = patchify(g, Dims3::cube(4));
  ASSERT_EQ(seq.size(), 512u);
  Rng rng(7);
  const auto out = random_mask(seq, 0.5, rng);
  std::size_t zeroed = 0;
  for (const auto& p : out.patches) zeroed += occupied_count(p) == 0;
  EXPECT_EQ(zeroed, 256u);
}

TEST(RandomMask, RatioZeroIsIdentity) {
  Rng data(2);
  const auto seq = patchify(random_grid(Dims3::cube(16), 0.3, data), Dims3::cube(4));
  Rng rng(1);
  EXPECT_EQ(random_mask(seq, 0.0, rng), seq);
}

TEST(RandomMask, SeededSelectionIsReproducibleAndLeavesOthersIntact) {
  Rng data(3);
  VoxelGrid g(Dims3::cube(16));
  for (std::size_t i = 0; i < g.size(); ++i) g.set_linear(i, true);
  const auto seq = patchify(g, Dims3::cube(4));
  ASSERT_EQ(seq.size(), 64u);
  Rng r1(99);
  Rng r2(99);
  const auto a = random_mask(seq, 0.25, r1);
  const auto b = random_mask(seq, 0.25, r2);
  EXPECT_EQ(a, b);
  std::set<std::size_t> zeroed;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (occupied_count(a.patches[i]) == 0) {
      zeroed.insert(i);
    } else {
      EXPECT_EQ(a.patches[i], seq.patches[i]);
    }
  }
  EXPECT_EQ(zeroed.size(), 16u);
  // The reference draw with the same seeded generator selects the same set.
  Rng r3(99);
  const auto ref = r3.sample_without_replacement(64, 16);
  EXPECT_EQ(zeroed, std::set<std::size_t>(ref.begin(), ref.end()));
}

TEST(RandomMask, RejectsBadRatio) {
  const auto seq = patchify(VoxelGrid(Dims3::cube(8)), Dims3::cube(4));
  Rng rng(1);
  try {
    random_mask(seq, 1.5, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidRatio);
  }
  EXPECT_THROW(random_mask(seq, -0.1, rng), Error);
}

TEST(PlaneMask, FractionZeroIsIdentity) {
  Rng data(4);
  const auto g = random_grid(Dims3::cube(16), 0.2, data);
  Rng rng(1);
  EXPECT_EQ(plane_mask(g, Axis::x, 0.0, rng), g);
}

TEST(PlaneMask, UniformBarHalfCut) {
  VoxelGrid g(Dims3::cube(64));
  for (int x = 10; x <= 49; ++x)
    for (int y = 20; y < 24; ++y)
      for (int z = 30; z < 34; ++z) g.set(x, y, z);
  Rng rng(1);
  const auto out = plane_mask(g, Axis::x, 0.5, rng);
  for (int x = 0; x < 64; ++x) {
    const bool any = out.at(x, 21, 31);
    EXPECT_EQ(any, x >= 10 && x <= 29) << "x=" << x;
  }
  EXPECT_EQ(occupied_count(out) * 2, occupied_count(g));
}

TEST(PlaneMask, MatchesBruteForceCutOnRandomGrids) {
  Rng data(5);
  for (int t = 0; t < 30; ++t) {
    const auto g = random_grid({10, 12, 9}, 0.05 + 0.3 * data.uniform(), data);
    if (occupied_count(g) == 0) continue;
    const Axis axis = static_cast<Axis>(t % 3);
    for (double f : {0.2, 0.5, 0.8, 1.0}) {
      Rng rng(1);
      const auto out = plane_mask(g, axis, f, rng);
      EXPECT_TRUE(subset(out, g));
      EXPECT_EQ(occupied_count(g) - occupied_count(out), oracle_plane_removed(g, axis, f));
    }
  }
}

TEST(PlaneMask, SampledCutStaysInsideExtentAndIsDeterministic) {
  Rng data(6);
  const auto g = random_grid(Dims3::cube(12), 0.2, data);
  for (int s = 0; s < 20; ++s) {
    Rng r1(static_cast<std::uint64_t>(s));
    Rng r2(static_cast<std::uint64_t>(s));
    const auto a = plane_mask(g, Axis::y, std::nullopt, r1);
    EXPECT_EQ(a, plane_mask(g, Axis::y, std::nullopt, r2));
    EXPECT_TRUE(subset(a, g));
    EXPECT_GT(occupied_count(a), 0u);  // the cut is at or above the first occupied slab
  }
}

TEST(PlaneMask, EmptyGridIsAnError) {
  Rng rng(1);
  try {
    plane_mask(VoxelGrid(Dims3::cube(8)), Axis::z, 0.5, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyGrid);
  }
}

TEST(RandomNoise, FlipsExactCount) {
  Rng data(7);
  const auto g = random_grid(Dims3::cube(64), 0.1, data);
  Rng rng(3);
  const auto out = random_noise(g, 0.01, rng);
  EXPECT_EQ(xor_count(g, out), 2621u);
  Rng rng0(3);
  EXPECT_EQ(random_noise(g, 0.0, rng0), g);
}

TEST(RandomNoise, PropertyFlipCountEqualsRoundedLevel) {
  Rng data(8);
  for (int t = 0; t < 25; ++t) {
    const auto g = random_grid({7, 9, 11}, data.uniform(), data);
    const double level = data.uniform();
    Rng rng(static_cast<std::uint64_t>(t));
    EXPECT_EQ(xor_count(g, random_noise(g, level, rng)),
              static_cast<std::size_t>(std::llround(level * static_cast<double>(g.size()))));
  }
}

TEST(SampleCorruption, StrategiesAreEquallyLikely) {
  Rng rng(2024);
  TrainRanges ranges;
  std::array<int, 3> counts{};
  for (int i = 0; i < 30000; ++i) {
    const auto spec = sample_corruption(rng, ranges);
    spec.validate();
    ++counts[static_cast<std::size_t>(spec.kind)];
  }
  for (int c : counts) {
    const double f = c / 30000.0;
    EXPECT_GE(f, 0.323);
    EXPECT_LE(f, 0.343);
  }
}

TEST(SampleCorruption, DegenerateRangeAndDeterminism) {
  TrainRanges ranges;
  ranges.mask_min = ranges.mask_max = 0.5;
  Rng a(5);
  Rng b(5);
  for (int i = 0; i < 200; ++i) {
    const auto sa = sample_corruption(a, ranges);
    const auto sb = sample_corruption(b, ranges);
    EXPECT_EQ(sa, sb);
    if (sa.kind == CorruptionKind::random_mask) EXPECT_EQ(*sa.ratio, 0.5);
    if (sa.kind == CorruptionKind::random_noise) {
      EXPECT_GE(*sa.ratio, ranges.noise_min);
      EXPECT_LE(*sa.ratio, ranges.noise_max);
    }
  }
}

TEST(ApplyCorruption, DeterministicAndMaskingNeverCreatesOccupancy) {
  Rng data(9);
  const auto g = random_grid(Dims3::cube(16), 0.15, data);
  Rng rng(77);
  for (int i = 0; i < 60; ++i) {
    const auto spec = sample_corruption(rng, {});
    const auto a = apply_corruption(spec, g, Dims3::cube(4));
    EXPECT_EQ(a, apply_corruption(spec, g, Dims3::cube(4)));
    if (spec.kind != CorruptionKind::random_noise) EXPECT_TRUE(subset(a, g));
  }
}

TEST(CorruptionSpec, ValidateEnforcesAxisRule) {
  CorruptionSpec s{CorruptionKind::random_mask, 0.3, Axis::x, 1};
  EXPECT_THROW(s.validate(), Error);
  CorruptionSpec p{CorruptionKind::plane_mask, std::nullopt, Axis::x, 1};
  EXPECT_NO_THROW(p.validate());
  CorruptionSpec n{CorruptionKind::random_noise, std::nullopt, std::nullopt, 1};
  EXPECT_THROW(n.validate(), Error);
}

TEST(Presets, MatchEvaluationTable) {
  const auto presets = evaluation_presets();
  ASSERT_EQ(presets.size(), 5u);
  EXPECT_DOUBLE_EQ(presets[0].ratio, 0.2);
  EXPECT_DOUBLE_EQ(presets[1].ratio, 0.5);
  EXPECT_DOUBLE_EQ(presets[2].ratio, 0.8);
  EXPECT_DOUBLE_EQ(presets[3].ratio, 0.01);
  EXPECT_DOUBLE_EQ(presets[4].ratio, 0.02);
}
