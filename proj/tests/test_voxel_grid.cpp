#include <gtest/gtest.h>

#include "voxpatch/random.hpp"
#include "voxpatch/voxb.hpp"
#include "voxpatch/voxel_grid.hpp"

using namespace voxpatch;

namespace {

VoxelGrid random_grid(Dims3 dims, double density, Rng& rng) {
  VoxelGrid g(dims);
  for (std::size_t i = 0; i < g.size(); ++i) g.set_linear(i, rng.bernoulli(density));
  return g;
}

}  // namespace

TEST(VoxelGrid, CanonicalLinearIndex) {
  VoxelGrid g({3, 4, 5});
  EXPECT_EQ(g.index(1, 2, 3), 1u * 4 * 5 + 2u * 5 + 3);
  g.set(2, 3, 4);
  EXPECT_TRUE(g[g.size() - 1]);
}

TEST(VoxelGrid, RejectsNonPositiveDims) {
  EXPECT_THROW(VoxelGrid({0, 4, 4}), Error);
}

TEST(Patchify, PaperShapeYields512Patches) {
  const auto seq = patchify(VoxelGrid(Dims3::cube(64)), Dims3::cube(8));
  EXPECT_EQ(seq.size(), 512u);
  EXPECT_EQ(seq.patch_grid, Dims3::cube(8));
}

TEST(Patchify, ZeroGridGivesZeroPatches) {
  const auto seq = patchify(VoxelGrid(Dims3::cube(16)), Dims3::cube(4));
  ASSERT_EQ(seq.size(), 64u);
  for (const auto& p : seq.patches) EXPECT_EQ(occupied_count(p), 0u);
}

TEST(Patchify, SingleVoxelLandsInPatch100) {
  VoxelGrid g(Dims3::cube(16));
  g.set(9, 0, 0);
  const auto seq = patchify(g, Dims3::cube(8));
  ASSERT_EQ(seq.size(), 8u);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      for (int k = 0; k < 2; ++k) {
        const auto& p = seq.patches[seq.index(i, j, k)];
        if (i == 1 && j == 0 && k == 0) {
          EXPECT_EQ(occupied_count(p), 1u);
          EXPECT_TRUE(p.at(1, 0, 0));
        } else {
          EXPECT_EQ(occupied_count(p), 0u);
        }
      }
    }
  }
  const auto back = depatchify(seq, Dims3::cube(8));
  EXPECT_EQ(occupied_count(back), 1u);
  EXPECT_TRUE(back.at(9, 0, 0));
}

TEST(Patchify, RejectsNonDivisibleAndZeroDims) {
  VoxelGrid g(Dims3::cube(10));
  EXPECT_THROW(patchify(g, Dims3::cube(4)), Error);
  EXPECT_THROW(patchify(g, {0, 5, 5}), Error);
  try {
    patchify(g, Dims3::cube(3));
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
}

TEST(Patchify, NonCubicPatchesRoundTrip) {
  Rng rng(3);
  const auto g = random_grid({8, 12, 6}, 0.3, rng);
  const auto seq = patchify(g, {4, 3, 2});
  EXPECT_EQ(seq.size(), 2u * 4u * 3u);
  EXPECT_EQ(depatchify(seq, {4, 3, 2}), g);
}

TEST(Depatchify, AllZeroPatchesMakeZeroGrid) {
  PatchSequence seq;
  seq.patch_grid = Dims3::cube(8);
  seq.patch_dims = Dims3::cube(8);
  seq.patches.assign(512, Patch(Dims3::cube(8)));
  const auto g = depatchify(seq, Dims3::cube(8));
  EXPECT_EQ(g.dims(), Dims3::cube(64));
  EXPECT_EQ(occupied_count(g), 0u);
}

TEST(Depatchify, RejectsInconsistentLength) {
  PatchSequence seq;
  seq.patch_grid = Dims3::cube(2);
  seq.patch_dims = Dims3::cube(4);
  seq.patches.assign(7, Patch(Dims3::cube(4)));
  EXPECT_THROW(depatchify(seq, Dims3::cube(4)), Error);
}

TEST(PatchifyProperty, RoundTripAndPartition) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 4 * static_cast<int>(rng.range(1, 6));
    const int pch = (trial % 2 == 0) ? 4 : 2;
    const auto g = random_grid(Dims3::cube(n), rng.uniform(), rng);
    const auto seq = patchify(g, Dims3::cube(pch));
    std::size_t total = 0;
    for (const auto& p : seq.patches) total += occupied_count(p);
    EXPECT_EQ(total, occupied_count(g));
    EXPECT_EQ(depatchify(seq, Dims3::cube(pch)), g);
  }
}

TEST(Rotate, FullTurnIsIdentity) {
  Rng rng(5);
  const auto g = random_grid({6, 7, 8}, 0.4, rng);
  for (Axis a : {Axis::x, Axis::y, Axis::z}) EXPECT_EQ(rotate(g, a, 360.0), g);
}

TEST(Rotate, QuarterTurnAboutZMovesVoxelByHand) {
  VoxelGrid g(Dims3::cube(8));
  g.set(1, 2, 3);
  const auto r = rotate(g, Axis::z, 90.0);
  EXPECT_EQ(occupied_count(r), 1u);
  // (x, y, z) -> (W-1-y, x, z) = (5, 1, 3)
  EXPECT_TRUE(r.at(5, 1, 3));
}

TEST(Rotate, QuarterTurnsMatchNearestNeighborPath) {
  // The generic path at 90.0000001 degrees must land on the exact permutation.
  Rng rng(8);
  const auto g = random_grid(Dims3::cube(9), 0.3, rng);
  for (Axis a : {Axis::x, Axis::y, Axis::z}) {
    EXPECT_EQ(rotate(g, a, 90.0 + 1e-6), rotate(g, a, 90.0));
  }
}

TEST(Rotate, QuarterTurnsPreserveCountOnNonCubic) {
  Rng rng(9);
  const auto g = random_grid({5, 7, 9}, 0.3, rng);
  for (Axis a : {Axis::x, Axis::y, Axis::z}) {
    for (int k = -3; k <= 5; ++k) {
      const auto r = rotate(g, a, 90.0 * k);
      EXPECT_EQ(occupied_count(r), occupied_count(g));
    }
    EXPECT_EQ(rotate(rotate(g, a, 90.0), a, 270.0), g);
  }
}

TEST(Rotate, HalfTurnAboutXPreservesCount) {
  Rng rng(2);
  const auto g = random_grid(Dims3::cube(16), 0.2, rng);
  EXPECT_EQ(occupied_count(rotate(g, Axis::x, 180.0)), occupied_count(g));
}

TEST(Rotate, ArbitraryAngleNeedsCubicGrid) {
  VoxelGrid g({4, 4, 6});
  try {
    rotate(g, Axis::y, 33.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnsupportedRotation);
  }
}

TEST(Rotate, ArbitraryAngleKeepsCenterVoxelAndStaysBinary) {
  VoxelGrid g(Dims3::cube(9));
  g.set(4, 4, 4);
  const auto r = rotate(g, Axis::x, 37.0);
  EXPECT_TRUE(r.at(4, 4, 4));
  EXPECT_EQ(occupied_count(r), 1u);
  EXPECT_EQ(rotate(g, Axis::z, 0.0), g);
}

TEST(Iou, SpotValues) {
  VoxelGrid a(Dims3::cube(4));
  VoxelGrid b(Dims3::cube(4));
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0);
  a.set(0, 0, 0);
  b.set(0, 0, 0);
  b.set(1, 0, 0);
  EXPECT_DOUBLE_EQ(iou(a, b), 0.5);
  EXPECT_DOUBLE_EQ(iou(b, a), 0.5);
  EXPECT_DOUBLE_EQ(iou(b, b), 1.0);
  EXPECT_THROW(iou(a, VoxelGrid(Dims3::cube(3))), Error);
}

TEST(IouProperty, SymmetricAndOneIffEqual) {
  Rng rng(21);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_grid(Dims3::cube(6), 0.3, rng);
    auto b = a;
    if (t % 2 == 0) b.flip_linear(rng.below(b.size()));
    EXPECT_DOUBLE_EQ(iou(a, b), iou(b, a));
    EXPECT_EQ(iou(a, b) == 1.0, a == b);
  }
}

TEST(Voxb, KnownBytesAndRoundTrip) {
  VoxelGrid g({1, 1, 9});
  g.set(0, 0, 0);
  g.set(0, 0, 8);
  const std::string bytes = voxb::encode(g);
  ASSERT_EQ(bytes.size(), voxb::kHeaderSize + 2);
  EXPECT_EQ(bytes.substr(0, 4), "VOXB");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[14]), 9);
  EXPECT_EQ(static_cast<unsigned char>(bytes[18]), 0x01);
  EXPECT_EQ(static_cast<unsigned char>(bytes[19]), 0x01);
  EXPECT_EQ(voxb::decode(bytes), g);

  Rng rng(4);
  const auto r = random_grid({5, 6, 7}, 0.5, rng);
  EXPECT_EQ(voxb::decode(voxb::encode(r)), r);
}

TEST(Voxb, RejectsBadInput) {
  std::string bytes = voxb::encode(VoxelGrid(Dims3::cube(4)));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(voxb::decode(bad_magic), Error);
  std::string bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(voxb::decode(bad_version), Error);
  EXPECT_THROW(voxb::decode(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(voxb::decode("VOX"), Error);
}
