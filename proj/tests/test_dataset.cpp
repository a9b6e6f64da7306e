#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "voxpatch/dataset.hpp"
#include "voxpatch/shapes.hpp"

using namespace voxpatch;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("voxpatch_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Shapes, SpherePodMatchesDiscreteBall) {
  ShapeParams params;
  params.size = 6.0;
  params.secondary = 1.0;
  Rng rng(1);
  auto shape = generate_shape("sphere_pod", params, 32, rng);
  std::size_t ball = 0;
  for (int x = -6; x <= 6; ++x) {
    for (int y = -6; y <= 6; ++y) {
      for (int z = -6; z <= 6; ++z) {
        if (x * x + y * y + z * z <= 36) ++ball;
      }
    }
  }
  const double count = static_cast<double>(occupied_count(shape.grid));
  EXPECT_NEAR(count, static_cast<double>(ball), 0.02 * static_cast<double>(ball));
}

TEST(Shapes, RejectsDegenerateAndUnknown) {
  ShapeParams params;
  params.size = 0.0;
  Rng rng(1);
  try {
    generate_shape("sphere_pod", params, 32, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyShape);
  }
  params.size = 4.0;
  try {
    generate_shape("teapot", params, 32, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnknownCategory);
  }
}

TEST(Shapes, FillBoundsConnectivityAndDeterminism) {
  for (int n : {16, 32}) {
    Rng rng(9);
    for (const auto& cat : shape_categories()) {
      for (int i = 0; i < 8; ++i) {
        const std::uint64_t seed = rng.next_u64();
        Rng a(seed), b(seed);
        auto pa = sample_shape_params(cat, n, a);
        auto ga = generate_shape(cat, pa, n, a);
        auto gb = generate_shape(cat, sample_shape_params(cat, n, b), n, b);
        EXPECT_EQ(ga.grid, gb.grid);
        EXPECT_EQ(ga.captions, gb.captions);
        const double fill = static_cast<double>(occupied_count(ga.grid)) / static_cast<double>(ga.grid.size());
        EXPECT_GE(fill, 0.01) << cat << " n=" << n;
        EXPECT_LE(fill, 0.60) << cat << " n=" << n;
        EXPECT_TRUE(is_connected(ga.grid)) << cat << " n=" << n;
        std::string noun = cat;
        std::replace(noun.begin(), noun.end(), '_', ' ');
        for (const auto& c : ga.captions) EXPECT_NE(c.find(noun), std::string::npos) << c;
      }
    }
  }
}

TEST(Dataset, SplitCountsAndDeterminism) {
  DatasetConfig cfg;
  cfg.grid = 16;
  cfg.shapes_per_category = 100;
  cfg.seed = 5;
  auto [m, grids] = build_manifest(cfg);
  EXPECT_EQ(m.split(Split::train).size(), 450u);
  EXPECT_EQ(m.split(Split::test).size(), 50u);
  std::set<std::string> ids;
  for (const auto& r : m.records) ids.insert(r.id);
  EXPECT_EQ(ids.size(), 500u);

  auto again = build_manifest(cfg);
  EXPECT_EQ(serialize_manifest(m), serialize_manifest(again.first));

  cfg.shapes_per_category = 9;
  try {
    build_manifest(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
  }
}

TEST(Dataset, WriteLoadAndRegenerate) {
  DatasetConfig cfg;
  cfg.grid = 16;
  cfg.shapes_per_category = 10;
  auto [m, grids] = build_manifest(cfg);
  auto dir = scratch("dataset");
  auto path = write_dataset(dir, m, grids);
  auto loaded = load_manifest(path);
  EXPECT_EQ(serialize_manifest(loaded), serialize_manifest(m));
  ASSERT_EQ(loaded.records.size(), grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto& r = loaded.records[i];
    EXPECT_TRUE(std::filesystem::exists(dir / r.grid_path));
    EXPECT_EQ(loaded.load_grid(r), grids[i]);
    EXPECT_EQ(regenerate(r, 16).grid, grids[i]);
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, AugmentationRules) {
  DatasetConfig cfg;
  cfg.grid = 16;
  cfg.shapes_per_category = 10;
  auto [m, grids] = build_manifest(cfg);
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(augment(grids[0], TrainingStage::stage1, rng).caption_index, 0u);
  }
  EXPECT_EQ(rotate(grids[0], Axis::y, 0.0), grids[0]);
  std::array<int, 3> counts{};
  for (int i = 0; i < 3000; ++i) ++counts[augment(grids[0], TrainingStage::stage2, rng, 0.0).caption_index];
  for (int c : counts) {
    EXPECT_GE(c / 3000.0, 0.306);
    EXPECT_LE(c / 3000.0, 0.360);
  }
}
