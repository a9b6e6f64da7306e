#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxpatch/error.hpp"
#include "voxpatch/hash.hpp"
#include "voxpatch/random.hpp"
#include "voxpatch/shapes.hpp"
#include "voxpatch/voxb.hpp"
#include "voxpatch/voxel_grid.hpp"

namespace voxpatch {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct ShapeRecord {
  std::string id;
  std::string category;
  std::string grid_path;  // relative to the manifest directory
  std::array<std::string, 3> captions;
  Split split = Split::train;
  std::uint64_t seed = 0;
  ShapeParams params;
};

struct DatasetConfig {
  int grid = 32;
  int patch = 4;
  int shapes_per_category = 50;
  std::uint64_t seed = 1;
  std::vector<std::string> categories = shape_categories();
};

struct DatasetManifest {
  std::vector<ShapeRecord> records;
  Dims3 grid_dims{};
  Dims3 patch_dims{};
  std::uint64_t generator_seed = 0;
  int shapes_per_category = 0;
  nlohmann::json provenance = nlohmann::json::object();  // effective run config
  std::filesystem::path root;                               // directory holding the manifest

  std::vector<const ShapeRecord*> split(Split s) const {
    std::vector<const ShapeRecord*> out;
    for (const auto& r : records) {
      if (r.split == s) {
        out.push_back(&r);
      }
    }
    return out;
  }

  VoxelGrid load_grid(const ShapeRecord& r) const { return voxb::load(root / r.grid_path); }
};

/// Generates one record's grid and captions from its stored seed and category.
inline GeneratedShape regenerate(const ShapeRecord& r, int grid_side) {
  Rng rng(r.seed);
  const ShapeParams params = sample_shape_params(r.category, grid_side, rng);
  return generate_shape(r.category, params, grid_side, rng);
}

/// Builds the synthetic corpus in memory: per category, `shapes_per_category`
/// shapes, split 90/10 (rounded) at random. Grids are not written here.
inline std::pair<DatasetManifest, std::vector<VoxelGrid>> build_manifest(const DatasetConfig& config) {
  require(config.shapes_per_category >= 10, ErrorKind::ConfigError,
          "need at least 10 shapes per category, got " + std::to_string(config.shapes_per_category));
  require(!config.categories.empty(), ErrorKind::ConfigError, "no categories");
  const Dims3 grid_dims = Dims3::cube(config.grid);
  const Dims3 patch_dims = Dims3::cube(config.patch);
  patch_grid_dims(grid_dims, patch_dims);

  Rng rng(config.seed);
  DatasetManifest m;
  m.grid_dims = grid_dims;
  m.patch_dims = patch_dims;
  m.generator_seed = config.seed;
  m.shapes_per_category = config.shapes_per_category;
  std::vector<VoxelGrid> grids;
  const int n = config.shapes_per_category;
  const auto n_train = static_cast<std::size_t>(std::llround(0.9 * n));
  for (const auto& category : config.categories) {
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n));
    for (auto& s : seeds) {
      s = rng.next_u64();
    }
    std::vector<std::size_t> order = rng.sample_without_replacement(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
    std::vector<Split> splits(static_cast<std::size_t>(n), Split::test);
    for (std::size_t i = 0; i < n_train; ++i) {
      splits[order[i]] = Split::train;
    }
    for (int i = 0; i < n; ++i) {
      ShapeRecord r;
      char id[64];
      std::snprintf(id, sizeof(id), "%s_%04d", category.c_str(), i);
      r.id = id;
      r.category = category;
      r.seed = seeds[static_cast<std::size_t>(i)];
      r.split = splits[static_cast<std::size_t>(i)];
      Rng item(r.seed);
      r.params = sample_shape_params(category, config.grid, item);
      GeneratedShape shape = generate_shape(category, r.params, config.grid, item);
      r.captions = shape.captions;
      r.grid_path = "grids/" + fnv1a_hex(voxb::encode(shape.grid)) + ".voxb";
      m.records.push_back(std::move(r));
      grids.push_back(std::move(shape.grid));
    }
  }
  return {std::move(m), std::move(grids)};
}

namespace detail {

inline nlohmann::json dims_json(Dims3 d) { return nlohmann::json::array({d.x, d.y, d.z}); }

inline Dims3 dims_from_json(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 3, ErrorKind::FormatError, "dims must be a 3-array");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

}  // namespace detail

/// Line-delimited manifest: one header object, then one object per record.
inline std::string serialize_manifest(const DatasetManifest& m) {
  std::ostringstream out;
  nlohmann::json header = {
      {"format", "voxpatch-manifest"},
      {"version", 1},
      {"grid_dims", detail::dims_json(m.grid_dims)},
      {"patch_dims", detail::dims_json(m.patch_dims)},
      {"generator_seed", m.generator_seed},
      {"shapes_per_category", m.shapes_per_category},
      {"config", m.provenance},
  };
  out << header.dump() << '\n';
  for (const auto& r : m.records) {
    nlohmann::json j = {
        {"id", r.id},
        {"category", r.category},
        {"grid_path", r.grid_path},
        {"captions", r.captions},
        {"split", to_string(r.split)},
        {"seed", r.seed},
        {"params",
         {{"size", r.params.size},
          {"secondary", r.params.secondary},
          {"thickness", r.params.thickness},
          {"attributes", r.params.attributes}}},
    };
    out << j.dump() << '\n';
  }
  return out.str();
}

inline DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& root) {
  std::istringstream in(text);
  std::string line;
  DatasetManifest m;
  m.root = root;
  bool have_header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) {
        continue;
      }
      const auto j = nlohmann::json::parse(line);
      if (!have_header) {
        require(j.value("format", "") == "voxpatch-manifest", ErrorKind::FormatError, "not a manifest");
        m.grid_dims = detail::dims_from_json(j.at("grid_dims"));
        m.patch_dims = detail::dims_from_json(j.at("patch_dims"));
        m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
        m.shapes_per_category = j.at("shapes_per_category").get<int>();
        m.provenance = j.value("config", nlohmann::json::object());
        have_header = true;
        continue;
      }
      ShapeRecord r;
      r.id = j.at("id").get<std::string>();
      r.category = j.at("category").get<std::string>();
      r.grid_path = j.at("grid_path").get<std::string>();
      const auto caps = j.at("captions").get<std::vector<std::string>>();
      require(caps.size() == 3, ErrorKind::FormatError, "record " + r.id + " must carry exactly 3 captions");
      r.captions = {caps[0], caps[1], caps[2]};
      const auto split = j.at("split").get<std::string>();
      require(split == "train" || split == "test", ErrorKind::FormatError, "bad split '" + split + "'");
      r.split = split == "train" ? Split::train : Split::test;
      r.seed = j.at("seed").get<std::uint64_t>();
      const auto& p = j.at("params");
      r.params.size = p.at("size").get<double>();
      r.params.secondary = p.at("secondary").get<double>();
      r.params.thickness = p.at("thickness").get<double>();
      r.params.attributes = p.at("attributes").get<std::array<int, 2>>();
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::FormatError, std::string("manifest parse error: ") + e.what());
  }
  require(have_header, ErrorKind::FormatError, "manifest has no header line");
  return m;
}

/// Writes grids (content addressed) and manifest.jsonl under `dir`.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir, DatasetManifest& m,
                                           const std::vector<VoxelGrid>& grids) {
  require(grids.size() == m.records.size(), ErrorKind::ConfigError, "grid count does not match records");
  std::filesystem::create_directories(dir / "grids");
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto path = dir / m.records[i].grid_path;
    if (!std::filesystem::exists(path)) {
      voxb::save(path, grids[i]);
    }
  }
  m.root = dir;
  const auto manifest_path = dir / "manifest.jsonl";
  voxb::write_file(manifest_path, serialize_manifest(m));
  return manifest_path;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(voxb::read_file(path), path.parent_path());
}

enum class TrainingStage { stage1, stage2 };

struct AugmentedSample {
  VoxelGrid grid;
  std::size_t caption_index = 0;
  Axis axis = Axis::x;
  double angle_deg = 0.0;
};

/// Random rotation about a uniform axis by a uniform angle in [0, 360); stage 2
/// also picks one of the three captions uniformly, stage 1 always keeps caption 0.
inline AugmentedSample augment(const VoxelGrid& grid, TrainingStage stage, Rng& rng, double rotate_probability = 1.0) {
  AugmentedSample s;
  if (rng.uniform() < rotate_probability) {
    s.axis = static_cast<Axis>(rng.below(3));
    s.angle_deg = rng.uniform(0.0, 360.0);
    s.grid = rotate(grid, s.axis, s.angle_deg);
  } else {
    s.grid = grid;
  }
  if (stage == TrainingStage::stage2) {
    s.caption_index = static_cast<std::size_t>(rng.below(3));
  }
  return s;
}

}  // namespace voxpatch
