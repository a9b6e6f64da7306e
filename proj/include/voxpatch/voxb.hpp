#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "voxpatch/error.hpp"
#include "voxpatch/voxel_grid.hpp"

// VOXB: "VOXB", u16 version (=1), u32 H, W, D (little endian), then
// ceil(H*W*D/8) bytes of occupancy bits in canonical cell order, LSB first.
namespace voxpatch::voxb {

inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 4 + 2 + 12;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}
inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline std::string encode(const VoxelGrid& grid) {
  std::string out = "VOXB";
  detail::put_u16(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(grid.dims().x));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.dims().y));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.dims().z));
  std::string payload((grid.size() + 7) / 8, '\0');
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i]) {
      payload[i / 8] = static_cast<char>(static_cast<unsigned char>(payload[i / 8]) | (1u << (i % 8)));
    }
  }
  return out + payload;
}

inline VoxelGrid decode(const std::string& bytes) {
  require(bytes.size() >= kHeaderSize, ErrorKind::FormatError, "VOXB header truncated");
  require(bytes.compare(0, 4, "VOXB") == 0, ErrorKind::FormatError, "bad VOXB magic");
  const auto version = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[4]) |
                                                  (static_cast<unsigned char>(bytes[5]) << 8));
  require(version == kVersion, ErrorKind::FormatError,
          "unsupported VOXB version " + std::to_string(version));
  const std::uint32_t h = detail::get_u32(bytes, 6);
  const std::uint32_t w = detail::get_u32(bytes, 10);
  const std::uint32_t d = detail::get_u32(bytes, 14);
  require(h > 0 && w > 0 && d > 0 && h <= 4096 && w <= 4096 && d <= 4096, ErrorKind::FormatError,
          "VOXB dims out of range");
  const Dims3 dims{static_cast<int>(h), static_cast<int>(w), static_cast<int>(d)};
  const std::size_t cells = dims.volume();
  require(bytes.size() >= kHeaderSize + (cells + 7) / 8, ErrorKind::FormatError, "VOXB payload truncated");
  std::vector<std::uint8_t> occ(cells);
  for (std::size_t i = 0; i < cells; ++i) {
    occ[i] = (static_cast<unsigned char>(bytes[kHeaderSize + i / 8]) >> (i % 8)) & 1u;
  }
  return VoxelGrid(dims, std::move(occ));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::FileError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::FileError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::FileError, "short write to " + path.string());
}

inline VoxelGrid load(const std::filesystem::path& path) { return decode(read_file(path)); }

inline void save(const std::filesystem::path& path, const VoxelGrid& grid) { write_file(path, encode(grid)); }

}  // namespace voxpatch::voxb
