#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxpatch/error.hpp"
#include "voxpatch/hash.hpp"
#include "voxpatch/nn.hpp"
#include "voxpatch/voxb.hpp"

namespace voxpatch {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Pipeline state: a JSON config/provenance block plus named float32 tensors.
///
/// Layout (little endian):
///   "VXPCKPT\0" | u32 version | u32 json_len | json |
///   u32 count | { u32 name_len | name | u32 rows | u32 cols | f32[rows*cols] }* |
///   u64 fnv1a of everything before it
struct Checkpoint {
  static constexpr char kMagic[8] = {'V', 'X', 'P', 'C', 'K', 'P', 'T', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  bool has_namespace(const std::string& prefix) const {
    auto it = tensors.lower_bound(prefix);
    return it != tensors.end() && it->first.starts_with(prefix);
  }

  /// Copies every parameter under `prefix` out of a parameter set.
  template <class T>
  void store(const nn::ParamSet<T>& ps, const std::string& prefix = "") {
    for (auto it = tensors.lower_bound(prefix); it != tensors.end() && it->first.starts_with(prefix);) {
      it = tensors.erase(it);
    }
    for (const auto& [name, v] : ps.all()) {
      if (!name.starts_with(prefix)) continue;
      Tensor t{v.rows(), v.cols(), std::vector<float>(v.size())};
      for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v.value()[i]);
      tensors[name] = std::move(t);
    }
  }

  /// Overwrites every parameter under `prefix` in `ps` with stored values.
  /// All of them must be present with matching shapes.
  template <class T>
  void restore(nn::ParamSet<T>& ps, const std::string& prefix) const {
    for (const auto& [name, v] : ps.all()) {
      if (!name.starts_with(prefix)) continue;
      auto it = tensors.find(name);
      require(it != tensors.end(), ErrorKind::ConfigMismatch, "checkpoint has no tensor " + name);
      const Tensor& t = it->second;
      require(t.rows == v.rows() && t.cols == v.cols(), ErrorKind::ConfigMismatch,
              name + ": checkpoint shape " + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                  " vs model " + std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
      auto& dst = ps.get(name).value();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t.data[i]);
    }
  }

  std::string serialize() const {
    std::string out(kMagic, sizeof kMagic);
    put_u32(out, kVersion);
    const std::string js = config.dump();
    put_u32(out, static_cast<std::uint32_t>(js.size()));
    out += js;
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put_u32(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      put_u32(out, static_cast<std::uint32_t>(t.rows));
      put_u32(out, static_cast<std::uint32_t>(t.cols));
      for (float f : t.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
    Fnv1a h;
    h.update(std::string_view(out));
    put_u64(out, h.digest());
    return out;
  }

  static Checkpoint parse(const std::string& bytes) {
    auto corrupt = [](const std::string& why) { fail(ErrorKind::CorruptCheckpoint, why); };
    if (bytes.size() < sizeof kMagic + 4 + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
      corrupt("bad magic or truncated header");
    }
    const std::size_t body = bytes.size() - 8;
    Fnv1a h;
    h.update(std::string_view(bytes).substr(0, body));
    if (h.digest() != get_u64(bytes, body)) corrupt("checksum mismatch (truncated or modified file)");

    std::size_t at = sizeof kMagic;
    auto need = [&](std::size_t n) {
      if (at + n > body) corrupt("unexpected end of data");
    };
    auto u32 = [&] {
      need(4);
      auto v = voxb::detail::get_u32(bytes, at);
      at += 4;
      return v;
    };
    const auto version = u32();
    if (version != kVersion) {
      fail(ErrorKind::ConfigMismatch, "version: checkpoint has " + std::to_string(version) + ", reader supports " +
                                          std::to_string(kVersion));
    }
    Checkpoint c;
    const auto js_len = u32();
    need(js_len);
    try {
      c.config = nlohmann::json::parse(bytes.substr(at, js_len));
    } catch (const nlohmann::json::exception& e) {
      corrupt(std::string("config block: ") + e.what());
    }
    at += js_len;
    const auto count = u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = u32();
      need(name_len);
      std::string name = bytes.substr(at, name_len);
      at += name_len;
      Tensor t;
      t.rows = static_cast<int>(u32());
      t.cols = static_cast<int>(u32());
      const std::size_t n = static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols);
      need(n * 4);
      t.data.resize(n);
      for (std::size_t k = 0; k < n; ++k) t.data[k] = std::bit_cast<float>(u32());
      c.tensors.emplace(std::move(name), std::move(t));
    }
    if (at != body) corrupt("trailing bytes before checksum");
    return c;
  }

  void save(const std::filesystem::path& path) const { voxb::write_file(path, serialize()); }
  static Checkpoint load(const std::filesystem::path& path) { return parse(voxb::read_file(path)); }

  std::string hash() const { return fnv1a_hex(serialize()); }

 private:
  static void put_u32(std::string& out, std::uint32_t v) { voxb::detail::put_u32(out, v); }
  static void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  static std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
  }
};

}  // namespace voxpatch
