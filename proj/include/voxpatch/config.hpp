#pragma once

#include <charconv>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxpatch/error.hpp"
#include "voxpatch/voxb.hpp"

namespace voxpatch {

/// Every tunable of the pipeline. Layering: defaults < checkpoint < file < flags.
struct RunConfig {
  // data
  long long seed = 1;
  int grid = 32;
  int patch = 4;
  int shapes = 50;  // per category
  double aug_rotate = 1.0;

  // patch VAE
  int latent_dim = 32;
  int vae_hidden = 64;
  double vae_beta = 1e-4;
  int vae_epochs = 60;
  int vae_steps = 0;
  double vae_lr = 1e-3;
  int vae_batch = 128;

  // language model
  int lm_layers = 6;
  int lm_dim = 128;
  int lm_heads = 4;
  int lm_ff = 512;
  int lm_context = 0;  // 0 = patches + 64
  int lm_epochs = 60;
  int lm_steps = 0;
  double lm_lr = 1e-3;
  int lm_batch = 16;

  // adapters and projections
  int lora_rank = 4;
  double lora_alpha = 4.0;
  double lora_dropout = 0.05;
  int oproj_ff = 256;
  int oproj_heads = 4;
  int mlp_hidden = 64;

  // stages
  int stage1_epochs = 8;
  int stage1_steps = 0;
  double stage1_lr = 3e-4;
  int stage1_batch = 4;
  int stage2_epochs = 40;
  int stage2_steps = 0;
  double stage2_lr = 5e-4;
  int stage2_batch = 4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double mask_min = 0.1;
  double mask_max = 0.8;
  double noise_min = 0.005;
  double noise_max = 0.02;
  int log_every = 10;

  // inference
  double threshold = 0.5;
  int refine_steps = 2;

  int patches_per_axis() const { return grid / patch; }
  int patches() const { return patches_per_axis() * patches_per_axis() * patches_per_axis(); }
  int context() const { return lm_context > 0 ? lm_context : patches() + 64; }

  void validate() const {
    require(grid > 0 && patch > 0, ErrorKind::ConfigError, "grid and patch must be positive");
    require(grid % patch == 0, ErrorKind::DimensionMismatch,
            "grid " + std::to_string(grid) + " is not divisible by patch " + std::to_string(patch));
    require(patch % 4 == 0, ErrorKind::ConfigError, "patch must be a multiple of 4");
    require(mask_min >= 0.0 && mask_min <= mask_max && mask_max <= 1.0, ErrorKind::InvalidRatio, "bad mask range");
    require(noise_min >= 0.0 && noise_min <= noise_max && noise_max <= 1.0, ErrorKind::InvalidRatio, "bad noise range");
    require(threshold > 0.0 && threshold < 1.0, ErrorKind::ConfigError, "threshold must lie in (0,1)");
    require(refine_steps >= 1, ErrorKind::ConfigError, "refine_steps must be >= 1");
    for (int b : {vae_batch, lm_batch, stage1_batch, stage2_batch}) {
      require(b > 0, ErrorKind::ConfigError, "batch sizes must be positive");
    }
  }

  // ---- key/value access ------------------------------------------------------

  using Ref = std::variant<long long*, int*, double*>;

  /// Keys fixed by a checkpoint: a file or flag may not change them.
  static const std::set<std::string>& model_keys() {
    static const std::set<std::string> keys{"grid",    "patch",    "latent_dim", "vae_hidden", "lm_layers",
                                            "lm_dim",  "lm_heads", "lm_ff",      "lm_context", "lora_rank",
                                            "lora_alpha", "oproj_ff", "oproj_heads", "mlp_hidden"};
    return keys;
  }

  std::map<std::string, Ref> fields() {
    return {{"seed", &seed},
            {"grid", &grid},
            {"patch", &patch},
            {"shapes", &shapes},
            {"aug_rotate", &aug_rotate},
            {"latent_dim", &latent_dim},
            {"vae_hidden", &vae_hidden},
            {"vae_beta", &vae_beta},
            {"vae_epochs", &vae_epochs},
            {"vae_steps", &vae_steps},
            {"vae_lr", &vae_lr},
            {"vae_batch", &vae_batch},
            {"lm_layers", &lm_layers},
            {"lm_dim", &lm_dim},
            {"lm_heads", &lm_heads},
            {"lm_ff", &lm_ff},
            {"lm_context", &lm_context},
            {"lm_epochs", &lm_epochs},
            {"lm_steps", &lm_steps},
            {"lm_lr", &lm_lr},
            {"lm_batch", &lm_batch},
            {"lora_rank", &lora_rank},
            {"lora_alpha", &lora_alpha},
            {"lora_dropout", &lora_dropout},
            {"oproj_ff", &oproj_ff},
            {"oproj_heads", &oproj_heads},
            {"mlp_hidden", &mlp_hidden},
            {"stage1_epochs", &stage1_epochs},
            {"stage1_steps", &stage1_steps},
            {"stage1_lr", &stage1_lr},
            {"stage1_batch", &stage1_batch},
            {"stage2_epochs", &stage2_epochs},
            {"stage2_steps", &stage2_steps},
            {"stage2_lr", &stage2_lr},
            {"stage2_batch", &stage2_batch},
            {"weight_decay", &weight_decay},
            {"clip_norm", &clip_norm},
            {"mask_min", &mask_min},
            {"mask_max", &mask_max},
            {"noise_min", &noise_min},
            {"noise_max", &noise_max},
            {"log_every", &log_every},
            {"threshold", &threshold},
            {"refine_steps", &refine_steps}};
  }

  std::map<std::string, Ref> fields() const { return const_cast<RunConfig*>(this)->fields(); }

  /// Parses `value` into `key`; unknown keys and malformed numbers are ConfigError.
  void set(const std::string& key, const std::string& value) {
    auto all = fields();
    auto it = all.find(key);
    require(it != all.end(), ErrorKind::ConfigError, "unknown config key '" + key + "'");
    std::visit(
        [&](auto* p) {
          using V = std::remove_pointer_t<decltype(p)>;
          V parsed{};
          const char* first = value.data();
          const char* last = value.data() + value.size();
          while (first != last && std::isspace(static_cast<unsigned char>(*first))) ++first;
          while (last != first && std::isspace(static_cast<unsigned char>(last[-1]))) --last;
          auto [ptr, ec] = std::from_chars(first, last, parsed);
          require(ec == std::errc{} && ptr == last && first != last, ErrorKind::ConfigError,
                  "bad value '" + value + "' for " + key);
          *p = parsed;
        },
        it->second);
    explicit_keys.insert(key);
  }

  std::string get(const std::string& key) const {
    auto all = fields();
    auto it = all.find(key);
    require(it != all.end(), ErrorKind::ConfigError, "unknown config key '" + key + "'");
    return std::visit([](auto* p) { return nlohmann::json(*p).dump(); }, it->second);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, ref] : fields()) {
      std::visit([&](auto* p) { j[key] = *p; }, ref);
    }
    return j;
  }

  /// Overlays values from a JSON object (e.g. a checkpoint's config block).
  /// Keys not known to this build are ignored.
  void merge_json(const nlohmann::json& j) {
    for (auto& [key, ref] : fields()) {
      if (!j.contains(key)) continue;
      std::visit([&](auto* p) { *p = j.at(key).get<std::remove_pointer_t<decltype(p)>>(); }, ref);
    }
  }

  /// `key = value` lines; '#' starts a comment.
  void load_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorKind::ConfigError, "line " + std::to_string(lineno) + ": expected key = value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void load_file(const std::filesystem::path& path) { load_text(voxb::read_file(path)); }

  std::string to_text() const {
    std::string out;
    for (const auto& [key, ref] : fields()) out += key + " = " + get(key) + "\n";
    return out;
  }

  /// Checks that every model key in `checkpoint` agrees with this config;
  /// throws ConfigMismatch naming the first field that differs.
  void check_compatible(const nlohmann::json& checkpoint) const {
    const auto mine = to_json();
    for (const auto& key : model_keys()) {
      if (!checkpoint.contains(key)) continue;
      if (checkpoint.at(key) != mine.at(key)) {
        fail(ErrorKind::ConfigMismatch, key + ": checkpoint has " + checkpoint.at(key).dump() + ", config has " +
                                            mine.at(key).dump());
      }
    }
  }

  /// Keys set through set()/load_text(); used to decide what may override a
  /// checkpoint.
  std::set<std::string> explicit_keys;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }
};

/// Small grids and a small model for quick end-to-end runs.
inline RunConfig smoke_config() {
  RunConfig c;
  c.grid = 16;
  c.patch = 4;
  c.shapes = 10;
  c.vae_steps = 3000;
  c.lm_layers = 6;
  c.lm_dim = 64;
  c.lm_ff = 128;
  c.lm_steps = 600;
  c.oproj_ff = 128;
  c.mlp_hidden = 32;
  c.stage1_steps = 300;
  c.stage2_steps = 2000;
  return c;
}

/// VOXPATCH_THREADS, clamped to >= 1; 1 when unset.
inline int thread_budget() {
  const char* env = std::getenv("VOXPATCH_THREADS");
  if (env == nullptr) return 1;
  const int n = std::atoi(env);
  return n > 0 ? n : 1;
}

}  // namespace voxpatch
