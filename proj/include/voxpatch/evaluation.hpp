#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxpatch/chamfer.hpp"
#include "voxpatch/corruption.hpp"
#include "voxpatch/hash.hpp"
#include "voxpatch/pipeline.hpp"
#include "voxpatch/training.hpp"

namespace voxpatch {

struct RefineStep {
  int step = 0;
  std::optional<double> cd;   // against the supplied ground truth
  std::optional<double> iou;
  std::size_t occupied = 0;
};

struct RefineResult {
  VoxelGrid grid;
  std::vector<RefineStep> log;
};

/// CD that reports an empty side as a missing value instead of throwing.
inline std::optional<double> chamfer_or_missing(const VoxelGrid& a, const VoxelGrid& b) {
  if (occupied_count(a) == 0 || occupied_count(b) == 0) return std::nullopt;
  return chamfer(a, b);
}

/// Applies complete() `steps` times, feeding each output back in.
inline RefineResult iterative_refine(const Pipeline& p, const VoxelGrid& grid, const std::string& caption, int steps,
                                     const VoxelGrid* truth = nullptr) {
  require(steps >= 1, ErrorKind::ConfigError, "refinement needs at least one step");
  RefineResult res{grid, {}};
  for (int s = 1; s <= steps; ++s) {
    res.grid = p.complete(res.grid, caption);
    RefineStep row;
    row.step = s;
    row.occupied = occupied_count(res.grid);
    if (truth != nullptr) {
      row.cd = chamfer_or_missing(res.grid, *truth);
      row.iou = iou(res.grid, *truth);
    }
    res.log.push_back(row);
  }
  return res;
}

struct EvalRow {
  std::string preset;
  std::string shape;
  std::uint64_t seed = 0;
  std::optional<double> cd;
  std::optional<double> iou;
  std::optional<double> cd_input;
  std::string error;  // empty, or the error class of a failed item
};

struct PresetSummary {
  std::string preset;
  int count = 0;
  int missing = 0;
  std::optional<double> mean_cd, median_cd, mean_iou, mean_cd_input, median_cd_input;
};

struct EvalReport {
  nlohmann::json header = nlohmann::json::object();
  std::vector<EvalRow> rows;
  std::vector<PresetSummary> summaries;
};

/// Corruption seed of one (preset, shape) pair.
inline std::uint64_t eval_seed(long long base, const std::string& preset, const std::string& shape) {
  Fnv1a h;
  h.update(std::to_string(base));
  h.update("/" + preset + "/" + shape);
  return h.digest();
}

namespace detail {

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline std::optional<double> median_of(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline std::optional<double> json_opt(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace detail

/// One row: corrupt with the row seed, complete, score.
inline EvalRow evaluate_item(const Pipeline& p, const CorruptionPreset& preset, const Sample& s, long long base_seed) {
  EvalRow row;
  row.preset = preset.name;
  row.shape = s.record->id;
  row.seed = eval_seed(base_seed, preset.name, s.record->id);
  try {
    auto corrupted = apply_corruption(preset.spec(row.seed), s.grid, p.patch_dims());
    row.cd_input = chamfer_or_missing(corrupted, s.grid);
    auto completed = p.complete(corrupted, s.record->captions[0]);
    row.iou = iou(completed, s.grid);
    row.cd = chamfer_or_missing(completed, s.grid);
    if (!row.cd) row.error = to_string(ErrorKind::EmptyGrid);
  } catch (const Error& e) {
    row.error = to_string(e.kind());
  }
  return row;
}

inline std::vector<PresetSummary> summarize(const std::vector<EvalRow>& rows,
                                            const std::vector<std::string>& preset_order) {
  std::vector<PresetSummary> out;
  for (const auto& name : preset_order) {
    PresetSummary s;
    s.preset = name;
    std::vector<double> cd, iou_v, cd_in;
    for (const auto& r : rows) {
      if (r.preset != name) continue;
      ++s.count;
      if (r.cd) cd.push_back(*r.cd); else ++s.missing;
      if (r.iou) iou_v.push_back(*r.iou);
      if (r.cd_input) cd_in.push_back(*r.cd_input);
    }
    s.mean_cd = detail::mean_of(cd);
    s.median_cd = detail::median_of(cd);
    s.mean_iou = detail::mean_of(iou_v);
    s.mean_cd_input = detail::mean_of(cd_in);
    s.median_cd_input = detail::median_of(cd_in);
    out.push_back(s);
  }
  return out;
}

/// Every (preset, test shape) pair, ordered by preset then shape id.
inline EvalReport evaluate_suite(const Pipeline& p, const std::vector<Sample>& test,
                                 const std::vector<CorruptionPreset>& presets, long long base_seed) {
  require(!test.empty(), ErrorKind::ConfigError, "evaluation needs a non-empty test split");
  std::vector<const Sample*> ordered;
  for (const auto& s : test) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(), [](const Sample* a, const Sample* b) { return a->record->id < b->record->id; });
  EvalReport rep;
  std::vector<std::string> names;
  for (const auto& preset : presets) {
    names.push_back(preset.name);
    for (const auto* s : ordered) rep.rows.push_back(evaluate_item(p, preset, *s, base_seed));
  }
  rep.summaries = summarize(rep.rows, names);
  return rep;
}

// ---- serialization ----------------------------------------------------------------

inline nlohmann::json to_json(const EvalRow& r) {
  return {{"preset", r.preset},
          {"shape", r.shape},
          {"seed", r.seed},
          {"cd", detail::opt_json(r.cd)},
          {"iou", detail::opt_json(r.iou)},
          {"cd_input", detail::opt_json(r.cd_input)},
          {"error", r.error}};
}

inline nlohmann::json to_json(const PresetSummary& s) {
  return {{"summary", s.preset},
          {"count", s.count},
          {"missing", s.missing},
          {"mean_cd", detail::opt_json(s.mean_cd)},
          {"median_cd", detail::opt_json(s.median_cd)},
          {"mean_iou", detail::opt_json(s.mean_iou)},
          {"mean_cd_input", detail::opt_json(s.mean_cd_input)},
          {"median_cd_input", detail::opt_json(s.median_cd_input)}};
}

/// Header line, one line per row, one line per preset summary.
inline std::string serialize_report(const EvalReport& rep) {
  std::string out = rep.header.dump() + "\n";
  for (const auto& r : rep.rows) out += to_json(r).dump() + "\n";
  for (const auto& s : rep.summaries) out += to_json(s).dump() + "\n";
  return out;
}

inline EvalReport parse_report(const std::string& text) {
  EvalReport rep;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::FormatError, std::string("report line: ") + e.what());
    }
    if (first) {
      rep.header = j;
      first = false;
    } else if (j.contains("summary")) {
      PresetSummary s;
      s.preset = j.at("summary").get<std::string>();
      s.count = j.at("count").get<int>();
      s.missing = j.at("missing").get<int>();
      s.mean_cd = detail::json_opt(j, "mean_cd");
      s.median_cd = detail::json_opt(j, "median_cd");
      s.mean_iou = detail::json_opt(j, "mean_iou");
      s.mean_cd_input = detail::json_opt(j, "mean_cd_input");
      s.median_cd_input = detail::json_opt(j, "median_cd_input");
      rep.summaries.push_back(s);
    } else {
      EvalRow r;
      r.preset = j.at("preset").get<std::string>();
      r.shape = j.at("shape").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.cd = detail::json_opt(j, "cd");
      r.iou = detail::json_opt(j, "iou");
      r.cd_input = detail::json_opt(j, "cd_input");
      r.error = j.value("error", "");
      rep.rows.push_back(r);
    }
  }
  require(!first, ErrorKind::FormatError, "empty report");
  return rep;
}

/// 4 significant digits; "-" for a missing value.
inline std::string format_sig4(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", *v);
  return buf;
}

inline std::string format_table(const std::vector<PresetSummary>& summaries) {
  std::vector<std::vector<std::string>> cells{
      {"preset", "n", "missing", "mean CD", "median CD", "mean IoU", "mean CD (input)", "median CD (input)"}};
  for (const auto& s : summaries) {
    char iou_buf[32] = "-";
    if (s.mean_iou) std::snprintf(iou_buf, sizeof iou_buf, "%.4f", *s.mean_iou);
    cells.push_back({s.preset, std::to_string(s.count), std::to_string(s.missing), format_sig4(s.mean_cd),
                     format_sig4(s.median_cd), iou_buf, format_sig4(s.mean_cd_input), format_sig4(s.median_cd_input)});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      const auto& text = cells[r][c];
      const std::string pad(width[c] - text.size(), ' ');
      out += c == 0 ? text + pad : "  " + pad + text;
    }
    out += "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out += std::string(total - 2, '-') + "\n";
    }
  }
  out += "CD: mean squared nearest-neighbour distance in voxel units, summed over both directions.\n";
  return out;
}

}  // namespace voxpatch
