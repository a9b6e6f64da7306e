#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "voxpatch/evaluation.hpp"
#include "voxpatch/training.hpp"

// The command workflows behind the CLI: every command reads and writes a run
// directory with a fixed layout, so the whole pipeline is a sequence of calls
// with no paths to thread through.
namespace voxpatch {

inline const std::vector<std::string>& training_stages() {
  static const std::vector<std::string> s{"train-vae", "pretrain-lm", "train-stage1", "train-stage2"};
  return s;
}

/// run/
///   data/manifest.jsonl, data/grids/*.voxb, data/vocab.txt
///   ckpt/{vae,lm,stage1,stage2}.ckpt
///   metrics/<stage>.jsonl
///   eval/report.jsonl, eval/table.txt
///   report/*.csv, report/*.svg, report/metrics.txt
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path manifest() const { return data() / "manifest.jsonl"; }
  std::filesystem::path checkpoint(const std::string& stage) const {
    static const std::map<std::string, std::string> names{
        {"train-vae", "vae"}, {"pretrain-lm", "lm"}, {"train-stage1", "stage1"}, {"train-stage2", "stage2"}};
    auto it = names.find(stage);
    require(it != names.end(), ErrorKind::UsageError, "unknown stage '" + stage + "'");
    return root / "ckpt" / (it->second + ".ckpt");
  }
  /// Checkpoint a stage starts from; none for the first stage.
  std::optional<std::filesystem::path> stage_input(const std::string& stage) const {
    const auto& s = training_stages();
    auto it = std::find(s.begin(), s.end(), stage);
    require(it != s.end(), ErrorKind::UsageError, "unknown stage '" + stage + "'");
    if (it == s.begin()) return std::nullopt;
    return checkpoint(*(it - 1));
  }
  std::filesystem::path final_checkpoint() const { return checkpoint(training_stages().back()); }
  std::filesystem::path metrics(const std::string& stage) const { return root / "metrics" / (stage + ".jsonl"); }
  std::filesystem::path eval_report() const { return root / "eval" / "report.jsonl"; }
  std::filesystem::path eval_table() const { return root / "eval" / "table.txt"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

inline void require_file(const std::filesystem::path& p, const std::string& what) {
  require(std::filesystem::is_regular_file(p), ErrorKind::FileError, what + " not found: " + p.string());
}

inline std::string manifest_hash(const DatasetManifest& m) { return fnv1a_hex(serialize_manifest(m)); }

/// Generates the synthetic dataset; returns the manifest hash.
inline std::string gen_data(const RunConfig& cfg, const Workspace& ws) {
  cfg.validate();
  DatasetConfig dc;
  dc.grid = cfg.grid;
  dc.patch = cfg.patch;
  dc.shapes_per_category = cfg.shapes;
  dc.seed = static_cast<std::uint64_t>(cfg.seed);
  auto [m, grids] = build_manifest(dc);
  m.provenance = cfg.to_json();
  write_dataset(ws.data(), m, grids);
  build_tokenizer(m).save(ws.data() / "vocab.txt");
  return manifest_hash(m);
}

/// Fresh-start config: the dataset's recorded config, then the user's
/// explicit keys. Grid geometry must agree with the data on disk.
inline RunConfig config_for_data(const RunConfig& user, const DatasetManifest& m) {
  RunConfig cfg = user;
  cfg.merge_json(m.provenance);
  for (const auto& key : user.explicit_keys) {
    if ((key == "grid" || key == "patch") && m.provenance.contains(key) && m.provenance.at(key).dump() != user.get(key)) {
      fail(ErrorKind::ConfigMismatch, key + ": dataset has " + m.provenance.at(key).dump() + ", config has " +
                                          user.get(key));
    }
    cfg.set(key, user.get(key));
  }
  cfg.explicit_keys = user.explicit_keys;
  return cfg;
}

/// Pipeline for a command: from `from` when given, otherwise fresh for the
/// dataset. A checkpoint trained on other data is a ConfigMismatch.
inline std::unique_ptr<Pipeline> open_pipeline(const RunConfig& user, const DatasetManifest& m,
                                               const std::optional<std::filesystem::path>& from) {
  const std::string mh = manifest_hash(m);
  std::unique_ptr<Pipeline> p;
  if (from) {
    require_file(*from, "checkpoint");
    p = Pipeline::from_checkpoint(Checkpoint::load(*from), user);
    const auto& prov = p->provenance();
    if (prov.contains("manifest_hash") && prov.at("manifest_hash").get<std::string>() != mh) {
      fail(ErrorKind::ConfigMismatch, "manifest_hash: checkpoint was trained on dataset " +
                                          prov.at("manifest_hash").get<std::string>() + ", manifest is " + mh);
    }
  } else {
    p = std::make_unique<Pipeline>(config_for_data(user, m), build_tokenizer(m));
  }
  require(p->grid_dims() == m.grid_dims && p->patch_dims() == m.patch_dims, ErrorKind::ConfigMismatch,
          "grid/patch: model is " + std::to_string(p->config().grid) + "/" + std::to_string(p->config().patch) +
              ", dataset is " + std::to_string(m.grid_dims.x) + "/" + std::to_string(m.patch_dims.x));
  p->set_manifest_hash(mh);
  return p;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::FileError, "cannot write " + path.string());
  return out;
}

/// Runs one training stage and writes its checkpoint; returns the result.
inline StageResult train_stage(const std::string& stage, const RunConfig& user, const Workspace& ws,
                               std::optional<std::filesystem::path> from = std::nullopt) {
  require_file(ws.manifest(), "manifest");
  if (!from) from = ws.stage_input(stage);
  auto m = load_manifest(ws.manifest());
  auto p = open_pipeline(user, m, from);
  auto metrics = open_output(ws.metrics(stage));
  MetricsLog log(&metrics);

  auto train = load_split(m, Split::train);
  auto test = load_split(m, Split::test);
  StageResult res;
  if (stage == "train-vae") {
    res = train_vae(*p, vae_patch_pool(p->config(), train), log);
  } else if (stage == "pretrain-lm") {
    res = pretrain_lm(*p, m.split(Split::train), m.split(Split::test), log);
  } else if (stage == "train-stage1") {
    res = run_stage1(*p, train, test, log);
  } else if (stage == "train-stage2") {
    res = run_stage2(*p, train, test, log);
  } else {
    fail(ErrorKind::UsageError, "unknown stage '" + stage + "'");
  }
  p->record_stage(stage, res.summary);
  const auto out = ws.checkpoint(stage);
  std::filesystem::create_directories(out.parent_path());
  p->to_checkpoint(pipeline_namespaces()).save(out);
  return res;
}

inline std::unique_ptr<Pipeline> load_pipeline(const std::filesystem::path& ckpt, const RunConfig& user) {
  require_file(ckpt, "checkpoint");
  return Pipeline::from_checkpoint(Checkpoint::load(ckpt), user);
}

/// Evaluates the trained model on the test split under each preset and
/// writes report.jsonl and table.txt.
inline EvalReport evaluate_run(const RunConfig& user, const Workspace& ws,
                               std::optional<std::filesystem::path> from = std::nullopt,
                               const std::vector<std::string>& preset_names = {}) {
  require_file(ws.manifest(), "manifest");
  const auto ckpt_path = from.value_or(ws.final_checkpoint());
  auto m = load_manifest(ws.manifest());
  auto p = open_pipeline(user, m, ckpt_path);

  std::vector<CorruptionPreset> presets;
  for (const auto& pr : evaluation_presets()) {
    if (preset_names.empty() || std::find(preset_names.begin(), preset_names.end(), pr.name) != preset_names.end()) {
      presets.push_back(pr);
    }
  }
  require(!presets.empty(), ErrorKind::UsageError, "no matching evaluation presets");

  auto test = load_split(m, Split::test);
  auto rep = evaluate_suite(*p, test, presets, p->config().seed);
  rep.header = {{"format", "voxpatch-eval"},
                {"config", p->config().to_json()},
                {"manifest_hash", manifest_hash(m)},
                {"checkpoint_hash", fnv1a_hex(voxb::read_file(ckpt_path))},
                {"seg_ratio", "fraction of occupied voxels removed"},
                {"cd_units", "squared voxel distance, both directions summed, unnormalized"}};
  std::filesystem::create_directories(ws.eval_report().parent_path());
  voxb::write_file(ws.eval_report(), serialize_report(rep));
  voxb::write_file(ws.eval_table(), format_table(rep.summaries));
  return rep;
}

namespace detail {

inline std::string csv_cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", *v);
  return buf;
}

/// Line chart of (step, loss) as a standalone SVG.
inline std::string loss_svg(const std::string& title, const std::vector<std::pair<double, double>>& pts) {
  const double w = 640, h = 360, left = 60, right = 20, top = 30, bottom = 40;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!pts.empty()) {
    x0 = x1 = pts[0].first;
    y0 = y1 = pts[0].second;
    for (const auto& [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  auto sy = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n"
    << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
    << "\" stroke=\"black\"/>\n";
  s.precision(4);
  s << "<text x=\"4\" y=\"" << sy(y1) + 4 << "\" font-family=\"sans-serif\" font-size=\"10\">" << y1 << "</text>\n"
    << "<text x=\"4\" y=\"" << sy(y0) << "\" font-family=\"sans-serif\" font-size=\"10\">" << y0 << "</text>\n"
    << "<text x=\"" << w - right - 40 << "\" y=\"" << h - 20 << "\" font-family=\"sans-serif\" font-size=\"10\">step "
    << x1 << "</text>\n";
  s.precision(2);
  s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (const auto& [x, y] : pts) s << sx(x) << ',' << sy(y) << ' ';
  s << "\"/>\n</svg>\n";
  return s.str();
}

}  // namespace detail

/// Renders loss curves (CSV + SVG per stage) and the metric table (CSV + text)
/// from whatever metrics and evaluation outputs the run directory holds.
/// Returns the files written.
inline std::vector<std::filesystem::path> render_report(const Workspace& ws) {
  std::vector<std::filesystem::path> written;
  const auto dir = ws.report_dir();
  std::filesystem::create_directories(dir);
  std::ostringstream losses;
  losses << "stage,step,loss\n";
  bool any = false;
  for (const auto& stage : training_stages()) {
    const auto path = ws.metrics(stage);
    if (!std::filesystem::is_regular_file(path)) continue;
    any = true;
    std::istringstream in(voxb::read_file(path));
    std::string line;
    std::vector<std::pair<double, double>> pts;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::FormatError, path.string() + ": " + e.what());
      }
      if (!j.contains("loss")) continue;
      const double step = j.at("step").get<double>();
      const double loss = j.at("loss").get<double>();
      pts.emplace_back(step, loss);
      losses << stage << ',' << j.at("step").get<long long>() << ',' << detail::csv_cell(loss) << '\n';
    }
    const auto svg = dir / ("loss_" + stage + ".svg");
    voxb::write_file(svg, detail::loss_svg(stage + " loss", pts));
    written.push_back(svg);
  }
  if (any) {
    voxb::write_file(dir / "losses.csv", losses.str());
    written.push_back(dir / "losses.csv");
  }
  if (std::filesystem::is_regular_file(ws.eval_report())) {
    auto rep = parse_report(voxb::read_file(ws.eval_report()));
    std::ostringstream csv;
    csv << "preset,count,missing,mean_cd,median_cd,mean_iou,mean_cd_input,median_cd_input\n";
    for (const auto& s : rep.summaries) {
      csv << s.preset << ',' << s.count << ',' << s.missing << ',' << detail::csv_cell(s.mean_cd) << ','
          << detail::csv_cell(s.median_cd) << ',' << detail::csv_cell(s.mean_iou) << ','
          << detail::csv_cell(s.mean_cd_input) << ',' << detail::csv_cell(s.median_cd_input) << '\n';
    }
    voxb::write_file(dir / "metrics.csv", csv.str());
    voxb::write_file(dir / "metrics.txt", format_table(rep.summaries));
    written.push_back(dir / "metrics.csv");
    written.push_back(dir / "metrics.txt");
  }
  require(!written.empty(), ErrorKind::FileError, "nothing to report under " + ws.root.string());
  return written;
}

}  // namespace voxpatch
