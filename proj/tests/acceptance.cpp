// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.
//
//   voxpatch_acceptance [--only 1,4,7] [--workdir DIR]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "voxpatch/workflow.hpp"

using namespace voxpatch;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::filesystem::path g_workdir = std::filesystem::temp_directory_path() / "voxpatch_acceptance";

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

VoxelGrid random_grid(Dims3 d, double fill, Rng& rng) {
  VoxelGrid g(d);
  for (std::size_t i = 0; i < g.size(); ++i) g.set_linear(i, rng.bernoulli(fill));
  return g;
}

// ---- 1 ----------------------------------------------------------------------

Outcome patchify_round_trip() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const std::pair<int, int> dims[] = {{16, 4}, {32, 4}, {32, 8}, {64, 8}};
  int ok = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto [n, k] = dims[i % 4];
    auto g = random_grid(Dims3::cube(n), rng.uniform(0.0, 1.0), rng);
    if (depatchify(patchify(g, Dims3::cube(k)), Dims3::cube(k)) == g) ++ok;
  }
  const auto p64 = patchify(VoxelGrid(Dims3::cube(64)), Dims3::cube(8)).size();
  const auto p72 = patchify(VoxelGrid(Dims3::cube(72)), Dims3::cube(8)).size();
  const double s = seconds_since(t0);
  return {ok == 1000 && p64 == 512 && p72 == 729 && s < 30.0,
          std::to_string(ok) + "/1000 bitwise, 64^3/8^3 -> " + std::to_string(p64) + ", 72^3/8^3 -> " +
              std::to_string(p72) + ", " + fmt("%.1f s", s)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome corruption_statistics() {
  const auto t0 = Clock::now();
  Rng rng(202);
  bool masks_exact = true, noise_exact = true;
  VoxelGrid full(Dims3::cube(32));
  for (std::size_t i = 0; i < full.size(); ++i) full.set_linear(i, true);
  const auto seq = patchify(full, Dims3::cube(4));
  for (int t = 0; t < 200; ++t) {
    const double ratio = rng.uniform(0.0, 1.0);
    auto out = random_mask(seq, ratio, rng);
    std::size_t zeroed = 0;
    for (const auto& p : out.patches) zeroed += occupied_count(p) == 0 ? 1 : 0;
    masks_exact = masks_exact && zeroed == static_cast<std::size_t>(std::llround(ratio * seq.size()));

    auto g = random_grid(Dims3::cube(16), rng.uniform(0.0, 0.5), rng);
    const double level = rng.uniform(0.0, 0.1);
    auto noisy = random_noise(g, level, rng);
    std::size_t flipped = 0;
    for (std::size_t i = 0; i < g.size(); ++i) flipped += g[i] != noisy[i] ? 1 : 0;
    noise_exact = noise_exact && flipped == static_cast<std::size_t>(std::llround(level * g.size()));
  }
  std::array<int, 3> counts{};
  TrainRanges ranges;
  for (int i = 0; i < 30000; ++i) ++counts[static_cast<std::size_t>(sample_corruption(rng, ranges).kind)];
  double worst = 0.0;
  for (int c : counts) worst = std::max(worst, std::abs(c / 30000.0 - 1.0 / 3.0));
  const double s = seconds_since(t0);
  return {masks_exact && noise_exact && worst <= 0.01 && s < 60.0,
          std::string("mask counts ") + (masks_exact ? "exact" : "WRONG") + ", noise counts " +
              (noise_exact ? "exact" : "WRONG") + ", strategy frequencies " + std::to_string(counts[0]) + "/" +
              std::to_string(counts[1]) + "/" + std::to_string(counts[2]) + " (max dev " + fmt("%.4f", worst) +
              "), " + fmt("%.1f s", s)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome vae_loss_correctness() {
  const double k0 = kld_closed_form(std::vector<double>(16, 0.0), std::vector<double>(16, 0.0));
  const double k1 = kld_closed_form(std::vector<double>{1.0}, std::vector<double>{0.0});
  const bool spots = std::abs(k0) <= 1e-12 && std::abs(k1 - 0.5) <= 1e-12;

  Rng rng(303);
  nn::ParamSet<double> ps;
  VaeConfig cfg;
  cfg.hidden = 8;
  cfg.latent = 6;
  cfg.beta = 0.05;
  PatchVae<double> vae(ps, cfg, rng);
  std::vector<Patch> patches;
  for (int i = 0; i < 4; ++i) {
    Patch p(Dims3::cube(4));
    for (std::size_t c = 0; c < p.size(); ++c) p.set_linear(c, rng.bernoulli(0.4));
    patches.push_back(p);
  }
  auto x = vae.patches_to_input(patches);
  std::vector<ag::Var<double>> params;
  for (const auto& [name, v] : ps.all()) params.push_back(v);
  auto res = voxpatch::testing::grad_check(params, [&](ag::Graph<double>& g) {
    Rng eps(77);
    return vae.loss(g, x, cfg.beta, eps).total;
  }, 10, rng);
  return {spots && res.checked == 10 && res.max_rel_error < 1e-4,
          "KLD(0,1) = " + fmt("%.3g", k0) + ", KLD(1,1) = " + fmt("%.15g", k1) + ", max relative gradient error " +
              fmt("%.2e", res.max_rel_error) + " over " + std::to_string(res.checked) + " parameters"};
}

// ---- shared fixtures ------------------------------------------------------------

RunConfig fixture_config() {
  RunConfig c = smoke_config();
  c.aug_rotate = 0.0;
  c.lora_dropout = 0.0;
  c.log_every = 1000000;
  return c;
}

std::vector<Sample> samples_of(const DatasetManifest& m, const std::vector<VoxelGrid>& grids, Split s) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (m.records[i].split == s) out.push_back({&m.records[i], grids[i]});
  }
  return out;
}

struct Fixture {
  DatasetManifest manifest;
  std::vector<VoxelGrid> grids;
};

Fixture& fixture_data() {
  static std::optional<Fixture> f;
  if (!f) {
    auto c = fixture_config();
    DatasetConfig dc;
    dc.grid = c.grid;
    dc.patch = c.patch;
    dc.shapes_per_category = c.shapes;
    dc.seed = static_cast<std::uint64_t>(c.seed);
    auto [m, grids] = build_manifest(dc);
    f = Fixture{std::move(m), std::move(grids)};
  }
  return *f;
}

/// VAE trained on the fixture dataset plus a caption-pretrained LM, shared by
/// the overfit criteria.
const Checkpoint& pretrained_base() {
  static std::optional<Checkpoint> ckpt;
  if (!ckpt) {
    auto& f = fixture_data();
    Pipeline p(fixture_config(), build_tokenizer(f.manifest));
    MetricsLog log;
    auto train = samples_of(f.manifest, f.grids, Split::train);
    train_vae(p, vae_patch_pool(p.config(), train), log);
    pretrain_lm(p, f.manifest.split(Split::train), f.manifest.split(Split::test), log);
    ckpt = p.to_checkpoint(pipeline_namespaces());
  }
  return *ckpt;
}

// ---- 4 ----------------------------------------------------------------------

Outcome vae_overfit() {
  const auto t0 = Clock::now();
  auto& f = fixture_data();
  // 50 distinct non-empty patches drawn from the fixture shapes
  std::vector<Patch> patches;
  std::set<std::vector<std::uint8_t>> seen;
  for (std::size_t i = 0; i < f.grids.size() && patches.size() < 50; i += 3) {
    for (auto& p : patchify(f.grids[i], Dims3::cube(4)).patches) {
      if (patches.size() < 50 && occupied_count(p) > 0 && seen.insert(p.cells()).second) patches.push_back(p);
    }
  }
  RunConfig c = fixture_config();
  c.vae_steps = 2000;
  c.vae_batch = 50;
  Pipeline p(c, build_tokenizer(f.manifest));
  MetricsLog log;
  train_vae(p, patches, log);
  const double miou = vae_reconstruction_iou(p, patches);
  const double s = seconds_since(t0);
  return {patches.size() == 50 && miou >= 0.95 && s < 300.0,
          "mean IoU " + fmt("%.4f", miou) + " on " + std::to_string(patches.size()) + " patches after 2000 steps, " +
              fmt("%.1f s", s)};
}

// ---- 5 ----------------------------------------------------------------------

Outcome lora_identity() {
  Rng rng(505);
  nn::ParamSet<float> ps;
  LmConfig cfg;
  cfg.vocab = 64;
  cfg.layers = 6;
  cfg.dim = 64;
  cfg.ff = 128;
  cfg.context = 96;
  cfg.taps = LmConfig::default_taps(6);
  LanguageModel<float> lm(ps, cfg, rng);
  LoraAdapters<float> lora(ps, cfg, {4, 4.0, 0.05}, rng);
  int equal = 0;
  double worst = 0.0;
  for (int s = 0; s < 100; ++s) {
    const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.context)));
    std::vector<int> ids(static_cast<std::size_t>(n));
    for (auto& id : ids) id = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab)));
    ag::Graph<float> g;
    auto emb = lm.embed(g, ids);
    auto base = lm.forward(g, emb);
    Rng drop(static_cast<std::uint64_t>(s));
    auto adapted = lm.forward(g, emb, &lora, &drop);
    double d = 0.0;
    for (std::size_t i = 0; i < base.logits.size(); ++i) {
      d = std::max(d, static_cast<double>(std::abs(base.logits.value()[i] - adapted.logits.value()[i])));
    }
    worst = std::max(worst, d);
    equal += d <= 1e-6 ? 1 : 0;
  }
  return {equal == 100, std::to_string(equal) + "/100 sequences match, max |diff| " + fmt("%.3g", worst)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome stage1_overfit() {
  const auto t0 = Clock::now();
  auto& f = fixture_data();
  auto train_all = samples_of(f.manifest, f.grids, Split::train);
  // one shape from each of four categories
  std::vector<Sample> four;
  std::set<std::string> cats;
  for (const auto& s : train_all) {
    if (four.size() < 4 && cats.insert(s.record->category).second) four.push_back(s);
  }
  RunConfig user;
  user.set("stage1_steps", "500");
  user.set("stage1_batch", "4");
  user.set("stage1_lr", "0.001");
  auto p = Pipeline::from_checkpoint(pretrained_base(), user);
  StageOptions opt{evaluation_presets()[3]};  // light noise, fixed per shape
  const auto before = p->params().hash("lm/") + p->params().hash("vae/") + p->params().hash("out_proj/") +
                      p->params().hash("lora/");
  MetricsLog log;
  run_stage1(*p, four, {}, log, opt);
  const auto after = p->params().hash("lm/") + p->params().hash("vae/") + p->params().hash("out_proj/") +
                     p->params().hash("lora/");

  int exact = 0;
  std::string shown;
  for (std::size_t i = 0; i < four.size(); ++i) {
    Rng unused(0);
    auto spec = detail::training_corruption(p->config(), opt, i, unused);
    auto post = p->encode(apply_corruption(spec, four[i].grid, p->patch_dims()));
    const auto ids = p->describe(post.mu, 40);
    const auto want = p->tokenizer().encode(four[i].record->captions[0]);
    exact += ids == want ? 1 : 0;
    if (ids != want && shown.empty()) shown = "; e.g. got \"" + p->tokenizer().decode(ids) + "\"";
  }
  const double s = seconds_since(t0);
  return {exact >= 3 && before == after, std::to_string(exact) + "/4 captions reproduced exactly, frozen hashes " +
                                             (before == after ? "unchanged" : "CHANGED") + ", " + fmt("%.1f s", s) +
                                             shown};
}

// ---- 7 and 10 -----------------------------------------------------------------

struct OverfitOne {
  std::unique_ptr<Pipeline> p;
  Sample sample;
  VoxelGrid corrupted;
  bool in_proj_unchanged = false;
};

/// Stage 2 trained on a single shape under one fixed corruption.
OverfitOne overfit_one(const CorruptionPreset& preset) {
  auto& f = fixture_data();
  auto train = samples_of(f.manifest, f.grids, Split::train);
  OverfitOne o;
  o.sample = train[0];
  RunConfig user;
  user.set("stage2_steps", "400");
  user.set("stage2_batch", "1");
  user.set("stage2_lr", "0.001");
  user.set("vae_steps", "1500");
  user.set("vae_batch", "64");
  o.p = Pipeline::from_checkpoint(pretrained_base(), user);
  MetricsLog log;
  // sharpen the VAE on this shape so decoding its latents is faithful
  train_vae(*o.p, vae_patch_pool(o.p->config(), {o.sample}), log);
  StageOptions opt{preset};
  const auto in_before = o.p->params().hash("in_proj/");
  run_stage2(*o.p, {o.sample}, {}, log, opt);
  o.in_proj_unchanged = o.p->params().hash("in_proj/") == in_before;
  Rng unused(0);
  o.corrupted = apply_corruption(detail::training_corruption(o.p->config(), opt, 0, unused), o.sample.grid,
                                 o.p->patch_dims());
  return o;
}

Outcome stage2_overfit() {
  const auto t0 = Clock::now();
  auto o = overfit_one(evaluation_presets()[1]);  // seg50
  const auto& caption = o.sample.record->captions[0];
  auto out = o.p->complete(o.corrupted, caption);
  const double v = iou(out, o.sample.grid);
  const auto cd_out = chamfer_or_missing(out, o.sample.grid);
  const auto cd_in = chamfer_or_missing(o.corrupted, o.sample.grid);
  const double s = seconds_since(t0);
  const bool ok = v >= 0.9 && cd_out && cd_in && *cd_out < *cd_in && o.in_proj_unchanged && s < 900.0;
  return {ok, "IoU " + fmt("%.4f", v) + ", CD completed " + format_sig4(cd_out) + " vs corrupted " +
                  format_sig4(cd_in) + ", input projection " + (o.in_proj_unchanged ? "unchanged" : "CHANGED") +
                  ", " + fmt("%.1f s", s)};
}

Outcome refinement() {
  auto o = overfit_one(evaluation_presets()[3]);  // noise1
  auto res = iterative_refine(*o.p, o.corrupted, o.sample.record->captions[0], 2, &o.sample.grid);
  const auto& a = res.log[0].cd;
  const auto& b = res.log[1].cd;
  return {a && b && *b <= *a, "CD after 1 pass " + format_sig4(a) + ", after 2 passes " + format_sig4(b)};
}

// ---- 8 ----------------------------------------------------------------------

Outcome desk_trend() {
  const auto t0 = Clock::now();
  const Workspace ws{g_workdir / "desk"};
  std::filesystem::remove_all(ws.root);
  RunConfig cfg;  // desk defaults: 250 shapes, 32^3, p = 512
  gen_data(cfg, ws);
  for (const auto& stage : training_stages()) {
    const auto ts = Clock::now();
    train_stage(stage, RunConfig{}, ws);
    std::cout << "    " << stage << " " << fmt("%.0f s", seconds_since(ts)) << std::endl;
  }
  auto rep = evaluate_run(RunConfig{}, ws);
  render_report(ws);
  std::map<std::string, PresetSummary> by;
  for (const auto& s : rep.summaries) by[s.preset] = s;
  std::cout << format_table(rep.summaries);
  auto mean = [&](const char* k) { return by[k].mean_cd; };
  const bool have = mean("seg20") && mean("seg50") && mean("seg80") && mean("noise1") && by["noise1"].mean_cd_input;
  const bool monotone = have && *mean("seg20") <= *mean("seg50") && *mean("seg50") <= *mean("seg80");
  const bool denoise = have && *mean("noise1") < *by["noise1"].mean_cd_input;
  const double s = seconds_since(t0);
  return {monotone && denoise && s < 7200.0,
          "mean CD seg20/50/80 = " + format_sig4(mean("seg20")) + " / " + format_sig4(mean("seg50")) + " / " +
              format_sig4(mean("seg80")) + ", noise1 completed " + format_sig4(mean("noise1")) + " vs corrupted " +
              format_sig4(by["noise1"].mean_cd_input) + ", p = " + std::to_string(cfg.patches()) + ", " +
              fmt("%.0f s", s)};
}

// ---- 9 ----------------------------------------------------------------------

Outcome chamfer_oracle() {
  Rng rng(909);
  int equal = 0, pairs = 0;
  while (pairs < 200) {
    Dims3 d{1 + static_cast<int>(rng.below(12)), 1 + static_cast<int>(rng.below(12)), 1 + static_cast<int>(rng.below(12))};
    auto a = random_grid(d, rng.uniform(0.02, 0.6), rng);
    auto b = random_grid(d, rng.uniform(0.02, 0.6), rng);
    if (occupied_count(a) == 0 || occupied_count(b) == 0) continue;
    ++pairs;
    equal += chamfer(a, b) == chamfer_brute_force(a, b) ? 1 : 0;
  }
  return {equal == 200, std::to_string(equal) + "/200 pairs bit-identical to brute force"};
}

// ---- 11 ---------------------------------------------------------------------

struct SmokeHashes {
  std::string manifest, checkpoint, report;
};

SmokeHashes smoke_run(const std::filesystem::path& dir) {
  const Workspace ws{dir};
  std::filesystem::remove_all(dir);
  RunConfig cfg = smoke_config();
  gen_data(cfg, ws);
  for (const auto& stage : training_stages()) train_stage(stage, RunConfig{}, ws);
  evaluate_run(RunConfig{}, ws);
  return {fnv1a_hex(voxb::read_file(ws.manifest())), fnv1a_hex(voxb::read_file(ws.final_checkpoint())),
          fnv1a_hex(voxb::read_file(ws.eval_report()))};
}

Outcome determinism() {
  const auto t0 = Clock::now();
  auto a = smoke_run(g_workdir / "smoke_a");
  auto b = smoke_run(g_workdir / "smoke_b");
  const bool ok = a.manifest == b.manifest && a.checkpoint == b.checkpoint && a.report == b.report;
  return {ok, "manifest " + a.manifest + (a.manifest == b.manifest ? " = " : " != ") + b.manifest + ", checkpoint " +
                  a.checkpoint + (a.checkpoint == b.checkpoint ? " = " : " != ") + b.checkpoint + ", report " +
                  a.report + (a.report == b.report ? " = " : " != ") + b.report + ", " +
                  fmt("%.0f s", seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (arg == "--workdir" && i + 1 < argc) {
      g_workdir = argv[++i];
    } else {
      std::cerr << "usage: voxpatch_acceptance [--only 1,2,...] [--workdir DIR]\n";
      return 2;
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"patchify/depatchify round trip", patchify_round_trip},
      {"corruption statistics", corruption_statistics},
      {"VAE loss correctness", vae_loss_correctness},
      {"VAE overfit", vae_overfit},
      {"LoRA identity", lora_identity},
      {"stage-1 overfit", stage1_overfit},
      {"stage-2 overfit", stage2_overfit},
      {"desk-scale trend", desk_trend},
      {"Chamfer oracle", chamfer_oracle},
      {"iterative refinement", refinement},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (id < 10 ? " " : "") << id << "  " << criteria[i].first
              << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
