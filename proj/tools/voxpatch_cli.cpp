// voxpatch — data generation, staged training, completion and evaluation.
//
//   voxpatch gen-data     --out run --shapes 50 --seed 7
//   voxpatch train-vae    --out run
//   voxpatch pretrain-lm  --out run
//   voxpatch train-stage1 --out run
//   voxpatch train-stage2 --out run
//   voxpatch evaluate     --out run
//   voxpatch report       --out run
//   voxpatch complete     --out run --input in.voxb --caption "..." --output out.voxb
//
// Config precedence: defaults < checkpoint (or dataset) < --config file < flags.
// Failures print one line, "error: <Kind>: <message>", and exit with 10 + the
// kind's index (DimensionMismatch = 10, ..., FileError = 24).

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "voxpatch/workflow.hpp"

using namespace voxpatch;

namespace {

struct Common {
  std::string out = "run";
  std::string config;
  std::vector<std::string> sets;
  bool smoke = false;
  std::optional<long long> seed;
  std::optional<int> grid, patch, shapes;
  std::string from;
};

struct StageFlags {
  std::optional<int> epochs, steps, batch;
  std::optional<double> lr;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--out", c.out, "run directory")->capture_default_str();
  cmd->add_option("--config", c.config, "key = value config file");
  cmd->add_option("--set", c.sets, "override one config key, KEY=VALUE (repeatable)");
  cmd->add_flag("--smoke", c.smoke, "start from the small smoke-test defaults");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--grid", c.grid, "grid side in voxels");
  cmd->add_option("--patch", c.patch, "patch side in voxels");
}

void add_stage_flags(CLI::App* cmd, StageFlags& s) {
  cmd->add_option("--epochs", s.epochs, "passes over the training data");
  cmd->add_option("--steps", s.steps, "optimizer steps (overrides --epochs)");
  cmd->add_option("--lr", s.lr, "peak learning rate");
  cmd->add_option("--batch", s.batch, "batch size");
}

std::string str(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

RunConfig user_config(const Common& c, const StageFlags* s = nullptr, const std::string& prefix = "") {
  RunConfig cfg = c.smoke ? smoke_config() : RunConfig{};
  if (!c.config.empty()) {
    require_file(c.config, "config file");
    cfg.load_file(c.config);
  }
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorKind::UsageError, "--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  if (c.grid) cfg.set("grid", std::to_string(*c.grid));
  if (c.patch) cfg.set("patch", std::to_string(*c.patch));
  if (c.shapes) cfg.set("shapes", std::to_string(*c.shapes));
  if (s != nullptr) {
    if (s->epochs) cfg.set(prefix + "_epochs", std::to_string(*s->epochs));
    if (s->steps) cfg.set(prefix + "_steps", std::to_string(*s->steps));
    if (s->lr) cfg.set(prefix + "_lr", str(*s->lr));
    if (s->batch) cfg.set(prefix + "_batch", std::to_string(*s->batch));
  }
  return cfg;
}

std::optional<std::filesystem::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::filesystem::path(s);
}

// 10 + the error class's position, so scripts can branch without parsing stderr
int exit_code(ErrorKind k) { return 10 + static_cast<int>(k); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-guided voxel shape completion on synthetic data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "voxpatch 0.1");

  Common common;
  StageFlags stage_flags;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shape dataset");
  add_common(gen, common);
  gen->add_option("--shapes", common.shapes, "shapes per category");

  struct StageCmd {
    const char* name;
    const char* prefix;
    const char* help;
  };
  const StageCmd stage_cmds[] = {{"train-vae", "vae", "train the patch VAE"},
                                 {"pretrain-lm", "lm", "pretrain the language model on captions"},
                                 {"train-stage1", "stage1", "align patch latents to the language model"},
                                 {"train-stage2", "stage2", "train caption-guided completion"}};
  std::map<CLI::App*, const StageCmd*> stage_of;
  for (const auto& sc : stage_cmds) {
    auto* cmd = app.add_subcommand(sc.name, sc.help);
    add_common(cmd, common);
    add_stage_flags(cmd, stage_flags);
    cmd->add_option("--from", common.from, "start from this checkpoint instead of the previous stage's");
    stage_of[cmd] = &sc;
  }

  std::string input, output, caption, truth;
  int refine_steps = 0;
  auto* complete = app.add_subcommand("complete", "complete one VOXB grid guided by a caption");
  auto* refine = app.add_subcommand("refine", "complete repeatedly, feeding each output back in");
  for (auto* cmd : {complete, refine}) {
    add_common(cmd, common);
    cmd->add_option("--from", common.from, "checkpoint (default: the run's final checkpoint)");
    cmd->add_option("--input", input, "corrupted grid (VOXB)")->required();
    cmd->add_option("--caption", caption, "shape description")->required();
    cmd->add_option("--output", output, "completed grid (VOXB)")->required();
  }
  refine->add_option("--steps", refine_steps, "refinement passes (default: refine_steps from config)");
  refine->add_option("--truth", truth, "ground-truth grid for per-pass CD/IoU");

  std::vector<std::string> presets;
  auto* evaluate = app.add_subcommand("evaluate", "score the trained model on the test split");
  add_common(evaluate, common);
  evaluate->add_option("--from", common.from, "checkpoint (default: the run's final checkpoint)");
  evaluate->add_option("--presets", presets, "subset of seg20 seg50 seg80 noise1 noise2");

  auto* report = app.add_subcommand("report", "render loss curves and metric tables");
  report->add_option("--out", common.out, "run directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: UsageError: " << e.what() << "\n";
    return exit_code(ErrorKind::UsageError);
  }

  const Workspace ws{common.out};
  try {
    if (gen->parsed()) {
      const auto h = gen_data(user_config(common), ws);
      std::cout << "manifest " << ws.manifest().string() << " " << h << "\n";
      return 0;
    }
    for (auto& [cmd, sc] : stage_of) {
      if (!cmd->parsed()) continue;
      auto res = train_stage(sc->name, user_config(common, &stage_flags, sc->prefix), ws, opt_path(common.from));
      std::cout << sc->name << ": " << res.summary.value("steps", 0) << " steps";
      if (!res.losses.empty()) std::cout << ", final loss " << fmt(res.losses.back());
      if (!std::isnan(res.heldout_final)) {
        std::cout << ", held-out " << fmt(res.heldout_initial) << " -> " << fmt(res.heldout_final);
      }
      std::cout << "\ncheckpoint " << ws.checkpoint(sc->name).string() << "\n";
      return 0;
    }
    if (complete->parsed() || refine->parsed()) {
      require_file(input, "input grid");
      auto p = load_pipeline(opt_path(common.from).value_or(ws.final_checkpoint()), user_config(common));
      const auto grid = voxb::load(input);
      if (complete->parsed()) {
        voxb::save(output, p->complete(grid, caption));
        return 0;
      }
      std::optional<VoxelGrid> gt;
      if (!truth.empty()) {
        require_file(truth, "ground-truth grid");
        gt = voxb::load(truth);
      }
      const int steps = refine_steps > 0 ? refine_steps : p->config().refine_steps;
      auto res = iterative_refine(*p, grid, caption, steps, gt ? &*gt : nullptr);
      voxb::save(output, res.grid);
      for (const auto& s : res.log) {
        std::cout << "pass " << s.step << " occupied " << s.occupied;
        if (gt) std::cout << " cd " << format_sig4(s.cd) << " iou " << format_sig4(s.iou);
        std::cout << "\n";
      }
      return 0;
    }
    if (evaluate->parsed()) {
      auto rep = evaluate_run(user_config(common), ws, opt_path(common.from), presets);
      std::cout << format_table(rep.summaries);
      return 0;
    }
    if (report->parsed()) {
      for (const auto& f : render_report(ws)) std::cout << f.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: FileError: " << e.what() << "\n";
    return exit_code(ErrorKind::FileError);
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
