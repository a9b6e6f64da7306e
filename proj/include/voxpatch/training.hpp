#pragma once

#include <chrono>
#include <cmath>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxpatch/corruption.hpp"
#include "voxpatch/dataset.hpp"
#include "voxpatch/pipeline.hpp"

namespace voxpatch {

/// Line-delimited training metrics: one JSON object per logged step.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* out = nullptr) : out_(out), start_(std::chrono::steady_clock::now()) {}

  void write(nlohmann::json record) {
    if (out_ == nullptr) return;
    const auto now = std::chrono::steady_clock::now();
    record["wall_s"] = std::chrono::duration<double>(now - start_).count();
    *out_ << record.dump() << '\n';
    out_->flush();
  }

 private:
  std::ostream* out_;
  std::chrono::steady_clock::time_point start_;
};

struct Sample {
  const ShapeRecord* record = nullptr;
  VoxelGrid grid;
};

inline std::vector<Sample> load_split(const DatasetManifest& m, Split s) {
  std::vector<Sample> out;
  for (const auto* r : m.split(s)) out.push_back({r, m.load_grid(*r)});
  return out;
}

struct StageResult {
  std::vector<double> losses;        // per optimizer step
  double heldout_initial = std::nan("");
  double heldout_final = std::nan("");
  nlohmann::json summary = nlohmann::json::object();
};

/// Declares the trainable namespaces and remembers a hash of every other
/// namespace so a stage can prove it left them untouched.
class FreezeGuard {
 public:
  FreezeGuard(nn::ParamSet<float>& ps, std::set<std::string> trainable) : ps_(ps), trainable_(std::move(trainable)) {
    ps.freeze_all();
    for (const auto& ns : trainable_) ps.set_trainable(ns, true);
    for (const auto& ns : pipeline_namespaces()) {
      if (!trainable_.contains(ns)) hashes_[ns] = ps.hash(ns);
    }
  }

  void verify() const {
    for (const auto& [ns, h] : hashes_) {
      if (ps_.hash(ns) != h) fail(ErrorKind::FrozenSetViolation, "frozen namespace " + ns + " changed");
    }
  }

  const std::map<std::string, std::string>& hashes() const { return hashes_; }

 private:
  nn::ParamSet<float>& ps_;
  std::set<std::string> trainable_;
  std::map<std::string, std::string> hashes_;
};

/// Optional overrides for overfitting fixtures: a fixed corruption preset
/// replaces the random strategy sampler.
struct StageOptions {
  std::optional<CorruptionPreset> corruption;
};

namespace detail {

inline int total_steps(int epochs, int steps, std::size_t items, int batch) {
  if (steps > 0) return steps;
  const auto per_epoch = static_cast<int>((items + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
  return std::max(1, epochs * std::max(1, per_epoch));
}

/// Cosine decay from lr to lr / 10.
inline double scheduled_lr(double lr, int step, int total) {
  const double t = total > 1 ? static_cast<double>(step) / (total - 1) : 0.0;
  return lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

/// Endless shuffled pass over [0, n): reshuffles at each epoch boundary.
class Shuffler {
 public:
  Shuffler(std::size_t n, Rng& rng) : n_(n), rng_(rng) {}
  std::size_t next() {
    if (pos_ == order_.size()) {
      order_ = rng_.sample_without_replacement(n_, n_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::size_t n_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline void check_finite(double loss, const std::string& stage, int step) {
  if (!std::isfinite(loss)) {
    fail(ErrorKind::Divergence, stage + " loss is not finite at step " + std::to_string(step));
  }
}

inline nn::AdamWConfig optimizer_config(const RunConfig& c, double lr) {
  nn::AdamWConfig o;
  o.lr = lr;
  o.weight_decay = c.weight_decay;
  o.clip_norm = c.clip_norm;
  return o;
}

inline TrainRanges train_ranges(const RunConfig& c) { return {c.mask_min, c.mask_max, c.noise_min, c.noise_max}; }

inline ag::Var<float> latent_sample(const PatchVae<float>::Posterior& post, Rng& rng) {
  std::vector<float> v(post.mu.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = post.mu.value()[i] + std::exp(0.5f * post.log_var.value()[i]) * static_cast<float>(rng.normal());
  }
  return ag::Var<float>::leaf(post.mu.rows(), post.mu.cols(), std::move(v), false);
}

/// Training-time corruption of item `index`: the fixed preset when given
/// (seeded per item so it repeats every epoch), otherwise a random strategy.
inline CorruptionSpec training_corruption(const RunConfig& c, const StageOptions& opt, std::size_t index, Rng& rng) {
  if (opt.corruption) return opt.corruption->spec(static_cast<std::uint64_t>(c.seed) * 131u + index);
  return sample_corruption(rng, train_ranges(c));
}

/// Fixed, seeded corruption of held-out shape `i` used for validation losses.
inline VoxelGrid heldout_corruption(const RunConfig& c, const VoxelGrid& grid, std::size_t i) {
  Rng rng(static_cast<std::uint64_t>(c.seed) * 7919u + i);
  auto spec = sample_corruption(rng, train_ranges(c));
  return apply_corruption(spec, grid, Dims3::cube(c.patch));
}

}  // namespace detail

// ---- patch VAE ----------------------------------------------------------------

/// Distinct patches of the given grids and of one noisy copy of each.
inline std::vector<Patch> vae_patch_pool(const RunConfig& c, const std::vector<Sample>& samples) {
  std::set<std::vector<std::uint8_t>> seen;
  std::vector<Patch> pool;
  Rng rng(static_cast<std::uint64_t>(c.seed) ^ 0x5eedULL);
  auto add = [&](const VoxelGrid& g) {
    for (auto& p : patchify(g, Dims3::cube(c.patch)).patches) {
      if (seen.insert(p.cells()).second) pool.push_back(std::move(p));
    }
  };
  for (const auto& s : samples) {
    add(s.grid);
    add(random_noise(s.grid, rng.uniform(c.noise_min, c.noise_max), rng));
  }
  return pool;
}

/// Mean IoU of mu-decoded reconstructions over non-empty patches.
inline double vae_reconstruction_iou(const Pipeline& p, const std::vector<Patch>& patches) {
  std::vector<Patch> occupied;
  for (const auto& q : patches) {
    if (occupied_count(q) > 0) occupied.push_back(q);
  }
  if (occupied.empty()) return 1.0;
  auto decoded = p.vae().decode_patches(p.vae().encode_mu(occupied), p.config().threshold);
  double total = 0.0;
  for (std::size_t i = 0; i < occupied.size(); ++i) total += iou(decoded[i], occupied[i]);
  return total / static_cast<double>(occupied.size());
}

inline StageResult train_vae(Pipeline& p, const std::vector<Patch>& pool, MetricsLog& log) {
  const auto& c = p.config();
  require(!pool.empty(), ErrorKind::ConfigError, "no patches to train the VAE on");
  FreezeGuard guard(p.params(), {"vae/"});
  nn::AdamW<float> opt(p.params().trainable(), detail::optimizer_config(c, c.vae_lr));
  Rng rng(static_cast<std::uint64_t>(c.seed) ^ 0xAE01ULL);
  detail::Shuffler order(pool.size(), rng);
  const int batch = std::min<int>(c.vae_batch, static_cast<int>(pool.size()));
  const int steps = detail::total_steps(c.vae_epochs, c.vae_steps, pool.size(), batch);
  StageResult res;
  for (int step = 0; step < steps; ++step) {
    std::vector<Patch> items;
    for (int b = 0; b < batch; ++b) items.push_back(pool[order.next()]);
    opt.zero_grad();
    ag::Graph<float> g;
    auto loss = p.vae().loss(g, p.vae().patches_to_input(items), c.vae_beta, rng);
    g.backward(loss.total);
    detail::check_finite(loss.total.item(), "train-vae", step);
    opt.step(detail::scheduled_lr(c.vae_lr, step, steps));
    res.losses.push_back(loss.total.item());
    if (step % c.log_every == 0 || step + 1 == steps) {
      log.write({{"stage", "train-vae"}, {"step", step}, {"loss", loss.total.item()}, {"bce", loss.bce.item()},
                 {"kld", loss.kld.item()}});
    }
  }
  guard.verify();
  res.summary = {{"steps", steps}, {"pool", pool.size()}, {"final_loss", res.losses.back()}};
  return res;
}

// ---- language-model pretraining ------------------------------------------------

/// Packs the three caption variants of one shape (shuffled, optionally after
/// the stage-1 instruction) into one training sequence.
inline std::vector<int> lm_pretrain_sequence(const Tokenizer& tok, const ShapeRecord& r, Rng& rng) {
  std::vector<int> ids{Tokenizer::kBos};
  if (rng.bernoulli(0.5)) {
    for (int id : tok.encode(PromptTemplate::kStage1)) ids.push_back(id);
  }
  for (std::size_t k : rng.sample_without_replacement(r.captions.size(), r.captions.size())) {
    for (int id : tok.encode(r.captions[k])) ids.push_back(id);
    ids.push_back(Tokenizer::kEos);
  }
  return ids;
}

/// Mean NLL of single captions (<bos> caption <eos>) at position 0.
inline double lm_heldout_nll(const Pipeline& p, const std::vector<const ShapeRecord*>& records) {
  double total = 0.0;
  int count = 0;
  for (const auto* r : records) {
    std::vector<int> ids{Tokenizer::kBos};
    for (int id : p.tokenizer().encode(r->captions[0])) ids.push_back(id);
    ids.push_back(Tokenizer::kEos);
    std::vector<int> in(ids.begin(), ids.end() - 1), tgt(ids.begin() + 1, ids.end());
    ag::Graph<float> g;
    auto out = p.lm().forward(g, p.lm().embed(g, in));
    total += caption_nll(g, out.logits, tgt, std::vector<bool>(tgt.size(), true)).item();
    ++count;
  }
  return count > 0 ? total / count : std::nan("");
}

inline StageResult pretrain_lm(Pipeline& p, const std::vector<const ShapeRecord*>& train,
                               const std::vector<const ShapeRecord*>& heldout, MetricsLog& log) {
  const auto& c = p.config();
  std::size_t captions = 0;
  for (const auto* r : train) captions += r->captions.size();
  require(captions >= 100, ErrorKind::ConfigError,
          "language-model pretraining needs at least 100 captions, got " + std::to_string(captions));
  FreezeGuard guard(p.params(), {"lm/"});
  nn::AdamW<float> opt(p.params().trainable(), detail::optimizer_config(c, c.lm_lr));
  Rng rng(static_cast<std::uint64_t>(c.seed) ^ 0x1A11ULL);
  detail::Shuffler order(train.size(), rng);
  const int steps = detail::total_steps(c.lm_epochs, c.lm_steps, train.size(), c.lm_batch);
  const int context = p.lm().config().context;
  StageResult res;
  res.heldout_initial = lm_heldout_nll(p, heldout);
  for (int step = 0; step < steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < c.lm_batch; ++b) {
      auto ids = lm_pretrain_sequence(p.tokenizer(), *train[order.next()], rng);
      const int n = static_cast<int>(ids.size()) - 1;
      require(n <= context, ErrorKind::ContextOverflow, "caption sequence longer than the context");
      // random placement so every positional embedding sees text
      const int offset = static_cast<int>(rng.below(static_cast<std::uint64_t>(context - n + 1)));
      std::vector<int> in(ids.begin(), ids.end() - 1), tgt(ids.begin() + 1, ids.end());
      ag::Graph<float> g;
      auto out = p.lm().forward(g, p.lm().embed(g, in), nullptr, nullptr, true, offset);
      auto loss = caption_nll(g, out.logits, tgt, std::vector<bool>(tgt.size(), true));
      g.backward(g.scale(loss, 1.0f / static_cast<float>(c.lm_batch)));
      step_loss += loss.item() / c.lm_batch;
    }
    detail::check_finite(step_loss, "pretrain-lm", step);
    opt.step(detail::scheduled_lr(c.lm_lr, step, steps));
    res.losses.push_back(step_loss);
    if (step % c.log_every == 0 || step + 1 == steps) {
      log.write({{"stage", "pretrain-lm"}, {"step", step}, {"loss", step_loss}});
    }
  }
  guard.verify();
  res.heldout_final = lm_heldout_nll(p, heldout);
  log.write({{"stage", "pretrain-lm"}, {"step", steps}, {"heldout_nll", res.heldout_final}});
  res.summary = {{"steps", steps},
                 {"heldout_nll_initial", res.heldout_initial},
                 {"heldout_nll", res.heldout_final},
                 {"uniform_nll", std::log(static_cast<double>(p.tokenizer().size()))}};
  return res;
}

// ---- stage 1: input projection ---------------------------------------------------

inline double stage1_heldout_nll(const Pipeline& p, const std::vector<Sample>& heldout) {
  double total = 0.0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    auto post = p.encode(detail::heldout_corruption(p.config(), heldout[i].grid, i));
    ag::Graph<float> g;
    total += p.stage1_loss(g, post.mu, p.tokenizer().encode(heldout[i].record->captions[0])).item();
  }
  return heldout.empty() ? std::nan("") : total / static_cast<double>(heldout.size());
}

inline StageResult run_stage1(Pipeline& p, const std::vector<Sample>& train, const std::vector<Sample>& heldout,
                              MetricsLog& log, const StageOptions& options = {}) {
  const auto& c = p.config();
  require(!train.empty(), ErrorKind::ConfigError, "stage 1 needs training shapes");
  FreezeGuard guard(p.params(), {"in_proj/"});
  nn::AdamW<float> opt(p.params().trainable(), detail::optimizer_config(c, c.stage1_lr));
  Rng rng(static_cast<std::uint64_t>(c.seed) ^ 0x57A1ULL);
  detail::Shuffler order(train.size(), rng);
  const int steps = detail::total_steps(c.stage1_epochs, c.stage1_steps, train.size(), c.stage1_batch);
  StageResult res;
  res.heldout_initial = stage1_heldout_nll(p, heldout);
  for (int step = 0; step < steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < c.stage1_batch; ++b) {
      const std::size_t idx = order.next();
      const Sample& s = train[idx];
      auto aug = augment(s.grid, TrainingStage::stage1, rng, c.aug_rotate);
      auto spec = detail::training_corruption(c, options, idx, rng);
      auto post = p.encode(apply_corruption(spec, aug.grid, p.patch_dims()));
      auto latents = detail::latent_sample(post, rng);
      ag::Graph<float> g;
      auto loss = p.stage1_loss(g, latents, p.tokenizer().encode(s.record->captions[aug.caption_index]));
      g.backward(g.scale(loss, 1.0f / static_cast<float>(c.stage1_batch)));
      step_loss += loss.item() / c.stage1_batch;
    }
    detail::check_finite(step_loss, "train-stage1", step);
    opt.step(detail::scheduled_lr(c.stage1_lr, step, steps));
    res.losses.push_back(step_loss);
    if (step % c.log_every == 0 || step + 1 == steps) {
      log.write({{"stage", "train-stage1"}, {"step", step}, {"loss", step_loss}});
    }
  }
  guard.verify();
  res.heldout_final = stage1_heldout_nll(p, heldout);
  log.write({{"stage", "train-stage1"}, {"step", steps}, {"heldout_nll", res.heldout_final}});
  res.summary = {{"steps", steps},
                 {"heldout_nll_initial", res.heldout_initial},
                 {"heldout_nll", res.heldout_final},
                 {"frozen_hashes", guard.hashes()}};
  return res;
}

// ---- stage 2: output projection + adapters -----------------------------------------

inline double stage2_heldout_mse(const Pipeline& p, const std::vector<Sample>& heldout) {
  double total = 0.0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    auto input = p.encode(detail::heldout_corruption(p.config(), heldout[i].grid, i));
    auto target = p.encode(heldout[i].grid);
    ag::Graph<float> g;
    auto pred = p.stage2_forward(g, input.mu, p.tokenizer().encode(heldout[i].record->captions[0]));
    total += g.mse(pred, target.mu.value()).item();
  }
  return heldout.empty() ? std::nan("") : total / static_cast<double>(heldout.size());
}

inline StageResult run_stage2(Pipeline& p, const std::vector<Sample>& train, const std::vector<Sample>& heldout,
                              MetricsLog& log, const StageOptions& options = {}) {
  const auto& c = p.config();
  require(!train.empty(), ErrorKind::ConfigError, "stage 2 needs training shapes");
  FreezeGuard guard(p.params(), {"out_proj/", "queries/", "lora/"});
  nn::AdamW<float> opt(p.params().trainable(), detail::optimizer_config(c, c.stage2_lr));
  Rng rng(static_cast<std::uint64_t>(c.seed) ^ 0x57A2ULL);
  Rng dropout_rng(rng.fork());
  detail::Shuffler order(train.size(), rng);
  const int steps = detail::total_steps(c.stage2_epochs, c.stage2_steps, train.size(), c.stage2_batch);
  StageResult res;
  res.heldout_initial = stage2_heldout_mse(p, heldout);
  for (int step = 0; step < steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < c.stage2_batch; ++b) {
      const std::size_t idx = order.next();
      const Sample& s = train[idx];
      auto aug = augment(s.grid, TrainingStage::stage2, rng, c.aug_rotate);
      auto spec = detail::training_corruption(c, options, idx, rng);
      auto input = p.encode(apply_corruption(spec, aug.grid, p.patch_dims()));
      auto target = p.encode(aug.grid);
      ag::Graph<float> g;
      auto pred = p.stage2_forward(g, input.mu, p.tokenizer().encode(s.record->captions[aug.caption_index]),
                                   &dropout_rng);
      auto loss = g.mse(pred, target.mu.value());
      g.backward(g.scale(loss, 1.0f / static_cast<float>(c.stage2_batch)));
      step_loss += loss.item() / c.stage2_batch;
    }
    detail::check_finite(step_loss, "train-stage2", step);
    opt.step(detail::scheduled_lr(c.stage2_lr, step, steps));
    res.losses.push_back(step_loss);
    if (step % c.log_every == 0 || step + 1 == steps) {
      log.write({{"stage", "train-stage2"}, {"step", step}, {"loss", step_loss}});
    }
  }
  guard.verify();
  res.heldout_final = stage2_heldout_mse(p, heldout);
  log.write({{"stage", "train-stage2"}, {"step", steps}, {"heldout_mse", res.heldout_final}});
  res.summary = {{"steps", steps},
                 {"heldout_mse_initial", res.heldout_initial},
                 {"heldout_mse", res.heldout_final},
                 {"frozen_hashes", guard.hashes()}};
  return res;
}

}  // namespace voxpatch
