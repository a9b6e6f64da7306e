#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxpatch/checkpoint.hpp"
#include "voxpatch/config.hpp"
#include "voxpatch/dataset.hpp"
#include "voxpatch/language_model.hpp"
#include "voxpatch/patch_vae.hpp"
#include "voxpatch/projection.hpp"
#include "voxpatch/tokenizer.hpp"

namespace voxpatch {

/// Parameter namespaces, in checkpoint order.
inline const std::vector<std::string>& pipeline_namespaces() {
  static const std::vector<std::string> ns{"vae/", "lm/", "lora/", "in_proj/", "out_proj/", "queries/"};
  return ns;
}

/// Vocabulary over every caption of the manifest plus both instructions.
inline Tokenizer build_tokenizer(const DatasetManifest& m) {
  auto corpus = PromptTemplate::instructions();
  for (const auto& r : m.records) corpus.insert(corpus.end(), r.captions.begin(), r.captions.end());
  return Tokenizer::build(corpus);
}

/// Effective config when continuing from a checkpoint: the checkpoint's run
/// block, then every key the user set explicitly. Model keys may be restated
/// but not changed.
inline RunConfig resolve_config(const RunConfig& user, const nlohmann::json& checkpoint_run) {
  RunConfig out;
  out.merge_json(checkpoint_run);
  const auto mine = user.to_json();
  for (const auto& key : user.explicit_keys) {
    if (RunConfig::model_keys().contains(key) && checkpoint_run.contains(key) && checkpoint_run.at(key) != mine.at(key)) {
      fail(ErrorKind::ConfigMismatch, key + ": checkpoint has " + checkpoint_run.at(key).dump() + ", config has " +
                                          mine.at(key).dump());
    }
    out.set(key, user.get(key));
  }
  out.explicit_keys = user.explicit_keys;
  return out;
}

/// The whole model: patch VAE, language model with adapters, and both
/// projections, sharing one parameter set.
class Pipeline {
 public:
  using T = float;
  using V = ag::Var<T>;

  Pipeline(const RunConfig& cfg, Tokenizer tok) : cfg_(cfg), tok_(std::move(tok)) {
    cfg_.validate();
    Rng root(static_cast<std::uint64_t>(cfg_.seed));
    // one stream per module so adding a module never shifts another's init
    Rng vae_rng(root.fork()), lm_rng(root.fork()), lora_rng(root.fork()), in_rng(root.fork()), out_rng(root.fork());

    VaeConfig vc;
    vc.patch = Dims3::cube(cfg_.patch);
    vc.hidden = cfg_.vae_hidden;
    vc.latent = cfg_.latent_dim;
    vc.beta = cfg_.vae_beta;
    vae_ = std::make_unique<PatchVae<T>>(params_, vc, vae_rng);

    lm_cfg_.vocab = tok_.size();
    lm_cfg_.layers = cfg_.lm_layers;
    lm_cfg_.dim = cfg_.lm_dim;
    lm_cfg_.heads = cfg_.lm_heads;
    lm_cfg_.ff = cfg_.lm_ff;
    lm_cfg_.context = cfg_.context();
    lm_cfg_.taps = LmConfig::default_taps(cfg_.lm_layers);
    lm_ = std::make_unique<LanguageModel<T>>(params_, lm_cfg_, lm_rng);
    lora_ = std::make_unique<LoraAdapters<T>>(params_, lm_cfg_,
                                              LoraConfig{cfg_.lora_rank, cfg_.lora_alpha, cfg_.lora_dropout}, lora_rng);
    in_ = std::make_unique<InputProjection<T>>(params_, cfg_.latent_dim, cfg_.lm_dim, in_rng);
    OutputProjectionConfig oc;
    oc.patches = cfg_.patches();
    oc.model_dim = cfg_.lm_dim;
    oc.latent_dim = cfg_.latent_dim;
    oc.heads = cfg_.oproj_heads;
    oc.ff = cfg_.oproj_ff;
    oc.mlp_hidden = cfg_.mlp_hidden;
    out_ = std::make_unique<OutputProjection<T>>(params_, oc, out_rng);
  }

  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  /// Rebuilds from a checkpoint; namespaces it lacks keep their fresh init.
  static std::unique_ptr<Pipeline> from_checkpoint(const Checkpoint& ckpt, const RunConfig& user) {
    require(ckpt.config.contains("run") && ckpt.config.contains("vocab"), ErrorKind::CorruptCheckpoint,
            "checkpoint lacks run config or vocabulary");
    RunConfig cfg = resolve_config(user, ckpt.config.at("run"));
    Tokenizer tok = Tokenizer::from_tokens(ckpt.config.at("vocab").get<std::vector<std::string>>());
    auto p = std::make_unique<Pipeline>(cfg, std::move(tok));
    for (const auto& ns : pipeline_namespaces()) {
      if (ckpt.has_namespace(ns)) ckpt.restore(p->params_, ns);
    }
    p->provenance_ = ckpt.config.value("provenance", nlohmann::json::object());
    return p;
  }

  /// Snapshot of every namespace present in `namespaces` plus config,
  /// vocabulary and provenance.
  Checkpoint to_checkpoint(const std::vector<std::string>& namespaces) const {
    Checkpoint c;
    c.config["run"] = cfg_.to_json();
    c.config["vocab"] = tok_.tokens();
    c.config["provenance"] = provenance_;
    for (const auto& ns : namespaces) c.store(params_, ns);
    return c;
  }

  /// Records a completed stage; provenance travels with the checkpoint.
  void record_stage(const std::string& stage, const nlohmann::json& info) {
    provenance_["stages"].push_back(nlohmann::json{{"stage", stage}, {"info", info}});
  }
  void set_manifest_hash(const std::string& h) { provenance_["manifest_hash"] = h; }
  const nlohmann::json& provenance() const { return provenance_; }

  const RunConfig& config() const { return cfg_; }
  RunConfig& mutable_config() { return cfg_; }
  const Tokenizer& tokenizer() const { return tok_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  const PatchVae<T>& vae() const { return *vae_; }
  const LanguageModel<T>& lm() const { return *lm_; }
  const LoraAdapters<T>& lora() const { return *lora_; }
  const InputProjection<T>& input_projection() const { return *in_; }
  const OutputProjection<T>& output_projection() const { return *out_; }

  Dims3 grid_dims() const { return Dims3::cube(cfg_.grid); }
  Dims3 patch_dims() const { return Dims3::cube(cfg_.patch); }
  int patches() const { return cfg_.patches(); }

  void check_grid(const VoxelGrid& g) const {
    require(g.dims() == grid_dims(), ErrorKind::DimensionMismatch,
            "grid dims " + to_string(g.dims()) + " do not match model " + to_string(grid_dims()));
  }

  /// Posterior of every patch of `grid` (no gradients).
  typename PatchVae<T>::Posterior encode(const VoxelGrid& grid) const {
    check_grid(grid);
    ag::Graph<T> g;
    return vae_->encode(g, vae_->patches_to_input(patchify(grid, patch_dims()).patches));
  }

  /// Stage-1 layout: instruction, 3D block, then `caption_ids` (may be empty).
  TokenSequence stage1_sequence(const std::vector<int>& caption_ids) const {
    return layout_sequence(tok_, PromptTemplate::kStage1, patches(), caption_ids);
  }
  TokenSequence stage2_sequence(const std::vector<int>& caption_ids) const {
    return layout_sequence(tok_, PromptTemplate::kStage2, patches(), caption_ids);
  }

  /// Caption continuation loss for a latent block [p, latent].
  V stage1_loss(ag::Graph<T>& g, const V& latents, const std::vector<int>& caption_ids) const {
    std::vector<int> with_eos = caption_ids;
    with_eos.push_back(Tokenizer::kEos);
    auto seq = stage1_sequence(with_eos);
    auto emb = assemble_embeddings(g, *lm_, seq, (*in_)(g, latents, patches()));
    auto out = lm_->forward(g, emb);
    const int n = seq.layout.length();
    std::vector<int> targets(static_cast<std::size_t>(n), 0);
    std::vector<bool> mask(static_cast<std::size_t>(n), false);
    // logits at t predict token t + 1
    for (int t = seq.layout.caption.begin - 1; t + 1 < n; ++t) {
      targets[static_cast<std::size_t>(t)] = seq.ids[static_cast<std::size_t>(t + 1)];
      mask[static_cast<std::size_t>(t)] = true;
    }
    return caption_nll(g, out.logits, targets, mask);
  }

  /// Greedy caption for a latent block, stage-1 prompt.
  std::vector<int> describe(const V& latents, int max_len = 32) const {
    ag::Graph<T> g;
    auto seq = stage1_sequence({});
    auto emb = assemble_embeddings(g, *lm_, seq, (*in_)(g, latents, patches()));
    return lm_->generate(emb, max_len, Tokenizer::kEos);
  }

  /// Predicted latents [p, latent] for a latent block and caption.
  V stage2_forward(ag::Graph<T>& g, const V& latents, const std::vector<int>& caption_ids,
                   Rng* dropout_rng = nullptr) const {
    auto seq = stage2_sequence(caption_ids);
    auto emb = assemble_embeddings(g, *lm_, seq, (*in_)(g, latents, patches()));
    auto out = lm_->forward(g, emb, lora_.get(), dropout_rng, /*want_logits=*/false);
    return (*out_)(g, out.taps, seq.layout.voxels);
  }

  /// Single-pass completion: encode (mu), predict latents, decode, threshold.
  VoxelGrid complete(const VoxelGrid& corrupted, const std::string& caption) const {
    auto post = encode(corrupted);
    ag::Graph<T> g;
    V pred = stage2_forward(g, post.mu, tok_.encode(caption));
    PatchSequence seq;
    seq.patch_grid = patch_grid_dims(grid_dims(), patch_dims());
    seq.patch_dims = patch_dims();
    seq.patches = vae_->decode_patches(pred, cfg_.threshold);
    return depatchify(seq, patch_dims());
  }

 private:
  RunConfig cfg_;
  Tokenizer tok_;
  LmConfig lm_cfg_;
  nn::ParamSet<T> params_;
  std::unique_ptr<PatchVae<T>> vae_;
  std::unique_ptr<LanguageModel<T>> lm_;
  std::unique_ptr<LoraAdapters<T>> lora_;
  std::unique_ptr<InputProjection<T>> in_;
  std::unique_ptr<OutputProjection<T>> out_;
  nlohmann::json provenance_ = nlohmann::json::object();
};

}  // namespace voxpatch
