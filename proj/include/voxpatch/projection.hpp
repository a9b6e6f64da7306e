#pragma once

#include <optional>
#include <string>
#include <vector>

#include "voxpatch/autograd.hpp"
#include "voxpatch/error.hpp"
#include "voxpatch/language_model.hpp"
#include "voxpatch/nn.hpp"
#include "voxpatch/random.hpp"
#include "voxpatch/tokenizer.hpp"

namespace voxpatch {

/// Shared affine map from VAE latents to LM embeddings, applied row-wise.
template <class T>
class InputProjection {
 public:
  using V = ag::Var<T>;

  InputProjection() = default;
  InputProjection(nn::ParamSet<T>& ps, int latent_dim, int model_dim, Rng& rng, const std::string& prefix = "in_proj/")
      : linear_(ps, prefix + "linear", latent_dim, model_dim, rng) {}

  int latent_dim() const { return linear_.in(); }
  int model_dim() const { return linear_.out(); }

  /// latents [p, latent_dim] -> [p, d]. `expected_rows` < 0 skips the count check.
  V operator()(ag::Graph<T>& g, const V& latents, int expected_rows = -1) const {
    require(latents.cols() == latent_dim(), ErrorKind::DimensionMismatch,
            "latent width " + std::to_string(latents.cols()) + " != " + std::to_string(latent_dim()));
    require(expected_rows < 0 || latents.rows() == expected_rows, ErrorKind::DimensionMismatch,
            "expected " + std::to_string(expected_rows) + " patch latents, got " + std::to_string(latents.rows()));
    return linear_(g, latents);
  }

 private:
  nn::Linear<T> linear_;
};

struct PromptTemplate {
  static constexpr const char* kStage1 = "Given the incomplete 3D input, describe the 3D model by text.";
  static constexpr const char* kStage2 = "Given the caption, recover the incomplete 3D model";

  /// Strings the tokenizer vocabulary must cover in addition to captions.
  static std::vector<std::string> instructions() { return {kStage1, kStage2}; }
};

struct Span {
  int begin = 0;
  int length = 0;
  int end() const { return begin + length; }  // one past the last index
  int last() const { return begin + length - 1; }
  bool contains(int i) const { return i >= begin && i < end(); }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Segment spans of an assembled sequence: instruction, 3D tokens, caption.
struct SequenceLayout {
  Span instruction;
  Span voxels;
  Span caption;
  int length() const { return caption.end(); }
};

/// Token ids for the whole sequence, with <vox> in the 3D block.
struct TokenSequence {
  std::vector<int> ids;
  SequenceLayout layout;
};

/// <bos> + instruction words, then p <vox> slots, then the caption ids.
inline TokenSequence layout_sequence(const Tokenizer& tok, const std::string& instruction, int patches,
                                     const std::vector<int>& caption_ids) {
  TokenSequence s;
  s.ids.push_back(Tokenizer::kBos);
  for (int id : tok.encode(instruction)) s.ids.push_back(id);
  s.layout.instruction = {0, static_cast<int>(s.ids.size())};
  s.layout.voxels = {s.layout.instruction.end(), patches};
  s.ids.insert(s.ids.end(), static_cast<std::size_t>(patches), Tokenizer::kVox);
  s.layout.caption = {s.layout.voxels.end(), static_cast<int>(caption_ids.size())};
  s.ids.insert(s.ids.end(), caption_ids.begin(), caption_ids.end());
  return s;
}

/// Embeds a laid-out sequence: text ids through the LM table, 3D slots from
/// `patch_embeddings` [p, d].
template <class T>
ag::Var<T> assemble_embeddings(ag::Graph<T>& g, const LanguageModel<T>& lm, const TokenSequence& seq,
                               const ag::Var<T>& patch_embeddings) {
  const auto& L = seq.layout;
  require(patch_embeddings.rows() == L.voxels.length, ErrorKind::DimensionMismatch,
          "3D block has " + std::to_string(L.voxels.length) + " slots but " + std::to_string(patch_embeddings.rows()) +
              " embeddings were given");
  if (L.length() > lm.config().context) {
    fail(ErrorKind::ContextOverflow, "assembled sequence of " + std::to_string(L.length()) +
                                         " tokens exceeds context " + std::to_string(lm.config().context));
  }
  std::vector<ag::Var<T>> parts;
  auto text = [&](const Span& s) {
    if (s.length == 0) return;
    parts.push_back(lm.embed(g, std::vector<int>(seq.ids.begin() + s.begin, seq.ids.begin() + s.end())));
  };
  text(L.instruction);
  if (L.voxels.length > 0) parts.push_back(patch_embeddings);
  text(L.caption);
  return parts.size() == 1 ? parts.front() : g.concat_rows(parts);
}

struct OutputProjectionConfig {
  int patches = 512;
  int model_dim = 128;
  int latent_dim = 32;
  int heads = 4;
  int ff = 256;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int mlp_hidden = 64;
  int taps = 5;
};

/// Fuses the tapped LM states, runs a small encoder-decoder transformer with
/// p learned queries, and maps each decoder output through its own MLP.
template <class T>
class OutputProjection {
 public:
  using V = ag::Var<T>;

  OutputProjection() = default;
  OutputProjection(nn::ParamSet<T>& ps, const OutputProjectionConfig& cfg, Rng& rng,
                   const std::string& prefix = "out_proj/", const std::string& query_name = "queries/embed")
      : cfg_(cfg) {
    require(cfg.patches > 0 && cfg.model_dim > 0 && cfg.latent_dim > 0 && cfg.mlp_hidden > 0, ErrorKind::ConfigError,
            "output projection sizes must be positive");
    require(cfg.model_dim % cfg.heads == 0, ErrorKind::ConfigError, "oproj_heads must divide lm_dim");
    const int d = cfg.model_dim;
    fuse_ = nn::Linear<T>(ps, prefix + "fuse", cfg.taps * d, d, rng);
    for (int l = 0; l < cfg.encoder_layers; ++l) {
      const std::string b = prefix + "enc" + std::to_string(l) + ".";
      EncoderLayer e;
      e.ln1 = nn::LayerNorm<T>(ps, b + "ln1", d);
      e.attn = Attention(ps, b + "attn", d, rng);
      e.ln2 = nn::LayerNorm<T>(ps, b + "ln2", d);
      e.fc1 = nn::Linear<T>(ps, b + "fc1", d, cfg.ff, rng);
      e.fc2 = nn::Linear<T>(ps, b + "fc2", cfg.ff, d, rng);
      encoder_.push_back(e);
    }
    enc_ln_ = nn::LayerNorm<T>(ps, prefix + "enc_ln", d);
    queries_ = ps.add_normal(query_name, cfg.patches, d, 0.02, rng);
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      const std::string b = prefix + "dec" + std::to_string(l) + ".";
      DecoderLayer dl;
      dl.ln1 = nn::LayerNorm<T>(ps, b + "ln1", d);
      dl.self_attn = Attention(ps, b + "self_attn", d, rng);
      dl.ln2 = nn::LayerNorm<T>(ps, b + "ln2", d);
      dl.cross_attn = Attention(ps, b + "cross_attn", d, rng);
      dl.ln3 = nn::LayerNorm<T>(ps, b + "ln3", d);
      dl.fc1 = nn::Linear<T>(ps, b + "fc1", d, cfg.ff, rng);
      dl.fc2 = nn::Linear<T>(ps, b + "fc2", cfg.ff, d, rng);
      decoder_.push_back(dl);
    }
    dec_ln_ = nn::LayerNorm<T>(ps, prefix + "dec_ln", d);
    const int h = cfg.mlp_hidden;
    mlp_w1_ = ps.add_uniform(prefix + "mlp.w1", cfg.patches, d * h, d, rng);
    mlp_b1_ = ps.add_uniform(prefix + "mlp.b1", cfg.patches, h, d, rng);
    mlp_w2_ = ps.add_uniform(prefix + "mlp.w2", cfg.patches, h * cfg.latent_dim, h, rng);
    mlp_b2_ = ps.add_uniform(prefix + "mlp.b2", cfg.patches, cfg.latent_dim, h, rng);
  }

  const OutputProjectionConfig& config() const { return cfg_; }

  /// taps: 5 x [n, d] -> decoder outputs [p, d]. When `voxels` is given,
  /// query i starts from its learned embedding plus the encoded state of 3D
  /// token i, so it need not find its own patch by attention alone.
  V decode_queries(ag::Graph<T>& g, const std::vector<V>& taps, std::optional<Span> voxels = std::nullopt) const {
    require(static_cast<int>(taps.size()) == cfg_.taps, ErrorKind::DimensionMismatch,
            "expected " + std::to_string(cfg_.taps) + " tapped states, got " + std::to_string(taps.size()));
    for (const auto& t : taps) {
      require(t.cols() == cfg_.model_dim && t.rows() == taps.front().rows() && t.rows() > 0,
              ErrorKind::DimensionMismatch, "tapped states must share shape [n, " + std::to_string(cfg_.model_dim) + "]");
    }
    const int heads = cfg_.heads;
    V mem = fuse_(g, g.concat_cols(taps));
    for (const auto& e : encoder_) {
      V h = e.ln1(g, mem);
      mem = g.add(mem, e.attn(g, h, h, heads));
      mem = g.add(mem, e.fc2(g, g.gelu(e.fc1(g, e.ln2(g, mem)))));
    }
    mem = enc_ln_(g, mem);
    V x = queries_;
    if (voxels) {
      require(voxels->length == cfg_.patches && voxels->begin >= 0 && voxels->end() <= mem.rows(),
              ErrorKind::DimensionMismatch, "3D token span does not fit the tapped states");
      x = g.add(x, g.slice_rows(mem, voxels->begin, voxels->length));
    }
    for (const auto& dl : decoder_) {
      V h = dl.ln1(g, x);
      x = g.add(x, dl.self_attn(g, h, h, heads));
      x = g.add(x, dl.cross_attn(g, dl.ln2(g, x), mem, heads));
      x = g.add(x, dl.fc2(g, g.gelu(dl.fc1(g, dl.ln3(g, x)))));
    }
    return dec_ln_(g, x);
  }

  /// Row i of the result depends only on row i of `decoded` [p, d].
  V map_tokens(ag::Graph<T>& g, const V& decoded) const {
    require(decoded.rows() == cfg_.patches && decoded.cols() == cfg_.model_dim, ErrorKind::DimensionMismatch,
            "decoder output must be [p, d]");
    V h = g.gelu(g.grouped_linear(decoded, mlp_w1_, mlp_b1_, cfg_.mlp_hidden));
    return g.grouped_linear(h, mlp_w2_, mlp_b2_, cfg_.latent_dim);
  }

  /// taps -> predicted latents [p, latent_dim].
  V operator()(ag::Graph<T>& g, const std::vector<V>& taps, std::optional<Span> voxels = std::nullopt) const {
    return map_tokens(g, decode_queries(g, taps, voxels));
  }

 private:
  struct Attention {
    nn::Linear<T> q, k, v, o;
    Attention() = default;
    Attention(nn::ParamSet<T>& ps, const std::string& name, int d, Rng& rng)
        : q(ps, name + ".q", d, d, rng), k(ps, name + ".k", d, d, rng), v(ps, name + ".v", d, d, rng),
          o(ps, name + ".o", d, d, rng) {}
    V operator()(ag::Graph<T>& g, const V& query, const V& context, int heads) const {
      return o(g, g.attention(q(g, query), k(g, context), v(g, context), heads, /*causal=*/false));
    }
  };
  struct EncoderLayer {
    nn::LayerNorm<T> ln1, ln2;
    Attention attn;
    nn::Linear<T> fc1, fc2;
  };
  struct DecoderLayer {
    nn::LayerNorm<T> ln1, ln2, ln3;
    Attention self_attn, cross_attn;
    nn::Linear<T> fc1, fc2;
  };

  OutputProjectionConfig cfg_;
  nn::Linear<T> fuse_;
  std::vector<EncoderLayer> encoder_;
  nn::LayerNorm<T> enc_ln_;
  V queries_;
  std::vector<DecoderLayer> decoder_;
  nn::LayerNorm<T> dec_ln_;
  V mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
};

}  // namespace voxpatch
