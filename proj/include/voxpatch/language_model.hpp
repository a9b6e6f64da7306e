#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "voxpatch/autograd.hpp"
#include "voxpatch/error.hpp"
#include "voxpatch/nn.hpp"
#include "voxpatch/random.hpp"

namespace voxpatch {

struct LmConfig {
  int vocab = 0;
  int layers = 6;
  int dim = 128;
  int heads = 4;
  int ff = 512;
  int context = 576;
  std::vector<int> taps{2, 3, 4, 5, 6};  // 1-based block indices whose outputs are tapped

  void validate() const {
    require(vocab > 0 && layers > 0 && dim > 0 && heads > 0 && ff > 0 && context > 0, ErrorKind::ConfigError,
            "language model sizes must be positive");
    require(dim % heads == 0, ErrorKind::ConfigError, "lm_heads must divide lm_dim");
    require(taps.size() == 5, ErrorKind::ConfigError, "exactly 5 tap layers are required");
    for (std::size_t i = 0; i < taps.size(); ++i) {
      require(taps[i] >= 1 && taps[i] <= layers, ErrorKind::ConfigError, "tap layer outside [1, layers]");
      require(i == 0 || taps[i] > taps[i - 1], ErrorKind::ConfigError, "tap layers must be strictly increasing");
    }
  }

  /// The last five blocks.
  static std::vector<int> default_taps(int layers) {
    std::vector<int> t;
    for (int l = std::max(1, layers - 4); l <= layers; ++l) t.push_back(l);
    return t;
  }
};

struct LoraConfig {
  int rank = 4;
  double alpha = 4.0;
  double dropout = 0.05;
};

/// Low-rank updates W + (alpha / r) * B A on every attention projection.
/// A is stored transposed as [in, r] and B as [r, out]; B starts at zero.
template <class T>
class LoraAdapters {
 public:
  struct Pair {
    ag::Var<T> a;
    ag::Var<T> b;
  };

  LoraAdapters() = default;
  LoraAdapters(nn::ParamSet<T>& ps, const LmConfig& lm, const LoraConfig& cfg, Rng& rng,
               const std::string& prefix = "lora/")
      : cfg_(cfg) {
    require(cfg.rank > 0, ErrorKind::ConfigError, "lora_rank must be positive");
    for (int l = 0; l < lm.layers; ++l) {
      std::array<Pair, 4> layer;
      const char* names[4] = {"q", "k", "v", "o"};
      for (int i = 0; i < 4; ++i) {
        const std::string base = prefix + "layer" + std::to_string(l) + "." + names[i];
        layer[static_cast<std::size_t>(i)].a = ps.add_uniform(base + ".A", lm.dim, cfg.rank, lm.dim, rng);
        layer[static_cast<std::size_t>(i)].b = ps.add_constant(base + ".B", cfg.rank, lm.dim, T(0));
      }
      layers_.push_back(layer);
    }
  }

  const LoraConfig& config() const { return cfg_; }
  T scaling() const { return static_cast<T>(cfg_.alpha / cfg_.rank); }
  const Pair& at(int layer, int proj) const { return layers_[static_cast<std::size_t>(layer)][static_cast<std::size_t>(proj)]; }
  int layers() const { return static_cast<int>(layers_.size()); }

 private:
  LoraConfig cfg_;
  std::vector<std::array<Pair, 4>> layers_;
};

template <class T>
struct LmOutput {
  ag::Var<T> logits;              // [T, vocab]; undefined when not requested
  std::vector<ag::Var<T>> taps;   // 5 x [T, dim]
};

/// Small pre-norm decoder-only transformer with learned positions.
template <class T>
class LanguageModel {
 public:
  using V = ag::Var<T>;

  LanguageModel(nn::ParamSet<T>& ps, const LmConfig& cfg, Rng& rng, const std::string& prefix = "lm/") : cfg_(cfg) {
    cfg.validate();
    const double std = 0.02;
    const double proj_std = 0.02 / std::sqrt(2.0 * cfg.layers);
    token_embed_ = ps.add_normal(prefix + "token_embed", cfg.vocab, cfg.dim, std, rng);
    pos_embed_ = ps.add_normal(prefix + "pos_embed", cfg.context, cfg.dim, std, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string b = prefix + "layer" + std::to_string(l) + ".";
      Block blk;
      blk.ln1 = nn::LayerNorm<T>(ps, b + "ln1", cfg.dim);
      blk.q = nn::Linear<T>::normal(ps, b + "attn.q", cfg.dim, cfg.dim, std, rng);
      blk.k = nn::Linear<T>::normal(ps, b + "attn.k", cfg.dim, cfg.dim, std, rng);
      blk.v = nn::Linear<T>::normal(ps, b + "attn.v", cfg.dim, cfg.dim, std, rng);
      blk.o = nn::Linear<T>::normal(ps, b + "attn.o", cfg.dim, cfg.dim, proj_std, rng);
      blk.ln2 = nn::LayerNorm<T>(ps, b + "ln2", cfg.dim);
      blk.fc1 = nn::Linear<T>::normal(ps, b + "mlp.fc1", cfg.dim, cfg.ff, std, rng);
      blk.fc2 = nn::Linear<T>::normal(ps, b + "mlp.fc2", cfg.ff, cfg.dim, proj_std, rng);
      blocks_.push_back(blk);
    }
    ln_f_ = nn::LayerNorm<T>(ps, prefix + "ln_f", cfg.dim);
    head_ = nn::Linear<T>::normal(ps, prefix + "head", cfg.dim, cfg.vocab, std, rng);
  }

  const LmConfig& config() const { return cfg_; }

  /// Token embeddings (no positions) for `ids`, [n, dim].
  V embed(ag::Graph<T>& g, const std::vector<int>& ids) const { return g.embedding(token_embed_, ids); }

  /// Runs the stack on input embeddings [n, dim] occupying positions
  /// offset .. offset + n - 1. Attention is causal.
  LmOutput<T> forward(ag::Graph<T>& g, const V& embeddings, const LoraAdapters<T>* lora = nullptr,
                      Rng* dropout_rng = nullptr, bool want_logits = true, int offset = 0) const {
    const int n = embeddings.rows();
    require(embeddings.cols() == cfg_.dim, ErrorKind::DimensionMismatch, "embedding width does not match lm_dim");
    if (offset < 0 || n + offset > cfg_.context) {
      fail(ErrorKind::ContextOverflow, "sequence of " + std::to_string(n) + " tokens at offset " +
                                           std::to_string(offset) + " exceeds context " + std::to_string(cfg_.context));
    }
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = offset + i;
    V x = g.add(embeddings, g.embedding(pos_embed_, positions));

    LmOutput<T> out;
    std::size_t next_tap = 0;
    for (int l = 0; l < cfg_.layers; ++l) {
      const Block& blk = blocks_[static_cast<std::size_t>(l)];
      V h = blk.ln1(g, x);
      V q = project(g, blk.q, h, lora, l, 0, dropout_rng);
      V k = project(g, blk.k, h, lora, l, 1, dropout_rng);
      V v = project(g, blk.v, h, lora, l, 2, dropout_rng);
      V a = g.attention(q, k, v, cfg_.heads, /*causal=*/true);
      x = g.add(x, project(g, blk.o, a, lora, l, 3, dropout_rng));
      V m = blk.fc2(g, g.gelu(blk.fc1(g, blk.ln2(g, x))));
      x = g.add(x, m);
      if (next_tap < cfg_.taps.size() && cfg_.taps[next_tap] == l + 1) {
        out.taps.push_back(x);
        ++next_tap;
      }
    }
    if (want_logits) {
      out.logits = head_(g, ln_f_(g, x));
    }
    return out;
  }

  /// Greedy argmax decoding after `prefix` until EOS or `max_len` tokens.
  std::vector<int> generate(const V& prefix, int max_len, int eos_id, const LoraAdapters<T>* lora = nullptr) const {
    if (prefix.rows() > cfg_.context) {
      fail(ErrorKind::ContextOverflow, "prefix of " + std::to_string(prefix.rows()) + " tokens exceeds context");
    }
    std::vector<int> out;
    V seq = prefix;
    while (static_cast<int>(out.size()) < max_len && seq.rows() < cfg_.context) {
      ag::Graph<T> g;
      auto res = forward(g, seq, lora, nullptr, true);
      const int last = seq.rows() - 1;
      int best = 0;
      for (int c = 1; c < cfg_.vocab; ++c) {
        if (res.logits.at(last, c) > res.logits.at(last, best)) best = c;
      }
      if (best == eos_id) break;
      out.push_back(best);
      seq = g.concat_rows({seq, embed(g, {best})});
    }
    return out;
  }

 private:
  struct Block {
    nn::LayerNorm<T> ln1;
    nn::Linear<T> q, k, v, o;
    nn::LayerNorm<T> ln2;
    nn::Linear<T> fc1, fc2;
  };

  V project(ag::Graph<T>& g, const nn::Linear<T>& base, const V& x, const LoraAdapters<T>* lora, int layer, int which,
            Rng* dropout_rng) const {
    V y = base(g, x);
    if (lora == nullptr) return y;
    const auto& pair = lora->at(layer, which);
    V low = g.matmul(g.dropout(x, lora->config().dropout, dropout_rng), pair.a);
    return g.add(y, g.scale(g.matmul(low, pair.b), lora->scaling()));
  }

  LmConfig cfg_;
  V token_embed_;
  V pos_embed_;
  std::vector<Block> blocks_;
  nn::LayerNorm<T> ln_f_;
  nn::Linear<T> head_;
};

/// Mean negative log-likelihood of `targets` over rows where mask is set.
template <class T>
ag::Var<T> caption_nll(ag::Graph<T>& g, const ag::Var<T>& logits, const std::vector<int>& targets,
                       const std::vector<bool>& loss_mask) {
  std::vector<T> w(loss_mask.size());
  std::vector<int> safe(targets.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = loss_mask[i] ? T(1) : T(0);
    safe[i] = loss_mask[i] ? targets[i] : 0;
  }
  return g.cross_entropy(logits, safe, w);
}

}  // namespace voxpatch
