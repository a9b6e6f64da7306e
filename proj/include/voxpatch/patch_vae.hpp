#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "voxpatch/autograd.hpp"
#include "voxpatch/error.hpp"
#include "voxpatch/nn.hpp"
#include "voxpatch/random.hpp"
#include "voxpatch/voxel_grid.hpp"

namespace voxpatch {

struct VaeConfig {
  Dims3 patch{4, 4, 4};
  int hidden = 64;
  int latent = 32;
  int kernel = 4;
  int stride = 2;
  int pad = 1;
  double beta = 1e-4;
};

/// Gaussian posterior of one patch. `sample` = mu + exp(log_var / 2) * eps.
struct LatentCode {
  std::vector<double> mu;
  std::vector<double> log_var;
  std::optional<std::vector<double>> sample;
  std::optional<std::vector<double>> eps;
};

/// 1/2 * sum(mu^2 + exp(log_var) - 1 - log_var).
inline double kld_closed_form(std::span<const double> mu, std::span<const double> log_var) {
  require(mu.size() == log_var.size(), ErrorKind::DimensionMismatch, "kld: mu and log_var differ in length");
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    total += 0.5 * (mu[i] * mu[i] + std::exp(log_var[i]) - 1.0 - log_var[i]);
  }
  return total;
}

/// -(y log p + (1 - y) log(1 - p)) for one cell.
inline double bce_probability(double p, double y) {
  return -(y * std::log(p) + (1.0 - y) * std::log1p(-p));
}

template <class T>
struct VaeLoss {
  ag::Var<T> total;
  ag::Var<T> bce;
  ag::Var<T> kld;
};

/// One VAE shared by every patch: two strided 3D convolutions and a linear head
/// produce (mu, log_var); a linear stem and two transposed convolutions decode.
template <class T>
class PatchVae {
 public:
  using V = ag::Var<T>;
  using Geo = typename ag::Graph<T>::ConvGeometry;

  PatchVae(nn::ParamSet<T>& ps, const VaeConfig& cfg, Rng& rng, const std::string& prefix = "vae/") : cfg_(cfg) {
    require(cfg.patch.positive() && cfg.patch.x % 4 == 0 && cfg.patch.y % 4 == 0 && cfg.patch.z % 4 == 0,
            ErrorKind::DimensionMismatch, "VAE patch dims must be multiples of 4, got " + to_string(cfg.patch));
    require(cfg.hidden > 0 && cfg.latent > 0, ErrorKind::ConfigError, "VAE widths must be positive");
    conv1_ = Geo::make(1, cfg.hidden, {cfg.patch.x, cfg.patch.y, cfg.patch.z}, cfg.kernel, cfg.stride, cfg.pad);
    conv2_ = Geo::make(cfg.hidden, cfg.hidden, conv1_.out, cfg.kernel, cfg.stride, cfg.pad);
    flat_ = cfg.hidden * conv2_.out_cells();
    const int k3 = cfg.kernel * cfg.kernel * cfg.kernel;

    enc1_w_ = ps.add_uniform(prefix + "enc.conv1.weight", cfg.hidden, k3, k3, rng);
    enc1_b_ = ps.add_uniform(prefix + "enc.conv1.bias", 1, cfg.hidden, k3, rng);
    enc2_w_ = ps.add_uniform(prefix + "enc.conv2.weight", cfg.hidden, cfg.hidden * k3, cfg.hidden * k3, rng);
    enc2_b_ = ps.add_uniform(prefix + "enc.conv2.bias", 1, cfg.hidden, cfg.hidden * k3, rng);
    head_ = nn::Linear<T>(ps, prefix + "enc.head", flat_, 2 * cfg.latent, rng);
    stem_ = nn::Linear<T>(ps, prefix + "dec.stem", cfg.latent, flat_, rng);
    dec2_w_ = ps.add_uniform(prefix + "dec.deconv2.weight", cfg.hidden, cfg.hidden * k3, cfg.hidden * k3, rng);
    dec2_b_ = ps.add_uniform(prefix + "dec.deconv2.bias", 1, cfg.hidden, cfg.hidden * k3, rng);
    dec1_w_ = ps.add_uniform(prefix + "dec.deconv1.weight", cfg.hidden, k3, cfg.hidden * k3, rng);
    dec1_b_ = ps.add_uniform(prefix + "dec.deconv1.bias", 1, 1, cfg.hidden * k3, rng);
  }

  const VaeConfig& config() const { return cfg_; }
  int cells() const { return static_cast<int>(cfg_.patch.volume()); }
  int latent() const { return cfg_.latent; }

  struct Posterior {
    V mu;
    V log_var;
  };

  /// x: [N, cells] occupancy in {0,1}.
  Posterior encode(ag::Graph<T>& g, const V& x) const {
    require(x.cols() == cells(), ErrorKind::DimensionMismatch, "VAE input width does not match patch dims");
    V h = g.silu(g.conv3d(x, enc1_w_, enc1_b_, conv1_));
    h = g.silu(g.conv3d(h, enc2_w_, enc2_b_, conv2_));
    V stats = head_(g, h);
    V mu = g.slice_cols(stats, 0, cfg_.latent);
    V log_var = g.slice_cols(stats, cfg_.latent, cfg_.latent);
    return {mu, log_var};
  }

  /// f: [N, latent] -> logits [N, cells].
  V decode_logits(ag::Graph<T>& g, const V& f) const {
    require(f.cols() == cfg_.latent, ErrorKind::DimensionMismatch, "latent width mismatch");
    V h = g.silu(stem_(g, f));
    h = g.silu(g.conv_transpose3d(h, dec2_w_, dec2_b_, conv2_));
    return g.conv_transpose3d(h, dec1_w_, dec1_b_, conv1_);
  }

  /// f -> per-cell occupancy probabilities in (0, 1).
  V decode(ag::Graph<T>& g, const V& f) const { return g.sigmoid(decode_logits(g, f)); }

  /// f = mu + exp(log_var / 2) * eps with eps ~ N(0, I) drawn from rng.
  V reparameterize(ag::Graph<T>& g, const Posterior& post, Rng& rng, std::vector<T>* eps_out = nullptr) const {
    std::vector<T> eps(post.mu.size());
    for (auto& e : eps) e = static_cast<T>(rng.normal());
    if (eps_out != nullptr) *eps_out = eps;
    V noise = g.constant(post.mu.rows(), post.mu.cols(), std::move(eps));
    V sigma = g.exp(g.scale(post.log_var, T(0.5)));
    return g.add(post.mu, g.mul(sigma, noise));
  }

  /// BCE(P, D(f)) + beta * KLD, f reparameterized; bce is the per-cell mean,
  /// kld the per-patch sum averaged over the batch.
  VaeLoss<T> loss(ag::Graph<T>& g, const V& x, double beta, Rng& rng) const {
    require(beta >= 0.0, ErrorKind::ConfigError, "beta must be non-negative");
    Posterior post = encode(g, x);
    V f = reparameterize(g, post, rng);
    V logits = decode_logits(g, f);
    V bce = g.bce_with_logits(logits, x.value());
    V kld = g.kl_divergence(post.mu, post.log_var);
    V total = g.add(bce, g.scale(kld, static_cast<T>(beta)));
    return {total, bce, kld};
  }

  // ---- inference helpers (no gradients) --------------------------------------

  V patches_to_input(const std::vector<Patch>& patches) const {
    std::vector<T> data;
    data.reserve(patches.size() * static_cast<std::size_t>(cells()));
    for (const auto& p : patches) {
      require(p.dims() == cfg_.patch, ErrorKind::DimensionMismatch,
              "patch dims " + to_string(p.dims()) + " do not match VAE " + to_string(cfg_.patch));
      for (auto c : p.cells()) data.push_back(static_cast<T>(c));
    }
    return V::leaf(static_cast<int>(patches.size()), cells(), std::move(data), false);
  }

  LatentCode encode(const Patch& patch) const {
    ag::Graph<T> g;
    Posterior post = encode(g, patches_to_input({patch}));
    LatentCode code;
    code.mu.assign(post.mu.value().begin(), post.mu.value().end());
    code.log_var.assign(post.log_var.value().begin(), post.log_var.value().end());
    return code;
  }

  /// mu of every patch, [p, latent]. Patches are independent: each row depends
  /// only on its own patch.
  V encode_mu(const std::vector<Patch>& patches) const {
    ag::Graph<T> g;
    return encode(g, patches_to_input(patches)).mu;
  }

  std::vector<Patch> decode_patches(const V& latents, double threshold = 0.5) const {
    ag::Graph<T> g;
    V probs = decode(g, latents);
    std::vector<Patch> out;
    out.reserve(static_cast<std::size_t>(latents.rows()));
    const int n = cells();
    for (int r = 0; r < latents.rows(); ++r) {
      std::vector<std::uint8_t> occ(static_cast<std::size_t>(n));
      for (int c = 0; c < n; ++c) occ[static_cast<std::size_t>(c)] = probs.at(r, c) > threshold ? 1 : 0;
      out.emplace_back(cfg_.patch, std::move(occ));
    }
    return out;
  }

 private:
  VaeConfig cfg_;
  Geo conv1_;
  Geo conv2_;
  int flat_ = 0;
  V enc1_w_, enc1_b_, enc2_w_, enc2_b_;
  nn::Linear<T> head_;
  nn::Linear<T> stem_;
  V dec2_w_, dec2_b_, dec1_w_, dec1_b_;
};

}  // namespace voxpatch
