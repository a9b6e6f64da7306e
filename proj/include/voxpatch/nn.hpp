#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "voxpatch/autograd.hpp"
#include "voxpatch/error.hpp"
#include "voxpatch/hash.hpp"
#include "voxpatch/random.hpp"

namespace voxpatch::nn {

using ag::Graph;
using ag::Var;

/// Named parameter tensors, ordered by name. Names are namespaced with a
/// "<module>/" prefix so one set can hold a whole pipeline.
template <class T>
class ParamSet {
 public:
  Var<T> add(const std::string& name, int rows, int cols, std::vector<T> init) {
    require(!params_.contains(name), ErrorKind::ConfigError, "duplicate parameter " + name);
    auto v = Var<T>::leaf(rows, cols, std::move(init), true);
    params_.emplace(name, v);
    return v;
  }

  Var<T> add_normal(const std::string& name, int rows, int cols, double stddev, Rng& rng) {
    std::vector<T> init(static_cast<std::size_t>(rows) * cols);
    for (auto& x : init) x = static_cast<T>(rng.normal(0.0, stddev));
    return add(name, rows, cols, std::move(init));
  }

  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  Var<T> add_uniform(const std::string& name, int rows, int cols, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> init(static_cast<std::size_t>(rows) * cols);
    for (auto& x : init) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, rows, cols, std::move(init));
  }

  Var<T> add_constant(const std::string& name, int rows, int cols, T value) {
    return add(name, rows, cols, std::vector<T>(static_cast<std::size_t>(rows) * cols, value));
  }

  bool contains(const std::string& name) const { return params_.contains(name); }

  Var<T> get(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::ConfigError, "no parameter " + name);
    return it->second;
  }

  const std::map<std::string, Var<T>>& all() const { return params_; }

  std::vector<std::string> names(const std::string& prefix = "") const {
    std::vector<std::string> out;
    for (const auto& [name, v] : params_) {
      if (name.starts_with(prefix)) out.push_back(name);
    }
    return out;
  }

  /// Marks every parameter under `prefix` as trainable (or frozen).
  void set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, v] : params_) {
      if (name.starts_with(prefix)) v.set_requires_grad(on);
    }
  }

  void freeze_all() { set_trainable("", false); }

  std::vector<std::pair<std::string, Var<T>>> trainable() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto& [name, v] : params_) {
      if (v.requires_grad()) out.emplace_back(name, v);
    }
    return out;
  }

  void zero_grad() {
    for (auto& [name, v] : params_) {
      if (!v.node()->grad.empty()) v.node()->zero_grad();
    }
  }

  /// Content hash of names, shapes and values under `prefix`.
  std::string hash(const std::string& prefix = "") const {
    Fnv1a h;
    for (const auto& [name, v] : params_) {
      if (!name.starts_with(prefix)) continue;
      h.update(name);
      const int shape[2] = {v.rows(), v.cols()};
      h.update_values(std::span<const int>(shape, 2));
      h.update_values(std::span<const T>(v.value()));
    }
    return h.hex();
  }

  std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& [name, v] : params_) {
      if (name.starts_with(prefix)) n += v.size();
    }
    return n;
  }

 private:
  std::map<std::string, Var<T>> params_;
};

/// Affine layer holding W[in,out] and b[1,out].
template <class T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng) {
    weight = ps.add_uniform(name + ".weight", in, out, in, rng);
    bias = ps.add_uniform(name + ".bias", 1, out, in, rng);
  }
  /// Transformer-style init: N(0, stddev) weights, zero bias.
  static Linear normal(ParamSet<T>& ps, const std::string& name, int in, int out, double stddev, Rng& rng) {
    Linear l;
    l.weight = ps.add_normal(name + ".weight", in, out, stddev, rng);
    l.bias = ps.add_constant(name + ".bias", 1, out, T(0));
    return l;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const { return g.linear(x, weight, bias); }
  int in() const { return weight.rows(); }
  int out() const { return weight.cols(); }
};

template <class T>
struct LayerNorm {
  Var<T> gain;
  Var<T> bias;

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, int dim) {
    gain = ps.add_constant(name + ".gain", 1, dim, T(1));
    bias = ps.add_constant(name + ".bias", 1, dim, T(0));
  }
  Var<T> operator()(Graph<T>& g, const Var<T>& x) const { return g.layer_norm(x, gain, bias); }
};

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

/// Adam with decoupled weight decay; decay applies to 2-D weight matrices only.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Var<T>>> params, AdamWConfig cfg) : cfg_(cfg) {
    for (auto& [name, v] : params) {
      Slot s;
      s.param = v;
      s.m.assign(v.size(), 0.0);
      s.v.assign(v.size(), 0.0);
      s.decay = v.rows() > 1 && v.cols() > 1 && !name.ends_with(".gain") && name.find("embed") == std::string::npos;
      slots_.push_back(std::move(s));
    }
  }

  void zero_grad() {
    for (auto& s : slots_) {
      if (!s.param.node()->grad.empty()) s.param.node()->zero_grad();
    }
  }

  double grad_norm() const {
    double total = 0.0;
    for (const auto& s : slots_) {
      for (T g : s.param.node()->grad) total += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(total);
  }

  /// Applies one update; returns the pre-clipping gradient norm.
  double step(double lr) {
    ++t_;
    const double norm = grad_norm();
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      auto& value = s.param.value();
      const auto& grad = s.param.node()->grad;
      if (grad.empty()) continue;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) * clip;
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        double p = static_cast<double>(value[i]);
        if (s.decay) p -= lr * cfg_.weight_decay * p;
        p -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        value[i] = static_cast<T>(p);
      }
    }
    return norm;
  }

  double step() { return step(cfg_.lr); }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Var<T> param;
    std::vector<double> m;
    std::vector<double> v;
    bool decay = false;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  long long t_ = 0;
};

}  // namespace voxpatch::nn
