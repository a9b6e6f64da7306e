#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "voxpatch/error.hpp"
#include "voxpatch/random.hpp"

// Reverse-mode automatic differentiation over row-major matrices.
//
// Every value is a rows x cols matrix. A Graph records the ops applied to
// values that need gradients; backward() walks them in reverse creation order.
// Parameters are long-lived leaf nodes whose grad buffers accumulate across
// graphs until an optimizer consumes them.
namespace voxpatch::ag {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Matrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Matrix<T>>;

// Aligned storage keeps vectorized reductions independent of heap addresses,
// so identical inputs give bit-identical results run to run.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Node {
  int rows = 0;
  int cols = 0;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::function<void()> backward;

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) {
      grad.assign(value.size(), T(0));
    }
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
  MatMap<T> mat() { return MatMap<T>(value.data(), rows, cols); }
  ConstMatMap<T> mat() const { return ConstMatMap<T>(value.data(), rows, cols); }
  MatMap<T> grad_mat() {
    ensure_grad();
    return MatMap<T>(grad.data(), rows, cols);
  }
};

/// Shared handle to a node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(int rows, int cols, Buffer<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    if (n->value.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
      fail(ErrorKind::DimensionMismatch, "leaf buffer does not match shape");
    }
    return Var(std::move(n));
  }
  static Var zeros(int rows, int cols, bool requires_grad = false) {
    return leaf(rows, cols, Buffer<T>(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), T(0)),
                requires_grad);
  }
  static Var leaf(int rows, int cols, const std::vector<T>& value, bool requires_grad) {
    return leaf(rows, cols, Buffer<T>(value.begin(), value.end()), requires_grad);
  }
  static Var leaf(int rows, int cols, std::initializer_list<T> value, bool requires_grad) {
    return leaf(rows, cols, Buffer<T>(value), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  Buffer<T>& value() { return node_->value; }
  const Buffer<T>& value() const { return node_->value; }
  Buffer<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  T item() const { return node_->value.at(0); }
  T at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * node_->cols + c]; }

  ConstMatMap<T> mat() const { return static_cast<const Node<T>&>(*node_).mat(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Records differentiable ops for one forward pass.
template <class T>
class Graph {
 public:
  using V = Var<T>;

  void clear() { tape_.clear(); }
  std::size_t recorded() const { return tape_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  void backward(const V& loss) {
    require(loss.size() == 1, ErrorKind::DimensionMismatch, "backward needs a scalar loss");
    if (!loss.requires_grad()) {
      return;
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && !n.grad.empty()) {
        n.backward();
      }
    }
    tape_.clear();
  }

  V constant(int rows, int cols, Buffer<T> value) { return V::leaf(rows, cols, std::move(value), false); }
  V constant(int rows, int cols, const std::vector<T>& value) { return V::leaf(rows, cols, value, false); }

  // ---- linear algebra -------------------------------------------------------

  /// a[m,k] * b[k,n]
  V matmul(const V& a, const V& b) {
    check(a.cols() == b.rows(), "matmul inner dims");
    V out = make(a.rows(), b.cols(), {a, b});
    out.node()->mat().noalias() = a.mat() * b.mat();
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      auto* bn = b.node();
      o->backward = [o, an, bn, keep = keep_alive({a, b})] {
        auto g = o->grad_mat();
        if (an->requires_grad) an->grad_mat().noalias() += g * bn->mat().transpose();
        if (bn->requires_grad) bn->grad_mat().noalias() += an->mat().transpose() * g;
      };
    }
    return out;
  }

  /// x[n,in] * w[in,out] + b[1,out]
  V linear(const V& x, const V& w, const V& b) {
    check(x.cols() == w.rows(), "linear input width");
    check(b.rows() == 1 && b.cols() == w.cols(), "linear bias shape");
    V out = make(x.rows(), w.cols(), {x, w, b});
    auto om = out.node()->mat();
    om.noalias() = x.mat() * w.mat();
    om.rowwise() += b.mat().row(0);
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* xn = x.node();
      auto* wn = w.node();
      auto* bn = b.node();
      o->backward = [o, xn, wn, bn, keep = keep_alive({x, w, b})] {
        auto g = o->grad_mat();
        if (xn->requires_grad) xn->grad_mat().noalias() += g * wn->mat().transpose();
        if (wn->requires_grad) wn->grad_mat().noalias() += xn->mat().transpose() * g;
        if (bn->requires_grad) bn->grad_mat().row(0) += g.colwise().sum();
      };
    }
    return out;
  }

  /// x[n,in] * w[in,out] with no bias
  V linear(const V& x, const V& w) { return matmul(x, w); }

  // ---- elementwise ----------------------------------------------------------

  V add(const V& a, const V& b) {
    check(a.rows() == b.rows() && a.cols() == b.cols(), "add shapes");
    V out = make(a.rows(), a.cols(), {a, b});
    auto& ov = out.value();
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      auto* bn = b.node();
      o->backward = [o, an, bn, keep = keep_alive({a, b})] {
        accumulate(an, o->grad);
        accumulate(bn, o->grad);
      };
    }
    return out;
  }

  V sub(const V& a, const V& b) { return add(a, scale(b, T(-1))); }

  V mul(const V& a, const V& b) {
    check(a.rows() == b.rows() && a.cols() == b.cols(), "mul shapes");
    V out = make(a.rows(), a.cols(), {a, b});
    auto& ov = out.value();
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      auto* bn = b.node();
      o->backward = [o, an, bn, keep = keep_alive({a, b})] {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < o->grad.size(); ++i) bn->grad[i] += o->grad[i] * an->value[i];
        }
      };
    }
    return out;
  }

  V scale(const V& a, T s) {
    return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
  }

  /// a[n,c] + row[1,c] broadcast over rows
  V add_row(const V& a, const V& row) {
    check(row.rows() == 1 && row.cols() == a.cols(), "add_row shapes");
    V out = make(a.rows(), a.cols(), {a, row});
    auto om = out.node()->mat();
    om = a.mat();
    om.rowwise() += row.mat().row(0);
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      auto* rn = row.node();
      o->backward = [o, an, rn, keep = keep_alive({a, row})] {
        accumulate(an, o->grad);
        if (rn->requires_grad) rn->grad_mat().row(0) += o->grad_mat().colwise().sum();
      };
    }
    return out;
  }

  V exp(const V& a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
  }

  V relu(const V& a) {
    return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
  }

  V silu(const V& a) {
    return unary(
        a, [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T x, T) {
          const T s = T(1) / (T(1) + std::exp(-x));
          return s * (T(1) + x * (T(1) - s));
        });
  }

  /// tanh-approximated GELU
  V gelu(const V& a) {
    constexpr T k = T(0.7978845608028654);
    constexpr T c = T(0.044715);
    return unary(
        a,
        [](T x) { return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x))); },
        [](T x, T) {
          const T u = k * (x + c * x * x * x);
          const T t = std::tanh(u);
          const T du = k * (T(1) + T(3) * c * x * x);
          return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
        });
  }

  V sigmoid(const V& a) {
    return unary(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
  }

  /// Inverted dropout; identity when p == 0 or rng is null.
  V dropout(const V& a, double p, Rng* rng) {
    if (p <= 0.0 || rng == nullptr) {
      return a;
    }
    std::vector<T> mask(a.size());
    const T keep = T(1.0 / (1.0 - p));
    for (auto& m : mask) m = rng->uniform() < p ? T(0) : keep;
    V out = make(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < mask.size(); ++i) out.value()[i] = a.value()[i] * mask[i];
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      o->backward = [o, an, mask = std::move(mask), keep = keep_alive({a})] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < mask.size(); ++i) an->grad[i] += o->grad[i] * mask[i];
      };
    }
    return out;
  }

  // ---- shape ----------------------------------------------------------------

  V reshape(const V& a, int rows, int cols) {
    check(static_cast<std::size_t>(rows) * cols == a.size(), "reshape size");
    V out = make(rows, cols, {a});
    out.value() = a.value();
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      o->backward = [o, an, keep = keep_alive({a})] { accumulate(an, o->grad); };
    }
    return out;
  }

  V concat_cols(const std::vector<V>& parts) {
    check(!parts.empty(), "concat of nothing");
    const int rows = parts.front().rows();
    int cols = 0;
    for (const auto& p : parts) {
      check(p.rows() == rows, "concat_cols rows");
      cols += p.cols();
    }
    V out = make(rows, cols, parts);
    auto om = out.node()->mat();
    int at = 0;
    for (const auto& p : parts) {
      om.middleCols(at, p.cols()) = p.mat();
      at += p.cols();
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      std::vector<Node<T>*> ins;
      for (const auto& p : parts) ins.push_back(p.node());
      o->backward = [o, ins, keep = keep_alive(parts)] {
        auto g = o->grad_mat();
        int at = 0;
        for (auto* n : ins) {
          if (n->requires_grad) n->grad_mat() += g.middleCols(at, n->cols);
          at += n->cols;
        }
      };
    }
    return out;
  }

  V concat_rows(const std::vector<V>& parts) {
    check(!parts.empty(), "concat of nothing");
    const int cols = parts.front().cols();
    int rows = 0;
    for (const auto& p : parts) {
      check(p.cols() == cols, "concat_rows cols");
      rows += p.rows();
    }
    V out = make(rows, cols, parts);
    std::size_t at = 0;
    for (const auto& p : parts) {
      std::copy(p.value().begin(), p.value().end(), out.value().begin() + static_cast<std::ptrdiff_t>(at));
      at += p.size();
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      std::vector<Node<T>*> ins;
      for (const auto& p : parts) ins.push_back(p.node());
      o->backward = [o, ins, keep = keep_alive(parts)] {
        std::size_t at = 0;
        for (auto* n : ins) {
          if (n->requires_grad) {
            n->ensure_grad();
            for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += o->grad[at + i];
          }
          at += n->size();
        }
      };
    }
    return out;
  }

  V slice_rows(const V& a, int begin, int count) {
    check(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows range");
    V out = make(count, a.cols(), {a});
    const auto off = static_cast<std::ptrdiff_t>(begin) * a.cols();
    std::copy(a.value().begin() + off, a.value().begin() + off + static_cast<std::ptrdiff_t>(out.size()),
              out.value().begin());
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      o->backward = [o, an, off, keep = keep_alive({a})] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[static_cast<std::size_t>(off) + i] += o->grad[i];
      };
    }
    return out;
  }

  V slice_cols(const V& a, int begin, int count) {
    check(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols range");
    V out = make(a.rows(), count, {a});
    out.node()->mat() = a.mat().middleCols(begin, count);
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      o->backward = [o, an, begin, count, keep = keep_alive({a})] {
        if (an->requires_grad) an->grad_mat().middleCols(begin, count) += o->grad_mat();
      };
    }
    return out;
  }

  /// Row gather: out[i] = table[ids[i]].
  V embedding(const V& table, const std::vector<int>& ids) {
    V out = make(static_cast<int>(ids.size()), table.cols(), {table});
    const int c = table.cols();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      check(ids[i] >= 0 && ids[i] < table.rows(), "embedding id out of range");
      std::copy_n(table.value().begin() + static_cast<std::ptrdiff_t>(ids[i]) * c, c,
                  out.value().begin() + static_cast<std::ptrdiff_t>(i) * c);
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* tn = table.node();
      o->backward = [o, tn, ids, c, keep = keep_alive({table})] {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          for (int j = 0; j < c; ++j) {
            tn->grad[static_cast<std::size_t>(ids[i]) * c + j] += o->grad[i * c + j];
          }
        }
      };
    }
    return out;
  }

  // ---- normalization / attention --------------------------------------------

  /// Row-wise layer norm with learned gain and bias ([1,c] each).
  V layer_norm(const V& x, const V& gain, const V& bias, T eps = T(1e-5)) {
    const int n = x.rows();
    const int c = x.cols();
    check(gain.cols() == c && bias.cols() == c, "layer_norm params");
    V out = make(n, c, {x, gain, bias});
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    auto& ov = out.value();
    for (int r = 0; r < n; ++r) {
      const T* row = xv.data() + static_cast<std::size_t>(r) * c;
      T mean = 0;
      for (int j = 0; j < c; ++j) mean += row[j];
      mean /= T(c);
      T var = 0;
      for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= T(c);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      for (int j = 0; j < c; ++j) {
        const std::size_t k = static_cast<std::size_t>(r) * c + j;
        xhat[k] = (row[j] - mean) * is;
        ov[k] = xhat[k] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
      }
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* xn = x.node();
      auto* gn = gain.node();
      auto* bn = bias.node();
      o->backward = [o, xn, gn, bn, n, c, xhat = std::move(xhat), inv_std = std::move(inv_std),
                     keep = keep_alive({x, gain, bias})] {
        const auto& g = o->grad;
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        std::vector<T> dxhat(static_cast<std::size_t>(c));
        for (int r = 0; r < n; ++r) {
          T sum_d = 0;
          T sum_dx = 0;
          for (int j = 0; j < c; ++j) {
            const std::size_t k = static_cast<std::size_t>(r) * c + j;
            if (gn->requires_grad) gn->grad[static_cast<std::size_t>(j)] += g[k] * xhat[k];
            if (bn->requires_grad) bn->grad[static_cast<std::size_t>(j)] += g[k];
            dxhat[static_cast<std::size_t>(j)] = g[k] * gn->value[static_cast<std::size_t>(j)];
            sum_d += dxhat[static_cast<std::size_t>(j)];
            sum_dx += dxhat[static_cast<std::size_t>(j)] * xhat[k];
          }
          if (!xn->requires_grad) continue;
          const T is = inv_std[static_cast<std::size_t>(r)];
          for (int j = 0; j < c; ++j) {
            const std::size_t k = static_cast<std::size_t>(r) * c + j;
            xn->grad[k] += is * (dxhat[static_cast<std::size_t>(j)] - sum_d / T(c) - xhat[k] * sum_dx / T(c));
          }
        }
      };
    }
    return out;
  }

  /// Multi-head scaled dot-product attention on projected q[Tq,d], k[Tk,d], v[Tk,d].
  /// With `causal`, query t attends to keys <= t + (Tk - Tq).
  /// If `probs_out` is given it receives the per-head probability rows.
  V attention(const V& q, const V& k, const V& v, int heads, bool causal,
              std::vector<Matrix<T>>* probs_out = nullptr) {
    const int tq = q.rows();
    const int tk = k.rows();
    const int d = q.cols();
    check(k.cols() == d && v.cols() == d && v.rows() == tk, "attention shapes");
    check(heads > 0 && d % heads == 0, "heads must divide model dim");
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(T(dh));
    const int shift = tk - tq;

    V out = make(tq, d, {q, k, v});
    auto om = out.node()->mat();
    auto qm = q.mat();
    auto km = k.mat();
    auto vm = v.mat();
    std::vector<Matrix<T>> probs(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Matrix<T> s = (qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose()) * scale;
      for (int i = 0; i < tq; ++i) {
        const int limit = causal ? std::min(tk, i + shift + 1) : tk;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < limit; ++j) mx = std::max(mx, s(i, j));
        T sum = 0;
        for (int j = 0; j < limit; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          sum += s(i, j);
        }
        for (int j = 0; j < limit; ++j) s(i, j) /= sum;
        for (int j = limit; j < tk; ++j) s(i, j) = T(0);
      }
      om.middleCols(h * dh, dh).noalias() = s * vm.middleCols(h * dh, dh);
      probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    if (probs_out != nullptr) {
      *probs_out = probs;
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* qn = q.node();
      auto* kn = k.node();
      auto* vn = v.node();
      o->backward = [o, qn, kn, vn, heads, dh, scale, probs = std::move(probs), keep = keep_alive({q, k, v})] {
        auto g = o->grad_mat();
        for (int h = 0; h < heads; ++h) {
          const Matrix<T>& p = probs[static_cast<std::size_t>(h)];
          auto gh = g.middleCols(h * dh, dh);
          if (vn->requires_grad) vn->grad_mat().middleCols(h * dh, dh).noalias() += p.transpose() * gh;
          if (!qn->requires_grad && !kn->requires_grad) continue;
          Matrix<T> dp = gh * vn->mat().middleCols(h * dh, dh).transpose();
          // softmax backward: ds = p * (dp - rowsum(dp * p))
          Eigen::Matrix<T, Eigen::Dynamic, 1> dots = (dp.array() * p.array()).rowwise().sum();
          Matrix<T> ds = (p.array() * (dp.colwise() - dots).array()).matrix() * scale;
          if (qn->requires_grad) qn->grad_mat().middleCols(h * dh, dh).noalias() += ds * kn->mat().middleCols(h * dh, dh);
          if (kn->requires_grad) kn->grad_mat().middleCols(h * dh, dh).noalias() += ds.transpose() * qn->mat().middleCols(h * dh, dh);
        }
      };
    }
    return out;
  }

  // ---- reductions and losses ------------------------------------------------

  V sum(const V& a) {
    V out = make(1, 1, {a});
    T s = 0;
    for (T x : a.value()) s += x;
    out.value()[0] = s;
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      o->backward = [o, an, keep = keep_alive({a})] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (auto& g : an->grad) g += o->grad[0];
      };
    }
    return out;
  }

  V mean(const V& a) { return scale(sum(a), T(1) / T(a.size())); }

  /// Mean of -log softmax(logits[t])[target[t]] over rows with weight > 0.
  V cross_entropy(const V& logits, const std::vector<int>& targets, std::span<const T> weights) {
    const int n = logits.rows();
    const int c = logits.cols();
    check(static_cast<int>(targets.size()) == n && static_cast<int>(weights.size()) == n, "cross_entropy rows");
    T total_w = 0;
    for (T w : weights) total_w += w;
    V out = make(1, 1, {logits});
    std::vector<T> probs(logits.size(), T(0));
    T loss = 0;
    const auto& lv = logits.value();
    for (int r = 0; r < n; ++r) {
      if (weights[static_cast<std::size_t>(r)] == T(0)) continue;
      check(targets[static_cast<std::size_t>(r)] >= 0 && targets[static_cast<std::size_t>(r)] < c, "target id");
      const T* row = lv.data() + static_cast<std::size_t>(r) * c;
      T mx = *std::max_element(row, row + c);
      T sum = 0;
      for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
      const T lse = mx + std::log(sum);
      for (int j = 0; j < c; ++j) probs[static_cast<std::size_t>(r) * c + j] = std::exp(row[j] - lse);
      loss += weights[static_cast<std::size_t>(r)] * (lse - row[targets[static_cast<std::size_t>(r)]]);
    }
    out.value()[0] = total_w > T(0) ? loss / total_w : T(0);
    if (out.requires_grad() && total_w > T(0)) {
      auto* o = out.node();
      auto* ln = logits.node();
      o->backward = [o, ln, n, c, targets, weights = std::vector<T>(weights.begin(), weights.end()), total_w,
                    probs = std::move(probs), keep = keep_alive({logits})] {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const T g = o->grad[0] / total_w;
        for (int r = 0; r < n; ++r) {
          const T w = weights[static_cast<std::size_t>(r)];
          if (w == T(0)) continue;
          for (int j = 0; j < c; ++j) {
            const std::size_t k = static_cast<std::size_t>(r) * c + j;
            ln->grad[k] += g * w * (probs[k] - (j == targets[static_cast<std::size_t>(r)] ? T(1) : T(0)));
          }
        }
      };
    }
    return out;
  }

  /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets, evaluated
  /// stably as softplus(z) - y*z.
  V bce_with_logits(const V& logits, std::span<const T> targets) {
    check(targets.size() == logits.size(), "bce target size");
    V out = make(1, 1, {logits});
    T loss = 0;
    const auto& z = logits.value();
    for (std::size_t i = 0; i < z.size(); ++i) {
      const T softplus = z[i] > T(0) ? z[i] + std::log1p(std::exp(-z[i])) : std::log1p(std::exp(z[i]));
      loss += softplus - targets[i] * z[i];
    }
    const T count = T(z.size());
    out.value()[0] = loss / count;
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* ln = logits.node();
      o->backward = [o, ln, targets = std::vector<T>(targets.begin(), targets.end()), count, keep = keep_alive({logits})] {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const T g = o->grad[0] / count;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const T s = T(1) / (T(1) + std::exp(-ln->value[i]));
          ln->grad[i] += g * (s - targets[i]);
        }
      };
    }
    return out;
  }

  /// Mean squared error against a constant target.
  V mse(const V& pred, std::span<const T> target) {
    check(target.size() == pred.size(), "mse target size");
    V out = make(1, 1, {pred});
    T loss = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const T e = pred.value()[i] - target[i];
      loss += e * e;
    }
    const T count = T(target.size());
    out.value()[0] = loss / count;
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* pn = pred.node();
      o->backward = [o, pn, target = std::vector<T>(target.begin(), target.end()), count, keep = keep_alive({pred})] {
        if (!pn->requires_grad) return;
        pn->ensure_grad();
        const T g = o->grad[0] * T(2) / count;
        for (std::size_t i = 0; i < target.size(); ++i) pn->grad[i] += g * (pn->value[i] - target[i]);
      };
    }
    return out;
  }

  /// KL(N(mu, exp(log_var)) || N(0, I)) = 1/2 sum(mu^2 + exp(log_var) - 1 - log_var),
  /// summed over latent dims and averaged over rows.
  V kl_divergence(const V& mu, const V& log_var) {
    check(mu.rows() == log_var.rows() && mu.cols() == log_var.cols(), "kld shapes");
    V out = make(1, 1, {mu, log_var});
    T total = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const T m = mu.value()[i];
      const T lv = log_var.value()[i];
      total += T(0.5) * (m * m + std::exp(lv) - T(1) - lv);
    }
    const T rows = T(mu.rows());
    out.value()[0] = total / rows;
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* mn = mu.node();
      auto* vn = log_var.node();
      o->backward = [o, mn, vn, rows, keep = keep_alive({mu, log_var})] {
        const T g = o->grad[0] / rows;
        if (mn->requires_grad) {
          mn->ensure_grad();
          for (std::size_t i = 0; i < mn->value.size(); ++i) mn->grad[i] += g * mn->value[i];
        }
        if (vn->requires_grad) {
          vn->ensure_grad();
          for (std::size_t i = 0; i < vn->value.size(); ++i) vn->grad[i] += g * T(0.5) * (std::exp(vn->value[i]) - T(1));
        }
      };
    }
    return out;
  }

  // ---- grouped / convolution ------------------------------------------------

  /// Independent affine map per row: out[i] = x[i] * w[i] + b[i], where w is
  /// stored as [groups, in*out] and b as [groups, out].
  V grouped_linear(const V& x, const V& w, const V& b, int out_dim) {
    const int groups = x.rows();
    const int in = x.cols();
    check(w.rows() == groups && w.cols() == in * out_dim, "grouped_linear weight shape");
    check(b.rows() == groups && b.cols() == out_dim, "grouped_linear bias shape");
    V out = make(groups, out_dim, {x, w, b});
    for (int gi = 0; gi < groups; ++gi) {
      ConstMatMap<T> wg(w.value().data() + static_cast<std::size_t>(gi) * in * out_dim, in, out_dim);
      auto orow = out.node()->mat().row(gi);
      orow.noalias() = x.mat().row(gi) * wg;
      orow += b.mat().row(gi);
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* xn = x.node();
      auto* wn = w.node();
      auto* bn = b.node();
      o->backward = [o, xn, wn, bn, groups, in, out_dim, keep = keep_alive({x, w, b})] {
        auto g = o->grad_mat();
        for (int gi = 0; gi < groups; ++gi) {
          ConstMatMap<T> wg(wn->value.data() + static_cast<std::size_t>(gi) * in * out_dim, in, out_dim);
          if (xn->requires_grad) xn->grad_mat().row(gi).noalias() += g.row(gi) * wg.transpose();
          if (wn->requires_grad) {
            wn->ensure_grad();
            MatMap<T> dw(wn->grad.data() + static_cast<std::size_t>(gi) * in * out_dim, in, out_dim);
            dw.noalias() += xn->mat().row(gi).transpose() * g.row(gi);
          }
          if (bn->requires_grad) bn->grad_mat().row(gi) += g.row(gi);
        }
      };
    }
    return out;
  }

  /// Geometry of a 3D convolution with cubic kernel; the input is laid out as
  /// [batch, channels * X * Y * Z] with channel-major, then canonical cell order.
  struct ConvGeometry {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 4;
    int stride = 2;
    int pad = 1;
    std::array<int, 3> in{};   // spatial extent of the conv input
    std::array<int, 3> out{};  // spatial extent of the conv output

    static ConvGeometry make(int cin, int cout, std::array<int, 3> in, int kernel, int stride, int pad) {
      ConvGeometry g{cin, cout, kernel, stride, pad, in, {}};
      for (int a = 0; a < 3; ++a) {
        g.out[static_cast<std::size_t>(a)] = (in[static_cast<std::size_t>(a)] + 2 * pad - kernel) / stride + 1;
      }
      return g;
    }
    int in_cells() const { return in[0] * in[1] * in[2]; }
    int out_cells() const { return out[0] * out[1] * out[2]; }
    int patch_len() const { return in_channels * kernel * kernel * kernel; }
  };

  /// Convolution: x[N, Cin*in] with w[Cout, Cin*k^3], b[1, Cout] -> [N, Cout*out].
  V conv3d(const V& x, const V& w, const V& b, const ConvGeometry& geo) {
    const int n = x.rows();
    check(x.cols() == geo.in_channels * geo.in_cells(), "conv3d input width");
    check(w.rows() == geo.out_channels && w.cols() == geo.patch_len(), "conv3d weight shape");
    check(b.cols() == geo.out_channels, "conv3d bias shape");
    const int p = geo.out_cells();
    Matrix<T> cols(geo.patch_len(), static_cast<Eigen::Index>(n) * p);
    im2col(x.value().data(), n, geo, cols.data());
    Matrix<T> y = w.mat() * cols;  // [Cout, N*P]
    V out = make(n, geo.out_channels * p, {x, w, b});
    auto& ov = out.value();
    for (int s = 0; s < n; ++s) {
      for (int c = 0; c < geo.out_channels; ++c) {
        for (int q = 0; q < p; ++q) {
          ov[(static_cast<std::size_t>(s) * geo.out_channels + c) * p + q] = y(c, static_cast<Eigen::Index>(s) * p + q) + b.value()[static_cast<std::size_t>(c)];
        }
      }
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* xn = x.node();
      auto* wn = w.node();
      auto* bn = b.node();
      o->backward = [o, xn, wn, bn, geo, n, p, cols = std::move(cols), keep = keep_alive({x, w, b})] {
        Matrix<T> dy(geo.out_channels, static_cast<Eigen::Index>(n) * p);
        for (int s = 0; s < n; ++s) {
          for (int c = 0; c < geo.out_channels; ++c) {
            for (int q = 0; q < p; ++q) {
              dy(c, static_cast<Eigen::Index>(s) * p + q) = o->grad[(static_cast<std::size_t>(s) * geo.out_channels + c) * p + q];
            }
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int c = 0; c < geo.out_channels; ++c) bn->grad[static_cast<std::size_t>(c)] += dy.row(c).sum();
        }
        if (wn->requires_grad) wn->grad_mat().noalias() += dy * cols.transpose();
        if (xn->requires_grad) {
          Matrix<T> dcols = wn->mat().transpose() * dy;
          xn->ensure_grad();
          col2im(dcols.data(), n, geo, xn->grad.data());
        }
      };
    }
    return out;
  }

  /// Transposed convolution, the adjoint of conv3d with geometry `geo`:
  /// x[N, Cin*geo.out] with w[Cin, Cout*k^3] (geo.in_channels == Cout,
  /// geo.out_channels == Cin), b[1, Cout] -> [N, Cout*geo.in].
  V conv_transpose3d(const V& x, const V& w, const V& b, const ConvGeometry& geo) {
    const int n = x.rows();
    const int cin = geo.out_channels;
    const int cout = geo.in_channels;
    const int p = geo.out_cells();
    const int cells = geo.in_cells();
    check(x.cols() == cin * p, "conv_transpose3d input width");
    check(w.rows() == cin && w.cols() == geo.patch_len(), "conv_transpose3d weight shape");
    check(b.cols() == cout, "conv_transpose3d bias shape");
    Matrix<T> xm(cin, static_cast<Eigen::Index>(n) * p);
    for (int s = 0; s < n; ++s) {
      for (int c = 0; c < cin; ++c) {
        for (int q = 0; q < p; ++q) {
          xm(c, static_cast<Eigen::Index>(s) * p + q) = x.value()[(static_cast<std::size_t>(s) * cin + c) * p + q];
        }
      }
    }
    Matrix<T> cols = w.mat().transpose() * xm;  // [Cout*k^3, N*P]
    V out = make(n, cout * cells, {x, w, b});
    col2im(cols.data(), n, geo, out.value().data());
    for (int s = 0; s < n; ++s) {
      for (int c = 0; c < cout; ++c) {
        T* dst = out.value().data() + (static_cast<std::size_t>(s) * cout + c) * cells;
        for (int q = 0; q < cells; ++q) dst[q] += b.value()[static_cast<std::size_t>(c)];
      }
    }
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* xn = x.node();
      auto* wn = w.node();
      auto* bn = b.node();
      o->backward = [o, xn, wn, bn, geo, n, p, cin, cout, cells, xm = std::move(xm), keep = keep_alive({x, w, b})] {
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int s = 0; s < n; ++s) {
            for (int c = 0; c < cout; ++c) {
              const T* src = o->grad.data() + (static_cast<std::size_t>(s) * cout + c) * cells;
              T acc = 0;
              for (int q = 0; q < cells; ++q) acc += src[q];
              bn->grad[static_cast<std::size_t>(c)] += acc;
            }
          }
        }
        Matrix<T> dcols(geo.patch_len(), static_cast<Eigen::Index>(n) * p);
        im2col(o->grad.data(), n, geo, dcols.data());
        if (wn->requires_grad) wn->grad_mat().noalias() += xm * dcols.transpose();
        if (xn->requires_grad) {
          Matrix<T> dx = wn->mat() * dcols;  // [Cin, N*P]
          xn->ensure_grad();
          for (int s = 0; s < n; ++s) {
            for (int c = 0; c < cin; ++c) {
              for (int q = 0; q < p; ++q) {
                xn->grad[(static_cast<std::size_t>(s) * cin + c) * p + q] += dx(c, static_cast<Eigen::Index>(s) * p + q);
              }
            }
          }
        }
      };
    }
    return out;
  }

 private:
  static void check(bool ok, const char* what) {
    if (!ok) {
      fail(ErrorKind::DimensionMismatch, what);
    }
  }

  static std::vector<std::shared_ptr<Node<T>>> keep_alive(const std::vector<V>& vars) {
    std::vector<std::shared_ptr<Node<T>>> out;
    out.reserve(vars.size());
    for (const auto& v : vars) out.push_back(v.ptr());
    return out;
  }

  static void accumulate(Node<T>* n, std::span<const T> g) {
    if (!n->requires_grad) return;
    n->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
  }

  /// New output node; it joins the tape only if some input needs a gradient.
  V make(int rows, int cols, const std::vector<V>& inputs) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    V out = V::zeros(rows, cols, needs);
    if (needs) tape_.push_back(out.ptr());
    return out;
  }

  template <class F, class DF>
  V unary(const V& a, F f, DF df) {
    V out = make(a.rows(), a.cols(), {a});
    auto& ov = out.value();
    const auto& av = a.value();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
    if (out.requires_grad()) {
      auto* o = out.node();
      auto* an = a.node();
      o->backward = [o, an, df, keep = keep_alive({a})] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * df(an->value[i], o->value[i]);
      };
    }
    return out;
  }

  // cols[(c*k + kx)*k*k + ky*k + kz, s*P + q] = x[s, c, in(q, kx, ky, kz)]
  static void im2col(const T* x, int n, const ConvGeometry& g, T* cols) {
    const int k = g.kernel;
    const int p = g.out_cells();
    const Eigen::Index width = static_cast<Eigen::Index>(n) * p;
    const int cells = g.in_cells();
    for (int c = 0; c < g.in_channels; ++c) {
      for (int kx = 0; kx < k; ++kx) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kz = 0; kz < k; ++kz) {
            const Eigen::Index row = ((static_cast<Eigen::Index>(c) * k + kx) * k + ky) * k + kz;
            T* dst = cols + row * width;
            for (int s = 0; s < n; ++s) {
              const T* src = x + (static_cast<std::size_t>(s) * g.in_channels + c) * cells;
              int q = 0;
              for (int ox = 0; ox < g.out[0]; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                for (int oy = 0; oy < g.out[1]; ++oy) {
                  const int iy = oy * g.stride - g.pad + ky;
                  for (int oz = 0; oz < g.out[2]; ++oz, ++q) {
                    const int iz = oz * g.stride - g.pad + kz;
                    const bool inside = ix >= 0 && iy >= 0 && iz >= 0 && ix < g.in[0] && iy < g.in[1] && iz < g.in[2];
                    dst[static_cast<Eigen::Index>(s) * p + q] =
                        inside ? src[(ix * g.in[1] + iy) * g.in[2] + iz] : T(0);
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  // Adjoint of im2col: scatter-adds columns back onto x.
  static void col2im(const T* cols, int n, const ConvGeometry& g, T* x) {
    const int k = g.kernel;
    const int p = g.out_cells();
    const Eigen::Index width = static_cast<Eigen::Index>(n) * p;
    const int cells = g.in_cells();
    for (int c = 0; c < g.in_channels; ++c) {
      for (int kx = 0; kx < k; ++kx) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kz = 0; kz < k; ++kz) {
            const Eigen::Index row = ((static_cast<Eigen::Index>(c) * k + kx) * k + ky) * k + kz;
            const T* src = cols + row * width;
            for (int s = 0; s < n; ++s) {
              T* dst = x + (static_cast<std::size_t>(s) * g.in_channels + c) * cells;
              int q = 0;
              for (int ox = 0; ox < g.out[0]; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                for (int oy = 0; oy < g.out[1]; ++oy) {
                  const int iy = oy * g.stride - g.pad + ky;
                  for (int oz = 0; oz < g.out[2]; ++oz, ++q) {
                    const int iz = oz * g.stride - g.pad + kz;
                    if (ix >= 0 && iy >= 0 && iz >= 0 && ix < g.in[0] && iy < g.in[1] && iz < g.in[2]) {
                      dst[(ix * g.in[1] + iy) * g.in[2] + iz] += src[static_cast<Eigen::Index>(s) * p + q];
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  std::vector<std::shared_ptr<Node<T>>> tape_;
};

}  // namespace voxpatch::ag
