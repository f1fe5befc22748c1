#pragma once

// A small reverse-mode tape over whole matrices. Every forward pass in the
// library goes through it; with recording off it is a plain eager evaluator
// and no backward closures or saved activations are kept.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "vxl/numerics.hpp"

namespace vxl::ad {

struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::uint32_t>::max(); }
};

// Prefix visibility: query row i sees key rows [0, limit[i]).
using KeyLimits = std::vector<std::uint32_t>;

inline constexpr double kRopeBase = 10000.0;

template <class T>
class Tape {
 public:
  explicit Tape(bool record = false, OpCounter* counter = nullptr) : record_(record), counter_(counter) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  OpCounter* counter() const noexcept { return counter_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Non-owning leaf; `m` must outlive the tape.
  Var constant(const Mat<T>& m) { return push_ref(&m, false); }
  Var constant(Mat<T>&& m) { return push_owned(std::move(m), false); }
  // Non-owning leaf whose gradient is accumulated when recording.
  Var param(const Mat<T>& m) { return push_ref(&m, record_); }

  const Mat<T>& value(Var v) const { return node(v).value(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient of the last backward() root w.r.t. `v`; empty when `v` was unreached.
  const Mat<T>& grad(Var v) const { return node(v).grad; }

  void backward(Var root) {
    require(record_, "backward: tape was not recording");
    const Mat<T>& rv = value(root);
    require(rv.rows() == 1 && rv.cols() == 1, "backward: root must be a scalar, got " + rv.shape());
    if (!node(root).requires_grad) return;
    grad_ref(root.id).fill(T(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && !n.grad.empty()) n.back();
    }
  }

  // ---- ops ---------------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Mat<T>& av = value(a);
    const Mat<T>& bv = value(b);
    Mat<T> out = vxl::matmul(av, bv, counter_);
    const Var r = push_owned(std::move(out), rg(a) || rg(b));
    if (rg(r)) {
      node(r).back = [this, a, b, r] {
        const Mat<T>& g = node(r).grad;
        const Mat<T>& A = value(a);
        const Mat<T>& B = value(b);
        if (rg(a)) kernel::gemm_nt(g.data(), B.data(), grad_ref(a.id).data(), g.rows(), g.cols(), B.rows(), true);
        if (rg(b)) kernel::gemm_tn(A.data(), g.data(), grad_ref(b.id).data(), A.rows(), A.cols(), g.cols(), true);
      };
    }
    return r;
  }

  Var add(Var a, Var b) {
    const Mat<T>& av = value(a);
    const Mat<T>& bv = value(b);
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add: shape mismatch " + av.shape() + " vs " + bv.shape());
    Mat<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += bv.data()[i];
    const Var r = push_owned(std::move(out), rg(a) || rg(b));
    if (rg(r)) {
      node(r).back = [this, a, b, r] {
        const Mat<T>& g = node(r).grad;
        if (rg(a)) accumulate(grad_ref(a.id), g);
        if (rg(b)) accumulate(grad_ref(b.id), g);
      };
    }
    return r;
  }

  Var mul(Var a, Var b) {
    const Mat<T>& av = value(a);
    const Mat<T>& bv = value(b);
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "mul: shape mismatch " + av.shape() + " vs " + bv.shape());
    Mat<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= bv.data()[i];
    if (counter_) counter_->add_activations(out.size());
    const Var r = push_owned(std::move(out), rg(a) || rg(b));
    if (rg(r)) {
      node(r).back = [this, a, b, r] {
        const Mat<T>& g = node(r).grad;
        const Mat<T>& A = value(a);
        const Mat<T>& B = value(b);
        if (rg(a)) {
          Mat<T>& ga = grad_ref(a.id);
          for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * B.data()[i];
        }
        if (rg(b)) {
          Mat<T>& gb = grad_ref(b.id);
          for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i] * A.data()[i];
        }
      };
    }
    return r;
  }

  Var silu(Var a) {
    Mat<T> out = vxl::silu(value(a));
    if (counter_) counter_->add_activations(out.size());
    const Var r = push_owned(std::move(out), rg(a));
    if (rg(r)) {
      node(r).back = [this, a, r] {
        const Mat<T>& g = node(r).grad;
        const Mat<T>& x = value(a);
        Mat<T>& ga = grad_ref(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = T(1) / (T(1) + std::exp(-x.data()[i]));
          ga.data()[i] += g.data()[i] * (s * (T(1) + x.data()[i] * (T(1) - s)));
        }
      };
    }
    return r;
  }

  Var rms_norm(Var x, Var gain) {
    const Mat<T>& xv = value(x);
    Mat<T> out = vxl::rms_norm(xv, value(gain));
    const Var r = push_owned(std::move(out), rg(x) || rg(gain));
    if (rg(r)) {
      node(r).back = [this, x, gain, r] {
        const Mat<T>& g = node(r).grad;
        const Mat<T>& X = value(x);
        const Mat<T>& G = value(gain);
        const std::size_t n = X.cols();
        for (std::size_t row = 0; row < X.rows(); ++row) {
          T ss = T(0);
          for (T v : X.row(row)) ss += v * v;
          const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + static_cast<T>(kRmsEps));
          if (rg(gain)) {
            Mat<T>& gg = grad_ref(gain.id);
            for (std::size_t c = 0; c < n; ++c) gg(0, c) += g(row, c) * X(row, c) * inv;
          }
          if (rg(x)) {
            // d/dx_j of x_c*inv*G_c = G_c*(delta_cj*inv - x_c*x_j*inv^3/n)
            T dot = T(0);
            for (std::size_t c = 0; c < n; ++c) dot += g(row, c) * G(0, c) * X(row, c);
            const T coef = dot * inv * inv * inv / static_cast<T>(n);
            Mat<T>& gx = grad_ref(x.id);
            for (std::size_t c = 0; c < n; ++c) gx(row, c) += g(row, c) * G(0, c) * inv - coef * X(row, c);
          }
        }
      };
    }
    return r;
  }

  // out[i] = src[idx[i]]
  Var gather_rows(Var src, std::vector<std::uint32_t> idx) {
    const Mat<T>& s = value(src);
    Mat<T> out(idx.size(), s.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < s.rows(), "gather_rows: index " + std::to_string(idx[i]) + " out of range " + s.shape());
      std::copy_n(s.row(idx[i]).data(), s.cols(), out.row(i).data());
    }
    const Var r = push_owned(std::move(out), rg(src));
    if (rg(r)) {
      node(r).back = [this, src, r, idx = std::move(idx)] {
        const Mat<T>& g = node(r).grad;
        Mat<T>& gs = grad_ref(src.id);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          T* dst = gs.row(idx[i]).data();
          const T* gi = g.row(i).data();
          for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += gi[c];
        }
      };
    }
    return r;
  }

  // Builds a `rows`-row matrix whose row idx[k] is row k of the paired source.
  Var scatter_rows(std::size_t rows, std::vector<std::pair<Var, std::vector<std::uint32_t>>> parts) {
    require(!parts.empty(), "scatter_rows: no parts");
    const std::size_t cols = value(parts.front().first).cols();
    Mat<T> out(rows, cols);
    std::vector<char> seen(rows, 0);
    bool any_rg = false;
    for (const auto& [v, idx] : parts) {
      const Mat<T>& s = value(v);
      require(s.cols() == cols && s.rows() == idx.size(), "scatter_rows: part shape " + s.shape() + " mismatch");
      for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < rows && !seen[idx[i]], "scatter_rows: bad or duplicate target row");
        seen[idx[i]] = 1;
        std::copy_n(s.row(i).data(), cols, out.row(idx[i]).data());
      }
      any_rg = any_rg || rg(v);
    }
    const Var r = push_owned(std::move(out), any_rg);
    if (rg(r)) {
      node(r).back = [this, r, parts = std::move(parts)] {
        const Mat<T>& g = node(r).grad;
        for (const auto& [v, idx] : parts) {
          if (!rg(v)) continue;
          Mat<T>& gv = grad_ref(v.id);
          for (std::size_t i = 0; i < idx.size(); ++i) {
            const T* src = g.row(idx[i]).data();
            T* dst = gv.row(i).data();
            for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += src[c];
          }
        }
      };
    }
    return r;
  }

  // Vertical concatenation; either side may have zero rows.
  Var concat_rows(Var a, Var b) {
    const Mat<T>& av = value(a);
    const Mat<T>& bv = value(b);
    if (av.rows() > 0 && bv.rows() > 0)
      require(av.cols() == bv.cols(), "concat_rows: width mismatch " + av.shape() + " vs " + bv.shape());
    Mat<T> out = av;
    out.append_rows(bv);
    const Var r = push_owned(std::move(out), rg(a) || rg(b));
    if (rg(r)) {
      node(r).back = [this, a, b, r] {
        const Mat<T>& g = node(r).grad;
        const std::size_t na = value(a).rows();
        const std::size_t w = g.cols();
        if (rg(a) && na > 0) {
          Mat<T>& ga = grad_ref(a.id);
          for (std::size_t i = 0; i < na * w; ++i) ga.data()[i] += g.data()[i];
        }
        if (rg(b) && g.rows() > na) {
          Mat<T>& gb = grad_ref(b.id);
          for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] += g.data()[na * w + i];
        }
      };
    }
    return r;
  }

  // Rotary position encoding on adjacent pairs within each head.
  Var rope(Var x, std::vector<std::int64_t> positions, std::size_t head_dim) {
    const Mat<T>& xv = value(x);
    require(positions.size() == xv.rows(), "rope: positions/rows mismatch");
    require(head_dim % 2 == 0 && xv.cols() % head_dim == 0, "rope: head_dim must be even and divide width");
    Mat<T> out(xv.rows(), xv.cols());
    rotate(xv, out, positions, head_dim, 1.0);
    const Var r = push_owned(std::move(out), rg(x));
    if (rg(r)) {
      node(r).back = [this, x, r, head_dim, positions = std::move(positions)] {
        const Mat<T>& g = node(r).grad;
        Mat<T> back(g.rows(), g.cols());
        rotate(g, back, positions, head_dim, -1.0);
        accumulate(grad_ref(x.id), back);
      };
    }
    return r;
  }

  // Multi-head scaled dot-product attention with grouped KV heads and a
  // per-query key prefix limit. Scores are formed for every (query, key)
  // pair and masked afterwards, so the instrumented count is the dense one.
  Var attention(Var q, Var k, Var v, KeyLimits limits, std::size_t q_heads, std::size_t kv_heads, std::size_t head_dim) {
    const Mat<T>& Q = value(q);
    const Mat<T>& K = value(k);
    const Mat<T>& V = value(v);
    const std::size_t nq = Q.rows();
    const std::size_t nk = K.rows();
    require(Q.cols() == q_heads * head_dim, "attention: query width " + Q.shape());
    require(K.cols() == kv_heads * head_dim && V.cols() == K.cols() && V.rows() == nk, "attention: key/value shapes");
    require(kv_heads > 0 && q_heads % kv_heads == 0, "attention: q_heads must be a multiple of kv_heads");
    require(limits.size() == nq, "attention: limits/rows mismatch");
    for (auto l : limits) require(l >= 1 && l <= nk, "attention: each query needs 1..n_keys visible keys");

    const std::size_t group = q_heads / kv_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const bool keep = record_ && (rg(q) || rg(k) || rg(v));
    std::vector<Mat<T>> probs;
    if (keep) probs.reserve(q_heads);
    Mat<T> out(nq, q_heads * head_dim);
    Mat<T> p(nq, nk);
    for (std::size_t h = 0; h < q_heads; ++h) {
      const std::size_t kh = h / group;
      for (std::size_t i = 0; i < nq; ++i) {
        const T* qi = Q.data() + i * Q.cols() + h * head_dim;
        T* pi = p.row(i).data();
        for (std::size_t j = 0; j < nk; ++j) {
          const T* kj = K.data() + j * K.cols() + kh * head_dim;
          T s = T(0);
          for (std::size_t c = 0; c < head_dim; ++c) s += qi[c] * kj[c];
          pi[j] = j < limits[i] ? s * scale : -std::numeric_limits<T>::infinity();
        }
        softmax_row_inplace(p.row(i));
        T* oi = out.data() + i * out.cols() + h * head_dim;
        for (std::size_t j = 0; j < nk; ++j) {
          const T pij = pi[j];
          const T* vj = V.data() + j * V.cols() + kh * head_dim;
          for (std::size_t c = 0; c < head_dim; ++c) oi[c] += pij * vj[c];
        }
      }
      if (keep) probs.push_back(p);
    }
    if (counter_) {
      const std::uint64_t dense = static_cast<std::uint64_t>(q_heads) * nq * nk * head_dim;
      counter_->add_multiply_adds(dense, "qk");
      counter_->add_multiply_adds(dense, "av");
      counter_->add_activations(static_cast<std::uint64_t>(q_heads) * nq * nk);
    }
    const Var r = push_owned(std::move(out), keep);
    if (keep) {
      node(r).back = [this, q, k, v, r, q_heads, head_dim, group, scale, probs = std::move(probs)] {
        const Mat<T>& G = node(r).grad;
        const Mat<T>& Qm = value(q);
        const Mat<T>& Km = value(k);
        const Mat<T>& Vm = value(v);
        const std::size_t nq_ = Qm.rows();
        const std::size_t nk_ = Km.rows();
        Mat<T>* gq = rg(q) ? &grad_ref(q.id) : nullptr;
        Mat<T>* gk = rg(k) ? &grad_ref(k.id) : nullptr;
        Mat<T>* gv = rg(v) ? &grad_ref(v.id) : nullptr;
        std::vector<T> dp(nk_);
        for (std::size_t h = 0; h < q_heads; ++h) {
          const std::size_t kh = h / group;
          const Mat<T>& P = probs[h];
          for (std::size_t i = 0; i < nq_; ++i) {
            const T* gi = G.data() + i * G.cols() + h * head_dim;
            const T* pi = P.row(i).data();
            T dot = T(0);
            for (std::size_t j = 0; j < nk_; ++j) {
              const T* vj = Vm.data() + j * Vm.cols() + kh * head_dim;
              T s = T(0);
              for (std::size_t c = 0; c < head_dim; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += s * pi[j];
              if (gv && pi[j] != T(0)) {
                T* gvj = gv->data() + j * gv->cols() + kh * head_dim;
                for (std::size_t c = 0; c < head_dim; ++c) gvj[c] += pi[j] * gi[c];
              }
            }
            const T* qi = Qm.data() + i * Qm.cols() + h * head_dim;
            T* gqi = gq ? gq->data() + i * gq->cols() + h * head_dim : nullptr;
            for (std::size_t j = 0; j < nk_; ++j) {
              if (pi[j] == T(0)) continue;
              const T ds = pi[j] * (dp[j] - dot) * scale;
              const T* kj = Km.data() + j * Km.cols() + kh * head_dim;
              if (gqi)
                for (std::size_t c = 0; c < head_dim; ++c) gqi[c] += ds * kj[c];
              if (gk) {
                T* gkj = gk->data() + j * gk->cols() + kh * head_dim;
                for (std::size_t c = 0; c < head_dim; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      };
    }
    return r;
  }

  // scale * sum over `rows` of -log softmax(logits[row])[target]. Returns 1x1.
  Var cross_entropy(Var logits, std::vector<std::uint32_t> rows, std::vector<std::uint32_t> targets, T scale) {
    const Mat<T>& L = value(logits);
    require(rows.size() == targets.size(), "cross_entropy: rows/targets mismatch");
    T total = T(0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] < L.rows(), "cross_entropy: row out of range");
      require(targets[i] < L.cols(), "cross_entropy: target id " + std::to_string(targets[i]) + " >= vocab " +
                                         std::to_string(L.cols()));
      total += row_nll(L.row(rows[i]), targets[i]);
    }
    Mat<T> out(1, 1, total * scale);
    const Var r = push_owned(std::move(out), rg(logits));
    if (rg(r)) {
      node(r).back = [this, logits, r, scale, rows = std::move(rows), targets = std::move(targets)] {
        const T g = node(r).grad(0, 0) * scale;
        const Mat<T>& Lm = value(logits);
        Mat<T>& gl = grad_ref(logits.id);
        std::vector<T> p(Lm.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
          auto src = Lm.row(rows[i]);
          std::copy(src.begin(), src.end(), p.begin());
          softmax_row_inplace(std::span<T>(p));
          T* dst = gl.row(rows[i]).data();
          for (std::size_t c = 0; c < p.size(); ++c) dst[c] += g * p[c];
          dst[targets[i]] -= g;
        }
      };
    }
    return r;
  }

  static T row_nll(std::span<const T> row, std::size_t target) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T x : row) mx = std::max(mx, x);
    T sum = T(0);
    for (T x : row) sum += std::exp(x - mx);
    return mx + std::log(sum) - row[target];
  }

 private:
  struct Node {
    Mat<T> owned;
    const Mat<T>* ref = nullptr;
    Mat<T> grad;
    bool requires_grad = false;
    std::function<void()> back;
    const Mat<T>& value() const { return ref ? *ref : owned; }
  };

  Var push_ref(const Mat<T>* m, bool requires_grad) {
    Node n;
    n.ref = m;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push_owned(Mat<T>&& m, bool requires_grad) {
    Node n;
    n.owned = std::move(m);
    n.requires_grad = record_ && requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    require(v.valid() && v.id < nodes_.size(), "tape: invalid variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    require(v.valid() && v.id < nodes_.size(), "tape: invalid variable");
    return nodes_[v.id];
  }
  bool rg(Var v) const { return nodes_[v.id].requires_grad; }

  Mat<T>& grad_ref(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Mat<T>(n.value().rows(), n.value().cols());
    return n.grad;
  }

  static void accumulate(Mat<T>& dst, const Mat<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
  }

  static void rotate(const Mat<T>& in, Mat<T>& out, const std::vector<std::int64_t>& positions, std::size_t head_dim,
                     double sign) {
    const std::size_t half = head_dim / 2;
    std::vector<T> cs(half), sn(half);
    for (std::size_t r = 0; r < in.rows(); ++r) {
      for (std::size_t i = 0; i < half; ++i) {
        const double theta = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = sign * static_cast<double>(positions[r]) * theta;
        cs[i] = static_cast<T>(std::cos(angle));
        sn[i] = static_cast<T>(std::sin(angle));
      }
      const T* x = in.row(r).data();
      T* y = out.row(r).data();
      for (std::size_t base = 0; base < in.cols(); base += head_dim) {
        for (std::size_t i = 0; i < half; ++i) {
          const T x0 = x[base + 2 * i];
          const T x1 = x[base + 2 * i + 1];
          y[base + 2 * i] = x0 * cs[i] - x1 * sn[i];
          y[base + 2 * i + 1] = x0 * sn[i] + x1 * cs[i];
        }
      }
    }
  }

  bool record_;
  OpCounter* counter_;
  std::deque<Node> nodes_;
};

}  // namespace vxl::ad
