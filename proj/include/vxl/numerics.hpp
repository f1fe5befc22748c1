#pragma once

// Dense row-major matrices and the handful of kernels the toy transformer
// needs. Everything is templated on the element type so the same code runs
// at 32-bit (throughput) and 64-bit (gradient checks).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vxl/error.hpp"

namespace vxl {

enum class Precision : std::uint8_t { f32 = 4, f64 = 8 };

inline Precision precision_from_code(int code) {
  if (code == 4) return Precision::f32;
  if (code == 8) return Precision::f64;
  fail_input("precision code must be 4 or 8, got " + std::to_string(code));
}

template <class T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

template <class T>
class Mat {
 public:
  using value_type = T;

  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Mat: data length " + std::to_string(data_.size()) + " != " +
                                               std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Appends the rows of `other`; an empty matrix adopts other's width.
  void append_rows(const Mat& other) {
    if (other.rows_ == 0) return;
    if (rows_ == 0) cols_ = other.cols_;
    require(cols_ == other.cols_, "append_rows: width mismatch " + shape() + " vs " + other.shape());
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
  }

  template <class U>
  Mat<U> cast() const {
    Mat<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Mat& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Counts one unit per fused multiply-add, so FLOPs = 2 x multiply_adds.
struct OpCounter {
  std::uint64_t multiply_adds = 0;
  std::uint64_t activations = 0;
  bool enabled = true;
  std::string term;  // bucket for multiply-adds when set (see OpTerm)
  std::map<std::string, std::uint64_t> by_term;

  void add_multiply_adds(std::uint64_t n, const char* override_term = nullptr) {
    if (!enabled) return;
    multiply_adds += n;
    if (override_term)
      by_term[override_term] += n;
    else if (!term.empty())
      by_term[term] += n;
  }
  void add_activations(std::uint64_t n) noexcept {
    if (enabled) activations += n;
  }
  void reset() noexcept {
    multiply_adds = 0;
    activations = 0;
    by_term.clear();
  }
  std::uint64_t of(const std::string& t) const {
    auto it = by_term.find(t);
    return it == by_term.end() ? 0 : it->second;
  }
};

// Scoped term label on a (possibly null) counter.
class OpTerm {
 public:
  OpTerm(OpCounter* c, const char* t) : c_(c) {
    if (c_) prev_ = std::exchange(c_->term, t);
  }
  ~OpTerm() {
    if (c_) c_->term = prev_;
  }
  OpTerm(const OpTerm&) = delete;
  OpTerm& operator=(const OpTerm&) = delete;

 private:
  OpCounter* c_;
  std::string prev_;
};

// Seeded generator with platform-independent transforms (the std::
// distributions are implementation-defined, the engine is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  // Independent stream keyed by (seed, stream); used for per-step and
  // per-instance determinism.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) { return Rng(mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ULL))); }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [0, n), rejection sampled to avoid modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    require(n > 0, "uniform_int: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller; the spare draw is discarded to keep the stream position simple.
  double normal(double mean = 0.0, double std = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + std * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_int(i)]);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

template <class T>
Mat<T> random_normal(std::size_t rows, std::size_t cols, double std, Rng& rng) {
  Mat<T> m(rows, cols);
  for (auto& x : m.flat()) x = static_cast<T>(rng.normal(0.0, std));
  return m;
}

template <class T>
bool all_finite(const Mat<T>& m) {
  return std::all_of(m.flat().begin(), m.flat().end(), [](T x) { return std::isfinite(x); });
}

template <class T>
void ensure_finite(const Mat<T>& m, const std::string& where) {
  if (!all_finite(m)) fail_internal("non-finite value in " + where);
}

namespace kernel {

// c[m x n] (+)= a[m x k] * b[k x n]
template <class T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <class T>
void gemm_nt(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T s = T(0);
#pragma omp simd reduction(+ : s)
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

// c[k x n] (+)= a[m x k]^T * b[m x n]
template <class T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace kernel

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b, OpCounter* counter = nullptr) {
  if (a.cols() != b.rows()) fail_input("matmul: dimension mismatch " + a.shape() + " x " + b.shape());
  Mat<T> c(a.rows(), b.cols());
  kernel::gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols(), false);
  if (counter) counter->add_multiply_adds(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
  return c;
}

template <class T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// In-place row softmax over a raw buffer. -inf entries are masked out.
template <class T>
void softmax_row_inplace(std::span<T> row) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T x : row) mx = std::max(mx, x);
  if (mx == -std::numeric_limits<T>::infinity()) fail_input("softmax_rows: row has every entry masked");
  T sum = T(0);
  for (T& x : row) {
    x = std::exp(x - mx);
    sum += x;
  }
  const T inv = T(1) / sum;
  for (T& x : row) x *= inv;
}

template <class T>
Mat<T> softmax_rows(const Mat<T>& m) {
  Mat<T> out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (T x : m.row(r))
      if (std::isnan(x) || x == std::numeric_limits<T>::infinity())
        fail_input("softmax_rows: non-finite input in row " + std::to_string(r));
    softmax_row_inplace(out.row(r));
  }
  return out;
}

inline constexpr double kRmsEps = 1e-6;

// y = x / sqrt(mean(x^2) + eps) * gain, per row; gain is 1 x cols.
template <class T>
Mat<T> rms_norm(const Mat<T>& x, const Mat<T>& gain) {
  if (gain.rows() != 1 || gain.cols() != x.cols())
    fail_input("rms_norm: gain shape " + gain.shape() + " does not match input " + x.shape());
  Mat<T> y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T ss = T(0);
    for (T v : x.row(r)) ss += v * v;
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(x.cols()) + static_cast<T>(kRmsEps));
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) * inv * gain(0, c);
  }
  return y;
}

template <class T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <class T>
Mat<T> silu(const Mat<T>& x) {
  Mat<T> y = x;
  for (T& v : y.flat()) v = silu(v);
  return y;
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
Mat<T> gelu(const Mat<T>& x) {
  Mat<T> y = x;
  for (T& v : y.flat()) v = gelu(v);
  return y;
}

template <class T>
T max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff: shape mismatch " + a.shape() + " vs " + b.shape());
  T m = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace vxl
