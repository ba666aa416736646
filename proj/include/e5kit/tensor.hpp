// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "e5kit/errors.hpp"

namespace e5kit {

// Dense row-major matrix. Training math uses Matrix<double>; persisted
// embeddings use Matrix<float>.
template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  void append_row(std::span<const T> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) throw DimensionError("append_row: width mismatch");
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.storage()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;

// Runs body(i) for i in [0, n). Work is split into contiguous chunks; callers
// only write to per-index outputs so results do not depend on thread count.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  const std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  const std::size_t workers = std::min(hw, n / 64 + 1);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

// Works on any pair of contiguous ranges (spans, vectors) of arithmetic type.
template <class A, class B>
double dot(const A& a, const B& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <class A>
double norm(const A& a) {
  return std::sqrt(dot(a, a));
}

// Fixed left-to-right summation per output entry, so the result is
// bit-identical no matter how rows are scheduled.
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix<T> out(a.rows(), b.cols());
  parallel_for(a.rows(), [&](std::size_t i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * brow[j];
    }
  });
  return out;
}

inline double logsumexp_row(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    s += x;
  }
  for (double& x : v) x /= s;
}

inline MatrixD softmax_rows(const MatrixD& m) {
  MatrixD out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// A list of parameter tensors, each flattened. Gradients and moments use the
// same layout as the parameters they belong to.
using ParamBuffers = std::vector<std::vector<double>>;

inline ParamBuffers zeros_like(const std::vector<std::span<double>>& params) {
  ParamBuffers out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.size(), 0.0);
  return out;
}

struct OptimizerState {
  std::uint64_t step = 0;
  ParamBuffers first_moment;
  ParamBuffers second_moment;
  AdamWConfig config;

  OptimizerState() = default;
  OptimizerState(const std::vector<std::span<double>>& params, AdamWConfig cfg)
      : first_moment(zeros_like(params)), second_moment(zeros_like(params)), config(cfg) {}
};

// One AdamW update. Weight decay is decoupled: params shrink by lr*wd
// directly and the moments only see the raw gradient.
inline void adamw_step(const std::vector<std::span<double>>& params, const ParamBuffers& grads,
                       OptimizerState& state, double lr) {
  if (lr < 0.0) throw RangeError("adamw_step: negative learning rate");
  if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw DimensionError("adamw_step: parameter group count mismatch");
  }
  for (std::size_t g = 0; g < params.size(); ++g) {
    if (grads[g].size() != params[g].size() || state.first_moment[g].size() != params[g].size() ||
        state.second_moment[g].size() != params[g].size()) {
      throw DimensionError("adamw_step: shape mismatch in group " + std::to_string(g));
    }
  }
  state.step += 1;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - lr * c.weight_decay;
  for (std::size_t g = 0; g < params.size(); ++g) {
    double* p = params[g].data();
    const double* gr = grads[g].data();
    double* m = state.first_moment[g].data();
    double* v = state.second_moment[g].data();
    const std::size_t n = params[g].size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gr[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gr[i] * gr[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = p[i] * decay - lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

struct LrSchedule {
  double peak_lr = 1e-3;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;

  void validate() const {
    if (warmup_steps > total_steps) throw ConfigurationError("warmup_steps > total_steps");
    if (peak_lr < 0.0) throw ConfigurationError("peak_lr must be >= 0");
  }
};

// Linear warmup 0 -> peak, then linear decay peak -> 0 at total_steps.
inline double lr_at(const LrSchedule& s, std::uint64_t step) {
  if (step > s.total_steps) {
    throw RangeError("lr_at: step " + std::to_string(step) + " beyond total " +
                     std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (s.total_steps == s.warmup_steps) return step == s.total_steps ? 0.0 : s.peak_lr;
  return s.peak_lr * static_cast<double>(s.total_steps - step) /
         static_cast<double>(s.total_steps - s.warmup_steps);
}

// ---------------------------------------------------------------------------
// Binary matrix format: "E5MX", u32 version, u64 rows, u64 cols, u32 dtype,
// then row-major little-endian values.

inline constexpr char kMatrixMagic[4] = {'E', '5', 'M', 'X'};
inline constexpr std::uint32_t kMatrixVersion = 1;

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::f32;
  } else {
    static_assert(std::is_same_v<T, double>);
    return DType::f64;
  }
}

namespace detail {

template <class U>
void write_le(std::ostream& os, U value) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  static_assert(sizeof(U) == sizeof(Bits));
  Bits bits = std::bit_cast<Bits>(value);
  unsigned char buf[sizeof(Bits)];
  for (std::size_t i = 0; i < sizeof(Bits); ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(buf));
}

template <class U>
U read_le(std::istream& is) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  unsigned char buf[sizeof(Bits)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(buf))) throw IoError("unexpected end of matrix data");
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(Bits); ++i) bits |= static_cast<Bits>(buf[i]) << (8 * i);
  return std::bit_cast<U>(bits);
}

}  // namespace detail

template <class T>
void write_matrix(std::ostream& os, const Matrix<T>& m) {
  os.write(kMatrixMagic, 4);
  detail::write_le<std::uint32_t>(os, kMatrixVersion);
  detail::write_le<std::uint64_t>(os, m.rows());
  detail::write_le<std::uint64_t>(os, m.cols());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(dtype_of<T>()));
  for (T v : m.data()) detail::write_le<T>(os, v);
  if (!os) throw IoError("failed writing matrix");
}

template <class T>
Matrix<T> read_matrix(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMatrixMagic, 4) != 0) {
    throw IoError("bad matrix magic");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kMatrixVersion) throw IoError("unsupported matrix version " + std::to_string(version));
  const auto rows = detail::read_le<std::uint64_t>(is);
  const auto cols = detail::read_le<std::uint64_t>(is);
  const auto tag = detail::read_le<std::uint32_t>(is);
  if (tag != static_cast<std::uint32_t>(dtype_of<T>())) {
    throw IoError("matrix dtype tag " + std::to_string(tag) + " does not match requested type");
  }
  Matrix<T> m(rows, cols);
  for (T& v : m.storage()) v = detail::read_le<T>(is);
  if (!m.all_finite()) throw IoError("matrix contains non-finite values");
  return m;
}

}  // namespace e5kit
