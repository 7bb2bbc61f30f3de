#pragma once

// Dense tensor substrate, parameter storage, the random stream and the
// finite-difference gradient oracle shared by every layer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "drnet/error.hpp"

namespace drnet {

using Index = std::int32_t;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Row-major dense tensor. Rank-2 and higher tensors can be viewed as a matrix
/// whose column count is the trailing extent.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size())
      fail_usage("tensor data length " + std::to_string(data_.size()) +
                 " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }

  /// Leading extents collapsed; cols() is the trailing extent.
  std::size_t rows() const noexcept {
    if (shape_.empty()) return 1;
    return shape_.size() == 1 ? shape_[0] : data_.size() / shape_.back();
  }
  std::size_t cols() const noexcept {
    return shape_.size() <= 1 ? 1 : shape_.back();
  }

  T* row(std::size_t r) noexcept { return data_.data() + r * cols(); }
  const T* row(std::size_t r) const noexcept { return data_.data() + r * cols(); }

  MatrixMap<T> matrix() {
    return MatrixMap<T>(data_.data(), Eigen::Index(rows()), Eigen::Index(cols()));
  }
  ConstMatrixMap<T> matrix() const {
    return ConstMatrixMap<T>(data_.data(), Eigen::Index(rows()), Eigen::Index(cols()));
  }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size())
      fail_usage("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
  }

  Tensor reshaped(Shape shape) const {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(),
                         [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) fail_usage("tensor shape " + shape_string(shape_) + " has a zero extent");
  }

  Shape shape_;
  std::vector<T> data_;
};

using IndexTensor = Tensor<Index>;

/// Copy of rows [begin, begin + count) of a matrix-viewed tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  const std::size_t c = t.cols();
  std::vector<T> out(t.data() + begin * c, t.data() + (begin + count) * c);
  return Tensor<T>({count, c}, std::move(out));
}

/// Rows of `t` picked by `idx`, in order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const Index> idx) {
  const std::size_t c = t.cols();
  Tensor<T> out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.row(std::size_t(idx[i])), c, out.row(i));
  return out;
}

/// Adjoint of gather_rows: accumulates rows of `g` into `dst` at `idx`.
template <typename T>
void scatter_add_rows(Tensor<T>& dst, const Tensor<T>& g, std::span<const Index> idx) {
  const std::size_t c = dst.cols();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    T* d = dst.row(std::size_t(idx[i]));
    const T* s = g.row(i);
    for (std::size_t j = 0; j < c; ++j) d[j] += s[j];
  }
}

/// Channel-wise concatenation of matrices with equal row counts.
template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>* const> parts) {
  const std::size_t r = parts.front()->rows();
  std::size_t total = 0;
  for (const auto* p : parts) {
    if (p->rows() != r) fail_usage("concat_cols: row count mismatch");
    total += p->cols();
  }
  Tensor<T> out({r, total});
  for (std::size_t i = 0; i < r; ++i) {
    T* dst = out.row(i);
    for (const auto* p : parts) dst = std::copy_n(p->row(i), p->cols(), dst);
  }
  return out;
}

/// Splits `t` column-wise into blocks of the given widths.
template <typename T>
std::vector<Tensor<T>> split_cols(const Tensor<T>& t, std::span<const std::size_t> widths) {
  std::vector<Tensor<T>> out;
  std::size_t offset = 0;
  for (std::size_t w : widths) {
    Tensor<T> part({t.rows(), w});
    for (std::size_t i = 0; i < t.rows(); ++i)
      std::copy_n(t.row(i) + offset, w, part.row(i));
    out.push_back(std::move(part));
    offset += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random stream
//
// All randomness is drawn from std::mt19937_64, whose output sequence is fixed
// by the C++ standard. Reals are produced from the top 53 bits of each draw,
// u = (x >> 11) * 2^-53, so streams are identical on every conforming
// platform. std::*_distribution is deliberately avoided: its algorithms are
// implementation-defined.
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer; used to derive independent sub-stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                    std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ b);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double unit() { return double(engine_() >> 11) * 0x1.0p-53; }

  template <typename T = double>
  T uniform(T lo, T hi) {
    T v = T(double(lo) + (double(hi) - double(lo)) * unit());
    // Narrowing to float can round up onto hi.
    if (v >= hi) v = std::nextafter(hi, lo);
    return v;
  }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) { return std::size_t(unit() * double(n)) % n; }

  /// Standard normal via Box-Muller on the portable uniform stream.
  double normal() {
    double u1 = unit();
    while (u1 <= 0.0) u1 = unit();
    const double u2 = unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = std::size_t(last - first);
    for (std::size_t i = n; i > 1; --i) std::iter_swap(first + (i - 1), first + below(i));
  }

 private:
  std::mt19937_64 engine_;
};

template <typename T = float>
Tensor<T> rng_uniform(std::uint64_t seed, T lo, T hi, Shape shape) {
  if (!(lo < hi)) fail_usage("rng_uniform requires lo < hi");
  Tensor<T> out(std::move(shape));
  Rng rng(seed);
  for (auto& v : out.values()) v = rng.uniform<T>(lo, hi);
  return out;
}

/// Symmetric uniform init in +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
void init_glorot(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
  for (auto& v : w.values()) v = T(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  // Buffers (BN running statistics) are stored and checkpointed but never
  // touched by an optimizer.
  bool trainable = true;
};

/// Named value/gradient pairs in insertion order. Entry addresses are stable,
/// so layers keep plain pointers into the store.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Param<T>& add(const std::string& name, Shape shape, bool trainable = true) {
    if (index_.count(name)) fail_usage("duplicate parameter name '" + name + "'");
    Tensor<T> value(shape);
    Tensor<T> grad(std::move(shape));
    entries_.push_back(Param<T>{name, std::move(value), std::move(grad), trainable});
    index_[name] = entries_.size() - 1;
    return entries_.back();
  }

  Param<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }
  const Param<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }
  Param<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    fail_usage("unknown parameter '" + name + "'");
  }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& p : entries_) p.grad.fill(T{});
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_)
      if (p.trainable) n += p.value.size();
    return n;
  }

 private:
  std::deque<Param<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Oracles and sorting
// ---------------------------------------------------------------------------

/// Central differences of a scalar function, one coordinate at a time.
template <typename T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& f,
                                     const Tensor<T>& x, T eps = T(1e-5)) {
  if (!(eps > T(0))) fail_usage("finite_difference_gradient requires eps > 0");
  Tensor<T> probe = x;
  Tensor<T> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + eps;
    const T plus = f(probe);
    probe[i] = saved - eps;
    const T minus = f(probe);
    probe[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus))
      fail_numerical("non-finite function value during finite differences at element " +
                     std::to_string(i));
    grad[i] = (plus - minus) / (T(2) * eps);
  }
  return grad;
}

/// Per-row stable ascending argsort of a square (or any rank-2) matrix.
template <typename T>
IndexTensor argsort_rows_ascending(const Tensor<T>& m) {
  const std::size_t r = m.rows(), c = m.cols();
  IndexTensor out({r, c});
  std::vector<Index> order(c);
  for (std::size_t i = 0; i < r; ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    const T* row = m.row(i);
    std::stable_sort(order.begin(), order.end(),
                     [row](Index a, Index b) { return row[a] < row[b]; });
    std::copy(order.begin(), order.end(), out.row(i));
  }
  return out;
}

template <typename T>
T logistic(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace drnet
