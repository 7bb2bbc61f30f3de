#pragma once

// Adaptive dilated point grouping: search k*d_max candidates, learn one
// dilation factor per point from the candidate metrics, then keep every d-th
// candidate.

#include <algorithm>
#include <cmath>
#include <string>

#include "drnet/geometry.hpp"
#include "drnet/numerics.hpp"

namespace drnet {

struct DilationHeadOptions {
  // ReLU between the two projections. Off: the head is linear -> linear -> sigmoid.
  bool hidden_relu = false;
  // Divide each metrics row by its maximum before the head.
  bool normalize_rows = false;
};

/// Two-layer projection of the k*d_max candidate metrics to one logit per
/// point: (K/2 x K) then (1 x K/2).
template <typename T>
class DilationHead {
 public:
  DilationHead(ParamStore<T>& store, const std::string& prefix, std::size_t k,
               std::size_t d_max, Rng& rng, DilationHeadOptions options = {})
      : width_(k * d_max), options_(options) {
    if (width_ % 2 != 0)
      fail_usage("dilation head needs an even k*d_max, got " + std::to_string(width_));
    const std::size_t hidden = width_ / 2;
    w1_ = &store.add(prefix + ".w1", {hidden, width_});
    b1_ = &store.add(prefix + ".b1", {hidden});
    w2_ = &store.add(prefix + ".w2", {1, hidden});
    b2_ = &store.add(prefix + ".b2", {1});
    init_glorot(w1_->value, width_, hidden, rng);
    init_glorot(w2_->value, hidden, 1, rng);
  }

  std::size_t width() const { return width_; }
  const DilationHeadOptions& options() const { return options_; }

  /// metrics: R x K. Returns the pre-sigmoid logits, shape [R].
  Tensor<T> forward(const Tensor<T>& metrics) {
    if (metrics.cols() != width_)
      fail_usage("dilation head expects " + std::to_string(width_) + " metrics per point, got " +
                 std::to_string(metrics.cols()));
    input_ = metrics;
    if (options_.normalize_rows) {
      for (std::size_t i = 0; i < input_.rows(); ++i) {
        T* r = input_.row(i);
        const T m = *std::max_element(r, r + width_);
        if (m > T(0))
          for (std::size_t j = 0; j < width_; ++j) r[j] /= m;
      }
    }
    const std::size_t rows = input_.rows(), hidden = width_ / 2;
    hidden_ = Tensor<T>({rows, hidden});
    hidden_.matrix().noalias() = input_.matrix() * w1_->value.matrix().transpose();
    for (std::size_t i = 0; i < rows; ++i) {
      T* h = hidden_.row(i);
      for (std::size_t j = 0; j < hidden; ++j) {
        h[j] += b1_->value[j];
        if (options_.hidden_relu && h[j] < T(0)) h[j] = T(0);
      }
    }
    Tensor<T> logits({rows});
    for (std::size_t i = 0; i < rows; ++i) {
      const T* h = hidden_.row(i);
      T s = b2_->value[0];
      for (std::size_t j = 0; j < hidden; ++j) s += w2_->value[j] * h[j];
      logits[i] = s;
    }
    return logits;
  }

  /// Accumulates parameter gradients from d(loss)/d(logits). The metrics are
  /// outputs of a discrete search and receive no gradient.
  void backward(const Tensor<T>& d_logits) {
    const std::size_t rows = hidden_.rows(), hidden = width_ / 2;
    Tensor<T> d_hidden({rows, hidden});
    for (std::size_t i = 0; i < rows; ++i) {
      const T g = d_logits[i];
      const T* h = hidden_.row(i);
      T* dh = d_hidden.row(i);
      b2_->grad[0] += g;
      for (std::size_t j = 0; j < hidden; ++j) {
        w2_->grad[j] += g * h[j];
        dh[j] = g * w2_->value[j];
        if (options_.hidden_relu && h[j] <= T(0)) dh[j] = T(0);
        b1_->grad[j] += dh[j];
      }
    }
    w1_->grad.matrix().noalias() += d_hidden.matrix().transpose() * input_.matrix();
  }

 private:
  std::size_t width_;
  DilationHeadOptions options_;
  Param<T>* w1_;
  Param<T>* b1_;
  Param<T>* w2_;
  Param<T>* b2_;
  Tensor<T> input_;
  Tensor<T> hidden_;
};

/// Learned dilation per point: integer factors and the continuous gate
/// 5 * sigmoid(h) + 0.5 they were rounded from.
template <typename T>
struct DilationVector {
  IndexTensor factors;
  Tensor<T> gate;

  std::size_t size() const { return factors.size(); }
};

/// Half-away-from-zero rounding clamped into [1, d_max].
template <typename T>
Index dilation_from_gate(T gate, std::size_t d_max) {
  const auto r = static_cast<long>(std::round(gate));
  return Index(std::clamp<long>(r, 1, long(d_max)));
}

template <typename T>
DilationVector<T> dilation_from_logits(const Tensor<T>& logits, std::size_t d_max) {
  DilationVector<T> out{IndexTensor({logits.size()}), Tensor<T>({logits.size()})};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.gate[i] = T(5) * logistic(logits[i]) + T(0.5);
    out.factors[i] = dilation_from_gate(out.gate[i], d_max);
  }
  return out;
}

template <typename T>
DilationVector<T> learn_dilation(const Tensor<T>& metrics, DilationHead<T>& head,
                                 std::size_t d_max) {
  return dilation_from_logits(head.forward(metrics), d_max);
}

/// Row i keeps candidate positions 0, d_i, 2 d_i, ..., (k - 1) d_i.
template <typename T>
IndexTensor dilated_select(const IndexTensor& candidates, const DilationVector<T>& dilation,
                           std::size_t k) {
  const std::size_t n = candidates.rows(), width = candidates.cols();
  if (dilation.size() != n) fail_usage("dilated_select: dilation/candidate row mismatch");
  IndexTensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = std::size_t(dilation.factors[i]);
    if (d == 0 || (k - 1) * d >= width)
      fail_usage("dilated_select: " + std::to_string(width) + " candidates cannot hold " +
                 std::to_string(k) + " neighbors at dilation " + std::to_string(d));
    for (std::size_t j = 0; j < k; ++j) out(i, j) = candidates(i, j * d);
  }
  return out;
}

template <typename T>
IndexTensor dilated_select(const CandidateSet<T>& candidates, const DilationVector<T>& dilation,
                           std::size_t k) {
  return dilated_select(candidates.indices, dilation, k);
}

/// Uniform dilation for every point; the gate holds the same constant.
template <typename T>
DilationVector<T> uniform_dilation(std::size_t n, Index d) {
  return {IndexTensor({n}, d), Tensor<T>({n}, T(d))};
}

template <typename T>
struct Grouping {
  IndexTensor neighbors;  // N x k
  DilationVector<T> dilation;
  CandidateSet<T> candidates;
};

template <typename T>
Grouping<T> adpg(const Tensor<T>& p, std::size_t k, std::size_t d_max, DilationHead<T>& head) {
  auto candidates = candidate_search(p, k, d_max);
  auto dilation = learn_dilation(candidates.metrics, head, d_max);
  auto neighbors = dilated_select(candidates, dilation, k);
  return {std::move(neighbors), std::move(dilation), std::move(candidates)};
}

}  // namespace drnet
