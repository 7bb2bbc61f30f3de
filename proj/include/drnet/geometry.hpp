#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "drnet/numerics.hpp"

namespace drnet {

/// Squared Euclidean distances via the Gram identity
/// E = diag(PP^T) 1 + 1^T diag(PP^T)^T - 2 PP^T, clamped at zero.
///
/// Every entry is formed from the same per-pair dot product, so the result is
/// exactly symmetric and independent of row order.
template <typename T>
Tensor<T> pairwise_sq_distances(const Tensor<T>& p) {
  const std::size_t n = p.rows(), c = p.cols();
  if (p.empty() || c == 0) fail_usage("pairwise_sq_distances: empty feature map");
  std::vector<T> sq(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = p.row(i);
    T s = 0;
    for (std::size_t k = 0; k < c; ++k) s += a[k] * a[k];
    sq[i] = s;
  }
  Tensor<T> e({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = p.row(i);
    e(i, i) = T(0);
    for (std::size_t j = i + 1; j < n; ++j) {
      const T* b = p.row(j);
      T dot = 0;
      for (std::size_t k = 0; k < c; ++k) dot += a[k] * b[k];
      const T v = std::max(T(0), sq[i] + sq[j] - T(2) * dot);
      e(i, j) = v;
      e(j, i) = v;
    }
  }
  return e;
}

/// Metrics (squared distances, ascending) and indices of the k*d_max nearest
/// candidates of every point. Self sits at column 0.
template <typename T>
struct CandidateSet {
  Tensor<T> metrics;
  IndexTensor indices;

  std::size_t width() const { return indices.cols(); }
};

namespace detail {

// First `width` entries of the stable ascending sort of each row of `e`.
template <typename T>
CandidateSet<T> smallest_per_row(const Tensor<T>& e, std::size_t width) {
  const std::size_t n = e.rows(), m = e.cols();
  CandidateSet<T> out{Tensor<T>({n, width}), IndexTensor({n, width})};
  std::vector<Index> order(m);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = e.row(i);
    std::iota(order.begin(), order.end(), Index{0});
    // (value, index) ordering reproduces a stable sort on the prefix.
    auto less = [row](Index a, Index b) {
      return row[a] < row[b] || (row[a] == row[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(width), order.end(), less);
    for (std::size_t j = 0; j < width; ++j) {
      out.indices(i, j) = order[j];
      out.metrics(i, j) = row[order[j]];
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
CandidateSet<T> candidate_search(const Tensor<T>& p, std::size_t k, std::size_t d_max) {
  const std::size_t n = p.rows();
  if (k == 0 || d_max == 0) fail_usage("candidate_search: k and d_max must be positive");
  if (k * d_max > n)
    fail_usage("candidate_search: cloud of " + std::to_string(n) + " points is too small for " +
               std::to_string(k) + "x" + std::to_string(d_max) + " candidates");
  return detail::smallest_per_row(pairwise_sq_distances(p), k * d_max);
}

template <typename T>
IndexTensor knn(const Tensor<T>& p, std::size_t k) {
  if (k == 0 || k > p.rows())
    fail_usage("knn: k=" + std::to_string(k) + " invalid for " + std::to_string(p.rows()) +
               " points");
  return detail::smallest_per_row(pairwise_sq_distances(p), k).indices;
}

/// Greedy max-min subset of `m` points from an N x 3 coordinate matrix.
///
/// The seed is the point farthest from the centroid (ties: lexicographically
/// largest coordinates) so the selection does not depend on input order.
/// Later picks maximize the distance to the picked set, ties to the smaller
/// index.
template <typename T>
IndexTensor farthest_point_sampling(const Tensor<T>& coords, std::size_t m) {
  const std::size_t n = coords.rows();
  if (m == 0 || m > n)
    fail_usage("farthest_point_sampling: cannot pick " + std::to_string(m) + " of " +
               std::to_string(n) + " points");
  const std::size_t c = coords.cols();

  std::vector<double> centroid(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) centroid[k] += double(coords(i, k));
  for (auto& v : centroid) v /= double(n);

  auto sq_to = [&](std::size_t i, auto&& other) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const double d = double(coords(i, k)) - double(other(k));
      s += d * d;
    }
    return s;
  };

  std::size_t seed = 0;
  double best = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = sq_to(i, [&](std::size_t k) { return centroid[k]; });
    bool take = d > best;
    if (d == best) {
      take = std::lexicographical_compare(coords.row(seed), coords.row(seed) + c, coords.row(i),
                                          coords.row(i) + c);
    }
    if (take) {
      best = d;
      seed = i;
    }
  }

  IndexTensor picked({m});
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::size_t current = seed;
  for (std::size_t s = 0; s < m; ++s) {
    picked[s] = Index(current);
    std::size_t next = 0;
    double far = -1;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = sq_to(i, [&](std::size_t k) { return coords(current, k); });
      min_d[i] = std::min(min_d[i], d);
      if (min_d[i] > far) {
        far = min_d[i];
        next = i;
      }
    }
    current = next;
  }
  return picked;
}

/// Interpolation weights lifting M coarse points onto N fine points: each fine
/// point blends its (up to) three nearest coarse points with normalized
/// weights 1 / (d^2 + 1e-8).
template <typename T>
struct Propagation {
  static constexpr T kEps = T(1e-8);
  std::size_t count = 0;                   // neighbors per fine point, min(3, M)
  IndexTensor neighbors;                   // N x count
  Tensor<T> weights;                       // N x count, rows sum to 1
  Tensor<T> raw;                           // N x count, 1 / (d^2 + eps)
};

template <typename T>
Propagation<T> plan_propagation(const Tensor<T>& coarse_coords, const Tensor<T>& fine_coords) {
  const std::size_t m = coarse_coords.rows(), n = fine_coords.rows();
  if (coarse_coords.empty() || m == 0) fail_usage("feature_propagation: no coarse points");
  Propagation<T> plan;
  plan.count = std::min<std::size_t>(3, m);
  plan.neighbors = IndexTensor({n, plan.count});
  plan.weights = Tensor<T>({n, plan.count});
  plan.raw = Tensor<T>({n, plan.count});

  std::vector<std::pair<T, Index>> d(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        const T diff = fine_coords(i, k) - coarse_coords(j, k);
        s += diff * diff;
      }
      d[j] = {s, Index(j)};
    }
    std::partial_sort(d.begin(), d.begin() + std::ptrdiff_t(plan.count), d.end());
    T total = 0;
    for (std::size_t j = 0; j < plan.count; ++j) {
      plan.neighbors(i, j) = d[j].second;
      plan.raw(i, j) = T(1) / (d[j].first + Propagation<T>::kEps);
      total += plan.raw(i, j);
    }
    for (std::size_t j = 0; j < plan.count; ++j) plan.weights(i, j) = plan.raw(i, j) / total;
  }
  return plan;
}

template <typename T>
Tensor<T> propagate(const Propagation<T>& plan, const Tensor<T>& coarse_feats) {
  const std::size_t n = plan.neighbors.rows(), c = coarse_feats.cols();
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    T* dst = out.row(i);
    for (std::size_t j = 0; j < plan.count; ++j) {
      const T w = plan.weights(i, j);
      const T* src = coarse_feats.row(std::size_t(plan.neighbors(i, j)));
      for (std::size_t k = 0; k < c; ++k) dst[k] += w * src[k];
    }
  }
  return out;
}

template <typename T>
Tensor<T> feature_propagation(const Tensor<T>& coarse_coords, const Tensor<T>& fine_coords,
                              const Tensor<T>& coarse_feats) {
  if (coarse_feats.rows() != coarse_coords.rows())
    fail_usage("feature_propagation: coarse coordinate/feature row mismatch");
  return propagate(plan_propagation(coarse_coords, fine_coords), coarse_feats);
}

/// Gradients of propagate() with respect to the coarse features and, when
/// requested, both coordinate sets (through the interpolation weights).
template <typename T>
void propagate_backward(const Propagation<T>& plan, const Tensor<T>& coarse_coords,
                        const Tensor<T>& fine_coords, const Tensor<T>& coarse_feats,
                        const Tensor<T>& out, const Tensor<T>& d_out, Tensor<T>& d_feats,
                        Tensor<T>* d_coarse_coords, Tensor<T>* d_fine_coords) {
  const std::size_t n = plan.neighbors.rows(), c = coarse_feats.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* g = d_out.row(i);
    T total = 0;
    for (std::size_t j = 0; j < plan.count; ++j) total += plan.raw(i, j);
    for (std::size_t j = 0; j < plan.count; ++j) {
      const auto src = std::size_t(plan.neighbors(i, j));
      const T w = plan.weights(i, j);
      T* df = d_feats.row(src);
      for (std::size_t k = 0; k < c; ++k) df[k] += w * g[k];
      if (!d_coarse_coords && !d_fine_coords) continue;
      // out = sum_j r_j f_j / sum r  =>  d out / d r_j = (f_j - out) / sum r,
      // r_j = 1 / (s_j + eps)        =>  d r_j / d s_j = -r_j^2.
      const T* f = coarse_feats.row(src);
      const T* o = out.row(i);
      T dr = 0;
      for (std::size_t k = 0; k < c; ++k) dr += g[k] * (f[k] - o[k]);
      dr /= total;
      const T r = plan.raw(i, j);
      const T ds = -dr * r * r;
      for (std::size_t k = 0; k < 3; ++k) {
        const T diff = fine_coords(i, k) - coarse_coords(src, k);
        if (d_fine_coords) (*d_fine_coords)(i, k) += T(2) * diff * ds;
        if (d_coarse_coords) (*d_coarse_coords)(src, k) -= T(2) * diff * ds;
      }
    }
  }
}

}  // namespace drnet
