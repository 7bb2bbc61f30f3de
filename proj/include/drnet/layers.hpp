#pragma once

// Building blocks with hand-written backward passes. Every layer caches what
// its backward needs during forward, so a layer instance serves one training
// context at a time.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "drnet/grouping.hpp"
#include "drnet/numerics.hpp"

namespace drnet {

enum class Activation { none, relu, leaky_relu, sigmoid };

inline constexpr double kLeakySlope = 0.2;

template <typename T>
T activate(Activation a, T x) {
  switch (a) {
    case Activation::relu: return x > T(0) ? x : T(0);
    case Activation::leaky_relu: return x > T(0) ? x : T(kLeakySlope) * x;
    case Activation::sigmoid: return logistic(x);
    case Activation::none: break;
  }
  return x;
}

// Derivative expressed through the activation's output y.
template <typename T>
T activate_grad(Activation a, T y) {
  switch (a) {
    case Activation::relu: return y > T(0) ? T(1) : T(0);
    case Activation::leaky_relu: return y > T(0) ? T(1) : T(kLeakySlope);
    case Activation::sigmoid: return y * (T(1) - y);
    case Activation::none: break;
  }
  return T(1);
}

/// Per-channel normalization over all rows of a matrix-viewed tensor.
template <typename T>
class BatchNorm {
 public:
  static constexpr T kMomentum = T(0.1);
  static constexpr T kEps = T(1e-5);

  BatchNorm(ParamStore<T>& store, const std::string& prefix, std::size_t channels)
      : channels_(channels) {
    gamma_ = &store.add(prefix + ".gamma", {channels});
    beta_ = &store.add(prefix + ".beta", {channels});
    mean_ = &store.add(prefix + ".running_mean", {channels}, false);
    var_ = &store.add(prefix + ".running_var", {channels}, false);
    gamma_->value.fill(T(1));
    var_->value.fill(T(1));
  }

  std::size_t channels() const { return channels_; }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    const std::size_t rows = x.rows(), c = channels_;
    if (x.cols() != c) fail_usage("batch norm channel mismatch");
    training_ = training;
    normalized_ = Tensor<T>({rows, c});
    inv_std_.assign(c, T(0));
    Tensor<T> y({rows, c});
    if (training) {
      std::vector<T> mean(c, T(0)), var(c, T(0));
      for (std::size_t i = 0; i < rows; ++i) {
        const T* r = x.row(i);
        for (std::size_t j = 0; j < c; ++j) mean[j] += r[j];
      }
      for (auto& m : mean) m /= T(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        const T* r = x.row(i);
        for (std::size_t j = 0; j < c; ++j) {
          const T d = r[j] - mean[j];
          var[j] += d * d;
        }
      }
      for (std::size_t j = 0; j < c; ++j) {
        const T biased = var[j] / T(rows);
        const T unbiased = rows > 1 ? var[j] / T(rows - 1) : biased;
        inv_std_[j] = T(1) / std::sqrt(biased + kEps);
        mean_->value[j] = (T(1) - kMomentum) * mean_->value[j] + kMomentum * mean[j];
        var_->value[j] = (T(1) - kMomentum) * var_->value[j] + kMomentum * unbiased;
      }
      for (std::size_t i = 0; i < rows; ++i) {
        const T* r = x.row(i);
        T* n = normalized_.row(i);
        T* o = y.row(i);
        for (std::size_t j = 0; j < c; ++j) {
          n[j] = (r[j] - mean[j]) * inv_std_[j];
          o[j] = gamma_->value[j] * n[j] + beta_->value[j];
        }
      }
    } else {
      for (std::size_t j = 0; j < c; ++j) inv_std_[j] = T(1) / std::sqrt(var_->value[j] + kEps);
      for (std::size_t i = 0; i < rows; ++i) {
        const T* r = x.row(i);
        T* n = normalized_.row(i);
        T* o = y.row(i);
        for (std::size_t j = 0; j < c; ++j) {
          n[j] = (r[j] - mean_->value[j]) * inv_std_[j];
          o[j] = gamma_->value[j] * n[j] + beta_->value[j];
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t rows = dy.rows(), c = channels_;
    Tensor<T> dx({rows, c});
    std::vector<T> sum_dn(c, T(0)), sum_dn_n(c, T(0));
    for (std::size_t i = 0; i < rows; ++i) {
      const T* g = dy.row(i);
      const T* n = normalized_.row(i);
      for (std::size_t j = 0; j < c; ++j) {
        gamma_->grad[j] += g[j] * n[j];
        beta_->grad[j] += g[j];
        const T dn = g[j] * gamma_->value[j];
        sum_dn[j] += dn;
        sum_dn_n[j] += dn * n[j];
      }
    }
    for (std::size_t i = 0; i < rows; ++i) {
      const T* g = dy.row(i);
      const T* n = normalized_.row(i);
      T* o = dx.row(i);
      for (std::size_t j = 0; j < c; ++j) {
        const T dn = g[j] * gamma_->value[j];
        o[j] = training_ ? inv_std_[j] * (dn - (sum_dn[j] + n[j] * sum_dn_n[j]) / T(rows))
                         : inv_std_[j] * dn;
      }
    }
    return dx;
  }

 private:
  std::size_t channels_;
  Param<T>* gamma_;
  Param<T>* beta_;
  Param<T>* mean_;
  Param<T>* var_;
  bool training_ = true;
  Tensor<T> normalized_;
  std::vector<T> inv_std_;
};

struct MlpSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool batch_norm = true;
  Activation activation = Activation::leaky_relu;
};

/// Shared per-row linear map (a 1x1 convolution), optional batch norm and an
/// activation.
template <typename T>
class MlpLayer {
 public:
  MlpLayer(ParamStore<T>& store, const std::string& prefix, MlpSpec spec, Rng& rng)
      : spec_(spec) {
    weight_ = &store.add(prefix + ".weight", {spec.out, spec.in});
    bias_ = &store.add(prefix + ".bias", {spec.out});
    init_glorot(weight_->value, spec.in, spec.out, rng);
    if (spec.batch_norm) bn_.emplace(store, prefix + ".bn", spec.out);
  }

  const MlpSpec& spec() const { return spec_; }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    if (x.cols() != spec_.in)
      fail_usage("mlp expects " + std::to_string(spec_.in) + " input channels, got " +
                 std::to_string(x.cols()));
    input_ = x.reshaped({x.rows(), x.cols()});
    Tensor<T> z({x.rows(), spec_.out});
    auto zm = z.matrix();
    zm.noalias() = input_.matrix() * weight_->value.matrix().transpose();
    zm.rowwise() += bias_row();
    if (bn_) z = bn_->forward(z, training);
    for (auto& v : z.values()) v = activate(spec_.activation, v);
    output_ = z;
    return z;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dz({dy.rows(), spec_.out});
    for (std::size_t i = 0; i < dz.size(); ++i)
      dz[i] = dy[i] * activate_grad(spec_.activation, output_[i]);
    if (bn_) dz = bn_->backward(dz);
    weight_->grad.matrix().noalias() += dz.matrix().transpose() * input_.matrix();
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      const T* g = dz.row(i);
      for (std::size_t j = 0; j < spec_.out; ++j) bias_->grad[j] += g[j];
    }
    Tensor<T> dx({dy.rows(), spec_.in});
    dx.matrix().noalias() = dz.matrix() * weight_->value.matrix();
    return dx;
  }

 private:
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias_row() const {
    return {bias_->value.data(), Eigen::Index(spec_.out)};
  }

  MlpSpec spec_;
  Param<T>* weight_;
  Param<T>* bias_;
  std::optional<BatchNorm<T>> bn_;
  Tensor<T> input_;
  Tensor<T> output_;
};

/// Inverted dropout. The mask is drawn from the caller's stream.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double rate) : rate_(rate) {}

  Tensor<T> forward(const Tensor<T>& x, bool training, Rng* rng) {
    active_ = training && rate_ > 0.0 && rng != nullptr;
    if (!active_) return x;
    mask_ = Tensor<T>(x.shape());
    const T keep = T(1.0 / (1.0 - rate_));
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.size(); ++i) {
      mask_[i] = rng->unit() < rate_ ? T(0) : keep;
      y[i] *= mask_[i];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    if (!active_) return dy;
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask_[i];
    return dx;
  }

 private:
  double rate_;
  bool active_ = false;
  Tensor<T> mask_;
};

// ---------------------------------------------------------------------------
// Local graph operations
// ---------------------------------------------------------------------------

/// Edge features (p_i, p_j - p_i) for every neighbor j of i. `neighbors` holds
/// row indices into `p`. Output shape N x k x 2c.
template <typename T>
Tensor<T> graph_encode(const Tensor<T>& p, const IndexTensor& neighbors) {
  const std::size_t n = neighbors.rows(), k = neighbors.cols(), c = p.cols();
  if (n != p.rows()) fail_usage("graph_encode: neighbor rows do not match points");
  Tensor<T> g({n, k, 2 * c});
  for (std::size_t i = 0; i < n; ++i) {
    const T* center = p.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      const Index nb = neighbors(i, j);
      if (nb < 0 || std::size_t(nb) >= p.rows())
        fail_usage("graph_encode: neighbor index " + std::to_string(nb) + " out of range");
      const T* other = p.row(std::size_t(nb));
      T* e = g.data() + (i * k + j) * 2 * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        e[ch] = center[ch];
        e[c + ch] = other[ch] - center[ch];
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> graph_encode_backward(const Tensor<T>& d_graph, const IndexTensor& neighbors,
                                std::size_t channels) {
  const std::size_t n = neighbors.rows(), k = neighbors.cols(), c = channels;
  Tensor<T> dp({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    T* di = dp.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      const T* e = d_graph.data() + (i * k + j) * 2 * c;
      T* dj = dp.row(std::size_t(neighbors(i, j)));
      for (std::size_t ch = 0; ch < c; ++ch) {
        di[ch] += e[ch] - e[c + ch];
        dj[ch] += e[c + ch];
      }
    }
  }
  return dp;
}

template <typename T>
struct PooledNeighbors {
  Tensor<T> values;   // N x c
  IndexTensor argmax; // N x c, neighbor slot that won
};

/// Channel-wise max over the neighbor axis of an N x k x c tensor. Ties go
/// to the lowest neighbor slot.
template <typename T>
PooledNeighbors<T> max_pool_neighbors(const Tensor<T>& g) {
  if (g.rank() != 3) fail_usage("max_pool_neighbors expects an N x k x c tensor");
  const std::size_t n = g.dim(0), k = g.dim(1), c = g.dim(2);
  PooledNeighbors<T> out{Tensor<T>({n, c}), IndexTensor({n, c})};
  for (std::size_t i = 0; i < n; ++i) {
    const T* base = g.data() + i * k * c;
    T* v = out.values.row(i);
    Index* a = out.argmax.row(i);
    std::copy_n(base, c, v);
    for (std::size_t j = 1; j < k; ++j) {
      const T* r = base + j * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        if (r[ch] > v[ch]) {
          v[ch] = r[ch];
          a[ch] = Index(j);
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> max_pool_neighbors_backward(const Tensor<T>& d_pooled, const IndexTensor& argmax,
                                      std::size_t k) {
  const std::size_t n = d_pooled.rows(), c = d_pooled.cols();
  Tensor<T> dg({n, k, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      dg[(i * k + std::size_t(argmax(i, ch))) * c + ch] += d_pooled(i, ch);
  return dg;
}

/// Shared 1-by-k convolution over each local graph (flattened to k*c'
/// inputs), then batch norm and ReLU. Restores the module's input width.
template <typename T>
class BackProjection {
 public:
  BackProjection(ParamStore<T>& store, const std::string& prefix, std::size_t k,
                 std::size_t graph_channels, std::size_t out_channels, Rng& rng,
                 bool batch_norm = true)
      : k_(k),
        graph_channels_(graph_channels),
        mlp_(store, prefix,
             MlpSpec{k * graph_channels, out_channels, batch_norm, Activation::relu}, rng) {}

  std::size_t out_channels() const { return mlp_.spec().out; }

  Tensor<T> forward(const Tensor<T>& graph, bool training) {
    if (graph.rank() != 3 || graph.dim(1) != k_ || graph.dim(2) != graph_channels_)
      fail_usage("back projection expects an N x " + std::to_string(k_) + " x " +
                 std::to_string(graph_channels_) + " graph");
    return mlp_.forward(graph.reshaped({graph.dim(0), k_ * graph_channels_}), training);
  }

  Tensor<T> backward(const Tensor<T>& d_out) {
    Tensor<T> dg = mlp_.backward(d_out);
    dg.reshape({dg.rows(), k_, graph_channels_});
    return dg;
  }

 private:
  std::size_t k_;
  std::size_t graph_channels_;
  MlpLayer<T> mlp_;
};

/// Mean over points of the per-point Euclidean norm of f_B - p.
template <typename T>
T error_loss(const Tensor<T>& back_projected, const Tensor<T>& p) {
  if (back_projected.shape() != p.shape() && back_projected.size() != p.size())
    fail_usage("error_loss: shape mismatch");
  const std::size_t n = p.rows(), c = p.cols();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = back_projected.row(i);
    const T* b = p.row(i);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    total += std::sqrt(s);
  }
  return total / T(n);
}

/// Gradient of error_loss scaled by `upstream`; returns d/d(f_B). The gradient
/// with respect to p is its negation.
template <typename T>
Tensor<T> error_loss_backward(const Tensor<T>& back_projected, const Tensor<T>& p, T upstream) {
  const std::size_t n = p.rows(), c = p.cols();
  Tensor<T> d({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = back_projected.row(i);
    const T* b = p.row(i);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    const T norm = std::sqrt(s);
    if (norm == T(0)) continue;
    const T scale = upstream / (T(n) * norm);
    T* o = d.row(i);
    for (std::size_t j = 0; j < c; ++j) o[j] = scale * (a[j] - b[j]);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Error-minimizing module
// ---------------------------------------------------------------------------

struct EmConfig {
  std::size_t c_in = 3;
  std::size_t c_out = 64;
  std::size_t k = 20;
  std::size_t d_max = 5;
  std::size_t graph_depth = 1;
  Activation graph_activation = Activation::leaky_relu;
  // Multiply pooled features by 1 + (gate - stopgrad(gate)) so the dilation
  // head receives gradient through the discrete selection.
  bool dilation_surrogate = true;
  DilationHeadOptions head;
};

template <typename T>
struct EmOutput {
  Tensor<T> features;       // R x c_out
  T error_loss = 0;
  DilationVector<T> dilation;
  IndexTensor neighbors;    // R x k, row indices into the batch
};

/// ADPG grouping, local graph encoding, max pooling and the back-projection
/// error loss, over a batch of `clouds` clouds with `points` rows each.
template <typename T>
class EmModule {
 public:
  EmModule(ParamStore<T>& store, const std::string& prefix, EmConfig config, Rng& rng)
      : config_(config),
        head_(store, prefix + ".dilation", config.k, config.d_max, rng, config.head),
        back_projection_(store, prefix + ".back_projection", config.k, config.c_out, config.c_in,
                         rng) {
    for (std::size_t i = 0; i < std::max<std::size_t>(1, config.graph_depth); ++i) {
      const std::size_t in = i == 0 ? 2 * config.c_in : config.c_out;
      graph_mlps_.emplace_back(store, prefix + ".graph" + std::to_string(i),
                               MlpSpec{in, config.c_out, true, config.graph_activation}, rng);
    }
  }

  const EmConfig& config() const { return config_; }
  DilationHead<T>& head() { return head_; }

  EmOutput<T> forward(const Tensor<T>& p, std::size_t clouds, std::size_t points,
                      bool training) {
    const std::size_t rows = clouds * points, k = config_.k, width = k * config_.d_max;
    if (p.rows() != rows || p.cols() != config_.c_in)
      fail_usage("error-minimizing module input shape mismatch");
    input_ = p.reshaped({rows, config_.c_in});

    Tensor<T> metrics({rows, width});
    IndexTensor candidates({rows, width});
    for (std::size_t b = 0; b < clouds; ++b) {
      const auto found = candidate_search(slice_rows(input_, b * points, points), k, config_.d_max);
      std::copy(found.metrics.values().begin(), found.metrics.values().end(),
                metrics.row(b * points));
      Index* dst = candidates.row(b * points);
      for (Index idx : found.indices.values()) *dst++ = idx + Index(b * points);
    }

    EmOutput<T> out;
    out.dilation = dilation_from_logits(head_.forward(metrics), config_.d_max);
    out.neighbors = dilated_select(candidates, out.dilation, k);

    Tensor<T> x = graph_encode(input_, out.neighbors);
    x.reshape({rows * k, x.cols()});
    for (std::size_t i = 0; i < graph_mlps_.size(); ++i) {
      x = graph_mlps_[i].forward(x, training);
      if (i == 0) first_graph_ = x.reshaped({rows, k, config_.c_out});
    }
    x.reshape({rows, k, config_.c_out});
    pooled_ = max_pool_neighbors(x);

    back_projected_ = back_projection_.forward(first_graph_, training);
    out.error_loss = error_loss(back_projected_, input_);
    gate_ = out.dilation.gate;
    // Surrogate factor is exactly 1 in the forward direction.
    out.features = pooled_.values;
    neighbors_ = out.neighbors;
    return out;
  }

  /// Returns d(loss)/d(input) given the gradient at the pooled features and
  /// the weight applied to this module's error loss.
  Tensor<T> backward(const Tensor<T>& d_features, T d_error_loss) {
    const std::size_t rows = input_.rows(), k = config_.k;
    if (config_.dilation_surrogate) {
      Tensor<T> d_logits({rows});
      for (std::size_t i = 0; i < rows; ++i) {
        const T* g = d_features.row(i);
        const T* f = pooled_.values.row(i);
        T d_gate = 0;
        for (std::size_t ch = 0; ch < config_.c_out; ++ch) d_gate += g[ch] * f[ch];
        const T s = (gate_[i] - T(0.5)) / T(5);
        d_logits[i] = d_gate * T(5) * s * (T(1) - s);
      }
      head_.backward(d_logits);
    }

    Tensor<T> dx = max_pool_neighbors_backward(d_features, pooled_.argmax, k);
    dx.reshape({rows * k, config_.c_out});
    for (std::size_t i = graph_mlps_.size(); i-- > 0;) {
      if (i == 0) {
        const Tensor<T> d_fb = error_loss_backward(back_projected_, input_, d_error_loss);
        Tensor<T> d_graph = back_projection_.backward(d_fb);
        for (std::size_t j = 0; j < dx.size(); ++j) dx[j] += d_graph[j];
        Tensor<T> d_edges = graph_mlps_[0].backward(dx);
        Tensor<T> dp = graph_encode_backward(d_edges, neighbors_, config_.c_in);
        for (std::size_t j = 0; j < dp.size(); ++j) dp[j] -= d_fb[j];
        return dp;
      }
      dx = graph_mlps_[i].backward(dx);
    }
    return dx;  // unreachable: there is always a first graph MLP
  }

 private:
  EmConfig config_;
  DilationHead<T> head_;
  std::vector<MlpLayer<T>> graph_mlps_;
  BackProjection<T> back_projection_;

  Tensor<T> input_;
  Tensor<T> first_graph_;
  Tensor<T> back_projected_;
  Tensor<T> gate_;
  PooledNeighbors<T> pooled_;
  IndexTensor neighbors_;
};

}  // namespace drnet
