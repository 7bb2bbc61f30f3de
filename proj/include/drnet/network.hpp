#pragma once

// Dense-resolution network: a full-resolution cascade of error-minimizing
// modules, a multi-resolution down/up-sampling branch fed by the first
// module, a gated channel-wise merge and a classification or segmentation
// head.

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "drnet/geometry.hpp"
#include "drnet/layers.hpp"
#include "drnet/numerics.hpp"

namespace drnet {

enum class Task { classification, segmentation };

inline constexpr std::size_t kEmModules = 4;

struct ModelConfig {
  Task task = Task::classification;
  std::size_t k = 8;
  std::size_t d_max = 5;
  std::array<std::size_t, kEmModules> fr_widths{64, 64, 128, 256};
  std::size_t embed = 256;
  std::size_t mr_mid = 128;
  std::size_t mr_low = 256;
  std::size_t mr_out = 0;  // 0: same as embed
  std::size_t k_mr = 20;
  bool mr_knn_coords = false;
  std::size_t num_classes = 4;
  std::size_t num_parts = 5;
  std::size_t num_categories = 2;
  std::vector<std::size_t> cls_hidden{512, 256};
  std::vector<std::size_t> seg_hidden{256, 128};
  double dropout = 0.5;
  std::size_t graph_depth = 1;
  bool dilation_surrogate = true;
  DilationHeadOptions head;

  std::size_t mr_width() const { return mr_out ? mr_out : embed; }
  std::size_t outputs() const {
    return task == Task::classification ? num_classes : num_parts;
  }
};

/// Weights of the four error losses in the total objective.
struct LossWeights {
  std::array<double, kEmModules> er{0.1, 0.01, 0.01, 0.01};

  static LossWeights none() { return LossWeights{{0.0, 0.0, 0.0, 0.0}}; }
};

/// A batch of equally sized clouds stacked row-wise: clouds * points rows.
template <typename T>
struct Batch {
  Tensor<T> coords;
  std::size_t clouds = 0;
  std::size_t points = 0;
  std::vector<Index> labels;      // per cloud (classification)
  std::vector<Index> categories;  // per cloud (segmentation)
  std::vector<Index> part_labels; // per point (segmentation)

  std::size_t rows() const { return clouds * points; }
};

// ---------------------------------------------------------------------------
// Full-resolution branch
// ---------------------------------------------------------------------------

template <typename T>
struct FrOutput {
  Tensor<T> features;   // R x embed
  Tensor<T> first;      // R x fr_widths[0], feeds the MR branch
  std::array<T, kEmModules> losses{};
  std::array<DilationVector<T>, kEmModules> dilations;
};

template <typename T>
class FrBranch {
 public:
  FrBranch(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    std::size_t in = 3, concat = 0;
    for (std::size_t i = 0; i < kEmModules; ++i) {
      EmConfig em;
      em.c_in = in;
      em.c_out = cfg.fr_widths[i];
      em.k = cfg.k;
      em.d_max = cfg.d_max;
      em.graph_depth = cfg.graph_depth;
      em.dilation_surrogate = cfg.dilation_surrogate;
      em.head = cfg.head;
      modules_.emplace_back(store, "fr.em" + std::to_string(i + 1), em, rng);
      widths_[i] = cfg.fr_widths[i];
      concat += cfg.fr_widths[i];
      in = cfg.fr_widths[i];
    }
    fuse_ = std::make_unique<MlpLayer<T>>(store, "fr.fuse", MlpSpec{concat, cfg.embed}, rng);
  }

  EmModule<T>& module(std::size_t i) { return modules_.at(i); }

  FrOutput<T> forward(const Tensor<T>& coords, std::size_t clouds, std::size_t points,
                      bool training) {
    FrOutput<T> out;
    Tensor<T> x = coords;
    for (std::size_t i = 0; i < kEmModules; ++i) {
      auto em = modules_[i].forward(x, clouds, points, training);
      out.losses[i] = em.error_loss;
      out.dilations[i] = std::move(em.dilation);
      outputs_[i] = std::move(em.features);
      x = outputs_[i];
    }
    const std::array<const Tensor<T>*, kEmModules> parts{&outputs_[0], &outputs_[1],
                                                          &outputs_[2], &outputs_[3]};
    out.features = fuse_->forward(concat_cols<T>(parts), training);
    out.first = outputs_[0];
    return out;
  }

  /// d_first is the gradient reaching module 1's output from the MR branch.
  Tensor<T> backward(const Tensor<T>& d_features, const Tensor<T>& d_first,
                     const std::array<T, kEmModules>& d_losses) {
    auto d_parts = split_cols(fuse_->backward(d_features), std::span(widths_));
    for (std::size_t j = 0; j < d_first.size(); ++j) d_parts[0][j] += d_first[j];
    Tensor<T> carry;
    for (std::size_t i = kEmModules; i-- > 0;) {
      Tensor<T> g = std::move(d_parts[i]);
      if (!carry.empty())
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += carry[j];
      carry = modules_[i].backward(g, d_losses[i]);
    }
    return carry;
  }

 private:
  std::vector<EmModule<T>> modules_;
  std::unique_ptr<MlpLayer<T>> fuse_;
  std::array<std::size_t, kEmModules> widths_{};
  std::array<Tensor<T>, kEmModules> outputs_;
};

// ---------------------------------------------------------------------------
// Multi-resolution branch
// ---------------------------------------------------------------------------

/// Row map that pads a cloud of n points to the next multiple of 16 by
/// repeating its final points.
inline std::vector<Index> padding_map(std::size_t n) {
  const std::size_t padded = (n + 15) / 16 * 16;
  const std::size_t extra = padded - n;
  std::vector<Index> map(padded);
  for (std::size_t j = 0; j < padded; ++j) {
    if (j < n) {
      map[j] = Index(j);
    } else if (extra <= n) {
      map[j] = Index(n - extra + (j - n));
    } else {
      map[j] = Index((j - n) % n);
    }
  }
  return map;
}

template <typename T>
class MrBranch {
 public:
  MrBranch(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng)
      : k_mr_(cfg.k_mr), knn_coords_(cfg.mr_knn_coords), in_(cfg.fr_widths[0]),
        mid_(cfg.mr_mid), low_(cfg.mr_low) {
    down1_ = std::make_unique<MlpLayer<T>>(store, "mr.down1", MlpSpec{2 * in_, mid_}, rng);
    down2_ = std::make_unique<MlpLayer<T>>(store, "mr.down2", MlpSpec{2 * mid_, low_}, rng);
    up1_ = std::make_unique<MlpLayer<T>>(store, "mr.up1", MlpSpec{mid_ + low_, mid_}, rng);
    out_ = std::make_unique<MlpLayer<T>>(store, "mr.out",
                                         MlpSpec{in_ + mid_ + low_, cfg.mr_width()}, rng);
  }

  /// first: R x fr_widths[0] output of the first module; coords: R x 3.
  Tensor<T> forward(const Tensor<T>& first, const Tensor<T>& coords, std::size_t clouds,
                    std::size_t points, bool training) {
    clouds_ = clouds;
    points_ = points;
    const auto pad = padding_map(points);
    padded_ = pad.size();
    n1_ = padded_ / 4;
    n2_ = padded_ / 16;
    k1_ = std::min(k_mr_, n1_);
    k2_ = std::min(k_mr_, n2_);

    pad_rows_.clear();
    for (std::size_t b = 0; b < clouds; ++b)
      for (Index r : pad) pad_rows_.push_back(Index(b * points) + r);
    a0_ = gather_rows(first, std::span<const Index>(pad_rows_));
    coords0_ = gather_rows(coords, std::span<const Index>(pad_rows_));

    // Two FPS levels per cloud; indices are rows of the stacked batch.
    sample1_.clear();
    sample2_.clear();
    for (std::size_t b = 0; b < clouds; ++b) {
      const auto local0 = slice_rows(coords0_, b * padded_, padded_);
      const auto idx1 = farthest_point_sampling(local0, n1_);
      const auto local1 = gather_rows(local0, idx1.values());
      const auto idx2 = farthest_point_sampling(local1, n2_);
      for (Index i : idx1.values()) sample1_.push_back(Index(b * padded_) + i);
      for (Index i : idx2.values()) sample2_.push_back(Index(b * n1_) + i);
    }
    coords1_ = gather_rows(coords0_, std::span<const Index>(sample1_));
    coords2_ = gather_rows(coords1_, std::span<const Index>(sample2_));

    // Down path.
    x1_ = gather_rows(a0_, std::span<const Index>(sample1_));
    b_ = encode_and_pool(x1_, coords1_, n1_, k1_, *down1_, knn1_, pool1_, training);
    x2_ = gather_rows(b_, std::span<const Index>(sample2_));
    c_ = encode_and_pool(x2_, coords2_, n2_, k2_, *down2_, knn2_, pool2_, training);

    // Up path with dense skips.
    plan21_ = plans(coords2_, n2_, coords1_, n1_);
    c_up1_ = propagate_batch(plan21_, c_, n2_, n1_);
    const std::array<const Tensor<T>*, 2> up_parts{&b_, &c_up1_};
    b_up_ = up1_->forward(concat_cols<T>(up_parts), training);

    plan10_ = plans(coords1_, n1_, coords0_, padded_);
    plan20_ = plans(coords2_, n2_, coords0_, padded_);
    b_full_ = propagate_batch(plan10_, b_up_, n1_, padded_);
    c_full_ = propagate_batch(plan20_, c_, n2_, padded_);
    const std::array<const Tensor<T>*, 3> out_parts{&a0_, &b_full_, &c_full_};
    Tensor<T> padded_out = out_->forward(concat_cols<T>(out_parts), training);

    keep_rows_.clear();
    for (std::size_t b = 0; b < clouds; ++b)
      for (std::size_t j = 0; j < points; ++j) keep_rows_.push_back(Index(b * padded_ + j));
    return gather_rows(padded_out, std::span<const Index>(keep_rows_));
  }

  /// Returns the gradient at `first`; adds coordinate gradients (through the
  /// interpolation weights) into d_coords when given.
  Tensor<T> backward(const Tensor<T>& d_out, Tensor<T>* d_coords) {
    const bool want_coords = d_coords != nullptr;
    Tensor<T> d_padded({clouds_ * padded_, d_out.cols()});
    scatter_add_rows(d_padded, d_out, std::span<const Index>(keep_rows_));
    auto d_parts =
        split_cols(out_->backward(d_padded), std::array<std::size_t, 3>{in_, mid_, low_});
    Tensor<T>& d_a0 = d_parts[0];

    Tensor<T> d_c0, d_c1, d_c2;
    if (want_coords) {
      d_c0 = Tensor<T>(coords0_.shape());
      d_c1 = Tensor<T>(coords1_.shape());
      d_c2 = Tensor<T>(coords2_.shape());
    }
    Tensor<T> d_b_up({b_up_.rows(), mid_});
    Tensor<T> d_c({c_.rows(), low_});
    propagate_batch_backward(plan10_, coords1_, n1_, coords0_, padded_, b_up_, b_full_,
                             d_parts[1], d_b_up, want_coords ? &d_c1 : nullptr,
                             want_coords ? &d_c0 : nullptr);
    propagate_batch_backward(plan20_, coords2_, n2_, coords0_, padded_, c_, c_full_, d_parts[2],
                             d_c, want_coords ? &d_c2 : nullptr, want_coords ? &d_c0 : nullptr);

    auto d_up = split_cols(up1_->backward(d_b_up), std::array<std::size_t, 2>{mid_, low_});
    Tensor<T>& d_b = d_up[0];
    propagate_batch_backward(plan21_, coords2_, n2_, coords1_, n1_, c_, c_up1_, d_up[1], d_c,
                             want_coords ? &d_c2 : nullptr, want_coords ? &d_c1 : nullptr);

    const Tensor<T> d_x2 = pool_backward(d_c, knn2_, pool2_, k2_, *down2_, mid_);
    scatter_add_rows(d_b, d_x2, std::span<const Index>(sample2_));
    const Tensor<T> d_x1 = pool_backward(d_b, knn1_, pool1_, k1_, *down1_, in_);
    scatter_add_rows(d_a0, d_x1, std::span<const Index>(sample1_));

    Tensor<T> d_first({clouds_ * points_, in_});
    scatter_add_rows(d_first, d_a0, std::span<const Index>(pad_rows_));
    if (want_coords) {
      scatter_add_rows(d_c1, d_c2, std::span<const Index>(sample2_));
      scatter_add_rows(d_c0, d_c1, std::span<const Index>(sample1_));
      scatter_add_rows(*d_coords, d_c0, std::span<const Index>(pad_rows_));
    }
    return d_first;
  }

 private:
  Tensor<T> encode_and_pool(const Tensor<T>& x, const Tensor<T>& coords, std::size_t n,
                            std::size_t k, MlpLayer<T>& mlp, IndexTensor& neighbors,
                            PooledNeighbors<T>& pooled, bool training) {
    neighbors = IndexTensor({clouds_ * n, k});
    for (std::size_t b = 0; b < clouds_; ++b) {
      const auto local = knn_coords_ ? knn(slice_rows(coords, b * n, n), k)
                                     : knn(slice_rows(x, b * n, n), k);
      Index* dst = neighbors.row(b * n);
      for (Index i : local.values()) *dst++ = i + Index(b * n);
    }
    Tensor<T> g = graph_encode(x, neighbors);
    g.reshape({clouds_ * n * k, g.cols()});
    Tensor<T> h = mlp.forward(g, training);
    h.reshape({clouds_ * n, k, h.cols()});
    pooled = max_pool_neighbors(h);
    return pooled.values;
  }

  Tensor<T> pool_backward(const Tensor<T>& d_pooled, const IndexTensor& neighbors,
                          const PooledNeighbors<T>& pooled, std::size_t k, MlpLayer<T>& mlp,
                          std::size_t in_channels) {
    Tensor<T> dh = max_pool_neighbors_backward(d_pooled, pooled.argmax, k);
    dh.reshape({dh.dim(0) * k, dh.dim(2)});
    const Tensor<T> dg = mlp.backward(dh);
    return graph_encode_backward(dg, neighbors, in_channels);
  }

  std::vector<Propagation<T>> plans(const Tensor<T>& coarse, std::size_t nc,
                                    const Tensor<T>& fine, std::size_t nf) const {
    std::vector<Propagation<T>> out;
    for (std::size_t b = 0; b < clouds_; ++b)
      out.push_back(plan_propagation(slice_rows(coarse, b * nc, nc), slice_rows(fine, b * nf, nf)));
    return out;
  }

  Tensor<T> propagate_batch(const std::vector<Propagation<T>>& plan, const Tensor<T>& feats,
                            std::size_t nc, std::size_t nf) const {
    Tensor<T> out({clouds_ * nf, feats.cols()});
    for (std::size_t b = 0; b < clouds_; ++b) {
      const auto part = propagate(plan[b], slice_rows(feats, b * nc, nc));
      std::copy(part.values().begin(), part.values().end(), out.row(b * nf));
    }
    return out;
  }

  void propagate_batch_backward(const std::vector<Propagation<T>>& plan, const Tensor<T>& coarse,
                                std::size_t nc, const Tensor<T>& fine, std::size_t nf,
                                const Tensor<T>& feats, const Tensor<T>& out,
                                const Tensor<T>& d_out, Tensor<T>& d_feats,
                                Tensor<T>* d_coarse, Tensor<T>* d_fine) const {
    const std::size_t c = feats.cols();
    for (std::size_t b = 0; b < clouds_; ++b) {
      const auto cc = slice_rows(coarse, b * nc, nc);
      const auto fc = slice_rows(fine, b * nf, nf);
      Tensor<T> df({nc, c});
      Tensor<T> dcc({nc, 3}), dfc({nf, 3});
      propagate_backward(plan[b], cc, fc, slice_rows(feats, b * nc, nc),
                         slice_rows(out, b * nf, nf), slice_rows(d_out, b * nf, nf), df,
                         d_coarse ? &dcc : nullptr, d_fine ? &dfc : nullptr);
      accumulate_block(d_feats, df, b * nc);
      if (d_coarse) accumulate_block(*d_coarse, dcc, b * nc);
      if (d_fine) accumulate_block(*d_fine, dfc, b * nf);
    }
  }

  static void accumulate_block(Tensor<T>& dst, const Tensor<T>& src, std::size_t row0) {
    T* d = dst.row(row0);
    for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
  }

  std::size_t k_mr_;
  bool knn_coords_;
  std::size_t in_, mid_, low_;
  std::unique_ptr<MlpLayer<T>> down1_, down2_, up1_, out_;

  std::size_t clouds_ = 0, points_ = 0, padded_ = 0, n1_ = 0, n2_ = 0, k1_ = 0, k2_ = 0;
  std::vector<Index> pad_rows_, sample1_, sample2_, keep_rows_;
  Tensor<T> a0_, coords0_, coords1_, coords2_, x1_, x2_, b_, c_, c_up1_, b_up_, b_full_, c_full_;
  IndexTensor knn1_, knn2_;
  PooledNeighbors<T> pool1_, pool2_;
  std::vector<Propagation<T>> plan21_, plan10_, plan20_;
};

// ---------------------------------------------------------------------------
// Gated merge
// ---------------------------------------------------------------------------

/// Per-cloud channel max over points, with winning rows for backward.
template <typename T>
PooledNeighbors<T> max_pool_points(const Tensor<T>& x, std::size_t clouds, std::size_t points) {
  Tensor<T> view = x;
  view.reshape({clouds, points, x.cols()});
  return max_pool_neighbors(view);
}

template <typename T>
Tensor<T> max_pool_points_backward(const Tensor<T>& d_pooled, const IndexTensor& argmax,
                                   std::size_t points) {
  Tensor<T> d = max_pool_neighbors_backward(d_pooled, argmax, points);
  d.reshape({d.dim(0) * points, d.dim(2)});
  return d;
}

/// F_DR = F_FR * sigmoid(M(max_N F_MR)), broadcast over each cloud's points.
template <typename T>
class MergeGate {
 public:
  MergeGate(ParamStore<T>& store, std::size_t mr_width, std::size_t fr_width, Rng& rng)
      : gate_(store, "merge.gate", MlpSpec{mr_width, fr_width, false, Activation::none}, rng) {}

  Tensor<T> forward(const Tensor<T>& fr, const Tensor<T>& mr, std::size_t clouds,
                    std::size_t points, bool training) {
    points_ = points;
    pooled_ = max_pool_points(mr, clouds, points);
    scale_ = gate_.forward(pooled_.values, training);
    for (auto& v : scale_.values()) v = logistic(v);
    fr_ = fr;
    return apply(fr, scale_, points);
  }

  /// Returns {d F_FR, d F_MR}.
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& d_out) {
    const std::size_t c = fr_.cols(), clouds = scale_.rows();
    Tensor<T> d_fr({fr_.rows(), c});
    Tensor<T> d_scale({clouds, c});
    for (std::size_t b = 0; b < clouds; ++b) {
      const T* s = scale_.row(b);
      T* ds = d_scale.row(b);
      for (std::size_t i = 0; i < points_; ++i) {
        const std::size_t r = b * points_ + i;
        const T* g = d_out.row(r);
        const T* f = fr_.row(r);
        T* o = d_fr.row(r);
        for (std::size_t ch = 0; ch < c; ++ch) {
          o[ch] = g[ch] * s[ch];
          ds[ch] += g[ch] * f[ch];
        }
      }
      for (std::size_t ch = 0; ch < c; ++ch) ds[ch] *= s[ch] * (T(1) - s[ch]);
    }
    const Tensor<T> d_pooled = gate_.backward(d_scale);
    return {std::move(d_fr), max_pool_points_backward(d_pooled, pooled_.argmax, points_)};
  }

  static Tensor<T> apply(const Tensor<T>& fr, const Tensor<T>& scale, std::size_t points) {
    Tensor<T> out = fr;
    const std::size_t c = fr.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
      const T* s = scale.row(r / points);
      T* o = out.row(r);
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] *= s[ch];
    }
    return out;
  }

 private:
  MlpLayer<T> gate_;
  std::size_t points_ = 0;
  PooledNeighbors<T> pooled_;
  Tensor<T> scale_;
  Tensor<T> fr_;
};

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// Max-pool over points, then FC layers with dropout between them.
template <typename T>
class ClassificationHead {
 public:
  ClassificationHead(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    std::size_t in = cfg.embed;
    for (std::size_t i = 0; i < cfg.cls_hidden.size(); ++i) {
      layers_.emplace_back(store, "cls.fc" + std::to_string(i),
                           MlpSpec{in, cfg.cls_hidden[i], true, Activation::leaky_relu}, rng);
      dropouts_.emplace_back(cfg.dropout);
      in = cfg.cls_hidden[i];
    }
    layers_.emplace_back(store, "cls.logits",
                         MlpSpec{in, cfg.num_classes, false, Activation::none}, rng);
  }

  Tensor<T> forward(const Tensor<T>& features, std::size_t clouds, std::size_t points,
                    bool training, Rng* dropout_rng) {
    points_ = points;
    pooled_ = max_pool_points(features, clouds, points);
    Tensor<T> x = pooled_.values;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i].forward(x, training);
      if (i < dropouts_.size()) x = dropouts_[i].forward(x, training, dropout_rng);
    }
    return x;
  }

  Tensor<T> backward(const Tensor<T>& d_logits) {
    Tensor<T> d = d_logits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i < dropouts_.size()) d = dropouts_[i].backward(d);
      d = layers_[i].backward(d);
    }
    return max_pool_points_backward(d, pooled_.argmax, points_);
  }

 private:
  std::vector<MlpLayer<T>> layers_;
  std::vector<Dropout<T>> dropouts_;
  std::size_t points_ = 0;
  PooledNeighbors<T> pooled_;
};

/// Per-point FC layers on concat(F_DR, global max of F_DR, object one-hot).
template <typename T>
class SegmentationHead {
 public:
  SegmentationHead(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng)
      : embed_(cfg.embed), categories_(cfg.num_categories) {
    std::size_t in = 2 * cfg.embed + cfg.num_categories;
    for (std::size_t i = 0; i < cfg.seg_hidden.size(); ++i) {
      layers_.emplace_back(store, "seg.fc" + std::to_string(i),
                           MlpSpec{in, cfg.seg_hidden[i], true, Activation::leaky_relu}, rng);
      in = cfg.seg_hidden[i];
    }
    layers_.emplace_back(store, "seg.logits", MlpSpec{in, cfg.num_parts, false, Activation::none},
                         rng);
  }

  Tensor<T> forward(const Tensor<T>& features, std::size_t clouds, std::size_t points,
                    std::span<const Index> categories, bool training) {
    if (categories.size() != clouds) fail_usage("segmentation needs one category per cloud");
    points_ = points;
    pooled_ = max_pool_points(features, clouds, points);
    const std::size_t rows = clouds * points, e = embed_;
    Tensor<T> x({rows, 2 * e + categories_});
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t b = r / points;
      T* dst = x.row(r);
      std::copy_n(features.row(r), e, dst);
      std::copy_n(pooled_.values.row(b), e, dst + e);
      const Index cat = categories[b];
      if (cat < 0 || std::size_t(cat) >= categories_)
        fail_data("object category " + std::to_string(cat) + " out of range");
      dst[2 * e + std::size_t(cat)] = T(1);
    }
    for (auto& layer : layers_) x = layer.forward(x, training);
    return x;
  }

  Tensor<T> backward(const Tensor<T>& d_logits) {
    Tensor<T> d = d_logits;
    for (std::size_t i = layers_.size(); i-- > 0;) d = layers_[i].backward(d);
    const std::size_t rows = d.rows(), e = embed_;
    Tensor<T> d_features({rows, e});
    Tensor<T> d_global({pooled_.values.rows(), e});
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = d.row(r);
      std::copy_n(g, e, d_features.row(r));
      T* dg = d_global.row(r / points_);
      for (std::size_t ch = 0; ch < e; ++ch) dg[ch] += g[e + ch];
    }
    const Tensor<T> d_pool = max_pool_points_backward(d_global, pooled_.argmax, points_);
    for (std::size_t i = 0; i < d_features.size(); ++i) d_features[i] += d_pool[i];
    return d_features;
  }

 private:
  std::size_t embed_;
  std::size_t categories_;
  std::vector<MlpLayer<T>> layers_;
  std::size_t points_ = 0;
  PooledNeighbors<T> pooled_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename T>
struct CrossEntropy {
  T value = 0;
  Tensor<T> d_logits;
};

/// Mean softmax cross-entropy over rows.
template <typename T>
CrossEntropy<T> cross_entropy(const Tensor<T>& logits, std::span<const Index> targets) {
  const std::size_t rows = logits.rows(), c = logits.cols();
  if (targets.size() != rows) fail_usage("cross_entropy: one target per row required");
  CrossEntropy<T> out{T(0), Tensor<T>({rows, c})};
  for (std::size_t r = 0; r < rows; ++r) {
    const Index t = targets[r];
    if (t < 0 || std::size_t(t) >= c)
      fail_data("target " + std::to_string(t) + " outside " + std::to_string(c) + " classes");
    const T* z = logits.row(r);
    const T m = *std::max_element(z, z + c);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(z[j] - m);
    const T log_sum = m + std::log(sum);
    out.value += log_sum - z[t];
    T* d = out.d_logits.row(r);
    for (std::size_t j = 0; j < c; ++j) d[j] = std::exp(z[j] - log_sum) / T(rows);
    d[t] -= T(1) / T(rows);
  }
  out.value /= T(rows);
  return out;
}

template <typename T>
struct LossBreakdown {
  double total = 0;  // accumulated in double whatever T is
  T ce = 0;
  std::array<T, kEmModules> er{};
};

/// CE + sum_i w_i * L_er_i; the default weights are 0.1, 0.01, 0.01, 0.01.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& logits, std::span<const Index> targets,
                            const std::array<T, kEmModules>& em_losses,
                            const LossWeights& weights = {}) {
  LossBreakdown<T> out;
  out.ce = cross_entropy(logits, targets).value;
  out.er = em_losses;
  out.total = double(out.ce);
  for (std::size_t i = 0; i < kEmModules; ++i) out.total += weights.er[i] * double(em_losses[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // clouds x C or rows x S
  std::array<T, kEmModules> em_losses{};
  std::array<DilationVector<T>, kEmModules> dilations;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed)
      : config_(cfg), store_(std::make_unique<ParamStore<T>>()) {
    if (cfg.k * cfg.d_max % 2 != 0) fail_usage("k*d_max must be even");
    Rng rng(derive_seed(seed, 0x1417));
    fr_ = std::make_unique<FrBranch<T>>(*store_, cfg, rng);
    mr_ = std::make_unique<MrBranch<T>>(*store_, cfg, rng);
    merge_ = std::make_unique<MergeGate<T>>(*store_, cfg.mr_width(), cfg.embed, rng);
    if (cfg.task == Task::classification)
      cls_ = std::make_unique<ClassificationHead<T>>(*store_, cfg, rng);
    else
      seg_ = std::make_unique<SegmentationHead<T>>(*store_, cfg, rng);
  }

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }
  FrBranch<T>& fr() { return *fr_; }

  ForwardResult<T> forward(const Batch<T>& batch, bool training, Rng* dropout_rng = nullptr) {
    const std::size_t b = batch.clouds, n = batch.points;
    if (batch.coords.rows() != b * n || batch.coords.cols() != 3)
      fail_usage("batch coordinates must be (clouds*points) x 3");
    if (n < config_.k * config_.d_max)
      fail_usage("clouds need at least k*d_max = " + std::to_string(config_.k * config_.d_max) +
                 " points");
    clouds_ = b;
    points_ = n;
    ForwardResult<T> out;
    auto fr = fr_->forward(batch.coords, b, n, training);
    out.em_losses = fr.losses;
    out.dilations = std::move(fr.dilations);
    const Tensor<T> mr = mr_->forward(fr.first, batch.coords, b, n, training);
    const Tensor<T> dr = merge_->forward(fr.features, mr, b, n, training);
    if (cls_)
      out.logits = cls_->forward(dr, b, n, training, dropout_rng);
    else
      out.logits = seg_->forward(dr, b, n, batch.categories, training);
    return out;
  }

  /// Accumulates parameter gradients. Returns d(loss)/d(coords) when asked.
  Tensor<T> backward(const Tensor<T>& d_logits, const LossWeights& weights,
                     bool want_input_grad = false) {
    const Tensor<T> d_dr = cls_ ? cls_->backward(d_logits) : seg_->backward(d_logits);
    auto [d_fr, d_mr] = merge_->backward(d_dr);
    Tensor<T> d_coords;
    if (want_input_grad) d_coords = Tensor<T>({clouds_ * points_, 3});
    const Tensor<T> d_first = mr_->backward(d_mr, want_input_grad ? &d_coords : nullptr);
    std::array<T, kEmModules> d_losses{};
    for (std::size_t i = 0; i < kEmModules; ++i) d_losses[i] = T(weights.er[i]);
    const Tensor<T> d_in = fr_->backward(d_fr, d_first, d_losses);
    if (want_input_grad)
      for (std::size_t i = 0; i < d_in.size(); ++i) d_coords[i] += d_in[i];
    return d_coords;
  }

  std::span<const Index> targets(const Batch<T>& batch) const {
    return config_.task == Task::classification ? std::span<const Index>(batch.labels)
                                                : std::span<const Index>(batch.part_labels);
  }

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore<T>> store_;
  std::unique_ptr<FrBranch<T>> fr_;
  std::unique_ptr<MrBranch<T>> mr_;
  std::unique_ptr<MergeGate<T>> merge_;
  std::unique_ptr<ClassificationHead<T>> cls_;
  std::unique_ptr<SegmentationHead<T>> seg_;
  std::size_t clouds_ = 0, points_ = 0;
};

template <typename T>
Batch<T> single_cloud(const Tensor<T>& coords) {
  Batch<T> b;
  b.coords = coords.reshaped({coords.rows(), 3});
  b.clouds = 1;
  b.points = coords.rows();
  return b;
}

/// Eval-mode class logits (shape [C]) for one cloud.
template <typename T>
Tensor<T> classify(const Tensor<T>& coords, Model<T>& model) {
  auto out = model.forward(single_cloud(coords), false);
  out.logits.reshape({out.logits.size()});
  return out.logits;
}

/// Eval-mode part logits (N x S) for one cloud of the given object category.
template <typename T>
Tensor<T> segment(const Tensor<T>& coords, Index category, Model<T>& model) {
  auto batch = single_cloud(coords);
  batch.categories = {category};
  return model.forward(batch, false).logits;
}

}  // namespace drnet
