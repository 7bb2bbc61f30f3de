#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drnet/data.hpp"
#include "drnet/network.hpp"
#include "drnet/numerics.hpp"

namespace drnet {

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

/// Cosine annealing from `hi` at epoch 0 to `lo` at epoch `total`.
inline double cosine_lr(std::size_t epoch, std::size_t total, double hi = 0.1,
                        double lo = 0.001) {
  if (total == 0 || epoch > total) fail_usage("cosine_lr: epoch outside [0, total]");
  return lo + 0.5 * (hi - lo) * (1.0 + std::cos(M_PI * double(epoch) / double(total)));
}

/// base * rate^floor(epoch / every).
inline double step_decay_lr(std::size_t epoch, double base = 0.001, double rate = 0.5,
                            std::size_t every = 20) {
  return base * std::pow(rate, double(epoch / every));
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename T>
struct SgdState {
  double momentum = 0.9;
  std::vector<Tensor<T>> velocity;  // one per trainable parameter, store order
};

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

namespace detail {

template <typename T>
void check_gradients(const ParamStore<T>& store) {
  for (const auto& p : store)
    if (p.trainable && !p.grad.all_finite())
      fail_numerical("non-finite gradient in parameter '" + p.name + "'");
}

template <typename T>
void ensure_buffers(const ParamStore<T>& store, std::vector<Tensor<T>>& buffers) {
  if (!buffers.empty()) return;
  for (const auto& p : store)
    if (p.trainable) buffers.emplace_back(p.value.shape());
}

}  // namespace detail

/// v <- momentum * v + g; w <- w - lr * v; gradients are cleared.
template <typename T>
void sgd_step(ParamStore<T>& store, SgdState<T>& state, double lr) {
  detail::check_gradients(store);
  detail::ensure_buffers(store, state.velocity);
  std::size_t slot = 0;
  for (auto& p : store) {
    if (!p.trainable) continue;
    auto& v = state.velocity[slot++];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      v[i] = T(state.momentum) * v[i] + p.grad[i];
      p.value[i] -= T(lr) * v[i];
    }
  }
  store.zero_grad();
}

/// Bias-corrected Adam; gradients are cleared.
template <typename T>
void adam_step(ParamStore<T>& store, AdamState<T>& state, double lr) {
  detail::check_gradients(store);
  detail::ensure_buffers(store, state.m);
  detail::ensure_buffers(store, state.v);
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  std::size_t slot = 0;
  for (auto& p : store) {
    if (!p.trainable) continue;
    auto& m = state.m[slot];
    auto& v = state.v[slot];
    ++slot;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      m[i] = T(state.beta1) * m[i] + T(1 - state.beta1) * g;
      v[i] = T(state.beta2) * v[i] + T(1 - state.beta2) * g * g;
      const T m_hat = m[i] / T(c1);
      const T v_hat = v[i] / T(c2);
      p.value[i] -= T(lr) * m_hat / (std::sqrt(v_hat) + T(state.eps));
    }
  }
  store.zero_grad();
}

// ---------------------------------------------------------------------------
// Augmentation and voting
// ---------------------------------------------------------------------------

inline constexpr double kScaleLo = 0.8, kScaleHi = 1.25, kShift = 0.1;

/// s * P + t with s ~ U[0.8, 1.25] and t ~ U[-0.1, 0.1]^3.
template <typename T>
Tensor<T> augment(const Tensor<T>& coords, Rng& rng) {
  const double s = rng.uniform(kScaleLo, kScaleHi);
  const double t[3] = {rng.uniform(-kShift, kShift), rng.uniform(-kShift, kShift),
                       rng.uniform(-kShift, kShift)};
  Tensor<T> out = coords;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t k = 0; k < 3; ++k) out(i, k) = T(s * double(coords(i, k)) + t[k]);
  return out;
}

template <typename T>
void softmax_rows(Tensor<T>& logits) {
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    T* z = logits.row(r);
    const std::size_t c = logits.cols();
    const T m = *std::max_element(z, z + c);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += z[j] = std::exp(z[j] - m);
    for (std::size_t j = 0; j < c; ++j) z[j] /= sum;
  }
}

/// Lowest index wins ties.
template <typename T>
Index argmax(const T* v, std::size_t n) {
  return Index(std::max_element(v, v + n) - v);
}

namespace detail {

// Vote 0 sees the cloud as is; later votes use a fresh random scale.
template <typename T>
Tensor<T> vote_copy(const Tensor<T>& coords, std::size_t vote, Rng& rng) {
  if (vote == 0) return coords;
  const double s = rng.uniform(kScaleLo, kScaleHi);
  Tensor<T> out = coords;
  for (auto& v : out.values()) v = T(s * double(v));
  return out;
}

}  // namespace detail

/// Class probabilities averaged over `votes` scaled copies.
template <typename T>
Tensor<T> vote_probabilities(Model<T>& model, const Tensor<T>& coords, std::size_t votes,
                             Rng& rng) {
  Tensor<T> avg;
  for (std::size_t v = 0; v < std::max<std::size_t>(1, votes); ++v) {
    Tensor<T> p = classify(detail::vote_copy(coords, v, rng), model);
    p.reshape({1, p.size()});
    softmax_rows(p);
    if (avg.empty()) avg = Tensor<T>(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) avg[i] += p[i] / T(std::max<std::size_t>(1, votes));
  }
  return avg;
}

template <typename T>
Index vote_eval(Model<T>& model, const Tensor<T>& coords, std::size_t votes, Rng& rng) {
  const auto p = vote_probabilities(model, coords, votes, rng);
  return argmax(p.data(), p.size());
}

/// Per-point part probabilities averaged over `votes` scaled copies (N x S).
template <typename T>
Tensor<T> vote_segment(Model<T>& model, const Tensor<T>& coords, Index category,
                       std::size_t votes, Rng& rng) {
  Tensor<T> avg;
  for (std::size_t v = 0; v < std::max<std::size_t>(1, votes); ++v) {
    Tensor<T> p = segment(detail::vote_copy(coords, v, rng), category, model);
    softmax_rows(p);
    if (avg.empty()) avg = Tensor<T>(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) avg[i] += p[i] / T(std::max<std::size_t>(1, votes));
  }
  return avg;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Argmax restricted to the category's own parts.
template <typename T>
std::vector<Index> restricted_argmax(const Tensor<T>& scores, const std::vector<Index>& parts) {
  std::vector<Index> out(scores.rows());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const T* s = scores.row(r);
    Index best = parts.front();
    for (Index p : parts)
      if (s[p] > s[best]) best = p;
    out[r] = best;
  }
  return out;
}

/// Mean over the category's parts of |pred & truth| / |pred | truth|; a part
/// absent from both counts as IoU 1.
inline double shape_iou(std::span<const Index> pred, std::span<const Index> truth,
                        const std::vector<Index>& parts) {
  double total = 0;
  for (Index part : parts) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool a = pred[i] == part, b = truth[i] == part;
      inter += a && b;
      uni += a || b;
    }
    total += uni == 0 ? 1.0 : double(inter) / double(uni);
  }
  return total / double(parts.size());
}

struct MiouResult {
  std::vector<double> shape_ious;
  std::vector<double> per_category;  // mean shape IoU per category (0 if none)
  double miou = 0;
};

/// Shape IoUs from per-shape part scores (N x S) restricted to each shape's
/// category, and their mean.
template <typename T>
MiouResult compute_miou(const std::vector<Tensor<T>>& scores,
                        const std::vector<std::vector<Index>>& truth,
                        std::span<const Index> categories, const PartTable& parts) {
  MiouResult out;
  std::vector<double> sum(parts.size(), 0.0);
  std::vector<std::size_t> count(parts.size(), 0);
  for (std::size_t s = 0; s < scores.size(); ++s) {
    const Index cat = categories[s];
    if (cat < 0 || std::size_t(cat) >= parts.size())
      fail_data("unknown category " + std::to_string(cat));
    const auto pred = restricted_argmax(scores[s], parts[std::size_t(cat)]);
    const double iou = shape_iou(pred, truth[s], parts[std::size_t(cat)]);
    out.shape_ious.push_back(iou);
    sum[std::size_t(cat)] += iou;
    ++count[std::size_t(cat)];
  }
  for (std::size_t c = 0; c < parts.size(); ++c)
    out.per_category.push_back(count[c] ? sum[c] / double(count[c]) : 0.0);
  out.miou = out.shape_ious.empty()
                 ? 0.0
                 : std::accumulate(out.shape_ious.begin(), out.shape_ious.end(), 0.0) /
                       double(out.shape_ious.size());
  return out;
}

struct MetricReport {
  double overall_acc = 0;
  double avg_class_acc = 0;
  std::vector<double> per_class_acc;
  double miou = 0;
  std::vector<double> per_category_iou;
};

namespace detail {

inline void finish_accuracy(MetricReport& r, const std::vector<std::size_t>& hit,
                            const std::vector<std::size_t>& seen, std::size_t correct,
                            std::size_t total) {
  r.overall_acc = total ? double(correct) / double(total) : 0.0;
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < seen.size(); ++c) {
    const double acc = seen[c] ? double(hit[c]) / double(seen[c]) : 0.0;
    r.per_class_acc.push_back(acc);
    if (seen[c]) {
      sum += acc;
      ++present;
    }
  }
  r.avg_class_acc = present ? sum / double(present) : 0.0;
}

}  // namespace detail

/// Eval-mode classification metrics; votes > 1 averages scaled copies.
template <typename T>
MetricReport evaluate_classification(Model<T>& model, const std::vector<LabeledCloud>& clouds,
                                     std::size_t votes = 1, std::uint64_t seed = 0) {
  const std::size_t classes = model.config().num_classes;
  std::vector<std::size_t> hit(classes, 0), seen(classes, 0);
  std::size_t correct = 0;
  Rng rng(derive_seed(seed, 0x70fe));
  for (const auto& c : clouds) {
    const Index pred = vote_eval(model, c.coords.template cast<T>(), votes, rng);
    const auto truth = std::size_t(c.cloud_label.value());
    ++seen[truth];
    if (pred == Index(truth)) {
      ++hit[truth];
      ++correct;
    }
  }
  MetricReport r;
  detail::finish_accuracy(r, hit, seen, correct, clouds.size());
  return r;
}

/// Eval-mode segmentation metrics: point accuracy, per-part accuracy and mIoU.
template <typename T>
MetricReport evaluate_segmentation(Model<T>& model, const std::vector<LabeledCloud>& clouds,
                                   const PartTable& parts, std::size_t votes = 1,
                                   std::uint64_t seed = 0) {
  const std::size_t part_total = model.config().num_parts;
  std::vector<std::size_t> hit(part_total, 0), seen(part_total, 0);
  std::size_t correct = 0, total = 0;
  std::vector<Tensor<T>> scores;
  std::vector<std::vector<Index>> truth;
  std::vector<Index> categories;
  Rng rng(derive_seed(seed, 0x5e6));
  for (const auto& c : clouds) {
    const Index cat = c.category.value();
    auto probs = vote_segment(model, c.coords.template cast<T>(), cat, votes, rng);
    const auto pred = restricted_argmax(probs, parts.at(std::size_t(cat)));
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const auto t = std::size_t(c.point_labels[i]);
      ++seen[t];
      ++total;
      if (pred[i] == Index(t)) {
        ++hit[t];
        ++correct;
      }
    }
    scores.push_back(std::move(probs));
    truth.push_back(c.point_labels);
    categories.push_back(cat);
  }
  MetricReport r;
  detail::finish_accuracy(r, hit, seen, correct, total);
  const auto miou = compute_miou(scores, truth, categories, parts);
  r.miou = miou.miou;
  r.per_category_iou = miou.per_category;
  return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  OptimizerKind optimizer = OptimizerKind::sgd;
  LossWeights weights;
  bool augment = true;
  double sgd_lr_max = 0.1;
  double sgd_lr_min = 0.001;
  double sgd_momentum = 0.9;
  double adam_lr = 0.001;
  double decay_rate = 0.5;
  std::size_t decay_every = 20;
};

/// One CSV line per epoch: epoch,lr,ce,er1,er2,er3,er4,train_acc,val_metric.
struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double ce = 0;
  std::array<double, kEmModules> er{};
  double train_acc = 0;
  double val_metric = 0;

  static constexpr const char* kHeader = "epoch,lr,ce,er1,er2,er3,er4,train_acc,val_metric";

  std::string line() const {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", epoch, lr, ce,
                  er[0], er[1], er[2], er[3], train_acc, val_metric);
    return buf;
  }
};

/// Loss components of one optimization step.
struct StepRecord {
  std::size_t epoch = 0;
  double total = 0;
  double ce = 0;
  std::array<double, kEmModules> er{};
};

/// Stacks clouds into a batch, optionally augmenting each one.
template <typename T>
Batch<T> make_batch(const std::vector<LabeledCloud>& data, std::span<const std::size_t> pick,
                    Rng* augment_rng) {
  Batch<T> b;
  b.clouds = pick.size();
  b.points = data[pick.front()].size();
  b.coords = Tensor<T>({b.clouds * b.points, 3});
  for (std::size_t i = 0; i < pick.size(); ++i) {
    const auto& c = data[pick[i]];
    if (c.size() != b.points) fail_data("clouds in a batch must have equal point counts");
    Tensor<float> xyz = augment_rng ? augment(c.coords, *augment_rng) : c.coords;
    for (std::size_t j = 0; j < xyz.size(); ++j) b.coords[i * b.points * 3 + j] = T(xyz[j]);
    if (c.cloud_label) b.labels.push_back(*c.cloud_label);
    if (c.category) b.categories.push_back(*c.category);
    b.part_labels.insert(b.part_labels.end(), c.point_labels.begin(), c.point_labels.end());
  }
  return b;
}

template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig config, const std::vector<LabeledCloud>& train,
          const std::vector<LabeledCloud>& val, PartTable parts = {})
      : model_(model), config_(config), train_(train), val_(val), parts_(std::move(parts)) {
    if (train_.empty()) fail_data("training set is empty");
    if (config_.batch == 0 || config_.epochs == 0) fail_usage("batch and epochs must be positive");
    sgd_.momentum = config_.sgd_momentum;
  }

  std::size_t next_epoch() const { return next_epoch_; }
  bool finished() const { return next_epoch_ >= config_.epochs; }
  double best_metric() const { return best_metric_; }
  const std::vector<StepRecord>& steps() const { return steps_; }
  const TrainConfig& config() const { return config_; }

  double learning_rate(std::size_t epoch) const {
    return config_.optimizer == OptimizerKind::sgd
               ? cosine_lr(epoch, config_.epochs, config_.sgd_lr_max, config_.sgd_lr_min)
               : step_decay_lr(epoch, config_.adam_lr, config_.decay_rate, config_.decay_every);
  }

  EpochLog run_epoch() {
    const std::size_t epoch = next_epoch_;
    const bool cls = model_.config().task == Task::classification;
    const double lr = learning_rate(epoch);

    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config_.seed, 0x5ff1e, epoch));
    shuffle_rng.shuffle(order.begin(), order.end());
    Rng augment_rng(derive_seed(config_.seed, 0xa06, epoch));
    Rng dropout_rng(derive_seed(config_.seed, 0xd0, epoch));

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    std::size_t seen = 0, correct = 0, scored = 0;
    auto& store = model_.params();
    store.zero_grad();
    for (std::size_t start = 0; start < order.size(); start += config_.batch) {
      const std::size_t count = std::min(config_.batch, order.size() - start);
      const auto pick = std::span<const std::size_t>(order).subspan(start, count);
      auto batch = make_batch<T>(train_, pick, config_.augment ? &augment_rng : nullptr);
      auto fwd = model_.forward(batch, true, &dropout_rng);
      const auto targets = model_.targets(batch);
      const auto ce = cross_entropy(fwd.logits, targets);
      const auto loss = total_loss(fwd.logits, targets, fwd.em_losses, config_.weights);
      if (!std::isfinite(double(loss.total)))
        fail_numerical("non-finite loss at epoch " + std::to_string(epoch) + " (ce=" +
                       std::to_string(double(loss.ce)) + ")");
      StepRecord rec{epoch, double(loss.total), double(loss.ce), {}};
      for (std::size_t i = 0; i < kEmModules; ++i) rec.er[i] = double(loss.er[i]);
      steps_.push_back(rec);

      model_.backward(ce.d_logits, config_.weights);
      if (config_.optimizer == OptimizerKind::sgd)
        sgd_step(store, sgd_, lr);
      else
        adam_step(store, adam_, lr);

      log.ce += double(loss.ce) * double(count);
      for (std::size_t i = 0; i < kEmModules; ++i) log.er[i] += double(loss.er[i]) * double(count);
      seen += count;
      for (std::size_t r = 0; r < fwd.logits.rows(); ++r) {
        const Index pred = argmax(fwd.logits.row(r), fwd.logits.cols());
        correct += pred == targets[r];
        ++scored;
      }
    }
    log.ce /= double(seen);
    for (auto& e : log.er) e /= double(seen);
    log.train_acc = double(correct) / double(scored);

    if (!val_.empty())
      log.val_metric = cls ? evaluate_classification(model_, val_).overall_acc
                           : evaluate_segmentation(model_, val_, parts_).miou;
    improved_ = log.val_metric > best_metric_ || epoch == 0;
    if (improved_) best_metric_ = log.val_metric;
    ++next_epoch_;
    return log;
  }

  /// Whether the most recent epoch set a new best validation metric.
  bool improved() const { return improved_; }

  /// Model parameters, buffers, optimizer state and loop position.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    for (const auto& p : model_.params()) out.push_back({p.name, p.value.template cast<float>()});
    auto put_buffers = [&](const std::string& prefix, const std::vector<Tensor<T>>& bufs) {
      std::size_t slot = 0;
      for (const auto& p : model_.params())
        if (p.trainable && slot < bufs.size())
          out.push_back({prefix + p.name, bufs[slot++].template cast<float>()});
    };
    put_buffers("optim.sgd.velocity/", sgd_.velocity);
    put_buffers("optim.adam.m/", adam_.m);
    put_buffers("optim.adam.v/", adam_.v);
    out.push_back({"optim.adam.step", Tensor<float>({1}, float(adam_.step))});
    out.push_back({"train.next_epoch", Tensor<float>({1}, float(next_epoch_))});
    out.push_back({"train.best_metric", Tensor<float>({1}, float(best_metric_))});
    return out;
  }

  void restore(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.value;
    auto fetch = [&](const std::string& name) -> const Tensor<float>* {
      auto it = by_name.find(name);
      return it == by_name.end() ? nullptr : it->second;
    };
    load_parameters(model_.params(), tensors);
    auto get_buffers = [&](const std::string& prefix, std::vector<Tensor<T>>& bufs) {
      bufs.clear();
      for (const auto& p : model_.params()) {
        if (!p.trainable) continue;
        const auto* t = fetch(prefix + p.name);
        if (!t) {
          bufs.clear();
          return;
        }
        bufs.push_back(t->template cast<T>());
      }
    };
    get_buffers("optim.sgd.velocity/", sgd_.velocity);
    get_buffers("optim.adam.m/", adam_.m);
    get_buffers("optim.adam.v/", adam_.v);
    if (const auto* t = fetch("optim.adam.step")) adam_.step = std::uint64_t((*t)[0]);
    if (const auto* t = fetch("train.next_epoch")) next_epoch_ = std::size_t((*t)[0]);
    if (const auto* t = fetch("train.best_metric")) best_metric_ = double((*t)[0]);
  }

  /// Copies matching tensors into the store; every parameter must be present.
  static void load_parameters(ParamStore<T>& store, const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.value;
    for (auto& p : store) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) fail_data("checkpoint lacks parameter '" + p.name + "'");
      if (it->second->shape() != p.value.shape())
        fail_data("checkpoint shape mismatch for '" + p.name + "': " +
                  shape_string(it->second->shape()) + " vs " + shape_string(p.value.shape()));
      p.value = it->second->template cast<T>();
    }
  }

 private:
  Model<T>& model_;
  TrainConfig config_;
  const std::vector<LabeledCloud>& train_;
  const std::vector<LabeledCloud>& val_;
  PartTable parts_;
  SgdState<T> sgd_;
  AdamState<T> adam_;
  std::size_t next_epoch_ = 0;
  double best_metric_ = 0;
  bool improved_ = false;
  std::vector<StepRecord> steps_;
};

/// Runs the remaining epochs, writing the CSV log and last/best checkpoints
/// to `out_dir` when it is non-empty.
template <typename T>
std::vector<EpochLog> train_loop(Trainer<T>& trainer, const std::filesystem::path& out_dir,
                                 const std::function<void(const EpochLog&)>& on_epoch = {}) {
  std::vector<EpochLog> logs;
  std::optional<std::ofstream> csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto path = out_dir / "train_log.csv";
    const bool fresh = trainer.next_epoch() == 0 || !std::filesystem::exists(path);
    csv.emplace(path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) *csv << EpochLog::kHeader << "\n";
  }
  while (!trainer.finished()) {
    logs.push_back(trainer.run_epoch());
    if (csv) {
      *csv << logs.back().line() << "\n";
      csv->flush();
      const auto state = trainer.state();
      save_checkpoint(out_dir / "last.ckpt", state);
      if (trainer.improved()) save_checkpoint(out_dir / "best.ckpt", state);
    }
    if (on_epoch) on_epoch(logs.back());
  }
  return logs;
}

}  // namespace drnet
