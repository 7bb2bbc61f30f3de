#pragma once

// Finite-difference verification of every differentiable component.
//
// Each check builds a small instance, draws a fixed random cotangent c and
// compares the analytic backward pass of L = <c, f(x)> against central
// differences of L, for the inputs and every parameter tensor.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "drnet/geometry.hpp"
#include "drnet/layers.hpp"
#include "drnet/network.hpp"
#include "drnet/numerics.hpp"

namespace drnet {

struct GradcheckResult {
  std::string name;
  double error = 0;  // normwise relative error
  bool passed = false;
};

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor: guards tensors whose gradient is (nearly) zero.
  double floor = 1e-6;
  std::uint64_t seed = 7;
};

/// max |a - n| / max(|a|_inf, |n|_inf, floor).
inline double relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric,
                             double floor) {
  if (analytic.size() != numeric.size()) fail_usage("relative_error: size mismatch");
  double diff = 0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

/// Small model used by the network-level checks: every width <= 6.
inline ModelConfig gradcheck_model_config(Task task) {
  ModelConfig cfg;
  cfg.task = task;
  cfg.k = 3;
  cfg.d_max = 2;
  cfg.fr_widths = {4, 4, 6, 6};
  cfg.embed = 6;
  cfg.mr_mid = 4;
  cfg.mr_low = 6;
  cfg.k_mr = 4;
  cfg.num_classes = 3;
  cfg.num_parts = 5;
  cfg.num_categories = 2;
  cfg.cls_hidden = {6, 5};
  cfg.seg_hidden = {6, 5};
  cfg.dropout = 0.0;
  // Finite differences cannot see a straight-through term; it is checked
  // separately by check_dilation_surrogate.
  cfg.dilation_surrogate = false;
  return cfg;
}

class GradcheckSuite {
 public:
  explicit GradcheckSuite(GradcheckOptions options = {}) : options_(options) {}

  const std::vector<GradcheckResult>& results() const { return results_; }
  bool all_passed() const {
    return std::all_of(results_.begin(), results_.end(), [](auto& r) { return r.passed; });
  }

  /// Central differences of `loss` taken by perturbing `x` in place. With
  /// kink probing on, a second pass at half the step flags any entry whose
  /// estimate moves: the loss is not smooth there at this scale.
  Tensor<double> numeric_gradient(Tensor<double>& x, const std::function<double()>& loss) {
    auto probe = [&](const Tensor<double>& moved) {
      const Tensor<double> saved = x;
      x = moved;
      const double v = loss();
      x = saved;
      return v;
    };
    const Tensor<double> start = x;
    auto g = finite_difference_gradient<double>(probe, start, options_.eps);
    if (probe_kinks_) {
      const auto half = finite_difference_gradient<double>(probe, start, options_.eps / 2);
      for (std::size_t i = 0; i < g.size(); ++i) {
        kink_diff_ = std::max(kink_diff_, std::abs(g[i] - half[i]));
        kink_scale_ = std::max({kink_scale_, std::abs(g[i]), std::abs(half[i])});
      }
    }
    return g;
  }

  void compare(const std::string& name, Tensor<double>& x, const Tensor<double>& analytic,
               const std::function<double()>& loss) {
    const auto numeric = numeric_gradient(x, loss);
    const double err = relative_error(analytic, numeric, options_.floor);
    results_.push_back({name, err, err < options_.tolerance});
  }

  /// Checks every trainable parameter in `store` against `loss`.
  /// `grads` must hold the analytic gradients accumulated by one backward.
  /// The error scale is shared by the whole store, so a tensor whose true
  /// gradient vanishes (a bias ahead of batch norm) is judged against the
  /// layer's gradient magnitude rather than its own rounding noise.
  void compare_params(const std::string& prefix, ParamStore<double>& store,
                      const std::vector<Tensor<double>>& grads,
                      const std::function<double()>& loss) {
    std::vector<std::pair<std::string, double>> diffs;
    double scale = options_.floor;
    std::size_t slot = 0;
    for (auto& p : store) {
      if (!p.trainable) continue;
      const auto& analytic = grads[slot++];
      const auto numeric = numeric_gradient(p.value, loss);
      double diff = 0;
      for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
      }
      diffs.emplace_back(prefix + ":" + p.name, diff);
    }
    for (const auto& [name, diff] : diffs)
      results_.push_back({name, diff / scale, diff / scale < options_.tolerance});
  }

  void run_all() {
    check_batch_norm();
    check_mlp();
    check_graph_encode();
    check_max_pool();
    check_back_projection();
    check_error_loss();
    check_feature_propagation();
    check_dilation_head();
    check_em_module();
    check_merge_gate();
    check_cross_entropy();
    check_network(Task::classification);
    check_network(Task::segmentation);
    check_dilation_surrogate();
  }

  // -- individual checks ----------------------------------------------------

  void check_batch_norm() {
    ParamStore<double> store;
    BatchNorm<double> bn(store, "bn", 4);
    Rng rng(derive_seed(options_.seed, 1));
    randomize(store, rng);
    Tensor<double> x = random({6, 4}, rng);
    const Tensor<double> c = random({6, 4}, rng);
    auto loss = [&] { return dot(bn.forward(x, true), c); };
    loss();
    store.zero_grad();
    const Tensor<double> dx = bn.backward(c);
    const auto grads = snapshot(store);
    compare("batch_norm:input", x, dx, loss);
    compare_params("batch_norm", store, grads, loss);
  }

  void check_mlp() {
    for (Activation act : {Activation::leaky_relu, Activation::relu, Activation::sigmoid}) {
      for (bool bn : {true, false}) {
        ParamStore<double> store;
        Rng rng(derive_seed(options_.seed, 2, std::uint64_t(act) * 2 + bn));
        MlpLayer<double> mlp(store, "mlp", MlpSpec{5, 4, bn, act}, rng);
        randomize(store, rng);
        Tensor<double> x = random({7, 5}, rng);
        const Tensor<double> c = random({7, 4}, rng);
        auto loss = [&] { return dot(mlp.forward(x, true), c); };
        loss();
        store.zero_grad();
        const Tensor<double> dx = mlp.backward(c);
        const auto grads = snapshot(store);
        const std::string tag = std::string("mlp[") + activation_name(act) +
                                (bn ? ",bn]" : "]");
        compare(tag + ":input", x, dx, loss);
        compare_params(tag, store, grads, loss);
      }
    }
  }

  void check_graph_encode() {
    Rng rng(derive_seed(options_.seed, 3));
    Tensor<double> p = random({8, 3}, rng);
    const auto neighbors = knn(p, 3);
    const Tensor<double> c = random({8, 3, 6}, rng);
    auto loss = [&] { return dot(graph_encode(p, neighbors), c); };
    const Tensor<double> dp = graph_encode_backward(c, neighbors, 3);
    compare("graph_encode:input", p, dp, loss);
  }

  void check_max_pool() {
    Rng rng(derive_seed(options_.seed, 4));
    Tensor<double> g = random({5, 3, 4}, rng);
    const Tensor<double> c = random({5, 4}, rng);
    auto loss = [&] { return dot(max_pool_neighbors(g).values, c); };
    const auto pooled = max_pool_neighbors(g);
    const Tensor<double> dg = max_pool_neighbors_backward(c, pooled.argmax, 3);
    compare("max_pool:input", g, dg, loss);
  }

  void check_back_projection() {
    ParamStore<double> store;
    Rng rng(derive_seed(options_.seed, 5));
    BackProjection<double> bp(store, "bp", 3, 4, 5, rng);
    randomize(store, rng);
    Tensor<double> g = random({6, 3, 4}, rng);
    const Tensor<double> c = random({6, 5}, rng);
    auto loss = [&] { return dot(bp.forward(g, true), c); };
    loss();
    store.zero_grad();
    const Tensor<double> dg = bp.backward(c);
    const auto grads = snapshot(store);
    compare("back_projection:input", g, dg, loss);
    compare_params("back_projection", store, grads, loss);
  }

  void check_error_loss() {
    Rng rng(derive_seed(options_.seed, 6));
    Tensor<double> fb = random({6, 4}, rng);
    Tensor<double> p = random({6, 4}, rng);
    const double w = 0.7;
    auto loss = [&] { return w * error_loss(fb, p); };
    const Tensor<double> dfb = error_loss_backward(fb, p, w);
    Tensor<double> dp = dfb;
    for (auto& v : dp.values()) v = -v;
    compare("error_loss:back_projected", fb, dfb, loss);
    compare("error_loss:target", p, dp, loss);
  }

  void check_feature_propagation() {
    Rng rng(derive_seed(options_.seed, 7));
    Tensor<double> coarse = random({4, 3}, rng);
    Tensor<double> fine = random({8, 3}, rng);
    Tensor<double> feats = random({4, 5}, rng);
    const Tensor<double> c = random({8, 5}, rng);
    auto loss = [&] { return dot(feature_propagation(coarse, fine, feats), c); };
    const auto plan = plan_propagation(coarse, fine);
    const Tensor<double> out = propagate(plan, feats);
    Tensor<double> d_feats({4, 5}), d_coarse({4, 3}), d_fine({8, 3});
    propagate_backward(plan, coarse, fine, feats, out, c, d_feats, &d_coarse, &d_fine);
    compare("feature_propagation:features", feats, d_feats, loss);
    compare("feature_propagation:coarse_coords", coarse, d_coarse, loss);
    compare("feature_propagation:fine_coords", fine, d_fine, loss);
  }

  void check_dilation_head() {
    for (bool relu : {false, true}) {
      ParamStore<double> store;
      Rng rng(derive_seed(options_.seed, 8, relu));
      DilationHead<double> head(store, "head", 3, 2, rng, DilationHeadOptions{relu, false});
      randomize(store, rng);
      const Tensor<double> metrics = random({7, 6}, rng);
      const Tensor<double> c = random({7}, rng);
      auto loss = [&] { return dot(head.forward(metrics), c); };
      loss();
      store.zero_grad();
      head.backward(c);
      compare_params(relu ? "dilation_head[relu]" : "dilation_head", store, snapshot(store), loss);
    }
  }

  void check_em_module() {
    ParamStore<double> store;
    Rng rng(derive_seed(options_.seed, 9));
    EmConfig cfg;
    cfg.c_in = 3;
    cfg.c_out = 5;
    cfg.k = 3;
    cfg.d_max = 2;
    cfg.dilation_surrogate = false;
    EmModule<double> em(store, "em", cfg, rng);
    randomize(store, rng);
    Tensor<double> p = random({16, 3}, rng);  // two clouds of 8
    const Tensor<double> c = random({16, 5}, rng);
    const double w = 0.3;
    auto loss = [&] {
      const auto out = em.forward(p, 2, 8, true);
      return dot(out.features, c) + w * out.error_loss;
    };
    loss();
    store.zero_grad();
    const Tensor<double> dp = em.backward(c, w);
    const auto grads = snapshot(store);
    compare("em_module:input", p, dp, loss);
    compare_params("em_module", store, grads, loss);
  }

  void check_merge_gate() {
    ParamStore<double> store;
    Rng rng(derive_seed(options_.seed, 10));
    MergeGate<double> gate(store, 4, 5, rng);
    randomize(store, rng);
    Tensor<double> fr = random({12, 5}, rng);
    Tensor<double> mr = random({12, 4}, rng);
    const Tensor<double> c = random({12, 5}, rng);
    auto loss = [&] { return dot(gate.forward(fr, mr, 2, 6, true), c); };
    loss();
    store.zero_grad();
    auto [d_fr, d_mr] = gate.backward(c);
    const auto grads = snapshot(store);
    compare("merge_gate:fr", fr, d_fr, loss);
    compare("merge_gate:mr", mr, d_mr, loss);
    compare_params("merge_gate", store, grads, loss);
  }

  void check_cross_entropy() {
    Rng rng(derive_seed(options_.seed, 11));
    Tensor<double> logits = random({5, 4}, rng);
    const std::vector<Index> targets{0, 3, 1, 1, 2};
    auto loss = [&] { return cross_entropy(logits, std::span<const Index>(targets)).value; };
    const auto ce = cross_entropy(logits, std::span<const Index>(targets));
    compare("cross_entropy:logits", logits, ce.d_logits, loss);
  }

  /// Full network: CE plus weighted error losses, with respect to the input
  /// coordinates and every parameter.
  void check_network(Task task) {
    const std::string tag = task == Task::classification ? "network[cls]" : "network[seg]";
    // Grouping, dilation rounding and max pooling make the loss piecewise
    // smooth. A draw that sits within a step of a seam is replaced; the
    // attempt index is kept in the name.
    const auto saved = std::move(results_);
    for (std::uint64_t attempt = 0;; ++attempt) {
      results_.clear();
      probe_kinks_ = true;
      kink_diff_ = 0;
      kink_scale_ = options_.floor;
      network_attempt(task, tag + (attempt ? "#" + std::to_string(attempt) : ""), attempt);
      probe_kinks_ = false;
      if (kink_diff_ / kink_scale_ < options_.tolerance / 10 || attempt == 9) break;
    }
    auto mine = std::move(results_);
    results_ = saved;
    results_.insert(results_.end(), mine.begin(), mine.end());
  }

  void network_attempt(Task task, const std::string& tag, std::uint64_t attempt) {
    const auto cfg = gradcheck_model_config(task);
    Model<double> model(cfg, derive_seed(options_.seed, 12, std::uint64_t(task)));
    Rng rng(derive_seed(options_.seed, 13 + 256 * attempt, std::uint64_t(task)));
    randomize(model.params(), rng);
    Batch<double> batch;
    batch.clouds = 2;
    batch.points = 8;
    batch.coords = random({16, 3}, rng);
    if (task == Task::classification) {
      batch.labels = {0, 2};
    } else {
      batch.categories = {0, 1};
      for (std::size_t i = 0; i < 16; ++i)
        batch.part_labels.push_back(i < 8 ? Index(i % 2) : Index(2 + i % 3));
    }
    const LossWeights weights;
    auto loss = [&] {
      const auto fwd = model.forward(batch, true);
      return double(total_loss(fwd.logits, model.targets(batch), fwd.em_losses, weights).total);
    };
    const auto fwd = model.forward(batch, true);
    const auto ce = cross_entropy(fwd.logits, model.targets(batch));
    model.params().zero_grad();
    const Tensor<double> d_coords = model.backward(ce.d_logits, weights, true);
    const auto grads = snapshot(model.params());
    compare(tag + ":coords", batch.coords, d_coords, loss);
    compare_params(tag, model.params(), grads, loss);
  }

  /// The straight-through factor 1 + (gate - stopgrad(gate)) differentiates
  /// to the gate itself: the head gradient must equal that of sum_i a_i gate_i
  /// with a_i = <dF_i, F_i>.
  void check_dilation_surrogate() {
    ParamStore<double> store;
    Rng rng(derive_seed(options_.seed, 14));
    EmConfig cfg;
    cfg.c_in = 3;
    cfg.c_out = 4;
    cfg.k = 3;
    cfg.d_max = 2;
    cfg.dilation_surrogate = true;
    EmModule<double> em(store, "em", cfg, rng);
    randomize(store, rng);
    const Tensor<double> p = random({8, 3}, rng);
    const Tensor<double> c = random({8, 4}, rng);
    const auto out = em.forward(p, 1, 8, true);
    std::vector<double> a(8, 0.0);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t ch = 0; ch < 4; ++ch) a[i] += c(i, ch) * out.features(i, ch);
    const auto metrics = candidate_search(p, cfg.k, cfg.d_max).metrics;
    auto loss = [&] {
      const auto gate = dilation_from_logits(em.head().forward(metrics), cfg.d_max).gate;
      double s = 0;
      for (std::size_t i = 0; i < 8; ++i) s += a[i] * gate[i];
      return s;
    };
    store.zero_grad();
    em.backward(c, 0.0);
    for (auto& prm : store) {
      if (!prm.name.starts_with("em.dilation")) continue;
      const Tensor<double> analytic = prm.grad;
      compare("dilation_surrogate:" + prm.name, prm.value, analytic, loss);
    }
  }

 private:
  static double dot(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.size() != b.size()) fail_usage("gradcheck: cotangent size mismatch");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }

  static Tensor<double> random(Shape shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
    return t;
  }

  /// Non-trivial values for every parameter (including BN affine terms) so
  /// no gradient path is masked by zero biases or unit scales.
  static void randomize(ParamStore<double>& store, Rng& rng) {
    for (auto& p : store) {
      if (!p.trainable) continue;
      const bool scale = p.name.ends_with(".gamma");
      for (auto& v : p.value.values()) v = scale ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5);
    }
  }

  static std::vector<Tensor<double>> snapshot(const ParamStore<double>& store) {
    std::vector<Tensor<double>> out;
    for (const auto& p : store)
      if (p.trainable) out.push_back(p.grad);
    return out;
  }

  static const char* activation_name(Activation a) {
    switch (a) {
      case Activation::none: return "none";
      case Activation::relu: return "relu";
      case Activation::leaky_relu: return "leaky";
      case Activation::sigmoid: return "sigmoid";
    }
    return "?";
  }

  GradcheckOptions options_;
  std::vector<GradcheckResult> results_;
  bool probe_kinks_ = false;
  double kink_diff_ = 0, kink_scale_ = 0;
};

}  // namespace drnet
