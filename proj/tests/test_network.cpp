#include <gtest/gtest.h>

#include <numeric>

#include "drnet/gradcheck.hpp"
#include "drnet/network.hpp"

using namespace drnet;

namespace {

ModelConfig small_config(Task task) {
  ModelConfig cfg;
  cfg.task = task;
  cfg.k = 4;
  cfg.d_max = 3;
  cfg.fr_widths = {8, 8, 12, 16};
  cfg.embed = 16;
  cfg.mr_mid = 8;
  cfg.mr_low = 12;
  cfg.k_mr = 6;
  cfg.cls_hidden = {12, 10};
  cfg.seg_hidden = {12, 10};
  return cfg;
}

Tensor<float> permute(const Tensor<float>& x, const std::vector<Index>& perm) {
  return gather_rows(x, std::span<const Index>(perm));
}

}  // namespace

TEST(PaddingMap, MultipleOfSixteen) {
  EXPECT_EQ(padding_map(64).size(), 64u);
  auto m = padding_map(40);
  ASSERT_EQ(m.size(), 48u);
  for (std::size_t j = 0; j < 40; ++j) EXPECT_EQ(m[j], Index(j));
  // Eight extra rows repeat the final eight points.
  for (std::size_t j = 40; j < 48; ++j) EXPECT_EQ(m[j], Index(32 + j - 40));
  auto tiny = padding_map(5);
  ASSERT_EQ(tiny.size(), 16u);
  for (Index v : tiny) EXPECT_LT(v, 5);
}

TEST(Model, DeskShapesAndLosses) {
  ModelConfig cfg;  // desk widths: e = 256
  Model<float> model(cfg, 1);
  Batch<float> b;
  b.clouds = 2;
  b.points = 64;
  b.coords = rng_uniform<float>(3, -1.0f, 1.0f, {128, 3});
  b.labels = {0, 1};
  auto out = model.forward(b, true);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 4}));
  for (float l : out.em_losses) EXPECT_GE(l, 0.0f);
  auto fr = model.fr().forward(b.coords, 2, 64, false);
  EXPECT_EQ(fr.features.shape(), (Shape{128, 256}));
}

TEST(Model, RejectsTooSmallClouds) {
  Model<float> model(small_config(Task::classification), 1);
  Batch<float> b;
  b.clouds = 1;
  b.points = 10;
  b.coords = Tensor<float>({10, 3});
  EXPECT_THROW(model.forward(b, false), Error);
}

TEST(Model, SegmentationOutputsPerPoint) {
  Model<float> model(small_config(Task::segmentation), 2);
  auto coords = rng_uniform<float>(4, -1.0f, 1.0f, {40, 3});  // exercises padding
  auto logits = segment(coords, 1, model);
  EXPECT_EQ(logits.shape(), (Shape{40, 5}));
  EXPECT_TRUE(logits.all_finite());
  EXPECT_THROW(segment(coords, 7, model), Error);
}

TEST(Model, SameSeedSameParameters) {
  Model<float> a(small_config(Task::classification), 9), b(small_config(Task::classification), 9);
  auto ia = a.params().begin();
  for (auto& p : b.params()) EXPECT_EQ((ia++)->value, p.value) << p.name;
}

TEST(Model, PermutationProperties) {
  auto cls_cfg = small_config(Task::classification);
  auto seg_cfg = small_config(Task::segmentation);
  Model<float> cls(cls_cfg, 5), seg(seg_cfg, 6);
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto coords = rng_uniform<float>(s + 20, -1.0f, 1.0f, {32, 3});
    std::vector<Index> perm(32);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(s);
    rng.shuffle(perm.begin(), perm.end());
    const auto moved = permute(coords, perm);

    auto a = classify(coords, cls), b = classify(moved, cls);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);

    auto sa = segment(coords, 0, seg), sb = segment(moved, 0, seg);
    EXPECT_EQ(permute(sa, perm), sb);
  }
}

TEST(Loss, CrossEntropyHandValue) {
  Tensor<double> logits({1, 2});  // uniform logits: log 2
  const std::vector<Index> t{1};
  EXPECT_NEAR(cross_entropy(logits, std::span<const Index>(t)).value, std::log(2.0), 1e-15);
  const std::vector<Index> bad{2};
  EXPECT_THROW(cross_entropy(logits, std::span<const Index>(bad)), Error);
}

TEST(Loss, Composition) {
  Tensor<double> logits({1, 3});
  logits[0] = 0.5;
  const std::vector<Index> t{0};
  const std::array<double, kEmModules> er{1.0, 2.0, 3.0, 4.0};
  auto l = total_loss(logits, std::span<const Index>(t), er);
  EXPECT_NEAR(l.total, l.ce + 0.1 * 1.0 + 0.01 * (2.0 + 3.0 + 4.0), 1e-15);
  auto none = total_loss(logits, std::span<const Index>(t), er, LossWeights::none());
  EXPECT_EQ(none.total, none.ce);
}

TEST(MergeGate, ScalesByGlobalGate) {
  Tensor<double> fr({4, 2}, 2.0), scale({2, 2});
  scale(0, 0) = 0.5;
  scale(0, 1) = 0.25;
  scale(1, 0) = 1.0;
  auto out = MergeGate<double>::apply(fr, scale, 2);
  EXPECT_EQ(out(1, 0), 1.0);
  EXPECT_EQ(out(1, 1), 0.5);
  EXPECT_EQ(out(3, 0), 2.0);
  EXPECT_EQ(out(3, 1), 0.0);
}

TEST(Gradients, MergeGate) {
  GradcheckSuite suite;
  suite.check_merge_gate();
  for (const auto& r : suite.results()) EXPECT_TRUE(r.passed) << r.name << " " << r.error;
}

TEST(Gradients, CrossEntropy) {
  GradcheckSuite suite;
  suite.check_cross_entropy();
  for (const auto& r : suite.results()) EXPECT_TRUE(r.passed) << r.name << " " << r.error;
}

TEST(Gradients, FullNetwork) {
  GradcheckSuite suite;
  suite.check_network(Task::classification);
  suite.check_network(Task::segmentation);
  EXPECT_GT(suite.results().size(), 100u);
  for (const auto& r : suite.results()) EXPECT_TRUE(r.passed) << r.name << " " << r.error;
}
