#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "drnet/numerics.hpp"

using namespace drnet;

TEST(Tensor, ShapeAndSize) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_THROW(Tensor<float>({2, 0}), Error);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor<double> t({2, 3});
  for (std::size_t i = 0; i < 6; ++i) t[i] = double(i);
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r(2, 1), 5.0);
  EXPECT_THROW(t.reshape({4, 2}), Error);
}

TEST(Tensor, RowHelpersRoundTrip) {
  Tensor<double> t({4, 2});
  for (std::size_t i = 0; i < 8; ++i) t[i] = double(i);
  const std::vector<Index> idx{3, 0, 3};
  auto g = gather_rows(t, std::span<const Index>(idx));
  EXPECT_EQ(g(0, 0), 6.0);
  EXPECT_EQ(g(1, 1), 1.0);
  Tensor<double> acc({4, 2});
  scatter_add_rows(acc, g, std::span<const Index>(idx));
  EXPECT_EQ(acc(3, 0), 12.0);  // row 3 gathered twice
  EXPECT_EQ(acc(1, 0), 0.0);

  Tensor<double> a({2, 1}, 1.0), b({2, 3}, 2.0);
  const std::array<const Tensor<double>*, 2> ab{&a, &b};
  auto cat = concat_cols<double>(ab);
  EXPECT_EQ(cat.cols(), 4u);
  const std::array<std::size_t, 2> widths{1, 3};
  auto split = split_cols(cat, std::span<const std::size_t>(widths));
  EXPECT_EQ(split[0], a);
  EXPECT_EQ(split[1], b);
}

TEST(Rng, SameSeedSameStream) {
  auto a = rng_uniform<double>(1, 0.0, 1.0, {2});
  auto b = rng_uniform<double>(1, 0.0, 1.0, {2});
  EXPECT_EQ(a, b);
}

TEST(Rng, DifferentSeedsDiffer) {
  auto a = rng_uniform<double>(1, 0.0, 1.0, {4});
  auto b = rng_uniform<double>(2, 0.0, 1.0, {4});
  EXPECT_NE(a, b);
}

TEST(Rng, RangeIsHalfOpen) {
  auto t = rng_uniform<float>(9, 0.0f, 0.0001f, {1000});
  for (float v : t.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LT(v, 0.0001f);
  }
  EXPECT_THROW(rng_uniform<float>(1, 1.0f, 1.0f, {2}), Error);
  EXPECT_THROW(rng_uniform<float>(1, 0.0f, 1.0f, {0}), Error);
}

TEST(Rng, UnitMatchesStandardEngine) {
  // The stream is mt19937_64, whose output sequence the C++ standard fixes;
  // unit() keeps the top 53 bits.
  std::mt19937_64 ref(42);
  Rng rng(42);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(rng.unit(), double(ref() >> 11) * 0x1.0p-53);
  // 10000th output of the default-seeded engine, as required by the standard.
  std::mt19937_64 std_engine;
  std_engine.discard(9999);
  EXPECT_EQ(std_engine(), 9981545732273789042ull);
}

TEST(Init, GlorotBoundsAndZeroBias) {
  ParamStore<float> store;
  Rng rng(3);
  auto& w = store.add("w", {8, 4});
  init_glorot(w.value, 4, 8, rng);
  const float bound = std::sqrt(6.0f / 12.0f);
  for (float v : w.value.values()) EXPECT_LE(std::abs(v), bound);
  auto& b = store.add("b", {8});
  for (float v : b.value.values()) EXPECT_EQ(v, 0.0f);
}

TEST(ParamStore, InsertionOrderAndUniqueNames) {
  ParamStore<float> store;
  store.add("z", {1});
  store.add("a", {2});
  store.add("m", {3}, false);
  std::vector<std::string> names;
  for (const auto& p : store) names.push_back(p.name);
  EXPECT_EQ(names, (std::vector<std::string>{"z", "a", "m"}));
  EXPECT_THROW(store.add("a", {1}), Error);
  EXPECT_EQ(store.trainable_count(), 3u);  // scalars, not tensors
  EXPECT_EQ(store.at("a").grad.shape(), store.at("a").value.shape());
}

TEST(FiniteDifference, SumOfSquares) {
  Tensor<double> x({2});
  x[0] = 1;
  x[1] = 2;
  auto g = finite_difference_gradient<double>(
      [](const Tensor<double>& t) { return t[0] * t[0] + t[1] * t[1]; }, x);
  EXPECT_NEAR(g[0], 2.0, 1e-6);
  EXPECT_NEAR(g[1], 4.0, 1e-6);
}

TEST(FiniteDifference, ConstantHasZeroGradient) {
  Tensor<double> x({3}, 0.5);
  auto g = finite_difference_gradient<double>([](const Tensor<double>&) { return 7.0; }, x);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, NonFiniteIsAnError) {
  Tensor<double> x({1}, 0.0);
  EXPECT_THROW(finite_difference_gradient<double>(
                   [](const Tensor<double>& t) { return std::log(t[0]); }, x),
               Error);
}

TEST(Argsort, HandExamples) {
  Tensor<double> m({2, 3});
  const double v[] = {3, 1, 2, 0, 0, 5};
  std::copy(v, v + 6, m.data());
  auto s = argsort_rows_ascending(m);
  EXPECT_EQ(s(0, 0), 1);
  EXPECT_EQ(s(0, 1), 2);
  EXPECT_EQ(s(0, 2), 0);
  EXPECT_EQ(s(1, 0), 0);
  EXPECT_EQ(s(1, 1), 1);
  EXPECT_EQ(s(1, 2), 2);
}

// Oracle: repeated selection of the smallest (value, index) pair.
TEST(Argsort, MatchesSelectionSort) {
  Rng rng(11);
  Tensor<double> m({16, 16});
  for (auto& v : m.values()) v = double(rng.below(6));  // many ties
  const auto s = argsort_rows_ascending(m);
  for (std::size_t r = 0; r < 16; ++r) {
    std::vector<bool> used(16, false);
    for (std::size_t pos = 0; pos < 16; ++pos) {
      std::size_t best = 16;
      for (std::size_t j = 0; j < 16; ++j)
        if (!used[j] && (best == 16 || m(r, j) < m(r, best))) best = j;
      used[best] = true;
      EXPECT_EQ(s(r, pos), Index(best)) << "row " << r << " position " << pos;
    }
  }
}
