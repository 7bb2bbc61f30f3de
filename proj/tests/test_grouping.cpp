#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "drnet/grouping.hpp"

using namespace drnet;

namespace {

// Brute force: full stable sort by squared distance, then stride-d picks.
IndexTensor oracle_dilated(const Tensor<double>& p, std::size_t k, std::size_t d) {
  const std::size_t n = p.rows();
  IndexTensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, Index>> all;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < p.cols(); ++c) s += (p(i, c) - p(j, c)) * (p(i, c) - p(j, c));
      all.push_back({s, Index(j)});
    }
    std::stable_sort(all.begin(), all.end(),
                     [](auto& a, auto& b) { return a.first < b.first; });
    for (std::size_t j = 0; j < k; ++j) out(i, j) = all[j * d].second;
  }
  return out;
}

void zero_head(ParamStore<double>& store) {
  for (auto& p : store) p.value.fill(0.0);
}

}  // namespace

TEST(Dilation, GateArithmetic) {
  Tensor<double> logits({3});
  logits[0] = 0.0;
  logits[1] = -40.0;
  logits[2] = 40.0;
  auto d = dilation_from_logits(logits, 5);
  EXPECT_EQ(d.gate[0], 3.0);
  EXPECT_EQ(d.factors[0], 3);
  EXPECT_EQ(d.factors[1], 1);
  EXPECT_EQ(d.factors[2], 5);
  EXPECT_NEAR(d.gate[2], 5.5, 1e-12);
}

TEST(Dilation, RoundingAndClamp) {
  EXPECT_EQ(dilation_from_gate(2.5, 5), 3);  // half away from zero
  EXPECT_EQ(dilation_from_gate(1.49, 5), 1);
  EXPECT_EQ(dilation_from_gate(0.6, 5), 1);
  EXPECT_EQ(dilation_from_gate(5.4, 5), 5);
  EXPECT_EQ(dilation_from_gate(5.5, 5), 5);  // rounds to 6, clamped
  EXPECT_EQ(dilation_from_gate(4.6, 2), 2);
}

TEST(Dilation, FactorsAlwaysInRange) {
  auto logits = rng_uniform<double>(3, -10.0, 10.0, {500});
  auto d = dilation_from_logits(logits, 5);
  for (Index f : d.factors.values()) {
    EXPECT_GE(f, 1);
    EXPECT_LE(f, 5);
  }
  for (double g : d.gate.values()) {
    EXPECT_GT(g, 0.5);
    EXPECT_LT(g, 5.5);
  }
}

TEST(DilatedSelect, DilationOneIsPlainKnn) {
  auto p = rng_uniform<double>(4, -1.0, 1.0, {20, 3});
  auto cs = candidate_search(p, 4, 2);
  auto sel = dilated_select(cs, uniform_dilation<double>(20, 1), 4);
  EXPECT_EQ(sel, knn(p, 4));
}

TEST(DilatedSelect, MatchesBruteForceForEveryFixedFactor) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const std::size_t n = 25 + std::size_t(s) * 2;
    auto p = rng_uniform<double>(s, -1.0, 1.0, {n, 3});
    const std::size_t k = 4;
    auto cs = candidate_search(p, k, 5);
    for (Index d = 1; d <= 5; ++d)
      EXPECT_EQ(dilated_select(cs, uniform_dilation<double>(n, d), k), oracle_dilated(p, k, std::size_t(d)))
          << "seed " << s << " d " << d;
  }
}

TEST(DilatedSelect, PerPointFactors) {
  auto p = rng_uniform<double>(5, -1.0, 1.0, {12, 3});
  auto cs = candidate_search(p, 3, 3);
  DilationVector<double> dil{IndexTensor({12}), Tensor<double>({12})};
  for (std::size_t i = 0; i < 12; ++i) dil.factors[i] = Index(1 + i % 3);
  auto sel = dilated_select(cs, dil, 3);
  for (std::size_t i = 0; i < 12; ++i) {
    auto ref = oracle_dilated(p, 3, std::size_t(dil.factors[i]));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(sel(i, j), ref(i, j));
  }
}

TEST(DilatedSelect, RejectsTooFewCandidates) {
  auto p = rng_uniform<double>(6, -1.0, 1.0, {12, 3});
  auto cs = candidate_search(p, 3, 2);
  EXPECT_THROW(dilated_select(cs, uniform_dilation<double>(12, 3), 3), Error);
}

TEST(DilationHead, RejectsOddWidth) {
  ParamStore<double> store;
  Rng rng(1);
  EXPECT_THROW(DilationHead<double>(store, "h", 3, 3, rng), Error);
}

TEST(DilationHead, ShapesOfParameters) {
  ParamStore<double> store;
  Rng rng(1);
  DilationHead<double> head(store, "h", 20, 5, rng);
  EXPECT_EQ(store.at("h.w1").value.shape(), (Shape{50, 100}));
  EXPECT_EQ(store.at("h.w2").value.shape(), (Shape{1, 50}));
}

TEST(Adpg, ZeroHeadMatchesUniformThree) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto p = rng_uniform<double>(s + 100, -1.0, 1.0, {40, 3});
    ParamStore<double> store;
    Rng rng(s);
    DilationHead<double> head(store, "h", 4, 5, rng);
    zero_head(store);
    auto g = adpg(p, 4, 5, head);
    for (double v : g.dilation.gate.values()) EXPECT_EQ(v, 3.0);
    EXPECT_EQ(g.neighbors, oracle_dilated(p, 4, 3));
  }
}

TEST(Adpg, NeighborsComeFromCandidates) {
  auto p = rng_uniform<double>(9, -1.0, 1.0, {30, 3});
  ParamStore<double> store;
  Rng rng(2);
  DilationHead<double> head(store, "h", 3, 4, rng);
  auto g = adpg(p, 3, 4, head);
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const Index* row = g.candidates.indices.row(i);
      EXPECT_NE(std::find(row, row + 12, g.neighbors(i, j)), row + 12);
    }
}
