#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "drnet/geometry.hpp"

using namespace drnet;

namespace {

Tensor<double> random_cloud(std::uint64_t seed, std::size_t n, std::size_t c = 3) {
  return rng_uniform<double>(seed, -1.0, 1.0, {n, c});
}

double direct_sq(const Tensor<double>& p, std::size_t i, std::size_t j) {
  double s = 0;
  for (std::size_t k = 0; k < p.cols(); ++k) s += (p(i, k) - p(j, k)) * (p(i, k) - p(j, k));
  return s;
}

}  // namespace

TEST(PairwiseDistances, UnitSeparation) {
  Tensor<double> p({2, 3});
  p(1, 0) = 1.0;
  auto e = pairwise_sq_distances(p);
  EXPECT_EQ(e(0, 0), 0.0);
  EXPECT_EQ(e(0, 1), 1.0);
  EXPECT_EQ(e(1, 0), 1.0);
}

TEST(PairwiseDistances, CoincidentRowsGiveZero) {
  Tensor<double> p({3, 3});
  p(0, 0) = p(2, 0) = 0.3;
  p(0, 2) = p(2, 2) = -0.7;
  p(1, 1) = 2.0;
  auto e = pairwise_sq_distances(p);
  EXPECT_EQ(e(0, 2), 0.0);
  EXPECT_EQ(e(2, 0), 0.0);
}

TEST(PairwiseDistances, MatchesDoubleLoop) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto p = random_cloud(s, 32);
    auto e = pairwise_sq_distances(p);
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j) EXPECT_NEAR(e(i, j), direct_sq(p, i, j), 1e-6);
  }
}

TEST(PairwiseDistances, SymmetricNonNegativeZeroDiagonal) {
  auto p = rng_uniform<float>(5, -50.0f, 50.0f, {40, 6});
  auto e = pairwise_sq_distances(p);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(e(i, i), 0.0f);
    for (std::size_t j = 0; j < 40; ++j) {
      EXPECT_EQ(e(i, j), e(j, i));
      EXPECT_GE(e(i, j), 0.0f);
    }
  }
}

TEST(CandidateSearch, WidthAndErrors) {
  auto p = random_cloud(1, 100);
  auto cs = candidate_search(p, 20, 5);
  EXPECT_EQ(cs.width(), 100u);
  EXPECT_THROW(candidate_search(random_cloud(1, 10), 4, 3), Error);
}

TEST(CandidateSearch, Invariants) {
  auto p = random_cloud(2, 30);
  auto cs = candidate_search(p, 4, 3);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_EQ(cs.indices(i, 0), Index(i));
    EXPECT_EQ(cs.metrics(i, 0), 0.0);
    for (std::size_t j = 1; j < 12; ++j) EXPECT_LE(cs.metrics(i, j - 1), cs.metrics(i, j));
    for (std::size_t j = 0; j < 12; ++j) {
      EXPECT_GE(cs.indices(i, j), 0);
      EXPECT_LT(cs.indices(i, j), 30);
    }
  }
}

// Oracle: stable sort of the full distance row.
TEST(CandidateSearch, MatchesFullStableSort) {
  // Integer grid coordinates produce many exact ties.
  Tensor<double> p({27, 3});
  for (std::size_t i = 0; i < 27; ++i) {
    p(i, 0) = double(i % 3);
    p(i, 1) = double(i / 3 % 3);
    p(i, 2) = double(i / 9);
  }
  auto cs = candidate_search(p, 5, 2);
  for (std::size_t i = 0; i < 27; ++i) {
    std::vector<Index> order(27);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return direct_sq(p, i, std::size_t(a)) < direct_sq(p, i, std::size_t(b));
    });
    for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(cs.indices(i, j), order[j]);
  }
}

TEST(Knn, FirstColumnIsSelf) {
  auto p = random_cloud(3, 16);
  auto nn = knn(p, 4);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(nn(i, 0), Index(i));
  EXPECT_THROW(knn(p, 17), Error);
}

TEST(Fps, DistinctIndicesAndSeed) {
  auto p = random_cloud(4, 50);
  auto idx = farthest_point_sampling(p, 20);
  std::set<Index> unique(idx.values().begin(), idx.values().end());
  EXPECT_EQ(unique.size(), 20u);
  EXPECT_THROW(farthest_point_sampling(p, 51), Error);
}

TEST(Fps, LineExample) {
  // Points on a line at 0, 1, 2, 3, 10: centroid 3.2, so the seed is 10,
  // then 0, then 3.
  Tensor<double> p({5, 3});
  const double xs[] = {0, 1, 2, 3, 10};
  for (std::size_t i = 0; i < 5; ++i) p(i, 0) = xs[i];
  auto idx = farthest_point_sampling(p, 3);
  EXPECT_EQ(idx[0], 4);
  EXPECT_EQ(idx[1], 0);
  EXPECT_EQ(idx[2], 3);  // x=3 is 3 away from the picked set, x=2 only 2
}

// Oracle: naive max-min recomputation from scratch at every step.
TEST(Fps, MatchesNaiveMaxMin) {
  auto p = random_cloud(6, 40);
  auto idx = farthest_point_sampling(p, 12);
  std::vector<std::size_t> chosen{std::size_t(idx[0])};
  for (std::size_t s = 1; s < 12; ++s) {
    std::size_t best = 0;
    double far = -1;
    for (std::size_t i = 0; i < 40; ++i) {
      double near = 1e300;
      for (std::size_t c : chosen) near = std::min(near, direct_sq(p, i, c));
      if (near > far) {
        far = near;
        best = i;
      }
    }
    EXPECT_EQ(idx[s], Index(best));
    chosen.push_back(best);
  }
}

TEST(Fps, SeedIndependentOfOrder) {
  auto p = random_cloud(7, 32);
  auto a = farthest_point_sampling(p, 8);
  std::vector<Index> perm(32);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(1);
  rng.shuffle(perm.begin(), perm.end());
  auto q = gather_rows(p, std::span<const Index>(perm));
  auto b = farthest_point_sampling(q, 8);
  for (std::size_t s = 0; s < 8; ++s) EXPECT_EQ(perm[std::size_t(b[s])], a[s]);
}

TEST(FeaturePropagation, CoincidentPointCopiesFeature) {
  Tensor<double> coarse({3, 3});
  coarse(1, 0) = 1;
  coarse(2, 1) = 1;
  Tensor<double> feats({3, 2});
  for (std::size_t i = 0; i < 6; ++i) feats[i] = double(i + 1);
  Tensor<double> fine = slice_rows(coarse, 1, 1);
  auto out = feature_propagation(coarse, fine, feats);
  EXPECT_NEAR(out(0, 0), 3.0, 1e-7);
  EXPECT_NEAR(out(0, 1), 4.0, 1e-7);
}

// Oracle: explicit inverse-distance blend over the three nearest.
TEST(FeaturePropagation, MatchesExplicitBlend) {
  auto coarse = random_cloud(8, 6);
  auto fine = random_cloud(9, 10);
  auto feats = random_cloud(10, 6, 4);
  auto out = feature_propagation(coarse, fine, feats);
  for (std::size_t i = 0; i < 10; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += (fine(i, k) - coarse(j, k)) * (fine(i, k) - coarse(j, k));
      d.push_back({s, j});
    }
    std::sort(d.begin(), d.end());
    double wsum = 0;
    for (int j = 0; j < 3; ++j) wsum += 1.0 / (d[j].first + 1e-8);
    for (std::size_t ch = 0; ch < 4; ++ch) {
      double v = 0;
      for (int j = 0; j < 3; ++j) v += feats(d[j].second, ch) / (d[j].first + 1e-8) / wsum;
      EXPECT_NEAR(out(i, ch), v, 1e-12);
    }
  }
}

TEST(FeaturePropagation, FewerThanThreeCoarsePoints) {
  auto coarse = random_cloud(11, 2);
  auto fine = random_cloud(12, 5);
  Tensor<double> feats({2, 1}, 2.5);
  auto out = feature_propagation(coarse, fine, feats);
  for (double v : out.values()) EXPECT_NEAR(v, 2.5, 1e-12);
}
