#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "drnet/data.hpp"

using namespace drnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

void expect_normalized(const Tensor<float>& c) {
  double m[3] = {0, 0, 0}, far = 0;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t k = 0; k < 3; ++k) m[k] += c(i, k);
  for (double& v : m) {
    v /= double(c.rows());
    EXPECT_NEAR(v, 0.0, 1e-6);
  }
  for (std::size_t i = 0; i < c.rows(); ++i)
    far = std::max(far, std::sqrt(double(c(i, 0)) * c(i, 0) + double(c(i, 1)) * c(i, 1) +
                                  double(c(i, 2)) * c(i, 2)));
  EXPECT_NEAR(far, 1.0, 1e-6);
}

}  // namespace

TEST(Normalize, SinglePointGoesToOrigin) {
  Tensor<double> p({1, 3}, 4.0);
  auto n = normalize(p);
  for (double v : n.values()) EXPECT_EQ(v, 0.0);
}

TEST(Normalize, IdempotentAndUnitRadius) {
  auto p = rng_uniform<double>(3, -5.0, 9.0, {50, 3});
  auto once = normalize(p);
  auto twice = normalize(once);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-7);
  expect_normalized(once.cast<float>());
}

TEST(ClsDataset, CountsLabelsAndNormalization) {
  auto d = gen_cls_dataset(1, 3, 2, 64);
  ASSERT_EQ(d.train.size(), 12u);
  ASSERT_EQ(d.test.size(), 8u);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    EXPECT_EQ(*d.train[i].cloud_label, Index(i % 4));
    EXPECT_EQ(d.train[i].size(), 64u);
    expect_normalized(d.train[i].coords);
  }
  EXPECT_THROW(gen_cls_dataset(1, 1, 1, 16), Error);
}

TEST(ClsDataset, PureFunctionOfSeed) {
  auto a = gen_cls_dataset(7, 2, 1, 40), b = gen_cls_dataset(7, 2, 1, 40);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].coords, b.train[i].coords);
  auto c = gen_cls_dataset(8, 2, 1, 40);
  EXPECT_NE(a.train[0].coords, c.train[0].coords);
}

TEST(ClsDataset, SpherePointsAreEquidistant) {
  // A centered sphere sample only shifts slightly under normalization, so
  // check the raw sampler instead.
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto p = shapes::sphere(rng, 1.0);
    EXPECT_NEAR(std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z), 1.0, 1e-12);
  }
}

TEST(SegDataset, LabelsBelongToCategory) {
  auto d = gen_seg_dataset(2, 10, 4, 64);
  const auto& parts = seg_part_table();
  for (const auto& c : d.train) {
    ASSERT_EQ(c.point_labels.size(), c.size());
    const auto& owned = parts[std::size_t(*c.category)];
    for (Index l : c.point_labels)
      EXPECT_NE(std::find(owned.begin(), owned.end(), l), owned.end());
    expect_normalized(c.coords);
  }
}

TEST(SegDataset, PartSharesWithinConfiguredRanges) {
  const std::size_t n = 200;
  auto d = gen_seg_dataset(4, 60, 0, n);
  for (const auto& c : d.train) {
    std::vector<std::size_t> count(5, 0);
    for (Index l : c.point_labels) ++count[std::size_t(l)];
    for (const auto& r : seg_part_shares()) {
      if (std::find(seg_part_table()[std::size_t(*c.category)].begin(),
                    seg_part_table()[std::size_t(*c.category)].end(),
                    r.part) == seg_part_table()[std::size_t(*c.category)].end())
        continue;
      const double share = double(count[std::size_t(r.part)]) / double(n);
      EXPECT_GE(share, r.lo - 0.5 / double(n));
      EXPECT_LE(share, r.hi + 0.5 / double(n));
    }
  }
}

TEST(DensityCloud, DenserOnNegativeX) {
  auto [cloud, density] = gen_density_gradient_cloud(3, 2000);
  ASSERT_EQ(cloud.size(), 2000u);
  // Density above 2.5 means the raw point had x < 0. The sphere is uniform in
  // x, so that half holds 3.25 of the 5 units of density mass.
  const auto neg = std::count_if(density.begin(), density.end(), [](double v) { return v > 2.5; });
  EXPECT_NEAR(double(neg) / 2000.0, 3.25 / 5.0, 0.04);
  // Normalization recenters, but denser points still sit further toward -x.
  double corr = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) corr += (density[i] - 2.5) * cloud.coords(i, 0);
  EXPECT_LT(corr, 0.0);
  for (double v : density) {
    EXPECT_GE(v, 1.0);
    EXPECT_LE(v, 4.0);
  }
}

TEST(CloudFile, RoundTripAtPrintedPrecision) {
  TempDir dir("drnet_cloud_rt");
  auto d = gen_seg_dataset(5, 1, 0, 40);
  save_cloud(dir.path / "c.txt", d.train[0]);
  auto back = load_cloud(dir.path / "c.txt", Index(5));
  EXPECT_EQ(back.coords, d.train[0].coords);
  EXPECT_EQ(back.point_labels, d.train[0].point_labels);
}

TEST(CloudFile, HandWrittenValues) {
  TempDir dir("drnet_cloud_hand");
  write_text(dir.path / "h.txt", "0.5 -1 2\n\n1e-3 0 0.25\n-7 8 9.75\n");
  auto c = load_cloud(dir.path / "h.txt");
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.coords(0, 0), 0.5f);
  EXPECT_EQ(c.coords(1, 0), 1e-3f);
  EXPECT_EQ(c.coords(2, 2), 9.75f);
  EXPECT_TRUE(c.point_labels.empty());
}

TEST(CloudFile, Errors) {
  TempDir dir("drnet_cloud_err");
  write_text(dir.path / "empty.txt", "");
  EXPECT_THROW(load_cloud(dir.path / "empty.txt"), Error);
  write_text(dir.path / "bad.txt", "0 0 0\n1 x 2\n");
  try {
    load_cloud(dir.path / "bad.txt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  write_text(dir.path / "label.txt", "0 0 0 7\n");
  EXPECT_THROW(load_cloud(dir.path / "label.txt", Index(5)), Error);
  EXPECT_THROW(load_cloud(dir.path / "missing.txt"), Error);
}

TEST(Manifest, DatasetRoundTrip) {
  TempDir dir("drnet_manifest");
  DatasetManifest header;
  header.task = "seg";
  header.category_names = seg_category_names();
  header.parts = seg_part_table();
  auto d = gen_seg_dataset(6, 4, 2, 48);
  write_dataset(dir.path, header, d);
  DatasetManifest m;
  auto back = read_dataset(dir.path, &m);
  ASSERT_EQ(back.train.size(), 4u);
  ASSERT_EQ(back.test.size(), 2u);
  EXPECT_EQ(m.parts, seg_part_table());
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.train[i].coords, d.train[i].coords);
    EXPECT_EQ(back.train[i].category, d.train[i].category);
  }
  fs::remove(dir.path / "train" / "cloud_00001.txt");
  EXPECT_THROW(read_dataset(dir.path), Error);
}

TEST(Checkpoint, BitwiseRoundTrip) {
  TempDir dir("drnet_ckpt");
  std::vector<NamedTensor> ts{{"a", rng_uniform<float>(1, -1.0f, 1.0f, {3, 4})},
                              {"b.c", Tensor<float>({1}, -0.0f)}};
  ts[0].value[2] = std::numeric_limits<float>::denorm_min();
  save_checkpoint(dir.path / "x.ckpt", ts);
  auto back = load_checkpoint(dir.path / "x.ckpt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a");
  EXPECT_EQ(back[0].value.shape(), (Shape{3, 4}));
  EXPECT_EQ(std::memcmp(back[0].value.data(), ts[0].value.data(), 48), 0);
  EXPECT_TRUE(std::signbit(back[1].value[0]));
}

TEST(Checkpoint, ExactByteLayout) {
  TempDir dir("drnet_ckpt_bytes");
  save_checkpoint(dir.path / "x.ckpt", {{"w", Tensor<float>({2}, 1.0f)}});
  std::ifstream in(dir.path / "x.ckpt", std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), {});
  const std::vector<unsigned char> expect{
      'D', 'R', 'N', 'C', 1, 0, 0, 0, 1, 0, 0, 0,  // magic, version, count
      1, 0, 0, 0, 'w',                            // name
      1, 0, 0, 0, 2, 0, 0, 0,                     // rank, extent
      0, 0, 0x80, 0x3f, 0, 0, 0x80, 0x3f};        // 1.0f twice
  EXPECT_EQ(b, expect);
}

TEST(Checkpoint, RejectsCorruption) {
  TempDir dir("drnet_ckpt_bad");
  save_checkpoint(dir.path / "x.ckpt", {{"w", Tensor<float>({4}, 1.0f)}});
  std::ifstream in(dir.path / "x.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});

  auto wrong = bytes;
  wrong[0] = 'X';
  write_text(dir.path / "magic.ckpt", wrong);
  EXPECT_THROW(load_checkpoint(dir.path / "magic.ckpt"), Error);

  auto version = bytes;
  version[4] = 2;
  write_text(dir.path / "version.ckpt", version);
  EXPECT_THROW(load_checkpoint(dir.path / "version.ckpt"), Error);

  write_text(dir.path / "short.ckpt", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(dir.path / "short.ckpt"), Error);
}
