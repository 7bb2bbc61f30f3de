#pragma once

// Synthetic shape datasets, normalization, the plain-text cloud and manifest
// formats and the binary checkpoint container.

#include <bit>
#include <cmath>
#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "drnet/numerics.hpp"

namespace drnet {

struct LabeledCloud {
  Tensor<float> coords;            // N x 3
  std::optional<Index> cloud_label;
  std::vector<Index> point_labels; // empty or N entries
  std::optional<Index> category;

  std::size_t size() const { return coords.rows(); }
};

/// Part ids owned by each object category.
using PartTable = std::vector<std::vector<Index>>;

// ---------------------------------------------------------------------------
// Normalization and primitive samplers
// ---------------------------------------------------------------------------

/// Centers on the centroid and scales so the farthest point has norm 1.
template <typename T>
Tensor<T> normalize(const Tensor<T>& coords) {
  const std::size_t n = coords.rows();
  Tensor<T> out = coords;
  double centroid[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 3; ++k) centroid[k] += double(coords(i, k));
  for (double& c : centroid) c /= double(n);
  double max_norm = 0;
  std::vector<double> shifted(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      shifted[i * 3 + k] = double(coords(i, k)) - centroid[k];
      s += shifted[i * 3 + k] * shifted[i * 3 + k];
    }
    max_norm = std::max(max_norm, std::sqrt(s));
  }
  const double scale = max_norm > 0 ? 1.0 / max_norm : 0.0;
  for (std::size_t i = 0; i < n * 3; ++i) out[i] = T(shifted[i] * scale);
  return out;
}

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

namespace shapes {

inline Vec3 sphere(Rng& rng, double radius, Vec3 center = {}) {
  double x, y, z, n;
  do {
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
    n = std::sqrt(x * x + y * y + z * z);
  } while (n < 1e-12);
  return {center.x + radius * x / n, center.y + radius * y / n, center.z + radius * z / n};
}

/// Surface of an axis-aligned box; faces chosen in proportion to their area.
inline Vec3 box(Rng& rng, Vec3 half, Vec3 center = {}) {
  const double axy = half.x * half.y, axz = half.x * half.z, ayz = half.y * half.z;
  const double pick = rng.unit() * (axy + axz + ayz);
  const double sign = rng.unit() < 0.5 ? -1.0 : 1.0;
  const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
  Vec3 p;
  if (pick < axy)
    p = {u * half.x, v * half.y, sign * half.z};
  else if (pick < axy + axz)
    p = {u * half.x, sign * half.y, v * half.z};
  else
    p = {sign * half.x, u * half.y, v * half.z};
  return {center.x + p.x, center.y + p.y, center.z + p.z};
}

/// Cylinder along z from z0 to z1; caps included when requested.
inline Vec3 cylinder(Rng& rng, double radius, double z0, double z1, bool caps) {
  const double side = 2 * M_PI * radius * (z1 - z0);
  const double cap = caps ? 2 * M_PI * radius * radius : 0.0;
  const double theta = rng.uniform(0.0, 2 * M_PI);
  if (rng.unit() * (side + cap) < side)
    return {radius * std::cos(theta), radius * std::sin(theta), rng.uniform(z0, z1)};
  const double r = radius * std::sqrt(rng.unit());
  return {r * std::cos(theta), r * std::sin(theta), rng.unit() < 0.5 ? z0 : z1};
}

/// Torus around z with major radius R and tube radius r, area-uniform.
inline Vec3 torus(Rng& rng, double major, double minor) {
  for (;;) {
    const double u = rng.uniform(0.0, 2 * M_PI), v = rng.uniform(0.0, 2 * M_PI);
    const double w = (major + minor * std::cos(v)) / (major + minor);
    if (rng.unit() <= w) {
      const double ring = major + minor * std::cos(v);
      return {ring * std::cos(u), ring * std::sin(u), minor * std::sin(v)};
    }
  }
}

inline Vec3 rotate_z(Vec3 p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

}  // namespace shapes

inline Tensor<float> to_tensor(const std::vector<Vec3>& pts) {
  Tensor<float> t({pts.size(), 3});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t(i, 0) = float(pts[i].x);
    t(i, 1) = float(pts[i].y);
    t(i, 2) = float(pts[i].z);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Classification data: sphere, cube, cylinder, torus
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& cls_class_names() {
  static const std::vector<std::string> names{"sphere", "cube", "cylinder", "torus"};
  return names;
}

inline LabeledCloud make_primitive(Rng& rng, Index label, std::size_t points) {
  std::vector<Vec3> pts(points);
  const double cyl_half = rng.uniform(0.75, 1.5);
  const double tube = rng.uniform(0.25, 0.45);
  for (auto& p : pts) {
    switch (label) {
      case 0: p = shapes::sphere(rng, 1.0); break;
      case 1: p = shapes::box(rng, {1, 1, 1}); break;
      case 2: p = shapes::cylinder(rng, 1.0, -cyl_half, cyl_half, true); break;
      default: p = shapes::torus(rng, 1.0, tube); break;
    }
  }
  const double angle = rng.uniform(0.0, 2 * M_PI);
  for (auto& p : pts) p = shapes::rotate_z(p, angle);
  LabeledCloud c;
  c.coords = normalize(to_tensor(pts));
  c.cloud_label = label;
  return c;
}

struct Split {
  std::vector<LabeledCloud> train;
  std::vector<LabeledCloud> test;
};

/// Clouds are interleaved by class. Each cloud has its own sub-stream, so
/// the dataset is a pure function of the seed.
inline Split gen_cls_dataset(std::uint64_t seed, std::size_t train_per_class,
                             std::size_t test_per_class, std::size_t points) {
  if (points < 32) fail_usage("synthetic clouds need at least 32 points");
  Split out;
  const std::size_t classes = cls_class_names().size();
  auto build = [&](std::size_t per_class, std::uint64_t tag, std::vector<LabeledCloud>& dst) {
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < classes; ++c) {
        Rng rng(derive_seed(seed, tag, i * classes + c));
        dst.push_back(make_primitive(rng, Index(c), points));
      }
  };
  build(train_per_class, 1, out.train);
  build(test_per_class, 2, out.test);
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation data: mallet (head, handle) and lamp (base, pole, shade)
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& seg_category_names() {
  static const std::vector<std::string> names{"mallet", "lamp"};
  return names;
}

inline const PartTable& seg_part_table() {
  static const PartTable table{{0, 1}, {2, 3, 4}};
  return table;
}

/// Configured share of points per part (before rounding to whole points).
struct PartShareRange {
  Index part;
  double lo, hi;
};

inline const std::vector<PartShareRange>& seg_part_shares() {
  // Lamp shade takes the remainder: between 0.4 and 0.6.
  static const std::vector<PartShareRange> shares{
      {0, 0.4, 0.6}, {2, 0.2, 0.3}, {3, 0.15, 0.25}};
  return shares;
}

inline LabeledCloud make_composite(Rng& rng, Index category, std::size_t points) {
  std::vector<Vec3> pts;
  std::vector<Index> labels;
  auto emit = [&](std::size_t count, Index part, auto&& sample) {
    for (std::size_t i = 0; i < count; ++i) {
      pts.push_back(sample());
      labels.push_back(part);
    }
  };
  if (category == 0) {
    const double handle = rng.uniform(1.2, 1.6);
    const Vec3 half{rng.uniform(0.45, 0.6), rng.uniform(0.2, 0.28), rng.uniform(0.2, 0.28)};
    const auto head_n = std::size_t(std::lround(rng.uniform(0.4, 0.6) * double(points)));
    emit(head_n, 0, [&] { return shapes::box(rng, half, {0, 0, handle + half.z}); });
    emit(points - head_n, 1, [&] { return shapes::cylinder(rng, 0.07, 0.0, handle, false); });
  } else {
    const double base_r = rng.uniform(0.4, 0.5), pole = rng.uniform(0.8, 1.2);
    const double shade_r = rng.uniform(0.25, 0.35);
    const auto base_n = std::size_t(std::lround(rng.uniform(0.2, 0.3) * double(points)));
    const auto pole_n = std::size_t(std::lround(rng.uniform(0.15, 0.25) * double(points)));
    emit(base_n, 2, [&] { return shapes::cylinder(rng, base_r, 0.0, 0.06, true); });
    emit(pole_n, 3, [&] { return shapes::cylinder(rng, 0.04, 0.06, 0.06 + pole, false); });
    emit(points - base_n - pole_n, 4,
         [&] { return shapes::sphere(rng, shade_r, {0, 0, 0.06 + pole + shade_r}); });
  }
  const double angle = rng.uniform(0.0, 2 * M_PI);
  for (auto& p : pts) p = shapes::rotate_z(p, angle);
  LabeledCloud c;
  c.coords = normalize(to_tensor(pts));
  c.point_labels = std::move(labels);
  c.category = category;
  return c;
}

/// Categories alternate mallet, lamp, mallet, ...
inline Split gen_seg_dataset(std::uint64_t seed, std::size_t train_shapes,
                             std::size_t test_shapes, std::size_t points) {
  if (points < 32) fail_usage("synthetic clouds need at least 32 points");
  Split out;
  for (std::size_t i = 0; i < train_shapes; ++i) {
    Rng rng(derive_seed(seed, 3, i));
    out.train.push_back(make_composite(rng, Index(i % 2), points));
  }
  for (std::size_t i = 0; i < test_shapes; ++i) {
    Rng rng(derive_seed(seed, 4, i));
    out.test.push_back(make_composite(rng, Index(i % 2), points));
  }
  return out;
}

/// Sphere surface whose point density falls linearly from 4 (x = -1) to 1
/// (x = +1). Returns the normalized cloud and each point's relative density.
inline std::pair<LabeledCloud, std::vector<double>> gen_density_gradient_cloud(
    std::uint64_t seed, std::size_t points) {
  Rng rng(derive_seed(seed, 5));
  std::vector<Vec3> pts;
  std::vector<double> density;
  while (pts.size() < points) {
    const Vec3 p = shapes::sphere(rng, 1.0);
    const double d = 4.0 - 1.5 * (p.x + 1.0);
    if (rng.unit() * 4.0 <= d) {
      pts.push_back(p);
      density.push_back(d);
    }
  }
  LabeledCloud c;
  c.coords = normalize(to_tensor(pts));
  return {std::move(c), std::move(density)};
}

// ---------------------------------------------------------------------------
// Cloud text files: one point per line, "x y z [label]"
// ---------------------------------------------------------------------------

inline void save_cloud(const std::filesystem::path& path, const LabeledCloud& cloud) {
  std::ofstream out(path);
  if (!out) fail_data("cannot write " + path.string());
  const bool labels = !cloud.point_labels.empty();
  char buf[128];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    int len = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", double(cloud.coords(i, 0)),
                            double(cloud.coords(i, 1)), double(cloud.coords(i, 2)));
    out.write(buf, len);
    if (labels) out << ' ' << cloud.point_labels[i];
    out << '\n';
  }
  if (!out) fail_data("failed writing " + path.string());
}

/// Parses a cloud file. Point labels, when present on every line, must lie in
/// [0, label_limit) if a limit is given.
inline LabeledCloud load_cloud(const std::filesystem::path& path,
                               std::optional<Index> label_limit = std::nullopt) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open cloud file " + path.string());
  std::vector<float> xyz;
  std::vector<Index> labels;
  std::string line;
  std::size_t line_no = 0;
  int columns = -1;
  auto bad = [&](const std::string& why) {
    fail_data(path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string t; ss >> t;) tok.push_back(t);
    if (tok.size() != 3 && tok.size() != 4) bad("expected 'x y z [label]'");
    if (columns == -1) columns = int(tok.size());
    if (int(tok.size()) != columns) bad("inconsistent column count");
    for (int k = 0; k < 3; ++k) {
      std::size_t used = 0;
      float v = 0;
      try {
        v = std::stof(tok[std::size_t(k)], &used);
      } catch (const std::exception&) {
        bad("malformed coordinate '" + tok[std::size_t(k)] + "'");
      }
      if (used != tok[std::size_t(k)].size() || !std::isfinite(v))
        bad("malformed coordinate '" + tok[std::size_t(k)] + "'");
      xyz.push_back(v);
    }
    if (columns == 4) {
      std::size_t used = 0;
      long v = 0;
      try {
        v = std::stol(tok[3], &used);
      } catch (const std::exception&) {
        bad("malformed label '" + tok[3] + "'");
      }
      if (used != tok[3].size()) bad("malformed label '" + tok[3] + "'");
      if (v < 0 || (label_limit && v >= *label_limit))
        bad("label " + tok[3] + " out of range");
      labels.push_back(Index(v));
    }
  }
  if (xyz.empty()) fail_data(path.string() + ": no points");
  LabeledCloud c;
  const std::size_t n = xyz.size() / 3;
  c.coords = Tensor<float>({n, 3}, std::move(xyz));
  c.point_labels = std::move(labels);
  return c;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string file;  // relative to the manifest directory
  std::string split; // "train" or "test"
  std::optional<Index> label;
  std::optional<Index> category;
};

struct DatasetManifest {
  std::string task;  // "cls" or "seg"
  std::vector<std::string> class_names;
  std::vector<std::string> category_names;
  PartTable parts;
  std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestHeader = "drnet-manifest 1";

/// Text layout:
///   drnet-manifest 1
///   task cls|seg
///   class <id> <name>
///   category <id> <name> <part ids...>
///   cloud <split> <file> <label|-> <category|->
inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) fail_data("cannot write " + path.string());
  out << kManifestHeader << "\n" << "task " << m.task << "\n";
  for (std::size_t i = 0; i < m.class_names.size(); ++i)
    out << "class " << i << ' ' << m.class_names[i] << "\n";
  for (std::size_t i = 0; i < m.category_names.size(); ++i) {
    out << "category " << i << ' ' << m.category_names[i];
    for (Index p : m.parts.at(i)) out << ' ' << p;
    out << "\n";
  }
  auto opt = [](const std::optional<Index>& v) {
    return v ? std::to_string(*v) : std::string("-");
  };
  for (const auto& e : m.entries)
    out << "cloud " << e.split << ' ' << e.file << ' ' << opt(e.label) << ' ' << opt(e.category)
        << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open manifest " + path.string());
  DatasetManifest m;
  std::string line;
  std::size_t line_no = 0;
  auto bad = [&](const std::string& why) {
    fail_data(path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  auto parse_opt = [&](const std::string& s) -> std::optional<Index> {
    if (s == "-") return std::nullopt;
    try {
      return Index(std::stol(s));
    } catch (const std::exception&) {
      bad("bad integer '" + s + "'");
    }
    return std::nullopt;
  };
  if (!std::getline(in, line) || line != kManifestHeader) bad("missing manifest header");
  ++line_no;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string kind;
    if (!(ss >> kind)) continue;
    if (kind == "task") {
      ss >> m.task;
    } else if (kind == "class") {
      std::size_t id;
      std::string name;
      if (!(ss >> id >> name) || id != m.class_names.size()) bad("bad class line");
      m.class_names.push_back(name);
    } else if (kind == "category") {
      std::size_t id;
      std::string name;
      if (!(ss >> id >> name) || id != m.category_names.size()) bad("bad category line");
      m.category_names.push_back(name);
      std::vector<Index> parts;
      for (Index p; ss >> p;) parts.push_back(p);
      m.parts.push_back(parts);
    } else if (kind == "cloud") {
      ManifestEntry e;
      std::string label, category;
      if (!(ss >> e.split >> e.file >> label >> category)) bad("bad cloud line");
      if (e.split != "train" && e.split != "test") bad("split must be train or test");
      e.label = parse_opt(label);
      e.category = parse_opt(category);
      if (e.label && (*e.label < 0 || std::size_t(*e.label) >= m.class_names.size()))
        bad("class label out of range");
      if (e.category && (*e.category < 0 || std::size_t(*e.category) >= m.category_names.size()))
        bad("category out of range");
      m.entries.push_back(e);
    } else {
      bad("unknown record '" + kind + "'");
    }
  }
  if (m.task != "cls" && m.task != "seg") fail_data(path.string() + ": task must be cls or seg");
  for (const auto& e : m.entries)
    if (!std::filesystem::exists(path.parent_path() / e.file))
      fail_data(path.string() + ": referenced file " + e.file + " does not exist");
  return m;
}

inline std::size_t part_count(const PartTable& parts) {
  Index top = -1;
  for (const auto& p : parts)
    for (Index id : p) top = std::max(top, id);
  return std::size_t(top + 1);
}

/// Writes every split cloud and a manifest into `dir`.
inline void write_dataset(const std::filesystem::path& dir, const DatasetManifest& header,
                          const Split& split) {
  std::filesystem::create_directories(dir / "train");
  std::filesystem::create_directories(dir / "test");
  DatasetManifest m = header;
  m.entries.clear();
  auto dump = [&](const std::vector<LabeledCloud>& clouds, const std::string& name) {
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      char file[64];
      std::snprintf(file, sizeof file, "%s/cloud_%05zu.txt", name.c_str(), i);
      save_cloud(dir / file, clouds[i]);
      m.entries.push_back({file, name, clouds[i].cloud_label, clouds[i].category});
    }
  };
  dump(split.train, "train");
  dump(split.test, "test");
  save_manifest(dir / "manifest.txt", m);
}

inline Split read_dataset(const std::filesystem::path& dir, DatasetManifest* manifest_out = nullptr) {
  const auto m = load_manifest(dir / "manifest.txt");
  const auto limit = m.task == "seg" ? std::optional<Index>(Index(part_count(m.parts)))
                                     : std::nullopt;
  Split out;
  for (const auto& e : m.entries) {
    LabeledCloud c = load_cloud(dir / e.file, limit);
    c.cloud_label = e.label;
    c.category = e.category;
    if (m.task == "cls" && !c.cloud_label) fail_data(e.file + ": classification cloud needs a label");
    if (m.task == "seg") {
      if (!c.category || c.point_labels.empty())
        fail_data(e.file + ": segmentation cloud needs a category and point labels");
      const auto& owned = m.parts.at(std::size_t(*c.category));
      for (Index l : c.point_labels)
        if (std::find(owned.begin(), owned.end(), l) == owned.end())
          fail_data(e.file + ": part " + std::to_string(l) + " not in its category");
    }
    (e.split == "train" ? out.train : out.test).push_back(std::move(c));
  }
  if (manifest_out) *manifest_out = m;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "DRNC", u32 version, u32 tensor count, then per tensor: u32 name length,
// UTF-8 name, u32 rank, u32 extents[rank], float32 values row-major. All
// integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'D', 'R', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) fail_data("checkpoint truncated reading " + what);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, std::uint32_t(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_u32(out, std::uint32_t(t.name.size()));
    out.write(t.name.data(), std::streamsize(t.name.size()));
    detail::put_u32(out, std::uint32_t(t.value.rank()));
    for (std::size_t e : t.value.shape()) detail::put_u32(out, std::uint32_t(e));
    for (float v : t.value.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) fail_data("failed writing checkpoint " + path.string());
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4)) fail_data("checkpoint truncated reading magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) fail_data("not a checkpoint (bad magic)");
  const auto version = detail::get_u32(in, "version");
  if (version != kCheckpointVersion)
    fail_data("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_u32(in, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = detail::get_u32(in, "name length");
    if (len > (1u << 16)) fail_data("checkpoint name length implausible");
    t.name.resize(len);
    if (!in.read(t.name.data(), len)) fail_data("checkpoint truncated reading name");
    const auto rank = detail::get_u32(in, "rank");
    if (rank > 8) fail_data("checkpoint rank implausible for " + t.name);
    Shape shape(rank);
    for (auto& e : shape) e = detail::get_u32(in, "extent");
    const std::size_t n = shape_size(shape);
    if (n > (std::size_t(1) << 30)) fail_data("checkpoint tensor " + t.name + " implausibly large");
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(detail::get_u32(in, "values of " + t.name));
    try {
      t.value = Tensor<float>(shape, std::move(data));
    } catch (const Error&) {
      fail_data("checkpoint tensor " + t.name + " has a zero extent");
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace drnet
