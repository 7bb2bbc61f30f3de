#pragma once

// Flat `key = value` run configuration. `preset` and `task` are resolved
// first because they choose the defaults; every other key then overrides.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "drnet/error.hpp"
#include "drnet/network.hpp"
#include "drnet/trainer.hpp"

namespace drnet {

struct RunConfig {
  std::string preset = "desk";
  Task task = Task::classification;
  std::size_t points = 64;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t data_seed = 1;
  std::size_t train_per_class = 60;
  std::size_t test_per_class = 20;
  std::size_t train_shapes = 80;
  std::size_t test_shapes = 40;
  std::size_t votes = 1;
  std::string data_dir = "data";
  std::string out_dir = "run";
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v, std::uint64_t lo,
                                std::uint64_t hi) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size())
    fail_usage("config key '" + key + "' expects an integer, got '" + v + "'");
  if (out < lo || out > hi)
    fail_usage("config key '" + key + "' = " + v + " outside [" + std::to_string(lo) + ", " +
               std::to_string(hi) + "]");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v, double lo, double hi) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out))
    fail_usage("config key '" + key + "' expects a number, got '" + v + "'");
  if (out < lo || out > hi)
    fail_usage("config key '" + key + "' = " + v + " outside [" + std::to_string(lo) + ", " +
               std::to_string(hi) + "]");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  fail_usage("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_widths(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(std::size_t(parse_uint(key, trim(item), 1, 4096)));
  return out;
}

}  // namespace detail

/// Parses `key = value` lines; `#` starts a comment.
inline KeyValues parse_key_values(std::istream& in, const std::string& origin) {
  KeyValues out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail_usage(origin + ":" + std::to_string(no) + ": expected key = value");
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline KeyValues read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open config file " + path);
  return parse_key_values(in, path);
}

/// `key=value` from a command-line override.
inline std::pair<std::string, std::string> parse_override(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) fail_usage("--set expects key=value, got '" + s + "'");
  return {detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1))};
}

/// Defaults for a preset/task pair.
inline RunConfig preset_config(const std::string& preset, Task task) {
  RunConfig c;
  c.preset = preset;
  c.task = task;
  c.model.task = task;
  const bool cls = task == Task::classification;
  c.train.optimizer = cls ? OptimizerKind::sgd : OptimizerKind::adam;
  if (preset == "desk") {
    c.points = 64;
    c.model.k = 8;
    c.model.d_max = 5;
    c.model.embed = 256;
    c.model.mr_mid = 128;
    c.model.mr_low = 256;
    c.train.epochs = 100;
    c.train.batch = 8;
  } else if (preset == "paper") {
    c.points = cls ? 1024 : 2048;
    c.model.k = 20;
    c.model.d_max = 5;
    c.model.embed = 1024;
    c.model.mr_mid = 128;
    c.model.mr_low = 256;
    c.train.epochs = cls ? 300 : 200;
    c.train.batch = 32;
  } else {
    fail_usage("unknown preset '" + preset + "' (expected desk or paper)");
  }
  c.model.num_classes = cls_class_names().size();
  c.model.num_categories = seg_category_names().size();
  c.model.num_parts = part_count(seg_part_table());
  return c;
}

/// Builds a configuration from ordered key/value pairs; later pairs win.
inline RunConfig make_config(const KeyValues& kv) {
  std::string preset = "desk";
  Task task = Task::classification;
  for (const auto& [k, v] : kv) {
    if (k == "preset") preset = v;
    if (k == "task") {
      if (v == "cls") task = Task::classification;
      else if (v == "seg") task = Task::segmentation;
      else fail_usage("config key 'task' expects cls or seg, got '" + v + "'");
    }
  }
  RunConfig c = preset_config(preset, task);
  using namespace detail;
  for (const auto& [k, v] : kv) {
    if (k == "preset" || k == "task") continue;
    if (k == "points") c.points = parse_uint(k, v, 32, 1 << 16);
    else if (k == "k") c.model.k = parse_uint(k, v, 1, 64);
    else if (k == "d_max") c.model.d_max = parse_uint(k, v, 1, 16);
    else if (k == "embed_width") c.model.embed = parse_uint(k, v, 1, 4096);
    else if (k == "fr_widths") {
      const auto w = parse_widths(k, v);
      if (w.size() != kEmModules) fail_usage("fr_widths needs 4 comma-separated widths");
      std::copy(w.begin(), w.end(), c.model.fr_widths.begin());
    } else if (k == "mr_mid") c.model.mr_mid = parse_uint(k, v, 1, 4096);
    else if (k == "mr_low") c.model.mr_low = parse_uint(k, v, 1, 4096);
    else if (k == "k_mr") c.model.k_mr = parse_uint(k, v, 1, 128);
    else if (k == "mr_knn") {
      if (v != "features" && v != "coords") fail_usage("mr_knn expects features or coords");
      c.model.mr_knn_coords = v == "coords";
    } else if (k == "cls_hidden") c.model.cls_hidden = parse_widths(k, v);
    else if (k == "seg_hidden") c.model.seg_hidden = parse_widths(k, v);
    else if (k == "dropout") c.model.dropout = parse_real(k, v, 0.0, 0.95);
    else if (k == "graph_depth") c.model.graph_depth = parse_uint(k, v, 1, 4);
    else if (k == "dilation_surrogate") c.model.dilation_surrogate = parse_bool(k, v);
    else if (k == "head_hidden_relu") c.model.head.hidden_relu = parse_bool(k, v);
    else if (k == "head_normalize") c.model.head.normalize_rows = parse_bool(k, v);
    else if (k == "epochs") c.train.epochs = parse_uint(k, v, 1, 100000);
    else if (k == "batch") c.train.batch = parse_uint(k, v, 1, 4096);
    else if (k == "seed") c.train.seed = parse_uint(k, v, 0, UINT64_MAX);
    else if (k == "data_seed") c.data_seed = parse_uint(k, v, 0, UINT64_MAX);
    else if (k == "optimizer") {
      if (v == "sgd") c.train.optimizer = OptimizerKind::sgd;
      else if (v == "adam") c.train.optimizer = OptimizerKind::adam;
      else fail_usage("optimizer expects sgd or adam, got '" + v + "'");
    } else if (k == "lr_max") c.train.sgd_lr_max = parse_real(k, v, 1e-8, 10.0);
    else if (k == "lr_min") c.train.sgd_lr_min = parse_real(k, v, 0.0, 10.0);
    else if (k == "momentum") c.train.sgd_momentum = parse_real(k, v, 0.0, 0.999);
    else if (k == "adam_lr") c.train.adam_lr = parse_real(k, v, 1e-8, 1.0);
    else if (k == "decay_rate") c.train.decay_rate = parse_real(k, v, 1e-3, 1.0);
    else if (k == "decay_every") c.train.decay_every = parse_uint(k, v, 1, 100000);
    else if (k == "augment") c.train.augment = parse_bool(k, v);
    else if (k.size() == 5 && k.starts_with("w_er") && k[4] >= '1' && k[4] <= '4')
      c.train.weights.er[std::size_t(k[4] - '1')] = parse_real(k, v, 0.0, 100.0);
    else if (k == "train_per_class") c.train_per_class = parse_uint(k, v, 1, 100000);
    else if (k == "test_per_class") c.test_per_class = parse_uint(k, v, 0, 100000);
    else if (k == "train_shapes") c.train_shapes = parse_uint(k, v, 1, 100000);
    else if (k == "test_shapes") c.test_shapes = parse_uint(k, v, 0, 100000);
    else if (k == "votes") c.votes = parse_uint(k, v, 1, 100);
    else if (k == "data_dir") c.data_dir = v;
    else if (k == "out_dir") c.out_dir = v;
    else fail_usage("unknown config key '" + k + "'");
  }
  if (c.model.k * c.model.d_max > c.points)
    fail_usage("k*d_max = " + std::to_string(c.model.k * c.model.d_max) +
               " exceeds the point count " + std::to_string(c.points));
  if (c.model.k * c.model.d_max % 2 != 0) fail_usage("k*d_max must be even");
  if (c.train.sgd_lr_min > c.train.sgd_lr_max) fail_usage("lr_min exceeds lr_max");
  return c;
}

}  // namespace drnet
