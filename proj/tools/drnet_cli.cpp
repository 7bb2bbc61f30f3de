// drnet command-line front end: gen | train | eval | gradcheck | dilation-dump.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "drnet/config.hpp"
#include "drnet/data.hpp"
#include "drnet/gradcheck.hpp"
#include "drnet/network.hpp"
#include "drnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace drnet;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  RunConfig resolve() const {
    KeyValues kv;
    if (!config_path.empty()) kv = read_config_file(config_path);
    for (const auto& s : overrides) kv.push_back(parse_override(s));
    return make_config(kv);
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value configuration file");
  cmd->add_option("--set", c.overrides, "override a configuration key (key=value)");
}

const char* task_tag(Task t) { return t == Task::classification ? "cls" : "seg"; }

DatasetManifest manifest_header(Task task) {
  DatasetManifest m;
  m.task = task_tag(task);
  if (task == Task::classification) {
    m.class_names = cls_class_names();
  } else {
    m.category_names = seg_category_names();
    m.parts = seg_part_table();
  }
  return m;
}

Split generate(const RunConfig& cfg) {
  return cfg.task == Task::classification
             ? gen_cls_dataset(cfg.data_seed, cfg.train_per_class, cfg.test_per_class, cfg.points)
             : gen_seg_dataset(cfg.data_seed, cfg.train_shapes, cfg.test_shapes, cfg.points);
}

/// The dataset in data_dir when it has a manifest, otherwise generated from
/// the data seed.
Split load_or_generate(const RunConfig& cfg) {
  const fs::path dir = cfg.data_dir;
  if (!fs::exists(dir / "manifest.txt")) {
    std::cout << "no manifest in " << dir << "; generating data from data_seed "
              << cfg.data_seed << "\n";
    return generate(cfg);
  }
  DatasetManifest m;
  Split s = read_dataset(dir, &m);
  if (m.task != task_tag(cfg.task))
    fail_data("dataset in " + dir.string() + " is for task " + m.task);
  return s;
}

int cmd_gen(const Common& common) {
  const auto cfg = common.resolve();
  const Split split = generate(cfg);
  write_dataset(cfg.data_dir, manifest_header(cfg.task), split);
  std::cout << "wrote " << split.train.size() << " train and " << split.test.size()
            << " test clouds (" << cfg.points << " points) to " << cfg.data_dir << "\n";
  return 0;
}

int cmd_train(const Common& common, bool resume) {
  const auto cfg = common.resolve();
  const Split split = load_or_generate(cfg);
  Model<float> model(cfg.model, cfg.train.seed);
  Trainer<float> trainer(model, cfg.train, split.train, split.test, seg_part_table());
  const fs::path out = cfg.out_dir;
  if (resume) {
    if (!fs::exists(out / "last.ckpt")) fail_data("nothing to resume: " + (out / "last.ckpt").string());
    trainer.restore(load_checkpoint(out / "last.ckpt"));
    std::cout << "resuming at epoch " << trainer.next_epoch() << "\n";
  }
  std::cout << EpochLog::kHeader << "\n";
  train_loop(trainer, out, [](const EpochLog& log) { std::cout << log.line() << std::endl; });
  std::cout << "best validation metric " << trainer.best_metric() << "; checkpoints in " << out
            << "\n";
  return 0;
}

void print_report(const MetricReport& r, Task task, const std::vector<std::string>& names) {
  std::cout << "metric,value\n";
  std::printf("overall_acc,%.9g\navg_class_acc,%.9g\n", r.overall_acc, r.avg_class_acc);
  if (task == Task::segmentation) {
    std::printf("miou,%.9g\n", r.miou);
    for (std::size_t i = 0; i < r.per_category_iou.size(); ++i)
      std::printf("iou_%s,%.9g\n", names.at(i).c_str(), r.per_category_iou[i]);
  } else {
    for (std::size_t i = 0; i < r.per_class_acc.size(); ++i)
      std::printf("acc_%s,%.9g\n", names.at(i).c_str(), r.per_class_acc[i]);
  }
  std::printf("\n%s: overall accuracy %.2f%%, mean class accuracy %.2f%%",
              task == Task::classification ? "classification" : "segmentation",
              100 * r.overall_acc, 100 * r.avg_class_acc);
  if (task == Task::segmentation) std::printf(", mIoU %.4f", r.miou);
  std::printf("\n");
}

int cmd_eval(const Common& common, std::string checkpoint, std::size_t votes,
             const std::string& split_name) {
  auto cfg = common.resolve();
  if (votes) cfg.votes = votes;
  if (checkpoint.empty()) checkpoint = (fs::path(cfg.out_dir) / "best.ckpt").string();
  if (!fs::exists(checkpoint)) fail_data("checkpoint not found: " + checkpoint);
  const Split split = load_or_generate(cfg);
  Model<float> model(cfg.model, cfg.train.seed);
  Trainer<float>::load_parameters(model.params(), load_checkpoint(checkpoint));
  const auto& clouds = split_name == "train" ? split.train : split.test;
  if (clouds.empty()) fail_data("the " + split_name + " split is empty");
  if (cfg.task == Task::classification) {
    print_report(evaluate_classification(model, clouds, cfg.votes, cfg.train.seed), cfg.task,
                 cls_class_names());
  } else {
    print_report(evaluate_segmentation(model, clouds, seg_part_table(), cfg.votes, cfg.train.seed),
                 cfg.task, seg_category_names());
  }
  return 0;
}

int cmd_gradcheck(const Common& common) {
  const auto cfg = common.resolve();
  GradcheckOptions opts;
  opts.seed = cfg.train.seed;
  GradcheckSuite suite(opts);
  suite.run_all();
  std::size_t failed = 0;
  for (const auto& r : suite.results()) {
    std::printf("%-4s %-52s %.3e\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.error);
    failed += !r.passed;
  }
  std::printf("%zu checks, %zu failed (tolerance %.0e)\n", suite.results().size(), failed,
              opts.tolerance);
  return failed ? int(ErrorKind::numerical) : 0;
}

int cmd_dilation_dump(const Common& common, const std::string& checkpoint,
                      const std::string& cloud_path, std::size_t layer, Index category,
                      const std::string& out_path) {
  const auto cfg = common.resolve();
  if (layer < 1 || layer > kEmModules) fail_usage("--layer must be in [1, 4]");
  if (!fs::exists(checkpoint)) fail_data("checkpoint not found: " + checkpoint);
  Model<float> model(cfg.model, cfg.train.seed);
  Trainer<float>::load_parameters(model.params(), load_checkpoint(checkpoint));
  const LabeledCloud cloud = load_cloud(cloud_path);
  auto batch = single_cloud(cloud.coords);
  if (cfg.task == Task::segmentation) batch.categories = {category};
  const auto fwd = model.forward(batch, false);
  const auto& dil = fwd.dilations[layer - 1];

  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) fail_data("cannot write " + out_path);
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  out << "x,y,z,dilation_factor,gate\n";
  char buf[160];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%d,%.9g\n", double(cloud.coords(i, 0)),
                  double(cloud.coords(i, 1)), double(cloud.coords(i, 2)), int(dil.factors[i]),
                  double(dil.gate[i]));
    out << buf;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense-resolution point cloud network"};
  app.require_subcommand(1);

  Common gen_opts, train_opts, eval_opts, grad_opts, dump_opts;
  auto* gen = app.add_subcommand("gen", "write a synthetic dataset to data_dir");
  add_common(gen, gen_opts);

  bool resume = false;
  auto* train = app.add_subcommand("train", "train a model, writing checkpoints and a CSV log");
  add_common(train, train_opts);
  train->add_flag("--resume", resume, "continue from out_dir/last.ckpt");

  std::string eval_ckpt, eval_split = "test";
  std::size_t votes = 0;
  auto* eval = app.add_subcommand("eval", "report metrics for a checkpoint");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file (default out_dir/best.ckpt)");
  eval->add_option("--votes", votes, "number of scaled copies averaged per cloud")
      ->check(CLI::Range(1, 100));
  eval->add_option("--split", eval_split, "train or test")
      ->check(CLI::IsMember({"train", "test"}));

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  add_common(grad, grad_opts);

  std::string dump_ckpt, dump_cloud, dump_out;
  std::size_t layer = 1;
  Index category = 0;
  auto* dump = app.add_subcommand("dilation-dump", "per-point learned dilation factors as CSV");
  add_common(dump, dump_opts);
  dump->add_option("--checkpoint", dump_ckpt, "checkpoint file")->required();
  dump->add_option("--cloud", dump_cloud, "cloud text file")->required();
  dump->add_option("--layer", layer, "error-minimizing module (1-4)");
  dump->add_option("--category", category, "object category for segmentation models");
  dump->add_option("--out", dump_out, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : int(ErrorKind::usage);
  }

  try {
    if (*gen) return cmd_gen(gen_opts);
    if (*train) return cmd_train(train_opts, resume);
    if (*eval) return cmd_eval(eval_opts, eval_ckpt, votes, eval_split);
    if (*grad) return cmd_gradcheck(grad_opts);
    if (*dump) return cmd_dilation_dump(dump_opts, dump_ckpt, dump_cloud, layer, category, dump_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return int(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return int(ErrorKind::data);
  }
  return int(ErrorKind::usage);
}
