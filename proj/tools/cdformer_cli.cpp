/*
 * Copyright (c) 2026 The cdformer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// cdformer: gen-data | train | eval | bench | grad-check
//
// Exit codes: 0 success, 1 contract/config/usage error, 2 verification failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cdformer/cdformer.hpp"

namespace {

using namespace cdformer;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kVerifyFailed = 2;

struct GenDataArgs {
  std::string task = "cls";
  GenDataOptions opt;
  std::string out;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  GenDataOptions o = a.opt;
  o.task = task_from_string(a.task);
  const Dataset ds = make_synthetic_dataset(o);
  write_dataset(ds, a.out, a.force);
  nlohmann::json j{{"dataset", a.out},
                   {"task", to_string(ds.task)},
                   {"num_classes", ds.num_classes},
                   {"train", ds.train.size()},
                   {"val", ds.val.size()}};
  std::cout << j.dump() << '\n';
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string preset;
  std::string dataset;
  std::string out;
  std::string resume;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  double lr = -1.0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc;
  if (!a.config.empty()) rc = load_run_config(a.config);
  if (!a.preset.empty()) rc.model = preset(a.preset);
  if (!a.dataset.empty()) rc.dataset = a.dataset;
  if (!a.out.empty()) rc.train.out_dir = a.out;
  if (a.epochs) rc.train.epochs = a.epochs;
  if (a.batch_size) rc.train.batch_size = a.batch_size;
  if (a.lr >= 0.0) rc.train.optimizer.lr = rc.train.schedule.lr0 = a.lr;
  if (a.seed_set) rc.train.seed = a.seed;
  if (rc.dataset.empty()) throw ConfigError("train: no dataset given (config key 'dataset' or --dataset)");
  if (!fs::is_directory(rc.dataset)) throw ConfigError("train: dataset directory '" + rc.dataset + "' does not exist");
  if (rc.train.out_dir.empty()) throw ConfigError("train: no output directory given (train.out_dir or --out)");
  if (a.resume.empty() && !a.force && fs::exists(rc.train.out_dir) && !fs::is_empty(rc.train.out_dir)) {
    throw ContractError("train: output directory '" + rc.train.out_dir + "' is not empty (use --force or --resume)");
  }
  if (a.resume.empty() && a.force) fs::remove_all(rc.train.out_dir);

  const Dataset ds = load_dataset(rc.dataset);
  Model<float> model(rc.model);
  TrainState state;
  AdamWState<float> opt;
  if (!a.resume.empty()) {
    const ModelConfig stored = checkpoint_model_config(a.resume);
    nlohmann::json js, jc;
    to_json(js, stored);
    to_json(jc, rc.model);
    if (js != jc) throw ConfigError("train: --resume checkpoint model config differs from the run config");
    load_checkpoint(a.resume, model, &state, &opt);
  }
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& r) { std::cout << r.to_json().dump() << std::endl; };
  train_loop(model, ds, rc.train, state, opt, hooks);
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& split) {
  const ModelConfig cfg = checkpoint_model_config(checkpoint);
  const Dataset ds = load_dataset(dataset);
  check_compatible(cfg, ds);
  Model<float> model(cfg);
  load_checkpoint(checkpoint, model);
  const auto& samples = split == "train" ? ds.train : ds.val;
  const EvalResult r = evaluate(model, samples);
  nlohmann::json j{{"split", split}, {"samples", r.samples}, {"loss", r.loss},
                   {"OA", r.metrics.oa}, {"mAcc", r.metrics.macc}, {"mIoU", r.metrics.miou}};
  std::cout << j.dump() << '\n';
  return kOk;
}

struct BenchArgs {
  std::vector<std::string> kernels{"lsa", "collect", "distribute", "full_attention"};
  std::vector<std::size_t> ns{1024, 2048, 4096, 8192, 16384};
  BenchOptions opt;
  std::string csv;
  bool check = false;
};

int cmd_bench(const BenchArgs& a) {
  std::vector<std::vector<BenchResult>> all;
  std::ofstream file;
  if (!a.csv.empty()) {
    file.open(a.csv);
    if (!file) throw Error("bench: cannot write '" + a.csv + "'");
  }
  std::ostream& os = a.csv.empty() ? std::cout : file;
  bool header = true;
  for (const auto& name : a.kernels) {
    auto r = run_scaling(bench_kernel_from_string(name), a.ns, a.opt);
    write_bench_csv(os, r, header);
    os.flush();
    header = false;
    all.push_back(std::move(r));
  }
  const nlohmann::json summary = bench_summary(all);
  std::cout << summary.dump() << '\n';
  if (!a.check) return kOk;
  bool ok = true;
  for (const auto& [kernel, slope] : summary["slopes"].items()) {
    if (slope.is_null()) continue;
    const double s = slope.get<double>();
    ok = ok && (kernel == "full_attention" ? s >= 1.7 : (s >= 0.8 && s <= 1.4));
  }
  return ok ? kOk : kVerifyFailed;
}

int cmd_grad_check(const std::string& module, std::uint64_t seed, double tol, bool corrupt) {
  GradCheckOptions opt;
  opt.corrupt = corrupt;
  const auto results = run_grad_checks(module, seed, opt);
  double worst = 0.0;
  for (const auto& r : results) {
    std::cout << nlohmann::json{{"module", r.module}, {"check", r.name}, {"max_rel_error", r.max_rel_error}}.dump() << '\n';
    worst = std::max(worst, r.max_rel_error);
  }
  const bool ok = worst < tol;
  std::cout << nlohmann::json{{"summary", "grad-check"}, {"checks", results.size()}, {"max_rel_error", worst},
                              {"tolerance", tol}, {"pass", ok}}.dump()
            << '\n';
  return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cdformer: collect-and-distribute point-cloud transformer toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  bool strict = false;
  app.add_flag("--strict", strict, "Strict-sequential execution (same as CDF_STRICT=1)");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  gen->add_option("--task", gd.task, "cls or seg")->check(CLI::IsMember({"cls", "seg"}));
  gen->add_option("--classes", gd.opt.classes, "Number of classes")->check(CLI::PositiveNumber);
  gen->add_option("--per-class", gd.opt.per_class, "Training clouds per class")->check(CLI::PositiveNumber);
  gen->add_option("--val-per-class", gd.opt.val_per_class, "Validation clouds per class");
  gen->add_option("--points", gd.opt.points, "Points per cloud")->check(CLI::Range(8, 1 << 24));
  gen->add_option("--noise", gd.opt.noise, "Gaussian noise sigma")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gd.opt.seed, "RNG seed");
  gen->add_option("--out", gd.out, "Target directory")->required();
  gen->add_flag("--force", gd.force, "Overwrite a non-empty target");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model; one JSON record per epoch on stdout");
  train->add_option("--config", ta.config, "Run config (JSON)");
  train->add_option("--preset", ta.preset, "Model preset (replaces the config's model)");
  train->add_option("--dataset", ta.dataset, "Dataset directory");
  train->add_option("--out", ta.out, "Output directory");
  train->add_option("--resume", ta.resume, "Checkpoint directory to continue from");
  train->add_option("--epochs", ta.epochs, "Total epochs")->check(CLI::PositiveNumber);
  train->add_option("--batch-size", ta.batch_size, "Clouds per step")->check(CLI::PositiveNumber);
  train->add_option("--lr", ta.lr, "Base learning rate")->check(CLI::NonNegativeNumber);
  auto* seed_opt = train->add_option("--seed", ta.seed, "RNG seed");
  train->add_flag("--force", ta.force, "Clear a non-empty output directory");

  std::string ev_ckpt, ev_data, ev_split = "val";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval->add_option("--checkpoint", ev_ckpt, "Checkpoint directory")->required();
  eval->add_option("--dataset", ev_data, "Dataset directory")->required();
  eval->add_option("--split", ev_split, "train or val")->check(CLI::IsMember({"train", "val"}));

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Attention wall time versus N");
  bench->add_option("--kernels", ba.kernels, "lsa, collect, distribute, full_attention")->delimiter(',');
  bench->add_option("--ns", ba.ns, "Point counts (ascending)")->delimiter(',');
  bench->add_option("--k", ba.opt.k, "Neighbors K")->check(CLI::PositiveNumber);
  bench->add_option("--s", ba.opt.s, "Downsampling scale S")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", ba.opt.repeats, "Timed repeats (>= 5)");
  bench->add_option("--channels", ba.opt.channels, "Feature channels")->check(CLI::PositiveNumber);
  bench->add_option("--heads", ba.opt.heads, "Attention heads")->check(CLI::PositiveNumber);
  bench->add_option("--seed", ba.opt.seed, "RNG seed");
  bench->add_option("--csv", ba.csv, "Write CSV here instead of stdout");
  bench->add_flag("--check", ba.check, "Exit 2 unless slopes fall in the expected bands");

  std::string gc_module;
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  bool gc_corrupt = false;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient verification");
  gc->add_option("--module", gc_module, "tensor, attention or model (default: all)")
      ->check(CLI::IsMember({"", "tensor", "attention", "model"}));
  gc->add_option("--seed", gc_seed, "RNG seed");
  gc->add_option("--tol", gc_tol, "Maximum allowed relative error");
  gc->add_flag("--corrupt-gradient", gc_corrupt, "Perturb one analytic gradient (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kError;
  }

  try {
    retain_freed_memory();
    if (strict) set_strict_mode(true);
    if (*gen) return cmd_gen_data(gd);
    if (*train) {
      ta.seed_set = seed_opt->count() > 0;
      return cmd_train(ta);
    }
    if (*eval) return cmd_eval(ev_ckpt, ev_data, ev_split);
    if (*bench) return cmd_bench(ba);
    if (*gc) return cmd_grad_check(gc_module, gc_seed, gc_tol, gc_corrupt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kError;
  }
  return kError;
}
