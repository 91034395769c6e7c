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
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdformer/data.hpp"
#include "cdformer/model.hpp"
#include "cdformer/serialize.hpp"

namespace cdformer {

// ---------------------------------------------------------------- optimizer

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Norm gains/offsets and biases are exempt from weight decay.
inline bool decays(const std::string& name) {
  auto ends = [&name](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return !(ends(".bias") || ends(".gamma") || ends(".beta"));
}

/// Moments per parameter plus the shared step count.
template <Scalar T>
struct AdamWState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;
};

/// One decoupled-decay Adam update of every parameter with a gradient:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta)
/// Parameters without a gradient are treated as having a zero gradient.
template <Scalar T>
void adamw_step(std::vector<Tensor<T>>& params, const std::vector<bool>& decay, AdamWState<T>& st, const AdamWConfig& cfg,
                double lr) {
  if (decay.size() != params.size()) throw DimensionError("adamw_step: decay mask does not match parameter count");
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), T(0));
      st.v.emplace_back(p.numel(), T(0));
    }
  }
  if (st.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state does not match parameter count");
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (st.m[i].size() != p.numel()) {
      throw DimensionError("adamw_step: moment extent " + std::to_string(st.m[i].size()) + " for parameter of " +
                           std::to_string(p.numel()) + " entries");
    }
    const bool has = p.has_grad();
    const double lambda = decay[i] ? cfg.weight_decay : 0.0;
    auto data = p.data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? static_cast<double>(p.grad()[j]) : 0.0;
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1, vhat = vj / bc2;
      const double th = static_cast<double>(data[j]);
      const double adapt = mhat == 0.0 ? 0.0 : mhat / (std::sqrt(vhat) + cfg.eps);
      data[j] = static_cast<T>(th - lr * (adapt + lambda * th));
    }
  }
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <Scalar T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (T& g : p.mutable_grad()) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

// ---------------------------------------------------------------- schedules

struct Schedule {
  enum class Kind { kConstant, kCosine, kStep } kind = Kind::kCosine;
  double lr0 = 1e-3;
  std::vector<std::size_t> milestones;  // step schedule, same unit as `step`
  double gamma = 0.1;
};

/// cosine: lr0 * 0.5 * (1 + cos(pi * step / total)); step: lr0 * gamma^(milestones passed).
/// Steps past the total are clamped to it.
inline double lr_at(const Schedule& s, std::size_t step, std::size_t total_steps) {
  step = std::min(step, total_steps);
  switch (s.kind) {
    case Schedule::Kind::kConstant:
      return s.lr0;
    case Schedule::Kind::kCosine:
      if (total_steps == 0) return s.lr0;
      return s.lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
    case Schedule::Kind::kStep: {
      double lr = s.lr0;
      for (std::size_t m : s.milestones) {
        if (step >= m) lr *= s.gamma;
      }
      return lr;
    }
  }
  return s.lr0;
}

// ---------------------------------------------------------------- metrics

struct Metrics {
  double oa = 0.0;
  double macc = 0.0;
  double miou = 0.0;
};

/// U x U confusion counts, rows = truth, columns = prediction.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t num_classes) : u_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw ContractError("MetricAccumulator: num_classes must be >= 1");
  }

  void add(std::int64_t truth, std::int64_t pred) {
    if (truth < 0 || pred < 0 || static_cast<std::size_t>(truth) >= u_ || static_cast<std::size_t>(pred) >= u_) {
      throw IndexError("MetricAccumulator: label pair (" + std::to_string(truth) + ", " + std::to_string(pred) +
                       ") outside [0, " + std::to_string(u_) + ")");
    }
    counts_[static_cast<std::size_t>(truth) * u_ + static_cast<std::size_t>(pred)]++;
    total_++;
  }

  std::size_t num_classes() const { return u_; }
  std::uint64_t total() const { return total_; }
  std::uint64_t count(std::size_t truth, std::size_t pred) const { return counts_[truth * u_ + pred]; }

  /// OA = trace / total; mAcc over classes with support; mIoU over classes
  /// present in truth or prediction.
  Metrics finalize() const {
    if (total_ == 0) throw ContractError("metrics: accumulator is empty");
    Metrics m;
    std::uint64_t trace = 0;
    double acc_sum = 0.0, iou_sum = 0.0;
    std::size_t acc_n = 0, iou_n = 0;
    for (std::size_t c = 0; c < u_; ++c) {
      const std::uint64_t tp = count(c, c);
      std::uint64_t row = 0, col = 0;
      for (std::size_t k = 0; k < u_; ++k) {
        row += count(c, k);
        col += count(k, c);
      }
      trace += tp;
      if (row > 0) {
        acc_sum += static_cast<double>(tp) / static_cast<double>(row);
        ++acc_n;
      }
      const std::uint64_t uni = row + col - tp;
      if (uni > 0) {
        iou_sum += static_cast<double>(tp) / static_cast<double>(uni);
        ++iou_n;
      }
    }
    m.oa = static_cast<double>(trace) / static_cast<double>(total_);
    m.macc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
    m.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
    return m;
  }

 private:
  std::size_t u_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

template <Scalar T>
std::vector<std::int64_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t rows = logits.dim(0), U = logits.dim(1);
  std::vector<std::int64_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.ptr() + r * U;
    out[r] = static_cast<std::int64_t>(std::max_element(row, row + U) - row);
  }
  return out;
}

// ---------------------------------------------------------------- run configuration

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
  Schedule schedule;
  double label_smoothing = 0.1;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::size_t points = 0;  // resample every cloud to this many points; 0 keeps N
  AugmentConfig augment;
  std::string out_dir;     // checkpoints and log; empty disables persistence
};

/// Model + dataset + training settings as read from a JSON run file.
struct RunConfig {
  ModelConfig model;
  std::string dataset;
  TrainConfig train;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown " + where + " key '" + key + "'");
  }
}

}  // namespace detail

inline nlohmann::json schedule_to_json(const Schedule& s) {
  const char* kind = s.kind == Schedule::Kind::kCosine ? "cosine" : s.kind == Schedule::Kind::kStep ? "step" : "constant";
  return {{"type", kind}, {"milestones", s.milestones}, {"gamma", s.gamma}};
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
  nlohmann::json aug;
  to_json(aug, t.augment);
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"optimizer",
           {{"lr", t.optimizer.lr},
            {"beta1", t.optimizer.beta1},
            {"beta2", t.optimizer.beta2},
            {"eps", t.optimizer.eps},
            {"weight_decay", t.optimizer.weight_decay}}},
          {"schedule", schedule_to_json(t.schedule)},
          {"label_smoothing", t.label_smoothing},
          {"grad_clip", t.grad_clip},
          {"points", t.points},
          {"augment", aug},
          {"out_dir", t.out_dir}};
}

/// Applies keys present in j; unknown keys anywhere are rejected by name.
inline void merge_train_config(TrainConfig& t, const nlohmann::json& j) {
  detail::reject_unknown(j, {"epochs", "batch_size", "seed", "optimizer", "schedule", "label_smoothing", "grad_clip", "points",
                             "augment", "out_dir"},
                         "train config");
  try {
    if (j.contains("epochs")) t.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch_size")) t.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("seed")) t.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      detail::reject_unknown(o, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
      if (o.contains("lr")) t.optimizer.lr = o.at("lr").get<double>();
      if (o.contains("beta1")) t.optimizer.beta1 = o.at("beta1").get<double>();
      if (o.contains("beta2")) t.optimizer.beta2 = o.at("beta2").get<double>();
      if (o.contains("eps")) t.optimizer.eps = o.at("eps").get<double>();
      if (o.contains("weight_decay")) t.optimizer.weight_decay = o.at("weight_decay").get<double>();
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      detail::reject_unknown(s, {"type", "milestones", "gamma"}, "schedule");
      if (s.contains("type")) {
        const auto k = s.at("type").get<std::string>();
        if (k == "cosine") {
          t.schedule.kind = Schedule::Kind::kCosine;
        } else if (k == "step") {
          t.schedule.kind = Schedule::Kind::kStep;
        } else if (k == "constant") {
          t.schedule.kind = Schedule::Kind::kConstant;
        } else {
          throw ConfigError("schedule type must be cosine, step or constant, got '" + k + "'");
        }
      }
      if (s.contains("milestones")) t.schedule.milestones = s.at("milestones").get<std::vector<std::size_t>>();
      if (s.contains("gamma")) t.schedule.gamma = s.at("gamma").get<double>();
    }
    if (j.contains("label_smoothing")) t.label_smoothing = j.at("label_smoothing").get<double>();
    if (j.contains("grad_clip")) t.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("points")) t.points = j.at("points").get<std::size_t>();
    if (j.contains("augment")) merge_augment_config(t.augment, j.at("augment"));
    if (j.contains("out_dir")) t.out_dir = j.at("out_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  t.schedule.lr0 = t.optimizer.lr;
  if (t.batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (t.label_smoothing < 0.0 || t.label_smoothing >= 1.0) throw ConfigError("train config: label_smoothing must lie in [0, 1)");
  if (t.optimizer.lr < 0.0) throw ConfigError("train config: lr must be >= 0");
}

/// Run file layout:
///   {"preset": "toy-cls", "model": {...overrides...}, "dataset": "dir", "train": {...}}
/// `preset` seeds the model config; `model` keys override it.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::reject_unknown(j, {"preset", "model", "dataset", "train"}, "run config");
  RunConfig rc;
  try {
    if (j.contains("preset")) rc.model = preset(j.at("preset").get<std::string>());
    if (j.contains("model")) merge_model_config(rc.model, j.at("model"));
    if (j.contains("dataset")) rc.dataset = j.at("dataset").get<std::string>();
    if (j.contains("train")) merge_train_config(rc.train, j.at("train"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  rc.train.schedule.lr0 = rc.train.optimizer.lr;
  rc.model.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open run config '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------- checkpoints

/// Mutable progress persisted alongside the weights.
struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
};

inline std::string param_file(const std::string& name) { return name + ".cdt"; }

/// Directory with config.json, params/<name>.cdt and, when given,
/// optim/<name>.m.cdt / .v.cdt.
template <Scalar T>
void save_checkpoint(const std::string& dir, const Model<T>& model, const TrainState* state = nullptr,
                     const AdamWState<T>* opt = nullptr, const TrainConfig* train = nullptr) {
  namespace fs = std::filesystem;
  const fs::path tmp = fs::path(dir + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp / "params");
  nlohmann::json cfg;
  to_json(cfg, model.config());
  nlohmann::json meta{{"model", cfg}, {"format", "cdformer-checkpoint-1"}};
  if (state) {
    meta["state"] = {{"epoch", state->epoch}, {"step", state->step}, {"best_metric", nullptr}};
    if (std::isfinite(state->best_metric)) meta["state"]["best_metric"] = state->best_metric;
  }
  if (train) meta["train"] = train_config_to_json(*train);
  const auto& named = model.params().named();
  for (const auto& [name, t] : named) save_tensor((tmp / "params" / param_file(name)).string(), t);
  if (opt && !opt->m.empty()) {
    fs::create_directories(tmp / "optim");
    meta["optim"] = {{"t", opt->t}};
    for (std::size_t i = 0; i < named.size(); ++i) {
      const Shape shape = named[i].second.shape();
      save_tensor((tmp / "optim" / (named[i].first + ".m.cdt")).string(), Tensor<T>(shape, opt->m[i]));
      save_tensor((tmp / "optim" / (named[i].first + ".v.cdt")).string(), Tensor<T>(shape, opt->v[i]));
    }
  }
  {
    std::ofstream os(tmp / "config.json");
    os << meta.dump(2) << '\n';
    if (!os) throw Error("failed to write checkpoint config in '" + tmp.string() + "'");
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

inline nlohmann::json read_checkpoint_meta(const std::string& dir) {
  std::ifstream is(std::filesystem::path(dir) / "config.json");
  if (!is) throw ConfigError("'" + dir + "' is not a checkpoint (missing config.json)");
  nlohmann::json meta;
  try {
    is >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(dir + "/config.json: " + e.what());
  }
  return meta;
}

inline ModelConfig checkpoint_model_config(const std::string& dir) {
  ModelConfig cfg;
  from_json(read_checkpoint_meta(dir).at("model"), cfg);
  cfg.validate();
  return cfg;
}

/// Copies stored weights (and optionally state) into an existing model.
template <Scalar T>
void load_checkpoint(const std::string& dir, Model<T>& model, TrainState* state = nullptr, AdamWState<T>* opt = nullptr) {
  namespace fs = std::filesystem;
  const nlohmann::json meta = read_checkpoint_meta(dir);
  auto& named = model.params().named();
  for (auto& [name, t] : named) {
    const Tensor<T> stored = load_tensor<T>((fs::path(dir) / "params" / param_file(name)).string());
    if (stored.shape() != t.shape()) {
      throw ConfigError("checkpoint parameter '" + name + "' has shape " + shape_str(stored.shape()) + ", model expects " +
                        shape_str(t.shape()));
    }
    std::copy(stored.data().begin(), stored.data().end(), t.data().begin());
  }
  if (state && meta.contains("state")) {
    state->epoch = meta["state"].at("epoch").get<std::size_t>();
    state->step = meta["state"].at("step").get<std::uint64_t>();
    const auto& bm = meta["state"].at("best_metric");
    state->best_metric = bm.is_null() ? -std::numeric_limits<double>::infinity() : bm.get<double>();
  }
  if (opt && meta.contains("optim")) {
    opt->t = meta["optim"].at("t").get<std::uint64_t>();
    opt->m.clear();
    opt->v.clear();
    for (auto& [name, t] : named) {
      const auto m = load_tensor<T>((fs::path(dir) / "optim" / (name + ".m.cdt")).string());
      const auto v = load_tensor<T>((fs::path(dir) / "optim" / (name + ".v.cdt")).string());
      opt->m.emplace_back(m.data().begin(), m.data().end());
      opt->v.emplace_back(v.data().begin(), v.data().end());
    }
  }
}

// ---------------------------------------------------------------- evaluation and training

struct EvalResult {
  Metrics metrics;
  double loss = 0.0;
  std::size_t samples = 0;
};

inline void check_compatible(const ModelConfig& m, const Dataset& ds) {
  if (m.task != ds.task) {
    throw ConfigError(std::string("model task '") + to_string(m.task) + "' does not match dataset task '" + to_string(ds.task) + "'");
  }
  if (m.num_classes != ds.num_classes) {
    throw ConfigError("model has " + std::to_string(m.num_classes) + " classes, dataset has " + std::to_string(ds.num_classes));
  }
  if (m.in_channels != ds.in_channels) {
    throw ConfigError("model expects " + std::to_string(m.in_channels) + " input channels, dataset has " +
                      std::to_string(ds.in_channels));
  }
}

/// Per-sample loss and predictions; classification yields one prediction.
template <Scalar T>
Tensor<T> sample_loss(const Model<T>& model, const PointCloud<T>& cloud, std::int64_t label, T smoothing,
                      std::vector<std::int64_t>* preds = nullptr) {
  const Tensor<T> logits = model.forward(cloud);
  if (preds) *preds = argmax_rows(logits);
  if (model.config().task == Task::kClassification) return ce_label_smoothing(logits, {label}, smoothing);
  return ce_label_smoothing(logits, cloud.labels, smoothing);
}

template <Scalar T>
PointCloud<T> prepare_cloud(const PointCloud<float>& src, std::size_t points, std::uint64_t seed) {
  PointCloud<T> c;
  c.coords = cast_tensor<T>(src.coords);
  c.feats = cast_tensor<T>(src.feats);
  c.labels = src.labels;
  if (points > 0 && c.size() != points) c = resample_to_n(c, points, seed);
  return c;
}

/// No-grad pass over samples. Throws ContractError on an empty split.
template <Scalar T>
EvalResult evaluate(const Model<T>& model, const std::vector<Sample>& samples, std::size_t points = 0, double smoothing = 0.0) {
  if (samples.empty()) throw ContractError("evaluate: dataset split is empty");
  NoGradGuard ng;
  MetricAccumulator acc(model.config().num_classes);
  EvalResult r;
  double loss = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PointCloud<T> c = prepare_cloud<T>(samples[i].cloud, points, i);
    std::vector<std::int64_t> preds;
    loss += static_cast<double>(sample_loss(model, c, samples[i].label, static_cast<T>(smoothing), &preds).item());
    if (model.config().task == Task::kClassification) {
      acc.add(samples[i].label, preds[0]);
    } else {
      for (std::size_t p = 0; p < preds.size(); ++p) acc.add(c.labels[p], preds[p]);
    }
  }
  r.metrics = acc.finalize();
  r.loss = loss / static_cast<double>(samples.size());
  r.samples = samples.size();
  return r;
}

/// One JSON log record per epoch.
struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_oa = 0.0;
  std::optional<Metrics> val;
  double wall_s = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"step", step}, {"lr", lr}, {"train_loss", train_loss}, {"train_OA", train_oa}};
    if (val) {
      j["val_OA"] = val->oa;
      j["val_mAcc"] = val->macc;
      j["val_mIoU"] = val->miou;
    } else {
      j["val_OA"] = nullptr;
      j["val_mAcc"] = nullptr;
      j["val_mIoU"] = nullptr;
    }
    j["wall_s"] = wall_s;
    return j;
  }
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Stop after this many epochs of the current call (0 = run to cfg.epochs).
  std::size_t max_epochs_this_call = 0;
};

namespace detail {

inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  return mix_seed(mix_seed(seed, epoch), index);
}

}  // namespace detail

/// Seeded shuffle per epoch, mini-batch mean loss, AdamW with the epoch-level
/// schedule, optional global-norm clipping, best/last checkpoints and a
/// JSON-lines log under cfg.out_dir. Resumes from `state`/`opt` if they carry
/// progress (epoch > 0). Randomness derives only from (seed, epoch, index),
/// so a resumed run continues the uninterrupted trajectory.
template <Scalar T>
std::vector<EpochRecord> train_loop(Model<T>& model, const Dataset& ds, const TrainConfig& cfg, TrainState& state,
                                    AdamWState<T>& opt, const TrainHooks& hooks = {}) {
  namespace fs = std::filesystem;
  check_compatible(model.config(), ds);
  if (ds.train.empty()) throw ContractError("train_loop: training split is empty");
  std::vector<Tensor<T>> params;
  std::vector<bool> decay;
  for (auto& [name, t] : model.params().named()) {
    params.push_back(t);
    decay.push_back(decays(name));
  }
  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    log.open(fs::path(cfg.out_dir) / "train_log.jsonl", state.epoch == 0 ? std::ios::trunc : std::ios::app);
  }
  const bool cls = model.config().task == Task::kClassification;
  const T smoothing = static_cast<T>(cfg.label_smoothing);
  std::vector<EpochRecord> history;
  std::size_t ran = 0;
  while (state.epoch < cfg.epochs) {
    if (hooks.max_epochs_this_call && ran >= hooks.max_epochs_this_call) break;
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t epoch = state.epoch;
    const double lr = lr_at(cfg.schedule, epoch, cfg.epochs);
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(detail::mix_seed(cfg.seed, 0x5EED0000ull + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      for (auto& p : params) p.zero_grad();
      const T inv = static_cast<T>(1.0 / static_cast<double>(e - b));
      for (std::size_t i = b; i < e; ++i) {
        const Sample& s = ds.train[order[i]];
        std::mt19937_64 rng(detail::sample_seed(cfg.seed, epoch, order[i]));
        PointCloud<T> c = prepare_cloud<T>(s.cloud, cfg.points, rng());
        c = augment(c, cfg.augment, rng);
        std::vector<std::int64_t> preds;
        const Tensor<T> l = sample_loss(model, c, s.label, smoothing, &preds);
        loss_sum += static_cast<double>(l.item());
        if (cls) {
          correct += preds[0] == s.label;
          ++seen;
        } else {
          for (std::size_t p = 0; p < preds.size(); ++p) correct += preds[p] == c.labels[p];
          seen += preds.size();
        }
        // Leaf gradients accumulate, so one backward per cloud yields the
        // batch-mean gradient without holding every graph at once.
        backward(scale(l, inv));
      }
      if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
      adamw_step(params, decay, opt, cfg.optimizer, lr);
      state.step += 1;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.step = state.step;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(ds.train.size());
    rec.train_oa = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (!ds.val.empty()) rec.val = evaluate(model, ds.val, cfg.points).metrics;
    state.epoch += 1;
    ++ran;
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!cfg.out_dir.empty()) {
      const double metric = rec.val ? (cls ? rec.val->oa : rec.val->miou) : -rec.train_loss;
      const bool best = metric > state.best_metric;
      if (best) state.best_metric = metric;
      save_checkpoint((fs::path(cfg.out_dir) / "last").string(), model, &state, &opt, &cfg);
      if (best) save_checkpoint((fs::path(cfg.out_dir) / "best").string(), model, &state, &opt, &cfg);
      log << rec.to_json().dump() << '\n';
      log.flush();
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
    history.push_back(rec);
  }
  return history;
}

}  // namespace cdformer
