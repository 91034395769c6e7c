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

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdformer/attention.hpp"
#include "cdformer/errors.hpp"

namespace cdformer {

enum class Task { kClassification, kSegmentation };

inline const char* to_string(Task t) { return t == Task::kClassification ? "cls" : "seg"; }

inline Task task_from_string(const std::string& s) {
  if (s == "cls") return Task::kClassification;
  if (s == "seg") return Task::kSegmentation;
  throw ConfigError("unknown task '" + s + "' (expected cls or seg)");
}

/// Architecture description. One entry per stage in blocks/channels/heads.
struct ModelConfig {
  std::string name = "custom";
  std::vector<std::size_t> blocks{1, 1, 1, 1};
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::vector<std::size_t> heads{1, 2, 4, 8};
  std::size_t k_neighbors = 16;
  std::size_t scale_s = 4;      // point ratio between consecutive stages
  std::size_t block_scale = 0;  // points per proxy inside a block; 0 -> scale_s
  Task task = Task::kClassification;
  std::size_t num_classes = 8;
  std::size_t in_channels = 3;
  bool use_collect = true;
  bool use_distribute = true;
  PositionEncoding position_encoding = PositionEncoding::kContextAware;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  std::size_t stages() const { return blocks.size(); }
  std::size_t embed_channels() const { return channels.front(); }
  std::size_t proxy_scale() const { return block_scale ? block_scale : scale_s; }

  void validate() const {
    if (blocks.empty()) throw ConfigError("model: at least one stage is required");
    if (channels.size() != blocks.size() || heads.size() != blocks.size()) {
      throw ConfigError("model: blocks, channels and heads must have equal length");
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (channels[i] == 0 || heads[i] == 0 || channels[i] % heads[i] != 0) {
        throw ConfigError("model: channels[" + std::to_string(i) + "]=" + std::to_string(channels[i]) +
                          " must be a positive multiple of heads[" + std::to_string(i) + "]=" + std::to_string(heads[i]));
      }
    }
    if (k_neighbors < 1) throw ConfigError("model: k_neighbors must be >= 1");
    if (scale_s < 1) throw ConfigError("model: scale_s must be >= 1");
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"name", c.name},
                     {"blocks", c.blocks},
                     {"channels", c.channels},
                     {"heads", c.heads},
                     {"k_neighbors", c.k_neighbors},
                     {"scale_s", c.scale_s},
                     {"block_scale", c.block_scale},
                     {"task", to_string(c.task)},
                     {"num_classes", c.num_classes},
                     {"in_channels", c.in_channels},
                     {"use_collect", c.use_collect},
                     {"use_distribute", c.use_distribute},
                     {"position_encoding", to_string(c.position_encoding)},
                     {"init_std", c.init_std},
                     {"seed", c.seed}};
}

/// Applies the keys present in j on top of c; unknown keys are rejected.
inline void merge_model_config(ModelConfig& c, const nlohmann::json& j) {
  static const std::set<std::string> known = {"name", "blocks", "channels", "heads", "k_neighbors", "scale_s", "block_scale",
                                              "task", "num_classes", "in_channels", "use_collect", "use_distribute",
                                              "position_encoding", "init_std", "seed"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  try {
    if (j.contains("name")) c.name = j.at("name").get<std::string>();
    if (j.contains("blocks")) c.blocks = j.at("blocks").get<std::vector<std::size_t>>();
    if (j.contains("channels")) c.channels = j.at("channels").get<std::vector<std::size_t>>();
    if (j.contains("heads")) c.heads = j.at("heads").get<std::vector<std::size_t>>();
    if (j.contains("k_neighbors")) c.k_neighbors = j.at("k_neighbors").get<std::size_t>();
    if (j.contains("scale_s")) c.scale_s = j.at("scale_s").get<std::size_t>();
    if (j.contains("block_scale")) c.block_scale = j.at("block_scale").get<std::size_t>();
    if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<std::size_t>();
    if (j.contains("use_collect")) c.use_collect = j.at("use_collect").get<bool>();
    if (j.contains("use_distribute")) c.use_distribute = j.at("use_distribute").get<bool>();
    if (j.contains("position_encoding")) c.position_encoding = position_encoding_from_string(j.at("position_encoding").get<std::string>());
    if (j.contains("init_std")) c.init_std = j.at("init_std").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  merge_model_config(c, j);
}

inline std::vector<std::string> preset_names() {
  return {"toy-cls",    "toy-seg",    "mini",       "modelnet-like", "s3dis-like", "cdformer-s", "cdformer-b",
          "cdformer-l", "table4-i",   "table4-ii",  "table4-iii",    "table4-iv",  "table5-i",   "table5-ii",
          "table5-iii", "table5-iv",  "table7-k4",  "table7-k8",     "table7-k16"};
}

/// Named architectures. The scene-segmentation family uses four stages of
/// [2, 2, 6, 2] blocks, K = 16 and S = 8; ablation presets vary one knob of
/// the large configuration.
inline ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.name = name;
  auto scene = [&c](std::vector<std::size_t> ch, std::vector<std::size_t> hd) {
    c.blocks = {2, 2, 6, 2};
    c.channels = std::move(ch);
    c.heads = std::move(hd);
    c.k_neighbors = 16;
    c.scale_s = 8;
    c.task = Task::kSegmentation;
    c.num_classes = 13;
    c.in_channels = 6;
  };
  if (name == "toy-cls") {
    c.blocks = {1, 1, 1, 1};
    c.channels = {16, 32, 64, 128};
    c.heads = {1, 2, 4, 8};
    c.k_neighbors = 16;
    c.scale_s = 4;
    c.num_classes = 8;
    c.in_channels = 3;
  } else if (name == "toy-seg") {
    c.blocks = {1, 1};
    c.channels = {16, 32};
    c.heads = {2, 4};
    c.k_neighbors = 16;
    c.scale_s = 4;
    c.task = Task::kSegmentation;
    c.num_classes = 4;
    c.in_channels = 3;
  } else if (name == "mini") {
    c.blocks = {1, 1};
    c.channels = {4, 8};
    c.heads = {2, 2};
    c.k_neighbors = 4;
    c.scale_s = 2;
    c.task = Task::kSegmentation;
    c.num_classes = 3;
    c.in_channels = 3;
  } else if (name == "modelnet-like") {
    c.blocks = {1, 1, 3, 1};
    c.channels = {64, 128, 256, 512};
    c.heads = {4, 8, 16, 32};
    c.k_neighbors = 16;
    c.scale_s = 4;
    c.num_classes = 40;
    c.in_channels = 3;
  } else if (name == "s3dis-like" || name == "cdformer-l") {
    scene({48, 96, 192, 384}, {3, 6, 12, 24});
  } else if (name == "cdformer-s") {
    scene({16, 32, 64, 128}, {1, 2, 4, 8});
  } else if (name == "cdformer-b") {
    scene({32, 64, 128, 256}, {2, 4, 8, 16});
  } else if (name.rfind("table4-", 0) == 0) {
    scene({48, 96, 192, 384}, {3, 6, 12, 24});
    const std::string v = name.substr(7);
    if (v == "i") {
      c.use_collect = false;
      c.use_distribute = false;
    } else if (v == "ii") {
      c.use_distribute = false;
    } else if (v == "iii") {
      c.use_collect = false;
    } else if (v != "iv") {
      throw ConfigError("unknown preset '" + name + "'");
    }
  } else if (name.rfind("table5-", 0) == 0) {
    scene({48, 96, 192, 384}, {3, 6, 12, 24});
    const std::string v = name.substr(7);
    if (v == "i") {
      c.position_encoding = PositionEncoding::kNone;
    } else if (v == "ii") {
      c.position_encoding = PositionEncoding::kRelative;
    } else if (v == "iii") {
      c.position_encoding = PositionEncoding::kContextAware;
    } else if (v == "iv") {
      c.position_encoding = PositionEncoding::kAbsolute;
    } else {
      throw ConfigError("unknown preset '" + name + "'");
    }
  } else if (name == "table7-k4" || name == "table7-k8" || name == "table7-k16") {
    scene({48, 96, 192, 384}, {3, 6, 12, 24});
    c.k_neighbors = static_cast<std::size_t>(std::stoul(name.substr(8)));
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return c;
}

}  // namespace cdformer
