#pragma once

#include <json.hpp>
#include <fstream>
#include <set>
#include <string>

#include "mstgcn/training.hpp"

namespace mstgcn {

/// Parsed run configuration: model + data + train sections plus the run
/// seed. See the README for the key reference; unknown keys are rejected.
struct RunConfig {
  uint64_t seed = 0;
  NetworkConfig network;
  std::string preset;  // empty when blocks were given explicitly
  Preprocess data;
  TrainConfig train;
  std::string precision = "f32";  // f32 | f64
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& obj, const std::set<std::string>& allowed,
                       const std::string& section) {
  if (!obj.is_object()) {
    throw ConfigError("config section \"" + section + "\" must be an object");
  }
  std::string unknown;
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      if (!unknown.empty()) unknown += ", ";
      unknown += "\"" + key + "\"";
    }
  }
  if (!unknown.empty()) {
    throw ConfigError("unknown key(s) in \"" + section + "\": " + unknown);
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for \"" + key + "\": " + e.what());
  }
}

template <typename T>
T get_required(const json& obj, const std::string& key,
               const std::string& section) {
  if (!obj.contains(key)) {
    throw ConfigError("missing required key \"" + key + "\" in \"" + section +
                      "\"");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for \"" + key + "\": " + e.what());
  }
}

inline BlockSpec parse_block_spec(const json& j, int index, int kernel_t) {
  check_keys(j,
             {"spatial", "temporal", "fused", "in_channels", "out_channels",
              "s", "kernel_t", "stride", "residual"},
             "model.blocks[" + std::to_string(index) + "]");
  BlockSpec spec;
  const std::string spatial = get_or<std::string>(j, "spatial", "regular");
  const std::string temporal = get_or<std::string>(j, "temporal", "regular");
  const std::string fused = get_or<std::string>(j, "fused", "none");
  if (spatial == "ms") spec.spatial_kind = SpatialKind::ms;
  else if (spatial != "regular") {
    throw ConfigError("block spatial kind must be regular or ms");
  }
  if (temporal == "mt") spec.temporal_kind = TemporalKind::mt;
  else if (temporal != "regular") {
    throw ConfigError("block temporal kind must be regular or mt");
  }
  if (fused == "str") spec.fused = FusedKind::str;
  else if (fused != "none") {
    throw ConfigError("block fused kind must be none or str");
  }
  spec.in_channels = get_required<int>(j, "in_channels", "model.blocks");
  spec.out_channels = get_required<int>(j, "out_channels", "model.blocks");
  spec.s = get_or<int>(j, "s", 1);
  spec.kernel_t = get_or<int>(j, "kernel_t", kernel_t);
  spec.stride = get_or<int>(j, "stride", 1);
  spec.has_residual = get_or<bool>(j, "residual", true);
  return spec;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::get_or;
  using detail::get_required;

  check_keys(j, {"seed", "model", "data", "train"}, "<root>");
  RunConfig cfg;
  cfg.seed = get_or<uint64_t>(j, "seed", 0);

  if (!j.contains("model")) {
    throw ConfigError("missing required \"model\" section");
  }
  const auto& model = j.at("model");
  check_keys(model,
             {"preset", "family", "c", "s", "blocks", "topology",
              "num_classes", "in_channels", "max_persons", "kernel_t",
              "normalization", "alpha"},
             "model");
  cfg.network.topology = get_required<std::string>(model, "topology", "model");
  cfg.network.num_classes = get_required<int>(model, "num_classes", "model");
  cfg.network.in_channels = get_or<int>(model, "in_channels", 3);
  cfg.network.max_persons = get_or<int>(model, "max_persons", 2);
  cfg.network.normalization = parse_normalization(
      get_or<std::string>(model, "normalization", "as-printed"));
  cfg.network.alpha = get_or<double>(model, "alpha", 1e-3);
  cfg.network.seed = cfg.seed;
  const int kernel_t = get_or<int>(model, "kernel_t", 9);

  const bool has_preset = model.contains("preset");
  const bool has_family = model.contains("family") || model.contains("c") ||
                          model.contains("s");
  const bool has_blocks = model.contains("blocks");
  if (int(has_preset) + int(has_family) + int(has_blocks) != 1) {
    throw ConfigError("model needs exactly one of: \"preset\", "
                      "\"family\"+\"c\"+\"s\", or \"blocks\"");
  }
  if (has_preset) {
    cfg.preset = get_required<std::string>(model, "preset", "model");
  } else if (has_family) {
    const auto family = get_required<std::string>(model, "family", "model");
    const int c = get_required<int>(model, "c", "model");
    const int s = get_required<int>(model, "s", "model");
    cfg.preset = family + "-" + std::to_string(c) + "c-" + std::to_string(s) +
                 "s";
  }
  if (!cfg.preset.empty()) {
    cfg.network.blocks =
        preset_blocks(cfg.preset, cfg.network.in_channels, kernel_t);
  } else {
    const auto& blocks = model.at("blocks");
    if (!blocks.is_array()) {
      throw ConfigError("model.blocks must be an array");
    }
    for (size_t i = 0; i < blocks.size(); ++i) {
      cfg.network.blocks.push_back(
          detail::parse_block_spec(blocks[i], int(i), kernel_t));
    }
  }

  if (j.contains("data")) {
    const auto& data = j.at("data");
    check_keys(data, {"stream", "center", "pad_to", "window"}, "data");
    cfg.data.stream =
        parse_stream_kind(get_or<std::string>(data, "stream", "joint"));
    cfg.data.center = get_or<bool>(data, "center", true);
    cfg.data.pad_to = get_or<int>(data, "pad_to", 300);
    if (data.contains("window") && !data.at("window").is_null()) {
      cfg.data.window = data.at("window").get<int>();
    }
  }

  if (j.contains("train")) {
    const auto& train = j.at("train");
    check_keys(train,
               {"lr0", "momentum", "batch_size", "epochs", "decay_epochs",
                "decay_factor", "weight_decay", "precision",
                "lr_batch_reference"},
               "train");
    cfg.train.lr0 = get_or<double>(train, "lr0", 0.1);
    cfg.train.momentum = get_or<double>(train, "momentum", 0.9);
    cfg.train.batch_size = get_or<int>(train, "batch_size", 24);
    cfg.train.epochs = get_or<int>(train, "epochs", 110);
    cfg.train.decay_epochs = get_or<std::vector<int>>(
        train, "decay_epochs", std::vector<int>{50, 70, 90});
    cfg.train.decay_factor = get_or<double>(train, "decay_factor", 0.1);
    cfg.train.weight_decay = get_or<double>(train, "weight_decay", 0.0);
    // Opt-in linear lr/batch scaling: lr0 *= batch_size / reference. Off
    // unless the key is present.
    if (train.contains("lr_batch_reference") &&
        !train.at("lr_batch_reference").is_null()) {
      const int reference = train.at("lr_batch_reference").get<int>();
      if (reference < 1) {
        throw ConfigError("train.lr_batch_reference must be >= 1");
      }
      cfg.train.lr0 *= double(cfg.train.batch_size) / double(reference);
    }
    cfg.precision = get_or<std::string>(train, "precision", "f32");
    if (cfg.precision != "f32" && cfg.precision != "f64") {
      throw ConfigError("train.precision must be \"f32\" or \"f64\"");
    }
  }
  cfg.train.seed = cfg.seed;
  validate_train_config(cfg.train);
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace mstgcn
