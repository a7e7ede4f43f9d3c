#pragma once

// Run configuration document shared by all CLI commands.
//
// {
//   "scene":     {...SceneSpec fields, "count", "n_static": [lo, hi], "n_dynamic": [lo, hi]},
//   "model":     {"family": "Diff2", "cfg": "Ext2", ...},
//   "loss":      {"lambda_ce", "lambda_l2", "lambda_ssim", "eps", "ssim_scales"},
//   "optimizer": {"lr", "beta1", "beta2", "eps"},
//   "train":     {"epochs", "seed", "batch_size", "clip_norm", "halve_on_plateau", "plateau_patience"},
//   "eval":      {"threshold"},
//   "io":        {"data", "checkpoint", "out"}
// }
//
// Every key is optional; unknown keys are rejected.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>

#include "json.hpp"
#include "ogmpred/errors.hpp"
#include "ogmpred/loss.hpp"
#include "ogmpred/model.hpp"
#include "ogmpred/nn.hpp"
#include "ogmpred/scene.hpp"
#include "ogmpred/train.hpp"

namespace ogmpred {

struct IoConfig {
  std::string data;
  std::string checkpoint;
  std::string out;
};

struct RunConfig {
  DatasetSpec scene;
  ModelConfig model;
  LossConfig loss;
  nn::AdamConfig optimizer;
  TrainConfig train;
  double threshold = 0.5;
  IoConfig io;

  RunConfig() {
    scene.count = 1;
    model = ModelConfig::row(Family::Diff2, ConfigKind::Ext2, scene.base.height, scene.base.width, 32);
  }

  void validate() const {
    scene.validate();
    model.validate();
    loss.validate();
    train.validate();
    if (!(optimizer.lr > 0.0) || !(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
        !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0) || !(optimizer.eps > 0.0))
      throw ConfigError("optimizer: need lr > 0, beta1/beta2 in [0,1), eps > 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0,1)");
    if (model.height != scene.base.height || model.width != scene.base.width)
      throw ConfigError("model grid differs from scene grid");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const char* section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : keys) ok = ok || key == k;
    if (!ok) throw ConfigError(std::string("unknown key '") + key + "' in config section '" + section + "'");
  }
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

inline void read_range(const nlohmann::json& j, const char* key, double& lo, double& hi) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 2) throw ConfigError(std::string(key) + " must be a [lo, hi] pair");
  lo = a[0].get<double>();
  hi = a[1].get<double>();
}

inline void read_range(const nlohmann::json& j, const char* key, int& lo, int& hi) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 2) throw ConfigError(std::string(key) + " must be a [lo, hi] pair");
  lo = a[0].get<int>();
  hi = a[1].get<int>();
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read;
  RunConfig rc;
  try {
    check_keys(j, "root", {"scene", "model", "loss", "optimizer", "train", "eval", "io"});
    if (j.contains("scene")) {
      const auto& s = j.at("scene");
      check_keys(s, "scene", {"seed", "height", "width", "cell_size", "frames", "tau_init", "dt", "speed",
                              "max_yaw_rate", "ego", "fov_half_angle", "length", "width_range", "count",
                              "n_static", "n_dynamic", "max_retries"});
      auto& b = rc.scene.base;
      read(s, "seed", b.seed);
      read(s, "height", b.height);
      read(s, "width", b.width);
      read(s, "cell_size", b.cell_size);
      read(s, "frames", b.frames);
      read(s, "tau_init", b.tau_init);
      read(s, "dt", b.dt);
      detail::read_range(s, "speed", b.speed_min, b.speed_max);
      read(s, "max_yaw_rate", b.max_yaw_rate);
      read(s, "fov_half_angle", b.fov_half_angle);
      detail::read_range(s, "length", b.length_min, b.length_max);
      detail::read_range(s, "width_range", b.width_min, b.width_max);
      read(s, "max_retries", b.max_retries);
      read(s, "count", rc.scene.count);
      detail::read_range(s, "n_static", rc.scene.n_static_min, rc.scene.n_static_max);
      detail::read_range(s, "n_dynamic", rc.scene.n_dynamic_min, rc.scene.n_dynamic_max);
      if (s.contains("ego")) {
        const auto& e = s.at("ego");
        check_keys(e, "scene.ego", {"kind", "speed", "yaw_rate"});
        if (e.contains("kind")) b.ego.kind = ego_motion_from_string(e.at("kind").get<std::string>());
        read(e, "speed", b.ego.speed);
        read(e, "yaw_rate", b.ego.yaw_rate);
      }
    }
    rc.model.height = rc.scene.base.height;
    rc.model.width = rc.scene.base.width;
    if (j.contains("model")) {
      nlohmann::json m = j.at("model");
      if (m.is_object()) {
        if (!m.contains("height")) m["height"] = rc.scene.base.height;
        if (!m.contains("width")) m["width"] = rc.scene.base.width;
      }
      rc.model = model_config_from_json(m);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      check_keys(l, "loss", {"lambda_ce", "lambda_l2", "lambda_ssim", "eps", "ssim_scales"});
      read(l, "lambda_ce", rc.loss.lambda_ce);
      read(l, "lambda_l2", rc.loss.lambda_l2);
      read(l, "lambda_ssim", rc.loss.lambda_ssim);
      read(l, "eps", rc.loss.eps);
      read(l, "ssim_scales", rc.loss.ssim_scales);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      check_keys(o, "optimizer", {"lr", "beta1", "beta2", "eps"});
      read(o, "lr", rc.optimizer.lr);
      read(o, "beta1", rc.optimizer.beta1);
      read(o, "beta2", rc.optimizer.beta2);
      read(o, "eps", rc.optimizer.eps);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, "train", {"epochs", "seed", "batch_size", "clip_norm", "halve_on_plateau", "plateau_patience"});
      read(t, "epochs", rc.train.epochs);
      read(t, "seed", rc.train.seed);
      read(t, "batch_size", rc.train.batch_size);
      read(t, "clip_norm", rc.train.clip_norm);
      read(t, "halve_on_plateau", rc.train.halve_on_plateau);
      read(t, "plateau_patience", rc.train.plateau_patience);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      check_keys(e, "eval", {"threshold"});
      read(e, "threshold", rc.threshold);
    }
    if (j.contains("io")) {
      const auto& io = j.at("io");
      check_keys(io, "io", {"data", "checkpoint", "out"});
      read(io, "data", rc.io.data);
      read(io, "checkpoint", rc.io.checkpoint);
      read(io, "out", rc.io.out);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// The effective configuration, every key spelled out.
inline nlohmann::ordered_json run_config_json(const RunConfig& rc) {
  nlohmann::ordered_json j;
  const auto& b = rc.scene.base;
  j["scene"] = {{"seed", b.seed},
                {"height", b.height},
                {"width", b.width},
                {"cell_size", b.cell_size},
                {"frames", b.frames},
                {"tau_init", b.tau_init},
                {"dt", b.dt},
                {"speed", {b.speed_min, b.speed_max}},
                {"max_yaw_rate", b.max_yaw_rate},
                {"ego", {{"kind", to_string(b.ego.kind)}, {"speed", b.ego.speed}, {"yaw_rate", b.ego.yaw_rate}}},
                {"fov_half_angle", b.fov_half_angle},
                {"length", {b.length_min, b.length_max}},
                {"width_range", {b.width_min, b.width_max}},
                {"count", rc.scene.count},
                {"n_static", {rc.scene.n_static_min, rc.scene.n_static_max}},
                {"n_dynamic", {rc.scene.n_dynamic_min, rc.scene.n_dynamic_max}},
                {"max_retries", b.max_retries}};
  j["model"] = model_config_json(rc.model);
  j["loss"] = {{"lambda_ce", rc.loss.lambda_ce},
               {"lambda_l2", rc.loss.lambda_l2},
               {"lambda_ssim", rc.loss.lambda_ssim},
               {"eps", rc.loss.eps},
               {"ssim_scales", rc.loss.ssim_scales}};
  j["optimizer"] = {{"lr", rc.optimizer.lr},
                    {"beta1", rc.optimizer.beta1},
                    {"beta2", rc.optimizer.beta2},
                    {"eps", rc.optimizer.eps}};
  j["train"] = {{"epochs", rc.train.epochs},
                {"seed", rc.train.seed},
                {"batch_size", rc.train.batch_size},
                {"clip_norm", rc.train.clip_norm},
                {"halve_on_plateau", rc.train.halve_on_plateau},
                {"plateau_patience", rc.train.plateau_patience}};
  j["eval"] = {{"threshold", rc.threshold}};
  j["io"] = {{"data", rc.io.data}, {"checkpoint", rc.io.checkpoint}, {"out", rc.io.out}};
  return j;
}

/// Machine-readable description: JSON-Schema-style types plus the defaults.
inline nlohmann::ordered_json config_schema() {
  const RunConfig defaults;
  const auto dj = run_config_json(defaults);
  nlohmann::ordered_json schema;
  schema["$schema"] = "https://json-schema.org/draft/2020-12/schema";
  schema["title"] = "ogmpred run configuration";
  schema["type"] = "object";
  schema["additionalProperties"] = false;
  auto type_of = [](const nlohmann::ordered_json& v) -> nlohmann::ordered_json {
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
    if (v.is_number()) return "number";
    if (v.is_string()) return "string";
    if (v.is_array()) return {{"type", "array"}, {"minItems", 2}, {"maxItems", 2}};
    return "object";
  };
  for (const auto& [section, body] : dj.items()) {
    nlohmann::ordered_json s;
    s["type"] = "object";
    s["additionalProperties"] = false;
    for (const auto& [key, value] : body.items()) {
      nlohmann::ordered_json p;
      const auto t = type_of(value);
      if (t.is_object()) p = t;
      else p["type"] = t;
      p["default"] = value;
      s["properties"][key] = p;
    }
    schema["properties"][section] = s;
  }
  schema["properties"]["model"]["properties"]["family"]["enum"] = {"ED", "ED_Di", "Diff1", "Diff2"};
  schema["properties"]["model"]["properties"]["cfg"]["enum"] = {"Base", "Ext1", "Ext2"};
  schema["properties"]["model"]["properties"]["mfe"]["enum"] = {"none", "farneback", "two_channel_diff"};
  schema["properties"]["model"]["properties"]["classifier"]["enum"] = {"none", "conv2", "convlstm1"};
  schema["properties"]["scene"]["properties"]["ego"]["properties"]["kind"]["enum"] = {"static", "straight", "arc"};
  return schema;
}

}  // namespace ogmpred
