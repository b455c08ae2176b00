#pragma once

// Run configuration: one JSON document drives every CLI command.  Unknown
// keys are rejected, every field has a default, and the fully resolved
// document (defaults + user overrides) is echoed next to the outputs so a run
// can be reproduced from its artifacts alone.

#include <json.hpp>
#include <string>

#include "geohet/geodata.hpp"
#include "geohet/model.hpp"
#include "geohet/training.hpp"

namespace geohet::runconfig {

// File locations; empty entries resolve to standard names under out_dir.
struct RunPaths {
  std::string out_dir = "out";
  std::string dataset;
  std::string graph;
  std::string checkpoint;
  std::string metrics_csv;
  std::string weights_csv;
  std::string eval_json;
  std::string baseline_csv;

  std::string join(const std::string& explicit_path,
                   const std::string& fallback_name) const;
  std::string dataset_path() const { return join(dataset, "dataset.csv"); }
  std::string graph_path() const { return join(graph, "graph.json"); }
  std::string checkpoint_path() const { return join(checkpoint, "model.ckpt"); }
  std::string metrics_path() const { return join(metrics_csv, "metrics.csv"); }
  std::string weights_path() const { return join(weights_csv, "weights.csv"); }
  std::string eval_path() const { return join(eval_json, "eval.json"); }
  std::string baseline_path() const {
    return join(baseline_csv, "baseline_coefs.csv");
  }
  std::string resolved_config_path() const {
    return join("", "config.resolved.json");
  }
};

struct RunConfig {
  geodata::GenConfig data;
  int split_stride = 6;
  int split_offset = 3;
  bool normalize = true;

  ModelConfig model;  // graph/encoder/condenc/decoder sections
  TrainConfig train;
  bool deterministic = false;
  RunPaths paths;

  void validate() const;  // errors name the JSON field
};

// The complete default document (also the key/type schema).
nlohmann::json default_config_json();

struct LoadedConfig {
  RunConfig cfg;
  nlohmann::json resolved;  // defaults with user overrides applied
};

// Strict merge of `user` over the defaults: unknown keys and type mismatches
// raise ConfigError naming the offending key path.
LoadedConfig parse_config(const nlohmann::json& user);

// Empty path -> pure defaults.
LoadedConfig load_config_file(const std::string& path);

// FNV-1a of the canonical dump, as 16 lowercase hex digits.
std::string config_digest(const nlohmann::json& resolved);

}  // namespace geohet::runconfig

namespace geohet {
using namespace runconfig;
}
