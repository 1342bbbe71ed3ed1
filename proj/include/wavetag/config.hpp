#pragma once

// Run configuration: a JSON file with sections {data, model, train, eval}.
// Unknown keys are rejected at every level. Relative data paths resolve
// against the config file's directory.

#include <filesystem>
#include <fstream>
#include <string>

#include "wavetag/json_util.hpp"
#include "wavetag/model.hpp"
#include "wavetag/training.hpp"

namespace wavetag {

struct DataConfig {
  std::filesystem::path train_manifest;
  std::filesystem::path eval_manifest;
  std::filesystem::path vocab;
};

struct EvalConfig {
  std::size_t batch_size = 16;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  bool n_classes_given = false;  // model.head.n_classes present in the file
};

inline RunConfig run_config_from_json(const Json& j, const std::filesystem::path& base_dir) {
  require_known_keys(j, {"data", "model", "train", "eval"}, "config");
  RunConfig rc;
  if (j.contains("data")) {
    const auto& d = j["data"];
    require_known_keys(d, {"train_manifest", "eval_manifest", "vocab"}, "data");
    auto path_key = [&](const char* key, std::filesystem::path& out) {
      std::string s;
      read_key(d, key, s, "data");
      if (s.empty()) return;
      std::filesystem::path p(s);
      out = p.is_relative() ? (base_dir / p).lexically_normal() : p;
    };
    path_key("train_manifest", rc.data.train_manifest);
    path_key("eval_manifest", rc.data.eval_manifest);
    path_key("vocab", rc.data.vocab);
  }
  if (j.contains("model")) {
    rc.model = model_config_from_json(j["model"]);
    rc.n_classes_given = j["model"].contains("head") && j["model"]["head"].contains("n_classes");
  }
  if (j.contains("train")) rc.train = train_config_from_json(j["train"]);
  if (j.contains("eval")) {
    require_known_keys(j["eval"], {"batch_size"}, "eval");
    read_key(j["eval"], "batch_size", rc.eval.batch_size, "eval");
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

inline Json to_json(const RunConfig& rc) {
  Json j;
  j["data"] = {{"train_manifest", rc.data.train_manifest.string()},
               {"eval_manifest", rc.data.eval_manifest.string()},
               {"vocab", rc.data.vocab.string()}};
  j["model"] = to_json(rc.model);
  j["train"] = to_json(rc.train);
  j["eval"] = {{"batch_size", rc.eval.batch_size}};
  return j;
}

}  // namespace wavetag
