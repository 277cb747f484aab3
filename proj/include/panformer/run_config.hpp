#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "panformer/model.hpp"
#include "panformer/training.hpp"

namespace panformer {

struct DataConfig {
  double sigma = 1.0;
  int bit_depth = 10;
  int bands = 4;
  int patch = 64;            // PAN / GT patch side
  std::int64_t count = 24000;  // random crops for the train split
  int stride = 0;            // ordered crops for the test split; 0 = patch
  std::uint64_t seed = 42;

  void validate() const;
  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct PathsConfig {
  std::string data;
  std::string out;

  nlohmann::json to_json() const { return {{"data", data}, {"out", out}}; }
  static PathsConfig from_json(const nlohmann::json& j);
};

enum class Precision { f32, f64 };
std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

struct RunConfig {
  PanFormerConfig model;
  TrainConfig train;
  DataConfig data;
  PathsConfig paths;
  Precision precision = Precision::f32;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  /// Writes <dir>/resolved_config.json.
  void echo(const std::filesystem::path& dir) const;
};

}  // namespace panformer
