#include "panformer/run_config.hpp"

#include <fstream>

#include "json_util.hpp"

namespace panformer {

void DataConfig::validate() const {
  if (!(sigma > 0)) throw ConfigError("data.sigma must be positive");
  if (bit_depth < 1 || bit_depth > 16) throw ConfigError("data.bit_depth must be in [1, 16]");
  if (bands < 1) throw ConfigError("data.bands must be >= 1");
  if (patch < 4 || patch % 4 != 0) throw ConfigError("data.patch must be a positive multiple of 4");
  if (count < 1) throw ConfigError("data.count must be >= 1");
  if (stride < 0 || stride % 4 != 0) throw ConfigError("data.stride must be a non-negative multiple of 4");
}

nlohmann::json DataConfig::to_json() const {
  return {{"sigma", sigma}, {"bit_depth", bit_depth}, {"bands", bands}, {"patch", patch},
          {"count", count}, {"stride", stride},       {"seed", seed}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"sigma", "bit_depth", "bands", "patch", "count", "stride", "seed"}, "data");
  DataConfig c;
  detail::read_field(j, "sigma", c.sigma, "data");
  detail::read_field(j, "bit_depth", c.bit_depth, "data");
  detail::read_field(j, "bands", c.bands, "data");
  detail::read_field(j, "patch", c.patch, "data");
  detail::read_field(j, "count", c.count, "data");
  detail::read_field(j, "stride", c.stride, "data");
  detail::read_field(j, "seed", c.seed, "data");
  c.validate();
  return c;
}

PathsConfig PathsConfig::from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"data", "out"}, "paths");
  PathsConfig c;
  detail::read_field(j, "data", c.data, "paths");
  detail::read_field(j, "out", c.out, "paths");
  return c;
}

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("precision must be \"f32\" or \"f64\", got \"" + s + "\"");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (data.bands != model.bands)
    throw ConfigError("data.bands (" + std::to_string(data.bands) + ") differs from model.bands (" +
                      std::to_string(model.bands) + ")");
}

nlohmann::json RunConfig::to_json() const {
  return {{"model", model.to_json()},
          {"train", train.to_json()},
          {"data", data.to_json()},
          {"paths", paths.to_json()},
          {"precision", to_string(precision)}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"model", "train", "data", "paths", "precision"}, "config");
  RunConfig c;
  if (j.contains("model")) c.model = PanFormerConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
  if (j.contains("paths")) c.paths = PathsConfig::from_json(j.at("paths"));
  std::string prec = to_string(c.precision);
  detail::read_field(j, "precision", prec, "config");
  c.precision = precision_from_string(prec);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw LookupError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::echo(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "resolved_config.json");
  f << to_json().dump(2) << "\n";
  if (!f) throw Error("io", "cannot write " + (dir / "resolved_config.json").string());
}

}  // namespace panformer
