#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "panformer/data.hpp"
#include "panformer/model.hpp"

namespace panformer {

struct TrainConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch = 4;
  std::int64_t max_iters = 200000;
  double decay = 0.99;
  std::int64_t decay_every = 10000;
  std::uint64_t seed = 42;
  std::int64_t checkpoint_every = 10000;
  std::int64_t log_every = 100;
  std::string loss_reduction = "mean";

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// lr0 * decay^floor(iter / decay_every).
double lr_at(std::int64_t iter, const TrainConfig& cfg);

/// Bias-corrected Adam moments, one pair per parameter in registry order.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;

  static AdamState zeros_like(const ParameterSet<T>& params);
};

/// One Adam update using the gradients currently held by `params`.
/// Throws ContractError when a parameter has no gradient buffer.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr, const TrainConfig& cfg);

/// Normalized sample: PAN [1,S,S,1], LR MS [1,S/4,S/4,B], GT [1,S,S,B].
template <typename T>
struct TrainSample {
  Tensor<T> pan, ms, gt;
};

template <typename T>
TrainSample<T> to_sample(const PatchPair& p);

template <typename T>
std::vector<TrainSample<T>> load_samples(const DatasetManifest& manifest);

struct LossRecord {
  std::int64_t iter = 0;
  double lr = 0;
  double loss = 0;
  double wall_ms = 0;

  nlohmann::json to_json() const { return {{"iter", iter}, {"lr", lr}, {"loss", loss}, {"wall_ms", wall_ms}}; }
};

/// Batch indices of iteration `iter`: uniform with replacement, a pure
/// function of (seed, iter, dataset size).
std::vector<std::size_t> sample_batch(std::uint64_t seed, std::int64_t iter, std::size_t dataset_size, int batch);

/// L1-loss optimization loop. Single-threaded with respect to the model.
template <typename T>
class Trainer {
 public:
  Trainer(PanFormerModel<T>& model, std::vector<TrainSample<T>> data, TrainConfig cfg);

  /// Runs iteration `iteration()` and advances. Throws Error("numeric") on a
  /// non-finite loss without touching the weights.
  LossRecord step();

  PanFormerModel<T>& model() { return model_; }
  const PanFormerModel<T>& model() const { return model_; }
  AdamState<T>& adam() { return adam_; }
  const AdamState<T>& adam() const { return adam_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t iteration() const { return iter_; }
  void set_iteration(std::int64_t it) { iter_ = it; }

 private:
  PanFormerModel<T>& model_;
  std::vector<TrainSample<T>> data_;
  TrainConfig cfg_;
  AdamState<T> adam_;
  std::int64_t iter_ = 0;
};

struct TrainResult {
  std::vector<LossRecord> log;
  std::filesystem::path checkpoint;
};

/// Full loop from the trainer's current iteration to cfg.max_iters. Writes
/// <out>/loss_log.jsonl (every log_every iterations and the last one) and
/// <out>/checkpoint.pfck (every checkpoint_every iterations and at the end).
/// On a non-finite loss the last written checkpoint is left in place and the
/// error propagates.
template <typename T>
TrainResult train(Trainer<T>& trainer, const std::filesystem::path& out_dir,
                  const std::function<void(const LossRecord&)>& on_step = {});

}  // namespace panformer
