#include "panformer/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include "json_util.hpp"
#include "panformer/checkpoint.hpp"
#include "panformer/ops.hpp"
#include "panformer/rng.hpp"

namespace panformer {

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("train.lr0 must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (max_iters < 0) throw ConfigError("train.max_iters must be >= 0");
  if (!(decay > 0)) throw ConfigError("train.decay must be positive");
  if (decay_every < 1) throw ConfigError("train.decay_every must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
  if (loss_reduction != "mean") throw ConfigError("train.loss_reduction must be \"mean\", got \"" + loss_reduction + "\"");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr0", lr0},     {"beta1", beta1},
          {"beta2", beta2}, {"eps", eps},
          {"batch", batch}, {"max_iters", max_iters},
          {"decay", decay}, {"decay_every", decay_every},
          {"seed", seed},   {"checkpoint_every", checkpoint_every},
          {"log_every", log_every}, {"loss_reduction", loss_reduction}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"lr0", "beta1", "beta2", "eps", "batch", "max_iters", "decay", "decay_every", "seed",
                               "checkpoint_every", "log_every", "loss_reduction"},
                              "train");
  TrainConfig c;
  detail::read_field(j, "lr0", c.lr0, "train");
  detail::read_field(j, "beta1", c.beta1, "train");
  detail::read_field(j, "beta2", c.beta2, "train");
  detail::read_field(j, "eps", c.eps, "train");
  detail::read_field(j, "batch", c.batch, "train");
  detail::read_field(j, "max_iters", c.max_iters, "train");
  detail::read_field(j, "decay", c.decay, "train");
  detail::read_field(j, "decay_every", c.decay_every, "train");
  detail::read_field(j, "seed", c.seed, "train");
  detail::read_field(j, "checkpoint_every", c.checkpoint_every, "train");
  detail::read_field(j, "log_every", c.log_every, "train");
  detail::read_field(j, "loss_reduction", c.loss_reduction, "train");
  c.validate();
  return c;
}

double lr_at(std::int64_t iter, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(iter / cfg.decay_every));
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const ParameterSet<T>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(Tensor<T>::zeros(p.value().shape()));
    s.v.push_back(Tensor<T>::zeros(p.value().shape()));
  }
  return s;
}

template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr, const TrainConfig& cfg) {
  if (params.size() == 0) throw ContractError("optimizer step on an empty parameter set");
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("optimizer state does not match the parameter set");
  for (const auto& p : params)
    if (!p.var.node()->has_grad()) throw ContractError("optimizer step before backward: no gradient for " + p.name);

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<T>& var = params[i].var;
    T* w = var.mutable_value().ptr();
    const T* g = var.grad().ptr();
    T* m = state.m[i].ptr();
    T* v = state.v[i].ptr();
    const std::int64_t n = var.numel();
    for (std::int64_t k = 0; k < n; ++k) {
      const double gk = g[k];
      const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      w[k] = static_cast<T>(w[k] - lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps));
    }
  }
}

template <typename T>
TrainSample<T> to_sample(const PatchPair& p) {
  p.validate();
  return {normalize<T>(p.pan), normalize<T>(p.lrms), normalize<T>(p.gt)};
}

template <typename T>
std::vector<TrainSample<T>> load_samples(const DatasetManifest& manifest) {
  if (manifest.entries.empty()) throw ConfigError("training manifest has no entries");
  std::vector<TrainSample<T>> out;
  out.reserve(manifest.entries.size());
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) out.push_back(to_sample<T>(manifest.load_entry(i)));
  return out;
}

std::vector<std::size_t> sample_batch(std::uint64_t seed, std::int64_t iter, std::size_t dataset_size, int batch) {
  if (dataset_size == 0) throw ConfigError("cannot sample a batch from an empty dataset");
  std::mt19937_64 rng(derive_seed(seed, "sampling", static_cast<std::uint64_t>(iter)));
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

namespace {

template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& items) {
  Shape s = items.front()->shape();
  const std::int64_t per = items.front()->numel();
  s[0] = static_cast<std::int64_t>(items.size());
  Tensor<T> out(s);
  T* dst = out.ptr();
  for (const auto* t : items) {
    if (t->shape() != items.front()->shape())
      throw DimensionError("batch items differ in shape: " + shape_str(t->shape()) + " vs " +
                           shape_str(items.front()->shape()));
    std::copy(t->ptr(), t->ptr() + per, dst);
    dst += per;
  }
  return out;
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(PanFormerModel<T>& model, std::vector<TrainSample<T>> data, TrainConfig cfg)
    : model_(model), data_(std::move(data)), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (data_.empty()) throw ConfigError("training set is empty");
  adam_ = AdamState<T>::zeros_like(model_.parameters());
}

template <typename T>
LossRecord Trainer<T>::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto idx = sample_batch(cfg_.seed, iter_, data_.size(), cfg_.batch);
  std::vector<const Tensor<T>*> pans, mss, gts;
  for (auto i : idx) {
    pans.push_back(&data_[i].pan);
    mss.push_back(&data_[i].ms);
    gts.push_back(&data_[i].gt);
  }
  Var<T> pan(stack(pans)), ms(stack(mss)), gt(stack(gts));

  Tape<T> tape;
  Var<T> loss;
  {
    TapeScope<T> scope(tape);
    loss = ops::l1_loss(model_.forward(pan, ms), gt);
  }
  const double value = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(value))
    throw Error("numeric", "non-finite loss at iteration " + std::to_string(iter_));

  model_.parameters().zero_grad();
  tape.backward(loss);
  const double lr = lr_at(iter_, cfg_);
  adam_step(model_.parameters(), adam_, lr, cfg_);

  LossRecord rec;
  rec.iter = iter_;
  rec.lr = lr;
  rec.loss = value;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  ++iter_;
  return rec;
}

template <typename T>
TrainResult train(Trainer<T>& trainer, const std::filesystem::path& out_dir,
                  const std::function<void(const LossRecord&)>& on_step) {
  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.checkpoint = out_dir / "checkpoint.pfck";
  const auto log_path = out_dir / "loss_log.jsonl";
  std::ofstream log(log_path, trainer.iteration() == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("io", "cannot open " + log_path.string());

  const auto& cfg = trainer.config();
  while (trainer.iteration() < cfg.max_iters) {
    LossRecord rec;
    try {
      rec = trainer.step();
    } catch (const Error& e) {
      if (e.kind() == "numeric") log << nlohmann::json{{"iter", trainer.iteration()}, {"error", e.what()}}.dump() << "\n";
      throw;
    }
    result.log.push_back(rec);
    if (on_step) on_step(rec);
    const bool last = trainer.iteration() == cfg.max_iters;
    if (rec.iter % cfg.log_every == 0 || last) log << rec.to_json().dump() << "\n" << std::flush;
    if (trainer.iteration() % cfg.checkpoint_every == 0 || last) save_checkpoint(result.checkpoint, snapshot(trainer));
  }
  if (!std::filesystem::exists(result.checkpoint)) save_checkpoint(result.checkpoint, snapshot(trainer));
  return result;
}

#define PANFORMER_INSTANTIATE(T)                                                                       \
  template struct AdamState<T>;                                                                        \
  template void adam_step<T>(ParameterSet<T>&, AdamState<T>&, double, const TrainConfig&);            \
  template TrainSample<T> to_sample<T>(const PatchPair&);                                              \
  template std::vector<TrainSample<T>> load_samples<T>(const DatasetManifest&);                        \
  template class Trainer<T>;                                                                           \
  template TrainResult train<T>(Trainer<T>&, const std::filesystem::path&,                             \
                                const std::function<void(const LossRecord&)>&);
PANFORMER_INSTANTIATE(float)
PANFORMER_INSTANTIATE(double)
#undef PANFORMER_INSTANTIATE

}  // namespace panformer
