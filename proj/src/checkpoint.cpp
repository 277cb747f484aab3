#include "panformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace panformer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using R = ParseError::Reason;

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

class Writer {
 public:
  std::vector<std::uint8_t> bytes;

  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_raw(s.data(), s.size());
  }
  template <typename T>
  void put_entry(const std::string& name, const Tensor<T>& t) {
    put_string(name);
    put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put(static_cast<std::uint32_t>(d));
    put_raw(t.ptr(), sizeof(T) * static_cast<std::size_t>(t.numel()));
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw ParseError(R::truncated, std::string("checkpoint truncated while reading ") + what + " at byte " +
                                         std::to_string(pos_));
  }
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <typename T>
  std::pair<std::string, Tensor<T>> get_entry() {
    auto name = get_string("entry name");
    const auto rank = get<std::uint32_t>("entry rank");
    if (rank > 4) throw ParseError(R::malformed, "checkpoint entry " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::uint32_t>("entry shape"));
    Tensor<T> t(shape);
    const std::size_t n = sizeof(T) * static_cast<std::size_t>(t.numel());
    need(n, "entry values");
    std::memcpy(t.ptr(), b_.data() + pos_, n);
    pos_ += n;
    return {std::move(name), std::move(t)};
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
Checkpoint<T> snapshot(const PanFormerModel<T>& model, const AdamState<T>& adam, const TrainConfig& cfg,
                       std::int64_t step) {
  Checkpoint<T> c;
  c.model = model.config();
  c.train = cfg;
  c.step = step;
  c.seed = cfg.seed;
  for (const auto& p : model.parameters()) {
    c.names.push_back(p.name);
    c.values.push_back(p.value());
  }
  c.adam = adam;
  return c;
}

template <typename T>
Checkpoint<T> snapshot(const Trainer<T>& trainer) {
  return snapshot(trainer.model(), trainer.adam(), trainer.config(), trainer.iteration());
}

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& c) {
  if (c.names.size() != c.values.size()) throw ContractError("checkpoint names and values differ in length");
  if (c.adam.m.size() != c.values.size() || c.adam.v.size() != c.values.size())
    throw ContractError("checkpoint optimizer state does not match its parameters");
  const nlohmann::json blob = {{"model", c.model.to_json()},
                               {"train", c.train.to_json()},
                               {"step", c.step},
                               {"seed", c.seed},
                               {"dtype", dtype_name<T>()}};
  Writer w;
  w.put_raw("PFCK", 4);
  w.put(kCheckpointVersion);
  w.put_string(blob.dump());
  w.put(static_cast<std::uint32_t>(c.values.size()));
  for (std::size_t i = 0; i < c.values.size(); ++i) w.put_entry(c.names[i], c.values[i]);
  w.put(static_cast<std::uint64_t>(c.adam.t));
  for (const auto* moments : {&c.adam.m, &c.adam.v}) {
    w.put(static_cast<std::uint32_t>(moments->size()));
    for (std::size_t i = 0; i < moments->size(); ++i) w.put_entry(c.names[i], (*moments)[i]);
  }
  return std::move(w.bytes);
}

template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw ParseError(R::truncated, "checkpoint shorter than its magic");
  if (std::memcmp(bytes.data(), "PFCK", 4) != 0) throw ParseError(R::bad_magic, "not a checkpoint (bad magic)");
  Reader r(bytes);
  r.get<std::uint32_t>("magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError(R::version_mismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                              std::to_string(kCheckpointVersion));
  nlohmann::json blob;
  try {
    blob = nlohmann::json::parse(r.get_string("config blob"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(R::malformed, std::string("checkpoint config blob: ") + e.what());
  }
  Checkpoint<T> c;
  try {
    const std::string dtype = blob.at("dtype").get<std::string>();
    if (dtype != dtype_name<T>())
      throw ParseError(R::malformed, "checkpoint holds " + dtype + " values, requested " + dtype_name<T>());
    c.model = PanFormerConfig::from_json(blob.at("model"));
    c.train = TrainConfig::from_json(blob.at("train"));
    c.step = blob.at("step").get<std::int64_t>();
    c.seed = blob.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(R::malformed, std::string("checkpoint config blob: ") + e.what());
  }

  const auto n = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, t] = r.get_entry<T>();
    c.names.push_back(std::move(name));
    c.values.push_back(std::move(t));
  }
  c.adam.t = static_cast<std::int64_t>(r.get<std::uint64_t>("optimizer step"));
  for (auto* moments : {&c.adam.m, &c.adam.v}) {
    const auto k = r.get<std::uint32_t>("optimizer entry count");
    if (k != n) throw ParseError(R::malformed, "optimizer state has " + std::to_string(k) + " entries, expected " +
                                                    std::to_string(n));
    for (std::uint32_t i = 0; i < k; ++i) {
      auto [name, t] = r.get_entry<T>();
      if (name != c.names[i] || t.shape() != c.values[i].shape())
        throw ParseError(R::malformed, "optimizer entry " + name + " does not match parameter " + c.names[i]);
      moments->push_back(std::move(t));
    }
  }
  if (!r.at_end()) throw ParseError(R::malformed, "trailing bytes after checkpoint payload");
  return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ParseError(R::io, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LookupError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint<T>(bytes);
}

template <typename T>
void restore_into(const Checkpoint<T>& ckpt, PanFormerModel<T>& model, AdamState<T>* adam) {
  auto& params = model.parameters();
  std::vector<bool> seen(params.size(), false);
  if (adam) *adam = AdamState<T>::zeros_like(params);
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    auto* p = params.find(ckpt.names[i]);
    if (!p) throw ParseError(R::unknown_parameter, "checkpoint parameter not in model: " + ckpt.names[i]);
    if (p->value().shape() != ckpt.values[i].shape())
      throw ParseError(R::malformed, "checkpoint parameter " + ckpt.names[i] + " has shape " +
                                         shape_str(ckpt.values[i].shape()) + ", model expects " +
                                         shape_str(p->value().shape()));
    p->var.mutable_value() = ckpt.values[i];
    const auto idx = static_cast<std::size_t>(p - &params[0]);
    seen[idx] = true;
    if (adam) {
      adam->m[idx] = ckpt.adam.m[i];
      adam->v[idx] = ckpt.adam.v[i];
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw ParseError(R::malformed, "checkpoint lacks parameter " + params[i].name);
  if (adam) adam->t = ckpt.adam.t;
}

template <typename T>
std::unique_ptr<PanFormerModel<T>> model_from_checkpoint(const Checkpoint<T>& ckpt) {
  auto model = std::make_unique<PanFormerModel<T>>(ckpt.model, ckpt.seed);
  restore_into(ckpt, *model);
  return model;
}

#define PANFORMER_INSTANTIATE(T)                                                                              \
  template Checkpoint<T> snapshot<T>(const Trainer<T>&);                                                      \
  template Checkpoint<T> snapshot<T>(const PanFormerModel<T>&, const AdamState<T>&, const TrainConfig&,       \
                                     std::int64_t);                                                           \
  template std::vector<std::uint8_t> encode_checkpoint<T>(const Checkpoint<T>&);                              \
  template Checkpoint<T> decode_checkpoint<T>(const std::vector<std::uint8_t>&);                              \
  template void save_checkpoint<T>(const std::filesystem::path&, const Checkpoint<T>&);                       \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);                                    \
  template void restore_into<T>(const Checkpoint<T>&, PanFormerModel<T>&, AdamState<T>*);                     \
  template std::unique_ptr<PanFormerModel<T>> model_from_checkpoint<T>(const Checkpoint<T>&);
PANFORMER_INSTANTIATE(float)
PANFORMER_INSTANTIATE(double)
#undef PANFORMER_INSTANTIATE

}  // namespace panformer
