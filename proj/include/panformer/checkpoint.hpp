#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "panformer/training.hpp"

namespace panformer {

// Binary layout (little-endian):
//   "PFCK" | u32 version | u32 json_len | json config blob
//   | u32 n | n x (u32 name_len | name | u32 rank | u32 dims[rank] | values)
//   | u64 adam_t | u32 n | n x first-moment entries | u32 n | n x second-moment entries
// Values are raw IEEE floats of the width named by the blob's "dtype".
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  PanFormerConfig model;
  TrainConfig train;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> names;
  std::vector<Tensor<T>> values;
  AdamState<T> adam;
};

template <typename T>
Checkpoint<T> snapshot(const Trainer<T>& trainer);

template <typename T>
Checkpoint<T> snapshot(const PanFormerModel<T>& model, const AdamState<T>& adam, const TrainConfig& cfg,
                       std::int64_t step);

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& ckpt);
template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Writes to a temporary sibling then renames over `path`.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Copies parameter values (and optionally Adam state) into a model built
/// from ckpt.model. Unknown or missing names raise ParseError.
template <typename T>
void restore_into(const Checkpoint<T>& ckpt, PanFormerModel<T>& model, AdamState<T>* adam = nullptr);

template <typename T>
std::unique_ptr<PanFormerModel<T>> model_from_checkpoint(const Checkpoint<T>& ckpt);

}  // namespace panformer
