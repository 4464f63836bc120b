#pragma once

// Checkpoint format: a JSON manifest listing (name, shape, dtype, offset) for
// each tensor plus one little-endian blob of 32-bit floats next to it
// (`model.json` + `model.bin`). Values are narrowed to float32 on save, so a
// tensor that already holds float32-representable values round-trips exactly.

#include <filesystem>
#include <string>
#include <vector>

#include "biper/tensor.hpp"
#include "json.hpp"

namespace biper {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json metadata;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

/// Path of the raw blob that belongs to a manifest.
std::filesystem::path blob_path_for(const std::filesystem::path& manifest);

/// Rounds every element to the nearest float32 (the checkpoint precision).
void round_to_float32(Tensor& t);

}  // namespace biper
