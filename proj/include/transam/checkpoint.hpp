// Checkpoint files.
//
// Binary, little-endian:
//   "TAM1" | u32 tensor count | per tensor:
//     u16 name length | name bytes (UTF-8) | u8 rank | u32 extents[rank] | f32 values (row-major)
//
// A JSON sidecar at <path>.json carries the model config, vocabulary sizes,
// the training step and any extra state. Both files are written to a
// temporary name and renamed into place.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "transam/model.hpp"
#include "transam/optim.hpp"

namespace transam {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, ShapeMismatch, MissingTensor, BadSidecar };

  CheckpointError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointMeta {
  ModelConfig config;
  std::size_t entity_count = 0;
  std::size_t relation_count = 0;
  std::int64_t step = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct LoadedCheckpoint {
  std::vector<CheckpointTensor> tensors;
  CheckpointMeta meta;

  const CheckpointTensor* find(const std::string& name) const;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& json);

void write_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<CheckpointTensor> read_tensor_file(const std::filesystem::path& path);

/// Writes parameters (and, when given, Adam moments as optim.m.* / optim.v.*).
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params,
                     const CheckpointMeta& meta, const AdamState* adam = nullptr);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into `params`, which must match by name and shape.
void assign_parameters(const LoadedCheckpoint& checkpoint, std::span<NamedTensor> params);

/// Rebuilds Adam moments saved alongside `params`; false if none were saved.
bool restore_adam(const LoadedCheckpoint& checkpoint, std::span<const NamedTensor> params, AdamState& adam);

}  // namespace transam
