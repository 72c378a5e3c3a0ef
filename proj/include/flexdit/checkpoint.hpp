#pragma once

// FXCK checkpoints. All integers little-endian.
//
//   0  char[4] "FXCK"
//   4  u32 version (1)
//   8  u32 H, byte length of the header text
//   12 u8[H] header text, "key=value\n" lines: model config, flex mode,
//      merged patch size, patch-size registry, flatten order, training state
//   .. u32 tensor count
//   .. tensor table, one entry per tensor:
//        u16 name length, name bytes, u8 section, u8 flags (bit 0: frozen),
//        u32 rows, u32 cols, u64 payload offset, u64 FNV-1a of the payload bytes
//   .. u64 FNV-1a of every byte above
//   .. payload: f64 values, row-major, tensors back to back in table order
//
// Sections: 0 model tensors, 1 EMA shadow, 2 Adam first moments, 3 Adam
// second moments. Shadow and moment entries carry the name of the trainable
// parameter they belong to.

#include "flexdit/training.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace flexdit {

// The file was written by a different format version.
class MigrationError : public DataError {
  public:
    using DataError::DataError;
};

struct Checkpoint {
    ModelParams model;
    std::optional<TrainState> state;
    std::uint64_t seed = 0;  // training seed; with state->step it fixes every later random draw
    std::string train_mode;  // "pretrain", "shared", "lora" or empty
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// key=value text form of a model config, shared by checkpoints and manifests.
std::string model_config_text(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

}  // namespace flexdit
