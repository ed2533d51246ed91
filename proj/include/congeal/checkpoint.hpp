#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "congeal/congeal.hpp"

namespace congeal {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointData {
  ModelState<float> model;
  Tensor<float> reference;
  CongealConfig config;
  TrainState state;
};

// Binary layout: "DPRC", u32 version, u32 section count, then per section
// u32 name length, name, u8 kind (0 text, 1 f32 array), u64 payload length in
// elements, payload, u32 crc32 of everything in the section before it.
// Integers and floats are little-endian. The file is written to a temporary
// name and renamed into place.
void save_checkpoint(const std::string& path, const ModelState<float>& model, const Tensor<float>& reference,
                     const CongealConfig& config, const TrainState& state);

// Validates the whole file before building anything; throws CheckpointError.
CheckpointData load_checkpoint(const std::string& path);

}  // namespace congeal
