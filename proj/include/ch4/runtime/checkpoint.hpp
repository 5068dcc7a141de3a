#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ch4/runtime/config.hpp"

namespace ch4 {

struct Checkpoint {
  TrainConfig config;
  Encoder model;
  CorpusStats stats;  // feature normalization of the training split
  std::size_t epoch = 0;  // completed epochs
  std::string rng_state;  // training shuffle generator
  std::size_t optimizer_steps = 0;
  std::map<std::string, Tensor> adam_m, adam_v;
};

// "HPCK" container, version 1: u32 version, u32-length-prefixed config text,
// u32 tensor count, then per tensor a u32-length-prefixed name, u8 dtype
// (0 = f64), u32 rank, u32 dims and little-endian data.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also requires the stored model configuration to equal `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

// First differing [model] setting, or empty when the configurations agree.
std::string encoder_config_mismatch(const EncoderConfig& a, const EncoderConfig& b);

}  // namespace ch4
