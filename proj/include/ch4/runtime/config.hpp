#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ch4/conformer/conformer.hpp"
#include "ch4/data/data.hpp"

namespace ch4 {

struct OptimizerConfig {
  double max_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_fraction = 0.05;
  double grad_clip = 5.0;  // global norm, 0 disables
};

struct TrainConfig {
  EncoderConfig encoder;
  OptimizerConfig optimizer;
  SyntheticTaskConfig synth;
  std::size_t synth_count = 500;
  std::uint64_t synth_seed = 1;
  std::string manifest;  // training corpus; synthetic when empty
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  double validation_fraction = 0.05;
  bool spec_augment = true;
  SpecMaskConfig masks;

  void validate() const;
};

// Sections [model], [train], [synth] of key = value lines. The layer stack is
// either an explicit `layer_mixers = mhsa,h3,parallel:32,...` list (the
// number after "parallel:" is d_mhsa) or `layers` plus `mixer` and an
// optional `h3_placement = top:K | bottom:K | mask:0011`.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
// `overrides` are ("section.key", value) pairs applied on top of the file.
TrainConfig parse_config(const std::string& text, const std::vector<std::pair<std::string, std::string>>& overrides);
std::string to_ini(const TrainConfig& cfg);

}  // namespace ch4
