#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ch4/ctc/ctc.hpp"
#include "ch4/numerics/tensor.hpp"

namespace ch4 {

struct Utterance {
  std::string id;
  std::size_t session = 0;
  Tensor frames;  // [T x F]
  Labels labels;
};

// Tokens are fixed random F-dim templates held for a random number of
// frames, plus Gaussian noise. Utterances come in sessions of consecutive
// utterances; within a session a token never repeats its predecessor, also
// across utterance boundaries.
struct SyntheticTaskConfig {
  std::size_t vocab = 10;
  std::size_t feature_dim = 80;
  std::size_t min_frames_per_token = 6;
  std::size_t max_frames_per_token = 12;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;
  double noise = 0.5;
  std::uint64_t template_seed = 1;
  std::size_t session_length = 24;

  void validate() const;
};

// Unit-norm-per-dimension token templates, [vocab x F], row v-1 for token v.
Tensor token_templates(const SyntheticTaskConfig& cfg);
std::vector<Utterance> synth_generate(const SyntheticTaskConfig& cfg, std::uint64_t seed, std::size_t count);

// Frame-wise concatenation of utts[begin, begin + k).
Utterance concat_longform(const std::vector<Utterance>& utts, std::size_t k, std::size_t begin = 0);
// Consecutive groups of k utterances from the same session; incomplete
// groups at session ends are dropped.
std::vector<Utterance> longform_groups(const std::vector<Utterance>& utts, std::size_t k);

struct CorpusStats {
  std::vector<double> mean, var;
};

CorpusStats compute_stats(const std::vector<Utterance>& utts);
void normalize(Utterance& utt, const CorpusStats& stats);
void denormalize(Utterance& utt, const CorpusStats& stats);

// Seeded shuffle, then the first round(fraction * n) utterances (at least
// one when fraction > 0) form the validation split.
std::pair<std::vector<Utterance>, std::vector<Utterance>> split_validation(std::vector<Utterance> utts,
                                                                           double fraction, std::uint64_t seed);

struct SpecMaskConfig {
  std::size_t time_masks = 2;
  double max_time_fraction = 0.1;
  std::size_t freq_masks = 2;
  std::size_t max_freq_width = 8;
};

struct Span {
  std::size_t begin = 0, length = 0;
};

// Sets frames [begin, begin + length) and feature bands to the utterance's
// per-dimension mean.
void apply_spec_masks(Utterance& utt, const std::vector<Span>& time_spans, const std::vector<Span>& freq_spans);
void spec_mask(Utterance& utt, const SpecMaskConfig& cfg, std::mt19937_64& rng);

// "HPF1" files: u32 T, F, label count, T*F f32 frames, label u32s, all
// little-endian. The utterance id is the file stem.
void save_features(const std::filesystem::path& path, const Utterance& utt);
Utterance load_features(const std::filesystem::path& path);

// One path per line, relative paths resolved against the manifest directory.
std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<std::filesystem::path>& entries);
std::vector<Utterance> load_corpus(const std::filesystem::path& manifest);

}  // namespace ch4
