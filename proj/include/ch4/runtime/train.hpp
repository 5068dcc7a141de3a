#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ch4/runtime/checkpoint.hpp"

namespace ch4 {

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean per-utterance CTC loss
  double valid_loss = 0.0;
  double valid_ter = 0.0;
  double lr = 0.0;  // at the last step of the epoch
  double seconds = 0.0;
  std::size_t skipped = 0;  // utterances too short for their labels
};

using EpochCallback = std::function<void(const EpochLog&, const Checkpoint&)>;

// The corpus is split into training and validation parts, normalized with
// training statistics and trained with CTC. Passing `resume` continues from
// its epoch, moments and generator state with the same corpus and config.
Checkpoint train(const TrainConfig& cfg, const std::vector<Utterance>& corpus, const EpochCallback& on_epoch = {},
                 const Checkpoint* resume = nullptr);

// Synthetic corpus of cfg.synth or the manifest corpus.
std::vector<Utterance> training_corpus(const TrainConfig& cfg);

struct UtteranceResult {
  std::string id;
  std::size_t k = 1;
  double ter = 0.0;
  std::size_t hyp_len = 0, ref_len = 0, edits = 0;
};

struct EvalResult {
  double ter = 0.0;  // total edits / total reference tokens
  std::vector<UtteranceResult> utterances;
};

// Greedy CTC decoding of every session-consecutive group of k utterances.
EvalResult evaluate(const Encoder& model, const CorpusStats& stats, const std::vector<Utterance>& utts, std::size_t k);
double mean_ctc_loss(const Encoder& model, const std::vector<Utterance>& normalized, std::size_t* skipped = nullptr);

struct BenchRecord {
  std::size_t k = 0;
  std::size_t frames = 0;
  double seconds = 0.0;
  double rtf = 0.0;
};

constexpr double kFrameShiftSeconds = 0.01;

// For each k, streams the first k*groups utterances as `groups` inputs of k
// concatenated utterances through a causal model, one frame at a time. One
// warm-up run per k is discarded and the mean of `repeats` timed runs is
// reported; timed runs take the counts in turn.
std::vector<BenchRecord> bench_rtf(const Encoder& model, const CorpusStats& stats, const std::vector<Utterance>& utts,
                                   const std::vector<std::size_t>& ks, std::size_t repeats = 5, std::size_t groups = 1);

}  // namespace ch4
