#pragma once

#include <cstdint>
#include <vector>

#include "ch4/numerics/tape.hpp"

namespace ch4 {

// Token ids in [1, vocab]; 0 is the blank.
using Labels = std::vector<std::uint32_t>;

constexpr std::uint32_t kBlank = 0;

// Frames needed by the shortest alignment: one per label plus a blank
// between each pair of equal neighbours.
std::size_t min_ctc_frames(const Labels& labels);

namespace ops {

// Negative log-likelihood of `labels` under per-frame softmax of `logits`
// [T x (V+1)], summed over all alignments in log space. Throws
// AlignmentError when T < min_ctc_frames(labels).
Var ctc_loss(Var logits, const Labels& labels);

}  // namespace ops

double ctc_loss(const Tensor& logits, const Labels& labels);

// Per-frame argmax, repeats collapsed, blanks removed.
Labels ctc_greedy_decode(const Tensor& logits);

std::size_t edit_distance(const Labels& hyp, const Labels& ref);
// edit_distance / max(1, |ref|)
double token_error_rate(const Labels& hyp, const Labels& ref);

}  // namespace ch4
