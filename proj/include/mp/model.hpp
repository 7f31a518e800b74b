#pragma once

#include <utility>
#include <vector>

#include "mp/transformer.hpp"

namespace mp {

struct ScorerOutput {
  Tensor token_logits;   // [B, N, vocab]
  Tensor length_logits;  // [B, max_len+1], CMLM only
};

Model make_model(ModelKind kind, ModelConfig config, std::uint64_t seed);

// Encoder runs on [LENGTH] + src; the bidirectional decoder scores every
// target position of tgt (MASK ids where unknown) in one parallel pass.
// Length logits come from the LENGTH position through the length head.
ScorerOutput cmlm_forward(const std::vector<int>& src, const std::vector<int>& tgt_partial,
                          const Model& model, Mode mode, Rng* dropout_rng = nullptr);
ScorerOutput cmlm_forward_batch(const TokenBatch& src, const TokenBatch& tgt, const Model& model,
                                Mode mode, Rng* dropout_rng = nullptr);

// Causal decoder logits; position i of the prefix predicts token i+1.
// The prefix must begin with BOS.
Tensor ar_forward(const std::vector<int>& src, const std::vector<int>& tgt_prefix,
                  const Model& model, Mode mode, Rng* dropout_rng = nullptr);
Tensor ar_forward_batch(const TokenBatch& src, const TokenBatch& tgt_prefix, const Model& model,
                        Mode mode, Rng* dropout_rng = nullptr);

// Encoder-side batch with the LENGTH token prepended to each row.
TokenBatch with_length_token(const TokenBatch& src);

// Top-ell target lengths by probability (descending; ties toward the shorter
// length; length 0 excluded). Returns (length, log-probability) pairs.
std::vector<std::pair<int, float>> predict_length(const std::vector<int>& src, const Model& model,
                                                  int ell);
std::vector<std::vector<std::pair<int, float>>> predict_length_batch(
    const std::vector<std::vector<int>>& srcs, const Model& model, int ell);

}  // namespace mp
