#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mp/parameters.hpp"
#include "mp/rng.hpp"
#include "mp/tensor.hpp"
#include "mp/vocab.hpp"

namespace mp {

class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { train, eval };

// Padded id matrix for a batch of sequences. PAD fills ragged edges and is
// excluded from attention keys and losses.
struct TokenBatch {
  int batch = 0;
  int len = 0;
  std::vector<int> ids;            // batch*len row-major
  std::vector<std::uint8_t> valid; // 1 = real token

  static TokenBatch from_rows(const std::vector<std::vector<int>>& rows, int pad_id = Vocab::PAD);
  static TokenBatch single(const std::vector<int>& row);

  int id(int b, int l) const { return ids[static_cast<std::size_t>(b) * len + l]; }
  bool ok(int b, int l) const { return valid[static_cast<std::size_t>(b) * len + l] != 0; }
  std::vector<int> row(int b) const;
};

// Boolean attention mask, allow[b][i][j]; batch may be 1 (shared).
struct AttnMask {
  int batch = 1;
  int len_q = 0;
  int len_k = 0;
  std::vector<std::uint8_t> allow;

  static AttnMask full(int len_q, int len_k);
  static AttnMask causal(int len);
  // Keys restricted to valid positions of `keys`, per batch row; when
  // `causal` is set, queries additionally never look right of themselves.
  static AttnMask key_padding(const TokenBatch& keys, int len_q, bool causal);

  bool allowed(int b, int i, int j) const {
    const int bb = batch == 1 ? 0 : b;
    return allow[(static_cast<std::size_t>(bb) * len_q + i) * len_k + j] != 0;
  }
};

// Fresh parameters: weights ~ N(0, 0.02^2), biases 0, layer-norm gamma 1 /
// beta 0; deterministic in `seed`. The name set depends only on (config, kind).
Parameters init_parameters(const ModelConfig& config, ModelKind kind, std::uint64_t seed);

// Token embedding scaled by sqrt(d_model) plus sinusoidal positions;
// dropout only in train mode. -> [B, len, d_model]
Tensor embed(const TokenBatch& tokens, const Parameters& params, const ModelConfig& config,
             Mode mode, Rng* dropout_rng = nullptr);

// Scaled dot-product attention with per-head projections taken from
// params["<prefix>.wq"] etc. Masked-out scores get a large negative additive
// term; a fully masked query row is a contract error.
Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            const AttnMask& mask, const Parameters& params,
                            const std::string& prefix, const ModelConfig& config, Mode mode,
                            Rng* dropout_rng = nullptr);

// Post-norm encoder/decoder stacks. -> [B, len, d_model] / [B, len, vocab]
Tensor encoder_forward(const TokenBatch& src, const Parameters& params, const ModelConfig& config,
                       Mode mode, Rng* dropout_rng = nullptr);
Tensor decoder_forward(const TokenBatch& tgt, const Tensor& encoder_out, const TokenBatch& src,
                       const Parameters& params, const ModelConfig& config, Mode mode,
                       Rng* dropout_rng = nullptr);

// Single-sequence conveniences (batch of one, squeezed outputs).
Tensor encoder_forward(const std::vector<int>& src, const Parameters& params,
                       const ModelConfig& config, Mode mode);       // [len, d_model]
Tensor decoder_forward(const std::vector<int>& tgt, const Tensor& encoder_out_2d,
                       const std::vector<int>& src, const Parameters& params,
                       const ModelConfig& config, Mode mode);       // [len, vocab]

// Final projection to vocabulary logits (tied to the token embedding when
// config.tie_embeddings). hidden [B,len,d] -> [B,len,V]
Tensor output_projection(const Tensor& hidden, const Parameters& params,
                         const ModelConfig& config);

// Incremental left-to-right decoding state: per-layer self-attention K/V for
// every generated position plus fixed cross-attention K/V of the source.
// Copyable; copies share the encoder-side tensors.
struct DecoderCache {
  int steps = 0;
  int src_len = 0;
  std::vector<std::vector<float>> self_k, self_v;  // layer -> steps*d_model
  std::vector<Tensor> cross_k, cross_v;            // layer -> [H, src_len, dh]
};

DecoderCache make_decoder_cache(const Tensor& encoder_out_2d, const Parameters& params,
                                const ModelConfig& config);

// Feeds one token; returns next-token logits identical (within float noise)
// to the last row of a full decoder_forward over the extended prefix.
// Causal configs only.
std::vector<float> incremental_decoder_forward(int new_token, DecoderCache& cache,
                                               const Tensor& encoder_out_2d,
                                               const Parameters& params, const ModelConfig& config);

std::vector<float> sinusoidal_position_row(int pos, int d_model);

}  // namespace mp
