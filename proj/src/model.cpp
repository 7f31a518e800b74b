#include "mp/model.hpp"

#include <algorithm>
#include <cmath>

namespace mp {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace

Model make_model(ModelKind kind, ModelConfig config, std::uint64_t seed) {
  config.decoder_attention =
      kind == ModelKind::ar ? DecoderAttention::causal : DecoderAttention::bidirectional;
  config.validate();
  Model m;
  m.kind = kind;
  m.config = config;
  m.params = init_parameters(config, kind, seed);
  return m;
}

TokenBatch with_length_token(const TokenBatch& src) {
  TokenBatch out;
  out.batch = src.batch;
  out.len = src.len + 1;
  out.ids.assign(static_cast<std::size_t>(out.batch) * out.len, Vocab::PAD);
  out.valid.assign(out.ids.size(), 0);
  for (int b = 0; b < src.batch; ++b) {
    out.ids[static_cast<std::size_t>(b) * out.len] = Vocab::LENGTH;
    out.valid[static_cast<std::size_t>(b) * out.len] = 1;
    for (int l = 0; l < src.len; ++l) {
      out.ids[static_cast<std::size_t>(b) * out.len + l + 1] = src.id(b, l);
      out.valid[static_cast<std::size_t>(b) * out.len + l + 1] = src.ok(b, l) ? 1 : 0;
    }
  }
  return out;
}

ScorerOutput cmlm_forward_batch(const TokenBatch& src, const TokenBatch& tgt, const Model& model,
                                Mode mode, Rng* dropout_rng) {
  check(model.kind == ModelKind::cmlm, "cmlm_forward on a non-CMLM model");
  check(src.len + 1 <= model.config.max_len,
        "source too long for max_len (needs room for the LENGTH token)");
  check(tgt.len <= model.config.max_len, "target too long for max_len");

  const TokenBatch enc_in = with_length_token(src);
  Tensor enc_out = encoder_forward(enc_in, model.params, model.config, mode, dropout_rng);

  ScorerOutput out;
  out.token_logits =
      decoder_forward(tgt, enc_out, enc_in, model.params, model.config, mode, dropout_rng);
  Tensor len_h = position(enc_out, 0);  // LENGTH token encoding, [B, d]
  out.length_logits = add(matmul(len_h, model.params.at("len.w")), model.params.at("len.b"));
  return out;
}

ScorerOutput cmlm_forward(const std::vector<int>& src, const std::vector<int>& tgt_partial,
                          const Model& model, Mode mode, Rng* dropout_rng) {
  check(!src.empty(), "empty source");
  check(!tgt_partial.empty(), "empty target");
  ScorerOutput batch = cmlm_forward_batch(TokenBatch::single(src), TokenBatch::single(tgt_partial),
                                          model, mode, dropout_rng);
  ScorerOutput out;
  out.token_logits = reshape(batch.token_logits,
                             {batch.token_logits.dim(1), batch.token_logits.dim(2)});
  out.length_logits = reshape(batch.length_logits, {batch.length_logits.dim(1)});
  return out;
}

Tensor ar_forward_batch(const TokenBatch& src, const TokenBatch& tgt_prefix, const Model& model,
                        Mode mode, Rng* dropout_rng) {
  check(model.kind == ModelKind::ar, "ar_forward on a non-AR model");
  for (int b = 0; b < tgt_prefix.batch; ++b)
    check(tgt_prefix.id(b, 0) == Vocab::BOS, "AR prefix must begin with BOS");
  Tensor enc_out = encoder_forward(src, model.params, model.config, mode, dropout_rng);
  return decoder_forward(tgt_prefix, enc_out, src, model.params, model.config, mode, dropout_rng);
}

Tensor ar_forward(const std::vector<int>& src, const std::vector<int>& tgt_prefix,
                  const Model& model, Mode mode, Rng* dropout_rng) {
  Tensor out = ar_forward_batch(TokenBatch::single(src), TokenBatch::single(tgt_prefix), model,
                                mode, dropout_rng);
  return reshape(out, {out.dim(1), out.dim(2)});
}

std::vector<std::vector<std::pair<int, float>>> predict_length_batch(
    const std::vector<std::vector<int>>& srcs, const Model& model, int ell) {
  check(model.kind == ModelKind::cmlm, "predict_length on a non-CMLM model");
  check(ell >= 1, "ell must be >= 1");
  check(ell <= model.config.max_len,
        "ell exceeds the number of valid length classes (" +
            std::to_string(model.config.max_len) + ")");
  NoGradGuard ng;

  const TokenBatch enc_in = with_length_token(TokenBatch::from_rows(srcs));
  Tensor enc_out = encoder_forward(enc_in, model.params, model.config, Mode::eval, nullptr);
  Tensor len_h = position(enc_out, 0);
  Tensor logits = add(matmul(len_h, model.params.at("len.w")), model.params.at("len.b"));
  Tensor probs = softmax(logits, -1);

  const int classes = model.config.max_len + 1;
  std::vector<std::vector<std::pair<int, float>>> out;
  out.reserve(srcs.size());
  for (std::size_t b = 0; b < srcs.size(); ++b) {
    const float* row = probs.data().data() + b * static_cast<std::size_t>(classes);
    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(classes - 1));
    for (int len = 1; len < classes; ++len) order.push_back(len);
    std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
      if (row[a] != row[c]) return row[a] > row[c];
      return a < c;  // tie toward the shorter length
    });
    std::vector<std::pair<int, float>> cand;
    for (int i = 0; i < ell; ++i) {
      const int len = order[static_cast<std::size_t>(i)];
      cand.emplace_back(len, std::log(std::max(row[len], 1e-30f)));
    }
    out.push_back(std::move(cand));
  }
  return out;
}

std::vector<std::pair<int, float>> predict_length(const std::vector<int>& src, const Model& model,
                                                  int ell) {
  return predict_length_batch({src}, model, ell)[0];
}

}  // namespace mp
