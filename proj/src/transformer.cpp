#include "mp/transformer.hpp"

#include <cmath>
#include <map>

namespace mp {

namespace {

constexpr float kMaskedScore = -1e9f;

void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

std::string layer_prefix(const char* stack, int layer) {
  return std::string(stack) + "." + std::to_string(layer);
}

// Additive attention bias expanded to [B*H, lq, lk]; constant (no grad).
Tensor mask_to_bias(const AttnMask& mask, int batch, int heads) {
  const std::size_t lq = static_cast<std::size_t>(mask.len_q);
  const std::size_t lk = static_cast<std::size_t>(mask.len_k);
  std::vector<float> bias(static_cast<std::size_t>(batch) * heads * lq * lk);
  std::size_t idx = 0;
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        for (std::size_t j = 0; j < lk; ++j) {
          bias[idx++] = mask.allowed(b, static_cast<int>(i), static_cast<int>(j)) ? 0.0f : kMaskedScore;
        }
      }
    }
  }
  return Tensor::from_data({batch * heads, mask.len_q, mask.len_k}, std::move(bias));
}

Tensor linear(const Tensor& x2d, const Parameters& params, const std::string& w,
              const std::string& b) {
  return add(matmul(x2d, params.at(w)), params.at(b));
}

Tensor feed_forward(const Tensor& x3d, const Parameters& params, const std::string& prefix,
                    const ModelConfig& config, Mode mode, Rng* dropout_rng) {
  const int B = x3d.dim(0), len = x3d.dim(1), d = x3d.dim(2);
  Tensor h = reshape(x3d, {B * len, d});
  Tensor hidden = relu(linear(h, params, prefix + ".w1", prefix + ".b1"));
  if (mode == Mode::train && config.dropout > 0.0f && dropout_rng)
    hidden = dropout(hidden, config.dropout, *dropout_rng);
  Tensor out = linear(hidden, params, prefix + ".w2", prefix + ".b2");
  return reshape(out, {B, len, d});
}

Tensor sublayer_norm(const Tensor& x, const Tensor& delta, const Parameters& params,
                     const std::string& ln_prefix) {
  return layer_norm(add(x, delta), params.at(ln_prefix + ".g"), params.at(ln_prefix + ".b"));
}

}  // namespace

std::vector<float> sinusoidal_position_row(int pos, int d_model) {
  std::vector<float> row(static_cast<std::size_t>(d_model));
  for (int i = 0; i < d_model; i += 2) {
    const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d_model);
    row[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(angle));
    if (i + 1 < d_model) row[static_cast<std::size_t>(i + 1)] = static_cast<float>(std::cos(angle));
  }
  return row;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<int>>& rows, int pad_id) {
  check(!rows.empty(), "empty batch");
  TokenBatch tb;
  tb.batch = static_cast<int>(rows.size());
  std::size_t max_len = 0;
  for (const auto& r : rows) {
    check(!r.empty(), "empty sequence in batch");
    max_len = std::max(max_len, r.size());
  }
  tb.len = static_cast<int>(max_len);
  tb.ids.assign(static_cast<std::size_t>(tb.batch) * tb.len, pad_id);
  tb.valid.assign(tb.ids.size(), 0);
  for (int b = 0; b < tb.batch; ++b) {
    const auto& r = rows[static_cast<std::size_t>(b)];
    for (std::size_t l = 0; l < r.size(); ++l) {
      tb.ids[static_cast<std::size_t>(b) * tb.len + l] = r[l];
      tb.valid[static_cast<std::size_t>(b) * tb.len + l] = 1;
    }
  }
  return tb;
}

TokenBatch TokenBatch::single(const std::vector<int>& row) { return from_rows({row}); }

std::vector<int> TokenBatch::row(int b) const {
  std::vector<int> out;
  for (int l = 0; l < len; ++l)
    if (ok(b, l)) out.push_back(id(b, l));
  return out;
}

AttnMask AttnMask::full(int len_q, int len_k) {
  AttnMask m;
  m.len_q = len_q;
  m.len_k = len_k;
  m.allow.assign(static_cast<std::size_t>(len_q) * len_k, 1);
  return m;
}

AttnMask AttnMask::causal(int len) {
  AttnMask m;
  m.len_q = len;
  m.len_k = len;
  m.allow.assign(static_cast<std::size_t>(len) * len, 0);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j <= i; ++j) m.allow[static_cast<std::size_t>(i) * len + j] = 1;
  return m;
}

AttnMask AttnMask::key_padding(const TokenBatch& keys, int len_q, bool causal) {
  AttnMask m;
  m.batch = keys.batch;
  m.len_q = len_q;
  m.len_k = keys.len;
  m.allow.assign(static_cast<std::size_t>(m.batch) * len_q * keys.len, 0);
  for (int b = 0; b < keys.batch; ++b) {
    for (int i = 0; i < len_q; ++i) {
      for (int j = 0; j < keys.len; ++j) {
        const bool ok = keys.ok(b, j) && (!causal || j <= i);
        m.allow[(static_cast<std::size_t>(b) * len_q + i) * keys.len + j] = ok ? 1 : 0;
      }
    }
  }
  return m;
}

Parameters init_parameters(const ModelConfig& config, ModelKind kind, std::uint64_t seed) {
  config.validate();
  const int d = config.d_model;
  const int dh = config.d_hidden;

  std::map<std::string, Shape> shapes;
  shapes["embed.tok"] = {config.vocab_size, d};
  if (!config.tie_embeddings) {
    shapes["out.w"] = {d, config.vocab_size};
    shapes["out.b"] = {config.vocab_size};
  }
  if (kind == ModelKind::cmlm) {
    shapes["len.w"] = {d, config.max_len + 1};
    shapes["len.b"] = {config.max_len + 1};
  }
  auto add_attn = [&](const std::string& prefix) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) shapes[prefix + "." + w] = {d, d};
    for (const char* b : {"bq", "bk", "bv", "bo"}) shapes[prefix + "." + b] = {d};
  };
  auto add_ln = [&](const std::string& prefix) {
    shapes[prefix + ".g"] = {d};
    shapes[prefix + ".b"] = {d};
  };
  auto add_ffn = [&](const std::string& prefix) {
    shapes[prefix + ".w1"] = {d, dh};
    shapes[prefix + ".b1"] = {dh};
    shapes[prefix + ".w2"] = {dh, d};
    shapes[prefix + ".b2"] = {d};
  };
  for (int l = 0; l < config.layers; ++l) {
    const std::string enc = layer_prefix("enc", l);
    add_attn(enc + ".attn");
    add_ln(enc + ".ln1");
    add_ffn(enc + ".ffn");
    add_ln(enc + ".ln2");
    const std::string dec = layer_prefix("dec", l);
    add_attn(dec + ".self");
    add_ln(dec + ".ln1");
    add_attn(dec + ".cross");
    add_ln(dec + ".ln2");
    add_ffn(dec + ".ffn");
    add_ln(dec + ".ln3");
  }

  Rng rng(seed);
  Parameters params;
  for (const auto& [name, shape] : shapes) {
    const auto dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    Tensor t;
    if (leaf[0] == 'w' || leaf == "tok") {
      t = Tensor::randn(shape, 0.02f, rng, true);
    } else if (leaf == "g") {
      t = Tensor::from_data(shape, std::vector<float>(static_cast<std::size_t>(shape_numel(shape)), 1.0f), true);
    } else {
      t = Tensor::zeros(shape, true);
    }
    params.by_name.emplace(name, std::move(t));
  }
  return params;
}

Tensor embed(const TokenBatch& tokens, const Parameters& params, const ModelConfig& config,
             Mode mode, Rng* dropout_rng) {
  check(tokens.len <= config.max_len,
        "sequence length " + std::to_string(tokens.len) + " exceeds max_len " +
            std::to_string(config.max_len));
  const int d = config.d_model;
  Tensor flat = rows(params.at("embed.tok"), tokens.ids);
  flat = scale(flat, std::sqrt(static_cast<float>(d)));

  std::vector<float> pe(static_cast<std::size_t>(tokens.batch) * tokens.len * d);
  for (int l = 0; l < tokens.len; ++l) {
    const auto row = sinusoidal_position_row(l, d);
    for (int b = 0; b < tokens.batch; ++b)
      std::copy(row.begin(), row.end(),
                pe.begin() + (static_cast<std::size_t>(b) * tokens.len + l) * d);
  }
  Tensor x = add(reshape(flat, {tokens.batch, tokens.len, d}),
                 Tensor::from_data({tokens.batch, tokens.len, d}, std::move(pe)));
  if (mode == Mode::train && config.dropout > 0.0f && dropout_rng)
    x = dropout(x, config.dropout, *dropout_rng);
  return x;
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            const AttnMask& mask, const Parameters& params,
                            const std::string& prefix, const ModelConfig& config, Mode mode,
                            Rng* dropout_rng) {
  const bool squeeze = q_in.rank() == 2;
  Tensor q3 = squeeze ? reshape(q_in, {1, q_in.dim(0), q_in.dim(1)}) : q_in;
  Tensor k3 = squeeze ? reshape(k_in, {1, k_in.dim(0), k_in.dim(1)}) : k_in;
  Tensor v3 = squeeze ? reshape(v_in, {1, v_in.dim(0), v_in.dim(1)}) : v_in;

  const int B = q3.dim(0), lq = q3.dim(1), d = q3.dim(2);
  const int lk = k3.dim(1);
  const int H = config.heads;
  const int dh = d / H;
  check(mask.len_q == lq && mask.len_k == lk, "attention mask shape mismatch");
  check(mask.batch == 1 || mask.batch == B, "attention mask batch mismatch");
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < lq; ++i) {
      bool any = false;
      for (int j = 0; j < lk && !any; ++j) any = mask.allowed(b, i, j);
      check(any, "attention mask leaves a query row with nothing to attend to");
    }
  }

  Tensor q = reshape(linear(reshape(q3, {B * lq, d}), params, prefix + ".wq", prefix + ".bq"),
                     {B, lq, d});
  Tensor k = reshape(linear(reshape(k3, {B * lk, d}), params, prefix + ".wk", prefix + ".bk"),
                     {B, lk, d});
  Tensor v = reshape(linear(reshape(v3, {B * lk, d}), params, prefix + ".wv", prefix + ".bv"),
                     {B, lk, d});

  Tensor qh = split_heads(q, H);  // [B*H, lq, dh]
  Tensor kh = split_heads(k, H);
  Tensor vh = split_heads(v, H);

  Tensor scores = scale(matmul_nt(qh, kh), 1.0f / std::sqrt(static_cast<float>(dh)));
  scores = add(scores, mask_to_bias(mask, B, H));
  Tensor attn = softmax(scores, -1);
  if (mode == Mode::train && config.dropout > 0.0f && dropout_rng)
    attn = dropout(attn, config.dropout, *dropout_rng);

  Tensor ctx = merge_heads(matmul(attn, vh), H);  // [B, lq, d]
  Tensor out = reshape(linear(reshape(ctx, {B * lq, d}), params, prefix + ".wo", prefix + ".bo"),
                       {B, lq, d});
  return squeeze ? reshape(out, {lq, d}) : out;
}

Tensor encoder_forward(const TokenBatch& src, const Parameters& params, const ModelConfig& config,
                       Mode mode, Rng* dropout_rng) {
  for (int b = 0; b < src.batch; ++b) check(src.ok(b, 0), "encoder row with no valid tokens");
  Tensor x = embed(src, params, config, mode, dropout_rng);
  const AttnMask mask = AttnMask::key_padding(src, src.len, /*causal=*/false);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = layer_prefix("enc", l);
    Tensor a = multi_head_attention(x, x, x, mask, params, p + ".attn", config, mode, dropout_rng);
    x = sublayer_norm(x, a, params, p + ".ln1");
    Tensor f = feed_forward(x, params, p + ".ffn", config, mode, dropout_rng);
    x = sublayer_norm(x, f, params, p + ".ln2");
  }
  return x;
}

Tensor output_projection(const Tensor& hidden, const Parameters& params,
                         const ModelConfig& config) {
  const int B = hidden.dim(0), len = hidden.dim(1), d = hidden.dim(2);
  Tensor h = reshape(hidden, {B * len, d});
  Tensor logits;
  if (config.tie_embeddings) {
    logits = matmul_nt(h, params.at("embed.tok"));  // [B*len, V]
  } else {
    logits = linear(h, params, "out.w", "out.b");
  }
  return reshape(logits, {B, len, config.vocab_size});
}

Tensor decoder_forward(const TokenBatch& tgt, const Tensor& encoder_out, const TokenBatch& src,
                       const Parameters& params, const ModelConfig& config, Mode mode,
                       Rng* dropout_rng) {
  check(encoder_out.rank() == 3 && encoder_out.dim(0) == tgt.batch &&
            encoder_out.dim(1) == src.len,
        "encoder output does not match the source batch");
  Tensor x = embed(tgt, params, config, mode, dropout_rng);
  const bool causal = config.decoder_attention == DecoderAttention::causal;
  const AttnMask self_mask = AttnMask::key_padding(tgt, tgt.len, causal);
  const AttnMask cross_mask = AttnMask::key_padding(src, tgt.len, /*causal=*/false);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = layer_prefix("dec", l);
    Tensor a =
        multi_head_attention(x, x, x, self_mask, params, p + ".self", config, mode, dropout_rng);
    x = sublayer_norm(x, a, params, p + ".ln1");
    Tensor c = multi_head_attention(x, encoder_out, encoder_out, cross_mask, params, p + ".cross",
                                    config, mode, dropout_rng);
    x = sublayer_norm(x, c, params, p + ".ln2");
    Tensor f = feed_forward(x, params, p + ".ffn", config, mode, dropout_rng);
    x = sublayer_norm(x, f, params, p + ".ln3");
  }
  return output_projection(x, params, config);
}

Tensor encoder_forward(const std::vector<int>& src, const Parameters& params,
                       const ModelConfig& config, Mode mode) {
  Tensor out = encoder_forward(TokenBatch::single(src), params, config, mode, nullptr);
  return reshape(out, {out.dim(1), out.dim(2)});
}

Tensor decoder_forward(const std::vector<int>& tgt, const Tensor& encoder_out_2d,
                       const std::vector<int>& src, const Parameters& params,
                       const ModelConfig& config, Mode mode) {
  Tensor enc3 = reshape(encoder_out_2d, {1, encoder_out_2d.dim(0), encoder_out_2d.dim(1)});
  Tensor out = decoder_forward(TokenBatch::single(tgt), enc3, TokenBatch::single(src), params,
                               config, mode, nullptr);
  return reshape(out, {out.dim(1), out.dim(2)});
}

DecoderCache make_decoder_cache(const Tensor& encoder_out_2d, const Parameters& params,
                                const ModelConfig& config) {
  NoGradGuard ng;
  DecoderCache cache;
  cache.src_len = encoder_out_2d.dim(0);
  cache.self_k.resize(static_cast<std::size_t>(config.layers));
  cache.self_v.resize(static_cast<std::size_t>(config.layers));
  const int d = config.d_model;
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = layer_prefix("dec", l) + ".cross";
    Tensor k = linear(encoder_out_2d, params, p + ".wk", p + ".bk");
    Tensor v = linear(encoder_out_2d, params, p + ".wv", p + ".bv");
    cache.cross_k.push_back(split_heads(reshape(k, {1, cache.src_len, d}), config.heads));
    cache.cross_v.push_back(split_heads(reshape(v, {1, cache.src_len, d}), config.heads));
  }
  return cache;
}

std::vector<float> incremental_decoder_forward(int new_token, DecoderCache& cache,
                                               const Tensor& encoder_out_2d,
                                               const Parameters& params,
                                               const ModelConfig& config) {
  check(config.decoder_attention == DecoderAttention::causal,
        "incremental decoding requires a causal decoder");
  check(cache.steps < config.max_len, "incremental decode past max_len");
  check(encoder_out_2d.rank() == 2 && encoder_out_2d.dim(0) == cache.src_len,
        "cache was built for a different encoder output");
  NoGradGuard ng;

  const int d = config.d_model;
  const int H = config.heads;
  const int dh = d / H;
  const int pos = cache.steps;

  // Embedding row for the new position.
  std::vector<int> one{new_token};
  Tensor x = scale(rows(params.at("embed.tok"), one), std::sqrt(static_cast<float>(d)));
  x = add(x, Tensor::from_data({1, d}, sinusoidal_position_row(pos, d)));

  for (int l = 0; l < config.layers; ++l) {
    const std::string self_p = layer_prefix("dec", l) + ".self";
    const std::string ln1 = layer_prefix("dec", l) + ".ln1";
    const std::string cross_p = layer_prefix("dec", l) + ".cross";
    const std::string ln2 = layer_prefix("dec", l) + ".ln2";
    const std::string ffn_p = layer_prefix("dec", l) + ".ffn";
    const std::string ln3 = layer_prefix("dec", l) + ".ln3";

    // Self attention over the cached prefix plus this position.
    Tensor q = linear(x, params, self_p + ".wq", self_p + ".bq");
    Tensor k = linear(x, params, self_p + ".wk", self_p + ".bk");
    Tensor v = linear(x, params, self_p + ".wv", self_p + ".bv");
    auto& k_cache = cache.self_k[static_cast<std::size_t>(l)];
    auto& v_cache = cache.self_v[static_cast<std::size_t>(l)];
    k_cache.insert(k_cache.end(), k.data().begin(), k.data().end());
    v_cache.insert(v_cache.end(), v.data().begin(), v.data().end());
    const int steps = pos + 1;

    Tensor kh = split_heads(Tensor::from_data({1, steps, d}, k_cache), H);
    Tensor vh = split_heads(Tensor::from_data({1, steps, d}, v_cache), H);
    Tensor qh = split_heads(reshape(q, {1, 1, d}), H);
    Tensor attn = softmax(scale(matmul_nt(qh, kh), 1.0f / std::sqrt(static_cast<float>(dh))), -1);
    Tensor ctx = reshape(merge_heads(matmul(attn, vh), H), {1, d});
    Tensor a = linear(ctx, params, self_p + ".wo", self_p + ".bo");
    x = layer_norm(add(x, a), params.at(ln1 + ".g"), params.at(ln1 + ".b"));

    // Cross attention over the precomputed encoder keys/values.
    Tensor q2 = linear(x, params, cross_p + ".wq", cross_p + ".bq");
    Tensor qh2 = split_heads(reshape(q2, {1, 1, d}), H);
    Tensor attn2 = softmax(
        scale(matmul_nt(qh2, cache.cross_k[static_cast<std::size_t>(l)]),
              1.0f / std::sqrt(static_cast<float>(dh))),
        -1);
    Tensor ctx2 = reshape(
        merge_heads(matmul(attn2, cache.cross_v[static_cast<std::size_t>(l)]), H), {1, d});
    Tensor c = linear(ctx2, params, cross_p + ".wo", cross_p + ".bo");
    x = layer_norm(add(x, c), params.at(ln2 + ".g"), params.at(ln2 + ".b"));

    Tensor hidden = relu(linear(x, params, ffn_p + ".w1", ffn_p + ".b1"));
    Tensor f = linear(hidden, params, ffn_p + ".w2", ffn_p + ".b2");
    x = layer_norm(add(x, f), params.at(ln3 + ".g"), params.at(ln3 + ".b"));
  }
  cache.steps = pos + 1;

  Tensor logits = output_projection(reshape(x, {1, 1, d}), params, config);
  return std::vector<float>(logits.data().begin(), logits.data().end());
}

}  // namespace mp
