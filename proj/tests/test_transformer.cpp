#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mp/model.hpp"
#include "mp/parameters.hpp"
#include "mp/transformer.hpp"
#include "test_util.hpp"

using namespace mp;
using mp::test::fd_grad;
using mp::test::rel_err;

namespace {

ModelConfig tiny_config(int vocab = 16, int max_len = 12) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.d_model = 8;
  c.d_hidden = 16;
  c.vocab_size = vocab;
  c.max_len = max_len;
  c.dropout = 0.0f;
  return c;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("init: biases zero, layer norm at identity, deterministic per seed") {
  ModelConfig c = tiny_config();
  Parameters p1 = init_parameters(c, ModelKind::cmlm, 42);
  Parameters p2 = init_parameters(c, ModelKind::cmlm, 42);
  Parameters p3 = init_parameters(c, ModelKind::cmlm, 43);

  CHECK(p1.by_name.size() == p2.by_name.size());
  bool any_diff = false;
  for (const auto& [name, t] : p1.by_name) {
    CHECK(same_values(t, p2.at(name)));
    if (!same_values(t, p3.at(name))) any_diff = true;
    const auto dot = name.rfind('.');
    const std::string leaf = name.substr(dot + 1);
    if (leaf[0] == 'b') {
      for (float v : t.data()) CHECK(v == 0.0f);
    } else if (leaf == "g") {
      for (float v : t.data()) CHECK(v == 1.0f);
    }
    CHECK(t.requires_grad());
  }
  CHECK(any_diff);
}

TEST_CASE("init: weight sample std close to 0.02 on a 512x512 matrix") {
  ModelConfig c;
  c.layers = 1;
  c.heads = 8;
  c.d_model = 512;
  c.d_hidden = 512;
  c.vocab_size = 32;
  c.max_len = 16;
  Parameters p = init_parameters(c, ModelKind::ar, 7);
  const Tensor& w = p.at("enc.0.attn.wq");
  REQUIRE(w.size() == 512 * 512);
  double mean = 0;
  for (float v : w.data()) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0;
  for (float v : w.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size());
  const double stddev = std::sqrt(var);
  CHECK(stddev > 0.018);
  CHECK(stddev < 0.022);
}

TEST_CASE("init: name set differs between kinds only by the expected heads") {
  ModelConfig c = tiny_config();
  Parameters cm = init_parameters(c, ModelKind::cmlm, 1);
  Parameters ar = init_parameters(c, ModelKind::ar, 1);
  CHECK(cm.has("len.w"));
  CHECK(cm.has("len.b"));
  CHECK(!ar.has("len.w"));
  CHECK(cm.by_name.size() == ar.by_name.size() + 2);
}

TEST_CASE("sinusoidal positions: zeros and ones at position 0") {
  const auto row = sinusoidal_position_row(0, 8);
  for (int i = 0; i < 8; i += 2) {
    CHECK(row[static_cast<std::size_t>(i)] == 0.0f);
    CHECK(row[static_cast<std::size_t>(i + 1)] == 1.0f);
  }
}

TEST_CASE("embed: shape, determinism in eval mode, length contract") {
  ModelConfig c = tiny_config();
  Parameters p = init_parameters(c, ModelKind::cmlm, 3);
  TokenBatch tb = TokenBatch::single({6, 7, 8});
  Tensor e1 = embed(tb, p, c, Mode::eval);
  Tensor e2 = embed(tb, p, c, Mode::eval);
  REQUIRE(e1.shape() == Shape{1, 3, 8});
  CHECK(same_values(e1, e2));

  std::vector<int> too_long(static_cast<std::size_t>(c.max_len) + 1, 6);
  CHECK_THROWS_AS(embed(TokenBatch::single(too_long), p, c, Mode::eval), ContractError);
}

TEST_CASE("attention: softmax over a single key makes the output independent of q") {
  ModelConfig c = tiny_config();
  c.heads = 1;
  Parameters p = init_parameters(c, ModelKind::ar, 5);
  Rng rng(9);
  Tensor q1 = Tensor::randn({1, 8}, 1.0f, rng);
  Tensor q2 = Tensor::randn({1, 8}, 1.0f, rng);
  Tensor kv = Tensor::randn({1, 8}, 1.0f, rng);
  const AttnMask mask = AttnMask::full(1, 1);
  Tensor o1 = multi_head_attention(q1, kv, kv, mask, p, "enc.0.attn", c, Mode::eval);
  Tensor o2 = multi_head_attention(q2, kv, kv, mask, p, "enc.0.attn", c, Mode::eval);
  REQUIRE(o1.shape() == Shape{1, 8});
  for (std::size_t i = 0; i < o1.data().size(); ++i)
    CHECK(o1.data()[i] == doctest::Approx(o2.data()[i]).epsilon(1e-6));
}

TEST_CASE("attention: fully masked query row is a contract error") {
  ModelConfig c = tiny_config();
  Parameters p = init_parameters(c, ModelKind::ar, 5);
  Rng rng(9);
  Tensor x = Tensor::randn({2, 8}, 1.0f, rng);
  AttnMask mask = AttnMask::full(2, 2);
  mask.allow[2] = 0;
  mask.allow[3] = 0;  // row 1 sees nothing
  CHECK_THROWS_AS(multi_head_attention(x, x, x, mask, p, "enc.0.attn", c, Mode::eval),
                  ContractError);
}

TEST_CASE("causal decoder: position i ignores positions >= i of the target") {
  ModelConfig c = tiny_config();
  c.decoder_attention = DecoderAttention::causal;
  Parameters p = init_parameters(c, ModelKind::ar, 11);
  std::vector<int> src{6, 7, 8, 9};
  Tensor enc = encoder_forward(src, p, c, Mode::eval);

  std::vector<int> tgt{Vocab::BOS, 6, 7, 8, 9};
  Tensor base = decoder_forward(tgt, enc, src, p, c, Mode::eval);
  for (std::size_t j = 2; j < tgt.size(); ++j) {
    std::vector<int> perturbed = tgt;
    perturbed[j] = 10;
    Tensor out = decoder_forward(perturbed, enc, src, p, c, Mode::eval);
    for (std::size_t i = 0; i < j; ++i)
      for (int v = 0; v < c.vocab_size; ++v)
        CHECK(out.data()[i * c.vocab_size + v] == base.data()[i * c.vocab_size + v]);
  }
}

TEST_CASE("bidirectional decoder: right context reaches position i") {
  ModelConfig c = tiny_config();
  c.decoder_attention = DecoderAttention::bidirectional;
  Parameters p = init_parameters(c, ModelKind::cmlm, 11);
  std::vector<int> src{6, 7, 8};
  Tensor enc = encoder_forward(src, p, c, Mode::eval);
  std::vector<int> tgt{6, 7, 8};
  Tensor base = decoder_forward(tgt, enc, src, p, c, Mode::eval);
  std::vector<int> perturbed = tgt;
  perturbed[1] = 10;  // change position i+1 = 1
  Tensor out = decoder_forward(perturbed, enc, src, p, c, Mode::eval);
  bool changed = false;
  for (int v = 0; v < c.vocab_size && !changed; ++v)
    changed = out.data()[v] != base.data()[v];  // logits at position 0
  CHECK(changed);
}

TEST_CASE("encoder: shape, token permutation matters everywhere, gradient check") {
  ModelConfig c = tiny_config();
  Parameters p = init_parameters(c, ModelKind::ar, 13);
  std::vector<int> src{6, 7, 8, 9, 10};
  Tensor out = encoder_forward(src, p, c, Mode::eval);
  REQUIRE(out.shape() == Shape{5, 8});

  std::vector<int> swapped{7, 6, 8, 9, 10};
  Tensor out2 = encoder_forward(swapped, p, c, Mode::eval);
  for (int pos = 0; pos < 5; ++pos) {
    bool changed = false;
    for (int j = 0; j < 8 && !changed; ++j)
      changed = out.data()[pos * 8 + j] != out2.data()[pos * 8 + j];
    CHECK(changed);
  }

  // finite differences through the whole encoder stack
  Rng rng(15);
  Tensor w = Tensor::randn({5, 8}, 1.0f, rng);
  auto build = [&] { return sum(mul(encoder_forward(src, p, c, Mode::train), w)); };
  p.zero_grads();
  build().backward();
  auto loss_fn = [&] { return static_cast<double>(build().item()); };
  long total_checked = 0;
  for (const char* name : {"enc.0.attn.wq", "enc.0.ffn.w1", "enc.0.ln1.g", "embed.tok"}) {
    const auto rep = mp::test::fd_check_tensor(loss_fn, p.at(name), name, 12);
    CHECK_MESSAGE(rep.failed == 0, name, " worst ", rep.worst_rel_err, " at ", rep.worst_coord);
    total_checked += rep.checked;
  }
  CHECK(total_checked >= 20);
}

TEST_CASE("incremental decoding matches the full forward pass") {
  ModelConfig c = tiny_config();
  c.decoder_attention = DecoderAttention::causal;
  Parameters p = init_parameters(c, ModelKind::ar, 17);
  std::vector<int> src{6, 7, 8, 9};
  Tensor enc = encoder_forward(src, p, c, Mode::eval);

  std::vector<int> prefix{Vocab::BOS, 6, 9, 7, 8};
  DecoderCache cache = make_decoder_cache(enc, p, c);
  std::vector<std::vector<float>> inc_rows;
  for (int tok : prefix) inc_rows.push_back(incremental_decoder_forward(tok, cache, enc, p, c));

  Tensor full = decoder_forward(prefix, enc, src, p, c, Mode::eval);
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    for (int v = 0; v < c.vocab_size; ++v) {
      const float a = inc_rows[i][static_cast<std::size_t>(v)];
      const float b = full.data()[i * static_cast<std::size_t>(c.vocab_size) + v];
      CHECK(std::abs(a - b) < 1e-5);
    }
  }

  // first token from an empty cache equals the length-1 full forward
  DecoderCache fresh = make_decoder_cache(enc, p, c);
  const auto first = incremental_decoder_forward(Vocab::BOS, fresh, enc, p, c);
  Tensor one = decoder_forward(std::vector<int>{Vocab::BOS}, enc, src, p, c, Mode::eval);
  for (int v = 0; v < c.vocab_size; ++v)
    CHECK(std::abs(first[static_cast<std::size_t>(v)] - one.data()[v]) < 1e-5);
}

TEST_CASE("incremental decoding rejects bidirectional configs") {
  ModelConfig c = tiny_config();
  c.decoder_attention = DecoderAttention::bidirectional;
  Parameters p = init_parameters(c, ModelKind::cmlm, 17);
  std::vector<int> src{6, 7};
  Tensor enc = encoder_forward(src, p, c, Mode::eval);
  DecoderCache cache = make_decoder_cache(enc, p, c);
  CHECK_THROWS_AS(incremental_decoder_forward(Vocab::BOS, cache, enc, p, c), ContractError);
}

TEST_CASE("incremental cache turns quadratic decode cost into roughly linear") {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.d_model = 32;
  c.d_hidden = 64;
  c.vocab_size = 16;
  c.max_len = 140;
  c.decoder_attention = DecoderAttention::causal;
  Parameters p = init_parameters(c, ModelKind::ar, 19);
  std::vector<int> src{6, 7, 8};
  Tensor enc = encoder_forward(src, p, c, Mode::eval);

  auto cached_time = [&](int L) {
    const auto t0 = std::chrono::steady_clock::now();
    DecoderCache cache = make_decoder_cache(enc, p, c);
    int tok = Vocab::BOS;
    for (int i = 0; i < L; ++i) {
      const auto row = incremental_decoder_forward(tok, cache, enc, p, c);
      tok = 6 + (i % 8);
    }
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto uncached_time = [&](int L) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> prefix{Vocab::BOS};
    for (int i = 0; i < L; ++i) {
      Tensor full = decoder_forward(prefix, enc, src, p, c, Mode::eval);
      prefix.push_back(6 + (i % 8));
    }
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  // warm both paths, then compare at L=128
  (void)cached_time(8);
  (void)uncached_time(8);
  const double c32 = cached_time(32);
  const double c128 = cached_time(128);
  const double u128 = uncached_time(128);
  CHECK(u128 > 2.0 * c128);        // cache pays off
  CHECK(c128 < 12.0 * c32);        // ~linear growth (4x work, wide margin)
}

TEST_CASE("checkpoint round-trip is bit-exact and config-checked") {
  const std::string dir = (std::filesystem::temp_directory_path() / "mp_ckpt_test").string();
  std::filesystem::create_directories(dir);
  Model m = make_model(ModelKind::cmlm, tiny_config(), 21);
  const std::string path = dir + "/a.bin";
  save_checkpoint(m, path);
  Model r = load_checkpoint(path);
  CHECK(r.kind == ModelKind::cmlm);
  CHECK(r.config == m.config);
  REQUIRE(r.params.by_name.size() == m.params.by_name.size());
  for (const auto& [name, t] : m.params.by_name) CHECK(same_values(t, r.params.at(name)));
  CHECK_THROWS_AS(load_checkpoint(dir + "/missing.bin"), CheckpointError);
}

TEST_CASE("checkpoint averaging: identity, midpoint, and preserved name set") {
  const std::string dir = (std::filesystem::temp_directory_path() / "mp_avg_test").string();
  std::filesystem::create_directories(dir);
  Model m = make_model(ModelKind::ar, tiny_config(), 23);
  save_checkpoint(m, dir + "/theta.bin");
  save_checkpoint(m, dir + "/theta2.bin");

  Model same = average_checkpoints({dir + "/theta.bin", dir + "/theta2.bin"});
  for (const auto& [name, t] : m.params.by_name) CHECK(same_values(t, same.params.at(name)));

  Model zero = make_model(ModelKind::ar, tiny_config(), 23);
  for (auto& [name, t] : zero.params.by_name)
    for (auto& v : t.mutable_data()) v = 0.0f;
  Model twice = make_model(ModelKind::ar, tiny_config(), 23);
  for (auto& [name, t] : twice.params.by_name)
    for (auto& v : t.mutable_data()) v *= 2.0f;
  save_checkpoint(zero, dir + "/zero.bin");
  save_checkpoint(twice, dir + "/twice.bin");
  Model mid = average_checkpoints({dir + "/zero.bin", dir + "/twice.bin"});
  for (const auto& [name, t] : m.params.by_name) {
    const auto got = mid.params.at(name).data();
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(t.data()[i]).epsilon(1e-6));
  }

  Model other = make_model(ModelKind::ar, tiny_config(16, 10), 23);
  save_checkpoint(other, dir + "/other.bin");
  CHECK_THROWS_AS(average_checkpoints({dir + "/theta.bin", dir + "/other.bin"}), CheckpointError);
}

TEST_CASE("batched encoder rows match single-sentence encoding") {
  ModelConfig c = tiny_config();
  Parameters p = init_parameters(c, ModelKind::cmlm, 29);
  std::vector<std::vector<int>> rows{{6, 7, 8, 9}, {10, 11}, {12, 6, 7, 8, 9, 10}};
  Tensor batched = encoder_forward(TokenBatch::from_rows(rows), p, c, Mode::eval, nullptr);
  for (int b = 0; b < 3; ++b) {
    Tensor single = encoder_forward(rows[static_cast<std::size_t>(b)], p, c, Mode::eval);
    const int len = static_cast<int>(rows[static_cast<std::size_t>(b)].size());
    for (int l = 0; l < len; ++l)
      for (int j = 0; j < c.d_model; ++j) {
        const float a = batched.data()[(static_cast<std::size_t>(b) * batched.dim(1) + l) *
                                           c.d_model + j];
        const float s = single.data()[static_cast<std::size_t>(l) * c.d_model + j];
        CHECK(std::abs(a - s) < 1e-5);
      }
  }
}
