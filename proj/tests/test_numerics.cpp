#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mp/adam.hpp"
#include "mp/tensor.hpp"
#include "test_util.hpp"

using namespace mp;
using mp::test::fd_grad;
using mp::test::rel_err;

TEST_CASE("matmul identity and 1x2 times 2x1") {
  Tensor id = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {3.5f, -1, 2, 7});
  Tensor out = matmul(id, m);
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == m.data()[i]);

  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0f));
}

TEST_CASE("matmul shape mismatch raises") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), TensorError);
}

TEST_CASE("matmul gradient: sum(a x b) wrt a equals ones x b^T, and matches FD") {
  Rng rng(7);
  Tensor a = Tensor::randn({4, 5}, 1.0f, rng, true);
  Tensor b = Tensor::randn({5, 3}, 1.0f, rng, true);
  Tensor loss = sum(matmul(a, b));
  loss.backward();

  // closed form: d sum(ab) / da = ones(4,3) x b^T
  for (int i = 0; i < 4; ++i) {
    for (int k = 0; k < 5; ++k) {
      double want = 0;
      for (int j = 0; j < 3; ++j) want += b.data()[k * 3 + j];
      CHECK(rel_err(a.grad()[i * 5 + k], want) < 1e-4);
    }
  }

  auto loss_fn = [&] { return static_cast<double>(sum(matmul(a, b)).item()); };
  for (std::size_t idx : {0u, 7u, 19u}) {
    CHECK(rel_err(a.grad()[idx], fd_grad(loss_fn, a, idx)) < 1e-2);
  }
  for (std::size_t idx : {0u, 8u, 14u}) {
    CHECK(rel_err(b.grad()[idx], fd_grad(loss_fn, b, idx)) < 1e-2);
  }
}

TEST_CASE("matmul_nt matches explicit transpose and FD") {
  Rng rng(11);
  Tensor a = Tensor::randn({3, 4}, 1.0f, rng, true);
  Tensor b = Tensor::randn({5, 4}, 1.0f, rng, true);
  Tensor out = matmul_nt(a, b);
  REQUIRE(out.shape() == Shape{3, 5});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double want = 0;
      for (int k = 0; k < 4; ++k) want += a.data()[i * 4 + k] * b.data()[j * 4 + k];
      CHECK(rel_err(out.data()[i * 5 + j], want) < 1e-4);
    }

  Tensor loss = sum(mul(out, out));
  loss.backward();
  auto loss_fn = [&] {
    Tensor o = matmul_nt(a, b);
    return static_cast<double>(sum(mul(o, o)).item());
  };
  for (std::size_t idx : {1u, 6u, 11u}) {
    CHECK(rel_err(a.grad()[idx], fd_grad(loss_fn, a, idx)) < 1e-2);
    CHECK(rel_err(b.grad()[idx], fd_grad(loss_fn, b, idx)) < 1e-2);
  }
}

TEST_CASE("batched matmul equals per-slice 2-D matmul") {
  Rng rng(3);
  Tensor a = Tensor::randn({2, 3, 4}, 1.0f, rng);
  Tensor b = Tensor::randn({2, 4, 5}, 1.0f, rng);
  Tensor out = matmul(a, b);
  for (int s = 0; s < 2; ++s) {
    std::vector<float> as(a.data().begin() + s * 12, a.data().begin() + (s + 1) * 12);
    std::vector<float> bs(b.data().begin() + s * 20, b.data().begin() + (s + 1) * 20);
    Tensor ref = matmul(Tensor::from_data({3, 4}, as), Tensor::from_data({4, 5}, bs));
    for (int i = 0; i < 15; ++i) CHECK(out.data()[s * 15 + i] == ref.data()[i]);
  }
}

TEST_CASE("softmax symmetry, stability, and direct evaluation") {
  Tensor x = Tensor::from_data({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-6));

  Tensor big = softmax(Tensor::from_data({2}, {1000, 0}), 0);
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] == doctest::Approx(0.0));
  CHECK(all_finite(big));

  // independent oracle: exp/sum computed in double
  Tensor z = softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(z.data()[0] == doctest::Approx(std::exp(1.0) / denom).epsilon(1e-5));
  CHECK(z.data()[1] == doctest::Approx(std::exp(2.0) / denom).epsilon(1e-5));
  CHECK(z.data()[2] == doctest::Approx(std::exp(3.0) / denom).epsilon(1e-5));
  CHECK(z.data()[0] == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK(z.data()[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(z.data()[2] == doctest::Approx(0.6652).epsilon(1e-3));
}

TEST_CASE("softmax rows sum to one for any finite input and axis") {
  Rng rng(5);
  Tensor x = Tensor::randn({4, 6, 5}, 3.0f, rng);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor y = softmax(x, axis);
    // sum along the reduced axis
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < 3; ++i) inner *= s[i];
    const int n = s[axis];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t r = 0; r < inner; ++r) {
        double acc = 0;
        for (int i = 0; i < n; ++i) acc += y.data()[o * n * inner + i * inner + r];
        CHECK(std::abs(acc - 1.0) < 1e-6);
        for (int i = 0; i < n; ++i) CHECK(y.data()[o * n * inner + i * inner + r] >= 0.0f);
      }
  }
}

TEST_CASE("softmax gradient matches FD") {
  Rng rng(9);
  Tensor x = Tensor::randn({2, 4}, 1.0f, rng, true);
  Tensor w = Tensor::randn({2, 4}, 1.0f, rng);  // fixed projection to get a scalar
  Tensor loss = sum(mul(softmax(x, -1), w));
  loss.backward();
  auto loss_fn = [&] { return static_cast<double>(sum(mul(softmax(x, -1), w)).item()); };
  for (std::size_t idx = 0; idx < 8; ++idx)
    CHECK(rel_err(x.grad()[idx], fd_grad(loss_fn, x, idx)) < 1e-2);
}

TEST_CASE("layer_norm on constant and two-point vectors") {
  Tensor gamma = Tensor::from_data({4}, {1, 1, 1, 1});
  Tensor beta = Tensor::zeros({4});
  Tensor c = layer_norm(Tensor::from_data({1, 4}, {5, 5, 5, 5}), gamma, beta);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(c.data()[i]) < 1e-4);

  Tensor g2 = Tensor::from_data({2}, {1, 1});
  Tensor b2 = Tensor::zeros({2});
  Tensor two = layer_norm(Tensor::from_data({1, 2}, {1, 3}), g2, b2);
  CHECK(two.data()[0] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(two.data()[1] == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("layer_norm normalizes mean and variance before affine") {
  Rng rng(21);
  Tensor x = Tensor::randn({3, 16}, 2.0f, rng);
  Tensor gamma = Tensor::from_data({16}, std::vector<float>(16, 1.0f));
  Tensor beta = Tensor::zeros({16});
  Tensor y = layer_norm(x, gamma, beta);
  for (int r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (int i = 0; i < 16; ++i) mean += y.data()[r * 16 + i];
    mean /= 16;
    for (int i = 0; i < 16; ++i) {
      const double c = y.data()[r * 16 + i] - mean;
      var += c * c;
    }
    var /= 16;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);  // eps inside the sqrt shrinks it slightly
  }
}

TEST_CASE("layer_norm gradient matches FD for x, gamma, beta") {
  Rng rng(13);
  Tensor x = Tensor::randn({2, 6}, 1.5f, rng, true);
  Tensor gamma = Tensor::randn({6}, 0.5f, rng, true);
  Tensor beta = Tensor::randn({6}, 0.5f, rng, true);
  Tensor w = Tensor::randn({2, 6}, 1.0f, rng);
  auto build = [&] { return sum(mul(layer_norm(x, gamma, beta), w)); };
  build().backward();
  auto loss_fn = [&] { return static_cast<double>(build().item()); };
  for (std::size_t idx = 0; idx < 12; ++idx)
    CHECK(rel_err(x.grad()[idx], fd_grad(loss_fn, x, idx)) < 1e-2);
  for (std::size_t idx = 0; idx < 6; ++idx) {
    CHECK(rel_err(gamma.grad()[idx], fd_grad(loss_fn, gamma, idx)) < 1e-2);
    CHECK(rel_err(beta.grad()[idx], fd_grad(loss_fn, beta, idx)) < 1e-2);
  }
}

TEST_CASE("smoothed cross entropy limiting and hand-computed cases") {
  // eps=0, near-one-hot logits: loss approaches 0 as the target logit grows
  std::vector<int> tgt{0};
  Tensor sharp = Tensor::from_data({1, 3}, {50, 0, 0});
  CHECK(smoothed_cross_entropy(sharp, tgt, 0.0f).item() < 1e-6);

  // uniform logits, V=4, eps=0.1 -> ln 4
  Tensor uni = Tensor::from_data({1, 4}, {0, 0, 0, 0});
  CHECK(uni.defined());
  CHECK(smoothed_cross_entropy(uni, tgt, 0.1f).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

  // V=3, logits [2,0,0], target 0, eps=0.1: hand evaluation of the formula
  Tensor l = Tensor::from_data({1, 3}, {2, 0, 0});
  const double denom = std::exp(2.0) + 2.0;
  const double p0 = std::exp(2.0) / denom, p1 = 1.0 / denom, p2 = 1.0 / denom;
  const double want = 0.9 * -std::log(p0) + 0.05 * -std::log(p1) + 0.05 * -std::log(p2);
  CHECK(smoothed_cross_entropy(l, tgt, 0.1f).item() == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("smoothed cross entropy rejects out-of-range targets") {
  std::vector<int> bad{3};
  Tensor l = Tensor::zeros({1, 3});
  CHECK_THROWS_AS(smoothed_cross_entropy(l, bad, 0.1f), TensorError);
}

TEST_CASE("smoothed cross entropy gradient matches FD; zero-weight rows get zero grad") {
  Rng rng(17);
  Tensor logits = Tensor::randn({3, 5}, 1.0f, rng, true);
  std::vector<int> targets{1, 4, 0};
  std::vector<float> weights{1.0f, 0.0f, 2.0f};
  Tensor loss = smoothed_cross_entropy(logits, targets, 0.1f, weights);
  loss.backward();
  auto loss_fn = [&] {
    return static_cast<double>(smoothed_cross_entropy(logits, targets, 0.1f, weights).item());
  };
  for (std::size_t idx = 0; idx < 15; ++idx) {
    const double fd = fd_grad(loss_fn, logits, idx, 1e-2);
    if (idx >= 5 && idx < 10) {
      CHECK(logits.grad()[idx] == 0.0f);  // masked-out row
    } else {
      CHECK(rel_err(logits.grad()[idx], fd) < 1e-2);
    }
  }
}

TEST_CASE("backward basics: sum and elementwise square") {
  Rng rng(23);
  Tensor x = Tensor::randn({7}, 1.0f, rng, true);
  sum(x).backward();
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));

  Tensor y = Tensor::randn({5}, 1.0f, rng, true);
  sum(mul(y, y)).backward();
  for (int i = 0; i < 5; ++i) CHECK(y.grad()[i] == doctest::Approx(2.0f * y.data()[i]).epsilon(1e-5));
}

TEST_CASE("backward accumulates across calls and rejects non-scalar roots") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor loss = sum(x);
  loss.backward();
  loss.backward();
  for (float g : x.grad()) CHECK(g == doctest::Approx(2.0f));
  CHECK_THROWS_AS(mul(x, x).backward(), TensorError);
}

TEST_CASE("forward ops are deterministic") {
  Rng rng(31);
  Tensor a = Tensor::randn({8, 8}, 1.0f, rng);
  Tensor b = Tensor::randn({8, 8}, 1.0f, rng);
  Tensor o1 = softmax(matmul(a, b), -1);
  Tensor o2 = softmax(matmul(a, b), -1);
  for (std::size_t i = 0; i < o1.data().size(); ++i) CHECK(o1.data()[i] == o2.data()[i]);
}

TEST_CASE("no-grad mode builds no graph") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  NoGradGuard ng;
  Tensor y = sum(mul(x, x));
  y.backward();  // detached: no-op
  CHECK(x.grad().empty());
}

TEST_CASE("rows gather/scatter gradient") {
  Rng rng(41);
  Tensor table = Tensor::randn({6, 3}, 1.0f, rng, true);
  std::vector<int> ids{2, 2, 5};
  Tensor picked = rows(table, ids);
  REQUIRE(picked.shape() == Shape{3, 3});
  sum(picked).backward();
  // row 2 selected twice, row 5 once, others never
  for (int j = 0; j < 3; ++j) {
    CHECK(table.grad()[2 * 3 + j] == doctest::Approx(2.0f));
    CHECK(table.grad()[5 * 3 + j] == doctest::Approx(1.0f));
    CHECK(table.grad()[0 * 3 + j] == 0.0f);
  }
  CHECK_THROWS_AS(rows(table, std::vector<int>{6}), TensorError);
}

TEST_CASE("split/merge heads round-trip") {
  Rng rng(43);
  Tensor x = Tensor::randn({2, 3, 8}, 1.0f, rng, true);
  Tensor rt = merge_heads(split_heads(x, 4), 4);
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(rt.data()[i] == x.data()[i]);
  sum(mul(rt, rt)).backward();
  for (std::size_t i = 0; i < x.data().size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]).epsilon(1e-5));
}

TEST_CASE("dropout scales kept activations and is deterministic per seed") {
  Tensor x = Tensor::full({10000}, 1.0f);
  Rng r1(99), r2(99);
  Tensor d1 = dropout(x, 0.3f, r1);
  Tensor d2 = dropout(x, 0.3f, r2);
  double kept = 0;
  for (std::size_t i = 0; i < d1.data().size(); ++i) {
    CHECK(d1.data()[i] == d2.data()[i]);
    if (d1.data()[i] != 0.0f) {
      CHECK(d1.data()[i] == doctest::Approx(1.0f / 0.7f));
      kept += 1;
    }
  }
  CHECK(kept / 10000.0 == doctest::Approx(0.7).epsilon(0.03));
}

TEST_CASE("adam first step moves by about -lr*sign(g); zero grad is a no-op") {
  Parameters params;
  params.by_name.emplace("layer.w", Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true));
  auto g = params.at("layer.w").mutable_grad();
  g[0] = 0.3f;
  g[1] = -4.0f;
  g[2] = 0.001f;

  AdamConfig cfg;
  cfg.weight_decay = 0.0f;
  AdamOptimizer opt(cfg);
  opt.update(params, 0.01f);
  const auto w = params.at("layer.w").data();
  CHECK(w[0] == doctest::Approx(1.0f - 0.01f).epsilon(1e-2));
  CHECK(w[1] == doctest::Approx(-2.0f + 0.01f).epsilon(1e-2));
  CHECK(w[2] == doctest::Approx(0.5f - 0.01f).epsilon(1e-1));  // eps softens tiny grads

  Parameters still;
  still.by_name.emplace("layer.w", Tensor::from_data({2}, {1.0f, 2.0f}, true));
  still.at("layer.w").mutable_grad();  // zero grads
  AdamOptimizer opt2(cfg);
  opt2.update(still, 0.01f);
  CHECK(still.at("layer.w").data()[0] == 1.0f);
  CHECK(still.at("layer.w").data()[1] == 2.0f);
}

TEST_CASE("adam with lr=0 is the identity on parameters") {
  Parameters params;
  params.by_name.emplace("layer.w", Tensor::from_data({2}, {3.0f, -1.0f}, true));
  auto g = params.at("layer.w").mutable_grad();
  g[0] = 1.0f;
  g[1] = -2.0f;
  AdamOptimizer opt;
  opt.update(params, 0.0f);
  CHECK(params.at("layer.w").data()[0] == 3.0f);
  CHECK(params.at("layer.w").data()[1] == -1.0f);
}

TEST_CASE("adam converges on a 1-D quadratic bowl") {
  Parameters params;
  params.by_name.emplace("w", Tensor::from_data({1}, {1.0f}, true));
  AdamConfig cfg;
  cfg.weight_decay = 0.0f;
  AdamOptimizer opt(cfg);
  for (int step = 0; step < 200; ++step) {
    Tensor& w = params.at("w");
    w.zero_grad();
    w.mutable_grad()[0] = 2.0f * w.data()[0];  // d/dw of w^2
    opt.update(params, 0.01f);
  }
  CHECK(std::abs(params.at("w").data()[0]) < 0.1f);
  CHECK(opt.step() == 200);
}

TEST_CASE("weight decay predicate covers weights, spares biases and layer norm") {
  CHECK(weight_decay_applies("enc.0.attn.wq"));
  CHECK(weight_decay_applies("enc.0.ffn.w1"));
  CHECK(weight_decay_applies("embed.tok"));
  CHECK(weight_decay_applies("len.w"));
  CHECK(!weight_decay_applies("enc.0.attn.bq"));
  CHECK(!weight_decay_applies("enc.0.ln1.g"));
  CHECK(!weight_decay_applies("enc.0.ln1.b"));
  CHECK(!weight_decay_applies("len.b"));
}

TEST_CASE("clip_global_norm scales grads above the threshold") {
  Parameters params;
  params.by_name.emplace("a.w", Tensor::from_data({2}, {0.0f, 0.0f}, true));
  auto g = params.at("a.w").mutable_grad();
  g[0] = 3.0f;
  g[1] = 4.0f;
  const float norm = clip_global_norm(params, 1.0f);
  CHECK(norm == doctest::Approx(5.0f));
  CHECK(params.at("a.w").grad()[0] == doctest::Approx(0.6f));
  CHECK(params.at("a.w").grad()[1] == doctest::Approx(0.8f));
}
