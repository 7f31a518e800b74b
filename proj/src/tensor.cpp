#include "mp/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace mp {

namespace {

thread_local int g_no_grad_depth = 0;

void blas_single_thread() {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}

[[noreturn]] void fail(const std::string& msg) { throw TensorError(msg); }

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

#ifndef NDEBUG
void debug_check_finite(const detail::Node& n, const char* op) {
  for (float v : n.values) {
    assert(std::isfinite(v) && "non-finite value produced by forward op");
    (void)v;
  }
  (void)op;
}
#define MP_CHECK_FINITE(node, op) debug_check_finite(node, op)
#else
#define MP_CHECK_FINITE(node, op) ((void)0)
#endif

detail::NodePtr new_node(Shape shape, std::vector<float> values) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  return n;
}

bool track(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->node().on_tape()) return true;
  }
  return false;
}

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  check(axis >= 0 && axis < r, "axis out of range");
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor make_tensor(detail::NodePtr n) {
  struct Access : Tensor {
    explicit Access(detail::NodePtr p) : Tensor(std::move(p)) {}
  };
  return Access(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  check(n >= 0, "negative dimension in shape " + shape_str(shape));
  auto node = new_node(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), 0.0f));
  node->is_param = requires_grad;
  return make_tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, float value) {
  const auto n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value));
  return make_tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return full({1}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
  check(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
        "data length does not match shape " + shape_str(shape));
  auto node = new_node(std::move(shape), std::move(values));
  node->is_param = requires_grad;
  return make_tensor(std::move(node));
}

Tensor Tensor::randn(Shape shape, float stddev, Rng& rng, bool requires_grad) {
  const auto n = shape_numel(shape);
  std::vector<float> v(static_cast<std::size_t>(n));
  for (float& x : v) x = rng.normal(0.0f, stddev);
  auto node = new_node(std::move(shape), std::move(v));
  node->is_param = requires_grad;
  return make_tensor(std::move(node));
}

float Tensor::item() const {
  check(size() == 1, "item() on non-scalar tensor " + shape_str(shape()));
  return node_->values[0];
}

void Tensor::backward() const {
  check(size() == 1, "backward root must be a scalar, got " + shape_str(shape()));
  detail::Node* root = node_.get();
  if (!root->on_tape()) return;  // detached graph: nothing to accumulate

  // Iterative post-order DFS to build a reverse topological order.
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> visited;
  struct Frame {
    detail::Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::Node* p = f.node->parents[f.next_parent++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
    // Intermediate grads are transient: fully consumed once every consumer
    // (all of which precede n in reverse topo order) has contributed. Only
    // leaf parameters keep accumulating across backward calls.
    if (!n->is_param && !n->grad.empty()) n->grad.assign(n->grad.size(), 0.0f);
  }
}

// ---------------------------------------------------------------------------
// ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  blas_single_thread();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check(sa.size() == sb.size() && (sa.size() == 2 || sa.size() == 3),
        "matmul expects both 2-D or both 3-D, got " + shape_str(sa) + " x " + shape_str(sb));
  const bool batched = sa.size() == 3;
  const int nb = batched ? sa[0] : 1;
  const int m = batched ? sa[1] : sa[0];
  const int k = batched ? sa[2] : sa[1];
  const int kb = batched ? sb[1] : sb[0];
  const int n = batched ? sb[2] : sb[1];
  check(k == kb, "matmul inner dimensions disagree: " + shape_str(sa) + " x " + shape_str(sb));
  check(!batched || sa[0] == sb[0], "matmul batch dimensions disagree");

  Shape out_shape = batched ? Shape{nb, m, n} : Shape{m, n};
  auto out = new_node(out_shape, std::vector<float>(static_cast<std::size_t>(nb) * m * n));
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* pc = out->values.data();
  for (int i = 0; i < nb; ++i) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f,
                pa + static_cast<std::size_t>(i) * m * k, k,
                pb + static_cast<std::size_t>(i) * k * n, n, 0.0f,
                pc + static_cast<std::size_t>(i) * m * n, n);
  }
  MP_CHECK_FINITE(*out, "matmul");

  Tensor result = make_tensor(out);
  if (track({&a, &b})) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    result.node().parents = {an, bn};
    result.node().backprop = [an, bn, nb, m, k, n](const detail::Node& self) {
      const float* g = self.grad.data();
      if (an->on_tape()) {
        float* da = an->ensure_grad().data();
        for (int i = 0; i < nb; ++i) {
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0f,
                      g + static_cast<std::size_t>(i) * m * n, n,
                      bn->values.data() + static_cast<std::size_t>(i) * k * n, n, 1.0f,
                      da + static_cast<std::size_t>(i) * m * k, k);
        }
      }
      if (bn->on_tape()) {
        float* db = bn->ensure_grad().data();
        for (int i = 0; i < nb; ++i) {
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0f,
                      an->values.data() + static_cast<std::size_t>(i) * m * k, k,
                      g + static_cast<std::size_t>(i) * m * n, n, 1.0f,
                      db + static_cast<std::size_t>(i) * k * n, n);
        }
      }
    };
  }
  return result;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  blas_single_thread();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check(sa.size() == sb.size() && (sa.size() == 2 || sa.size() == 3),
        "matmul_nt expects both 2-D or both 3-D, got " + shape_str(sa) + " x " + shape_str(sb));
  const bool batched = sa.size() == 3;
  const int nb = batched ? sa[0] : 1;
  const int m = batched ? sa[1] : sa[0];
  const int k = batched ? sa[2] : sa[1];
  const int n = batched ? sb[1] : sb[0];
  const int kb = batched ? sb[2] : sb[1];
  check(k == kb, "matmul_nt inner dimensions disagree: " + shape_str(sa) + " x " + shape_str(sb));
  check(!batched || sa[0] == sb[0], "matmul_nt batch dimensions disagree");

  Shape out_shape = batched ? Shape{nb, m, n} : Shape{m, n};
  auto out = new_node(out_shape, std::vector<float>(static_cast<std::size_t>(nb) * m * n));
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* pc = out->values.data();
  for (int i = 0; i < nb; ++i) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0f,
                pa + static_cast<std::size_t>(i) * m * k, k,
                pb + static_cast<std::size_t>(i) * n * k, k, 0.0f,
                pc + static_cast<std::size_t>(i) * m * n, n);
  }
  MP_CHECK_FINITE(*out, "matmul_nt");

  Tensor result = make_tensor(out);
  if (track({&a, &b})) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    result.node().parents = {an, bn};
    result.node().backprop = [an, bn, nb, m, k, n](const detail::Node& self) {
      const float* g = self.grad.data();
      if (an->on_tape()) {
        float* da = an->ensure_grad().data();
        for (int i = 0; i < nb; ++i) {
          // dA = dC x B  ([m,n] x [n,k])
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, k, n, 1.0f,
                      g + static_cast<std::size_t>(i) * m * n, n,
                      bn->values.data() + static_cast<std::size_t>(i) * n * k, k, 1.0f,
                      da + static_cast<std::size_t>(i) * m * k, k);
        }
      }
      if (bn->on_tape()) {
        float* db = bn->ensure_grad().data();
        for (int i = 0; i < nb; ++i) {
          // dB = dC^T x A  ([n,m] x [m,k])
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, n, k, m, 1.0f,
                      g + static_cast<std::size_t>(i) * m * n, n,
                      an->values.data() + static_cast<std::size_t>(i) * m * k, k, 1.0f,
                      db + static_cast<std::size_t>(i) * n * k, k);
        }
      }
    };
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  const bool bias = !same && sb.size() == 1 && !sa.empty() && sa.back() == sb[0];
  check(same || bias,
        "add requires equal shapes or a last-dim bias, got " + shape_str(sa) + " + " + shape_str(sb));

  auto out = new_node(sa, std::vector<float>(a.data().begin(), a.data().end()));
  if (same) {
    const float* pb = b.data().data();
    for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] += pb[i];
  } else {
    const std::size_t n = static_cast<std::size_t>(sb[0]);
    const float* pb = b.data().data();
    for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] += pb[i % n];
  }
  MP_CHECK_FINITE(*out, "add");

  Tensor result = make_tensor(out);
  if (track({&a, &b})) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    result.node().parents = {an, bn};
    result.node().backprop = [an, bn, same](const detail::Node& self) {
      if (an->on_tape()) {
        float* da = an->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
      }
      if (bn->on_tape()) {
        float* db = bn->ensure_grad().data();
        if (same) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) db[i] += self.grad[i];
        } else {
          const std::size_t n = bn->values.size();
          for (std::size_t i = 0; i < self.grad.size(); ++i) db[i % n] += self.grad[i];
        }
      }
    };
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "mul requires equal shapes, got " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  auto out = new_node(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  const float* pb = b.data().data();
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] *= pb[i];
  MP_CHECK_FINITE(*out, "mul");

  Tensor result = make_tensor(out);
  if (track({&a, &b})) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    result.node().parents = {an, bn};
    result.node().backprop = [an, bn](const detail::Node& self) {
      if (an->on_tape()) {
        float* da = an->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] * bn->values[i];
      }
      if (bn->on_tape()) {
        float* db = bn->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) db[i] += self.grad[i] * an->values[i];
      }
    };
  }
  return result;
}

Tensor scale(const Tensor& a, float s) {
  auto out = new_node(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (float& v : out->values) v *= s;
  MP_CHECK_FINITE(*out, "scale");

  Tensor result = make_tensor(out);
  if (track({&a})) {
    auto an = a.node_ptr();
    result.node().parents = {an};
    result.node().backprop = [an, s](const detail::Node& self) {
      if (!an->on_tape()) return;
      float* da = an->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] * s;
    };
  }
  return result;
}

Tensor relu(const Tensor& a) {
  auto out = new_node(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (float& v : out->values) v = v > 0.0f ? v : 0.0f;

  Tensor result = make_tensor(out);
  if (track({&a})) {
    auto an = a.node_ptr();
    result.node().parents = {an};
    result.node().backprop = [an](const detail::Node& self) {
      if (!an->on_tape()) return;
      float* da = an->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (an->values[i] > 0.0f) da[i] += self.grad[i];
      }
    };
  }
  return result;
}

Tensor softmax(const Tensor& a, int axis) {
  const AxisSplit ax = split_axis(a.shape(), axis);
  auto out = new_node(a.shape(), std::vector<float>(a.data().size()));
  const float* px = a.data().data();
  float* py = out->values.data();
  for (std::int64_t o = 0; o < ax.outer; ++o) {
    for (std::int64_t r = 0; r < ax.inner; ++r) {
      const std::int64_t base = o * ax.n * ax.inner + r;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::int64_t i = 0; i < ax.n; ++i) mx = std::max(mx, px[base + i * ax.inner]);
      float denom = 0.0f;
      for (std::int64_t i = 0; i < ax.n; ++i) {
        const float e = std::exp(px[base + i * ax.inner] - mx);
        py[base + i * ax.inner] = e;
        denom += e;
      }
      const float inv = 1.0f / denom;
      for (std::int64_t i = 0; i < ax.n; ++i) py[base + i * ax.inner] *= inv;
    }
  }
  MP_CHECK_FINITE(*out, "softmax");

  Tensor result = make_tensor(out);
  if (track({&a})) {
    auto an = a.node_ptr();
    result.node().parents = {an};
    result.node().backprop = [an, ax](const detail::Node& self) {
      if (!an->on_tape()) return;
      float* da = an->ensure_grad().data();
      const float* y = self.values.data();
      const float* g = self.grad.data();
      for (std::int64_t o = 0; o < ax.outer; ++o) {
        for (std::int64_t r = 0; r < ax.inner; ++r) {
          const std::int64_t base = o * ax.n * ax.inner + r;
          float dot = 0.0f;
          for (std::int64_t i = 0; i < ax.n; ++i) {
            const std::int64_t idx = base + i * ax.inner;
            dot += g[idx] * y[idx];
          }
          for (std::int64_t i = 0; i < ax.n; ++i) {
            const std::int64_t idx = base + i * ax.inner;
            da[idx] += (g[idx] - dot) * y[idx];
          }
        }
      }
    };
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const Shape& sx = x.shape();
  check(!sx.empty(), "layer_norm on empty shape");
  const int d = sx.back();
  check(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
        "layer_norm gamma/beta must match the last axis");
  const std::int64_t rows = shape_numel(sx) / d;

  auto out = new_node(sx, std::vector<float>(x.data().size()));
  std::vector<float> norm(x.data().size());   // pre-affine normalized values
  std::vector<float> inv_std(static_cast<std::size_t>(rows));
  const float* px = x.data().data();
  const float* pg = gamma.data().data();
  const float* pb = beta.data().data();
  float* py = out->values.data();
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    const float* row = px + rI * d;
    float mean = 0.0f;
    for (int i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int i = 0; i < d; ++i) {
      const float c = row[i] - mean;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float istd = 1.0f / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(rI)] = istd;
    for (int i = 0; i < d; ++i) {
      const float y = (row[i] - mean) * istd;
      norm[static_cast<std::size_t>(rI * d + i)] = y;
      py[rI * d + i] = y * pg[i] + pb[i];
    }
  }
  MP_CHECK_FINITE(*out, "layer_norm");

  Tensor result = make_tensor(out);
  if (track({&x, &gamma, &beta})) {
    auto xn = x.node_ptr();
    auto gn = gamma.node_ptr();
    auto bn = beta.node_ptr();
    result.node().parents = {xn, gn, bn};
    result.node().backprop = [xn, gn, bn, rows, d, norm = std::move(norm),
                              inv_std = std::move(inv_std)](const detail::Node& self) {
      const float* g = self.grad.data();
      const float* pg2 = gn->values.data();
      if (gn->on_tape()) {
        float* dg = gn->ensure_grad().data();
        for (std::int64_t rI = 0; rI < rows; ++rI)
          for (int i = 0; i < d; ++i)
            dg[i] += g[rI * d + i] * norm[static_cast<std::size_t>(rI * d + i)];
      }
      if (bn->on_tape()) {
        float* db = bn->ensure_grad().data();
        for (std::int64_t rI = 0; rI < rows; ++rI)
          for (int i = 0; i < d; ++i) db[i] += g[rI * d + i];
      }
      if (xn->on_tape()) {
        float* dx = xn->ensure_grad().data();
        for (std::int64_t rI = 0; rI < rows; ++rI) {
          float mean_dy = 0.0f, mean_dyy = 0.0f;
          for (int i = 0; i < d; ++i) {
            const float dy = g[rI * d + i] * pg2[i];
            const float y = norm[static_cast<std::size_t>(rI * d + i)];
            mean_dy += dy;
            mean_dyy += dy * y;
          }
          mean_dy /= static_cast<float>(d);
          mean_dyy /= static_cast<float>(d);
          const float istd = inv_std[static_cast<std::size_t>(rI)];
          for (int i = 0; i < d; ++i) {
            const float dy = g[rI * d + i] * pg2[i];
            const float y = norm[static_cast<std::size_t>(rI * d + i)];
            dx[rI * d + i] += istd * (dy - mean_dy - y * mean_dyy);
          }
        }
      }
    };
  }
  return result;
}

Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> targets, float epsilon,
                              std::span<const float> weights) {
  check(logits.rank() == 2, "smoothed_cross_entropy expects [n,V] logits");
  const int n = logits.dim(0);
  const int V = logits.dim(1);
  check(static_cast<int>(targets.size()) == n, "targets length must equal logits rows");
  check(weights.empty() || static_cast<int>(weights.size()) == n,
        "weights length must equal logits rows");
  check(V >= 2, "smoothed_cross_entropy needs V >= 2");
  check(n >= 1, "smoothed_cross_entropy needs at least one row");
  for (int i = 0; i < n; ++i)
    check(targets[i] >= 0 && targets[i] < V,
          "target id " + std::to_string(targets[i]) + " out of range [0," + std::to_string(V) + ")");

  double weight_sum = 0.0;
  if (weights.empty()) {
    weight_sum = n;
  } else {
    for (float w : weights) weight_sum += w;
  }
  check(weight_sum > 0.0, "smoothed_cross_entropy needs positive total weight");

  const float off_target = epsilon / static_cast<float>(V - 1);
  const float on_target = 1.0f - epsilon;

  const float* px = logits.data().data();
  std::vector<float> probs(static_cast<std::size_t>(n) * V);
  double loss_acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const float w = weights.empty() ? 1.0f : weights[static_cast<std::size_t>(i)];
    const float* row = px + static_cast<std::size_t>(i) * V;
    float mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0, row_sum = 0.0;
    for (int j = 0; j < V; ++j) {
      denom += std::exp(static_cast<double>(row[j] - mx));
      row_sum += row[j];
    }
    const double lse = mx + std::log(denom);
    float* prow = probs.data() + static_cast<std::size_t>(i) * V;
    for (int j = 0; j < V; ++j)
      prow[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
    if (w == 0.0f) continue;
    const double t = row[targets[static_cast<std::size_t>(i)]];
    const double expected = on_target * t + off_target * (row_sum - t);
    loss_acc += w * (lse - expected);
  }
  const float loss = static_cast<float>(loss_acc / weight_sum);

  auto out = new_node({1}, {loss});
  Tensor result = make_tensor(out);
  if (track({&logits})) {
    auto ln = logits.node_ptr();
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<float> wts(weights.begin(), weights.end());
    result.node().parents = {ln};
    result.node().backprop = [ln, n, V, on_target, off_target, weight_sum, tgt = std::move(tgt),
                              wts = std::move(wts), probs = std::move(probs)](const detail::Node& self) {
      if (!ln->on_tape()) return;
      const float gscale = self.grad[0] / static_cast<float>(weight_sum);
      float* dl = ln->ensure_grad().data();
      for (int i = 0; i < n; ++i) {
        const float w = wts.empty() ? 1.0f : wts[static_cast<std::size_t>(i)];
        if (w == 0.0f) continue;
        const float* prow = probs.data() + static_cast<std::size_t>(i) * V;
        float* drow = dl + static_cast<std::size_t>(i) * V;
        const int t = tgt[static_cast<std::size_t>(i)];
        for (int j = 0; j < V; ++j) {
          const float q = j == t ? on_target : off_target;
          drow[j] += gscale * w * (prow[j] - q);
        }
      }
    };
  }
  return result;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  auto out = new_node({1}, {static_cast<float>(acc)});
  Tensor result = make_tensor(out);
  if (track({&a})) {
    auto an = a.node_ptr();
    result.node().parents = {an};
    result.node().backprop = [an](const detail::Node& self) {
      if (!an->on_tape()) return;
      float* da = an->ensure_grad().data();
      const float g = self.grad[0];
      for (std::size_t i = 0; i < an->values.size(); ++i) da[i] += g;
    };
  }
  return result;
}

Tensor rows(const Tensor& table, std::span<const int> ids) {
  check(table.rank() == 2, "rows expects a 2-D table");
  const int V = table.dim(0);
  const int d = table.dim(1);
  const int n = static_cast<int>(ids.size());
  for (int id : ids)
    check(id >= 0 && id < V, "row id " + std::to_string(id) + " out of range [0," + std::to_string(V) + ")");

  auto out = new_node({n, d}, std::vector<float>(static_cast<std::size_t>(n) * d));
  const float* pt = table.data().data();
  for (int i = 0; i < n; ++i)
    std::memcpy(out->values.data() + static_cast<std::size_t>(i) * d,
                pt + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d,
                sizeof(float) * static_cast<std::size_t>(d));

  Tensor result = make_tensor(out);
  if (track({&table})) {
    auto tn = table.node_ptr();
    std::vector<int> idv(ids.begin(), ids.end());
    result.node().parents = {tn};
    result.node().backprop = [tn, d, idv = std::move(idv)](const detail::Node& self) {
      if (!tn->on_tape()) return;
      float* dt = tn->ensure_grad().data();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        const float* g = self.grad.data() + i * static_cast<std::size_t>(d);
        float* row = dt + static_cast<std::size_t>(idv[i]) * d;
        for (int j = 0; j < d; ++j) row[j] += g[j];
      }
    };
  }
  return result;
}

Tensor position(const Tensor& x, int pos) {
  check(x.rank() == 3, "position expects a [B,len,d] tensor");
  const int B = x.dim(0), len = x.dim(1), d = x.dim(2);
  check(pos >= 0 && pos < len, "position index out of range");
  auto out = new_node({B, d}, std::vector<float>(static_cast<std::size_t>(B) * d));
  const float* px = x.data().data();
  for (int b = 0; b < B; ++b)
    std::memcpy(out->values.data() + static_cast<std::size_t>(b) * d,
                px + (static_cast<std::size_t>(b) * len + pos) * d, sizeof(float) * static_cast<std::size_t>(d));

  Tensor result = make_tensor(out);
  if (track({&x})) {
    auto xn = x.node_ptr();
    result.node().parents = {xn};
    result.node().backprop = [xn, B, len, d, pos](const detail::Node& self) {
      if (!xn->on_tape()) return;
      float* dx = xn->ensure_grad().data();
      for (int b = 0; b < B; ++b) {
        const float* g = self.grad.data() + static_cast<std::size_t>(b) * d;
        float* row = dx + (static_cast<std::size_t>(b) * len + pos) * d;
        for (int j = 0; j < d; ++j) row[j] += g[j];
      }
    };
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  check(shape_numel(shape) == a.size(),
        "reshape to " + shape_str(shape) + " does not preserve element count of " + shape_str(a.shape()));
  auto out = new_node(std::move(shape), std::vector<float>(a.data().begin(), a.data().end()));
  Tensor result = make_tensor(out);
  if (track({&a})) {
    auto an = a.node_ptr();
    result.node().parents = {an};
    result.node().backprop = [an](const detail::Node& self) {
      if (!an->on_tape()) return;
      float* da = an->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
    };
  }
  return result;
}

Tensor split_heads(const Tensor& x, int heads) {
  check(x.rank() == 3, "split_heads expects [B,len,d]");
  const int B = x.dim(0), len = x.dim(1), d = x.dim(2);
  check(d % heads == 0, "d_model not divisible by heads");
  const int dh = d / heads;
  auto out = new_node({B * heads, len, dh}, std::vector<float>(x.data().size()));
  const float* px = x.data().data();
  float* py = out->values.data();
  for (int b = 0; b < B; ++b)
    for (int l = 0; l < len; ++l)
      for (int h = 0; h < heads; ++h)
        std::memcpy(py + ((static_cast<std::size_t>(b) * heads + h) * len + l) * dh,
                    px + (static_cast<std::size_t>(b) * len + l) * d + static_cast<std::size_t>(h) * dh,
                    sizeof(float) * static_cast<std::size_t>(dh));

  Tensor result = make_tensor(out);
  if (track({&x})) {
    auto xn = x.node_ptr();
    result.node().parents = {xn};
    result.node().backprop = [xn, B, len, heads, dh, d](const detail::Node& self) {
      if (!xn->on_tape()) return;
      float* dx = xn->ensure_grad().data();
      const float* g = self.grad.data();
      for (int b = 0; b < B; ++b)
        for (int l = 0; l < len; ++l)
          for (int h = 0; h < heads; ++h) {
            const float* src = g + ((static_cast<std::size_t>(b) * heads + h) * len + l) * dh;
            float* dst = dx + (static_cast<std::size_t>(b) * len + l) * d + static_cast<std::size_t>(h) * dh;
            for (int j = 0; j < dh; ++j) dst[j] += src[j];
          }
    };
  }
  return result;
}

Tensor merge_heads(const Tensor& x, int heads) {
  check(x.rank() == 3, "merge_heads expects [B*H,len,dh]");
  const int BH = x.dim(0), len = x.dim(1), dh = x.dim(2);
  check(BH % heads == 0, "batch dimension not divisible by heads");
  const int B = BH / heads;
  const int d = heads * dh;
  auto out = new_node({B, len, d}, std::vector<float>(x.data().size()));
  const float* px = x.data().data();
  float* py = out->values.data();
  for (int b = 0; b < B; ++b)
    for (int l = 0; l < len; ++l)
      for (int h = 0; h < heads; ++h)
        std::memcpy(py + (static_cast<std::size_t>(b) * len + l) * d + static_cast<std::size_t>(h) * dh,
                    px + ((static_cast<std::size_t>(b) * heads + h) * len + l) * dh,
                    sizeof(float) * static_cast<std::size_t>(dh));

  Tensor result = make_tensor(out);
  if (track({&x})) {
    auto xn = x.node_ptr();
    result.node().parents = {xn};
    result.node().backprop = [xn, B, len, heads, dh, d](const detail::Node& self) {
      if (!xn->on_tape()) return;
      float* dx = xn->ensure_grad().data();
      const float* g = self.grad.data();
      for (int b = 0; b < B; ++b)
        for (int l = 0; l < len; ++l)
          for (int h = 0; h < heads; ++h) {
            const float* src = g + (static_cast<std::size_t>(b) * len + l) * d + static_cast<std::size_t>(h) * dh;
            float* dst = dx + ((static_cast<std::size_t>(b) * heads + h) * len + l) * dh;
            for (int j = 0; j < dh; ++j) dst[j] += src[j];
          }
    };
  }
  return result;
}

Tensor dropout(const Tensor& x, float rate, Rng& rng) {
  check(rate >= 0.0f && rate < 1.0f, "dropout rate must be in [0,1)");
  if (rate == 0.0f) return x;
  const float keep = 1.0f - rate;
  const float inv_keep = 1.0f / keep;
  std::vector<float> mask(x.data().size());
  for (float& m : mask) m = rng.next_unit() < rate ? 0.0f : inv_keep;

  auto out = new_node(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] *= mask[i];

  Tensor result = make_tensor(out);
  if (track({&x})) {
    auto xn = x.node_ptr();
    result.node().parents = {xn};
    result.node().backprop = [xn, mask = std::move(mask)](const detail::Node& self) {
      if (!xn->on_tape()) return;
      float* dx = xn->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * mask[i];
    };
  }
  return result;
}

bool all_finite(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace mp
