#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mp/rng.hpp"

namespace mp {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // allocated on demand, same size as values
  bool is_param = false;    // user-set requires_grad (leaf)
  std::vector<NodePtr> parents;
  std::function<void(const Node&)> backprop;  // reads grad, accumulates into parents

  bool on_tape() const { return is_param || static_cast<bool>(backprop); }
  std::vector<float>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0f);
    return grad;
  }
};

}  // namespace detail

// Autograd recording is on by default; NoGradGuard disables it for the
// current thread (pure inference builds no graph and allocates no closures).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major float32 tensor participating in a reverse-mode tape.
// Value-semantics handle: copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);
  static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor randn(Shape shape, float stddev, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }

  std::span<const float> data() const { return node_->values; }
  std::span<float> mutable_data() { return node_->values; }
  float item() const;

  bool requires_grad() const { return node_->is_param; }
  void set_requires_grad(bool on) { node_->is_param = on; }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0f);
  }

  // Reverse-mode sweep from a scalar root; grads accumulate across calls.
  void backward() const;

  detail::Node& node() const { return *node_; }
  const detail::NodePtr& node_ptr() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}
  friend Tensor make_tensor(detail::NodePtr);
  detail::NodePtr node_;
};

Tensor make_tensor(detail::NodePtr n);

// ---- ops (all participate in the tape when grad mode is on) ----

// 2-D [m,k]x[k,n] or batched 3-D [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a x b^T over the last two dims: 2-D [m,k]x[n,k] -> [m,n], or batched 3-D.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Same shape, or b broadcast over the last dimension (bias add).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& a);

// Softmax along `axis` (negative counts from the back), max-subtracted.
Tensor softmax(const Tensor& a, int axis = -1);

// Normalizes the last axis to mean 0 / var 1 (eps inside the sqrt), then
// applies elementwise gamma/beta of that axis length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Label-smoothed cross entropy over rows of logits [n,V]: q places 1-eps on
// the target and eps/(V-1) on every other word. Returns the weighted mean
// over rows (weights default to all-ones; zero-weight rows contribute
// nothing and receive zero gradient).
Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> targets, float epsilon,
                              std::span<const float> weights = {});

Tensor sum(const Tensor& a);                             // -> scalar
Tensor rows(const Tensor& table, std::span<const int> ids);  // gather rows of [V,d]
Tensor position(const Tensor& x, int pos);               // [B,len,d] -> [B,d]
Tensor reshape(const Tensor& a, Shape shape);
Tensor split_heads(const Tensor& x, int heads);          // [B,len,H*dh] -> [B*H,len,dh]
Tensor merge_heads(const Tensor& x, int heads);          // inverse of split_heads
Tensor dropout(const Tensor& x, float rate, Rng& rng);   // inverted dropout

bool all_finite(const Tensor& t);

}  // namespace mp
