#pragma once

#include <map>
#include <string>
#include <vector>

#include "mp/parameters.hpp"

namespace mp {

// True for matrix-valued weights; biases and layer-norm parameters are
// exempt from L2 decay (see README "optimizer" notes).
bool weight_decay_applies(const std::string& param_name);

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-6f;
  float weight_decay = 0.01f;  // classic L2, added to the gradient before the moments
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Bias-corrected Adam update from each parameter's accumulated grad.
  // Missing grads are treated as zero. step() increments by one per call.
  void update(Parameters& params, float lr);

  long step() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  AdamConfig cfg_;
  long step_ = 0;
  std::map<std::string, Moments> moments_;
};

// Scales all grads so the global L2 norm is at most `max_norm`; returns the
// pre-clip norm.
float clip_global_norm(Parameters& params, float max_norm);

}  // namespace mp
