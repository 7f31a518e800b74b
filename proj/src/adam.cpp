#include "mp/adam.hpp"

#include <cmath>

namespace mp {

bool weight_decay_applies(const std::string& param_name) {
  const auto dot = param_name.rfind('.');
  const std::string leaf = dot == std::string::npos ? param_name : param_name.substr(dot + 1);
  return !leaf.empty() && (leaf[0] == 'w' || leaf == "tok");
}

void AdamOptimizer::update(Parameters& params, float lr) {
  if (lr < 0.0f) throw TensorError("adam update requires lr >= 0");
  ++step_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));

  for (auto& [name, t] : params.by_name) {
    auto& mom = moments_[name];
    const std::size_t n = t.data().size();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0f);
      mom.v.assign(n, 0.0f);
    }
    auto w = t.mutable_data();
    const auto g_span = t.grad();
    const bool decay = cfg_.weight_decay != 0.0f && weight_decay_applies(name);
    for (std::size_t i = 0; i < n; ++i) {
      float g = g_span.empty() ? 0.0f : g_span[i];
      if (decay) g += cfg_.weight_decay * w[i];
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0f - cfg_.beta1) * g;
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0f - cfg_.beta2) * g * g;
      const float m_hat = static_cast<float>(mom.m[i] / bc1);
      const float v_hat = static_cast<float>(mom.v[i] / bc2);
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

float clip_global_norm(Parameters& params, float max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params.by_name) {
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    const float s = max_norm / norm;
    for (auto& [name, t] : params.by_name) {
      auto g = t.mutable_grad();
      for (float& v : g) v *= s;
    }
  }
  return norm;
}

}  // namespace mp
