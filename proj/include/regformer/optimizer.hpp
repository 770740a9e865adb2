#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "regformer/tensor.hpp"

namespace regformer {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Bias-corrected Adam. Moment buffers are indexed by position in the
// parameter list, which must stay stable across steps.
struct AdamState {
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<NamedTensor>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.size(), 0.0);
      v.emplace_back(p.tensor.size(), 0.0);
    }
  }
};

inline void adam_step(std::vector<NamedTensor>& params, AdamState& state, double lr) {
  if (lr <= 0.0) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (state.m.size() != params.size()) state.init(params);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& t = params[pi].tensor;
    const auto& g = t.grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    auto& w = t.data_mut();
    for (size_t i = 0; i < w.size(); ++i) {
      if (std::isnan(g[i]))
        throw std::runtime_error("adam_step: NaN gradient in parameter '" + params[pi].name + "'");
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// Scales gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      auto* node = p.tensor.node();
      for (auto& g : node->ensure_grad()) g *= s;
    }
  }
  return norm;
}

inline void zero_grads(std::vector<NamedTensor>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace regformer
