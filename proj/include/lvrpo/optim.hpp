#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "lvrpo/tensor.hpp"

namespace lvrpo {

struct OptimizerState {
  long step_count = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps_opt = 1e-8f;
  float weight_decay = 0.05f;

  static OptimizerState make(const std::vector<Tensor<float>*>& params, float lr, float weight_decay) {
    OptimizerState s;
    s.lr = lr;
    s.weight_decay = weight_decay;
    s.first_moment.reserve(params.size());
    s.second_moment.reserve(params.size());
    for (const Tensor<float>* p : params) {
      s.first_moment.emplace_back(p->numel(), 0.0f);
      s.second_moment.emplace_back(p->numel(), 0.0f);
    }
    return s;
  }
};

// Decoupled weight decay AdamW with bias correction; zeroes grads afterwards.
inline void adamw_step(const std::vector<Tensor<float>*>& params, OptimizerState& state) {
  if (params.size() != state.first_moment.size()) fail("adamw_step parameter count mismatch");
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const float bc1 = 1.0f - static_cast<float>(std::pow(state.beta1, t));
  const float bc2 = 1.0f - static_cast<float>(std::pow(state.beta2, t));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<float>& p = *params[pi];
    if (!p.grad) fail("adamw_step: parameter " + std::to_string(pi) + " has no gradient");
    std::vector<float>& m = state.first_moment[pi];
    std::vector<float>& v = state.second_moment[pi];
    if (m.size() != p.numel()) fail("adamw_step moment shape mismatch");
    float* w = p.ptr();
    float* g = p.grad->data();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0f - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0f - state.beta2) * g[i] * g[i];
      const float mhat = m[i] / bc1;
      const float vhat = v[i] / bc2;
      w[i] -= state.lr * state.weight_decay * w[i];
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps_opt);
      g[i] = 0.0f;
    }
  }
}

inline void zero_grads(const std::vector<Tensor<float>*>& params) {
  for (Tensor<float>* p : params) p->zero_grad();
}

inline double global_grad_norm(const std::vector<Tensor<float>*>& params) {
  double ss = 0.0;
  for (const Tensor<float>* p : params) {
    if (!p->grad) continue;
    for (const float g : *p->grad) ss += static_cast<double>(g) * g;
  }
  return std::sqrt(ss);
}

// Scales all gradients so the global L2 norm does not exceed max_norm.
// Returns the applied scale (1.0 when already within the bound).
inline double clip_global_grad_norm(const std::vector<Tensor<float>*>& params, double max_norm) {
  if (max_norm <= 0.0) fail("clip_global_grad_norm requires max_norm > 0");
  const double norm = global_grad_norm(params);
  if (norm <= max_norm * (1.0 + 1e-7)) return 1.0;
  const double s = max_norm / norm;
  const float sf = static_cast<float>(s);
  for (Tensor<float>* p : params) {
    if (!p->grad) continue;
    for (float& g : *p->grad) g *= sf;
  }
  return s;
}

// Central-difference gradient check in 64-bit. `f` must deterministically
// rebuild the loss from `params` on the supplied tape (or without one).
inline double check_gradients_fd(const std::function<Tensor<double>(Tape<double>*)>& f,
                                 const std::vector<Tensor<double>*>& params, double h = 1e-4) {
  for (Tensor<double>* p : params) {
    p->set_requires_grad();
    p->zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = f(&tape);
    tape.backward(loss);
    for (Tensor<double>* p : params) analytic.push_back(*p->grad);
  }
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = *params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = (*p.data)[i];
      (*p.data)[i] = orig + h;
      const double fp = f(nullptr).item();
      (*p.data)[i] = orig - h;
      const double fm = f(nullptr).item();
      (*p.data)[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[pi][i];
      const double rel = std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  for (Tensor<double>* p : params) p->zero_grad();
  return max_rel;
}

}  // namespace lvrpo
