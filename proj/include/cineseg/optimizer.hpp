#pragma once

#include <cmath>

#include "cineseg/tensor.hpp"

namespace cineseg {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  NamedTensors m, v;
  int64_t t = 0;

  static AdamWState init(const NamedTensors& params) {
    AdamWState s;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    return s;
  }
};

/// One AdamW step with decoupled weight decay applied multiplicatively
/// before the moment update. With lr = 0 nothing moves (decay is scaled by
/// lr as well). `trainable` masks whole tensors; frozen tensors stay
/// bit-identical and their moments are not advanced.
inline void adamw_step(NamedTensors& params, const NamedTensors& grads, AdamWState& st,
                       const AdamWConfig& cfg, double lr,
                       const std::vector<uint8_t>& trainable) {
  st.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (size_t ti = 0; ti < params.size(); ++ti) {
    if (!trainable.empty() && !trainable[ti]) continue;
    double* p = params.tensors[ti].ptr();
    const double* g = grads.tensors[ti].ptr();
    double* m = st.m.tensors[ti].ptr();
    double* v = st.v.tensors[ti].ptr();
    int64_t n = params.tensors[ti].numel();
    for (int64_t i = 0; i < n; ++i) {
      p[i] *= 1.0 - lr * cfg.weight_decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

/// Linear warm-up from zero over `warmup_steps`, then cosine decay to zero
/// across the remaining steps. The warm-up endpoint evaluates exactly to
/// base_lr (cos(0) = 1).
inline double lr_at(int64_t step, int64_t warmup_steps, int64_t total_steps, double base_lr) {
  if (step < 0) return 0.0;
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  double progress = static_cast<double>(step - warmup_steps) /
                    static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace cineseg
