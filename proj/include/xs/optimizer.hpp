#ifndef XS_OPTIMIZER_HPP
#define XS_OPTIMIZER_HPP

#include <cmath>
#include <map>
#include <string>

#include "xs/tensor.hpp"

namespace xs {

struct RAdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Rectified Adam: bias-corrected moments with a variance-rectification term;
// while the approximated variance is intractable (rho_t <= 4) the update
// falls back to plain bias-corrected momentum.
struct OptimizerState {
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;
  int64_t step = 0;
};

inline void radam_step(OptimizerState& state, std::map<std::string, Tensor<float>>& params,
                       const std::map<std::string, Tensor<float>>& grads,
                       const RAdamConfig& cfg) {
  state.step += 1;
  const double t = double(state.step);
  const double b1t = std::pow(cfg.beta1, t);
  const double b2t = std::pow(cfg.beta2, t);
  const double rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
  const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
  double rect = 0.0;
  const bool rectified = rho_t > 4.0;
  if (rectified) {
    rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                     ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
  }
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    const Tensor<float>* g = git != grads.end() ? &git->second : nullptr;
    Tensor<float>& m = state.m.try_emplace(name, p.shape()).first->second;
    Tensor<float>& v = state.v.try_emplace(name, p.shape()).first->second;
    if (g && !g->same_shape(p)) throw ShapeError("radam_step: gradient shape mismatch for " + name);
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = g ? double((*g)[i]) : 0.0;
      const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = float(mi);
      v[i] = float(vi);
      const double mhat = mi / (1.0 - b1t);
      if (rectified) {
        const double vhat = std::sqrt(vi / (1.0 - b2t));
        p[i] = float(double(p[i]) - cfg.lr * rect * mhat / (vhat + cfg.eps));
      } else {
        p[i] = float(double(p[i]) - cfg.lr * mhat);
      }
    }
  }
}

}  // namespace xs

#endif  // XS_OPTIMIZER_HPP
