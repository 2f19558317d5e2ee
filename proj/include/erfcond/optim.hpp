#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "erfcond/nn.hpp"

namespace erfcond {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// One bias-corrected Adam update over `params`, reading each tensor's
// accumulated gradient (missing gradient = zero).
template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.data().size(), T(0));
      state.v.emplace_back(p.tensor.data().size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: parameter list changed between steps");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> t = params[i].tensor;
    auto data = t.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) throw Error("adam_step: parameter " + params[i].name + " changed size");
    const bool has = t.has_grad();
    const auto grad = t.grad();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const T g = has ? grad[k] : T(0);
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      const double mh = static_cast<double>(m[k]) / c1;
      const double vh = static_cast<double>(v[k]) / c2;
      data[k] -= static_cast<T>(cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

}  // namespace erfcond
