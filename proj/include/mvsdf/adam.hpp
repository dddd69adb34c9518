#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "mvsdf/graph.hpp"
#include "mvsdf/params.hpp"
#include "mvsdf/tensor.hpp"

namespace mvsdf {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  long step = 0;

  void ensure(const ParameterStore<T>& store) {
    for (const auto& [name, e] : store) {
      if (!e.trainable) continue;
      if (!m.count(name)) m.emplace(name, Tensor<T>::zeros(e.value.rows, e.value.cols));
      if (!v.count(name)) v.emplace(name, Tensor<T>::zeros(e.value.rows, e.value.cols));
    }
  }
};

// Bias-corrected Adam over every trainable entry, in lexicographic order.
template <typename T>
void adam_step(ParameterStore<T>& store, const GradMap<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
  state.ensure(store);
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, e] : store) {
    if (!e.trainable) continue;
    auto git = grads.find(name);
    if (git == grads.end())
      throw std::runtime_error("adam_step: missing gradient for trainable parameter '" +
                               name + "'");
    const Tensor<T>& g = git->second;
    if (!g.same_shape(e.value))
      throw std::runtime_error("adam_step: gradient shape " + g.shape_str() +
                               " != parameter shape " + e.value.shape_str() + " for '" +
                               name + "'");
    Tensor<T>& m = state.m.at(name);
    Tensor<T>& v = state.v.at(name);
    for (long i = 0; i < g.size(); ++i) {
      double gi = g.v[i];
      double mi = cfg.beta1 * m.v[i] + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * v.v[i] + (1.0 - cfg.beta2) * gi * gi;
      m.v[i] = static_cast<T>(mi);
      v.v[i] = static_cast<T>(vi);
      double update = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      e.value.v[i] = static_cast<T>(e.value.v[i] - update);
    }
  }
}

}  // namespace mvsdf
