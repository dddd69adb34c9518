#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "mvsdf/graph.hpp"
#include "mvsdf/params.hpp"

namespace mvsdf::testing {

// Central finite-difference check of reverse-mode gradients for a scalar loss
// built from the store's trainable parameters. The builder must be a pure
// function of the store contents. Returns the worst relative error, where
// rel = |ad - fd| / max(1, |ad|, |fd|).
template <typename T>
double gradcheck_max_rel_err(ParameterStore<T>& store,
                             const std::function<double(ParameterStore<T>&)>& loss_value,
                             const std::function<GradMap<T>(ParameterStore<T>&)>& loss_grads,
                             double h) {
  GradMap<T> grads = loss_grads(store);
  double worst = 0;
  for (auto& [name, entry] : store) {
    if (!entry.trainable) continue;
    const Tensor<T>& g = grads.at(name);
    for (long i = 0; i < entry.value.size(); ++i) {
      T saved = entry.value.v[i];
      entry.value.v[i] = static_cast<T>(saved + h);
      double fplus = loss_value(store);
      entry.value.v[i] = static_cast<T>(saved - h);
      double fminus = loss_value(store);
      entry.value.v[i] = saved;
      double fd = (fplus - fminus) / (2 * h);
      double ad = g.v[i];
      double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Convenience wrapper for builders that construct one graph and return the
// loss node: value path runs grad-free, gradient path runs backward.
template <typename T>
double gradcheck(ParameterStore<T>& store,
                 const std::function<int(Graph<T>&, ParameterStore<T>&)>& build, double h) {
  auto value_fn = [&](ParameterStore<T>& s) {
    Graph<T> g(false);
    return static_cast<double>(g.value(build(g, s)).v[0]);
  };
  auto grad_fn = [&](ParameterStore<T>& s) {
    Graph<T> g(true);
    return g.backward(build(g, s));
  };
  return gradcheck_max_rel_err<T>(store, value_fn, grad_fn, h);
}

}  // namespace mvsdf::testing
