#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mvsdf/graph.hpp"
#include "mvsdf/params.hpp"
#include "mvsdf/rng.hpp"

namespace mvsdf {

enum class Activation { kSoftplus, kRelu };
enum class OutputActivation { kNone, kSigmoid, kTanh };

// kGeometric biases the net toward f(p) ~ ||p|| - sphere_radius at init
// (SAL-style): encoding columns start dead, the raw-coordinate columns carry
// the signal, and the first output column gets the positive-mean final layer.
// kHeZeroLast zeroes the final layer so residual branches start inert.
enum class InitScheme { kHe, kHeZeroLast, kGeometric };

struct MlpConfig {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 0;
  Activation act = Activation::kRelu;
  double softplus_beta = 100.0;
  OutputActivation out_act = OutputActivation::kNone;
  std::vector<int> skips;  // hidden layer indices whose input re-concats the raw input
  InitScheme init = InitScheme::kHe;
  double sphere_radius = 0.5;  // kGeometric only
  int raw_offset = 0;          // column of the raw xyz triple inside the input (kGeometric)

  void validate() const {
    if (input_dim <= 0 || output_dim <= 0) throw std::runtime_error("mlp: bad in/out dims");
    if (hidden.empty()) throw std::runtime_error("mlp: needs at least one hidden layer");
    for (int w : hidden)
      if (w <= 0) throw std::runtime_error("mlp: nonpositive hidden width");
    for (int s : skips)
      if (s <= 0 || s >= static_cast<int>(hidden.size()))
        throw std::runtime_error("mlp: skip index out of range");
  }
};

template <typename T>
class Mlp {
 public:
  Mlp(MlpConfig cfg, std::string prefix) : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
    cfg_.validate();
  }

  const MlpConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  void create_params(ParameterStore<T>& store, Prng& rng) const {
    const int layers = num_layers();
    for (int i = 0; i < layers; ++i) {
      const int fan_in = layer_in(i);
      const int fan_out = layer_out(i);
      Tensor<T>& w = store.create(wname(i), fan_in, fan_out);
      store.create(bname(i), 1, fan_out);
      const bool last = i == layers - 1;
      switch (cfg_.init) {
        case InitScheme::kHe:
          fill_normal(w, rng, 0.0, std::sqrt(2.0 / fan_in));
          break;
        case InitScheme::kHeZeroLast:
          if (!last) fill_normal(w, rng, 0.0, std::sqrt(2.0 / fan_in));
          break;
        case InitScheme::kGeometric:
          init_geometric_layer(store, w, i, rng);
          break;
      }
    }
  }

  int forward(Graph<T>& g, ParameterStore<T>& store, int x) const {
    int h = x;
    const int layers = num_layers();
    for (int i = 0; i < layers; ++i) {
      if (is_skip(i)) h = g.concat_cols(h, x);
      h = g.add(g.matmul(h, g.param(store, wname(i))), g.param(store, bname(i)));
      if (i < layers - 1)
        h = cfg_.act == Activation::kSoftplus
                ? g.softplus(h, static_cast<T>(cfg_.softplus_beta))
                : g.relu(h);
    }
    switch (cfg_.out_act) {
      case OutputActivation::kSigmoid: return g.sigmoid(h);
      case OutputActivation::kTanh: return g.tanh(h);
      default: return h;
    }
  }

  // Forward that materializes only output columns [c0,c1): the final matmul
  // runs against a slice of the last weight, skipping the other heads' math.
  int forward_sliced(Graph<T>& g, ParameterStore<T>& store, int x, int c0, int c1) const {
    int h = x;
    const int layers = num_layers();
    for (int i = 0; i < layers - 1; ++i) {
      if (is_skip(i)) h = g.concat_cols(h, x);
      h = g.add(g.matmul(h, g.param(store, wname(i))), g.param(store, bname(i)));
      h = cfg_.act == Activation::kSoftplus ? g.softplus(h, static_cast<T>(cfg_.softplus_beta))
                                            : g.relu(h);
    }
    if (is_skip(layers - 1)) h = g.concat_cols(h, x);
    int w = g.slice_cols(g.param(store, wname(layers - 1)), c0, c1);
    int b = g.slice_cols(g.param(store, bname(layers - 1)), c0, c1);
    h = g.add(g.matmul(h, w), b);
    switch (cfg_.out_act) {
      case OutputActivation::kSigmoid: return g.sigmoid(h);
      case OutputActivation::kTanh: return g.tanh(h);
      default: return h;
    }
  }

  std::string wname(int i) const { return prefix_ + ".w" + std::to_string(i); }
  std::string bname(int i) const { return prefix_ + ".b" + std::to_string(i); }
  int num_layers() const { return static_cast<int>(cfg_.hidden.size()) + 1; }

 private:
  MlpConfig cfg_;
  std::string prefix_;

  bool is_skip(int layer) const {
    for (int s : cfg_.skips)
      if (s == layer) return true;
    return false;
  }

  int layer_in(int i) const {
    int base = i == 0 ? cfg_.input_dim : cfg_.hidden[i - 1];
    return is_skip(i) ? base + cfg_.input_dim : base;
  }

  int layer_out(int i) const {
    return i == num_layers() - 1 ? cfg_.output_dim : cfg_.hidden[i];
  }

  static void fill_normal(Tensor<T>& t, Prng& rng, double mean, double stddev) {
    for (auto& x : t.v) x = static_cast<T>(rng.normal(mean, stddev));
  }

  void init_geometric_layer(ParameterStore<T>& store, Tensor<T>& w, int i, Prng& rng) const {
    const int layers = num_layers();
    const int fan_in = layer_in(i);
    const int fan_out = layer_out(i);
    if (i == layers - 1) {
      // Output column 0 is the signed distance; remaining columns (feature
      // vector) get a standard init.
      const double std_rest = std::sqrt(2.0 / fan_in);
      const double mean_sdf = std::sqrt(3.14159265358979323846 / fan_in);
      for (long r = 0; r < w.rows; ++r)
        for (long c = 0; c < w.cols; ++c)
          w.at(r, c) = static_cast<T>(c == 0 ? rng.normal(mean_sdf, 1e-4)
                                             : rng.normal(0.0, std_rest));
      store.at(bname(i)).at(0, 0) = static_cast<T>(-cfg_.sphere_radius);
      return;
    }
    // Skip layers see roughly double the input energy (hidden state plus the
    // re-concatenated live coordinates), so their std drops by sqrt(2) to keep
    // activations norm-preserving and the initial slope near 1.
    double stddev = std::sqrt(2.0) / std::sqrt(static_cast<double>(fan_out));
    if (is_skip(i)) stddev /= std::sqrt(2.0);
    if (i == 0) {
      // Only the raw coordinate rows start live; encoding rows start at zero.
      for (long r = 0; r < w.rows; ++r)
        for (long c = 0; c < w.cols; ++c)
          w.at(r, c) = (r >= cfg_.raw_offset && r < cfg_.raw_offset + 3)
                           ? static_cast<T>(rng.normal(0.0, stddev))
                           : T(0);
      return;
    }
    fill_normal(w, rng, 0.0, stddev);
    if (is_skip(i)) {
      // Rows of the re-concatenated input: zero except the raw triple.
      const int base = fan_in - cfg_.input_dim;
      for (long r = base; r < fan_in; ++r)
        for (long c = 0; c < w.cols; ++c)
          w.at(r, c) = (r - base >= cfg_.raw_offset && r - base < cfg_.raw_offset + 3)
                           ? static_cast<T>(rng.normal(0.0, stddev))
                           : T(0);
    }
  }
};

}  // namespace mvsdf
