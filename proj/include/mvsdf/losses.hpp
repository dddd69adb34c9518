#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvsdf/fields.hpp"
#include "mvsdf/graph.hpp"
#include "mvsdf/rng.hpp"
#include "mvsdf/tensor.hpp"

namespace mvsdf {

// Multipliers for the training objective:
//   total = rgb + semantic*sem + eikonal*eik + normal*norm + mask*mask + trans*trans
// The rgb term carries its per-view weight internally, so it has no multiplier here.
struct LossWeights {
  double eikonal = 0.7;
  double normal = 0.1;
  double mask = 0.1;
  double trans = 0.01;
  double semantic = 1.0;

  void validate() const {
    if (eikonal < 0 || normal < 0 || mask < 0 || trans < 0 || semantic < 0)
      throw std::runtime_error("loss weights must be non-negative");
  }
};

// How the color term weights the designated input view: kLiteral keeps the
// angular weight (zero against itself), kInputOverride pins it to 1.
enum class RgbWeightMode { kLiteral, kInputOverride };

inline RgbWeightMode rgb_weight_mode_from_string(const std::string& s) {
  if (s == "literal") return RgbWeightMode::kLiteral;
  if (s == "input_override") return RgbWeightMode::kInputOverride;
  throw std::runtime_error("unknown rgb_weight_mode: " + s);
}

inline const char* to_string(RgbWeightMode m) {
  return m == RgbWeightMode::kLiteral ? "literal" : "input_override";
}

// Angular distance between the camera-to-origin directions of two views,
// normalized so identical views give 0 and opposing views give 1.
inline double view_weight(const Eigen::Vector3d& cam_pos, const Eigen::Vector3d& ref_pos) {
  double na = cam_pos.norm(), nb = ref_pos.norm();
  if (na < 1e-12 || nb < 1e-12)
    throw std::runtime_error("view_weight: camera position at the origin");
  double c = (-cam_pos / na).dot(-ref_pos / nb);
  return std::acos(std::clamp(c, -1.0, 1.0)) / M_PI;
}

inline double rgb_view_weight(const Eigen::Vector3d& cam_pos, const Eigen::Vector3d& ref_pos,
                              bool is_input, RgbWeightMode mode) {
  if (is_input && mode == RgbWeightMode::kInputOverride) return 1.0;
  return view_weight(cam_pos, ref_pos);
}

namespace detail {

template <typename T>
void check_same_shape(const Graph<T>& g, int node, const Tensor<T>& ref, const char* what) {
  const Tensor<T>& v = g.value(node);
  if (v.rows != ref.rows || v.cols != ref.cols)
    throw std::runtime_error(std::string(what) + ": shape mismatch, node is " +
                             std::to_string(v.rows) + "x" + std::to_string(v.cols) +
                             ", reference is " + std::to_string(ref.rows) + "x" +
                             std::to_string(ref.cols));
}

}  // namespace detail

// Weighted mean over rays of the squared L2 color error: w * mean_r ||C_hat - C||^2.
template <typename T>
int rgb_loss_node(Graph<T>& g, int rendered, const Tensor<T>& reference, double weight) {
  detail::check_same_shape(g, rendered, reference, "rgb_loss");
  if (reference.rows < 1) throw std::runtime_error("rgb_loss: empty ray batch");
  int diff = g.sub(rendered, g.constant(reference));
  int sq = g.sum_all(g.square(diff));
  return g.affine(sq, static_cast<T>(weight / static_cast<double>(reference.rows)), T(0));
}

// Mean over rays of L1 difference plus angular deviation |1 - n_hat . n_ref|.
// References are expected unit-length; predictions are used as-is.
template <typename T>
int normal_loss_node(Graph<T>& g, int predicted, const Tensor<T>& reference) {
  detail::check_same_shape(g, predicted, reference, "normal_loss");
  if (reference.cols != 3) throw std::runtime_error("normal_loss: normals must be Nx3");
  int ref = g.constant(reference);
  int l1 = g.row_sum(g.abs(g.sub(predicted, ref)));
  int dot = g.row_sum(g.mul(predicted, ref));
  int ang = g.abs(g.affine(dot, T(-1), T(1)));
  return g.mean_all(g.add(l1, ang));
}

// Masked variant: rows with valid == 0 are excluded from the mean. Returns -1
// when no row is valid so callers can drop the term.
template <typename T>
int normal_loss_node(Graph<T>& g, int predicted, const Tensor<T>& reference,
                     const Tensor<T>& valid) {
  detail::check_same_shape(g, predicted, reference, "normal_loss");
  if (reference.cols != 3) throw std::runtime_error("normal_loss: normals must be Nx3");
  if (valid.rows != reference.rows || valid.cols != 1)
    throw std::runtime_error("normal_loss: validity column must be Nx1");
  double count = 0;
  for (long i = 0; i < valid.rows; ++i) {
    if (valid.v[i] != T(0) && valid.v[i] != T(1))
      throw std::runtime_error("normal_loss: validity entries must be 0 or 1");
    count += static_cast<double>(valid.v[i]);
  }
  if (count == 0) return -1;
  int ref = g.constant(reference);
  int l1 = g.row_sum(g.abs(g.sub(predicted, ref)));
  int dot = g.row_sum(g.mul(predicted, ref));
  int ang = g.abs(g.affine(dot, T(-1), T(1)));
  int masked = g.mul(g.add(l1, ang), g.constant(valid));
  return g.affine(g.sum_all(masked), static_cast<T>(1.0 / count), T(0));
}

// Mean squared deviation of the canonical gradient norm from 1 at the given points.
template <typename T>
int eikonal_loss_node(Graph<T>& g, ParameterStore<T>& store, FieldInterface<T>& field,
                      const Tensor<T>& points) {
  if (points.cols != 3 || points.rows < 1)
    throw std::runtime_error("eikonal_loss: points must be Nx3 and non-empty");
  int p = g.constant(points);
  int grad = field.sdf_gradient(g, store, p, FieldInterface<T>::kNoView);
  int norm = g.sqrt(g.row_sum(g.square(grad)));
  return g.mean_all(g.square(g.affine(norm, T(1), T(-1))));
}

// Regularization sample set: half uniform in [-1,1]^3, half Gaussian-perturbed
// copies of ray surface points (sigma 0.02, clamped back into the cube).
// Falls back to all-uniform when no surface points are available.
template <typename T>
Tensor<T> eikonal_batch(long count, const std::vector<std::array<double, 3>>& surface_points,
                        uint64_t seed, uint64_t iteration) {
  if (count < 1) throw std::runtime_error("eikonal_batch: count must be positive");
  Prng rng = rng_stream(seed, "eikonal", iteration);
  Tensor<T> out(count, 3);
  long n_surface = surface_points.empty() ? 0 : count / 2;
  long n_uniform = count - n_surface;
  for (long i = 0; i < n_uniform; ++i)
    for (int c = 0; c < 3; ++c) out.at(i, c) = static_cast<T>(rng.uniform(-1.0, 1.0));
  for (long i = 0; i < n_surface; ++i) {
    const auto& sp = surface_points[rng.uniform_int(surface_points.size())];
    for (int c = 0; c < 3; ++c) {
      double v = sp[c] + 0.02 * rng.normal();
      out.at(n_uniform + i, c) = static_cast<T>(std::clamp(v, -1.0, 1.0));
    }
  }
  return out;
}

// Feature consistency across the view set: squared distance from the input
// view's feature to every augmented feature, plus angular-weighted squared
// distances from each key view's feature to every augmented feature.
template <typename T>
int semantic_loss_node(Graph<T>& g, int input_feature, const std::vector<int>& key_features,
                       const std::vector<int>& augmented_features,
                       const std::vector<std::vector<double>>& key_weights) {
  if (key_weights.size() != key_features.size())
    throw std::runtime_error("semantic_loss: one weight row per key view required");
  const Tensor<T>& f0 = g.value(input_feature);
  auto check_dim = [&](int node) {
    const Tensor<T>& v = g.value(node);
    if (v.rows != f0.rows || v.cols != f0.cols)
      throw std::runtime_error("semantic_loss: feature dimension mismatch, got " +
                               std::to_string(v.rows) + "x" + std::to_string(v.cols) +
                               ", expected " + std::to_string(f0.rows) + "x" +
                               std::to_string(f0.cols));
  };
  for (int n : key_features) check_dim(n);
  for (int n : augmented_features) check_dim(n);
  for (const auto& row : key_weights)
    if (row.size() != augmented_features.size())
      throw std::runtime_error("semantic_loss: weight row length must match augmented count");

  auto sq_dist = [&](int a, int b) { return g.sum_all(g.square(g.sub(a, b))); };
  int acc = -1;
  auto accumulate = [&](int term) { acc = acc < 0 ? term : g.add(acc, term); };
  for (int aug : augmented_features) accumulate(sq_dist(input_feature, aug));
  for (size_t s = 0; s < key_features.size(); ++s)
    for (size_t j = 0; j < augmented_features.size(); ++j)
      accumulate(g.affine(sq_dist(key_features[s], augmented_features[j]),
                          static_cast<T>(key_weights[s][j]), T(0)));
  if (acc < 0) acc = g.constant(Tensor<T>::zeros(1, 1));
  return acc;
}

// Binary cross-entropy between accumulated opacity and the reference mask,
// with opacity clamped away from {0,1} so the logs stay finite.
template <typename T>
int mask_loss_node(Graph<T>& g, int opacity, const Tensor<T>& mask) {
  detail::check_same_shape(g, opacity, mask, "mask_loss");
  if (mask.cols != 1) throw std::runtime_error("mask_loss: mask must be Nx1");
  for (long i = 0; i < mask.size(); ++i)
    if (!(mask.v[i] >= T(0) && mask.v[i] <= T(1)))
      throw std::runtime_error("mask_loss: mask values must lie in [0,1]");
  int oc = g.clamp(opacity, T(1e-4), T(1.0 - 1e-4));
  int m = g.constant(mask);
  int pos = g.mul(m, g.log(oc));
  int neg = g.mul(g.affine(m, T(-1), T(1)), g.log(g.affine(oc, T(-1), T(1))));
  return g.affine(g.mean_all(g.add(pos, neg)), T(-1), T(0));
}

// Transient regularizer: mean |delta_s| / eps_s over sample points plus mean
// per-ray L1 of the transient color. Pass -1 for a branch that is not in the
// graph this stage; with both absent the node is a constant zero.
template <typename T>
int transient_loss_node(Graph<T>& g, int sdf_residual, double eps_s, int transient_color) {
  int acc = -1;
  if (sdf_residual >= 0) {
    if (eps_s <= 0) throw std::runtime_error("transient_loss: eps_s must be positive");
    acc = g.affine(g.mean_all(g.abs(sdf_residual)), static_cast<T>(1.0 / eps_s), T(0));
  }
  if (transient_color >= 0) {
    int color = g.mean_all(g.row_sum(g.abs(transient_color)));
    acc = acc < 0 ? color : g.add(acc, color);
  }
  if (acc < 0) acc = g.constant(Tensor<T>::zeros(1, 1));
  return acc;
}

// Unweighted component values plus the weighted total actually optimized.
struct LossReport {
  double rgb = 0, norm = 0, eik = 0, sem = 0, mask = 0, trans = 0, total = 0;
};

// Graph node ids of the component losses; -1 means the component is absent.
struct LossNodes {
  int rgb = -1;
  int norm = -1;
  int eik = -1;
  int sem = -1;
  int mask = -1;
  int trans = -1;
};

// Assembles the weighted objective and reports every component. A component
// that evaluates to a non-finite value aborts with the component's name.
template <typename T>
std::pair<int, LossReport> total_loss(Graph<T>& g, const LossNodes& nodes,
                                      const LossWeights& weights) {
  weights.validate();
  LossReport report;
  auto component = [&](int id, const char* name) -> double {
    if (id < 0) return 0;
    const Tensor<T>& v = g.value(id);
    if (v.rows != 1 || v.cols != 1)
      throw std::runtime_error(std::string("loss component ") + name + " is not scalar");
    double x = static_cast<double>(v.v[0]);
    if (!std::isfinite(x))
      throw std::runtime_error(std::string("loss component ") + name + " is not finite");
    return x;
  };
  report.rgb = component(nodes.rgb, "rgb");
  report.sem = component(nodes.sem, "sem");
  report.eik = component(nodes.eik, "eik");
  report.norm = component(nodes.norm, "norm");
  report.mask = component(nodes.mask, "mask");
  report.trans = component(nodes.trans, "trans");

  int acc = -1;
  auto accumulate = [&](int id, double w) {
    if (id < 0 || w == 0) return;
    int term = w == 1.0 ? id : g.affine(id, static_cast<T>(w), T(0));
    acc = acc < 0 ? term : g.add(acc, term);
  };
  accumulate(nodes.rgb, 1.0);
  accumulate(nodes.sem, weights.semantic);
  accumulate(nodes.eik, weights.eikonal);
  accumulate(nodes.norm, weights.normal);
  accumulate(nodes.mask, weights.mask);
  accumulate(nodes.trans, weights.trans);
  if (acc < 0) acc = g.constant(Tensor<T>::zeros(1, 1));
  report.total = static_cast<double>(g.value(acc).v[0]);
  if (!std::isfinite(report.total))
    throw std::runtime_error("loss component total is not finite");
  return {acc, report};
}

}  // namespace mvsdf
