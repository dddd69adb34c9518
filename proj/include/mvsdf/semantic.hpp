#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvsdf/camera.hpp"
#include "mvsdf/graph.hpp"
#include "mvsdf/image.hpp"
#include "mvsdf/losses.hpp"
#include "mvsdf/rng.hpp"
#include "mvsdf/tensor.hpp"

namespace mvsdf {

namespace detail {

// Blur-and-halve matrix [floor(n/2), n]: 5-tap binomial kernel centered at
// even source indices, taps clamped at the borders so every row sums to 1.
Tensor<double> pyramid_half_matrix(long n);

// Area-weighted resampling matrix [dst, src]; rows sum to 1.
Tensor<double> area_resize_matrix(long src, long dst);

}  // namespace detail

// Differentiable map from an image to a unit-norm feature row. Images enter
// the graph as [H*W, 3] nodes, pixels row-major. Implementations are pure
// functions of (pixels, seed) so features are reproducible across runs.
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual const std::string& name() const = 0;
  virtual uint64_t seed() const = 0;
  virtual long feature_dim() const = 0;
  // pixels: [H*W, 3] node; returns a [1, feature_dim] node with unit L2 norm.
  virtual int extract(Graph<T>& g, int pixels, long height, long width) = 0;

  // Convenience for evaluation paths that hold a plain image.
  Tensor<T> extract_image(const ImageBuffer& image) {
    Tensor<T> px(static_cast<long>(image.pixel_count()), 3);
    for (long i = 0; i < px.rows; ++i)
      for (int c = 0; c < 3; ++c) {
        int src = image.channels == 1 ? 0 : c;
        px.at(i, c) = static_cast<T>(image.data[i * image.channels + src]);
      }
    Graph<T> g(false);
    int f = extract(g, g.constant(std::move(px)), image.height, image.width);
    return g.value(f);
  }
};

// Fixed random-projection extractor: Gaussian-pyramid downsample to 16x16x3,
// flatten channel-major to 768, multiply by a frozen seeded projection, then
// L2-normalize. Linear up to the final normalization, so pixel gradients are
// exact and cheap.
template <typename T>
class BuiltinExtractor final : public FeatureExtractor<T> {
 public:
  explicit BuiltinExtractor(uint64_t seed = 0, long dim = 128)
      : seed_(seed), dim_(dim), name_("builtin") {
    if (dim < 1) throw std::runtime_error("builtin extractor: dim must be positive");
    Prng rng = rng_stream(seed, "semantic.projection", 0);
    projection_ = Tensor<double>(768, dim);
    const double scale = 1.0 / std::sqrt(768.0);
    for (long i = 0; i < projection_.size(); ++i) projection_.v[i] = scale * rng.normal();
  }

  const std::string& name() const override { return name_; }
  uint64_t seed() const override { return seed_; }
  long feature_dim() const override { return dim_; }

  int extract(Graph<T>& g, int pixels, long height, long width) override {
    if (height < 16 || width < 16)
      throw std::runtime_error("builtin extractor: image must be at least 16x16, got " +
                               std::to_string(width) + "x" + std::to_string(height));
    const Tensor<T>& px = g.value(pixels);
    if (px.rows != height * width || px.cols != 3)
      throw std::runtime_error("builtin extractor: pixels must be HWx3");
    const Plan& plan = plan_for(height, width);
    std::vector<int> flat(3);
    for (int c = 0; c < 3; ++c) {
      int x = g.reshape(g.slice_cols(pixels, c, c + 1), height, width);
      for (const Stage& st : plan.stages)
        x = g.matmul(g.matmul(g.constant(cast(st.rows)), x), g.constant(cast(st.cols)));
      flat[c] = g.reshape(x, 1, 256);
    }
    int proj = g.matmul(g.concat_cols(flat), g.constant(cast(projection_)));
    return g.l2_normalize_rows(proj);
  }

 private:
  struct Stage {
    Tensor<double> rows;  // left factor [h_out, h_in]
    Tensor<double> cols;  // right factor [w_in, w_out]
  };
  struct Plan {
    std::vector<Stage> stages;
  };

  static Tensor<T> cast(const Tensor<double>& m) {
    Tensor<T> out(m.rows, m.cols);
    for (long i = 0; i < m.size(); ++i) out.v[i] = static_cast<T>(m.v[i]);
    return out;
  }

  static Tensor<double> transpose(const Tensor<double>& m) {
    Tensor<double> out(m.cols, m.rows);
    for (long i = 0; i < m.rows; ++i)
      for (long j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    return out;
  }

  const Plan& plan_for(long h, long w) {
    auto key = std::make_pair(h, w);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    Plan plan;
    while (h >= 32 && w >= 32) {
      Stage st;
      st.rows = detail::pyramid_half_matrix(h);
      st.cols = transpose(detail::pyramid_half_matrix(w));
      h = st.rows.rows;
      w = st.cols.cols;
      plan.stages.push_back(std::move(st));
    }
    if (h != 16 || w != 16) {
      Stage st;
      st.rows = detail::area_resize_matrix(h, 16);
      st.cols = transpose(detail::area_resize_matrix(w, 16));
      plan.stages.push_back(std::move(st));
    }
    return plans_.emplace(key, std::move(plan)).first->second;
  }

  uint64_t seed_;
  long dim_;
  std::string name_;
  Tensor<double> projection_;
  std::map<std::pair<long, long>, Plan> plans_;
};

// Unseen-viewpoint sampling for augmentation renders: look-at cameras on the
// training sphere, rejected when closer than min_gap_deg to a training view.
struct AugmentationSampler {
  int views_per_iteration = 4;
  double radius = 2.5;
  double elevation_min_deg = -10.0;
  double elevation_max_deg = 40.0;
  double min_gap_deg = 1.0;
  int resolution = 64;
  std::vector<Eigen::Vector3d> training_positions;

  void validate() const;
};

// Deterministic per (seed, iteration); a candidate violating the angular gap
// is redrawn, with at most 100 redraws across the whole call.
std::vector<Camera> sample_viewpoints(const AugmentationSampler& sampler, uint64_t seed,
                                      uint64_t iteration);

// weights[s][j] = view_weight(key position s, augmented position j).
std::vector<std::vector<double>> semantic_pair_weights(
    const std::vector<Eigen::Vector3d>& key_positions,
    const std::vector<Eigen::Vector3d>& aug_positions);

// Full consistency term: J input pairs plus N*J angular-weighted key pairs.
template <typename T>
int semantic_term_node(Graph<T>& g, int input_feature, const std::vector<int>& key_features,
                       const std::vector<Eigen::Vector3d>& key_positions,
                       const std::vector<int>& aug_features,
                       const std::vector<Eigen::Vector3d>& aug_positions) {
  if (key_features.size() != key_positions.size())
    throw std::runtime_error("semantic term: one position per key feature required");
  if (aug_features.size() != aug_positions.size())
    throw std::runtime_error("semantic term: one position per augmented feature required");
  return semantic_loss_node(g, input_feature, key_features, aug_features,
                            semantic_pair_weights(key_positions, aug_positions));
}

}  // namespace mvsdf
