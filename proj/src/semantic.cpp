#include "mvsdf/semantic.hpp"

#include <algorithm>

namespace mvsdf {

namespace detail {

Tensor<double> pyramid_half_matrix(long n) {
  if (n < 2) throw std::runtime_error("pyramid matrix: size must be at least 2");
  static const double kKernel[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  long m = n / 2;
  Tensor<double> out(m, n);
  for (long i = 0; i < m; ++i)
    for (int k = -2; k <= 2; ++k) {
      long j = std::clamp(2 * i + k, 0L, n - 1);
      out.at(i, j) += kKernel[k + 2];
    }
  return out;
}

Tensor<double> area_resize_matrix(long src, long dst) {
  if (src < 1 || dst < 1) throw std::runtime_error("resize matrix: sizes must be positive");
  Tensor<double> out(dst, src);
  const double step = static_cast<double>(src) / static_cast<double>(dst);
  for (long i = 0; i < dst; ++i) {
    double lo = i * step, hi = (i + 1) * step;
    for (long j = static_cast<long>(lo); j < src && j < static_cast<long>(std::ceil(hi)); ++j) {
      double overlap = std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j));
      if (overlap > 0) out.at(i, j) = overlap / step;
    }
  }
  return out;
}

}  // namespace detail

void AugmentationSampler::validate() const {
  if (views_per_iteration < 1)
    throw std::runtime_error("augmentation sampler: need at least 1 view per iteration");
  if (radius <= 0) throw std::runtime_error("augmentation sampler: radius must be positive");
  if (elevation_min_deg > elevation_max_deg)
    throw std::runtime_error("augmentation sampler: elevation range is inverted");
  if (elevation_min_deg < -90 || elevation_max_deg > 90)
    throw std::runtime_error("augmentation sampler: elevation must lie in [-90, 90]");
  if (min_gap_deg < 0) throw std::runtime_error("augmentation sampler: gap must be non-negative");
  if (resolution < 16)
    throw std::runtime_error("augmentation sampler: resolution must be at least 16");
}

std::vector<Camera> sample_viewpoints(const AugmentationSampler& sampler, uint64_t seed,
                                      uint64_t iteration) {
  sampler.validate();
  Prng rng = rng_stream(seed, "aug.viewpoints", iteration);
  const double gap_rad = sampler.min_gap_deg * M_PI / 180.0;
  std::vector<Camera> cams;
  cams.reserve(sampler.views_per_iteration);
  int resamples = 0;
  while (cams.size() < static_cast<size_t>(sampler.views_per_iteration)) {
    double az = rng.uniform(0.0, 2.0 * M_PI);
    double el = rng.uniform(sampler.elevation_min_deg, sampler.elevation_max_deg) * M_PI / 180.0;
    Eigen::Vector3d pos = sampler.radius * Eigen::Vector3d(std::sin(az) * std::cos(el),
                                                           std::sin(el),
                                                           -std::cos(az) * std::cos(el));
    bool clear = true;
    for (const Eigen::Vector3d& tp : sampler.training_positions)
      if (view_weight(pos, tp) * M_PI < gap_rad) {
        clear = false;
        break;
      }
    if (!clear) {
      if (++resamples > 100)
        throw std::runtime_error(
            "augmentation sampler: gap constraint rejected after 100 resamples");
      continue;
    }
    Camera cam;
    cam.width = sampler.resolution;
    cam.height = sampler.resolution;
    cam.fx = cam.fy = 1.2 * sampler.resolution;
    cam.cx = 0.5 * sampler.resolution;
    cam.cy = 0.5 * sampler.resolution;
    cam.c2w = look_at(pos, Eigen::Vector3d::Zero());
    cam.validate();
    cams.push_back(cam);
  }
  return cams;
}

std::vector<std::vector<double>> semantic_pair_weights(
    const std::vector<Eigen::Vector3d>& key_positions,
    const std::vector<Eigen::Vector3d>& aug_positions) {
  std::vector<std::vector<double>> w(key_positions.size());
  for (size_t s = 0; s < key_positions.size(); ++s) {
    w[s].resize(aug_positions.size());
    for (size_t j = 0; j < aug_positions.size(); ++j)
      w[s][j] = view_weight(key_positions[s], aug_positions[j]);
  }
  return w;
}

}  // namespace mvsdf
