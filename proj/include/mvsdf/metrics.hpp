#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mvsdf/image.hpp"
#include "mvsdf/mesh.hpp"

namespace mvsdf {

// Area-weighted uniform surface samples. The same seed yields the same
// points for identical meshes, making self-distance exactly zero.
std::vector<Eigen::Vector3d> sample_mesh_surface(const TriangleMesh& mesh, int samples,
                                                 uint64_t seed);

// Exact nearest-neighbor distances via a uniform grid over the target set.
struct PointGrid {
  explicit PointGrid(const std::vector<Eigen::Vector3d>& points);
  double nearest_distance(const Eigen::Vector3d& q) const;

 private:
  std::vector<Eigen::Vector3d> pts_;
  std::vector<std::vector<int>> cells_;
  Eigen::Vector3d lo_;
  double cell_ = 1.0;
  int nx_ = 1, ny_ = 1, nz_ = 1;
};

// Mean of the two directed mean nearest-neighbor distances, halved.
// Euclidean distances, not squared.
double chamfer_points(const std::vector<Eigen::Vector3d>& a,
                      const std::vector<Eigen::Vector3d>& b);
double chamfer_distance(const TriangleMesh& a, const TriangleMesh& b,
                        int samples = 16384, uint64_t seed = 0);

using OccupancyFn = std::function<bool(const Eigen::Vector3d&)>;

// Intersection over union of the occupancies sampled at grid cell centers
// over [-1,1]^3. Two empty sets count as identical (returns 1, with a note
// on stderr).
double volume_iou(const OccupancyFn& a, const OccupancyFn& b, int resolution = 128);

// 10*log10(1/MSE) over all channels, capped at 99 dB.
double psnr(const ImageBuffer& a, const ImageBuffer& b);

// Mean SSIM over valid 11x11 windows, Gaussian weighted (sigma 1.5),
// stabilizers C1=0.01^2 and C2=0.03^2 for unit dynamic range. Color images
// are reduced to luma as 0.299 R + 0.587 G + 0.114 B.
double ssim(const ImageBuffer& a, const ImageBuffer& b);

struct MetricsReport {
  double cd = 0.0;
  double iou = 0.0;
  double psnr_db = 0.0;
  double ssim_score = 0.0;
};

void save_metrics_json(const std::string& path, const MetricsReport& report);

}  // namespace mvsdf
