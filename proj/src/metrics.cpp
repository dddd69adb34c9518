#include "mvsdf/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mvsdf/rng.hpp"

namespace mvsdf {

std::vector<Eigen::Vector3d> sample_mesh_surface(const TriangleMesh& mesh, int samples,
                                                 uint64_t seed) {
  if (mesh.empty()) throw std::runtime_error("cannot sample an empty mesh");
  if (samples < 1) throw std::runtime_error("sample count must be positive");

  std::vector<double> cum(mesh.triangles.size());
  double total = 0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    const Eigen::Vector3d& a = mesh.vertices[t[0]];
    total += 0.5 * (mesh.vertices[t[1]] - a).cross(mesh.vertices[t[2]] - a).norm();
    cum[i] = total;
  }
  if (total <= 0) throw std::runtime_error("mesh has zero total area");

  Prng rng = rng_stream(seed, "surface_samples", 0);
  std::vector<Eigen::Vector3d> out;
  out.reserve(samples);
  for (int s = 0; s < samples; ++s) {
    double u = rng.uniform() * total;
    std::size_t i = std::upper_bound(cum.begin(), cum.end(), u) - cum.begin();
    if (i >= mesh.triangles.size()) i = mesh.triangles.size() - 1;
    const auto& t = mesh.triangles[i];
    double r1 = std::sqrt(rng.uniform());
    double r2 = rng.uniform();
    out.push_back((1 - r1) * mesh.vertices[t[0]] + r1 * (1 - r2) * mesh.vertices[t[1]] +
                  r1 * r2 * mesh.vertices[t[2]]);
  }
  return out;
}

PointGrid::PointGrid(const std::vector<Eigen::Vector3d>& points) : pts_(points) {
  if (pts_.empty()) throw std::runtime_error("cannot build a grid over zero points");
  Eigen::Vector3d hi = pts_[0];
  lo_ = pts_[0];
  for (const auto& p : pts_) {
    lo_ = lo_.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  Eigen::Vector3d span = hi - lo_;
  double diag = span.norm();
  double target = diag / std::cbrt(static_cast<double>(pts_.size()));
  cell_ = std::max(target, 1e-9);
  nx_ = std::max(1, static_cast<int>(span.x() / cell_) + 1);
  ny_ = std::max(1, static_cast<int>(span.y() / cell_) + 1);
  nz_ = std::max(1, static_cast<int>(span.z() / cell_) + 1);

  cells_.resize(static_cast<std::size_t>(nx_) * ny_ * nz_);
  for (std::size_t i = 0; i < pts_.size(); ++i) {
    Eigen::Vector3d r = (pts_[i] - lo_) / cell_;
    int ix = std::clamp(static_cast<int>(r.x()), 0, nx_ - 1);
    int iy = std::clamp(static_cast<int>(r.y()), 0, ny_ - 1);
    int iz = std::clamp(static_cast<int>(r.z()), 0, nz_ - 1);
    cells_[(static_cast<std::size_t>(iz) * ny_ + iy) * nx_ + ix].push_back(
        static_cast<int>(i));
  }
}

double PointGrid::nearest_distance(const Eigen::Vector3d& q) const {
  Eigen::Vector3d r = (q - lo_) / cell_;
  int qx = std::clamp(static_cast<int>(std::floor(r.x())), 0, nx_ - 1);
  int qy = std::clamp(static_cast<int>(std::floor(r.y())), 0, ny_ - 1);
  int qz = std::clamp(static_cast<int>(std::floor(r.z())), 0, nz_ - 1);

  double best_sq = std::numeric_limits<double>::infinity();
  int max_ring = std::max({nx_, ny_, nz_});
  for (int ring = 0; ring <= max_ring; ++ring) {
    // every cell at Chebyshev ring distance r >= 1 holds points at least
    // (r-1)*cell away, so once best <= (ring-1)*cell no farther ring helps
    if (ring > 0 && best_sq <= (ring - 1.0) * cell_ * ((ring - 1.0) * cell_)) break;

    for (int dz = -ring; dz <= ring; ++dz) {
      int z = qz + dz;
      if (z < 0 || z >= nz_) continue;
      for (int dy = -ring; dy <= ring; ++dy) {
        int y = qy + dy;
        if (y < 0 || y >= ny_) continue;
        for (int dx = -ring; dx <= ring; ++dx) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          int x = qx + dx;
          if (x < 0 || x >= nx_) continue;
          for (int idx : cells_[(static_cast<std::size_t>(z) * ny_ + y) * nx_ + x]) {
            double d = (pts_[idx] - q).squaredNorm();
            best_sq = std::min(best_sq, d);
          }
        }
      }
    }
  }
  return std::sqrt(best_sq);
}

double chamfer_points(const std::vector<Eigen::Vector3d>& a,
                      const std::vector<Eigen::Vector3d>& b) {
  if (a.empty()) throw std::runtime_error("first point set is empty");
  if (b.empty()) throw std::runtime_error("second point set is empty");

  PointGrid grid_a(a), grid_b(b);
  double sum_ab = 0, sum_ba = 0;
  for (const auto& p : a) sum_ab += grid_b.nearest_distance(p);
  for (const auto& p : b) sum_ba += grid_a.nearest_distance(p);
  return 0.5 * (sum_ab / a.size() + sum_ba / b.size());
}

double chamfer_distance(const TriangleMesh& a, const TriangleMesh& b, int samples,
                        uint64_t seed) {
  if (a.empty()) throw std::runtime_error("first mesh is empty");
  if (b.empty()) throw std::runtime_error("second mesh is empty");
  return chamfer_points(sample_mesh_surface(a, samples, seed),
                        sample_mesh_surface(b, samples, seed));
}

double volume_iou(const OccupancyFn& a, const OccupancyFn& b, int resolution) {
  if (resolution < 2) throw std::runtime_error("iou resolution must be at least 2");
  double h = 2.0 / resolution;
  long long inter = 0, uni = 0;
  for (int k = 0; k < resolution; ++k) {
    for (int j = 0; j < resolution; ++j) {
      for (int i = 0; i < resolution; ++i) {
        Eigen::Vector3d p(-1 + (i + 0.5) * h, -1 + (j + 0.5) * h, -1 + (k + 0.5) * h);
        bool ia = a(p), ib = b(p);
        inter += (ia && ib) ? 1 : 0;
        uni += (ia || ib) ? 1 : 0;
      }
    }
  }
  if (uni == 0) {
    std::fprintf(stderr, "volume_iou: both occupancies empty, reporting 1\n");
    return 1.0;
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  if (!a.same_shape(b)) throw std::runtime_error("psnr: image shapes differ");
  if (a.data.empty()) throw std::runtime_error("psnr: empty images");
  double mse = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = static_cast<double>(a.data[i]) - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse <= 0) return 99.0;
  return std::min(10.0 * std::log10(1.0 / mse), 99.0);
}

namespace {

std::vector<double> to_gray(const ImageBuffer& img) {
  std::vector<double> g(img.pixel_count());
  if (img.channels == 1) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = img.data[i];
  } else {
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = 0.299 * img.data[i * 3] + 0.587 * img.data[i * 3 + 1] +
             0.114 * img.data[i * 3 + 2];
  }
  return g;
}

}  // namespace

double ssim(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::runtime_error("ssim: image dimensions differ");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  if (a.width < kWin || a.height < kWin)
    throw std::runtime_error("ssim: image smaller than the 11x11 window");

  double w[kWin][kWin];
  double wsum = 0;
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) {
      double dx = x - kWin / 2, dy = y - kWin / 2;
      w[y][x] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
      wsum += w[y][x];
    }
  for (auto& row : w)
    for (double& v : row) v /= wsum;

  std::vector<double> ga = to_gray(a), gb = to_gray(b);
  const int width = a.width, height = a.height;
  double total = 0;
  long long windows = 0;
  for (int y = 0; y + kWin <= height; ++y) {
    for (int x = 0; x + kWin <= width; ++x) {
      double mu_a = 0, mu_b = 0;
      for (int wy = 0; wy < kWin; ++wy)
        for (int wx = 0; wx < kWin; ++wx) {
          std::size_t idx = static_cast<std::size_t>(y + wy) * width + (x + wx);
          mu_a += w[wy][wx] * ga[idx];
          mu_b += w[wy][wx] * gb[idx];
        }
      double var_a = 0, var_b = 0, cov = 0;
      for (int wy = 0; wy < kWin; ++wy)
        for (int wx = 0; wx < kWin; ++wx) {
          std::size_t idx = static_cast<std::size_t>(y + wy) * width + (x + wx);
          double da = ga[idx] - mu_a, db = gb[idx] - mu_b;
          var_a += w[wy][wx] * da * da;
          var_b += w[wy][wx] * db * db;
          cov += w[wy][wx] * da * db;
        }
      total += ((2 * mu_a * mu_b + kC1) * (2 * cov + kC2)) /
               ((mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

void save_metrics_json(const std::string& path, const MetricsReport& report) {
  nlohmann::json j;
  j["cd"] = report.cd;
  j["iou"] = report.iou;
  j["psnr"] = report.psnr_db;
  j["ssim"] = report.ssim_score;
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << j.dump(2) << "\n";
}

}  // namespace mvsdf
