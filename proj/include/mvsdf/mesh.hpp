#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <string>
#include <vector>

namespace mvsdf {

struct TriangleMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Eigen::Vector3d> colors;  // empty, or one rgb per vertex

  bool empty() const { return triangles.empty(); }
  double surface_area() const;
  // Throws on out-of-range indices, color count mismatch, or a triangle
  // whose area is zero within 1e-12.
  void validate() const;
};

// True when every undirected edge is shared by exactly two triangles.
bool is_watertight(const TriangleMesh& mesh);

using SdfFn = std::function<double(const Eigen::Vector3d&)>;

// Signed distance samples on an axis-aligned lattice of cell centers:
// coordinate i maps to lo + (i + 0.5) * (hi - lo) / res, x varying fastest.
struct GridSamples {
  int res = 0;
  Eigen::Vector3d lo = Eigen::Vector3d(-1, -1, -1);
  Eigen::Vector3d hi = Eigen::Vector3d(1, 1, 1);
  std::vector<double> values;

  double step(int axis) const { return (hi[axis] - lo[axis]) / res; }
  Eigen::Vector3d point(int i, int j, int k) const;
};

GridSamples sample_sdf_grid(const SdfFn& sdf, int res,
                            const Eigen::Vector3d& lo = Eigen::Vector3d(-1, -1, -1),
                            const Eigen::Vector3d& hi = Eigen::Vector3d(1, 1, 1));

// 256-case marching cubes with linear edge interpolation on the zero level
// set. Vertices are welded along lattice edges and emitted in deterministic
// first-use order; an empty level set produces an empty mesh.
TriangleMesh marching_cubes(const GridSamples& grid);
TriangleMesh marching_cubes(const SdfFn& sdf, int res,
                            const Eigen::Vector3d& lo = Eigen::Vector3d(-1, -1, -1),
                            const Eigen::Vector3d& hi = Eigen::Vector3d(1, 1, 1));

// ASCII OBJ. Vertices may carry colors as extended 6-number v lines.
void save_obj(const std::string& path, const TriangleMesh& mesh);
TriangleMesh load_obj(const std::string& path);

}  // namespace mvsdf
