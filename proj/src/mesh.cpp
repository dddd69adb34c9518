#include "mvsdf/mesh.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "mvsdf/mc_tables.hpp"

namespace mvsdf {
namespace {

constexpr double kAreaTol = 1e-12;

double triangle_area(const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                     const Eigen::Vector3d& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

// corner layout of the classic tables
constexpr int kCornerOffset[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                     {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeCorners[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                     {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

double TriangleMesh::surface_area() const {
  double area = 0;
  for (const auto& t : triangles)
    area += triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
  return area;
}

void TriangleMesh::validate() const {
  if (!colors.empty() && colors.size() != vertices.size())
    throw std::runtime_error("mesh has " + std::to_string(colors.size()) + " colors for " +
                             std::to_string(vertices.size()) + " vertices");
  int n = static_cast<int>(vertices.size());
  for (std::size_t i = 0; i < triangles.size(); ++i) {
    const auto& t = triangles[i];
    for (int c : t)
      if (c < 0 || c >= n)
        throw std::runtime_error("triangle " + std::to_string(i) +
                                 " references vertex " + std::to_string(c) +
                                 " outside [0, " + std::to_string(n) + ")");
    if (triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]) <= kAreaTol)
      throw std::runtime_error("triangle " + std::to_string(i) + " is degenerate");
  }
}

bool is_watertight(const TriangleMesh& mesh) {
  if (mesh.empty()) return false;
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& t : mesh.triangles) {
    for (int e = 0; e < 3; ++e) {
      int a = t[e], b = t[(e + 1) % 3];
      edge_count[{std::min(a, b), std::max(a, b)}] += 1;
    }
  }
  for (const auto& [edge, count] : edge_count)
    if (count != 2) return false;
  return true;
}

Eigen::Vector3d GridSamples::point(int i, int j, int k) const {
  return {lo.x() + (i + 0.5) * step(0), lo.y() + (j + 0.5) * step(1),
          lo.z() + (k + 0.5) * step(2)};
}

GridSamples sample_sdf_grid(const SdfFn& sdf, int res, const Eigen::Vector3d& lo,
                            const Eigen::Vector3d& hi) {
  if (res < 8) throw std::runtime_error("grid resolution must be at least 8");
  GridSamples g;
  g.res = res;
  g.lo = lo;
  g.hi = hi;
  g.values.resize(static_cast<std::size_t>(res) * res * res);
  std::size_t idx = 0;
  for (int k = 0; k < res; ++k)
    for (int j = 0; j < res; ++j)
      for (int i = 0; i < res; ++i) g.values[idx++] = sdf(g.point(i, j, k));
  return g;
}

TriangleMesh marching_cubes(const GridSamples& grid) {
  const int n = grid.res;
  if (n < 8) throw std::runtime_error("grid resolution must be at least 8");
  if (grid.values.size() != static_cast<std::size_t>(n) * n * n)
    throw std::runtime_error("grid sample count does not match resolution");

  auto node = [&](int i, int j, int k) -> std::size_t {
    return (static_cast<std::size_t>(k) * n + j) * n + i;
  };
  // values exactly at the level set are nudged outside so that neighboring
  // cubes agree on the corner's side and no interpolation degenerates
  auto value = [&](std::size_t id) {
    double v = grid.values[id];
    return std::abs(v) < 1e-12 ? 1e-12 : v;
  };

  TriangleMesh mesh;
  std::unordered_map<std::uint64_t, int> edge_vertex;
  edge_vertex.reserve(1024);

  // a cut vertex lives on a unique lattice edge: lower node id and axis
  auto vertex_on_edge = [&](int ci[2][3]) -> int {
    int axis = 0;
    for (int a = 0; a < 3; ++a)
      if (ci[0][a] != ci[1][a]) axis = a;
    const int* lo_c = ci[0][axis] < ci[1][axis] ? ci[0] : ci[1];
    const int* hi_c = ci[0][axis] < ci[1][axis] ? ci[1] : ci[0];
    std::size_t lo_id = node(lo_c[0], lo_c[1], lo_c[2]);
    std::uint64_t key = static_cast<std::uint64_t>(lo_id) * 3 + axis;

    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;

    double va = value(lo_id);
    double vb = value(node(hi_c[0], hi_c[1], hi_c[2]));
    double t = va / (va - vb);  // zero crossing of the linear interpolant
    Eigen::Vector3d pa = grid.point(lo_c[0], lo_c[1], lo_c[2]);
    Eigen::Vector3d pb = grid.point(hi_c[0], hi_c[1], hi_c[2]);
    int idx = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pa + t * (pb - pa));
    edge_vertex.emplace(key, idx);
    return idx;
  };

  for (int k = 0; k + 1 < n; ++k) {
    for (int j = 0; j + 1 < n; ++j) {
      for (int i = 0; i + 1 < n; ++i) {
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          std::size_t id = node(i + kCornerOffset[c][0], j + kCornerOffset[c][1],
                                k + kCornerOffset[c][2]);
          if (value(id) < 0.0) cube |= 1 << c;
        }
        if (mc::kEdgeTable[cube] == 0) continue;

        int edge_verts[12];
        for (int e = 0; e < 12; ++e) {
          if (!(mc::kEdgeTable[cube] & (1 << e))) continue;
          int ci[2][3];
          for (int s = 0; s < 2; ++s) {
            int corner = kEdgeCorners[e][s];
            ci[s][0] = i + kCornerOffset[corner][0];
            ci[s][1] = j + kCornerOffset[corner][1];
            ci[s][2] = k + kCornerOffset[corner][2];
          }
          edge_verts[e] = vertex_on_edge(ci);
        }

        const int* tri = mc::kTriTable[cube];
        for (int e = 0; tri[e] != -1; e += 3) {
          std::array<int, 3> t = {edge_verts[tri[e]], edge_verts[tri[e + 1]],
                                  edge_verts[tri[e + 2]]};
          if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) continue;
          if (triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]],
                            mesh.vertices[t[2]]) <= kAreaTol)
            continue;
          mesh.triangles.push_back(t);
        }
      }
    }
  }
  return mesh;
}

TriangleMesh marching_cubes(const SdfFn& sdf, int res, const Eigen::Vector3d& lo,
                            const Eigen::Vector3d& hi) {
  return marching_cubes(sample_sdf_grid(sdf, res, lo, hi));
}

void save_obj(const std::string& path, const TriangleMesh& mesh) {
  mesh.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.precision(9);
  bool colored = !mesh.colors.empty();
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Eigen::Vector3d& v = mesh.vertices[i];
    out << "v " << v.x() << " " << v.y() << " " << v.z();
    if (colored) {
      const Eigen::Vector3d& c = mesh.colors[i];
      out << " " << c.x() << " " << c.y() << " " << c.z();
    }
    out << "\n";
  }
  for (const auto& t : mesh.triangles)
    out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  if (!out) throw std::runtime_error(path + ": write failed");
}

TriangleMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open for reading");

  TriangleMesh mesh;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z))
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad vertex line");
      mesh.vertices.emplace_back(x, y, z);
      double r, g, b;
      if (ss >> r >> g >> b) mesh.colors.emplace_back(r, g, b);
    } else if (tag == "f") {
      std::array<int, 3> t;
      for (int c = 0; c < 3; ++c) {
        std::string tok;
        if (!(ss >> tok))
          throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad face line");
        // tolerate v/vt/vn face syntax by reading up to the first slash
        t[c] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      mesh.triangles.push_back(t);
    }
  }
  if (!mesh.colors.empty() && mesh.colors.size() != mesh.vertices.size())
    throw std::runtime_error(path + ": some vertices have colors and some do not");
  mesh.validate();
  return mesh;
}

}  // namespace mvsdf
