#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "mvsdf/camera.hpp"
#include "mvsdf/image.hpp"
#include "mvsdf/manifest.hpp"

namespace mvsdf {

enum class PrimitiveKind { kSphere, kBox, kTorus };

// sphere: extents.x = radius. box: extents = half widths.
// torus: ring of radius extents.x in the xz plane, tube radius extents.y.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kSphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d extents = Eigen::Vector3d(0.5, 0.0, 0.0);
};

enum class CsgOp { kPrimitive, kUnion, kSubtract };

struct CsgNode {
  CsgOp op = CsgOp::kPrimitive;
  Primitive prim;
  int left = -1;
  int right = -1;
};

// Procedural 3D checker: color flips with the parity of the cell index.
struct CheckerAlbedo {
  double cell = 0.2;
  Eigen::Vector3d color_a = Eigen::Vector3d(0.85, 0.45, 0.25);
  Eigen::Vector3d color_b = Eigen::Vector3d(0.30, 0.55, 0.85);
};

// CSG tree over analytic primitives. Surfaces stay inside the unit sphere.
struct AnalyticScene {
  std::vector<CsgNode> nodes;
  int root = -1;
  CheckerAlbedo albedo;

  static AnalyticScene sphere();  // radius 0.5
  static AnalyticScene boxcsg();  // box with a sphere carved out
  static AnalyticScene torus();   // ring 0.45, tube 0.15
  static AnalyticScene named(const std::string& name);
};

double scene_sdf(const AnalyticScene& scene, const Eigen::Vector3d& p);
// Gradient of the active CSG branch; normalized. Exact away from min/max kinks.
Eigen::Vector3d scene_normal(const AnalyticScene& scene, const Eigen::Vector3d& p);
Eigen::Vector3d scene_albedo(const AnalyticScene& scene, const Eigen::Vector3d& p);

struct ImperfectionConfig {
  int views = 16;
  int resolution = 64;
  double camera_radius = 2.5;
  double elevation_min_deg = -10.0;
  double elevation_max_deg = 40.0;
  double light_jitter_deg = 0.0;   // half-angle of the per-view light rotation
  double pose_jitter_deg = 0.0;    // half-angle of the hidden camera perturbation
  double warp_amplitude = 0.0;     // per-view sinusoidal geometry warp
  double warp_frequency = 3.0;
  double ambient = 0.2;
  double intensity = 0.8;
  uint64_t seed = 0;

  void validate() const;
};

// shade = clamp(ambient + intensity * max(0, n.l), 0, 1). n and l unit.
double shade_pixel(const Eigen::Vector3d& n, const Eigen::Vector3d& l, double ambient,
                   double intensity);

// Per-view warp of the scene: f_w(p) = f(p + a * sin(k * p + phase)) applied
// componentwise. Zero amplitude leaves the field untouched.
struct ViewWarp {
  double amplitude = 0.0;
  double frequency = 3.0;
  Eigen::Vector3d phase = Eigen::Vector3d::Zero();

  Eigen::Vector3d displace(const Eigen::Vector3d& p) const;
  double sdf(const AnalyticScene& scene, const Eigen::Vector3d& p) const;
  Eigen::Vector3d normal(const AnalyticScene& scene, const Eigen::Vector3d& p) const;
};

struct TraceResult {
  bool hit = false;
  double t = 0.0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
};

// Sphere tracing against the warped field: at most 256 steps, a hit once the
// field drops below 1e-4, then a short polish to tighten the hit distance.
TraceResult sphere_trace(const AnalyticScene& scene, const ViewWarp& warp, const Ray& ray);

struct ViewMaps {
  ImageBuffer image;   // albedo * shade, white background
  ImageBuffer albedo;  // white background
  ImageBuffer shade;   // 1 channel, background 1
  ImageBuffer mask;    // 1 channel
  ImageBuffer depth;   // 1 channel, ray distance / 8, background 0
  NormalMap normal;    // camera space of the render camera
  Camera render_camera;    // pose actually traced (perturbed)
  Camera manifest_camera;  // pose recorded downstream (unperturbed)
  Eigen::Vector3d light = Eigen::Vector3d::Zero();
  ViewWarp warp;
};

// Scale dividing ray distances so depth maps fit the [0,1] float-map range.
inline constexpr double kDepthScale = 8.0;

// Renders one view with per-view defects drawn from the config seed. A
// defect-free view ignores warp, light jitter and pose jitter.
ViewMaps render_view(const AnalyticScene& scene, const ImperfectionConfig& cfg,
                     int view_index, bool defect_free);

// Writes view_XX/ directories with all maps plus scene.json, view 0 rendered
// defect-free and flagged as the input view. Returns the manifest written.
SceneManifest generate_dataset(const AnalyticScene& scene, const std::string& scene_name,
                               const ImperfectionConfig& cfg, const std::string& out_dir);

}  // namespace mvsdf
