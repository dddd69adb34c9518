#include "mvsdf/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "mvsdf/rng.hpp"

namespace mvsdf {
namespace {

constexpr int kMaxTraceSteps = 256;
constexpr double kHitThreshold = 1e-4;

double primitive_sdf(const Primitive& prim, const Eigen::Vector3d& p) {
  Eigen::Vector3d q = p - prim.center;
  switch (prim.kind) {
    case PrimitiveKind::kSphere:
      return q.norm() - prim.extents.x();
    case PrimitiveKind::kBox: {
      Eigen::Vector3d d = q.cwiseAbs() - prim.extents;
      Eigen::Vector3d outside = d.cwiseMax(0.0);
      return outside.norm() + std::min(d.maxCoeff(), 0.0);
    }
    case PrimitiveKind::kTorus: {
      double ring = std::sqrt(q.x() * q.x() + q.z() * q.z()) - prim.extents.x();
      return std::sqrt(ring * ring + q.y() * q.y()) - prim.extents.y();
    }
  }
  throw std::runtime_error("unknown primitive kind");
}

Eigen::Vector3d primitive_grad(const Primitive& prim, const Eigen::Vector3d& p) {
  Eigen::Vector3d q = p - prim.center;
  switch (prim.kind) {
    case PrimitiveKind::kSphere: {
      double len = q.norm();
      if (len < 1e-12) return Eigen::Vector3d(0, 0, 1);
      return q / len;
    }
    case PrimitiveKind::kBox: {
      Eigen::Vector3d d = q.cwiseAbs() - prim.extents;
      Eigen::Vector3d outside = d.cwiseMax(0.0);
      double out_len = outside.norm();
      Eigen::Vector3d sign(q.x() < 0 ? -1 : 1, q.y() < 0 ? -1 : 1, q.z() < 0 ? -1 : 1);
      if (out_len > 1e-12) return (outside / out_len).cwiseProduct(sign);
      // interior: distance is governed by the closest face
      int axis = 0;
      d.maxCoeff(&axis);
      Eigen::Vector3d g = Eigen::Vector3d::Zero();
      g[axis] = sign[axis];
      return g;
    }
    case PrimitiveKind::kTorus: {
      double l = std::sqrt(q.x() * q.x() + q.z() * q.z());
      double ring = l - prim.extents.x();
      double m = std::sqrt(ring * ring + q.y() * q.y());
      if (m < 1e-12 || l < 1e-12) return Eigen::Vector3d(0, 1, 0);
      return Eigen::Vector3d(ring / m * q.x() / l, q.y() / m, ring / m * q.z() / l);
    }
  }
  throw std::runtime_error("unknown primitive kind");
}

struct SdfEval {
  double value;
  Eigen::Vector3d grad;
};

SdfEval eval_node(const AnalyticScene& scene, int node, const Eigen::Vector3d& p,
                  bool with_grad) {
  const CsgNode& n = scene.nodes.at(node);
  switch (n.op) {
    case CsgOp::kPrimitive: {
      SdfEval e{primitive_sdf(n.prim, p), Eigen::Vector3d::Zero()};
      if (with_grad) e.grad = primitive_grad(n.prim, p);
      return e;
    }
    case CsgOp::kUnion: {
      SdfEval a = eval_node(scene, n.left, p, with_grad);
      SdfEval b = eval_node(scene, n.right, p, with_grad);
      return a.value <= b.value ? a : b;
    }
    case CsgOp::kSubtract: {
      SdfEval a = eval_node(scene, n.left, p, with_grad);
      SdfEval b = eval_node(scene, n.right, p, with_grad);
      if (a.value >= -b.value) return a;
      return SdfEval{-b.value, -b.grad};
    }
  }
  throw std::runtime_error("unknown csg op");
}

void check_scene(const AnalyticScene& scene) {
  if (scene.root < 0 || scene.root >= static_cast<int>(scene.nodes.size()))
    throw std::runtime_error("scene has no valid root node");
}

// Uniform direction inside the spherical cap of the given half-angle around axis.
Eigen::Vector3d sample_cap(Prng& rng, const Eigen::Vector3d& axis, double half_angle_rad) {
  if (half_angle_rad <= 0.0) return axis;
  double cos_a = 1.0 - rng.uniform() * (1.0 - std::cos(half_angle_rad));
  double sin_a = std::sqrt(std::max(0.0, 1.0 - cos_a * cos_a));
  double phi = rng.uniform() * 2.0 * M_PI;

  Eigen::Vector3d u = std::abs(axis.x()) < 0.9 ? Eigen::Vector3d(1, 0, 0)
                                               : Eigen::Vector3d(0, 1, 0);
  u = (u - axis * axis.dot(u)).normalized();
  Eigen::Vector3d v = axis.cross(u);
  return (axis * cos_a + (u * std::cos(phi) + v * std::sin(phi)) * sin_a).normalized();
}

Camera nominal_camera(const ImperfectionConfig& cfg, int view_index, double elevation_rad) {
  double az = 2.0 * M_PI * view_index / cfg.views;
  Eigen::Vector3d eye(cfg.camera_radius * std::sin(az) * std::cos(elevation_rad),
                      cfg.camera_radius * std::sin(elevation_rad),
                      -cfg.camera_radius * std::cos(az) * std::cos(elevation_rad));
  Camera cam;
  cam.width = cam.height = cfg.resolution;
  cam.fx = cam.fy = 1.2 * cfg.resolution;
  cam.cx = cfg.resolution / 2.0;
  cam.cy = cfg.resolution / 2.0;
  cam.c2w = look_at(eye, Eigen::Vector3d::Zero());
  return cam;
}

const Eigen::Vector3d kBaseLight = Eigen::Vector3d(0.4, 0.7, -0.6).normalized();

}  // namespace

AnalyticScene AnalyticScene::sphere() {
  AnalyticScene s;
  CsgNode n;
  n.prim.kind = PrimitiveKind::kSphere;
  n.prim.extents = Eigen::Vector3d(0.5, 0, 0);
  s.nodes.push_back(n);
  s.root = 0;
  return s;
}

AnalyticScene AnalyticScene::boxcsg() {
  AnalyticScene s;
  CsgNode box;
  box.prim.kind = PrimitiveKind::kBox;
  box.prim.extents = Eigen::Vector3d(0.35, 0.35, 0.35);
  CsgNode sph;
  sph.prim.kind = PrimitiveKind::kSphere;
  sph.prim.extents = Eigen::Vector3d(0.42, 0, 0);
  CsgNode cut;
  cut.op = CsgOp::kSubtract;
  cut.left = 0;
  cut.right = 1;
  s.nodes = {box, sph, cut};
  s.root = 2;
  return s;
}

AnalyticScene AnalyticScene::torus() {
  AnalyticScene s;
  CsgNode n;
  n.prim.kind = PrimitiveKind::kTorus;
  n.prim.extents = Eigen::Vector3d(0.45, 0.15, 0);
  s.nodes.push_back(n);
  s.root = 0;
  return s;
}

AnalyticScene AnalyticScene::named(const std::string& name) {
  if (name == "sphere") return sphere();
  if (name == "boxcsg") return boxcsg();
  if (name == "torus") return torus();
  throw std::runtime_error("unknown scene '" + name + "', expected sphere, boxcsg or torus");
}

double scene_sdf(const AnalyticScene& scene, const Eigen::Vector3d& p) {
  check_scene(scene);
  return eval_node(scene, scene.root, p, false).value;
}

Eigen::Vector3d scene_normal(const AnalyticScene& scene, const Eigen::Vector3d& p) {
  check_scene(scene);
  Eigen::Vector3d g = eval_node(scene, scene.root, p, true).grad;
  double len = g.norm();
  if (len < 1e-12) return Eigen::Vector3d(0, 0, 1);
  return g / len;
}

Eigen::Vector3d scene_albedo(const AnalyticScene& scene, const Eigen::Vector3d& p) {
  const CheckerAlbedo& c = scene.albedo;
  long long parity = static_cast<long long>(std::floor(p.x() / c.cell)) +
                     static_cast<long long>(std::floor(p.y() / c.cell)) +
                     static_cast<long long>(std::floor(p.z() / c.cell));
  return (parity & 1) ? c.color_b : c.color_a;
}

void ImperfectionConfig::validate() const {
  if (views < 2) throw std::runtime_error("need at least 2 views");
  if (resolution < 2) throw std::runtime_error("resolution must be at least 2");
  if (camera_radius <= 1.0)
    throw std::runtime_error("camera radius must exceed the unit scene bound");
  if (light_jitter_deg < 0 || pose_jitter_deg < 0 || warp_amplitude < 0 ||
      warp_frequency < 0)
    throw std::runtime_error("imperfection severities must be non-negative");
  if (elevation_min_deg > elevation_max_deg)
    throw std::runtime_error("elevation range is inverted");
}

double shade_pixel(const Eigen::Vector3d& n, const Eigen::Vector3d& l, double ambient,
                   double intensity) {
  return std::clamp(ambient + intensity * std::max(0.0, n.dot(l)), 0.0, 1.0);
}

Eigen::Vector3d ViewWarp::displace(const Eigen::Vector3d& p) const {
  if (amplitude == 0.0) return p;
  return p + amplitude * Eigen::Vector3d(std::sin(frequency * p.x() + phase.x()),
                                         std::sin(frequency * p.y() + phase.y()),
                                         std::sin(frequency * p.z() + phase.z()));
}

double ViewWarp::sdf(const AnalyticScene& scene, const Eigen::Vector3d& p) const {
  return scene_sdf(scene, displace(p));
}

Eigen::Vector3d ViewWarp::normal(const AnalyticScene& scene, const Eigen::Vector3d& p) const {
  // chain rule through the diagonal warp Jacobian 1 + a k cos(k p + phase)
  Eigen::Vector3d g = eval_node(scene, scene.root, displace(p), true).grad;
  if (amplitude != 0.0) {
    for (int i = 0; i < 3; ++i)
      g[i] *= 1.0 + amplitude * frequency * std::cos(frequency * p[i] + phase[i]);
  }
  double len = g.norm();
  if (len < 1e-12) return Eigen::Vector3d(0, 0, 1);
  return g / len;
}

TraceResult sphere_trace(const AnalyticScene& scene, const ViewWarp& warp, const Ray& ray) {
  TraceResult res;
  if (!ray.hits_bounds) return res;

  // the warp raises the Lipschitz bound to 1 + a k, shrink steps accordingly
  double lipschitz = 1.0 + warp.amplitude * warp.frequency;
  double t = ray.t_near;
  for (int step = 0; step < kMaxTraceSteps && t <= ray.t_far; ++step) {
    Eigen::Vector3d p = ray.origin + t * ray.dir;
    double f = warp.sdf(scene, p);
    if (f < kHitThreshold) {
      // polish the hit so the reported distance is much tighter than the
      // acceptance threshold; the surface has already been declared hit
      for (int it = 0; it < 16 && std::abs(f) > 1e-9; ++it) {
        t += f / lipschitz;
        f = warp.sdf(scene, ray.origin + t * ray.dir);
      }
      res.hit = true;
      res.t = t;
      res.point = ray.origin + t * ray.dir;
      return res;
    }
    t += f / lipschitz;
  }
  return res;
}

ViewMaps render_view(const AnalyticScene& scene, const ImperfectionConfig& cfg,
                     int view_index, bool defect_free) {
  cfg.validate();
  check_scene(scene);

  Prng elev_rng = rng_stream(cfg.seed, "elevation", static_cast<uint64_t>(view_index));
  double el = (cfg.elevation_min_deg +
               elev_rng.uniform() * (cfg.elevation_max_deg - cfg.elevation_min_deg)) *
              M_PI / 180.0;

  ViewMaps out;
  out.manifest_camera = nominal_camera(cfg, view_index, el);
  out.render_camera = out.manifest_camera;
  out.light = kBaseLight;
  out.warp.amplitude = 0.0;
  out.warp.frequency = cfg.warp_frequency;

  if (!defect_free) {
    if (cfg.pose_jitter_deg > 0.0) {
      Prng rng = rng_stream(cfg.seed, "pose", static_cast<uint64_t>(view_index));
      Eigen::Vector3d eye = out.manifest_camera.position();
      Eigen::Vector3d dir = sample_cap(rng, eye.normalized(), cfg.pose_jitter_deg * M_PI / 180.0);
      out.render_camera.c2w = look_at(dir * eye.norm(), Eigen::Vector3d::Zero());
    }
    if (cfg.light_jitter_deg > 0.0) {
      Prng rng = rng_stream(cfg.seed, "light", static_cast<uint64_t>(view_index));
      out.light = sample_cap(rng, kBaseLight, cfg.light_jitter_deg * M_PI / 180.0);
    }
    if (cfg.warp_amplitude > 0.0) {
      Prng rng = rng_stream(cfg.seed, "warp", static_cast<uint64_t>(view_index));
      out.warp.amplitude = cfg.warp_amplitude;
      for (int i = 0; i < 3; ++i) out.warp.phase[i] = rng.uniform() * 2.0 * M_PI;
    }
  }

  const int res = cfg.resolution;
  out.image = ImageBuffer(res, res, 3, 1.0f);
  out.albedo = ImageBuffer(res, res, 3, 1.0f);
  out.shade = ImageBuffer(res, res, 1, 1.0f);
  out.mask = ImageBuffer(res, res, 1, 0.0f);
  out.depth = ImageBuffer(res, res, 1, 0.0f);
  out.normal.width = res;
  out.normal.height = res;
  out.normal.space = NormalSpace::kCamera;
  out.normal.n.assign(static_cast<std::size_t>(res) * res * 3, 0.0f);

  Eigen::Matrix3d w2c = out.render_camera.rotation().transpose();

  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      Ray ray = generate_ray(out.render_camera, x + 0.5, y + 0.5);
      TraceResult hit = sphere_trace(scene, out.warp, ray);
      float* nrm = out.normal.at(x, y);
      nrm[0] = 0.0f;
      nrm[1] = 0.0f;
      nrm[2] = 1.0f;
      if (!hit.hit) continue;

      Eigen::Vector3d n_world = out.warp.normal(scene, hit.point);
      Eigen::Vector3d n_cam = w2c * n_world;
      Eigen::Vector3d alb = scene_albedo(scene, hit.point);
      double shade = shade_pixel(n_world, out.light, cfg.ambient, cfg.intensity);

      out.mask.at(x, y, 0) = 1.0f;
      out.depth.at(x, y, 0) = static_cast<float>(hit.t / kDepthScale);
      // the product is formed from the stored float values so that
      // image == albedo * shade holds exactly in float
      float shade_f = static_cast<float>(shade);
      out.shade.at(x, y, 0) = shade_f;
      for (int c = 0; c < 3; ++c) {
        float alb_f = static_cast<float>(alb[c]);
        out.albedo.at(x, y, c) = alb_f;
        out.image.at(x, y, c) = alb_f * shade_f;
        nrm[c] = static_cast<float>(n_cam[c]);
      }
    }
  }
  return out;
}

SceneManifest generate_dataset(const AnalyticScene& scene, const std::string& scene_name,
                               const ImperfectionConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root))
    throw std::runtime_error(out_dir + ": cannot create output directory");

  SceneManifest manifest;
  manifest.scene = scene_name;
  manifest.root = root;

  for (int i = 0; i < cfg.views; ++i) {
    bool defect_free = (i == 0);
    ViewMaps maps = render_view(scene, cfg, i, defect_free);

    char buf[16];
    std::snprintf(buf, sizeof(buf), "view_%02d", i);
    std::string stem(buf);
    fs::path dir = root / stem;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error(dir.string() + ": cannot create view directory");

    ViewRecord rec;
    rec.image = stem + "/image.png";
    rec.albedo = stem + "/albedo.png";
    rec.shade = stem + "/shade.png";
    rec.normal = stem + "/normal.png";
    rec.mask = stem + "/mask.png";
    rec.camera = maps.manifest_camera;
    rec.is_input = defect_free;

    save_png((root / rec.image).string(), maps.image);
    save_png((root / rec.albedo).string(), maps.albedo);
    save_png((root / rec.shade).string(), maps.shade);
    save_png((root / rec.normal).string(), encode_normal_map(maps.normal));
    save_png((root / rec.mask).string(), maps.mask);
    save_nfm((dir / "depth.nfm").string(), maps.depth);

    manifest.views.push_back(rec);
    if (defect_free) manifest.input_index = i;
  }

  save_manifest((root / "scene.json").string(), manifest);
  return manifest;
}

}  // namespace mvsdf
