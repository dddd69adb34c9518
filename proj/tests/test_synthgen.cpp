#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mvsdf/manifest.hpp"
#include "mvsdf/rng.hpp"
#include "mvsdf/synthgen.hpp"

using namespace mvsdf;
namespace fs = std::filesystem;

namespace {

fs::path make_tmp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("mvsdf_synthgen_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Eigen::Vector3d fd_normal(const AnalyticScene& scene, const ViewWarp& warp,
                          const Eigen::Vector3d& p, double h) {
  Eigen::Vector3d g;
  for (int i = 0; i < 3; ++i) {
    Eigen::Vector3d hi = p, lo = p;
    hi[i] += h;
    lo[i] -= h;
    g[i] = (warp.sdf(scene, hi) - warp.sdf(scene, lo)) / (2 * h);
  }
  return g.normalized();
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("primitive and csg signed distances") {
  AnalyticScene sph = AnalyticScene::sphere();
  CHECK(scene_sdf(sph, {1, 0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(scene_sdf(sph, {0, 0, 0}) == doctest::Approx(-0.5).epsilon(1e-12));

  AnalyticScene box;
  CsgNode bn;
  bn.prim.kind = PrimitiveKind::kBox;
  bn.prim.extents = Eigen::Vector3d(0.3, 0.3, 0.3);
  box.nodes.push_back(bn);
  box.root = 0;
  CHECK(scene_sdf(box, {0, 0, 0}) == doctest::Approx(-0.3).epsilon(1e-12));
  CHECK(scene_sdf(box, {0.5, 0, 0}) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(scene_sdf(box, {0.5, 0.5, 0}) ==
        doctest::Approx(std::sqrt(2) * 0.2).epsilon(1e-12));

  // union with a smaller concentric sphere is dominated by the big one
  AnalyticScene uni = AnalyticScene::sphere();
  CsgNode small;
  small.prim.extents = Eigen::Vector3d(0.4, 0, 0);
  uni.nodes.push_back(small);
  CsgNode u;
  u.op = CsgOp::kUnion;
  u.left = 0;
  u.right = 1;
  uni.nodes.push_back(u);
  uni.root = 2;
  Prng rng(5);
  for (int i = 0; i < 50; ++i) {
    Eigen::Vector3d p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    CHECK(scene_sdf(uni, p) == doctest::Approx(scene_sdf(sph, p)).epsilon(1e-12));
  }

  // subtraction carves the sphere out of the box
  AnalyticScene carved = AnalyticScene::boxcsg();
  CHECK(scene_sdf(carved, {0, 0, 0}) == doctest::Approx(0.42).epsilon(1e-9));
  CHECK(scene_sdf(carved, {0.34, 0.34, 0.34}) < 0);  // corners survive the cut

  AnalyticScene tor = AnalyticScene::torus();
  CHECK(scene_sdf(tor, {0.6, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(scene_sdf(tor, {0.45, 0.15, 0}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(scene_sdf(tor, {0, 0, 0}) == doctest::Approx(0.3).epsilon(1e-12));

  CHECK_THROWS_AS(AnalyticScene::named("teapot"), std::runtime_error);
  CHECK(AnalyticScene::named("boxcsg").nodes.size() == 3);
}

TEST_CASE("analytic normals match finite differences away from kinks") {
  ViewWarp no_warp;
  Prng rng(17);
  for (const char* name : {"sphere", "boxcsg", "torus"}) {
    AnalyticScene scene = AnalyticScene::named(name);
    int checked = 0;
    for (int i = 0; i < 200 && checked < 60; ++i) {
      Eigen::Vector3d p(rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9),
                        rng.uniform(-0.9, 0.9));
      // keep clear of the surface and of CSG/box kinks where FD is unreliable
      double f = scene_sdf(scene, p);
      if (std::abs(f) < 0.02) continue;
      Eigen::Vector3d n = scene_normal(scene, p);
      Eigen::Vector3d fd = fd_normal(scene, no_warp, p, 1e-6);
      if (!fd.allFinite()) continue;
      double dot = n.dot(fd);
      if (dot < 0.9) continue;  // straddled a kink, skip
      CHECK(dot > 1.0 - 1e-8);
      ++checked;
    }
    CHECK(checked >= 40);
  }
}

TEST_CASE("shading formula") {
  Eigen::Vector3d l = Eigen::Vector3d(0.3, 0.8, -0.5).normalized();
  CHECK(shade_pixel(l, l, 0.2, 0.8) == doctest::Approx(1.0).epsilon(1e-12));

  Eigen::Vector3d perp = l.cross(Eigen::Vector3d(0, 0, 1)).normalized();
  CHECK(shade_pixel(perp, l, 0.2, 0.8) == doctest::Approx(0.2).epsilon(1e-12));

  // n.l = 0.5 via a 60 degree rotation in a plane containing l
  Eigen::Vector3d n = (0.5 * l + std::sqrt(0.75) * perp).normalized();
  CHECK(shade_pixel(n, l, 0.2, 0.8) == doctest::Approx(0.6).epsilon(1e-9));

  // backfacing light clamps the Lambert term at zero
  CHECK(shade_pixel(-l, l, 0.2, 0.8) == doctest::Approx(0.2).epsilon(1e-12));
  // saturation clamps at one
  CHECK(shade_pixel(l, l, 0.5, 0.9) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("view warp displaces points and keeps exact chain-rule normals") {
  AnalyticScene scene = AnalyticScene::sphere();
  ViewWarp warp;
  warp.amplitude = 0.05;
  warp.frequency = 3.0;
  warp.phase = Eigen::Vector3d(0.7, 2.1, 4.4);

  ViewWarp none;
  Eigen::Vector3d p(0.3, -0.2, 0.55);
  CHECK(none.sdf(scene, p) == doctest::Approx(scene_sdf(scene, p)).epsilon(1e-15));
  CHECK((none.displace(p) - p).norm() == 0.0);

  Eigen::Vector3d q = warp.displace(p);
  for (int i = 0; i < 3; ++i)
    CHECK(q[i] == doctest::Approx(p[i] + 0.05 * std::sin(3.0 * p[i] + warp.phase[i]))
                      .epsilon(1e-12));

  Prng rng(29);
  for (int i = 0; i < 40; ++i) {
    Eigen::Vector3d x(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8),
                      rng.uniform(-0.8, 0.8));
    if (std::abs(warp.sdf(scene, x)) < 0.02) continue;
    Eigen::Vector3d n = warp.normal(scene, x);
    Eigen::Vector3d fd = fd_normal(scene, warp, x, 1e-6);
    CHECK(n.dot(fd) > 1.0 - 1e-7);
  }
}

TEST_CASE("sphere tracing hits the analytic surface tightly") {
  AnalyticScene scene = AnalyticScene::sphere();
  ViewWarp none;

  Ray ray;
  ray.origin = Eigen::Vector3d(0, 0, -2.5);
  ray.dir = Eigen::Vector3d(0, 0, 1);
  ray.t_near = 1.5;
  ray.t_far = 3.5;
  ray.hits_bounds = true;

  TraceResult hit = sphere_trace(scene, none, ray);
  REQUIRE(hit.hit);
  CHECK(hit.t == doctest::Approx(2.0).epsilon(1e-7));
  CHECK(std::abs(scene_sdf(scene, hit.point)) < 1e-8);

  Ray miss = ray;
  miss.origin = Eigen::Vector3d(0, 0.9, -2.5);
  TraceResult gone = sphere_trace(scene, none, miss);
  CHECK_FALSE(gone.hit);

  Ray skipped = ray;
  skipped.hits_bounds = false;
  CHECK_FALSE(sphere_trace(scene, none, skipped).hit);
}

TEST_CASE("imperfection config validation") {
  ImperfectionConfig cfg;
  cfg.views = 1;
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
  cfg.views = 4;
  cfg.warp_amplitude = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
  cfg.warp_amplitude = 0;
  cfg.elevation_min_deg = 50;
  cfg.elevation_max_deg = 10;
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
  cfg.elevation_min_deg = -10;
  cfg.elevation_max_deg = 40;
  cfg.camera_radius = 0.8;
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
  cfg.camera_radius = 2.5;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("rendered view: mask, depth, camera-space normals, exact decomposition") {
  AnalyticScene scene = AnalyticScene::sphere();
  ImperfectionConfig cfg;
  cfg.views = 4;
  cfg.resolution = 32;
  cfg.seed = 3;

  ViewMaps v = render_view(scene, cfg, 0, true);
  int cx = cfg.resolution / 2, cy = cfg.resolution / 2;
  CHECK(v.mask.at(cx, cy, 0) == 1.0f);
  CHECK(v.mask.at(0, 0, 0) == 0.0f);
  CHECK(v.image.at(0, 0, 0) == 1.0f);  // background is white

  // the camera sits on a 2.5 radius orbit, so the silhouette center is 2.0 away
  CHECK(v.depth.at(cx, cy, 0) * kDepthScale == doctest::Approx(2.0).epsilon(2e-3));

  // surface point facing the camera has camera-space normal close to (0,0,-1)
  CHECK(v.normal.at(cx, cy)[2] < -0.99f);

  // image equals albedo * shade exactly in float before any quantization
  for (int y = 0; y < cfg.resolution; ++y)
    for (int x = 0; x < cfg.resolution; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(v.image.at(x, y, c) ==
              static_cast<float>(static_cast<double>(v.albedo.at(x, y, c)) *
                                 v.shade.at(x, y, 0)));
}

TEST_CASE("per-view defects: light cap, pose cap, hidden pose, warp phases") {
  AnalyticScene scene = AnalyticScene::sphere();
  ImperfectionConfig cfg;
  cfg.views = 6;
  cfg.resolution = 8;
  cfg.light_jitter_deg = 25;
  cfg.pose_jitter_deg = 5;
  cfg.warp_amplitude = 0.02;
  cfg.seed = 11;

  Eigen::Vector3d base_light = render_view(scene, cfg, 0, true).light;

  bool some_light_moved = false, some_pose_moved = false;
  for (int i = 1; i < cfg.views; ++i) {
    ViewMaps v = render_view(scene, cfg, i, false);
    double light_angle = std::acos(std::clamp(v.light.dot(base_light), -1.0, 1.0));
    CHECK(light_angle <= 25.0 * M_PI / 180.0 + 1e-9);
    some_light_moved |= light_angle > 1e-3;

    Eigen::Vector3d nominal = v.manifest_camera.position().normalized();
    Eigen::Vector3d actual = v.render_camera.position().normalized();
    double pose_angle = std::acos(std::clamp(nominal.dot(actual), -1.0, 1.0));
    CHECK(pose_angle <= 5.0 * M_PI / 180.0 + 1e-9);
    some_pose_moved |= pose_angle > 1e-4;

    CHECK(v.warp.amplitude == cfg.warp_amplitude);
  }
  CHECK(some_light_moved);
  CHECK(some_pose_moved);

  // warp phases differ between views
  ViewMaps a = render_view(scene, cfg, 1, false);
  ViewMaps b = render_view(scene, cfg, 2, false);
  CHECK((a.warp.phase - b.warp.phase).norm() > 1e-3);

  // the defect-free input view carries no defects at all
  ViewMaps input = render_view(scene, cfg, 0, true);
  CHECK(input.warp.amplitude == 0.0);
  CHECK((input.render_camera.c2w - input.manifest_camera.c2w).norm() == 0.0);
  CHECK((input.light - base_light).norm() == 0.0);
}

TEST_CASE("emitted normals track finite differences of the warped field") {
  AnalyticScene scene = AnalyticScene::torus();
  ImperfectionConfig cfg;
  cfg.views = 4;
  cfg.resolution = 24;
  cfg.warp_amplitude = 0.05;
  cfg.seed = 21;

  ViewMaps v = render_view(scene, cfg, 2, false);
  Eigen::Matrix3d r = v.render_camera.rotation();
  int checked = 0;
  for (int y = 0; y < cfg.resolution; ++y) {
    for (int x = 0; x < cfg.resolution; ++x) {
      if (v.mask.at(x, y, 0) < 0.5f) continue;
      Ray ray = generate_ray(v.render_camera, x + 0.5, y + 0.5);
      double t = static_cast<double>(v.depth.at(x, y, 0)) * kDepthScale;
      Eigen::Vector3d p = ray.origin + t * ray.dir;

      const float* nc = v.normal.at(x, y);
      Eigen::Vector3d n_world = r * Eigen::Vector3d(nc[0], nc[1], nc[2]);
      Eigen::Vector3d fd = fd_normal(scene, v.warp, p, 1e-5);
      CHECK((n_world - fd).norm() <= 1e-2);
      ++checked;
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("dataset generation: manifest loads, decomposition holds, bitwise determinism") {
  AnalyticScene scene = AnalyticScene::boxcsg();
  ImperfectionConfig cfg;
  cfg.views = 5;
  cfg.resolution = 24;
  cfg.light_jitter_deg = 20;
  cfg.warp_amplitude = 0.02;
  cfg.pose_jitter_deg = 3;
  cfg.seed = 7;

  fs::path dir_a = make_tmp_dir("gen_a");
  SceneManifest written = generate_dataset(scene, "boxcsg", cfg, dir_a.string());
  CHECK(written.views.size() == 5);
  CHECK(written.input_index == 0);

  SceneManifest loaded = load_manifest((dir_a / "scene.json").string());
  REQUIRE(loaded.views.size() == 5);
  CHECK(loaded.input_index == 0);
  CHECK(loaded.scene == "boxcsg");
  CHECK(loaded.views[0].is_input);

  for (std::size_t i = 0; i < loaded.views.size(); ++i) {
    ViewData data = load_view_data(loaded, i);
    REQUIRE(data.albedo.has_value());
    REQUIRE(data.shade.has_value());
    DecompositionReport rep = validate_decomposition(data.image, *data.albedo, *data.shade);
    CHECK(rep.pass);  // max error within 2/255 after 8-bit quantization
    REQUIRE(data.normal.has_value());  // unit-length gate passed inside the loader
  }

  fs::path dir_b = make_tmp_dir("gen_b");
  generate_dataset(scene, "boxcsg", cfg, dir_b.string());
  int compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir_a)) {
    if (!entry.is_regular_file()) continue;
    fs::path rel = fs::relative(entry.path(), dir_a);
    CHECK(read_bytes(entry.path()) == read_bytes(dir_b / rel));
    ++compared;
  }
  CHECK(compared == 5 * 6 + 1);  // six maps per view plus the manifest
}

TEST_CASE("zero-severity views are multi-view consistent under reprojection") {
  AnalyticScene scene = AnalyticScene::sphere();
  ImperfectionConfig cfg;
  cfg.views = 8;
  cfg.resolution = 48;
  cfg.seed = 13;  // all severities zero

  ViewMaps a = render_view(scene, cfg, 1, false);
  ViewMaps b = render_view(scene, cfg, 2, false);
  REQUIRE((a.render_camera.c2w - a.manifest_camera.c2w).norm() == 0.0);

  Eigen::Matrix3d rb = b.render_camera.rotation().transpose();
  Eigen::Vector3d cb = b.render_camera.position();

  int tested = 0;
  ViewWarp none;
  for (int y = 0; y < cfg.resolution; ++y) {
    for (int x = 0; x < cfg.resolution; ++x) {
      if (a.mask.at(x, y, 0) < 0.5f) continue;
      Ray ray_a = generate_ray(a.render_camera, x + 0.5, y + 0.5);
      double t_a = static_cast<double>(a.depth.at(x, y, 0)) * kDepthScale;
      Eigen::Vector3d p = ray_a.origin + t_a * ray_a.dir;

      // skip grazing pixels in A, where the traced point is least accurate
      Eigen::Vector3d n = scene_normal(scene, p);
      if (std::abs(n.dot(ray_a.dir)) < 0.5) continue;

      Eigen::Vector3d pc = rb * (p - cb);
      if (pc.z() <= 0) continue;
      double px = b.render_camera.fx * pc.x() / pc.z() + b.render_camera.cx;
      double py = b.render_camera.fy * pc.y() / pc.z() + b.render_camera.cy;
      if (px < 1 || py < 1 || px > cfg.resolution - 1 || py > cfg.resolution - 1) continue;

      Ray ray_b = generate_ray(b.render_camera, px, py);
      if (!ray_b.hits_bounds) continue;
      TraceResult hit_b = sphere_trace(scene, none, ray_b);
      if (!hit_b.hit) continue;
      Eigen::Vector3d nb = scene_normal(scene, hit_b.point);
      if (std::abs(nb.dot(ray_b.dir)) < 0.5) continue;  // non-grazing in B as well
      double dist = (p - cb).norm();
      if (hit_b.t < dist - 1e-3) continue;  // p is occluded in B, not co-visible

      CHECK(std::abs(dist - hit_b.t) <= 2e-4);
      ++tested;
    }
  }
  CHECK(tested > 50);
}
