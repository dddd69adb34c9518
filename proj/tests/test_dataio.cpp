#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mvsdf/camera.hpp"
#include "mvsdf/image.hpp"
#include "mvsdf/manifest.hpp"
#include "mvsdf/rng.hpp"

using namespace mvsdf;
namespace fs = std::filesystem;

namespace {

fs::path make_tmp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("mvsdf_dataio_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Camera test_camera(int w, int h, const Eigen::Vector3d& eye) {
  Camera cam;
  cam.width = w;
  cam.height = h;
  cam.fx = cam.fy = 1.2 * w;
  cam.cx = w / 2.0;
  cam.cy = h / 2.0;
  cam.c2w = look_at(eye, Eigen::Vector3d::Zero());
  return cam;
}

void write_flat_png(const fs::path& p, int w, int h, int c, float value) {
  ImageBuffer img(w, h, c, value);
  save_png(p.string(), img);
}

}  // namespace

TEST_CASE("float map roundtrip is bitwise and layout is as documented") {
  fs::path dir = make_tmp_dir("nfm");
  ImageBuffer img(3, 2, 3);
  Prng rng(11);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());

  fs::path p = dir / "map.nfm";
  save_nfm(p.string(), img);
  ImageBuffer back = load_nfm(p.string());
  REQUIRE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    // bitwise: compare the underlying bits, not approximate values
    uint32_t a, b;
    std::memcpy(&a, &img.data[i], 4);
    std::memcpy(&b, &back.data[i], 4);
    CHECK(a == b);
  }

  ImageBuffer tiny(2, 1, 1);
  tiny.data = {0.25f, 1.0f};
  fs::path tp = dir / "tiny.nfm";
  save_nfm(tp.string(), tiny);
  CHECK(fs::file_size(tp) == 24);  // 4 magic + 12 header + 2 floats
}

TEST_CASE("float map rejects bad magic, short payload, bad channel count") {
  fs::path dir = make_tmp_dir("nfm_bad");

  {
    std::ofstream f(dir / "magic.nfm", std::ios::binary);
    f << "XXXXrest-of-file-does-not-matter";
  }
  CHECK_THROWS_WITH_AS(load_nfm((dir / "magic.nfm").string()),
                       doctest::Contains("magic"), std::runtime_error);

  {
    ImageBuffer img(4, 4, 1, 0.5f);
    save_nfm((dir / "short.nfm").string(), img);
    fs::resize_file(dir / "short.nfm", 30);  // header survives, payload truncated
  }
  CHECK_THROWS_WITH_AS(load_nfm((dir / "short.nfm").string()),
                       doctest::Contains("truncated"), std::runtime_error);

  {
    std::ofstream f(dir / "chan.nfm", std::ios::binary);
    f << "NFM1";
    uint32_t hdr[3] = {1, 1, 2};
    f.write(reinterpret_cast<const char*>(hdr), 12);
    float v[2] = {0, 0};
    f.write(reinterpret_cast<const char*>(v), 8);
  }
  CHECK_THROWS_WITH_AS(load_nfm((dir / "chan.nfm").string()),
                       doctest::Contains("channels"), std::runtime_error);
}

TEST_CASE("float map load clamps values into [0,1]") {
  fs::path dir = make_tmp_dir("nfm_clamp");
  fs::path p = dir / "wild.nfm";
  {
    std::ofstream f(p, std::ios::binary);
    f << "NFM1";
    uint32_t hdr[3] = {2, 1, 1};
    f.write(reinterpret_cast<const char*>(hdr), 12);
    float v[2] = {-0.5f, 3.0f};
    f.write(reinterpret_cast<const char*>(v), 8);
  }
  ImageBuffer img = load_nfm(p.string());
  CHECK(img.data[0] == 0.0f);
  CHECK(img.data[1] == 1.0f);
}

TEST_CASE("png roundtrip within 8-bit quantization, gray and rgb") {
  fs::path dir = make_tmp_dir("png");
  for (int channels : {1, 3}) {
    ImageBuffer img(5, 4, channels);
    Prng rng(7 + channels);
    for (float& v : img.data) v = static_cast<float>(rng.uniform());
    fs::path p = dir / ("c" + std::to_string(channels) + ".png");
    save_png(p.string(), img);
    ImageBuffer back = load_png(p.string());
    REQUIRE(back.same_shape(img));
    for (std::size_t i = 0; i < img.data.size(); ++i)
      CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5f / 255.0f + 1e-6f);
  }

  std::ofstream f(dir / "fake.png", std::ios::binary);
  f << "definitely not a png";
  f.close();
  CHECK_THROWS_WITH_AS(load_png((dir / "fake.png").string()),
                       doctest::Contains("png"), std::runtime_error);
}

TEST_CASE("probe_image_size reads headers of both formats") {
  fs::path dir = make_tmp_dir("probe");
  write_flat_png(dir / "a.png", 7, 3, 3, 0.5f);
  save_nfm((dir / "b.nfm").string(), ImageBuffer(2, 9, 1, 0.1f));

  ImageSize a = probe_image_size((dir / "a.png").string());
  CHECK(a.width == 7);
  CHECK(a.height == 3);
  ImageSize b = probe_image_size((dir / "b.nfm").string());
  CHECK(b.width == 2);
  CHECK(b.height == 9);
}

TEST_CASE("normal decode: 8-bit pixel (255,128,0) maps to renormalized (1, 1/255*?, -1)") {
  ImageBuffer img(1, 1, 3);
  img.data = {255.0f / 255.0f, 128.0f / 255.0f, 0.0f};
  NormalMap map = decode_normal_map(img, NormalSpace::kCamera);

  // raw components from v/127.5 - 1 on the 8-bit values, then renormalize
  double vx = 255.0 / 127.5 - 1.0;
  double vy = 128.0 / 127.5 - 1.0;
  double vz = 0.0 / 127.5 - 1.0;
  double len = std::sqrt(vx * vx + vy * vy + vz * vz);
  CHECK(map.at(0, 0)[0] == doctest::Approx(vx / len).epsilon(1e-5));
  CHECK(map.at(0, 0)[1] == doctest::Approx(vy / len).epsilon(1e-4));
  CHECK(map.at(0, 0)[2] == doctest::Approx(vz / len).epsilon(1e-5));
  CHECK(map.at(0, 0)[1] == doctest::Approx(0.00392 / std::sqrt(2.0)).epsilon(1e-2));

  double out_len = 0;
  for (int c = 0; c < 3; ++c) out_len += map.at(0, 0)[c] * map.at(0, 0)[c];
  CHECK(std::sqrt(out_len) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("normal decode: mid-gray pixel is degenerate and maps to (0,0,1)") {
  ImageBuffer img(1, 1, 3, 0.5f);
  NormalMap map = decode_normal_map(img, NormalSpace::kWorld);
  CHECK(map.at(0, 0)[0] == 0.0f);
  CHECK(map.at(0, 0)[1] == 0.0f);
  CHECK(map.at(0, 0)[2] == 1.0f);
  CHECK(map.space == NormalSpace::kWorld);
}

TEST_CASE("normal map load enforces unit length on mask-valid pixels") {
  fs::path dir = make_tmp_dir("nrm");

  // 2x1 map: left pixel a clean +z normal, right pixel garbage (white).
  ImageBuffer img(2, 1, 3);
  img.data = {0.5f, 0.5f, 1.0f, 1.0f, 1.0f, 1.0f};
  fs::path p = dir / "n.png";
  save_png(p.string(), img);

  CHECK_THROWS_WITH_AS(load_normal_map(p.string(), NormalSpace::kCamera),
                       doctest::Contains("unit"), std::runtime_error);

  ImageBuffer mask(2, 1, 1);
  mask.data = {1.0f, 0.0f};
  NormalMap ok = load_normal_map(p.string(), NormalSpace::kCamera, &mask);
  CHECK(ok.at(0, 0)[2] == doctest::Approx(1.0).epsilon(2e-2));

  ImageBuffer bad_mask(2, 1, 1, 1.0f);
  CHECK_THROWS_WITH_AS(load_normal_map(p.string(), NormalSpace::kCamera, &bad_mask),
                       doctest::Contains("(1,0)"), std::runtime_error);

  ImageBuffer wrong_size(3, 3, 1, 1.0f);
  CHECK_THROWS_WITH_AS(load_normal_map(p.string(), NormalSpace::kCamera, &wrong_size),
                       doctest::Contains("mask"), std::runtime_error);
}

TEST_CASE("normal encode/decode survives 8-bit quantization for random unit vectors") {
  fs::path dir = make_tmp_dir("nrm_rt");
  const int n = 64;
  NormalMap map;
  map.width = n;
  map.height = 1;
  map.space = NormalSpace::kCamera;
  map.n.resize(n * 3);
  Prng rng(23);
  for (int i = 0; i < n; ++i) {
    double v[3], len = 0;
    for (double& x : v) x = rng.normal();
    for (double x : v) len += x * x;
    len = std::sqrt(len);
    if (len < 1e-9) len = 1;
    for (int c = 0; c < 3; ++c) map.n[i * 3 + c] = static_cast<float>(v[c] / len);
  }

  fs::path p = dir / "rt.png";
  save_png(p.string(), encode_normal_map(map));
  NormalMap back = load_normal_map(p.string(), NormalSpace::kCamera);  // gate must pass
  double worst_dot = 1.0;
  for (int i = 0; i < n; ++i) {
    double dot = 0;
    for (int c = 0; c < 3; ++c) dot += map.n[i * 3 + c] * back.n[i * 3 + c];
    worst_dot = std::min(worst_dot, dot);
  }
  CHECK(worst_dot > 0.9995);  // < ~1.8 degrees of quantization error
}

TEST_CASE("decomposition check: exact product, violation, broadcast, mismatch") {
  ImageBuffer image(4, 4, 3, 0.4f);
  ImageBuffer albedo(4, 4, 3, 0.5f);
  ImageBuffer shade_rgb(4, 4, 3, 0.8f);

  DecompositionReport rep = validate_decomposition(image, albedo, shade_rgb);
  CHECK(rep.max_err == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(rep.pass);

  ImageBuffer shade_gray(4, 4, 1, 0.8f);
  rep = validate_decomposition(image, albedo, shade_gray);
  CHECK(rep.pass);  // grayscale shade multiplies every channel

  ImageBuffer same = albedo;
  ImageBuffer half(4, 4, 1, 0.5f);
  rep = validate_decomposition(same, albedo, half);
  CHECK_FALSE(rep.pass);
  CHECK(rep.max_err == doctest::Approx(0.25).epsilon(1e-6));  // |0.5 - 0.5*0.5|
  CHECK(rep.mean_err == doctest::Approx(0.25).epsilon(1e-6));

  ImageBuffer wrong(3, 4, 3, 0.4f);
  CHECK_THROWS_WITH_AS(validate_decomposition(wrong, albedo, shade_gray),
                       doctest::Contains("dimensions"), std::runtime_error);
  ImageBuffer gray_img(4, 4, 1, 0.4f);
  CHECK_THROWS_AS(validate_decomposition(gray_img, albedo, shade_gray), std::runtime_error);
}

namespace {

// Writes a complete little dataset: per-view image plus optional maps and a
// manifest referencing them with relative paths.
SceneManifest write_dataset(const fs::path& dir, int n_views, int input_view,
                            bool with_normals) {
  SceneManifest m;
  m.scene = "toy";
  m.root = dir;
  const int w = 4, h = 4;
  for (int i = 0; i < n_views; ++i) {
    double ang = 2.0 * M_PI * i / n_views;
    Camera cam = test_camera(w, h, {2.5 * std::sin(ang), 0.3, -2.5 * std::cos(ang)});

    ViewRecord rec;
    rec.camera = cam;
    rec.is_input = (i == input_view);
    std::string stem = "v" + std::to_string(i);
    rec.image = stem + "_image.png";
    rec.albedo = stem + "_albedo.png";
    rec.shade = stem + "_shade.nfm";
    rec.mask = stem + "_mask.png";
    write_flat_png(dir / rec.image, w, h, 3, 0.4f);
    write_flat_png(dir / rec.albedo, w, h, 3, 0.5f);
    save_nfm((dir / rec.shade).string(), ImageBuffer(w, h, 1, 0.8f));
    write_flat_png(dir / rec.mask, w, h, 1, 1.0f);
    if (with_normals) {
      rec.normal = stem + "_normal.png";
      ImageBuffer nrm(w, h, 3);
      for (std::size_t px = 0; px < nrm.pixel_count(); ++px) {
        nrm.data[px * 3 + 0] = 0.5f;
        nrm.data[px * 3 + 1] = 0.5f;
        nrm.data[px * 3 + 2] = 0.0f;  // encodes (0,0,-1), towards the camera
      }
      save_png((dir / rec.normal).string(), nrm);
    }
    m.views.push_back(rec);
  }
  save_manifest((dir / "scene.json").string(), m);
  return m;
}

}  // namespace

TEST_CASE("manifest roundtrip: 17 views load back with exactly one input") {
  fs::path dir = make_tmp_dir("man_ok");
  write_dataset(dir, 17, 5, true);

  SceneManifest m = load_manifest((dir / "scene.json").string());
  CHECK(m.scene == "toy");
  REQUIRE(m.views.size() == 17);
  CHECK(m.input_index == 5);
  int inputs = 0;
  for (const ViewRecord& v : m.views) inputs += v.is_input ? 1 : 0;
  CHECK(inputs == 1);
  CHECK(m.warnings.empty());
  CHECK(m.views[3].camera.width == 4);
  CHECK(std::abs(m.views[3].camera.position().norm() -
                 std::sqrt(2.5 * 2.5 + 0.3 * 0.3)) < 1e-9);

  // purity: loading the same file again yields the identical structure
  SceneManifest again = load_manifest((dir / "scene.json").string());
  REQUIRE(again.views.size() == m.views.size());
  for (std::size_t i = 0; i < m.views.size(); ++i) {
    CHECK(again.views[i].image == m.views[i].image);
    CHECK(again.views[i].is_input == m.views[i].is_input);
    CHECK((again.views[i].camera.c2w - m.views[i].camera.c2w).norm() == 0.0);
  }
}

TEST_CASE("manifest without normal maps loads with warnings, not errors") {
  fs::path dir = make_tmp_dir("man_warn");
  write_dataset(dir, 3, 0, false);

  SceneManifest m = load_manifest((dir / "scene.json").string());
  CHECK(m.views.size() == 3);
  REQUIRE(m.warnings.size() == 3);
  CHECK(m.warnings[0].find("normal") != std::string::npos);
  CHECK_FALSE(m.views[0].has_normal());
  CHECK(m.views[0].has_albedo());
}

TEST_CASE("manifest rejects zero or multiple input flags and tiny view counts") {
  fs::path dir = make_tmp_dir("man_flags");

  write_dataset(dir, 4, 1, false);
  SceneManifest m = load_manifest((dir / "scene.json").string());
  m.views[3].is_input = true;  // second input
  save_manifest((dir / "two.json").string(), m);
  CHECK_THROWS_WITH_AS(load_manifest((dir / "two.json").string()),
                       doctest::Contains("multiple"), std::runtime_error);

  m.views[1].is_input = false;
  m.views[3].is_input = false;
  save_manifest((dir / "zero.json").string(), m);
  CHECK_THROWS_WITH_AS(load_manifest((dir / "zero.json").string()),
                       doctest::Contains("is_input"), std::runtime_error);

  SceneManifest solo = m;
  solo.views.resize(1);
  solo.views[0].is_input = true;
  save_manifest((dir / "solo.json").string(), solo);
  CHECK_THROWS_WITH_AS(load_manifest((dir / "solo.json").string()),
                       doctest::Contains("2 views"), std::runtime_error);
}

TEST_CASE("manifest errors carry the offending path") {
  fs::path dir = make_tmp_dir("man_err");
  SceneManifest m = write_dataset(dir, 3, 0, false);

  // dangling reference
  SceneManifest dangling = m;
  dangling.views[2].image = "missing.png";
  save_manifest((dir / "dangling.json").string(), dangling);
  CHECK_THROWS_WITH_AS(load_manifest((dir / "dangling.json").string()),
                       doctest::Contains("missing.png"), std::runtime_error);

  // camera dimensions disagree with the file on disk
  SceneManifest wrong = m;
  wrong.views[1].camera.width = 8;
  wrong.views[1].camera.cx = 4.0;
  save_manifest((dir / "dims.json").string(), wrong);
  CHECK_THROWS_WITH_AS(load_manifest((dir / "dims.json").string()),
                       doctest::Contains("view 1"), std::runtime_error);

  // broken rotation block
  SceneManifest crooked = m;
  crooked.views[0].camera.c2w(0, 0) = 3.0;
  save_manifest((dir / "rot.json").string(), crooked);
  CHECK_THROWS_WITH_AS(load_manifest((dir / "rot.json").string()),
                       doctest::Contains("view 0"), std::runtime_error);

  // malformed json text
  std::ofstream bad(dir / "bad.json");
  bad << "{\"scene\": \"x\", \"views\": [";
  bad.close();
  CHECK_THROWS_WITH_AS(load_manifest((dir / "bad.json").string()),
                       doctest::Contains("parse"), std::runtime_error);

  CHECK_THROWS_AS(load_manifest((dir / "nonexistent.json").string()), std::runtime_error);
}

TEST_CASE("normal_to_world matches the camera rotation and preserves length") {
  // identity rotation leaves the map unchanged
  NormalMap map;
  map.width = 2;
  map.height = 1;
  map.space = NormalSpace::kCamera;
  map.n = {0, 0, 1, 0.6f, 0.8f, 0};

  Camera ident;
  ident.fx = ident.fy = 10;
  ident.width = ident.height = 2;
  ident.cx = ident.cy = 1;
  ident.c2w = Eigen::Matrix4d::Identity();
  NormalMap same = normal_to_world(map, ident);
  CHECK(same.space == NormalSpace::kWorld);
  for (std::size_t i = 0; i < map.n.size(); ++i)
    CHECK(same.n[i] == doctest::Approx(map.n[i]).epsilon(1e-12));

  // 90 degree yaw about +y: camera +z axis lands on the rotation's third column
  Camera yaw = ident;
  yaw.c2w.setZero();
  yaw.c2w(0, 2) = 1;   // z_cam -> +x_world
  yaw.c2w(1, 1) = 1;
  yaw.c2w(2, 0) = -1;  // x_cam -> -z_world
  yaw.c2w(3, 3) = 1;
  NormalMap turned = normal_to_world(map, yaw);
  CHECK(turned.at(0, 0)[0] == doctest::Approx(1.0));
  CHECK(turned.at(0, 0)[1] == doctest::Approx(0.0));
  CHECK(turned.at(0, 0)[2] == doctest::Approx(0.0));

  // isometry under an arbitrary orthonormal camera
  Camera cam = test_camera(4, 4, {1.3, -0.7, 2.1});
  NormalMap big;
  big.width = 16;
  big.height = 1;
  big.space = NormalSpace::kCamera;
  big.n.resize(48);
  Prng rng(3);
  for (int i = 0; i < 16; ++i) {
    double v[3], len = 0;
    for (double& x : v) x = rng.normal();
    for (double x : v) len += x * x;
    len = std::sqrt(std::max(len, 1e-12));
    for (int c = 0; c < 3; ++c) big.n[i * 3 + c] = static_cast<float>(v[c] / len);
  }
  NormalMap rotated = normal_to_world(big, cam);
  for (int i = 0; i < 16; ++i) {
    double len = 0;
    for (int c = 0; c < 3; ++c) len += rotated.n[i * 3 + c] * rotated.n[i * 3 + c];
    CHECK(std::abs(std::sqrt(len) - 1.0) < 1e-5);
  }

  // double transformation is rejected: the map is already in world space
  CHECK_THROWS_WITH_AS(normal_to_world(rotated, cam), doctest::Contains("camera space"),
                       std::runtime_error);
}

TEST_CASE("load_view_data pulls pixels and produces world-space normals") {
  fs::path dir = make_tmp_dir("viewdata");
  write_dataset(dir, 3, 0, true);
  SceneManifest m = load_manifest((dir / "scene.json").string());

  ViewData d = load_view_data(m, 1);
  CHECK(d.image.width == 4);
  CHECK(d.image.at(2, 2, 0) == doctest::Approx(0.4).epsilon(1e-2));
  REQUIRE(d.albedo.has_value());
  REQUIRE(d.shade.has_value());
  REQUIRE(d.mask.has_value());
  REQUIRE(d.normal.has_value());
  CHECK(d.normal->space == NormalSpace::kWorld);

  // the stored map encodes (0,0,-1) in camera space: a surface facing the
  // camera. In world space that is the camera's backward axis, i.e. -R(:,2).
  Eigen::Matrix3d r = m.views[1].camera.rotation();
  Eigen::Vector3d expect = r * Eigen::Vector3d(0, 0, -1);
  for (int c = 0; c < 3; ++c)
    CHECK(d.normal->at(1, 1)[c] == doctest::Approx(expect[c]).epsilon(2e-2));

  CHECK_THROWS_WITH_AS(load_view_data(m, 99), doctest::Contains("out of range"),
                       std::runtime_error);

  // decomposition relation holds for the flat test data
  DecompositionReport rep = validate_decomposition(d.image, *d.albedo, *d.shade);
  CHECK(rep.pass);
}
