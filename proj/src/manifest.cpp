#include "mvsdf/manifest.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace mvsdf {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

double require_number(const json& obj, const char* key, const std::string& path,
                      const std::string& where) {
  if (!obj.contains(key) || !obj[key].is_number())
    fail(path, where + ": missing numeric field '" + key + "'");
  return obj[key].get<double>();
}

std::string optional_path(const json& view, const char* key) {
  if (!view.contains(key) || view[key].is_null()) return "";
  if (!view[key].is_string())
    throw std::runtime_error(std::string("field '") + key + "' must be a string path");
  return view[key].get<std::string>();
}

Camera parse_camera(const json& cam, const std::string& path, const std::string& where) {
  Camera c;
  c.fx = require_number(cam, "fx", path, where);
  c.fy = require_number(cam, "fy", path, where);
  c.cx = require_number(cam, "cx", path, where);
  c.cy = require_number(cam, "cy", path, where);
  c.width = static_cast<int>(require_number(cam, "width", path, where));
  c.height = static_cast<int>(require_number(cam, "height", path, where));
  if (c.width <= 0 || c.height <= 0) fail(path, where + ": camera dimensions must be positive");
  if (c.fx <= 0.0 || c.fy <= 0.0) fail(path, where + ": focal lengths must be positive");

  if (!cam.contains("c2w") || !cam["c2w"].is_array() || cam["c2w"].size() != 16)
    fail(path, where + ": 'c2w' must be an array of 16 numbers");
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const json& v = cam["c2w"][i * 4 + j];
      if (!v.is_number()) fail(path, where + ": 'c2w' must be an array of 16 numbers");
      c.c2w(i, j) = v.get<double>();
    }
  try {
    c.validate();
  } catch (const std::exception& e) {
    fail(path, where + ": " + e.what());
  }
  return c;
}

void check_map_size(const SceneManifest& m, const std::string& rel, const Camera& cam,
                    const std::string& path, const std::string& where) {
  std::filesystem::path full = m.resolve(rel);
  if (!std::filesystem::exists(full))
    fail(path, where + ": referenced file not found: " + full.string());
  ImageSize sz = probe_image_size(full.string());
  if (sz.width != cam.width || sz.height != cam.height)
    fail(path, where + ": " + full.string() + " is " + std::to_string(sz.width) + "x" +
                   std::to_string(sz.height) + " but the camera declares " +
                   std::to_string(cam.width) + "x" + std::to_string(cam.height));
}

}  // namespace

SceneManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(path, "cannot open manifest");

  json root;
  try {
    in >> root;
  } catch (const std::exception& e) {
    fail(path, std::string("manifest parse error: ") + e.what());
  }

  if (!root.is_object() || !root.contains("scene") || !root["scene"].is_string())
    fail(path, "manifest must be an object with a string 'scene' field");
  if (!root.contains("views") || !root["views"].is_array())
    fail(path, "manifest must contain a 'views' array");

  SceneManifest m;
  m.scene = root["scene"].get<std::string>();
  m.root = std::filesystem::path(path).parent_path();
  if (m.root.empty()) m.root = ".";

  const json& views = root["views"];
  if (views.size() < 2)
    fail(path, "need at least 2 views, got " + std::to_string(views.size()));

  static const std::set<std::string> known_view_keys = {
      "image", "albedo", "shade", "normal", "mask", "camera", "is_input"};

  for (std::size_t i = 0; i < views.size(); ++i) {
    const json& v = views[i];
    std::string where = "view " + std::to_string(i);
    if (!v.is_object()) fail(path, where + ": expected an object");
    for (auto it = v.begin(); it != v.end(); ++it)
      if (!known_view_keys.count(it.key()))
        m.warnings.push_back(where + ": ignoring unknown field '" + it.key() + "'");

    ViewRecord rec;
    if (!v.contains("image") || !v["image"].is_string())
      fail(path, where + ": missing string field 'image'");
    rec.image = v["image"].get<std::string>();
    try {
      rec.albedo = optional_path(v, "albedo");
      rec.shade = optional_path(v, "shade");
      rec.normal = optional_path(v, "normal");
      rec.mask = optional_path(v, "mask");
    } catch (const std::exception& e) {
      fail(path, where + ": " + e.what());
    }

    if (!v.contains("camera") || !v["camera"].is_object())
      fail(path, where + ": missing 'camera' object");
    rec.camera = parse_camera(v["camera"], path, where);

    if (!v.contains("is_input") || !v["is_input"].is_boolean())
      fail(path, where + ": missing boolean field 'is_input'");
    rec.is_input = v["is_input"].get<bool>();

    check_map_size(m, rec.image, rec.camera, path, where);
    const std::pair<const char*, const std::string*> maps[] = {
        {"albedo", &rec.albedo}, {"shade", &rec.shade},
        {"normal", &rec.normal}, {"mask", &rec.mask}};
    for (auto [key, rel] : maps) {
      if (rel->empty())
        m.warnings.push_back(where + ": no " + key + " map, dependent supervision disabled");
      else
        check_map_size(m, *rel, rec.camera, path, where);
    }

    if (rec.is_input) {
      if (m.input_index >= 0)
        fail(path, "multiple views flagged is_input (" + std::to_string(m.input_index) +
                       " and " + std::to_string(i) + "), expected exactly one");
      m.input_index = static_cast<int>(i);
    }
    m.views.push_back(std::move(rec));
  }

  if (m.input_index < 0) fail(path, "no view flagged is_input, expected exactly one");
  return m;
}

void save_manifest(const std::string& path, const SceneManifest& manifest) {
  json root;
  root["scene"] = manifest.scene;
  root["views"] = json::array();
  for (const ViewRecord& v : manifest.views) {
    json jv;
    jv["image"] = v.image;
    if (v.has_albedo()) jv["albedo"] = v.albedo;
    if (v.has_shade()) jv["shade"] = v.shade;
    if (v.has_normal()) jv["normal"] = v.normal;
    if (v.has_mask()) jv["mask"] = v.mask;
    json cam;
    cam["fx"] = v.camera.fx;
    cam["fy"] = v.camera.fy;
    cam["cx"] = v.camera.cx;
    cam["cy"] = v.camera.cy;
    cam["width"] = v.camera.width;
    cam["height"] = v.camera.height;
    json c2w = json::array();
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) c2w.push_back(v.camera.c2w(i, j));
    cam["c2w"] = c2w;
    jv["camera"] = cam;
    jv["is_input"] = v.is_input;
    root["views"].push_back(jv);
  }

  std::ofstream out(path);
  if (!out) fail(path, "cannot open manifest for writing");
  out << root.dump(2) << "\n";
  if (!out) fail(path, "manifest write failed");
}

NormalMap normal_to_world(const NormalMap& nmap, const Camera& camera) {
  if (nmap.space != NormalSpace::kCamera)
    throw std::runtime_error("normal_to_world: map is not in camera space");
  camera.validate();
  Eigen::Matrix3d r = camera.rotation();

  NormalMap out = nmap;
  out.space = NormalSpace::kWorld;
  for (std::size_t i = 0; i * 3 < out.n.size(); ++i) {
    Eigen::Vector3d n(nmap.n[i * 3 + 0], nmap.n[i * 3 + 1], nmap.n[i * 3 + 2]);
    Eigen::Vector3d w = r * n;
    out.n[i * 3 + 0] = static_cast<float>(w.x());
    out.n[i * 3 + 1] = static_cast<float>(w.y());
    out.n[i * 3 + 2] = static_cast<float>(w.z());
  }
  return out;
}

ViewData load_view_data(const SceneManifest& manifest, std::size_t index) {
  if (index >= manifest.views.size())
    throw std::runtime_error("view index " + std::to_string(index) + " out of range [0, " +
                             std::to_string(manifest.views.size()) + ")");
  const ViewRecord& rec = manifest.views[index];

  ViewData data;
  data.image = load_image(manifest.resolve(rec.image).string());
  if (rec.has_mask()) data.mask = load_image(manifest.resolve(rec.mask).string());
  if (rec.has_albedo()) data.albedo = load_image(manifest.resolve(rec.albedo).string());
  if (rec.has_shade()) data.shade = load_image(manifest.resolve(rec.shade).string());
  if (rec.has_normal()) {
    const ImageBuffer* mask = data.mask ? &*data.mask : nullptr;
    NormalMap cam_space =
        load_normal_map(manifest.resolve(rec.normal).string(), NormalSpace::kCamera, mask);
    data.normal = normal_to_world(cam_space, rec.camera);
  }
  return data;
}

}  // namespace mvsdf
