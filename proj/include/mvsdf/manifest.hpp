#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mvsdf/camera.hpp"
#include "mvsdf/image.hpp"

namespace mvsdf {

// One dataset view. Optional map paths are empty when the manifest omits them;
// the loss terms they feed are then disabled for that view by the trainer.
struct ViewRecord {
  std::string image;
  std::string albedo;
  std::string shade;
  std::string normal;
  std::string mask;
  Camera camera;
  bool is_input = false;

  bool has_albedo() const { return !albedo.empty(); }
  bool has_shade() const { return !shade.empty(); }
  bool has_normal() const { return !normal.empty(); }
  bool has_mask() const { return !mask.empty(); }
};

struct SceneManifest {
  std::string scene;
  std::vector<ViewRecord> views;
  std::vector<std::string> warnings;  // absent optional maps, tolerated oddities
  int input_index = -1;
  std::filesystem::path root;  // directory the manifest lives in; paths resolve against it

  std::filesystem::path resolve(const std::string& rel) const {
    std::filesystem::path p(rel);
    return p.is_absolute() ? p : root / p;
  }
};

// Parses and validates a JSON manifest:
//   {"scene", "views":[{"image","albedo","shade","normal","mask",
//     "camera":{"fx","fy","cx","cy","width","height","c2w":[16]},"is_input"}]}
// Requires >= 2 views, exactly one is_input, resolvable paths, and image
// headers matching the camera's width/height. Errors carry the failing path.
SceneManifest load_manifest(const std::string& path);

// Writes the same schema; absent optional maps are omitted from the output.
void save_manifest(const std::string& path, const SceneManifest& manifest);

// Rotates a camera-space map into world space: n_world = R_c2w * n_camera.
// The rotation is orthonormal, so lengths survive within float rounding.
NormalMap normal_to_world(const NormalMap& nmap, const Camera& camera);

// Pixel data for one view, with the normal map already validated against the
// mask and rotated to world space.
struct ViewData {
  ImageBuffer image;
  std::optional<ImageBuffer> albedo;
  std::optional<ImageBuffer> shade;
  std::optional<ImageBuffer> mask;
  std::optional<NormalMap> normal;
};

ViewData load_view_data(const SceneManifest& manifest, std::size_t index);

}  // namespace mvsdf
