#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mvsdf {

// Row-major float image. Values are kept inside [0, 1]; every loader clamps
// into that range, so out-of-range data must be rescaled before saving.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 = grayscale, 3 = rgb
  std::vector<float> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, float fill = 0.0f);

  float at(int x, int y, int c) const;
  float& at(int x, int y, int c);
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool same_shape(const ImageBuffer& other) const {
    return width == other.width && height == other.height && channels == other.channels;
  }
};

// 8-bit PNG codec. Palette and low-bit-depth files expand to 8-bit, 16-bit
// depth narrows to 8, alpha is dropped; result has 1 or 3 channels.
ImageBuffer load_png(const std::string& path);
void save_png(const std::string& path, const ImageBuffer& img);

// Raw float map: magic "NFM1", then u32le width/height/channels, then
// width*height*channels f32le row-major. Channels must be 1 or 3.
ImageBuffer load_nfm(const std::string& path);
void save_nfm(const std::string& path, const ImageBuffer& img);

// Dispatch on extension: .png or .nfm (case-insensitive).
ImageBuffer load_image(const std::string& path);
void save_image(const std::string& path, const ImageBuffer& img);

// Reads just the header and returns {width, height}. Works for both formats.
struct ImageSize {
  int width = 0;
  int height = 0;
};
ImageSize probe_image_size(const std::string& path);

enum class NormalSpace { kCamera, kWorld };

// Per-pixel unit vectors, row-major, 3 floats per pixel.
struct NormalMap {
  int width = 0;
  int height = 0;
  NormalSpace space = NormalSpace::kCamera;
  std::vector<float> n;

  const float* at(int x, int y) const {
    return n.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  float* at(int x, int y) {
    return n.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
};

// Maps stored [0,1] rgb to vectors via n = v*2 - 1 (the 8-bit pixel/127.5 - 1
// convention), then renormalizes. Degenerate pixels decode to (0, 0, 1).
NormalMap decode_normal_map(const ImageBuffer& img, NormalSpace space);

// Loads a 3-channel image and decodes it. Where mask is given, every pixel
// with mask > 0.5 must have pre-renormalization length in [0.99, 1.01];
// without a mask the check covers all pixels. Violations fail the load.
NormalMap load_normal_map(const std::string& path, NormalSpace space,
                          const ImageBuffer* mask = nullptr);

// Encodes v = (n + 1) / 2 for saving through the standard image codecs.
ImageBuffer encode_normal_map(const NormalMap& map);

struct DecompositionReport {
  double max_err = 0.0;
  double mean_err = 0.0;
  bool pass = false;
};

// Checks image == albedo * shade per pixel. Shade may be grayscale, in which
// case it multiplies every channel. Pass iff max_err <= tol.
DecompositionReport validate_decomposition(const ImageBuffer& image,
                                           const ImageBuffer& albedo,
                                           const ImageBuffer& shade,
                                           double tol = 2.0 / 255.0);

}  // namespace mvsdf
