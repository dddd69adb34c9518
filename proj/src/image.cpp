#include "mvsdf/image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace mvsdf {
namespace {

static_assert(std::endian::native == std::endian::little,
              "raw float codec assumes a little-endian host");

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string lower_ext(const std::string& path) {
  auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

void check_channels(const std::string& path, int channels) {
  if (channels != 1 && channels != 3)
    fail(path, "expected 1 or 3 channels, got " + std::to_string(channels));
}

uint32_t read_u32le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_u32le(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

ImageBuffer::ImageBuffer(int w, int h, int c, float fill)
    : width(w), height(h), channels(c),
      data(static_cast<std::size_t>(w) * h * c, fill) {
  if (w <= 0 || h <= 0) throw std::runtime_error("image dimensions must be positive");
  check_channels("image", c);
}

float ImageBuffer::at(int x, int y, int c) const {
  return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
}

float& ImageBuffer::at(int x, int y, int c) {
  return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
}

ImageBuffer load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(path, "cannot open for reading");

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    fail(path, "not a png file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "png reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(path, "png info allocation failed");
  }

  std::vector<unsigned char> bytes;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  int channels = 0;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "png decode error");
  }

  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  int bit_depth = 0, color_type = 0;
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  channels = png_get_channels(png, info);
  if (channels == 2) {  // gray + alpha after partial stripping should not occur, guard anyway
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "unsupported channel layout");
  }
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "expected 1 or 3 channels, got " + std::to_string(channels));
  }

  std::size_t stride = png_get_rowbytes(png, info);
  bytes.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = bytes.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  ImageBuffer img(static_cast<int>(w), static_cast<int>(h), channels);
  const float scale = 1.0f / 255.0f;
  for (png_uint_32 y = 0; y < h; ++y) {
    const unsigned char* row = bytes.data() + y * stride;
    float* dst = img.data.data() + static_cast<std::size_t>(y) * w * channels;
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * channels; ++i)
      dst[i] = static_cast<float>(row[i]) * scale;
  }
  return img;
}

void save_png(const std::string& path, const ImageBuffer& img) {
  check_channels(path, img.channels);
  if (img.width <= 0 || img.height <= 0) fail(path, "image dimensions must be positive");
  if (img.data.size() != img.pixel_count() * img.channels)
    fail(path, "image data size does not match dimensions");

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(path, "cannot open for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(path, "png info allocation failed");
  }

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(path, "png encode error");
  }

  png_init_io(png, fp.get());
  int color_type = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, img.width, img.height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    const float* src = img.data.data() + static_cast<std::size_t>(y) * img.width * img.channels;
    for (std::size_t i = 0; i < row.size(); ++i) {
      float v = std::clamp(src[i], 0.0f, 1.0f);
      row[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageBuffer load_nfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "NFM1", 4) != 0) fail(path, "bad float map magic");

  uint32_t w = read_u32le(in), h = read_u32le(in), c = read_u32le(in);
  if (!in) fail(path, "truncated float map header");
  if (w == 0 || h == 0) fail(path, "image dimensions must be positive");
  check_channels(path, static_cast<int>(c));
  if (static_cast<uint64_t>(w) * h * c > (1ull << 30))
    fail(path, "float map too large");

  ImageBuffer img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!in) fail(path, "truncated float map payload");
  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

void save_nfm(const std::string& path, const ImageBuffer& img) {
  check_channels(path, img.channels);
  if (img.width <= 0 || img.height <= 0) fail(path, "image dimensions must be positive");
  if (img.data.size() != img.pixel_count() * img.channels)
    fail(path, "image data size does not match dimensions");

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open for writing");
  out.write("NFM1", 4);
  write_u32le(out, static_cast<uint32_t>(img.width));
  write_u32le(out, static_cast<uint32_t>(img.height));
  write_u32le(out, static_cast<uint32_t>(img.channels));
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!out) fail(path, "write failed");
}

ImageBuffer load_image(const std::string& path) {
  std::string ext = lower_ext(path);
  if (ext == "png") return load_png(path);
  if (ext == "nfm") return load_nfm(path);
  fail(path, "unsupported image extension '" + ext + "'");
}

void save_image(const std::string& path, const ImageBuffer& img) {
  std::string ext = lower_ext(path);
  if (ext == "png") return save_png(path, img);
  if (ext == "nfm") return save_nfm(path, img);
  fail(path, "unsupported image extension '" + ext + "'");
}

ImageSize probe_image_size(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");

  unsigned char head[4];
  in.read(reinterpret_cast<char*>(head), 4);
  if (!in) fail(path, "file too short");

  if (std::memcmp(head, "NFM1", 4) == 0) {
    uint32_t w = read_u32le(in), h = read_u32le(in);
    if (!in) fail(path, "truncated float map header");
    return {static_cast<int>(w), static_cast<int>(h)};
  }

  static const unsigned char png_sig[4] = {0x89, 'P', 'N', 'G'};
  if (std::memcmp(head, png_sig, 4) == 0) {
    // IHDR width/height live at byte offsets 16 and 20, big-endian.
    in.seekg(16);
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) fail(path, "truncated png header");
    auto be32 = [](const unsigned char* p) {
      return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
             (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
    };
    return {static_cast<int>(be32(b)), static_cast<int>(be32(b + 4))};
  }
  fail(path, "unrecognized image format");
}

NormalMap decode_normal_map(const ImageBuffer& img, NormalSpace space) {
  if (img.channels != 3)
    throw std::runtime_error("normal map must have 3 channels, got " +
                             std::to_string(img.channels));
  NormalMap map;
  map.width = img.width;
  map.height = img.height;
  map.space = space;
  map.n.resize(img.data.size());
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    float v[3];
    for (int c = 0; c < 3; ++c) v[c] = img.data[i * 3 + c] * 2.0f - 1.0f;
    float len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (len < 1e-6f) {
      map.n[i * 3 + 0] = 0.0f;
      map.n[i * 3 + 1] = 0.0f;
      map.n[i * 3 + 2] = 1.0f;
    } else {
      for (int c = 0; c < 3; ++c) map.n[i * 3 + c] = v[c] / len;
    }
  }
  return map;
}

NormalMap load_normal_map(const std::string& path, NormalSpace space,
                          const ImageBuffer* mask) {
  ImageBuffer img = load_image(path);
  if (img.channels != 3) fail(path, "normal map must have 3 channels");
  if (mask && (mask->width != img.width || mask->height != img.height))
    fail(path, "mask dimensions do not match normal map");

  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (mask && mask->at(x, y, 0) <= 0.5f) continue;
      float v[3];
      for (int c = 0; c < 3; ++c) v[c] = img.at(x, y, c) * 2.0f - 1.0f;
      float len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      if (len < 0.99f || len > 1.01f)
        fail(path, "normal at (" + std::to_string(x) + "," + std::to_string(y) +
                       ") has length " + std::to_string(len) +
                       ", expected a unit vector");
    }
  }
  return decode_normal_map(img, space);
}

ImageBuffer encode_normal_map(const NormalMap& map) {
  ImageBuffer img(map.width, map.height, 3);
  for (std::size_t i = 0; i < map.n.size(); ++i)
    img.data[i] = std::clamp((map.n[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
  return img;
}

DecompositionReport validate_decomposition(const ImageBuffer& image,
                                           const ImageBuffer& albedo,
                                           const ImageBuffer& shade, double tol) {
  if (image.width != albedo.width || image.height != albedo.height ||
      image.width != shade.width || image.height != shade.height)
    throw std::runtime_error("decomposition check: image dimensions differ");
  if (image.channels != albedo.channels)
    throw std::runtime_error("decomposition check: image and albedo channel counts differ");
  if (shade.channels != 1 && shade.channels != image.channels)
    throw std::runtime_error("decomposition check: shade must be grayscale or match image");

  DecompositionReport rep;
  double total = 0.0;
  std::size_t count = image.pixel_count() * image.channels;
  for (std::size_t i = 0; i < image.pixel_count(); ++i) {
    for (int c = 0; c < image.channels; ++c) {
      float s = shade.channels == 1 ? shade.data[i] : shade.data[i * shade.channels + c];
      double err = std::abs(static_cast<double>(image.data[i * image.channels + c]) -
                            static_cast<double>(albedo.data[i * albedo.channels + c]) * s);
      rep.max_err = std::max(rep.max_err, err);
      total += err;
    }
  }
  rep.mean_err = count ? total / static_cast<double>(count) : 0.0;
  rep.pass = rep.max_err <= tol;
  return rep;
}

}  // namespace mvsdf
