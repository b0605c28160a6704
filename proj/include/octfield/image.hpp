#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <stdexcept>
#include <string>
#include <vector>

#include "octfield/geometry.hpp"

namespace octfield {

// RGB image with values nominally in [0,1], row-major from the top-left.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<Vec3> px;

  Image() = default;
  Image(int w, int h, Vec3 fill = {}) : width(w), height(h), px(size_t(w) * h, fill) {}

  Vec3& at(int r, int c) { return px[size_t(r) * width + c]; }
  const Vec3& at(int r, int c) const { return px[size_t(r) * width + c]; }
  size_t pixel_count() const { return px.size(); }
};

struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> depth;

  DepthImage() = default;
  DepthImage(int w, int h) : width(w), height(h), depth(size_t(w) * h, 0.0) {}

  double& at(int r, int c) { return depth[size_t(r) * width + c]; }
  double at(int r, int c) const { return depth[size_t(r) * width + c]; }
};

// Canonical file name of the i-th view image in a dataset directory.
inline std::string view_image_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "view_%03d.ppm", index);
  return buf;
}

inline uint8_t quantize8(double v) {
  double c = std::min(1.0, std::max(0.0, v));
  return static_cast<uint8_t>(std::floor(c * 255.0 + 0.5));
}

// Binary PPM (P6, maxval 255), linear values, no gamma.
inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(size_t(img.width) * 3);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      const Vec3& p = img.at(r, c);
      row[size_t(c) * 3 + 0] = quantize8(p.x);
      row[size_t(c) * 3 + 1] = quantize8(p.y);
      row[size_t(c) * 3 + 2] = quantize8(p.z);
    }
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

namespace detail {
inline int read_pnm_int(std::istream& in, const std::string& path) {
  // Skips whitespace and '#' comments, as the format allows.
  int ch = in.get();
  while (ch != EOF && (std::isspace(ch) || ch == '#')) {
    if (ch == '#')
      while (ch != EOF && ch != '\n') ch = in.get();
    ch = in.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw std::runtime_error(path + ": malformed PNM header");
  int value = 0;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    ch = in.get();
  }
  return value;
}
}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  char m0 = 0, m1 = 0;
  in.get(m0).get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error(path + ": not a binary PPM (P6)");
  int w = detail::read_pnm_int(in, path);
  int h = detail::read_pnm_int(in, path);
  int maxval = detail::read_pnm_int(in, path);
  if (maxval != 255) throw std::runtime_error(path + ": unsupported maxval (want 255)");
  // Exactly one whitespace byte separates the header from pixel data; the
  // header scanner above already consumed it.
  Image img(w, h);
  std::vector<uint8_t> raw(size_t(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error(path + ": truncated pixel data");
  for (size_t i = 0; i < size_t(w) * h; ++i)
    img.px[i] = Vec3{raw[i * 3] / 255.0, raw[i * 3 + 1] / 255.0, raw[i * 3 + 2] / 255.0};
  return img;
}

// 16-bit grayscale PGM (P5, maxval 65535, big-endian sample order per the
// format). Depths are scaled by 1/depth_scale and clamped to [0,1].
inline void write_pgm16(const std::string& path, const DepthImage& img, double depth_scale) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << img.width << " " << img.height << "\n65535\n";
  for (double d : img.depth) {
    double v = depth_scale > 0.0 ? d / depth_scale : 0.0;
    v = std::min(1.0, std::max(0.0, v));
    uint16_t q = static_cast<uint16_t>(std::floor(v * 65535.0 + 0.5));
    uint8_t bytes[2] = {static_cast<uint8_t>(q >> 8), static_cast<uint8_t>(q & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 2);
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

}  // namespace octfield
