#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "octfield/image.hpp"

namespace octfield {

struct ImageMetrics {
  double psnr_db = 0.0;
  double ssim = 0.0;
};

// PSNR over all channels; identical images report the 99 dB cap so the value
// stays a plain number in CSV output.
inline double psnr_db(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("psnr: image dimensions differ (" +
                                std::to_string(a.width) + "x" + std::to_string(a.height) +
                                " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + ")");
  double acc = 0.0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    Vec3 d = a.px[i] - b.px[i];
    acc += d.dot(d);
  }
  double mse = a.px.empty() ? 0.0 : acc / (3.0 * static_cast<double>(a.px.size()));
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

namespace detail {

// 11-tap Gaussian, sigma 1.5, normalized.
inline const std::vector<double>& ssim_kernel() {
  static const std::vector<double> k = [] {
    std::vector<double> v(11);
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
      double x = i - 5.0;
      v[static_cast<size_t>(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
      sum += v[static_cast<size_t>(i)];
    }
    for (double& x : v) x /= sum;
    return v;
  }();
  return k;
}

// Separable Gaussian blur of a scalar field; borders use a cropped,
// renormalized kernel so edge statistics stay unbiased.
inline std::vector<double> ssim_blur(const std::vector<double>& src, int w, int h) {
  const auto& k = ssim_kernel();
  std::vector<double> tmp(src.size()), out(src.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double acc = 0.0, norm = 0.0;
      for (int t = -5; t <= 5; ++t) {
        int cc = c + t;
        if (cc < 0 || cc >= w) continue;
        double kv = k[static_cast<size_t>(t + 5)];
        acc += kv * src[static_cast<size_t>(r) * w + cc];
        norm += kv;
      }
      tmp[static_cast<size_t>(r) * w + c] = acc / norm;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double acc = 0.0, norm = 0.0;
      for (int t = -5; t <= 5; ++t) {
        int rr = r + t;
        if (rr < 0 || rr >= h) continue;
        double kv = k[static_cast<size_t>(t + 5)];
        acc += kv * tmp[static_cast<size_t>(rr) * w + c];
        norm += kv;
      }
      out[static_cast<size_t>(r) * w + c] = acc / norm;
    }
  return out;
}

}  // namespace detail

// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and the standard
// stabilizers C1=(0.01)^2, C2=(0.03)^2 for unit dynamic range, computed per
// channel and averaged.
inline double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("ssim: image dimensions differ (" +
                                std::to_string(a.width) + "x" + std::to_string(a.height) +
                                " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + ")");
  const int w = a.width, h = a.height;
  if (w == 0 || h == 0) throw std::invalid_argument("ssim: empty image");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const size_t n = a.px.size();
  double total = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (size_t i = 0; i < n; ++i) {
      double xv = a.px[i][ch], yv = b.px[i][ch];
      x[i] = xv;
      y[i] = yv;
      xx[i] = xv * xv;
      yy[i] = yv * yv;
      xy[i] = xv * yv;
    }
    auto mx = detail::ssim_blur(x, w, h);
    auto my = detail::ssim_blur(y, w, h);
    auto mxx = detail::ssim_blur(xx, w, h);
    auto myy = detail::ssim_blur(yy, w, h);
    auto mxy = detail::ssim_blur(xy, w, h);
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double vx = mxx[i] - mx[i] * mx[i];
      double vy = myy[i] - my[i] * my[i];
      double cov = mxy[i] - mx[i] * my[i];
      double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
      double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
      acc += num / den;
    }
    total += acc / static_cast<double>(n);
  }
  return total / 3.0;
}

inline ImageMetrics evaluate_images(const Image& rendered, const Image& reference) {
  return ImageMetrics{psnr_db(rendered, reference), ssim(rendered, reference)};
}

}  // namespace octfield
