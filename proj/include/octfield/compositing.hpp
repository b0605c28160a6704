#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "octfield/image.hpp"
#include "octfield/sampling.hpp"

namespace octfield {

// How per-sample opacity turns into pixel weights:
//   Surface:    w_i = T_i * (1 - e^{-sigma_i s_i}), T_i = e^{-sum_{j<i} sigma_j s_j}
//               (front-to-back alpha blending; order matters)
//   Tomography: w_i = 1 - e^{-sigma_i s_i}  (order-free integral accumulation)
enum class WeightModel { Surface, Tomography };

struct CompositeResult {
  Vec3 pixel{0.0, 0.0, 0.0};
  std::vector<double> weights;  // one per sample, padding included (zeros)
  std::vector<double> transmittance;  // Surface only: T_i per sample
  double final_transmittance = 1.0;   // T_{N+1}: what reaches the background
  double expected_depth = 0.0;        // sum w_i z_i / sum w_i, 0 on vacuum
};

namespace detail {

inline void require_sorted(const RayGroup& group) {
  for (size_t i = 1; i < group.samples.size(); ++i)
    if (group.samples[i].z_s < group.samples[i - 1].z_s)
      throw std::runtime_error("composite: ray " + std::to_string(group.ray_id) +
                               " is not sorted front-to-back");
}

}  // namespace detail

// Weighted color sum over one ray. Surface blending is order-dependent and
// insists on front-to-back depth order; tomography is an order-free sum. An
// optional constant background is blended in behind the scene with the
// leftover transmittance (Surface only).
inline CompositeResult composite(const RayGroup& group, WeightModel model,
                                 const Vec3* background = nullptr) {
  if (model == WeightModel::Surface) detail::require_sorted(group);
  const size_t n = group.samples.size();
  CompositeResult out;
  out.weights.assign(n, 0.0);
  if (model == WeightModel::Surface) out.transmittance.assign(n, 0.0);

  double tau = 0.0;        // accumulated optical depth sum_{j<i} sigma_j s_j
  double weight_sum = 0.0;
  double depth_sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const SampleRecord& s = group.samples[i];
    double own = s.sigma * s.seg_weight;
    double w;
    if (model == WeightModel::Surface) {
      double t_i = std::exp(-tau);
      out.transmittance[i] = t_i;
      w = t_i * (1.0 - std::exp(-own));
      tau += own;
    } else {
      w = 1.0 - std::exp(-own);
    }
    out.weights[i] = w;
    out.pixel = out.pixel + s.color * w;
    weight_sum += w;
    depth_sum += w * s.z_s;
  }
  out.final_transmittance = model == WeightModel::Surface ? std::exp(-tau) : 1.0;
  if (model == WeightModel::Surface && background != nullptr)
    out.pixel = out.pixel + *background * out.final_transmittance;
  out.expected_depth = weight_sum > 0.0 ? depth_sum / weight_sum : 0.0;
  return out;
}

// Per-sample gradients of a scalar loss through the composite:
//   dL/dc_i = w_i * dL/dpixel
//   Surface: dL/dsigma_i = s_i * [ T_{i+1} c_i - sum_{j>i} w_j c_j ] . dL/dpixel
//            (own-opacity gain minus what deeper samples lose), background
//            counts as one more "sample" with color bg and weight T_{N+1}
//   Tomography: dL/dsigma_i = s_i e^{-sigma_i s_i} c_i . dL/dpixel
struct CompositeGrad {
  std::vector<double> dsigma;
  std::vector<Vec3> dcolor;
};

inline CompositeGrad composite_backward(const RayGroup& group, WeightModel model,
                                        const CompositeResult& fwd, const Vec3& dpixel,
                                        const Vec3* background = nullptr) {
  const size_t n = group.samples.size();
  CompositeGrad out;
  out.dsigma.assign(n, 0.0);
  out.dcolor.assign(n, Vec3{0.0, 0.0, 0.0});

  if (model == WeightModel::Tomography) {
    for (size_t i = 0; i < n; ++i) {
      const SampleRecord& s = group.samples[i];
      out.dcolor[i] = dpixel * fwd.weights[i];
      double dw = s.seg_weight * std::exp(-s.sigma * s.seg_weight);
      out.dsigma[i] = dw * s.color.dot(dpixel);
    }
    return out;
  }

  // Surface: suffix sums of w_j c_j from the back, background included.
  Vec3 downstream{0.0, 0.0, 0.0};
  if (background != nullptr) downstream = *background * fwd.final_transmittance;
  for (size_t k = n; k > 0; --k) {
    size_t i = k - 1;
    const SampleRecord& s = group.samples[i];
    out.dcolor[i] = dpixel * fwd.weights[i];
    // T_{i+1} = T_i * e^{-sigma_i s_i}
    double t_next = fwd.transmittance[i] * std::exp(-s.sigma * s.seg_weight);
    Vec3 dpix_dsigma = (s.color * t_next - downstream) * s.seg_weight;
    out.dsigma[i] = dpix_dsigma.dot(dpixel);
    downstream = downstream + s.color * fwd.weights[i];
  }
  return out;
}

// Drops samples whose transmittance already fell below the threshold; their
// contribution to the pixel is below the threshold in every channel. The
// group stays sorted, padding is recounted.
inline void cull_occluded(RayGroup& group, double t_threshold) {
  if (t_threshold <= 0.0) return;
  double tau = 0.0;
  size_t keep = group.samples.size();
  for (size_t i = 0; i < group.samples.size(); ++i) {
    if (std::exp(-tau) < t_threshold) {
      keep = i;
      break;
    }
    tau += group.samples[i].sigma * group.samples[i].seg_weight;
  }
  if (keep < group.samples.size()) {
    int removed = int(group.samples.size() - keep);
    group.samples.resize(keep);
    group.pad_count = std::max(0, group.pad_count - removed);
  }
}

// Mean squared error over all channels plus its gradient per pixel.
struct LossResult {
  double loss = 0.0;
  std::vector<Vec3> dpixels;  // row-major, dL/d(rendered pixel)
};

inline LossResult mse_loss(const std::vector<Vec3>& rendered,
                           const std::vector<Vec3>& reference) {
  if (rendered.size() != reference.size())
    throw std::invalid_argument("mse: pixel counts differ (" +
                                std::to_string(rendered.size()) + " vs " +
                                std::to_string(reference.size()) + ")");
  LossResult out;
  const size_t count = rendered.size();
  out.dpixels.assign(count, Vec3{0.0, 0.0, 0.0});
  if (count == 0) return out;
  const double norm = 1.0 / (3.0 * count);
  double acc = 0.0;
  for (size_t i = 0; i < count; ++i) {
    Vec3 d = rendered[i] - reference[i];
    acc += d.dot(d);
    out.dpixels[i] = d * (2.0 * norm);
  }
  out.loss = acc * norm;
  return out;
}

inline LossResult mse_loss(const Image& rendered, const Image& reference) {
  if (rendered.width != reference.width || rendered.height != reference.height)
    throw std::invalid_argument(
        "mse: image dimensions differ (" + std::to_string(rendered.width) + "x" +
        std::to_string(rendered.height) + " vs " + std::to_string(reference.width) + "x" +
        std::to_string(reference.height) + ")");
  return mse_loss(rendered.px, reference.px);
}

}  // namespace octfield
