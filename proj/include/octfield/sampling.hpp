#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "octfield/geometry.hpp"
#include "octfield/octree.hpp"
#include "octfield/rng.hpp"

namespace octfield {

// ---------------------------------------------------------------------------
// Sample records and ray groups

// One field sample on one ray. `z_s` is the parametric depth along the unit
// ray, `exit_z` the depth at which that ray leaves the sample's node (needed
// to close the last segment), and `seg_weight` the per-node segment length
// s_i used by both compositing and the depth CDFs.
struct SampleRecord {
  Vec3 position;
  NodeId node;
  uint32_t ray_id = 0;
  double z_s = 0.0;
  double seg_weight = 0.0;
  double exit_z = 0.0;
  double sigma = 0.0;
  Vec3 color{0.0, 0.0, 0.0};
  // Stable per-sample key for randomized activations: assigned when the
  // sample is created and carried through sorting, so a later re-evaluation
  // (for gradients) sees the exact same noise.
  uint64_t key = 0;
};

// Samples of one ray, sorted by depth. The trailing `pad_count` entries are
// padding (sigma = 0, seg_weight = 0) added to equalize group lengths; they
// never influence any computed value.
struct RayGroup {
  uint32_t ray_id = 0;
  std::vector<SampleRecord> samples;
  int pad_count = 0;

  int real_count() const { return static_cast<int>(samples.size()) - pad_count; }
};

// ---------------------------------------------------------------------------
// Stratified per-node grids (sampling stage one)

// n^3 points, one per lattice cell of the box: cell centers, or uniform
// within each cell when jittered. Iteration order is x-fastest.
inline std::vector<Vec3> stratified_node_samples(const Aabb& box, int n_per_axis,
                                                 bool jitter, Rng& rng) {
  if (n_per_axis < 1) throw std::invalid_argument("stratified grid: n_per_axis must be >= 1");
  const double inv = 1.0 / n_per_axis;
  Vec3 ext = box.extent();
  std::vector<Vec3> out;
  out.reserve(size_t(n_per_axis) * n_per_axis * n_per_axis);
  for (int iz = 0; iz < n_per_axis; ++iz)
    for (int iy = 0; iy < n_per_axis; ++iy)
      for (int ix = 0; ix < n_per_axis; ++ix) {
        double ux = jitter ? rng.uniform() : 0.5;
        double uy = jitter ? rng.uniform() : 0.5;
        double uz = jitter ? rng.uniform() : 0.5;
        out.push_back({box.min.x + (ix + ux) * inv * ext.x,
                       box.min.y + (iy + uy) * inv * ext.y,
                       box.min.z + (iz + uz) * inv * ext.z});
      }
  return out;
}

// ---------------------------------------------------------------------------
// Global depth ordering

// Scalar key that makes one flat sort equivalent to a per-ray depth sort:
// rays own disjoint key ranges [id * z_max, (id+1) * z_max).
inline double global_sort_key(uint32_t ray_id, double z_s, double z_max) {
  if (!(z_max > 0.0)) throw std::invalid_argument("sort key: z_max must be positive");
  if (!(z_s >= 0.0) || z_s >= z_max)
    throw std::invalid_argument("sort key: depth " + std::to_string(z_s) +
                                " outside [0, " + std::to_string(z_max) + ")");
  return double(ray_id) * z_max + z_s;
}

// One stable sort of the whole batch by the global key, then a linear split
// into per-ray groups. Groups are padded to the longest group's length with
// inert copies of their last record (sigma = 0, seg_weight = 0).
inline std::vector<RayGroup> sort_and_group(std::vector<SampleRecord> samples,
                                            double z_max, bool pad = true) {
  // Validate every record against the fused-key domain so out-of-range depths
  // are rejected here, but compare by the exact (ray, depth) pair the key
  // encodes: the fused double drops low bits of z_s once ray_id * z_max grows
  // large, which can put two samples a few ULPs apart in the wrong order.
  for (const SampleRecord& s : samples)
    (void)global_sort_key(s.ray_id, s.z_s, z_max);
  std::vector<uint32_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (samples[a].ray_id != samples[b].ray_id)
      return samples[a].ray_id < samples[b].ray_id;
    return samples[a].z_s < samples[b].z_s;
  });

  std::vector<RayGroup> groups;
  for (uint32_t idx : order) {
    const SampleRecord& r = samples[idx];
    if (groups.empty() || groups.back().ray_id != r.ray_id) {
      groups.push_back(RayGroup{r.ray_id, {}, 0});
    }
    groups.back().samples.push_back(r);
  }

  if (pad && !groups.empty()) {
    size_t longest = 0;
    for (const auto& g : groups) longest = std::max(longest, g.samples.size());
    for (auto& g : groups) {
      SampleRecord filler = g.samples.back();
      filler.sigma = 0.0;
      filler.seg_weight = 0.0;
      while (g.samples.size() < longest) {
        g.samples.push_back(filler);
        ++g.pad_count;
      }
    }
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Per-node segment weights

// s_i = depth gap to the next sample of the same node, or to the node's exit
// for the last one, so segments never span node boundaries and empty space
// between nodes inflates nothing. Requires the group to be depth-sorted.
inline void segment_weights(RayGroup& group) {
  const int n = group.real_count();
  for (int i = 0; i < n; ++i) {
    SampleRecord& r = group.samples[i];
    if (i + 1 < n && group.samples[i + 1].node == r.node)
      r.seg_weight = std::max(0.0, group.samples[i + 1].z_s - r.z_s);
    else
      r.seg_weight = std::max(0.0, r.exit_z - r.z_s);
  }
  for (int i = n; i < int(group.samples.size()); ++i) group.samples[i].seg_weight = 0.0;
}

// Contiguous [begin, end) runs of equal node among the real samples.
inline std::vector<std::pair<int, int>> node_spans(const RayGroup& group) {
  std::vector<std::pair<int, int>> spans;
  const int n = group.real_count();
  int begin = 0;
  for (int i = 1; i <= n; ++i) {
    if (i == n || !(group.samples[i].node == group.samples[begin].node)) {
      spans.emplace_back(begin, i);
      begin = i;
    }
  }
  return spans;
}

// ---------------------------------------------------------------------------
// Depth CDFs and importance sampling (sampling stage two)

// Piecewise-linear cumulative mass along one ray within one node. Knots sit
// at sample depths with cumulative normalized mass sigma_i * s_i; zero-mass
// knots are skipped. When the node holds no mass at all, inversion falls back
// to uniform depths over (t_enter, t_exit).
struct DensityCdf {
  std::vector<double> z;
  std::vector<double> cdf;
  bool zero_mass = true;
  double t_enter = 0.0;
  double t_exit = 0.0;

  // Inverse transform of one uniform draw u in [0, 1).
  double sample(double u) const {
    if (zero_mass) return t_enter + (t_exit - t_enter) * u;
    if (u <= cdf.front()) return z.front();
    auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) return z.back();
    size_t k = size_t(it - cdf.begin());
    double c0 = cdf[k - 1], c1 = cdf[k];
    double t = (u - c0) / (c1 - c0);
    return z[k - 1] + (z[k] - z[k - 1]) * t;
  }
};

// Builds the CDF from the [begin, end) span of one node's samples in `group`.
inline DensityCdf build_cdf(const RayGroup& group, int begin, int end,
                            double t_enter, double t_exit) {
  DensityCdf out;
  out.t_enter = t_enter;
  out.t_exit = t_exit;
  double total = 0.0;
  for (int i = begin; i < end; ++i)
    total += group.samples[i].sigma * group.samples[i].seg_weight;
  if (!(total > 0.0)) return out;  // zero_mass stays set
  out.zero_mass = false;
  double cum = 0.0;
  for (int i = begin; i < end; ++i) {
    double mass = group.samples[i].sigma * group.samples[i].seg_weight;
    if (mass <= 0.0) continue;
    cum += mass;
    out.z.push_back(group.samples[i].z_s);
    out.cdf.push_back(cum / total);
  }
  out.cdf.back() = 1.0;
  return out;
}

// n depths from the CDF at stratified uniforms (k+0.5)/n, or jittered
// (k+u)/n during training. Output is non-decreasing.
inline std::vector<double> importance_sample(const DensityCdf& cdf, int n, bool jitter,
                                             Rng& rng) {
  if (n < 1) throw std::invalid_argument("importance sampling: n must be >= 1");
  std::vector<double> out(n);
  for (int k = 0; k < n; ++k) {
    double u = (k + (jitter ? rng.uniform() : 0.5)) / n;
    out[k] = cdf.sample(u);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ray traversal over the octree

struct RayNodeSpan {
  NodeId node;
  double t_enter = 0.0;
  double t_exit = 0.0;
};

namespace detail {

inline void walk_ray(const OctreeModel& model, const Ray& ray, const NodeId& id,
                     const Aabb& box, double t0, double t1,
                     std::vector<RayNodeSpan>& out) {
  const NodeStatus& st = model.status(id);
  if (st.kind == NodeKind::Inactive) return;
  if (st.kind == NodeKind::ActiveLeaf) {
    out.push_back({id, t0, t1});
    return;
  }
  struct ChildHit {
    int j;
    double a, b;
  };
  std::array<ChildHit, 8> hits;
  int count = 0;
  for (int j = 0; j < 8; ++j) {
    // A ray that never moves along an axis sits inside both children of a
    // partition plane under the closed slab test. Boxes are half-open, so on
    // such axes the interval belongs to exactly one child: the one whose
    // half-open coordinate range holds the origin (o >= center -> upper).
    bool owned = true;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(ray.dir[a]) * t1 > kSlabEps) continue;
      int bit = ray.origin[a] >= box.center()[a] ? 1 : 0;
      if (((j >> a) & 1) != bit) {
        owned = false;
        break;
      }
    }
    if (!owned) continue;
    Aabb cb = box.octant(j);
    auto span = ray_aabb_intersect(ray, cb);
    if (!span) continue;
    double a = std::max(span->t_enter, t0);
    double b = std::min(span->t_exit, t1);
    if (b - a <= 1e-12) continue;  // grazing touch: carries no length
    hits[count++] = {j, a, b};
  }
  std::sort(hits.begin(), hits.begin() + count, [](const ChildHit& x, const ChildHit& y) {
    return x.a < y.a || (x.a == y.a && x.j < y.j);
  });
  for (int k = 0; k < count; ++k)
    walk_ray(model, ray, child_id(id, hits[k].j), box.octant(hits[k].j), hits[k].a,
             hits[k].b, out);
}

}  // namespace detail

// Ordered (node, t_enter, t_exit) intervals of the active leaves a ray
// passes through, clipped to [t_min, t_max].
inline std::vector<RayNodeSpan> active_leaves_on_ray(
    const OctreeModel& model, const Ray& ray, double t_min = 0.0,
    double t_max = std::numeric_limits<double>::infinity()) {
  std::vector<RayNodeSpan> out;
  auto span = ray_aabb_intersect(ray, model.root_bounds());
  if (!span) return out;
  double a = std::max(span->t_enter, t_min);
  double b = std::min(span->t_exit, t_max);
  if (b - a <= 1e-12) return out;
  detail::walk_ray(model, ray, NodeId{0, 0}, model.root_bounds(), a, b, out);
  return out;
}

}  // namespace octfield
