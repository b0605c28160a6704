#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "octfield/compositing.hpp"
#include "octfield/geometry.hpp"
#include "octfield/image.hpp"
#include "octfield/network.hpp"
#include "octfield/octree.hpp"
#include "octfield/parallel.hpp"
#include "octfield/rng.hpp"
#include "octfield/sampling.hpp"
#include "octfield/tree_opt.hpp"

namespace octfield {

// ---------------------------------------------------------------------------
// Configuration of the two-stage render pipeline.

struct RenderConfig {
  int stage1_n_per_axis = 16;   // density grid per leaf: n^3 cached samples
  int importance_per_node = 8;  // stage-2 samples per (ray, crossed leaf)
  WeightModel weight_model = WeightModel::Surface;
  Vec3 background{0.0, 0.0, 0.0};
  double cull_transmittance = 1e-4;  // drop samples once this little light remains
  int threads = 1;
};

// ---------------------------------------------------------------------------
// Stage one: per-leaf stratified density grids, reusable across views.

// Evaluates the density head of every active leaf on its stratified grid.
// Only densities are kept: they are view-independent, so one cache serves
// every camera, and the same cache feeds the tree statistics.
inline DensityCache build_density_cache(const OctreeModel& model, int n_per_axis,
                                        bool jitter, uint64_t seed) {
  DensityCache cache;
  std::vector<NodeId> leaves = model.active_leaves();
  std::vector<NodeSampleSet*> slots(leaves.size());
  for (size_t i = 0; i < leaves.size(); ++i) {
    NodeSampleSet set;
    set.node = leaves[i];
    set.n_per_axis = n_per_axis;
    slots[i] = &cache.emplace(leaves[i], std::move(set)).first->second;
  }
  // Per-node work is independent and seeded by node identity, so the cache
  // contents do not depend on the thread count or the leaf iteration order.
  for (size_t i = 0; i < leaves.size(); ++i) {
    const NodeId& id = leaves[i];
    const NodeStatus& st = model.status(id);
    if (!st.network)
      throw std::runtime_error("density cache: active leaf " + id.str() +
                               " has no network");
    Aabb box = model.node_bounds(id);
    Rng rng(mix_seed(seed, id.level + 1, id.index));
    NodeSampleSet& set = *slots[i];
    set.positions = stratified_node_samples(box, n_per_axis, jitter, rng);
    const Eigen::Index n = static_cast<Eigen::Index>(set.positions.size());
    Eigen::Matrix<float, 3, Eigen::Dynamic> pos_local(3, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      Vec3 l = node_local(box, set.positions[static_cast<size_t>(k)]);
      pos_local.col(k) << static_cast<float>(l.x), static_cast<float>(l.y),
          static_cast<float>(l.z);
    }
    Eigen::VectorXf sigma;
    forward_density_batch(*st.network, pos_local,
                          ActivationNoise::eval_mode(st.network->arch.act), nullptr,
                          sigma);
    set.sigma.resize(static_cast<size_t>(n));
    for (Eigen::Index k = 0; k < n; ++k)
      set.sigma[static_cast<size_t>(k)] = static_cast<double>(sigma(k));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Ray descriptions. A batch assigns each traced ray a dense local id; pixels
// may come from different cameras, so the camera mapping stays with the
// caller and the trace works per view.

struct RaySpec {
  uint32_t id = 0;     // batch-local ray id, unique across the whole batch
  uint32_t pixel = 0;  // row * width + col within the view being traced
  Ray ray;             // unit ray through that pixel center
};

namespace detail {

struct Stage1Knot {
  NodeId node;
  double z = 0.0;
  double sigma = 0.0;
};

}  // namespace detail

// Projects the cached density samples of one view into its image plane and
// buckets them per requested ray (nearest-pixel association). Knot depth is
// the distance along the ray. Buckets come back sorted by depth.
inline std::vector<std::vector<detail::Stage1Knot>> splat_density_cache(
    const DensityCache& cache, const Camera& cam, const std::vector<RaySpec>& specs) {
  std::vector<int32_t> slot_of(static_cast<size_t>(cam.width) * cam.height, -1);
  for (size_t s = 0; s < specs.size(); ++s) {
    if (specs[s].pixel >= slot_of.size())
      throw std::invalid_argument("splat: pixel id out of range");
    slot_of[specs[s].pixel] = static_cast<int32_t>(s);
  }
  std::vector<std::vector<detail::Stage1Knot>> buckets(specs.size());
  for (const auto& [id, set] : cache) {
    for (size_t k = 0; k < set.positions.size(); ++k) {
      const Vec3& p = set.positions[k];
      auto hit = project(cam, p);
      if (!hit) continue;
      int32_t slot = slot_of[static_cast<size_t>(hit->row) * cam.width + hit->col];
      if (slot < 0) continue;
      const Ray& ray = specs[static_cast<size_t>(slot)].ray;
      double z = (p - ray.origin).dot(ray.dir);
      if (z <= 0.0) continue;
      buckets[static_cast<size_t>(slot)].push_back({id, z, set.sigma[k]});
    }
  }
  for (auto& b : buckets)
    std::sort(b.begin(), b.end(), [](const detail::Stage1Knot& a,
                                     const detail::Stage1Knot& b2) { return a.z < b2.z; });
  return buckets;
}

// ---------------------------------------------------------------------------
// Stage two: importance-sampled records along each ray.

// Builds the stage-2 sample records for the given rays of one view: walk the
// tree for the leaf intervals, turn the splatted knots of each interval into
// a depth CDF, draw `importance_per_node` depths from it, and emit records
// (density and color still unset). `depth_seed` feeds the per-(ray, interval)
// jitter streams; `key_seed` stamps each record's activation-noise key.
// Seeding by ray id keeps the output independent of the thread count.
inline std::vector<SampleRecord> stage2_records_for_view(
    const OctreeModel& model, const DensityCache& cache, const Camera& cam,
    const std::vector<RaySpec>& specs, const RenderConfig& cfg, bool jitter,
    uint64_t depth_seed, uint64_t key_seed) {
  if (cfg.importance_per_node < 1)
    throw std::invalid_argument("render: importance_per_node must be >= 1");
  auto buckets = splat_density_cache(cache, cam, specs);

  std::vector<std::vector<SampleRecord>> per_ray(specs.size());
  parallel_for(static_cast<int64_t>(specs.size()), cfg.threads,
               [&](int64_t lo, int64_t hi) {
    for (int64_t s = lo; s < hi; ++s) {
      const RaySpec& spec = specs[static_cast<size_t>(s)];
      auto spans = active_leaves_on_ray(model, spec.ray, cam.z_near, cam.z_far);
      if (spans.empty()) continue;
      const auto& knots = buckets[static_cast<size_t>(s)];
      std::vector<SampleRecord>& out = per_ray[static_cast<size_t>(s)];
      out.reserve(spans.size() * static_cast<size_t>(cfg.importance_per_node));
      uint32_t ordinal = 0;
      for (size_t si = 0; si < spans.size(); ++si) {
        const RayNodeSpan& span = spans[si];
        // Splatted knots of this leaf that fall inside the crossing interval.
        // Nearest-pixel association can attach a sample to a ray that passes
        // nearby but misses the sample's node; those knots are discarded.
        RayGroup tmp;
        for (const auto& kn : knots) {
          if (!(kn.node == span.node)) continue;
          if (kn.z < span.t_enter || kn.z > span.t_exit) continue;
          SampleRecord r;
          r.node = span.node;
          r.z_s = kn.z;
          r.exit_z = span.t_exit;
          r.sigma = kn.sigma;
          tmp.samples.push_back(r);
        }
        segment_weights(tmp);
        DensityCdf cdf = build_cdf(tmp, 0, static_cast<int>(tmp.samples.size()),
                                   span.t_enter, span.t_exit);
        Rng rng(mix_seed(depth_seed, spec.id, si));
        std::vector<double> depths =
            importance_sample(cdf, cfg.importance_per_node, jitter, rng);
        for (double z : depths) {
          SampleRecord r;
          r.position = spec.ray.origin + spec.ray.dir * z;
          r.node = span.node;
          r.ray_id = spec.id;
          r.z_s = z;
          r.exit_z = span.t_exit;
          r.key = mix_seed(key_seed, spec.id, ordinal++);
          out.push_back(r);
        }
      }
    }
  });

  std::vector<SampleRecord> records;
  size_t total = 0;
  for (const auto& v : per_ray) total += v.size();
  records.reserve(total);
  for (auto& v : per_ray) records.insert(records.end(), v.begin(), v.end());
  return records;
}

// ---------------------------------------------------------------------------
// Network evaluation of stage-2 records, batched per leaf network.

namespace detail {

// Indices of `records` grouped by node, in node order. Batching per network
// is what makes the octree model efficient: one matrix pass per leaf.
inline std::map<NodeId, std::vector<uint32_t>> records_by_node(
    const std::vector<SampleRecord>& records) {
  std::map<NodeId, std::vector<uint32_t>> by_node;
  for (size_t i = 0; i < records.size(); ++i)
    by_node[records[i].node].push_back(static_cast<uint32_t>(i));
  return by_node;
}

}  // namespace detail

// Fills sigma and color of every record by evaluating each leaf network on
// its own records in one batch. `dir_by_ray` maps a record's ray id to the
// ray direction. With `train_noise`, activations use the randomized slopes
// keyed by each record's stored key; otherwise the deterministic eval slope.
inline void eval_stage2_records(const OctreeModel& model,
                                std::vector<SampleRecord>& records,
                                const std::vector<Vec3>& dir_by_ray, bool train_noise,
                                int threads) {
  auto by_node = detail::records_by_node(records);
  std::vector<std::pair<const NodeId*, const std::vector<uint32_t>*>> work;
  work.reserve(by_node.size());
  for (const auto& [id, idx] : by_node) work.emplace_back(&id, &idx);

  parallel_for(static_cast<int64_t>(work.size()), threads, [&](int64_t lo, int64_t hi) {
    for (int64_t w = lo; w < hi; ++w) {
      const NodeId& id = *work[static_cast<size_t>(w)].first;
      const std::vector<uint32_t>& idx = *work[static_cast<size_t>(w)].second;
      const NodeStatus& st = model.status(id);
      if (!st.network)
        throw std::runtime_error("render: active leaf " + id.str() + " has no network");
      const LeafNetwork& net = *st.network;
      Aabb box = model.node_bounds(id);
      const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
      Eigen::Matrix<float, 3, Eigen::Dynamic> pos(3, n), dirs(3, n);
      std::vector<uint64_t> keys(idx.size());
      for (Eigen::Index k = 0; k < n; ++k) {
        const SampleRecord& r = records[idx[static_cast<size_t>(k)]];
        Vec3 l = node_local(box, r.position);
        pos.col(k) << static_cast<float>(l.x), static_cast<float>(l.y),
            static_cast<float>(l.z);
        if (r.ray_id >= dir_by_ray.size())
          throw std::runtime_error("render: record references unknown ray");
        const Vec3& d = dir_by_ray[r.ray_id];
        dirs.col(k) << static_cast<float>(d.x), static_cast<float>(d.y),
            static_cast<float>(d.z);
        keys[static_cast<size_t>(k)] = r.key;
      }
      ActivationNoise noise = train_noise
                                  ? ActivationNoise::train_mode(net.arch.act, 0)
                                  : ActivationNoise::eval_mode(net.arch.act);
      Eigen::VectorXf sigma;
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic> rgb;
      forward_full_batch(net, pos, dirs, noise, train_noise ? keys.data() : nullptr,
                         sigma, rgb);
      for (Eigen::Index k = 0; k < n; ++k) {
        SampleRecord& r = records[idx[static_cast<size_t>(k)]];
        r.sigma = static_cast<double>(sigma(k));
        r.color = Vec3{static_cast<double>(rgb(0, k)), static_cast<double>(rgb(1, k)),
                       static_cast<double>(rgb(2, k))};
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Final assembly: global sort, segment weights, occlusion cull.

inline std::vector<RayGroup> finalize_groups(std::vector<SampleRecord> records,
                                             double z_max, double cull_transmittance,
                                             int threads) {
  std::vector<RayGroup> groups = sort_and_group(std::move(records), z_max);
  parallel_for(static_cast<int64_t>(groups.size()), threads,
               [&](int64_t lo, int64_t hi) {
    for (int64_t g = lo; g < hi; ++g) {
      segment_weights(groups[static_cast<size_t>(g)]);
      cull_occluded(groups[static_cast<size_t>(g)], cull_transmittance);
    }
  });
  return groups;
}

// ---------------------------------------------------------------------------
// Whole-image rendering (the evaluation path: deterministic, no jitter).

struct RenderedView {
  Image image;
  DepthImage depth;  // expected along-ray distance per pixel, 0 where nothing hit
};

inline RenderedView render_view_with_cache(const OctreeModel& model,
                                           const DensityCache& cache, const Camera& cam,
                                           const RenderConfig& cfg) {
  std::vector<Ray> rays = generate_rays(cam);
  std::vector<RaySpec> specs(rays.size());
  std::vector<Vec3> dir_by_ray(rays.size());
  for (size_t i = 0; i < rays.size(); ++i) {
    specs[i] = RaySpec{static_cast<uint32_t>(i), static_cast<uint32_t>(i), rays[i]};
    dir_by_ray[i] = rays[i].dir;
  }
  std::vector<SampleRecord> records = stage2_records_for_view(
      model, cache, cam, specs, cfg, /*jitter=*/false, /*depth_seed=*/0, /*key_seed=*/0);
  eval_stage2_records(model, records, dir_by_ray, /*train_noise=*/false, cfg.threads);
  std::vector<RayGroup> groups =
      finalize_groups(std::move(records), cam.z_far + 1.0, cfg.cull_transmittance,
                      cfg.threads);

  RenderedView out;
  out.image = Image(cam.width, cam.height, cfg.background);
  out.depth = DepthImage(cam.width, cam.height);
  parallel_for(static_cast<int64_t>(groups.size()), cfg.threads,
               [&](int64_t lo, int64_t hi) {
    for (int64_t g = lo; g < hi; ++g) {
      const RayGroup& group = groups[static_cast<size_t>(g)];
      CompositeResult res = composite(group, cfg.weight_model, &cfg.background);
      out.image.px[group.ray_id] = res.pixel;
      out.depth.depth[group.ray_id] = res.expected_depth;
    }
  });
  return out;
}

inline RenderedView render_view(const OctreeModel& model, const Camera& cam,
                                const RenderConfig& cfg, uint64_t seed = 0) {
  cam.validate();
  DensityCache cache = build_density_cache(model, cfg.stage1_n_per_axis, false, seed);
  return render_view_with_cache(model, cache, cam, cfg);
}

// ---------------------------------------------------------------------------
// Gradient path: push per-sample color/density gradients back into per-node
// parameter gradients by re-evaluating each node's samples with the same
// noise keys (the records carry them) and running the hand-derived backward.

// dsample aligned with groups: per group, per sample (padding included).
struct SampleGrads {
  std::vector<std::vector<double>> dsigma;
  std::vector<std::vector<Vec3>> dcolor;
};

// Re-forwards with cache per node in chunks of `chunk` samples and
// accumulates dL/dparams per node. Gradient buffers are created on first
// touch. Deterministic for any thread count: each node's contribution is
// summed in record order, nodes are disjoint.
inline void accumulate_network_grads(const OctreeModel& model,
                                     const std::vector<RayGroup>& groups,
                                     const SampleGrads& grads,
                                     const std::vector<Vec3>& dir_by_ray,
                                     bool train_noise, int chunk,
                                     std::map<NodeId, Eigen::VectorXf>& grad_out,
                                     int threads) {
  if (chunk < 1) throw std::invalid_argument("gradient accumulation: chunk must be >= 1");
  // Flatten the real (non-padding) samples with their gradients.
  struct Item {
    const SampleRecord* rec;
    double dsigma;
    Vec3 dcolor;
  };
  std::map<NodeId, std::vector<Item>> by_node;
  for (size_t g = 0; g < groups.size(); ++g) {
    const RayGroup& group = groups[g];
    const int n = group.real_count();
    for (int i = 0; i < n; ++i) {
      const SampleRecord& r = group.samples[static_cast<size_t>(i)];
      by_node[r.node].push_back(
          Item{&r, grads.dsigma[g][static_cast<size_t>(i)],
               grads.dcolor[g][static_cast<size_t>(i)]});
    }
  }
  std::vector<std::pair<const NodeId*, std::vector<Item>*>> work;
  work.reserve(by_node.size());
  for (auto& [id, items] : by_node) {
    work.emplace_back(&id, &items);
    auto& buf = grad_out[id];
    const NodeStatus& st = model.status(id);
    if (!st.network)
      throw std::runtime_error("gradients: active leaf " + id.str() + " has no network");
    if (buf.size() != st.network->params.size()) {
      buf.resize(st.network->params.size());
      buf.setZero();
    }
  }

  parallel_for(static_cast<int64_t>(work.size()), threads, [&](int64_t lo, int64_t hi) {
    for (int64_t w = lo; w < hi; ++w) {
      const NodeId& id = *work[static_cast<size_t>(w)].first;
      std::vector<Item>& items = *work[static_cast<size_t>(w)].second;
      const LeafNetwork& net = *model.status(id).network;
      Aabb box = model.node_bounds(id);
      Eigen::VectorXf& gbuf = grad_out[id];
      ActivationNoise noise = train_noise
                                  ? ActivationNoise::train_mode(net.arch.act, 0)
                                  : ActivationNoise::eval_mode(net.arch.act);
      for (size_t begin = 0; begin < items.size(); begin += static_cast<size_t>(chunk)) {
        const size_t end = std::min(items.size(), begin + static_cast<size_t>(chunk));
        const Eigen::Index n = static_cast<Eigen::Index>(end - begin);
        Eigen::Matrix<float, 3, Eigen::Dynamic> pos(3, n), dirs(3, n);
        Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic> drgb(3, n);
        Eigen::VectorXf dsigma(n);
        std::vector<uint64_t> keys(static_cast<size_t>(n));
        for (Eigen::Index k = 0; k < n; ++k) {
          const Item& it = items[begin + static_cast<size_t>(k)];
          Vec3 l = node_local(box, it.rec->position);
          pos.col(k) << static_cast<float>(l.x), static_cast<float>(l.y),
              static_cast<float>(l.z);
          const Vec3& d = dir_by_ray[it.rec->ray_id];
          dirs.col(k) << static_cast<float>(d.x), static_cast<float>(d.y),
              static_cast<float>(d.z);
          keys[static_cast<size_t>(k)] = it.rec->key;
          dsigma(k) = static_cast<float>(it.dsigma);
          drgb.col(k) << static_cast<float>(it.dcolor.x),
              static_cast<float>(it.dcolor.y), static_cast<float>(it.dcolor.z);
        }
        ForwardCache<float> fwd_cache;
        Eigen::VectorXf sigma;
        Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic> rgb;
        const uint64_t* kp = train_noise ? keys.data() : nullptr;
        forward_full_batch(net, pos, dirs, noise, kp, sigma, rgb, &fwd_cache);
        backward_batch(net, fwd_cache, noise, kp, dsigma, drgb, gbuf);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Tree statistics plumbing: compositing weights as apportionment samples.

// Extracts (node, ray, weight) triples for the error statistics from the
// composited groups. `ray_offset` relocates batch-local ray ids into the
// epoch-wide numbering used by the accumulated error batch.
inline void append_render_samples(const std::vector<RayGroup>& groups,
                                  const std::vector<CompositeResult>& composites,
                                  int ray_offset, RenderErrorBatch& batch) {
  if (groups.size() != composites.size())
    throw std::invalid_argument("render samples: group/composite count mismatch");
  for (size_t g = 0; g < groups.size(); ++g) {
    const RayGroup& group = groups[g];
    const int n = group.real_count();
    for (int i = 0; i < n; ++i) {
      const SampleRecord& r = group.samples[static_cast<size_t>(i)];
      RenderSample s;
      s.node = r.node;
      s.ray_id = ray_offset + static_cast<int>(group.ray_id);
      s.position = r.position;
      s.weight = composites[g].weights[static_cast<size_t>(i)];
      batch.samples.push_back(s);
    }
  }
}

}  // namespace octfield
