#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "octfield/geometry.hpp"
#include "octfield/network.hpp"
#include "octfield/octree.hpp"
#include "octfield/rng.hpp"
#include "octfield/tree_opt.hpp"

// Knowledge transfer across structural edits: after a split, the eight fresh
// child networks are pre-trained to reproduce the frozen parent; after a
// merge, the fresh parent is pre-trained to reproduce the frozen children
// (switched-off octants teach vacuum). Everything runs on stratified point
// samples — no rays, no compositing — so edits stay local to their subtree.

namespace octfield {

struct DistillConfig {
  int steps = 200;
  int batch = 1024;               // realized as a long x short x short lattice
  double lr = 5e-4;
  double divergence_factor = 5.0; // abort when loss exceeds this times the start
};

struct DistillReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps_run = 0;
};

namespace detail {

// Jittered stratified lattice with per-axis counts, x-fastest ordering.
inline std::vector<Vec3> stratified_lattice(const Aabb& box, int nx, int ny, int nz,
                                            Rng& rng) {
  std::vector<Vec3> out;
  out.reserve(static_cast<size_t>(nx) * ny * nz);
  Vec3 e = box.extent();
  for (int iz = 0; iz < nz; ++iz)
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix < nx; ++ix) {
        double ux = rng.uniform(), uy = rng.uniform(), uz = rng.uniform();
        out.push_back(Vec3{box.min.x + (ix + ux) / nx * e.x,
                           box.min.y + (iy + uy) / ny * e.y,
                           box.min.z + (iz + uz) / nz * e.z});
      }
  return out;
}

inline Vec3 uniform_sphere_dir(Rng& rng) {
  double z = rng.uniform(-1.0, 1.0);
  double phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return Vec3{r * std::cos(phi), r * std::sin(phi), z};
}

// Batch lattice shape: one axis twice as long as the other two (1024 becomes
// 16x8x8), the long axis rotating across steps so strata do not align.
struct LatticeShape {
  int n[3];
};

inline LatticeShape lattice_shape(int batch, int step) {
  int ns = std::max(1, static_cast<int>(std::cbrt(batch / 2.0) + 0.5));
  int nl = std::max(1, batch / (ns * ns));
  LatticeShape s{{ns, ns, ns}};
  s.n[step % 3] = nl;
  return s;
}

// Targets for one student batch: post-activation density and color, with a
// per-sample flag for whether the color channels carry a teaching signal.
struct DistillTargets {
  Eigen::VectorXf sigma;
  Eigen::Matrix<float, 3, Eigen::Dynamic> rgb;
  std::vector<char> color_mask;
};

inline void eval_teacher(const LeafNetwork& teacher, const Aabb& teacher_box,
                         const std::vector<Vec3>& world, const std::vector<Vec3>& dirs,
                         size_t begin, size_t end, DistillTargets& out) {
  const auto n = static_cast<Eigen::Index>(end - begin);
  Eigen::Matrix<float, 3, Eigen::Dynamic> pos(3, n), dir(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec3 local = node_local(teacher_box, world[begin + i]);
    pos.col(i) << float(local.x), float(local.y), float(local.z);
    dir.col(i) << float(dirs[begin + i].x), float(dirs[begin + i].y),
        float(dirs[begin + i].z);
  }
  Eigen::VectorXf sigma;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic> rgb;
  ActivationNoise noise = ActivationNoise::eval_mode(teacher.arch.act);
  forward_full_batch(teacher, pos, dir, noise, nullptr, sigma, rgb);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.sigma(begin + i) = sigma(i);
    out.rgb.col(begin + i) = rgb.col(i);
    out.color_mask[begin + i] = 1;
  }
}

// One gradient-descent run of a student against fixed per-batch targets.
// `make_batch(step, rng, world, dirs, targets)` fills the three vectors.
template <class BatchFn>
DistillReport distill_run(LeafNetwork& student, const Aabb& student_box,
                          const DistillConfig& cfg, uint64_t seed, BatchFn&& make_batch) {
  DistillReport rep;
  if (cfg.steps <= 0) return rep;

  Rng rng(mix_seed(seed, 0x64697374ull));
  OptimizerState opt(student.params.size());
  opt.base_lr = cfg.lr;
  ActivationNoise noise = ActivationNoise::eval_mode(student.arch.act);

  std::vector<Vec3> world, dirs;
  DistillTargets targets;
  Eigen::VectorXf sigma;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic> rgb;
  Eigen::VectorXf grad(student.params.size());

  for (int step = 0; step < cfg.steps; ++step) {
    world.clear();
    dirs.clear();
    make_batch(step, rng, world, dirs, targets);
    const auto n = static_cast<Eigen::Index>(world.size());

    Eigen::Matrix<float, 3, Eigen::Dynamic> pos(3, n), dir(3, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vec3 local = node_local(student_box, world[i]);
      pos.col(i) << float(local.x), float(local.y), float(local.z);
      dir.col(i) << float(dirs[i].x), float(dirs[i].y), float(dirs[i].z);
    }
    ForwardCache<float> cache;
    forward_full_batch(student, pos, dir, noise, nullptr, sigma, rgb, &cache);

    // Mean over samples of the squared output gap; masked color channels
    // (octants with no color teacher) contribute nothing.
    double loss = 0.0;
    Eigen::VectorXf dsigma(n);
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic> drgb(3, n);
    const float inv_n = 1.0f / static_cast<float>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      float ds = sigma(i) - targets.sigma(i);
      loss += double(ds) * ds;
      dsigma(i) = 2.0f * ds * inv_n;
      if (targets.color_mask[i]) {
        for (int ch = 0; ch < 3; ++ch) {
          float dc = rgb(ch, i) - targets.rgb(ch, i);
          loss += double(dc) * dc;
          drgb(ch, i) = 2.0f * dc * inv_n;
        }
      } else {
        drgb.col(i).setZero();
      }
    }
    loss *= inv_n;

    if (step == 0) rep.initial_loss = loss;
    if (loss > cfg.divergence_factor * rep.initial_loss + 1e-12)
      throw std::runtime_error("distillation diverged at step " + std::to_string(step) +
                               ": loss " + std::to_string(loss) + " vs initial " +
                               std::to_string(rep.initial_loss));
    rep.final_loss = loss;
    ++rep.steps_run;

    grad.setZero();
    backward_batch(student, cache, noise, nullptr, dsigma, drgb, grad);
    opt.step(student.params, grad, /*epoch=*/1);
  }
  return rep;
}

}  // namespace detail

// Pre-trains eight fresh child networks (trained in place) to reproduce the
// frozen parent over their octants. Directions are uniform on the sphere.
inline std::array<DistillReport, 8> pretrain_split(
    const LeafNetwork& parent, const Aabb& parent_bounds,
    const std::array<std::shared_ptr<LeafNetwork>, 8>& children, const DistillConfig& cfg,
    uint64_t seed) {
  for (int j = 0; j < 8; ++j)
    if (!children[j])
      throw std::invalid_argument("pretrain_split: child " + std::to_string(j) +
                                  " has no network");
  std::array<DistillReport, 8> reports;
  for (int j = 0; j < 8; ++j) {
    Aabb child_box = parent_bounds.octant(j);
    reports[j] = detail::distill_run(
        *children[j], child_box, cfg, mix_seed(seed, static_cast<uint64_t>(j)),
        [&](int step, Rng& rng, std::vector<Vec3>& world, std::vector<Vec3>& dirs,
            detail::DistillTargets& targets) {
          detail::LatticeShape s = detail::lattice_shape(cfg.batch, step);
          world = detail::stratified_lattice(child_box, s.n[0], s.n[1], s.n[2], rng);
          dirs.resize(world.size());
          for (Vec3& d : dirs) d = detail::uniform_sphere_dir(rng);
          targets.sigma.resize(static_cast<Eigen::Index>(world.size()));
          targets.rgb.resize(3, static_cast<Eigen::Index>(world.size()));
          targets.color_mask.assign(world.size(), 0);
          detail::eval_teacher(parent, parent_bounds, world, dirs, 0, world.size(),
                               targets);
        });
  }
  return reports;
}

// Pre-trains a fresh parent network (in place) to reproduce the frozen
// children. Null children stand for switched-off octants: their density
// target is zero and their color carries no teaching signal.
inline DistillReport pretrain_merge(
    const std::array<std::shared_ptr<const LeafNetwork>, 8>& children,
    LeafNetwork& parent, const Aabb& parent_bounds, const DistillConfig& cfg,
    uint64_t seed) {
  return detail::distill_run(
      parent, parent_bounds, cfg, mix_seed(seed, 0x6d657267ull),
      [&](int step, Rng& rng, std::vector<Vec3>& world, std::vector<Vec3>& dirs,
          detail::DistillTargets& targets) {
        // Equal per-octant lattices with an eighth of the batch each.
        detail::LatticeShape s = detail::lattice_shape(cfg.batch / 8, step);
        std::array<size_t, 9> bounds{};
        for (int j = 0; j < 8; ++j) {
          std::vector<Vec3> part = detail::stratified_lattice(
              parent_bounds.octant(j), s.n[0], s.n[1], s.n[2], rng);
          world.insert(world.end(), part.begin(), part.end());
          bounds[j + 1] = world.size();
        }
        dirs.resize(world.size());
        for (Vec3& d : dirs) d = detail::uniform_sphere_dir(rng);
        targets.sigma = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(world.size()));
        targets.rgb.setZero(3, static_cast<Eigen::Index>(world.size()));
        targets.color_mask.assign(world.size(), 0);
        for (int j = 0; j < 8; ++j)
          if (children[j])
            detail::eval_teacher(*children[j], parent_bounds.octant(j), world, dirs,
                                 bounds[j], bounds[j + 1], targets);
      });
}

// Runs the transfer for every edit in a structural edit log. Networks are
// trained through the handles the tree already owns; teachers are the frozen
// copies recorded when the edit was applied. Structure-only edits (no
// networks anywhere) are skipped.
struct DistillSummary {
  std::vector<std::pair<NodeId, DistillReport>> split_children;  // one per new child
  std::vector<std::pair<NodeId, DistillReport>> merged_parents;
};

inline DistillSummary distill_edits(OctreeModel& model, const EditLog& log,
                                    const DistillConfig& cfg, uint64_t seed) {
  DistillSummary out;
  for (const MergeEdit& e : log.merges) {
    bool any = false;
    for (const auto& t : e.teachers)
      if (t) any = true;
    if (!any) continue;
    std::shared_ptr<LeafNetwork> parent = model.status(e.parent).network;
    if (!parent)
      throw std::runtime_error("merged node " + e.parent.str() + " has no network");
    DistillReport rep =
        pretrain_merge(e.teachers, *parent, model.node_bounds(e.parent), cfg,
                       mix_seed(seed, static_cast<uint64_t>(e.parent.level), e.parent.index));
    out.merged_parents.emplace_back(e.parent, rep);
  }
  for (const SplitEdit& e : log.splits) {
    if (!e.teacher) continue;
    std::array<std::shared_ptr<LeafNetwork>, 8> kids;
    for (int j = 0; j < 8; ++j) kids[j] = model.status(e.children[j]).network;
    auto reports =
        pretrain_split(*e.teacher, model.node_bounds(e.node), kids, cfg,
                       mix_seed(seed, static_cast<uint64_t>(e.node.level), e.node.index));
    for (int j = 0; j < 8; ++j) out.split_children.emplace_back(e.children[j], reports[j]);
  }
  return out;
}

}  // namespace octfield
