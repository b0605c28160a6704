#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "octfield/distill.hpp"

using namespace octfield;

namespace {

// Adam moves each parameter by roughly the learning rate per step, so the
// output shift a schedule can reach scales with the layer widths.  Structural
// tests use a tiny network; convergence tests use wider ones so the asserted
// error levels are actually reachable within their schedules.
NetworkArch tiny_arch() {
  NetworkArch a;
  a.width = 6;
  a.depth = 2;
  a.view_width = 5;
  a.enc.freq_position = 2;
  a.enc.freq_direction = 1;
  return a;
}

NetworkArch mid_arch() {
  NetworkArch a;
  a.width = 32;
  a.depth = 8;
  a.view_width = 64;
  return a;
}

// All-zero parameters except output biases: emits exact constants everywhere.
std::shared_ptr<LeafNetwork> constant_net(const NetworkArch& arch, double sigma_raw,
                                          const Vec3& rgb_raw) {
  auto net = std::make_shared<LeafNetwork>(arch);
  net->params(net->density_off() + net->arch.width) = static_cast<float>(sigma_raw);
  for (int ch = 0; ch < 3; ++ch)
    net->params(net->out_b_off() + ch) = static_cast<float>(rgb_raw[ch]);
  return net;
}

// Smooth, view-dependent teacher: deterministic init plus randomized output
// heads (scaled so the field amplitude is width-independent) so density and
// color vary over the box without extreme values.  A fresh init alone would
// not do: zero output heads make every fresh network emit the exact same
// constant field, which is a zero-gradient fixed point of distillation.
std::shared_ptr<LeafNetwork> smooth_net(const NetworkArch& arch, uint64_t seed,
                                        double scale) {
  auto net = std::make_shared<LeafNetwork>(arch);
  net->init(seed);
  Rng rng(mix_seed(seed, 77));
  const double sd = scale / std::sqrt(static_cast<double>(arch.width));
  for (int64_t i = net->density_off(); i < net->view_w_off(); ++i)
    net->params(i) += static_cast<float>(sd * rng.normal());
  const double sv = scale / std::sqrt(static_cast<double>(arch.view_width));
  for (int64_t i = net->out_w_off(); i < net->out_w_off() + 3 * net->arch.view_width + 3; ++i)
    net->params(i) += static_cast<float>(sv * rng.normal());
  return net;
}

struct EvalPoint {
  Vec3 pos;
  Vec3 dir;
};

std::vector<EvalPoint> heldout_points(const Aabb& box, int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<EvalPoint> pts(n);
  for (auto& p : pts) {
    p.pos = Vec3{rng.uniform(box.min.x, box.max.x), rng.uniform(box.min.y, box.max.y),
                 rng.uniform(box.min.z, box.max.z)};
    double z = rng.uniform(-1.0, 1.0), phi = rng.uniform(0.0, 6.283185307179586);
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    p.dir = Vec3{r * std::cos(phi), r * std::sin(phi), z};
  }
  return pts;
}

struct NetOutput {
  double sigma;
  Vec3 rgb;
};

NetOutput eval_net(const LeafNetwork& net, const Aabb& box, const EvalPoint& p) {
  Eigen::Matrix<float, 3, Eigen::Dynamic> pos(3, 1), dir(3, 1);
  Vec3 local = node_local(box, p.pos);
  pos.col(0) << float(local.x), float(local.y), float(local.z);
  dir.col(0) << float(p.dir.x), float(p.dir.y), float(p.dir.z);
  Eigen::VectorXf sigma;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic> rgb;
  forward_full_batch(net, pos, dir, ActivationNoise::eval_mode(net.arch.act), nullptr,
                     sigma, rgb);
  return {double(sigma(0)), Vec3{rgb(0, 0), rgb(1, 0), rgb(2, 0)}};
}

// Mean squared output gap (density plus color channels) between a student on
// its own box and a reference evaluated at the same world points.
template <class RefFn>
double heldout_mse(const LeafNetwork& student, const Aabb& student_box,
                   const std::vector<EvalPoint>& pts, RefFn&& ref) {
  double acc = 0.0;
  for (const EvalPoint& p : pts) {
    NetOutput s = eval_net(student, student_box, p);
    NetOutput t = ref(p);
    double d = s.sigma - t.sigma;
    acc += d * d;
    for (int ch = 0; ch < 3; ++ch) {
      double dc = s.rgb[ch] - t.rgb[ch];
      acc += dc * dc;
    }
  }
  return acc / static_cast<double>(pts.size());
}

template <class RefFn>
double sigma_rel_rms(const LeafNetwork& student, const Aabb& student_box,
                     const std::vector<EvalPoint>& pts, RefFn&& ref) {
  double num = 0.0, den = 0.0;
  for (const EvalPoint& p : pts) {
    double s = eval_net(student, student_box, p).sigma;
    double t = ref(p).sigma;
    num += (s - t) * (s - t);
    den += t * t;
  }
  return std::sqrt(num / std::max(den, 1e-30));
}

}  // namespace

TEST_CASE("zero pre-training steps leave the fresh networks untouched", "[distill]") {
  auto parent = constant_net(tiny_arch(), 1.0, {0.5, -0.5, 0.0});
  Aabb box{{0, 0, 0}, {1, 1, 1}};
  std::array<std::shared_ptr<LeafNetwork>, 8> kids;
  std::vector<Eigen::VectorXf> before;
  for (int j = 0; j < 8; ++j) {
    kids[j] = std::make_shared<LeafNetwork>(tiny_arch());
    kids[j]->init(100 + j);
    before.push_back(kids[j]->params);
  }
  DistillConfig cfg;
  cfg.steps = 0;
  auto reports = pretrain_split(*parent, box, kids, cfg, 1);
  for (int j = 0; j < 8; ++j) {
    CHECK(reports[j].steps_run == 0);
    CHECK(kids[j]->params == before[j]);
  }
}

TEST_CASE("children distilled from a constant parent match its constants", "[distill]") {
  auto parent = constant_net(mid_arch(), 0.5, {0.3, -0.3, 0.2});
  const double sigma_target = std::log1p(std::exp(0.5));
  const Vec3 rgb_target{1.0 / (1.0 + std::exp(-0.3)), 1.0 / (1.0 + std::exp(0.3)),
                        1.0 / (1.0 + std::exp(-0.2))};
  Aabb box{{-1, -1, -1}, {1, 1, 1}};

  std::array<std::shared_ptr<LeafNetwork>, 8> kids;
  for (int j = 0; j < 8; ++j) {
    kids[j] = std::make_shared<LeafNetwork>(mid_arch());
    kids[j]->init(200 + j);
  }
  DistillConfig cfg;
  cfg.steps = 1600;
  cfg.batch = 256;
  auto reports = pretrain_split(*parent, box, kids, cfg, 2);

  auto constant_ref = [&](const EvalPoint&) { return NetOutput{sigma_target, rgb_target}; };
  for (int j = 0; j < 8; ++j) {
    CHECK(reports[j].steps_run == cfg.steps);
    CHECK(reports[j].final_loss < reports[j].initial_loss);
    auto pts = heldout_points(box.octant(j), 200, 900 + j);
    double mse = heldout_mse(*kids[j], box.octant(j), pts, constant_ref);
    INFO("child " << j);
    CHECK(mse < 1e-4);
  }
}

TEST_CASE("a smooth parent distills into its octants", "[distill]") {
  // Full-size networks with the stock schedule: the progress guarantee is a
  // property of the production configuration, and narrower nets cannot cover
  // as much output distance in the same number of optimizer steps.
  auto parent = smooth_net(NetworkArch{}, 42, 0.20);
  Aabb box{{0, 0, 0}, {2, 2, 2}};
  std::array<std::shared_ptr<LeafNetwork>, 8> kids;
  for (int j = 0; j < 8; ++j) {
    kids[j] = std::make_shared<LeafNetwork>(NetworkArch{});
    kids[j]->init(300 + j);
  }

  auto parent_ref = [&](const EvalPoint& p) { return eval_net(*parent, box, p); };

  // Held-out error of the fresh children, before any training.  Progress is
  // judged on the split as a whole: a lucky child may start so close to the
  // teacher that a tenfold reduction of its own tiny gap is not reachable.
  double init_err = 0.0;
  std::array<std::vector<EvalPoint>, 8> pts;
  for (int j = 0; j < 8; ++j) {
    pts[j] = heldout_points(box.octant(j), 250, 1700 + j);
    init_err += heldout_mse(*kids[j], box.octant(j), pts[j], parent_ref);
  }

  DistillConfig cfg;
  pretrain_split(*parent, box, kids, cfg, 3);

  double final_err = 0.0;
  for (int j = 0; j < 8; ++j)
    final_err += heldout_mse(*kids[j], box.octant(j), pts[j], parent_ref);
  CHECK(final_err <= 0.10 * init_err);

  for (int j = 0; j < 8; ++j) {
    INFO("child " << j);
    CHECK(sigma_rel_rms(*kids[j], box.octant(j), pts[j], parent_ref) < 0.05);
  }
}

TEST_CASE("a parent distilled from identical constant children matches them", "[distill]") {
  auto teacher = constant_net(mid_arch(), 0.9, {-0.6, 0.3, 1.0});
  const double sigma_target = std::log1p(std::exp(0.9));
  const Vec3 rgb_target{1.0 / (1.0 + std::exp(0.6)), 1.0 / (1.0 + std::exp(-0.3)),
                        1.0 / (1.0 + std::exp(-1.0))};
  std::array<std::shared_ptr<const LeafNetwork>, 8> children;
  for (int j = 0; j < 8; ++j) children[j] = teacher;

  LeafNetwork parent(mid_arch());
  parent.init(7);
  Aabb box{{-1, -1, -1}, {1, 1, 1}};
  DistillConfig cfg;
  cfg.steps = 1600;
  cfg.batch = 256;
  DistillReport rep = pretrain_merge(children, parent, box, cfg, 4);
  CHECK(rep.steps_run == cfg.steps);

  auto pts = heldout_points(box, 400, 1234);
  auto constant_ref = [&](const EvalPoint&) { return NetOutput{sigma_target, rgb_target}; };
  CHECK(heldout_mse(parent, box, pts, constant_ref) < 1e-4);
}

TEST_CASE("switched-off octants teach vacuum", "[distill]") {
  auto solid = constant_net(mid_arch(), 1.5, {0.0, 0.0, 0.0});
  const double solid_sigma = std::log1p(std::exp(1.5));
  std::array<std::shared_ptr<const LeafNetwork>, 8> children{};
  for (int j = 0; j < 8; j += 2) children[j] = solid;  // odd octants inactive

  LeafNetwork parent(mid_arch());
  parent.init(8);
  Aabb box{{0, 0, 0}, {1, 1, 1}};
  DistillConfig cfg;
  cfg.steps = 1600;
  cfg.batch = 256;
  pretrain_merge(children, parent, box, cfg, 5);

  // Probe octant interiors (their central halves) to stay clear of the
  // smooth transition the network must put at octant boundaries.
  for (int j = 0; j < 8; ++j) {
    Aabb oct = box.octant(j);
    Vec3 c = oct.center(), e = oct.extent();
    Aabb inner{c - e * 0.25, c + e * 0.25};
    auto pts = heldout_points(inner, 120, 4000 + j);
    double mean_sigma = 0.0;
    for (const auto& p : pts) mean_sigma += eval_net(parent, box, p).sigma;
    mean_sigma /= static_cast<double>(pts.size());
    INFO("octant " << j << " mean sigma " << mean_sigma);
    if (children[j])
      CHECK(std::abs(mean_sigma - solid_sigma) < 0.15 * solid_sigma);
    else
      CHECK(mean_sigma < 0.25);
  }
}

TEST_CASE("split then merge round-trips the density field", "[distill]") {
  auto original = smooth_net(mid_arch(), 99, 0.4);
  Aabb box{{-1, -1, -1}, {1, 1, 1}};

  std::array<std::shared_ptr<LeafNetwork>, 8> kids;
  for (int j = 0; j < 8; ++j) {
    kids[j] = std::make_shared<LeafNetwork>(mid_arch());
    kids[j]->init(500 + j);
  }
  DistillConfig cfg;
  cfg.steps = 1600;
  cfg.batch = 256;
  pretrain_split(*original, box, kids, cfg, 6);

  std::array<std::shared_ptr<const LeafNetwork>, 8> teachers;
  for (int j = 0; j < 8; ++j) teachers[j] = kids[j];
  LeafNetwork rebuilt(mid_arch());
  rebuilt.init(501);
  pretrain_merge(teachers, rebuilt, box, cfg, 7);

  auto pts = heldout_points(box, 600, 7777);
  auto original_ref = [&](const EvalPoint& p) { return eval_net(*original, box, p); };
  CHECK(sigma_rel_rms(rebuilt, box, pts, original_ref) < 0.10);
}

TEST_CASE("teachers stay frozen and unrelated networks untouched", "[distill]") {
  OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 2);
  // The root must carry a non-constant field: a freshly initialized net has
  // zero output heads, so distilling one fresh net from another already has
  // zero loss and moves nothing.
  auto root_net = smooth_net(tiny_arch(), 31, 0.5);
  model.set_network(NodeId{0, 0}, root_net);

  DistillConfig cfg;
  cfg.steps = 3;
  cfg.batch = 128;

  TreeDecision d1;
  d1.tree_version = model.edit_version();
  d1.actions[NodeId{0, 0}] = NodeAction::Split;
  EditLog log1 = apply_decisions(model, d1, 11);
  distill_edits(model, log1, cfg, 21);

  // Split the first child; its seven siblings must not move during transfer.
  std::vector<Eigen::VectorXf> sibling_params;
  for (uint64_t j = 1; j < 8; ++j)
    sibling_params.push_back(model.status(NodeId{1, j}).network->params);
  Eigen::VectorXf teacher_before = model.status(NodeId{1, 0}).network->params;

  TreeDecision d2;
  d2.tree_version = model.edit_version();
  d2.actions[NodeId{1, 0}] = NodeAction::Split;
  EditLog log2 = apply_decisions(model, d2, 12);
  std::vector<Eigen::VectorXf> fresh_params;
  for (uint64_t j = 0; j < 8; ++j)
    fresh_params.push_back(model.status(NodeId{2, j}).network->params);

  distill_edits(model, log2, cfg, 22);

  REQUIRE(log2.splits.size() == 1);
  CHECK(log2.splits[0].teacher->params == teacher_before);
  for (uint64_t j = 1; j < 8; ++j)
    CHECK(model.status(NodeId{1, j}).network->params == sibling_params[j - 1]);
  bool moved = false;
  for (uint64_t j = 0; j < 8; ++j)
    if (model.status(NodeId{2, j}).network->params != fresh_params[j]) moved = true;
  CHECK(moved);

  // Merge the grandchildren back; the frozen child teachers must not move.
  std::vector<Eigen::VectorXf> gc_params;
  for (uint64_t j = 0; j < 8; ++j)
    gc_params.push_back(model.status(NodeId{2, j}).network->params);
  TreeDecision d3;
  d3.tree_version = model.edit_version();
  for (uint64_t j = 0; j < 8; ++j) d3.actions[NodeId{2, j}] = NodeAction::Merge;
  EditLog log3 = apply_decisions(model, d3, 13);
  distill_edits(model, log3, cfg, 23);
  REQUIRE(log3.merges.size() == 1);
  for (int j = 0; j < 8; ++j) {
    REQUIRE(log3.merges[0].teachers[j] != nullptr);
    CHECK(log3.merges[0].teachers[j]->params == gc_params[j]);
  }
  model.validate();
}

TEST_CASE("runaway learning rates abort with diagnostics", "[distill]") {
  auto parent = constant_net(tiny_arch(), 1.2, {0.3, 0.3, 0.3});
  Aabb box{{0, 0, 0}, {1, 1, 1}};
  std::array<std::shared_ptr<LeafNetwork>, 8> kids;
  for (int j = 0; j < 8; ++j) {
    kids[j] = std::make_shared<LeafNetwork>(tiny_arch());
    kids[j]->init(600 + j);
  }
  DistillConfig cfg;
  cfg.lr = 30.0;
  cfg.steps = 50;
  CHECK_THROWS_WITH(pretrain_split(*parent, box, kids, cfg, 9),
                    Catch::Matchers::ContainsSubstring("diverged"));
}
