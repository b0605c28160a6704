#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "octfield/rng.hpp"
#include "octfield/sampling.hpp"
#include "octfield/tree_opt.hpp"

using namespace octfield;

namespace {

// Brute-force reference: enumerate every raw per-node choice, coerce minority
// merge votes to keep, and take the cheapest feasible assignment with the
// lexicographic keep < merge < split tie-break over nodes in problem order.
struct OracleResult {
  bool feasible = false;
  double objective = 0.0;
  long eighths = 0;
  std::vector<NodeAction> actions;
};

OracleResult brute_force(const TreeDecisionProblem& p) {
  const int m = static_cast<int>(p.nodes.size());
  std::map<NodeId, std::vector<int>> groups;
  for (int i = 0; i < m; ++i) {
    NodeId key = p.nodes[i].id.level > 0 ? parent_id(p.nodes[i].id) : p.nodes[i].id;
    groups[key].push_back(i);
  }
  std::vector<std::vector<NodeAction>> raw_options(m);
  for (int i = 0; i < m; ++i) {
    raw_options[i].push_back(NodeAction::Keep);
    if (p.nodes[i].id.level > 0 && p.nodes[i].can_merge)
      raw_options[i].push_back(NodeAction::Merge);
    if (p.nodes[i].can_split) raw_options[i].push_back(NodeAction::Split);
  }

  OracleResult best;
  std::vector<int> ranks(m), best_ranks;
  std::vector<size_t> pick(m, 0);
  std::vector<NodeAction> assign(m);
  for (;;) {
    for (int i = 0; i < m; ++i) assign[i] = raw_options[i][pick[i]];
    for (const auto& [key, members] : groups) {
      bool unanimous = true;
      for (int i : members)
        if (assign[i] != NodeAction::Merge) unanimous = false;
      if (!unanimous)
        for (int i : members)
          if (assign[i] == NodeAction::Merge) assign[i] = NodeAction::Keep;
    }
    long eighths = 0;
    double cost = 0.0;
    for (int i = 0; i < m; ++i) {
      eighths += action_eighths(assign[i]);
      cost += option_cost(p.nodes[i].stats, assign[i], p.lambda);
      ranks[i] = assign[i] == NodeAction::Keep ? 0 : assign[i] == NodeAction::Merge ? 1 : 2;
    }
    if (eighths <= 8 * p.leaf_budget) {
      if (!best.feasible || cost < best.objective ||
          (cost == best.objective && ranks < best_ranks)) {
        best.feasible = true;
        best.objective = cost;
        best.eighths = eighths;
        best.actions = assign;
        best_ranks = ranks;
      }
    }
    int d = m - 1;
    while (d >= 0 && ++pick[d] == raw_options[d].size()) pick[d--] = 0;
    if (d < 0) break;
  }
  return best;
}

TreeDecisionProblem random_problem(Rng& rng) {
  TreeDecisionProblem p;
  const double lambdas[3] = {0.5, 1.0, 2.0};
  p.lambda = lambdas[rng.below(3)];
  const int m = 1 + static_cast<int>(rng.below(8));
  const bool quantize = rng.below(2) == 0;
  auto stat = [&] {
    return quantize ? 0.25 * static_cast<double>(rng.below(5)) : rng.uniform();
  };
  int placed = 0;
  uint64_t parent_idx = 0;
  while (placed < m) {
    int gsize = std::min(m - placed, 1 + static_cast<int>(rng.below(8)));
    bool gmerge = rng.below(2) == 0;
    for (int j = 0; j < gsize; ++j) {
      TreeDecisionProblem::Entry e;
      e.id = NodeId{2, parent_idx * 8 + static_cast<uint64_t>(j)};
      e.stats.alpha = {stat(), stat(), stat()};
      e.stats.beta = {stat(), stat(), stat()};
      e.stats.mean_opacity = 1.0;  // keep the deactivation pass out of the way
      e.can_split = rng.below(2) == 0;
      e.can_merge = gmerge;
      p.nodes.push_back(e);
    }
    ++parent_idx;
    placed += gsize;
  }
  p.leaf_budget = 1 + static_cast<long>(rng.below(8 * static_cast<uint64_t>(m)));
  return p;
}

// Constant-density stratified probe of one leaf.
NodeSampleSet const_set(const OctreeModel& model, const NodeId& id, int n, double sigma) {
  NodeSampleSet s;
  s.node = id;
  s.n_per_axis = n;
  Rng rng(1);
  s.positions = stratified_node_samples(model.node_bounds(id), n, false, rng);
  s.sigma.assign(s.positions.size(), sigma);
  return s;
}

double opac(double sigma, double sbar) { return 1.0 - std::exp(-sigma * sbar); }

NetworkArch tiny_arch() {
  NetworkArch a;
  a.width = 6;
  a.depth = 2;
  a.view_width = 5;
  a.enc.freq_position = 2;
  a.enc.freq_direction = 1;
  return a;
}

}  // namespace

TEST_CASE("occupancy statistics match hand-computed means", "[tree_opt]") {
  OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
  DensityCache cache;

  SECTION("vacuum and saturation") {
    cache[NodeId{0, 0}] = const_set(model, NodeId{0, 0}, 4, 0.0);
    StatTriple a = compute_alpha(model, cache, NodeId{0, 0});
    CHECK(a.up == 0.0);
    CHECK(a.eq == 0.0);
    CHECK(a.down == 0.0);
    cache[NodeId{0, 0}] = const_set(model, NodeId{0, 0}, 4, 1e6);
    a = compute_alpha(model, cache, NodeId{0, 0});
    CHECK(a.eq == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("constant density: all three statistics collapse to one opacity") {
    cache[NodeId{0, 0}] = const_set(model, NodeId{0, 0}, 4, 2.0);
    double v = opac(2.0, 0.25);  // edge 1, 4 samples per axis
    StatTriple a = compute_alpha(model, cache, NodeId{0, 0});
    CHECK(a.eq == Catch::Approx(v).epsilon(1e-12));
    CHECK(a.down == Catch::Approx(v).epsilon(1e-12));
    CHECK(a.up == Catch::Approx(v / 8.0).epsilon(1e-12));  // the root is its own region
  }

  SECTION("uneven octant counts: octant restriction reweights the mass") {
    // Odd grid: one lattice point per axis below the center, two above, so
    // octant 0 holds exactly one of the 27 samples. Only that sample is hot.
    NodeSampleSet s = const_set(model, NodeId{0, 0}, 3, 0.0);
    s.sigma[0] = 5.0;  // x-fastest order: first point is (1/6, 1/6, 1/6)
    cache[NodeId{0, 0}] = s;
    double v = opac(5.0, 1.0 / 3.0);
    StatTriple a = compute_alpha(model, cache, NodeId{0, 0});
    CHECK(a.eq == Catch::Approx(v / 27.0).epsilon(1e-12));
    CHECK(a.down == Catch::Approx(v / 8.0).epsilon(1e-12));
  }

  SECTION("missing samples are an error") {
    CHECK_THROWS_WITH(compute_alpha(model, cache, NodeId{0, 0}),
                      Catch::Matchers::ContainsSubstring("no density samples"));
  }
}

TEST_CASE("occupancy recursion averages sibling regions", "[tree_opt]") {
  OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
  model.split(NodeId{0, 0}, {});
  model.split(NodeId{1, 0}, {});

  DensityCache cache;
  for (uint64_t g = 0; g < 8; ++g)
    cache[NodeId{2, g}] = const_set(model, NodeId{2, g}, 2, 1.0 + double(g));
  for (uint64_t c = 1; c < 8; ++c)
    cache[NodeId{1, c}] = const_set(model, NodeId{1, c}, 2, 10.0 + double(c));

  // Direct recomputation: child 0's region is the mean of its grandchildren.
  double region_child0 = 0.0;
  for (int g = 0; g < 8; ++g) region_child0 += opac(1.0 + g, 0.125) / 8.0;
  double region_root = region_child0 / 8.0;
  for (int c = 1; c < 8; ++c) region_root += opac(10.0 + c, 0.25) / 8.0;

  StatTriple a = compute_alpha(model, cache, NodeId{1, 3});
  CHECK(a.up == Catch::Approx(region_root / 8.0).epsilon(1e-12));

  SECTION("switched-off siblings count as vacuum") {
    model.deactivate(NodeId{1, 7});
    cache.erase(NodeId{1, 7});
    double without = region_root - opac(17.0, 0.25) / 8.0;
    a = compute_alpha(model, cache, NodeId{1, 3});
    CHECK(a.up == Catch::Approx(without / 8.0).epsilon(1e-12));
  }

  SECTION("a leaf missing from the cache poisons the recursion") {
    cache.erase(NodeId{2, 4});
    CHECK_THROWS_WITH(compute_alpha(model, cache, NodeId{1, 3}),
                      Catch::Matchers::ContainsSubstring("missing active leaf"));
  }
}

TEST_CASE("error apportionment distributes ray loss by weight", "[tree_opt]") {
  OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
  model.split(NodeId{0, 0}, {});
  const NodeId a{1, 0}, b{1, 1};

  SECTION("single full-weight sample takes the whole ray error") {
    RenderErrorBatch batch;
    batch.samples = {{a, 0, Vec3{0.1, 0.1, 0.1}, 0.7}};
    batch.ray_error = {0.5};
    ErrorApportionment app(model, batch);
    CHECK(app.node_mean(a) == Catch::Approx(0.5).epsilon(1e-12));
    CHECK(app.node_mean(b) == 0.0);
  }

  SECTION("zero-weight rays contribute nothing") {
    RenderErrorBatch batch;
    batch.samples = {{a, 0, Vec3{0.1, 0.1, 0.1}, 0.0}};
    batch.ray_error = {5.0};
    ErrorApportionment app(model, batch);
    CHECK(app.node_mean(a) == 0.0);
  }

  SECTION("weights split one ray's error across nodes") {
    RenderErrorBatch batch;
    batch.samples = {{a, 0, Vec3{0.1, 0.1, 0.1}, 0.3},
                     {b, 0, Vec3{0.6, 0.1, 0.1}, 0.1}};
    batch.ray_error = {0.8};
    ErrorApportionment app(model, batch);
    CHECK(app.node_mean(a) == Catch::Approx(0.75 * 0.8).epsilon(1e-12));
    CHECK(app.node_mean(b) == Catch::Approx(0.25 * 0.8).epsilon(1e-12));
    StatTriple beta = app.beta(a);
    CHECK(beta.eq == Catch::Approx(0.6).epsilon(1e-12));
    // Parent region: mean over the 8 children of the root, divided by 8.
    CHECK(beta.up == Catch::Approx((0.6 + 0.2) / 64.0).epsilon(1e-12));
  }

  SECTION("octant restriction of a node's own samples") {
    RenderErrorBatch batch;
    // Two samples in node a (cell [0,0.5)^3): one in its lower octant, one in
    // its upper octant, from rays with errors 1 and 3.
    batch.samples = {{a, 0, Vec3{0.1, 0.1, 0.1}, 1.0},
                     {a, 1, Vec3{0.4, 0.4, 0.4}, 1.0}};
    batch.ray_error = {1.0, 3.0};
    ErrorApportionment app(model, batch);
    CHECK(app.node_mean(a) == Catch::Approx(2.0).epsilon(1e-12));
    CHECK(app.octant_mean(a) == Catch::Approx((1.0 + 3.0) / 8.0).epsilon(1e-12));
  }

  SECTION("apportioned error is conserved over random batches") {
    Rng rng(404);
    for (int trial = 0; trial < 30; ++trial) {
      RenderErrorBatch batch;
      int n_rays = 1 + static_cast<int>(rng.below(10));
      batch.ray_error.resize(n_rays);
      for (double& e : batch.ray_error) e = rng.uniform();
      std::map<NodeId, long> count;
      int n_samples = 1 + static_cast<int>(rng.below(40));
      for (int s = 0; s < n_samples; ++s) {
        NodeId node{1, rng.below(8)};
        double w = rng.below(4) == 0 ? 0.0 : rng.uniform();
        batch.samples.push_back(
            {node, static_cast<int>(rng.below(n_rays)),
             Vec3{rng.uniform(), rng.uniform(), rng.uniform()}, w});
        ++count[node];
      }
      std::vector<double> ray_weight(n_rays, 0.0);
      for (const auto& s : batch.samples) ray_weight[s.ray_id] += s.weight;
      double expected = 0.0;
      for (int r = 0; r < n_rays; ++r)
        if (ray_weight[r] > 0.0) expected += batch.ray_error[r];
      ErrorApportionment app(model, batch);
      double recovered = 0.0;
      for (const auto& [node, c] : count)
        recovered += app.node_mean(node) * static_cast<double>(c);
      CHECK(recovered == Catch::Approx(expected).margin(1e-9));
    }
  }

  SECTION("on a single ray the node means are bounded by the ray error") {
    Rng rng(405);
    for (int trial = 0; trial < 30; ++trial) {
      RenderErrorBatch batch;
      batch.ray_error = {rng.uniform()};
      int n_samples = 1 + static_cast<int>(rng.below(12));
      for (int s = 0; s < n_samples; ++s)
        batch.samples.push_back({NodeId{1, rng.below(8)}, 0,
                                 Vec3{rng.uniform(), rng.uniform(), rng.uniform()},
                                 rng.uniform()});
      ErrorApportionment app(model, batch);
      double total = 0.0;
      for (uint64_t j = 0; j < 8; ++j) total += app.node_mean(NodeId{1, j});
      CHECK(total <= batch.ray_error[0] + 1e-12);
    }
  }

  SECTION("a sample naming an unknown ray is rejected") {
    RenderErrorBatch batch;
    batch.samples = {{a, 3, Vec3{0.1, 0.1, 0.1}, 0.5}};
    batch.ray_error = {0.5};
    CHECK_THROWS_WITH(ErrorApportionment(model, batch),
                      Catch::Matchers::ContainsSubstring("unknown ray"));
  }
}

TEST_CASE("assembled problems carry costs, flags and the tree version", "[tree_opt]") {
  SECTION("option costs are (1 - alpha) + lambda * beta") {
    NodeStats s;
    s.alpha = {0.25, 0.5, 0.75};
    s.beta = {0.5, 0.25, 1.0};
    CHECK(option_cost(s, NodeAction::Merge, 2.0) == 1.75);
    CHECK(option_cost(s, NodeAction::Keep, 2.0) == 1.0);
    CHECK(option_cost(s, NodeAction::Split, 2.0) == 2.25);
    CHECK(action_eighths(NodeAction::Merge) == 1);
    CHECK(action_eighths(NodeAction::Keep) == 8);
    CHECK(action_eighths(NodeAction::Split) == 64);
  }

  SECTION("flags reflect the tree structure") {
    OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 2);
    model.split(NodeId{0, 0}, {});
    model.split(NodeId{1, 0}, {});
    std::map<NodeId, NodeStats> stats;
    for (const NodeId& id : model.active_leaves()) stats[id] = NodeStats{};
    TreeDecisionProblem p = assemble(model, stats, 32, 1.5, 0.02);
    REQUIRE(p.nodes.size() == 15);
    CHECK(p.leaf_budget == 32);
    CHECK(p.lambda == 1.5);
    CHECK(p.deactivation_threshold == 0.02);
    CHECK(p.tree_version == model.edit_version());
    for (const auto& e : p.nodes) {
      if (e.id.level == 1) {
        CHECK(e.can_split);       // below max_level
        CHECK_FALSE(e.can_merge); // sibling (1,0) is internal
      } else {
        CHECK_FALSE(e.can_split); // grandchildren sit at max_level
        CHECK(e.can_merge);       // all children of (1,0) are leaves
      }
    }
    stats.erase(NodeId{1, 5});
    CHECK_THROWS_WITH(assemble(model, stats, 32),
                      Catch::Matchers::ContainsSubstring("no statistics"));
  }
}

TEST_CASE("the solver matches exhaustive enumeration", "[tree_opt]") {
  Rng rng(2026);
  int feasible_seen = 0, infeasible_seen = 0, tie_capable = 0;
  for (int trial = 0; trial < 200; ++trial) {
    TreeDecisionProblem p = random_problem(rng);
    OracleResult oracle = brute_force(p);
    if (!oracle.feasible) {
      ++infeasible_seen;
      CHECK_THROWS_WITH(solve(p), Catch::Matchers::ContainsSubstring("infeasible"));
      continue;
    }
    ++feasible_seen;
    if (p.nodes[0].stats.alpha.up == 0.0 || p.nodes[0].stats.alpha.up == 0.25)
      ++tie_capable;  // quantized instance: exact ties do occur
    TreeDecision d = solve(p);
    REQUIRE(d.actions.size() == p.nodes.size());
    CHECK(d.objective == Catch::Approx(oracle.objective).margin(1e-12));
    CHECK(d.eighths_used == oracle.eighths);
    CHECK(d.eighths_used <= 8 * p.leaf_budget);
    for (size_t i = 0; i < p.nodes.size(); ++i) {
      INFO("trial " << trial << " node " << p.nodes[i].id.str());
      CHECK(d.actions.at(p.nodes[i].id) == oracle.actions[i]);
    }
  }
  CHECK(feasible_seen >= 150);
  CHECK(infeasible_seen >= 5);
  CHECK(tie_capable >= 20);
}

TEST_CASE("the solver honors coordination, budget pressure and ties", "[tree_opt]") {
  auto entry = [](NodeId id, StatTriple alpha, bool can_split, bool can_merge) {
    TreeDecisionProblem::Entry e;
    e.id = id;
    e.stats.alpha = alpha;
    e.stats.mean_opacity = 1.0;
    e.can_split = can_split;
    e.can_merge = can_merge;
    return e;
  };

  SECTION("indifferent nodes keep (every option costs one)") {
    TreeDecisionProblem p;
    for (uint64_t j = 0; j < 8; ++j)
      p.nodes.push_back(entry(NodeId{1, j}, {0, 0, 0}, true, true));
    p.leaf_budget = 64;
    TreeDecision d = solve(p);
    CHECK(d.objective == 8.0);
    CHECK(d.eighths_used == 64);
    for (const auto& [id, a] : d.actions) CHECK(a == NodeAction::Keep);
  }

  SECTION("vacuum siblings with a dense parent region merge together") {
    TreeDecisionProblem p;
    for (uint64_t j = 0; j < 8; ++j)
      p.nodes.push_back(entry(NodeId{1, j}, {0.9, 0.0, 0.0}, true, true));
    p.leaf_budget = 8;
    TreeDecision d = solve(p);
    for (const auto& [id, a] : d.actions) CHECK(a == NodeAction::Merge);
    CHECK(d.objective == Catch::Approx(8 * 0.1).epsilon(1e-12));
    CHECK(d.eighths_used == 8);
  }

  SECTION("a split must be paid for by merges elsewhere") {
    TreeDecisionProblem p;
    p.nodes.push_back(entry(NodeId{2, 0}, {0.0, 0.1, 0.95}, true, true));
    for (uint64_t j = 1; j < 8; ++j)
      p.nodes.push_back(entry(NodeId{2, j}, {0.0, 0.5, 0.0}, true, true));
    for (uint64_t j = 8; j < 16; ++j)
      p.nodes.push_back(entry(NodeId{2, j}, {0.8, 0.05, 0.0}, true, true));

    p.leaf_budget = 16;  // exactly the current leaf count
    TreeDecision d = solve(p);
    CHECK(d.actions.at(NodeId{2, 0}) == NodeAction::Split);
    for (uint64_t j = 1; j < 8; ++j) CHECK(d.actions.at(NodeId{2, j}) == NodeAction::Keep);
    for (uint64_t j = 8; j < 16; ++j) CHECK(d.actions.at(NodeId{2, j}) == NodeAction::Merge);
    CHECK(d.eighths_used == 64 + 7 * 8 + 8);

    p.leaf_budget = 15;  // one leaf less: the split no longer fits
    d = solve(p);
    CHECK(d.actions.at(NodeId{2, 0}) == NodeAction::Keep);
    for (uint64_t j = 8; j < 16; ++j) CHECK(d.actions.at(NodeId{2, j}) == NodeAction::Merge);
  }

  SECTION("exact merge/keep tie goes to keep") {
    TreeDecisionProblem p;
    p.nodes.push_back(entry(NodeId{1, 2}, {0.0, 0.0, 0.0}, true, true));
    p.leaf_budget = 8;
    TreeDecision d = solve(p);
    CHECK(d.actions.at(NodeId{1, 2}) == NodeAction::Keep);
    p.nodes[0].stats.alpha.up = 0.5;  // now merging is strictly cheaper
    d = solve(p);
    CHECK(d.actions.at(NodeId{1, 2}) == NodeAction::Merge);
  }

  SECTION("an unpayable budget is rejected") {
    TreeDecisionProblem p;
    p.nodes.push_back(entry(NodeId{2, 0}, {0, 0, 0}, false, false));
    p.nodes.push_back(entry(NodeId{2, 8}, {0, 0, 0}, false, false));
    p.leaf_budget = 1;
    CHECK_THROWS_WITH(solve(p), Catch::Matchers::ContainsSubstring("infeasible"));
  }

  SECTION("raising the deactivation threshold never spares a leaf") {
    TreeDecisionProblem p;
    const double opacities[4] = {0.001, 0.005, 0.02, 0.5};
    for (uint64_t j = 0; j < 4; ++j) {
      p.nodes.push_back(entry(NodeId{1, j}, {0, 0.5, 0}, true, false));
      p.nodes.back().stats.mean_opacity = opacities[j];
    }
    p.leaf_budget = 8;
    std::vector<std::set<NodeId>> off;
    for (double thr : {0.002, 0.01, 0.1}) {
      p.deactivation_threshold = thr;
      TreeDecision d = solve(p);
      std::set<NodeId> s;
      for (const auto& [id, a] : d.actions)
        if (a == NodeAction::Deactivate) s.insert(id);
      off.push_back(s);
    }
    CHECK(off[0].size() == 1);
    CHECK(off[1].size() == 2);
    CHECK(off[2].size() == 3);
    CHECK(std::includes(off[1].begin(), off[1].end(), off[0].begin(), off[0].end()));
    CHECK(std::includes(off[2].begin(), off[2].end(), off[1].begin(), off[1].end()));
  }

  SECTION("scaling a flat error term cannot flip a dominated choice") {
    TreeDecisionProblem p;
    p.nodes.push_back(entry(NodeId{1, 0}, {0.1, 0.5, 0.9}, true, true));
    p.nodes[0].stats.beta = {0.01, 0.01, 0.01};
    p.leaf_budget = 8;
    TreeDecision d1 = solve(p);
    p.nodes[0].stats.beta = {0.1, 0.1, 0.1};
    TreeDecision d2 = solve(p);
    CHECK(d1.actions.at(NodeId{1, 0}) == NodeAction::Split);
    CHECK(d2.actions.at(NodeId{1, 0}) == NodeAction::Split);
  }
}

TEST_CASE("decisions rewrite the tree and log frozen teachers", "[tree_opt]") {
  SECTION("an empty decision is a no-op") {
    OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
    TreeDecision d;
    d.tree_version = model.edit_version();
    EditLog log = apply_decisions(model, d);
    CHECK(log.empty());
    CHECK(model.nodes().size() == 1);
    model.validate(false);
  }

  SECTION("a stale decision is rejected") {
    OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
    TreeDecision d;
    d.tree_version = model.edit_version();
    model.split(NodeId{0, 0}, {});
    CHECK_THROWS_WITH(apply_decisions(model, d),
                      Catch::Matchers::ContainsSubstring("stale"));
  }

  SECTION("split then merge restores the structure and freezes teachers") {
    OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
    auto net = std::make_shared<LeafNetwork>(tiny_arch());
    net->init(99);
    std::vector<float> before(net->params.data(), net->params.data() + net->params.size());
    model.set_network(NodeId{0, 0}, net);

    TreeDecision split_d;
    split_d.tree_version = model.edit_version();
    split_d.actions[NodeId{0, 0}] = NodeAction::Split;
    EditLog log = apply_decisions(model, split_d, 7);
    REQUIRE(log.splits.size() == 1);
    REQUIRE(log.splits[0].teacher != nullptr);
    for (int64_t i = 0; i < log.splits[0].teacher->params.size(); ++i)
      CHECK(log.splits[0].teacher->params[i] == before[i]);
    bool distinct = false;
    for (int j = 0; j < 8; ++j) {
      const auto& st = model.status(NodeId{1, static_cast<uint64_t>(j)});
      REQUIRE(st.kind == NodeKind::ActiveLeaf);
      REQUIRE(st.network != nullptr);
      if (j > 0 && st.network->params != model.status(NodeId{1, 0}).network->params)
        distinct = true;
    }
    CHECK(distinct);  // fresh children are seeded per node
    model.validate();

    TreeDecision merge_d;
    merge_d.tree_version = model.edit_version();
    for (uint64_t j = 0; j < 8; ++j) merge_d.actions[NodeId{1, j}] = NodeAction::Merge;
    EditLog mlog = apply_decisions(model, merge_d, 8);
    REQUIRE(mlog.merges.size() == 1);
    CHECK(mlog.merges[0].parent == NodeId{0, 0});
    for (int j = 0; j < 8; ++j) CHECK(mlog.merges[0].teachers[j] != nullptr);
    CHECK(model.nodes().size() == 1);
    CHECK(model.status(NodeId{0, 0}).kind == NodeKind::ActiveLeaf);
    CHECK(model.status(NodeId{0, 0}).network != nullptr);
    model.validate();
  }

  SECTION("merges swallow switched-off children") {
    OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
    model.split(NodeId{0, 0}, {});
    TreeDecision d;
    d.tree_version = model.edit_version();
    d.actions[NodeId{1, 3}] = NodeAction::Deactivate;
    for (uint64_t j = 0; j < 8; ++j)
      if (j != 3) d.actions[NodeId{1, j}] = NodeAction::Merge;
    EditLog log = apply_decisions(model, d);
    REQUIRE(log.deactivated.size() == 1);
    CHECK(log.deactivated[0] == NodeId{1, 3});
    REQUIRE(log.merges.size() == 1);
    CHECK(log.merges[0].teachers[3] == nullptr);
    CHECK(model.status(NodeId{0, 0}).kind == NodeKind::ActiveLeaf);
    CHECK(model.nodes().size() == 1);
  }

  SECTION("a minority merge vote leaves the tree alone") {
    OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 3);
    model.split(NodeId{0, 0}, {});
    TreeDecision d;
    d.tree_version = model.edit_version();
    d.actions[NodeId{1, 0}] = NodeAction::Merge;
    for (uint64_t j = 1; j < 8; ++j) d.actions[NodeId{1, j}] = NodeAction::Keep;
    EditLog log = apply_decisions(model, d);
    CHECK(log.empty());
    CHECK(model.nodes().size() == 9);
    model.validate(false);
  }

  SECTION("random edit sequences preserve the spatial partition") {
    OctreeModel model(Aabb{{0, 0, 0}, {1, 1, 1}}, 4);
    Rng rng(606);
    for (int round = 0; round < 12; ++round) {
      TreeDecision d;
      d.tree_version = model.edit_version();
      for (const NodeId& id : model.active_leaves()) {
        uint64_t r = rng.below(10);
        if (r < 3 && id.level < model.max_level())
          d.actions[id] = NodeAction::Split;
        else if (r == 3)
          d.actions[id] = NodeAction::Deactivate;
        else
          d.actions[id] = NodeAction::Keep;
      }
      // Occasionally line a full sibling group up behind a merge.
      std::vector<NodeId> parents;
      for (const auto& [id, st] : model.nodes())
        if (st.kind == NodeKind::Internal && id.level + 1 <= model.max_level()) {
          bool all_leaves = true;
          for (const NodeId& cid : model.child_ids(id))
            if (model.status(cid).kind == NodeKind::Internal) all_leaves = false;
          if (all_leaves) parents.push_back(id);
        }
      if (!parents.empty() && rng.below(2) == 0) {
        NodeId parent = parents[rng.below(parents.size())];
        for (const NodeId& cid : model.child_ids(parent))
          if (model.status(cid).kind == NodeKind::ActiveLeaf)
            d.actions[cid] = NodeAction::Merge;
      }
      apply_decisions(model, d);
      model.validate(false);

      for (int probe = 0; probe < 1000; ++probe) {
        Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
        int covering = 0;
        for (const auto& [id, st] : model.nodes())
          if (st.kind != NodeKind::Internal && model.node_bounds(id).contains_half_open(p))
            ++covering;
        REQUIRE(covering == 1);
        auto leaf = model.locate(p);
        if (leaf) {
          CHECK(model.status(*leaf).kind == NodeKind::ActiveLeaf);
          CHECK(model.node_bounds(*leaf).contains_half_open(p));
        }
      }
    }
  }

  SECTION("problem and decision dumps are valid json") {
    TreeDecisionProblem p;
    TreeDecisionProblem::Entry e;
    e.id = NodeId{1, 4};
    e.stats.alpha = {0.1, 0.2, 0.3};
    e.stats.mean_opacity = 0.2;
    p.nodes.push_back(e);
    p.leaf_budget = 4;
    auto pj = problem_to_json(p);
    CHECK(pj.at("nodes").size() == 1);
    CHECK(pj.at("leaf_budget") == 4);
    TreeDecision d = solve(p);
    auto dj = decision_to_json(d);
    CHECK(dj.at("actions").size() == 1);
    CHECK(dj.at("actions")[0].at("action") == "keep");
  }
}
