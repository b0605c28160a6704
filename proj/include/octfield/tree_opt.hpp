#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "octfield/geometry.hpp"
#include "octfield/network.hpp"
#include "octfield/octree.hpp"
#include "octfield/rng.hpp"

// Structure optimization: per-leaf occupancy and error statistics feed a small
// exact solver that decides, under a leaf budget, which leaves to merge into
// their parent, keep, or split into octants. Near-empty leaves are switched
// off by a threshold pass and structural edits are applied to the tree with a
// log of frozen "teacher" networks for knowledge transfer.

namespace octfield {

// ---------------------------------------------------------------------------
// statistics

struct StatTriple {
  double up = 0.0;    // value if this leaf is merged into its parent
  double eq = 0.0;    // value if it is kept as-is
  double down = 0.0;  // value if it is split into octants
};

struct NodeStats {
  StatTriple alpha;          // occupancy in [0,1] per option
  StatTriple beta;           // apportioned rendering error per option, >= 0
  double mean_opacity = 0.0; // mean per-sample opacity (drives deactivation)
  long sample_count = 0;
};

// Cached density probe of one leaf: a stratified n^3 grid and its densities.
struct NodeSampleSet {
  NodeId node;
  int n_per_axis = 0;
  std::vector<Vec3> positions;
  std::vector<double> sigma;
};

using DensityCache = std::map<NodeId, NodeSampleSet>;

namespace detail {

// Step length that turns a point density into a per-sample opacity: the node
// edge (geometric mean for non-cubic roots) over the grid resolution.
inline double opacity_step(const OctreeModel& model, const NodeId& id, int n_per_axis) {
  if (n_per_axis <= 0)
    throw std::runtime_error("density cache for " + id.str() + " has no grid resolution");
  Vec3 e = model.node_bounds(id).extent();
  return std::cbrt(e.x * e.y * e.z) / n_per_axis;
}

inline double sample_opacity(double sigma, double sbar) {
  return 1.0 - std::exp(-std::max(sigma, 0.0) * sbar);
}

// Mean per-sample opacity of one cached leaf.
inline double cache_mean_opacity(const OctreeModel& model, const NodeSampleSet& set) {
  if (set.sigma.empty())
    throw std::runtime_error("empty density sample set for node " + set.node.str());
  double sbar = opacity_step(model, set.node, set.n_per_axis);
  double acc = 0.0;
  for (double s : set.sigma) acc += sample_opacity(s, sbar);
  return acc / static_cast<double>(set.sigma.size());
}

// Mean opacity over a node's whole region: leaves read the cache, internal
// nodes average their equal-volume children, switched-off space is vacuum.
inline double region_mean_opacity(const OctreeModel& model, const DensityCache& cache,
                                  const NodeId& id) {
  const NodeStatus& st = model.status(id);
  if (st.kind == NodeKind::Inactive) return 0.0;
  if (st.kind == NodeKind::ActiveLeaf) {
    auto it = cache.find(id);
    if (it == cache.end())
      throw std::runtime_error("density cache is missing active leaf " + id.str());
    return cache_mean_opacity(model, it->second);
  }
  double acc = 0.0;
  for (int j = 0; j < 8; ++j) acc += region_mean_opacity(model, cache, child_id(id, j));
  return acc / 8.0;
}

inline int octant_of(const Vec3& p, const Vec3& center) {
  return (p.x >= center.x ? 1 : 0) | (p.y >= center.y ? 2 : 0) | (p.z >= center.z ? 4 : 0);
}

}  // namespace detail

// Occupancy triple of one active leaf. `eq` is the mean per-sample opacity
// over the leaf's own grid; `down` averages the eight octant means of the
// same samples; `up` is one eighth of the parent region's mean, where sibling
// regions are resolved recursively through the cache (the root, which cannot
// be merged, stands in for its own parent).
inline StatTriple compute_alpha(const OctreeModel& model, const DensityCache& cache,
                                const NodeId& id) {
  auto it = cache.find(id);
  if (it == cache.end())
    throw std::runtime_error("no density samples for node " + id.str());
  const NodeSampleSet& set = it->second;
  if (set.sigma.empty() || set.sigma.size() != set.positions.size())
    throw std::runtime_error("malformed density sample set for node " + id.str());

  double sbar = detail::opacity_step(model, id, set.n_per_axis);
  Vec3 center = model.node_bounds(id).center();

  StatTriple a;
  double oct_sum[8] = {0};
  long oct_n[8] = {0};
  double total = 0.0;
  for (size_t i = 0; i < set.sigma.size(); ++i) {
    double op = detail::sample_opacity(set.sigma[i], sbar);
    total += op;
    int o = detail::octant_of(set.positions[i], center);
    oct_sum[o] += op;
    ++oct_n[o];
  }
  a.eq = total / static_cast<double>(set.sigma.size());
  double down = 0.0;
  for (int o = 0; o < 8; ++o) down += oct_n[o] > 0 ? oct_sum[o] / oct_n[o] : 0.0;
  a.down = down / 8.0;
  NodeId region = id.level > 0 ? parent_id(id) : id;
  a.up = detail::region_mean_opacity(model, cache, region) / 8.0;

  a.up = std::clamp(a.up, 0.0, 1.0);
  a.eq = std::clamp(a.eq, 0.0, 1.0);
  a.down = std::clamp(a.down, 0.0, 1.0);
  return a;
}

// ---------------------------------------------------------------------------
// rendering-error apportionment

// One composited sample, reduced to what error apportionment needs.
struct RenderSample {
  NodeId node;
  int ray_id = 0;
  Vec3 position;
  double weight = 0.0;  // compositing weight of the sample
};

struct RenderErrorBatch {
  std::vector<RenderSample> samples;
  std::vector<double> ray_error;  // per-ray loss, indexed by ray_id
};

// Distributes each ray's error over its samples in proportion to their
// compositing weights and aggregates the shares per node, octant, and region.
class ErrorApportionment {
 public:
  ErrorApportionment(const OctreeModel& model, const RenderErrorBatch& batch)
      : model_(model) {
    std::vector<double> ray_weight(batch.ray_error.size(), 0.0);
    for (const RenderSample& s : batch.samples) {
      if (s.ray_id < 0 || static_cast<size_t>(s.ray_id) >= batch.ray_error.size())
        throw std::runtime_error("render sample references unknown ray " +
                                 std::to_string(s.ray_id));
      ray_weight[s.ray_id] += s.weight;
    }
    for (const RenderSample& s : batch.samples) {
      double w = ray_weight[s.ray_id];
      double share = w > 0.0 ? (s.weight / w) * batch.ray_error[s.ray_id] : 0.0;
      by_node_[s.node].push_back(Entry{s.position, share});
    }
  }

  // Mean apportioned error of the node's own samples; nodes the batch never
  // touched contribute zero.
  double node_mean(const NodeId& id) const {
    auto it = by_node_.find(id);
    if (it == by_node_.end() || it->second.empty()) return 0.0;
    double acc = 0.0;
    for (const Entry& e : it->second) acc += e.share;
    return acc / static_cast<double>(it->second.size());
  }

  // Mean over the eight octant means of the node's own samples.
  double octant_mean(const NodeId& id) const {
    auto it = by_node_.find(id);
    if (it == by_node_.end() || it->second.empty()) return 0.0;
    Vec3 center = model_.node_bounds(id).center();
    double oct_sum[8] = {0};
    long oct_n[8] = {0};
    for (const Entry& e : it->second) {
      int o = detail::octant_of(e.position, center);
      oct_sum[o] += e.share;
      ++oct_n[o];
    }
    double acc = 0.0;
    for (int o = 0; o < 8; ++o) acc += oct_n[o] > 0 ? oct_sum[o] / oct_n[o] : 0.0;
    return acc / 8.0;
  }

  // Mean over a whole region, recursing through internal nodes.
  double region_mean(const NodeId& id) const {
    const NodeStatus& st = model_.status(id);
    if (st.kind == NodeKind::Inactive) return 0.0;
    if (st.kind == NodeKind::ActiveLeaf) return node_mean(id);
    double acc = 0.0;
    for (int j = 0; j < 8; ++j) acc += region_mean(child_id(id, j));
    return acc / 8.0;
  }

  StatTriple beta(const NodeId& id) const {
    StatTriple b;
    b.eq = node_mean(id);
    b.down = octant_mean(id);
    NodeId region = id.level > 0 ? parent_id(id) : id;
    b.up = region_mean(region) / 8.0;
    return b;
  }

 private:
  struct Entry {
    Vec3 position;
    double share;
  };
  const OctreeModel& model_;
  std::map<NodeId, std::vector<Entry>> by_node_;
};

// Convenience wrapper for one-off queries; batch work should reuse one
// ErrorApportionment instance.
inline StatTriple compute_beta(const OctreeModel& model, const RenderErrorBatch& batch,
                               const NodeId& id) {
  return ErrorApportionment(model, batch).beta(id);
}

inline NodeStats compute_node_stats(const OctreeModel& model, const DensityCache& cache,
                                    const ErrorApportionment& errors, const NodeId& id) {
  NodeStats s;
  s.alpha = compute_alpha(model, cache, id);
  s.beta = errors.beta(id);
  s.mean_opacity = s.alpha.eq;
  s.sample_count = static_cast<long>(cache.at(id).sigma.size());
  return s;
}

// ---------------------------------------------------------------------------
// decision problem

enum class NodeAction { Merge, Keep, Split, Deactivate };

inline const char* node_action_name(NodeAction a) {
  switch (a) {
    case NodeAction::Merge: return "merge";
    case NodeAction::Keep: return "keep";
    case NodeAction::Split: return "split";
    case NodeAction::Deactivate: return "deactivate";
  }
  return "?";
}

struct TreeDecisionProblem {
  struct Entry {
    NodeId id;
    NodeStats stats;
    bool can_split = false;  // leaf is below max_level
    bool can_merge = false;  // parent exists and none of its children is internal
  };
  std::vector<Entry> nodes;  // all active leaves in tree order
  long leaf_budget = 0;      // maximum total leaf-equivalents after the edits
  double lambda = 1.0;       // weight of the error term against (1 - occupancy)
  double deactivation_threshold = 0.01;
  uint64_t tree_version = 0;  // edit_version the statistics were computed at
};

// Cost of choosing an option for a leaf: (1 - alpha_k) + lambda * beta_k.
// Low occupancy makes an option expensive, so matter attracts resolution.
inline double option_cost(const NodeStats& s, NodeAction a, double lambda) {
  switch (a) {
    case NodeAction::Merge: return (1.0 - s.alpha.up) + lambda * s.beta.up;
    case NodeAction::Keep: return (1.0 - s.alpha.eq) + lambda * s.beta.eq;
    case NodeAction::Split: return (1.0 - s.alpha.down) + lambda * s.beta.down;
    default: throw std::invalid_argument("deactivation has no solver cost");
  }
}

// Leaf-equivalents in eighths, so the budget arithmetic is exact integers:
// a merged leaf is 1/8 of a parent leaf, keep is one leaf, split makes eight.
inline int action_eighths(NodeAction a) {
  switch (a) {
    case NodeAction::Merge: return 1;
    case NodeAction::Keep: return 8;
    case NodeAction::Split: return 64;
    default: return 0;
  }
}

inline TreeDecisionProblem assemble(const OctreeModel& model,
                                    const std::map<NodeId, NodeStats>& stats,
                                    long leaf_budget, double lambda = 1.0,
                                    double deactivation_threshold = 0.01) {
  TreeDecisionProblem p;
  p.leaf_budget = leaf_budget;
  p.lambda = lambda;
  p.deactivation_threshold = deactivation_threshold;
  p.tree_version = model.edit_version();
  for (const NodeId& id : model.active_leaves()) {
    auto it = stats.find(id);
    if (it == stats.end())
      throw std::runtime_error("no statistics for active leaf " + id.str());
    TreeDecisionProblem::Entry e;
    e.id = id;
    e.stats = it->second;
    e.can_split = id.level < model.max_level();
    if (id.level > 0) {
      bool all_leaves = true;
      for (const NodeId& cid : model.child_ids(parent_id(id)))
        if (model.status(cid).kind == NodeKind::Internal) all_leaves = false;
      e.can_merge = all_leaves;
    }
    p.nodes.push_back(e);
  }
  return p;
}

struct TreeDecision {
  std::map<NodeId, NodeAction> actions;
  double objective = 0.0;   // solver cost of the chosen options
  long eighths_used = 0;    // leaf-equivalents consumed, in eighths
  uint64_t tree_version = 0;
};

// ---------------------------------------------------------------------------
// exact solver

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Rank used for deterministic tie-breaking: keep < merge < split, compared
// lexicographically over the nodes in problem order.
inline int action_rank(NodeAction a) {
  switch (a) {
    case NodeAction::Keep: return 0;
    case NodeAction::Merge: return 1;
    case NodeAction::Split: return 2;
    default: return 3;
  }
}

struct SiblingGroup {
  std::vector<int> members;  // indices into problem.nodes, in problem order
  bool mergeable = false;
};

// A joint choice for one sibling group: either everybody merges, or each
// member independently keeps or splits. `ranks` doubles as the action record
// and the lexicographic tie-break key.
struct GroupOption {
  double cost = 0.0;
  int eighths = 0;
  std::vector<int> ranks;
};

// Enumerates the group's reachable (cost, resource) points. The keep/split
// combinations collapse per split-count via an exact suffix table, and each
// point carries its lexicographically smallest member assignment.
inline std::vector<GroupOption> group_options(const TreeDecisionProblem& p,
                                              const SiblingGroup& g) {
  const int k = static_cast<int>(g.members.size());
  std::vector<double> cost_keep(k), cost_split(k, kInf);
  for (int j = 0; j < k; ++j) {
    const auto& e = p.nodes[g.members[j]];
    cost_keep[j] = option_cost(e.stats, NodeAction::Keep, p.lambda);
    if (e.can_split) cost_split[j] = option_cost(e.stats, NodeAction::Split, p.lambda);
  }

  const int max_r = 64 * k;
  std::vector<std::vector<double>> suffix(k + 1, std::vector<double>(max_r + 1, kInf));
  suffix[k][0] = 0.0;
  for (int j = k - 1; j >= 0; --j)
    for (int r = 0; r <= max_r; ++r) {
      double best = kInf;
      if (r >= 8 && suffix[j + 1][r - 8] < kInf)
        best = cost_keep[j] + suffix[j + 1][r - 8];
      if (r >= 64 && cost_split[j] < kInf && suffix[j + 1][r - 64] < kInf)
        best = std::min(best, cost_split[j] + suffix[j + 1][r - 64]);
      suffix[j][r] = best;
    }

  std::vector<GroupOption> out;
  for (int r = 0; r <= max_r; ++r) {
    if (!(suffix[0][r] < kInf)) continue;
    GroupOption o;
    o.cost = suffix[0][r];
    o.eighths = r;
    o.ranks.resize(k);
    int rem = r;
    for (int j = 0; j < k; ++j) {  // prefer keep on exact ties
      if (rem >= 8 && suffix[j + 1][rem - 8] < kInf &&
          suffix[j][rem] == cost_keep[j] + suffix[j + 1][rem - 8]) {
        o.ranks[j] = action_rank(NodeAction::Keep);
        rem -= 8;
      } else {
        o.ranks[j] = action_rank(NodeAction::Split);
        rem -= 64;
      }
    }
    out.push_back(std::move(o));
  }
  if (g.mergeable) {
    GroupOption o;
    o.eighths = k;  // each member costs 1/8 of a leaf
    o.ranks.assign(k, action_rank(NodeAction::Merge));
    for (int j = 0; j < k; ++j)
      o.cost += option_cost(p.nodes[g.members[j]].stats, NodeAction::Merge, p.lambda);
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace detail

// Exact minimizer of the summed option costs under the leaf budget and the
// all-siblings merge rule. Groups are solved jointly by dynamic programming
// over (group, used leaf-eighths); ties break lexicographically with
// keep < merge < split over the nodes in problem order. Leaves whose mean
// opacity falls below the threshold are switched off in a post-pass.
inline TreeDecision solve(const TreeDecisionProblem& problem) {
  using detail::kInf;
  TreeDecision decision;
  decision.tree_version = problem.tree_version;
  if (problem.nodes.empty()) return decision;
  if (problem.leaf_budget <= 0) throw std::runtime_error("leaf budget must be positive");

  // Sibling groups are contiguous runs in tree order (children of one parent
  // have consecutive indices at the same level).
  std::vector<detail::SiblingGroup> groups;
  std::map<NodeId, int> group_of_parent;
  for (int i = 0; i < static_cast<int>(problem.nodes.size()); ++i) {
    const auto& e = problem.nodes[i];
    NodeId key = e.id.level > 0 ? parent_id(e.id) : e.id;
    auto it = group_of_parent.find(key);
    if (it == group_of_parent.end()) {
      it = group_of_parent.emplace(key, static_cast<int>(groups.size())).first;
      groups.push_back(detail::SiblingGroup{});
      groups.back().mergeable = e.id.level > 0;
    }
    detail::SiblingGroup& g = groups[it->second];
    g.members.push_back(i);
    g.mergeable = g.mergeable && e.can_merge;
  }

  std::vector<std::vector<detail::GroupOption>> options;
  options.reserve(groups.size());
  long min_eighths = 0;
  for (const auto& g : groups) {
    options.push_back(detail::group_options(problem, g));
    int m = options.back().front().eighths;
    for (const auto& o : options.back()) m = std::min(m, o.eighths);
    min_eighths += m;
  }

  const long budget_eighths = 8 * problem.leaf_budget;
  if (min_eighths > budget_eighths)
    throw std::runtime_error("leaf budget " + std::to_string(problem.leaf_budget) +
                             " is infeasible: the tree needs at least " +
                             std::to_string(min_eighths) + "/8 leaf-equivalents");

  // Capacity axis: nothing above the all-split total is ever useful.
  long max_useful = 0;
  for (const auto& opts : options) {
    int m = 0;
    for (const auto& o : opts) m = std::max(m, o.eighths);
    max_useful += m;
  }
  const int U = static_cast<int>(std::min(budget_eighths, max_useful));
  const int G = static_cast<int>(groups.size());

  // suffix[g][u]: minimal cost of groups g.. within capacity u.
  std::vector<std::vector<double>> suffix(G + 1, std::vector<double>(U + 1, kInf));
  for (int u = 0; u <= U; ++u) suffix[G][u] = 0.0;
  for (int g = G - 1; g >= 0; --g)
    for (int u = 0; u <= U; ++u) {
      double best = kInf;
      for (const auto& o : options[g])
        if (o.eighths <= u && suffix[g + 1][u - o.eighths] < kInf)
          best = std::min(best, o.cost + suffix[g + 1][u - o.eighths]);
      suffix[g][u] = best;
    }
  if (!(suffix[0][U] < kInf))
    throw std::runtime_error("leaf budget " + std::to_string(problem.leaf_budget) +
                             " is infeasible");

  // Forward reconstruction, choosing the lexicographically smallest action
  // vector among the options that attain the optimum.
  int u = U;
  for (int g = 0; g < G; ++g) {
    const detail::GroupOption* chosen = nullptr;
    for (const auto& o : options[g]) {
      if (o.eighths > u || !(suffix[g + 1][u - o.eighths] < kInf)) continue;
      if (o.cost + suffix[g + 1][u - o.eighths] != suffix[g][u]) continue;
      if (!chosen || o.ranks < chosen->ranks) chosen = &o;
    }
    if (!chosen) throw std::logic_error("solver reconstruction lost the optimum");
    for (size_t j = 0; j < groups[g].members.size(); ++j) {
      const auto& e = problem.nodes[groups[g].members[j]];
      NodeAction a = chosen->ranks[j] == 0   ? NodeAction::Keep
                     : chosen->ranks[j] == 1 ? NodeAction::Merge
                                             : NodeAction::Split;
      decision.actions[e.id] = a;
    }
    decision.objective += chosen->cost;
    decision.eighths_used += chosen->eighths;
    u -= chosen->eighths;
  }

  // Post-pass: near-empty leaves are switched off outright.
  for (const auto& e : problem.nodes)
    if (e.stats.mean_opacity < problem.deactivation_threshold)
      decision.actions[e.id] = NodeAction::Deactivate;
  return decision;
}

// ---------------------------------------------------------------------------
// applying decisions

struct SplitEdit {
  NodeId node;  // the leaf that was split (now internal)
  std::array<NodeId, 8> children;
  std::shared_ptr<const LeafNetwork> teacher;  // frozen pre-split network
};

struct MergeEdit {
  NodeId parent;  // now an active leaf
  std::array<NodeId, 8> former_children;
  std::array<std::shared_ptr<const LeafNetwork>, 8> teachers;  // null = was inactive
};

struct EditLog {
  std::vector<NodeId> deactivated;
  std::vector<MergeEdit> merges;
  std::vector<SplitEdit> splits;
  bool empty() const { return deactivated.empty() && merges.empty() && splits.empty(); }
};

// Deterministic per-node seed for freshly created networks.
inline uint64_t node_network_seed(uint64_t master, const NodeId& id) {
  return mix_seed(master, static_cast<uint64_t>(id.level) + 1, id.index);
}

// Executes a decision on the tree: deactivations first, then merges (a parent
// collapses only when every child either voted to merge or is switched off,
// with at least one actual vote), then splits. Freshly created leaves get
// deterministically seeded networks when the replaced leaves had any, and the
// frozen predecessors are returned for knowledge transfer.
inline EditLog apply_decisions(OctreeModel& model, const TreeDecision& decision,
                               uint64_t net_seed = 0) {
  if (decision.tree_version != model.edit_version())
    throw std::runtime_error(
        "stale decision: computed at tree version " + std::to_string(decision.tree_version) +
        " but the tree is now at " + std::to_string(model.edit_version()));
  EditLog log;

  for (const auto& [id, a] : decision.actions)
    if (a == NodeAction::Deactivate) {
      model.deactivate(id);
      log.deactivated.push_back(id);
    }

  std::map<NodeId, bool> merge_parents;
  for (const auto& [id, a] : decision.actions)
    if (a == NodeAction::Merge && id.level > 0) merge_parents[parent_id(id)] = true;
  for (const auto& [parent, _] : merge_parents) {
    bool ok = true;
    for (const NodeId& cid : model.child_ids(parent)) {
      NodeKind kind = model.status(cid).kind;
      if (kind == NodeKind::Internal ||
          (kind == NodeKind::ActiveLeaf &&
           (!decision.actions.count(cid) || decision.actions.at(cid) != NodeAction::Merge)))
        ok = false;
    }
    if (!ok) continue;  // a minority merge vote falls back to keeping the leaves

    MergeEdit edit;
    edit.parent = parent;
    const NetworkArch* arch = nullptr;
    for (int j = 0; j < 8; ++j) {
      NodeId cid = child_id(parent, j);
      edit.former_children[j] = cid;
      const NodeStatus& st = model.status(cid);
      if (st.kind == NodeKind::ActiveLeaf && st.network) {
        edit.teachers[j] = std::make_shared<const LeafNetwork>(*st.network);
        if (!arch) arch = &edit.teachers[j]->arch;
      }
    }
    std::shared_ptr<LeafNetwork> fresh;
    if (arch) {
      fresh = std::make_shared<LeafNetwork>(*arch);
      fresh->init(node_network_seed(net_seed, parent));
    }
    model.merge(parent, std::move(fresh));
    log.merges.push_back(std::move(edit));
  }

  for (const auto& [id, a] : decision.actions) {
    if (a != NodeAction::Split) continue;
    SplitEdit edit;
    edit.node = id;
    edit.children = model.child_ids(id);
    const NodeStatus& st = model.status(id);
    std::array<std::shared_ptr<LeafNetwork>, 8> nets{};
    if (st.network) {
      edit.teacher = std::make_shared<const LeafNetwork>(*st.network);
      for (int j = 0; j < 8; ++j) {
        nets[j] = std::make_shared<LeafNetwork>(edit.teacher->arch);
        nets[j]->init(node_network_seed(net_seed, edit.children[j]));
      }
    }
    model.split(id, nets);
    log.splits.push_back(std::move(edit));
  }
  return log;
}

// ---------------------------------------------------------------------------
// json dumps for offline inspection

inline nlohmann::json problem_to_json(const TreeDecisionProblem& p) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& e : p.nodes)
    nodes.push_back({{"level", e.id.level},
                     {"index", e.id.index},
                     {"alpha", {e.stats.alpha.up, e.stats.alpha.eq, e.stats.alpha.down}},
                     {"beta", {e.stats.beta.up, e.stats.beta.eq, e.stats.beta.down}},
                     {"mean_opacity", e.stats.mean_opacity},
                     {"sample_count", e.stats.sample_count},
                     {"can_split", e.can_split},
                     {"can_merge", e.can_merge}});
  return nlohmann::json{{"nodes", nodes},
                        {"leaf_budget", p.leaf_budget},
                        {"lambda", p.lambda},
                        {"deactivation_threshold", p.deactivation_threshold},
                        {"tree_version", p.tree_version}};
}

inline nlohmann::json decision_to_json(const TreeDecision& d) {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& [id, a] : d.actions)
    actions.push_back(
        {{"level", id.level}, {"index", id.index}, {"action", node_action_name(a)}});
  return nlohmann::json{{"actions", actions},
                        {"objective", d.objective},
                        {"eighths_used", d.eighths_used},
                        {"tree_version", d.tree_version}};
}

}  // namespace octfield
