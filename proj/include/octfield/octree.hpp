#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "octfield/geometry.hpp"

namespace octfield {

template <class S>
struct LeafNetworkT;  // defined in network.hpp; the tree only holds handles
using LeafNetwork = LeafNetworkT<float>;

// Linear octree address. The root is (0,0); child j of (l,i) is (l+1, 8i+j),
// so index digits in base 8 spell the octant path from the root, and bit k of
// each digit selects the upper half along axis k (x = bit 0, y = 1, z = 2).
struct NodeId {
  int level = 0;
  uint64_t index = 0;

  auto operator<=>(const NodeId&) const = default;

  std::string str() const {
    return "(level=" + std::to_string(level) + ", index=" + std::to_string(index) + ")";
  }
};

enum class NodeKind { ActiveLeaf, Internal, Inactive };

inline const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::ActiveLeaf: return "active";
    case NodeKind::Internal: return "internal";
    case NodeKind::Inactive: return "inactive";
  }
  return "?";
}

inline NodeKind node_kind_from_name(const std::string& s) {
  if (s == "active") return NodeKind::ActiveLeaf;
  if (s == "internal") return NodeKind::Internal;
  if (s == "inactive") return NodeKind::Inactive;
  throw std::runtime_error("unknown node status '" + s + "'");
}

// ActiveLeaf carries exactly one network; Internal and Inactive carry none.
struct NodeStatus {
  NodeKind kind = NodeKind::ActiveLeaf;
  std::shared_ptr<LeafNetwork> network;
};

inline NodeId child_id(const NodeId& id, int j) {
  if (j < 0 || j > 7) throw std::invalid_argument("child octant must be in [0,8)");
  return NodeId{id.level + 1, id.index * 8 + static_cast<uint64_t>(j)};
}

inline NodeId parent_id(const NodeId& id) {
  if (id.level == 0) throw std::invalid_argument("root node " + id.str() + " has no parent");
  return NodeId{id.level - 1, id.index / 8};
}

inline int octant_in_parent(const NodeId& id) {
  if (id.level == 0) throw std::invalid_argument("root node " + id.str() + " has no parent");
  return static_cast<int>(id.index & 7u);
}

// Adaptive octree over a fixed root box. Node records live in an ordered map
// so iteration order (level-major, then index) is deterministic everywhere.
class OctreeModel {
 public:
  using NodeMap = std::map<NodeId, NodeStatus>;

  OctreeModel() : OctreeModel(Aabb{{0, 0, 0}, {1, 1, 1}}, 5, nullptr) {}

  OctreeModel(const Aabb& root_bounds, int max_level,
              std::shared_ptr<LeafNetwork> root_network = nullptr)
      : root_bounds_(root_bounds), max_level_(max_level) {
    if (max_level < 0 || max_level > 20)
      throw std::invalid_argument("max_level must be in [0, 20]");
    for (int a = 0; a < 3; ++a)
      if (!(root_bounds.min[a] < root_bounds.max[a]))
        throw std::invalid_argument("root bounds must have positive extent");
    nodes_[NodeId{0, 0}] = NodeStatus{NodeKind::ActiveLeaf, std::move(root_network)};
  }

  const Aabb& root_bounds() const { return root_bounds_; }
  int max_level() const { return max_level_; }
  const NodeMap& nodes() const { return nodes_; }
  uint64_t edit_version() const { return edit_version_; }

  bool contains(const NodeId& id) const { return nodes_.count(id) > 0; }

  const NodeStatus& status(const NodeId& id) const {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw std::runtime_error("unknown node " + id.str());
    return it->second;
  }

  std::array<NodeId, 8> child_ids(const NodeId& id) const {
    if (id.level + 1 > max_level_)
      throw std::runtime_error("children of " + id.str() + " would exceed max_level " +
                               std::to_string(max_level_));
    std::array<NodeId, 8> out;
    for (int j = 0; j < 8; ++j) out[j] = child_id(id, j);
    return out;
  }

  Aabb node_bounds(const NodeId& id) const {
    check_id(id);
    Aabb box = root_bounds_;
    for (int k = id.level - 1; k >= 0; --k)
      box = box.octant(static_cast<int>((id.index >> (3 * k)) & 7u));
    return box;
  }

  // Walks the tree to the leaf whose half-open box contains p. Absent when p
  // is outside the root box or the covering leaf is Inactive.
  std::optional<NodeId> locate(const Vec3& p) const {
    if (!root_bounds_.contains_half_open(p)) return std::nullopt;
    NodeId id{0, 0};
    Aabb box = root_bounds_;
    for (;;) {
      const NodeStatus& st = status(id);
      if (st.kind == NodeKind::ActiveLeaf) return id;
      if (st.kind == NodeKind::Inactive) return std::nullopt;
      Vec3 c = box.center();
      int oct = (p.x >= c.x ? 1 : 0) | (p.y >= c.y ? 2 : 0) | (p.z >= c.z ? 4 : 0);
      id = child_id(id, oct);
      box = box.octant(oct);
    }
  }

  // ActiveLeaf -> Internal with 8 ActiveLeaf children carrying the given
  // networks. The node's own network handle is released.
  void split(const NodeId& id, const std::array<std::shared_ptr<LeafNetwork>, 8>& nets) {
    NodeStatus& st = mutable_status(id);
    if (st.kind != NodeKind::ActiveLeaf)
      throw std::runtime_error("split: node " + id.str() + " is not an active leaf");
    if (id.level + 1 > max_level_)
      throw std::runtime_error("split: node " + id.str() + " is already at max_level " +
                               std::to_string(max_level_));
    st.kind = NodeKind::Internal;
    st.network.reset();
    for (int j = 0; j < 8; ++j)
      nodes_[child_id(id, j)] = NodeStatus{NodeKind::ActiveLeaf, nets[j]};
    ++edit_version_;
  }

  // Internal with 8 leaf children (active or inactive) -> ActiveLeaf. The
  // children are removed from the map.
  void merge(const NodeId& id, std::shared_ptr<LeafNetwork> net) {
    NodeStatus& st = mutable_status(id);
    if (st.kind != NodeKind::Internal)
      throw std::runtime_error("merge: node " + id.str() + " is not internal");
    for (int j = 0; j < 8; ++j) {
      const NodeStatus& cs = status(child_id(id, j));
      if (cs.kind == NodeKind::Internal)
        throw std::runtime_error("merge: child " + child_id(id, j).str() + " is not a leaf");
    }
    for (int j = 0; j < 8; ++j) nodes_.erase(child_id(id, j));
    st.kind = NodeKind::ActiveLeaf;
    st.network = std::move(net);
    ++edit_version_;
  }

  void deactivate(const NodeId& id) {
    NodeStatus& st = mutable_status(id);
    if (st.kind != NodeKind::ActiveLeaf)
      throw std::runtime_error("deactivate: node " + id.str() + " is not an active leaf");
    st.kind = NodeKind::Inactive;
    st.network.reset();
    ++edit_version_;
  }

  void set_network(const NodeId& id, std::shared_ptr<LeafNetwork> net) {
    NodeStatus& st = mutable_status(id);
    if (st.kind != NodeKind::ActiveLeaf)
      throw std::runtime_error("set_network: node " + id.str() + " is not an active leaf");
    st.network = std::move(net);
  }

  std::vector<NodeId> active_leaves() const {
    std::vector<NodeId> out;
    for (const auto& [id, st] : nodes_)
      if (st.kind == NodeKind::ActiveLeaf) out.push_back(id);
    return out;  // map order: sorted by (level, index)
  }

  // Full structural invariant sweep; throws naming the first offender.
  void validate(bool require_networks = true) const {
    if (!contains(NodeId{0, 0})) throw std::runtime_error("tree invariant: root missing");
    for (const auto& [id, st] : nodes_) {
      if (id.level < 0 || id.level > max_level_)
        throw std::runtime_error("tree invariant: node " + id.str() + " outside level range");
      if (id.level < 63 && id.index >= (1ull << (3 * id.level)))
        throw std::runtime_error("tree invariant: node " + id.str() + " index out of range");
      if (id.level > 0) {
        auto it = nodes_.find(parent_id(id));
        if (it == nodes_.end() || it->second.kind != NodeKind::Internal)
          throw std::runtime_error("tree invariant: node " + id.str() +
                                   " lacks an internal parent");
      }
      if (st.kind == NodeKind::Internal) {
        for (int j = 0; j < 8; ++j)
          if (!contains(child_id(id, j)))
            throw std::runtime_error("tree invariant: internal node " + id.str() +
                                     " is missing child " + std::to_string(j));
        if (st.network)
          throw std::runtime_error("tree invariant: internal node " + id.str() +
                                   " carries a network");
      } else {
        for (int j = 0; j < 8; ++j)
          if (contains(child_id(id, j)))
            throw std::runtime_error("tree invariant: leaf " + id.str() + " has child " +
                                     std::to_string(j));
        if (st.kind == NodeKind::Inactive && st.network)
          throw std::runtime_error("tree invariant: inactive node " + id.str() +
                                   " carries a network");
        if (st.kind == NodeKind::ActiveLeaf && require_networks && !st.network)
          throw std::runtime_error("tree invariant: active leaf " + id.str() +
                                   " carries no network");
      }
    }
  }

  // Structure-only serialization; networks are (de)serialized by their owner.
  nlohmann::json to_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& [id, st] : nodes_)
      nodes.push_back({{"level", id.level},
                       {"index", id.index},
                       {"status", node_kind_name(st.kind)}});
    return nlohmann::json{
        {"root_bounds",
         {root_bounds_.min.x, root_bounds_.min.y, root_bounds_.min.z, root_bounds_.max.x,
          root_bounds_.max.y, root_bounds_.max.z}},
        {"max_level", max_level_},
        {"nodes", nodes}};
  }

  static OctreeModel from_json(const nlohmann::json& j) {
    auto rb = j.at("root_bounds");
    if (!rb.is_array() || rb.size() != 6)
      throw std::runtime_error("tree: root_bounds must be [minx,miny,minz,maxx,maxy,maxz]");
    Aabb bounds{{rb[0].get<double>(), rb[1].get<double>(), rb[2].get<double>()},
                {rb[3].get<double>(), rb[4].get<double>(), rb[5].get<double>()}};
    OctreeModel model(bounds, j.at("max_level").get<int>());
    model.nodes_.clear();
    for (const auto& n : j.at("nodes")) {
      NodeId id{n.at("level").get<int>(), n.at("index").get<uint64_t>()};
      model.nodes_[id] =
          NodeStatus{node_kind_from_name(n.at("status").get<std::string>()), nullptr};
    }
    model.validate(/*require_networks=*/false);
    return model;
  }

 private:
  NodeStatus& mutable_status(const NodeId& id) {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw std::runtime_error("unknown node " + id.str());
    return it->second;
  }

  void check_id(const NodeId& id) const {
    if (id.level < 0 || id.level > max_level_)
      throw std::runtime_error("node " + id.str() + " outside level range [0, " +
                               std::to_string(max_level_) + "]");
  }

  Aabb root_bounds_;
  int max_level_ = 5;
  NodeMap nodes_;
  uint64_t edit_version_ = 0;
};

}  // namespace octfield
