#pragma once

#include <array>
#include <cmath>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "mstgcn/core.hpp"

namespace mstgcn {

/// Static human-body graph: joints, bones, and the center-of-gravity joint
/// used by the spatial-configuration partition.
struct SkeletonTopology {
  std::string kind;
  int num_joints = 0;
  std::vector<std::pair<int, int>> edges;  // unordered joint pairs
  int center_joint = 0;
};

/// All-pairs shortest-path edge counts.
struct HopDistances {
  int num_joints = 0;
  std::vector<int> dist;  // row-major V x V

  int at(int i, int j) const { return dist[size_t(i) * num_joints + j]; }
};

enum class Subset { root = 0, centripetal = 1, centrifugal = 2 };

inline const char* subset_name(Subset s) {
  switch (s) {
    case Subset::root: return "root";
    case Subset::centripetal: return "centripetal";
    case Subset::centrifugal: return "centrifugal";
  }
  return "?";
}

/// Three V x V binary matrices partitioning A + I by the spatial
/// configuration rule. Entry (j, i) marks neighbor j of root i, matching
/// the right-multiplication orientation of the feature contraction.
struct SpatialPartition {
  int num_joints = 0;
  std::array<std::vector<double>, 3> subsets;
};

enum class AdjacencyNormalization { as_printed, symmetric };

inline AdjacencyNormalization parse_normalization(const std::string& name) {
  if (name == "as-printed") return AdjacencyNormalization::as_printed;
  if (name == "symmetric") return AdjacencyNormalization::symmetric;
  throw ConfigError("unknown normalization \"" + name +
                    "\" (expected \"as-printed\" or \"symmetric\")");
}

/// The three per-subset normalized adjacency matrices.
struct PartitionedAdjacency {
  int num_joints = 0;
  std::array<std::vector<double>, 3> subsets;  // normalized, row-major
  double alpha = 1e-3;
};

namespace detail {

inline void check_edges(const SkeletonTopology& topo) {
  for (auto [a, b] : topo.edges) {
    if (a < 0 || a >= topo.num_joints || b < 0 || b >= topo.num_joints) {
      throw TopologyError("edge (" + std::to_string(a) + ", " +
                          std::to_string(b) + ") references a joint outside [0, " +
                          std::to_string(topo.num_joints) + ")");
    }
    if (a == b) {
      throw TopologyError("self-loop on joint " + std::to_string(a));
    }
  }
  if (topo.center_joint < 0 || topo.center_joint >= topo.num_joints) {
    throw TopologyError("center joint " + std::to_string(topo.center_joint) +
                        " out of range");
  }
}

}  // namespace detail

/// Breadth-first all-pairs hop distances. Throws TopologyError naming the
/// unreachable joints if the graph is disconnected.
inline HopDistances hop_distances(const SkeletonTopology& topo) {
  detail::check_edges(topo);
  const int V = topo.num_joints;
  std::vector<std::vector<int>> adj(V);
  for (auto [a, b] : topo.edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  HopDistances result;
  result.num_joints = V;
  result.dist.assign(size_t(V) * V, -1);
  for (int src = 0; src < V; ++src) {
    int* row = result.dist.data() + size_t(src) * V;
    row[src] = 0;
    std::queue<int> frontier;
    frontier.push(src);
    while (!frontier.empty()) {
      int u = frontier.front();
      frontier.pop();
      for (int w : adj[u]) {
        if (row[w] < 0) {
          row[w] = row[u] + 1;
          frontier.push(w);
        }
      }
    }
    if (src == 0) {
      std::string unreachable;
      for (int v = 0; v < V; ++v) {
        if (row[v] < 0) {
          if (!unreachable.empty()) unreachable += ", ";
          unreachable += std::to_string(v);
        }
      }
      if (!unreachable.empty()) {
        throw TopologyError("skeleton graph is disconnected; joints {" +
                            unreachable + "} are unreachable from joint 0");
      }
    }
  }
  return result;
}

/// Spatial-configuration partition with hop range 1: every (root, neighbor)
/// pair with hop distance <= 1 lands in exactly one of root / centripetal /
/// centrifugal, decided by the neighbor's distance to the center joint.
/// Equal-distance neighbors join the root subset.
inline SpatialPartition partition_spatial(const SkeletonTopology& topo,
                                          const HopDistances& dists) {
  const int V = topo.num_joints;
  SpatialPartition part;
  part.num_joints = V;
  for (auto& m : part.subsets) m.assign(size_t(V) * V, 0.0);
  const int center = topo.center_joint;
  for (int root = 0; root < V; ++root) {
    for (int nb = 0; nb < V; ++nb) {
      if (dists.at(root, nb) > 1) continue;
      Subset which;
      if (nb == root || dists.at(nb, center) == dists.at(root, center)) {
        which = Subset::root;
      } else if (dists.at(nb, center) < dists.at(root, center)) {
        which = Subset::centripetal;
      } else {
        which = Subset::centrifugal;
      }
      part.subsets[static_cast<int>(which)][size_t(nb) * V + root] = 1.0;
    }
  }
  return part;
}

/// Degree normalization, exponents -1/2 and +1/2:
///   A_hat = D^{-1/2} A D^{+1/2},  D_ii = sum_j A_ij + alpha.
/// The symmetric variant uses D^{-1/2} A D^{-1/2}.
inline std::vector<double> normalize_adjacency(
    const std::vector<double>& a, int num_joints, double alpha = 1e-3,
    AdjacencyNormalization kind = AdjacencyNormalization::as_printed) {
  const int V = num_joints;
  if (a.size() != size_t(V) * V) {
    throw DimensionError("normalize_adjacency: matrix size " +
                         std::to_string(a.size()) + " is not " +
                         std::to_string(V) + "x" + std::to_string(V));
  }
  std::vector<double> degree(V, alpha);
  for (int i = 0; i < V; ++i) {
    for (int j = 0; j < V; ++j) {
      if (a[size_t(i) * V + j] < 0.0) {
        throw ContractError("normalize_adjacency: negative entry at (" +
                            std::to_string(i) + ", " + std::to_string(j) +
                            ")");
      }
      degree[i] += a[size_t(i) * V + j];
    }
  }
  std::vector<double> out(size_t(V) * V);
  for (int i = 0; i < V; ++i) {
    for (int j = 0; j < V; ++j) {
      const double scale =
          kind == AdjacencyNormalization::as_printed
              ? std::sqrt(degree[j] / degree[i])
              : 1.0 / std::sqrt(degree[i] * degree[j]);
      out[size_t(i) * V + j] = a[size_t(i) * V + j] * scale;
    }
  }
  return out;
}

/// Partition + per-subset normalization in one step.
inline PartitionedAdjacency build_partitioned_adjacency(
    const SkeletonTopology& topo, double alpha = 1e-3,
    AdjacencyNormalization kind = AdjacencyNormalization::as_printed) {
  const auto dists = hop_distances(topo);
  const auto part = partition_spatial(topo, dists);
  PartitionedAdjacency result;
  result.num_joints = topo.num_joints;
  result.alpha = alpha;
  for (int p = 0; p < 3; ++p) {
    result.subsets[p] =
        normalize_adjacency(part.subsets[p], topo.num_joints, alpha, kind);
  }
  return result;
}

namespace detail {

// 25-joint Kinect v2 skeleton, 0-based (j-1, parent-1) pairs; joint 21
// (1-based) is the spine center.
inline SkeletonTopology ntu25_topology() {
  SkeletonTopology topo;
  topo.kind = "ntu25";
  topo.num_joints = 25;
  const std::array<std::pair<int, int>, 24> pairs_1based = {{
      {1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},
      {7, 6},   {8, 7},   {9, 21},  {10, 9},  {11, 10}, {12, 11},
      {13, 1},  {14, 13}, {15, 14}, {16, 15}, {17, 1},  {18, 17},
      {19, 18}, {20, 19}, {22, 23}, {23, 8},  {24, 25}, {25, 12},
  }};
  for (auto [a, b] : pairs_1based) topo.edges.emplace_back(a - 1, b - 1);
  topo.center_joint = 20;  // joint 21, 1-based
  return topo;
}

// 18-joint OpenPose layout; joint 1 is the neck.
inline SkeletonTopology kinetics18_topology() {
  SkeletonTopology topo;
  topo.kind = "kinetics18";
  topo.num_joints = 18;
  topo.edges = {{4, 3},  {3, 2},   {7, 6},  {6, 5},  {13, 12}, {12, 11},
                {10, 9}, {9, 8},   {11, 5}, {8, 2},  {5, 1},   {2, 1},
                {0, 1},  {15, 0},  {14, 0}, {17, 15}, {16, 14}};
  topo.center_joint = 1;
  return topo;
}

}  // namespace detail

/// Canonical topologies: "ntu25", "kinetics18", and the synthetic test
/// graphs "chain:<V>" (path, center 0) and "star:<V>" (hub 0).
inline SkeletonTopology build_topology(const std::string& kind) {
  if (kind == "ntu25") return detail::ntu25_topology();
  if (kind == "kinetics18") return detail::kinetics18_topology();
  auto parse_count = [&](const std::string& prefix) -> int {
    const std::string digits = kind.substr(prefix.size());
    if (digits.empty() ||
        digits.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("bad joint count in topology \"" + kind + "\"");
    }
    int v = std::stoi(digits);
    if (v < 2) {
      throw ConfigError("topology \"" + kind + "\" needs at least 2 joints");
    }
    return v;
  };
  if (kind.rfind("chain:", 0) == 0) {
    SkeletonTopology topo;
    topo.kind = kind;
    topo.num_joints = parse_count("chain:");
    for (int i = 0; i + 1 < topo.num_joints; ++i) topo.edges.emplace_back(i, i + 1);
    topo.center_joint = 0;
    return topo;
  }
  if (kind.rfind("star:", 0) == 0) {
    SkeletonTopology topo;
    topo.kind = kind;
    topo.num_joints = parse_count("star:");
    for (int i = 1; i < topo.num_joints; ++i) topo.edges.emplace_back(0, i);
    topo.center_joint = 0;
    return topo;
  }
  throw ConfigError("unknown topology kind \"" + kind +
                    "\" (expected ntu25, kinetics18, chain:<V> or star:<V>)");
}

/// Parent joint on the path toward the center (the bone-stream reference).
/// Returns -1 for the center joint itself.
inline std::vector<int> parents_toward_center(const SkeletonTopology& topo) {
  const auto dists = hop_distances(topo);
  std::vector<int> parent(topo.num_joints, -1);
  const int center = topo.center_joint;
  std::vector<std::vector<int>> adj(topo.num_joints);
  for (auto [a, b] : topo.edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  for (int v = 0; v < topo.num_joints; ++v) {
    if (v == center) continue;
    for (int nb : adj[v]) {
      if (dists.at(nb, center) < dists.at(v, center)) {
        parent[v] = nb;
        break;
      }
    }
    if (parent[v] < 0) {
      // Cycles can leave a joint with no strictly-closer neighbor; fall back
      // to any equal-distance neighbor to keep the bone map total.
      for (int nb : adj[v]) {
        if (dists.at(nb, center) == dists.at(v, center)) {
          parent[v] = nb;
          break;
        }
      }
    }
  }
  return parent;
}

}  // namespace mstgcn
