#pragma once

// Centerline extraction: topology-preserving 3D thinning and decomposition
// of the resulting skeleton into a branch graph rooted at a given voxel.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "treelab/error.hpp"
#include "treelab/volume.hpp"

namespace treelab {

// ---------------------------------------------------------------------------
// Simple-point test
//
// Neighborhood positions are indexed p = (dx+1) + 3(dy+1) + 9(dz+1); 13 is
// the center. A voxel is simple (deletable without changing 26/6 topology)
// iff its foreground 26-neighbors form exactly one 26-component and the
// background voxels of its 18-neighborhood contain exactly one 6-component
// touching a face neighbor.

namespace detail {

struct NeighborhoodTables {
  std::array<std::uint32_t, 27> adj26{};  // bitmask of 26-adjacent positions (excluding 13)
  std::array<std::uint32_t, 27> adj6{};   // bitmask of 6-adjacent positions inside N18
  std::uint32_t n18 = 0;
  std::uint32_t faces = 0;

  NeighborhoodTables() {
    auto coord = [](int p) { return std::array<int, 3>{p % 3 - 1, (p / 3) % 3 - 1, p / 9 - 1}; };
    for (int p = 0; p < 27; ++p) {
      if (p == 13) continue;
      const auto a = coord(p);
      const int l1 = std::abs(a[0]) + std::abs(a[1]) + std::abs(a[2]);
      if (l1 <= 2) n18 |= 1u << p;
      if (l1 == 1) faces |= 1u << p;
    }
    for (int p = 0; p < 27; ++p) {
      if (p == 13) continue;
      const auto a = coord(p);
      for (int q = 0; q < 27; ++q) {
        if (q == 13 || q == p) continue;
        const auto b = coord(q);
        const int dx = std::abs(a[0] - b[0]), dy = std::abs(a[1] - b[1]), dz = std::abs(a[2] - b[2]);
        if (dx <= 1 && dy <= 1 && dz <= 1) adj26[p] |= 1u << q;
        if (dx + dy + dz == 1 && (n18 >> p & 1u) && (n18 >> q & 1u)) adj6[p] |= 1u << q;
      }
    }
  }
};

inline const NeighborhoodTables& tables() {
  static const NeighborhoodTables t;
  return t;
}

// Flood fill within `set` starting from the lowest bit of `seed`.
inline std::uint32_t flood(std::uint32_t set, std::uint32_t seed,
                           const std::array<std::uint32_t, 27>& adj) {
  std::uint32_t reached = seed;
  std::uint32_t frontier = seed;
  while (frontier) {
    std::uint32_t next = 0;
    for (std::uint32_t f = frontier; f; f &= f - 1) next |= adj[std::countr_zero(f)];
    next &= set & ~reached;
    reached |= next;
    frontier = next;
  }
  return reached;
}

/// Bitmask of foreground neighbors of v (bit 13 always clear).
inline std::uint32_t neighborhood_bits(const BinaryMask& m, Voxel v) {
  std::uint32_t bits = 0;
  int p = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx, ++p)
        if (p != 13 && m.at_or({v.x + dx, v.y + dy, v.z + dz}, 0)) bits |= 1u << p;
  return bits;
}

}  // namespace detail

inline bool is_simple_point(std::uint32_t fg_bits) {
  const auto& t = detail::tables();
  fg_bits &= ~(1u << 13);
  if (fg_bits == 0) return false;
  const std::uint32_t lowest = fg_bits & (~fg_bits + 1u);
  if (detail::flood(fg_bits, lowest, t.adj26) != fg_bits) return false;

  const std::uint32_t bg = t.n18 & ~fg_bits;
  std::uint32_t face_bg = bg & t.faces;
  if (face_bg == 0) return false;
  const std::uint32_t first = face_bg & (~face_bg + 1u);
  const std::uint32_t comp = detail::flood(bg, first, t.adj6);
  return (face_bg & ~comp) == 0;
}

namespace detail {

// Line end during thinning: one neighbor, or two neighbors that touch each
// other (the blunt tip left when an even-width tube is peeled one side at a
// time).
inline bool is_thinning_end(std::uint32_t bits) {
  const int n = std::popcount(bits);
  if (n <= 1) return true;
  if (n != 2) return false;
  const int p = std::countr_zero(bits);
  return (tables().adj26[p] & bits) != 0;
}

}  // namespace detail

/// Directional thinning to 1-voxel-wide centerlines. Each sub-iteration
/// (-x, +x, -y, +y, -z, +z) collects border voxels in that direction that
/// are simple, not line ends and not border voxels in the opposite
/// direction too, then deletes them one at a time with the simple-point test
/// re-evaluated, so every deletion preserves topology.
inline BinaryMask skeletonize(const BinaryMask& m) {
  BinaryMask out = m;
  for (auto& v : out.data()) v = v ? 1 : 0;
  const Dims d = out.dims();
  static const std::array<Voxel, 6> directions = {
      Voxel{-1, 0, 0}, Voxel{1, 0, 0}, Voxel{0, -1, 0},
      Voxel{0, 1, 0},  Voxel{0, 0, -1}, Voxel{0, 0, 1}};

  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i]) fg.push_back(i);

  std::vector<std::size_t> candidates;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Voxel& dir : directions) {
      candidates.clear();
      for (const std::size_t i : fg) {
        if (!out[i]) continue;
        const Voxel v = d.voxel(i);
        if (out.at_or(v + dir, 0)) continue;
        const std::uint32_t bits = detail::neighborhood_bits(out, v);
        if (detail::is_thinning_end(bits)) continue;
        if (is_simple_point(bits)) candidates.push_back(i);
      }
      for (const std::size_t i : candidates) {
        const std::uint32_t bits = detail::neighborhood_bits(out, d.voxel(i));
        if (!detail::is_thinning_end(bits) && is_simple_point(bits)) {
          out[i] = 0;
          changed = true;
        }
      }
      std::erase_if(fg, [&](std::size_t i) { return out[i] == 0; });
    }
  }
  // One-voxel spurs hanging off a junction are end-cap noise.
  for (const std::size_t i : fg) {
    const Voxel v = d.voxel(i);
    if (count_neighbors26(out, v) != 1) continue;
    for (const Voxel& o : neighbor_offsets(Connectivity::twenty_six))
      if (out.at_or(v + o, 0) && count_neighbors26(out, v + o) >= 3) {
        out[i] = 0;
        break;
      }
  }
  // Blunt tips: drop simple voxels with two neighbors until every end is a
  // single voxel.
  changed = true;
  while (changed) {
    changed = false;
    for (const std::size_t i : fg) {
      if (!out[i]) continue;
      const std::uint32_t bits = detail::neighborhood_bits(out, d.voxel(i));
      if (std::popcount(bits) > 1 && is_simple_point(bits)) {
        out[i] = 0;
        changed = true;
      }
    }
    std::erase_if(fg, [&](std::size_t i) { return out[i] == 0; });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Branch graph

enum class NodeKind { endpoint, bifurcation };

inline const char* to_string(NodeKind k) {
  return k == NodeKind::endpoint ? "endpoint" : "bifurcation";
}

struct GraphNode {
  int id = 0;
  Voxel xyz;                  // representative voxel (lowest linear index)
  NodeKind kind = NodeKind::endpoint;
  std::vector<Voxel> voxels;  // all skeleton voxels merged into this node
};

struct Branch {
  int id = 0;
  int node_from = 0;  // proximal node
  int node_to = 0;    // distal node
  std::vector<Voxel> path;  // proximal to distal, node voxels excluded
  double mean_diameter_vox = 0.0;
  int generation = 0;
  bool is_terminal = false;

  std::size_t length_vox() const { return path.size(); }
};

struct CenterlineGraph {
  Dims dims;
  std::vector<GraphNode> nodes;
  std::vector<Branch> branches;
  int root = 0;

  std::size_t node_voxel_count() const {
    std::size_t n = 0;
    for (const auto& node : nodes) n += node.voxels.size();
    return n;
  }
  std::size_t bifurcation_count() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const auto& n) {
      return n.kind == NodeKind::bifurcation;
    }));
  }
  std::size_t endpoint_count() const { return nodes.size() - bifurcation_count(); }
  const Branch& branch(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= branches.size())
      throw DataError("graph has no branch " + std::to_string(id));
    return branches[static_cast<std::size_t>(id)];
  }
};

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

// Adjacency over node ids; entries are (neighbor node, branch id).
inline std::vector<std::vector<std::pair<int, int>>> node_adjacency(const CenterlineGraph& g) {
  std::vector<std::vector<std::pair<int, int>>> adj(g.nodes.size());
  for (const auto& b : g.branches) {
    adj[b.node_from].push_back({b.node_to, b.id});
    if (b.node_to != b.node_from) adj[b.node_to].push_back({b.node_from, b.id});
  }
  return adj;
}

// Orients every branch away from the root of its component (BFS order) and
// sets terminal flags.
inline void orient_branches(CenterlineGraph& g, const std::vector<int>& component_roots) {
  const auto adj = node_adjacency(g);
  std::vector<char> seen_node(g.nodes.size(), 0);
  std::vector<char> seen_branch(g.branches.size(), 0);
  for (const int r : component_roots) {
    if (seen_node[r]) continue;
    std::queue<int> q;
    q.push(r);
    seen_node[r] = 1;
    while (!q.empty()) {
      const int n = q.front();
      q.pop();
      for (const auto& [other, bid] : adj[n]) {
        if (seen_branch[bid]) continue;
        seen_branch[bid] = 1;
        Branch& b = g.branches[bid];
        if (b.node_from != n) {
          std::swap(b.node_from, b.node_to);
          std::reverse(b.path.begin(), b.path.end());
        }
        if (!seen_node[other]) {
          seen_node[other] = 1;
          q.push(other);
        }
      }
    }
  }
  for (auto& b : g.branches)
    b.is_terminal = b.node_to != b.node_from && g.nodes[b.node_to].kind == NodeKind::endpoint;
}

}  // namespace detail

/// Decomposes a thin skeleton into nodes (voxels with != 2 neighbors;
/// adjacent junction voxels merged) and branches (degree-2 chains between
/// nodes). The root is the node nearest `root_hint` inside the skeleton
/// component closest to the hint. Branches are oriented away from the root.
inline CenterlineGraph build_graph(const BinaryMask& skel, Voxel root_hint) {
  const Dims d = skel.dims();
  std::vector<std::size_t> voxels;
  for (std::size_t i = 0; i < skel.size(); ++i)
    if (skel[i]) voxels.push_back(i);
  if (voxels.empty()) throw DataError("build_graph: empty skeleton");

  std::vector<int> degree(skel.size(), 0);
  for (const std::size_t i : voxels) degree[i] = count_neighbors26(skel, d.voxel(i));

  // node_of[i]: node id for node voxels, -1 for chain voxels.
  std::vector<int> node_of(skel.size(), -1);
  std::vector<char> is_node(skel.size(), 0);
  for (const std::size_t i : voxels) is_node[i] = degree[i] != 2;

  // Chain voxels whose two neighbors are junction voxels that are themselves
  // adjacent close a triangle; fold them into the junction.
  bool grew = true;
  while (grew) {
    grew = false;
    for (const std::size_t i : voxels) {
      if (is_node[i]) continue;
      const Voxel v = d.voxel(i);
      std::vector<Voxel> nb;
      for (const Voxel& o : neighbor_offsets(Connectivity::twenty_six))
        if (skel.at_or(v + o, 0)) nb.push_back(v + o);
      if (nb.size() == 2 && is_node[d.index(nb[0])] && is_node[d.index(nb[1])] &&
          degree[d.index(nb[0])] >= 3 && degree[d.index(nb[1])] >= 3 && adjacent26(nb[0], nb[1])) {
        is_node[i] = 1;
        degree[i] = 3;
        grew = true;
      }
    }
  }

  // Cluster adjacent junction voxels.
  std::map<std::size_t, int> junction_slot;
  std::vector<std::size_t> junctions;
  for (const std::size_t i : voxels)
    if (is_node[i] && degree[i] >= 3) {
      junction_slot[i] = static_cast<int>(junctions.size());
      junctions.push_back(i);
    }
  detail::UnionFind uf(junctions.size());
  for (std::size_t a = 0; a < junctions.size(); ++a) {
    const Voxel v = d.voxel(junctions[a]);
    for (const Voxel& o : neighbor_offsets(Connectivity::twenty_six)) {
      const Voxel n = v + o;
      if (!d.contains(n)) continue;
      const auto it = junction_slot.find(d.index(n));
      if (it != junction_slot.end()) uf.unite(static_cast<int>(a), it->second);
    }
  }

  CenterlineGraph g;
  g.dims = d;
  std::map<int, int> cluster_node;
  for (const std::size_t i : voxels) {
    if (!is_node[i]) continue;
    int id = -1;
    if (degree[i] >= 3) {
      const int c = uf.find(junction_slot[i]);
      const auto it = cluster_node.find(c);
      if (it != cluster_node.end()) id = it->second;
      else {
        id = static_cast<int>(g.nodes.size());
        cluster_node[c] = id;
        g.nodes.push_back({id, d.voxel(i), NodeKind::bifurcation, {}});
      }
    } else {
      id = static_cast<int>(g.nodes.size());
      g.nodes.push_back({id, d.voxel(i), NodeKind::endpoint, {}});
    }
    node_of[i] = id;
    g.nodes[id].voxels.push_back(d.voxel(i));
  }

  std::vector<char> visited(skel.size(), 0);
  auto add_branch = [&](int from, int to, std::vector<Voxel> path) {
    Branch b;
    b.id = static_cast<int>(g.branches.size());
    b.node_from = from;
    b.node_to = to;
    b.path = std::move(path);
    g.branches.push_back(std::move(b));
  };
  auto chain_neighbors = [&](Voxel v) {
    std::vector<std::size_t> out;
    for (const Voxel& o : neighbor_offsets(Connectivity::twenty_six)) {
      const Voxel n = v + o;
      if (d.contains(n) && skel(n)) out.push_back(d.index(n));
    }
    return out;
  };
  // Walk a chain starting at chain voxel `first`, entered from `prev`.
  auto walk = [&](std::size_t prev, std::size_t first, int from_node) {
    std::vector<Voxel> path;
    std::size_t cur = first;
    while (true) {
      visited[cur] = 1;
      path.push_back(d.voxel(cur));
      std::size_t next = SIZE_MAX;
      for (const std::size_t n : chain_neighbors(d.voxel(cur))) {
        if (n == prev) continue;
        next = n;
      }
      if (next == SIZE_MAX) {
        // Dead end can only happen on malformed input; close at the start node.
        add_branch(from_node, from_node, std::move(path));
        return;
      }
      if (is_node[next]) {
        add_branch(from_node, node_of[next], std::move(path));
        return;
      }
      if (visited[next]) {
        add_branch(from_node, from_node, std::move(path));
        return;
      }
      prev = cur;
      cur = next;
    }
  };

  for (const auto& node : std::vector<GraphNode>(g.nodes)) {
    for (const Voxel& nv : node.voxels) {
      const std::size_t ni = d.index(nv);
      for (const std::size_t n : chain_neighbors(nv)) {
        if (is_node[n]) {
          // Direct node-to-node contact: a branch with an empty path.
          const int other = node_of[n];
          if (other != node.id && node.id < other &&
              (node.kind == NodeKind::endpoint || g.nodes[other].kind == NodeKind::endpoint))
            add_branch(node.id, other, {});
          continue;
        }
        if (!visited[n]) walk(ni, n, node.id);
      }
    }
  }

  // Pure cycles without any node: anchor them at their lowest voxel.
  for (const std::size_t i : voxels) {
    if (is_node[i] || visited[i]) continue;
    const int id = static_cast<int>(g.nodes.size());
    g.nodes.push_back({id, d.voxel(i), NodeKind::bifurcation, {d.voxel(i)}});
    is_node[i] = 1;
    node_of[i] = id;
    visited[i] = 1;
    for (const std::size_t n : chain_neighbors(d.voxel(i)))
      if (!visited[n]) walk(i, n, id);
  }

  // A one- or two-voxel loop back into the same junction is a digitization
  // artifact of that junction, not a branch.
  std::erase_if(g.branches, [&](const Branch& b) {
    if (b.node_from != b.node_to || b.path.size() > 2 ||
        g.nodes[b.node_from].kind != NodeKind::bifurcation)
      return false;
    for (const Voxel& v : b.path) g.nodes[b.node_from].voxels.push_back(v);
    return true;
  });
  for (std::size_t k = 0; k < g.branches.size(); ++k) g.branches[k].id = static_cast<int>(k);

  // Root: nearest skeleton voxel to the hint decides the component.
  const Components comps = connected_components(skel, Connectivity::twenty_six);
  std::size_t nearest = voxels.front();
  for (const std::size_t i : voxels)
    if (squared_distance(d.voxel(i), root_hint) < squared_distance(d.voxel(nearest), root_hint))
      nearest = i;
  const int root_comp = comps.labels[nearest];
  int root = -1;
  for (const auto& node : g.nodes) {
    if (comps.labels(node.xyz) != root_comp) continue;
    if (root < 0 ||
        squared_distance(node.xyz, root_hint) < squared_distance(g.nodes[root].xyz, root_hint))
      root = node.id;
  }
  g.root = root;

  // Every other component is oriented from its first endpoint (or first node).
  std::vector<int> roots = {root};
  std::map<int, int> comp_root;
  for (const auto& node : g.nodes) {
    const int c = comps.labels(node.xyz);
    if (c == root_comp) continue;
    auto it = comp_root.find(c);
    if (it == comp_root.end())
      comp_root[c] = node.id;
    else if (g.nodes[it->second].kind != NodeKind::endpoint && node.kind == NodeKind::endpoint)
      it->second = node.id;
  }
  for (const auto& [c, r] : comp_root) roots.push_back(r);
  detail::orient_branches(g, roots);
  return g;
}

/// Sets branch generations: the number of bifurcation nodes passed on the
/// way from the component root to the branch's proximal node (the root node
/// itself is not counted). Throws if the root component contains a cycle.
inline CenterlineGraph assign_generations(CenterlineGraph g) {
  if (g.nodes.empty()) throw DataError("assign_generations: empty graph");
  const auto adj = detail::node_adjacency(g);

  // Component membership over nodes.
  detail::UnionFind uf(g.nodes.size());
  for (const auto& b : g.branches) uf.unite(b.node_from, b.node_to);
  std::map<int, std::pair<int, int>> stats;  // comp -> (nodes, branches)
  for (const auto& n : g.nodes) ++stats[uf.find(n.id)].first;
  for (const auto& b : g.branches) ++stats[uf.find(b.node_from)].second;
  const auto& root_stats = stats[uf.find(g.root)];
  if (root_stats.second != root_stats.first - 1)
    throw DataError("assign_generations: cycle detected in the root component");

  std::vector<int> bif_count(g.nodes.size(), -1);
  // Proximal nodes with no incoming branch are component roots.
  std::vector<int> roots = {g.root};
  std::vector<char> has_incoming(g.nodes.size(), 0);
  for (const auto& b : g.branches)
    if (b.node_from != b.node_to) has_incoming[b.node_to] = 1;
  for (const auto& n : g.nodes)
    if (!has_incoming[n.id] && n.id != g.root) roots.push_back(n.id);

  for (const int r : roots) {
    if (bif_count[r] >= 0) continue;
    bif_count[r] = 0;
    std::queue<int> q;
    q.push(r);
    while (!q.empty()) {
      const int n = q.front();
      q.pop();
      for (const auto& [other, bid] : adj[n]) {
        if (bif_count[other] >= 0) continue;
        bif_count[other] =
            bif_count[n] + (g.nodes[other].kind == NodeKind::bifurcation ? 1 : 0);
        q.push(other);
      }
    }
  }
  for (auto& b : g.branches) b.generation = std::max(bif_count[b.node_from], 0);
  return g;
}

/// mean_diameter_vox = 2 * mean distance-transform value along the branch
/// path (node voxels are used for branches with an empty path).
inline CenterlineGraph estimate_diameters(CenterlineGraph g, const BinaryMask& m) {
  if (!(g.dims == m.dims())) throw DataError("estimate_diameters: graph/mask dimension mismatch");
  const ScalarVolume edt = distance_transform(m);
  for (auto& b : g.branches) {
    std::vector<Voxel> samples = b.path;
    if (samples.empty()) {
      samples.push_back(g.nodes[b.node_from].xyz);
      samples.push_back(g.nodes[b.node_to].xyz);
    }
    double sum = 0.0;
    for (const Voxel& v : samples) {
      if (!m.dims().contains(v) || !m(v))
        throw DataError("estimate_diameters: branch " + std::to_string(b.id) +
                        " has a path voxel outside the mask foreground");
      sum += edt(v);
    }
    b.mean_diameter_vox = 2.0 * sum / static_cast<double>(samples.size());
  }
  return g;
}

inline std::vector<int> terminal_branches(const CenterlineGraph& g) {
  std::vector<int> out;
  for (const auto& b : g.branches)
    if (b.is_terminal) out.push_back(b.id);
  return out;
}

/// All voxels of the graph (nodes and paths) as a mask.
inline BinaryMask graph_mask(const CenterlineGraph& g) {
  BinaryMask m(g.dims);
  for (const auto& n : g.nodes)
    for (const Voxel& v : n.voxels) m(v) = 1;
  for (const auto& b : g.branches)
    for (const Voxel& v : b.path) m(v) = 1;
  return m;
}

/// skeletonize + build_graph + assign_generations + estimate_diameters.
inline CenterlineGraph extract_centerline_graph(const BinaryMask& m, Voxel root_hint) {
  return estimate_diameters(assign_generations(build_graph(skeletonize(m), root_hint)), m);
}

}  // namespace treelab
