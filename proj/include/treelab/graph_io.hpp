#pragma once

// JSON form of CenterlineGraph:
//   {dims:[nx,ny,nz], root, nodes:[{id,xyz,kind}],
//    branches:[{id,node_from,node_to,path,generation,is_terminal,mean_diameter_vox}]}

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "treelab/error.hpp"
#include "treelab/skeleton.hpp"

namespace treelab {

inline nlohmann::json voxel_json(Voxel v) { return nlohmann::json::array({v.x, v.y, v.z}); }

inline Voxel voxel_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected [x, y, z] voxel coordinate");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline nlohmann::json to_json(const CenterlineGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes)
    nodes.push_back({{"id", n.id}, {"xyz", voxel_json(n.xyz)}, {"kind", to_string(n.kind)}});
  nlohmann::json branches = nlohmann::json::array();
  for (const auto& b : g.branches) {
    nlohmann::json path = nlohmann::json::array();
    for (const Voxel& v : b.path) path.push_back(voxel_json(v));
    branches.push_back({{"id", b.id},
                        {"node_from", b.node_from},
                        {"node_to", b.node_to},
                        {"path", std::move(path)},
                        {"generation", b.generation},
                        {"is_terminal", b.is_terminal},
                        {"mean_diameter_vox", b.mean_diameter_vox}});
  }
  return {{"dims", {g.dims.nx, g.dims.ny, g.dims.nz}},
          {"root", g.root},
          {"nodes", std::move(nodes)},
          {"branches", std::move(branches)}};
}

inline CenterlineGraph graph_from_json(const nlohmann::json& j) {
  try {
    CenterlineGraph g;
    const auto& dims = j.at("dims");
    g.dims = {dims.at(0).get<int>(), dims.at(1).get<int>(), dims.at(2).get<int>()};
    g.root = j.at("root").get<int>();
    for (const auto& n : j.at("nodes")) {
      GraphNode node;
      node.id = n.at("id").get<int>();
      node.xyz = voxel_from_json(n.at("xyz"));
      const auto kind = n.at("kind").get<std::string>();
      if (kind != "endpoint" && kind != "bifurcation") throw DataError("unknown node kind " + kind);
      node.kind = kind == "endpoint" ? NodeKind::endpoint : NodeKind::bifurcation;
      node.voxels = {node.xyz};
      if (node.id != static_cast<int>(g.nodes.size())) throw DataError("node ids must be 0..n-1");
      g.nodes.push_back(std::move(node));
    }
    for (const auto& b : j.at("branches")) {
      Branch br;
      br.id = b.at("id").get<int>();
      br.node_from = b.at("node_from").get<int>();
      br.node_to = b.at("node_to").get<int>();
      for (const auto& v : b.at("path")) br.path.push_back(voxel_from_json(v));
      br.generation = b.at("generation").get<int>();
      br.is_terminal = b.at("is_terminal").get<bool>();
      br.mean_diameter_vox = b.at("mean_diameter_vox").get<double>();
      if (br.id != static_cast<int>(g.branches.size())) throw DataError("branch ids must be 0..n-1");
      const auto n_nodes = static_cast<int>(g.nodes.size());
      if (br.node_from < 0 || br.node_from >= n_nodes || br.node_to < 0 || br.node_to >= n_nodes)
        throw DataError("branch " + std::to_string(br.id) + " references a missing node");
      g.branches.push_back(std::move(br));
    }
    if (g.root < 0 || g.root >= static_cast<int>(g.nodes.size()))
      throw DataError("graph root references a missing node");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed graph JSON: ") + e.what());
  }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse " + path.string() + ": " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

inline CenterlineGraph read_graph(const std::filesystem::path& path) {
  return graph_from_json(read_json(path));
}

inline void write_graph(const CenterlineGraph& g, const std::filesystem::path& path) {
  write_json(to_json(g), path);
}

}  // namespace treelab
