// gridgemm: static cluster topology. Workers sit in root-complex groups,
// groups sit on nodes, and each worker pair maps to exactly one transport
// medium: peer-to-peer inside a group, intra-node fabric across groups on
// one node, inter-node fabric across nodes. Master endpoints always reach
// workers over host shared memory.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "gridgemm/common.hpp"
#include "gridgemm/cost_model.hpp"

namespace gridgemm {

class Topology {
public:
  Topology() = default;

  static Topology single_group(int worker_count) {
    Topology t;
    t.worker_count_ = worker_count;
    t.group_of_.assign(worker_count, 0);
    t.node_of_group_ = {0};
    return t;
  }

  /// Default shape: groups of four workers per root complex, two groups per
  /// node.
  static Topology default_grouped(int worker_count) {
    Topology t;
    t.worker_count_ = worker_count;
    t.group_of_.resize(worker_count);
    int groups = 0;
    for (int w = 0; w < worker_count; ++w) {
      t.group_of_[w] = w / 4;
      groups = std::max(groups, w / 4 + 1);
    }
    t.node_of_group_.resize(groups);
    for (int g = 0; g < groups; ++g) t.node_of_group_[g] = g / 2;
    return t;
  }

  /// Text config, one entry per line:
  ///   group <gid>: <worker ids...>
  ///   node <nid>: <group ids...>
  /// Every worker must appear in exactly one group. Groups without node
  /// lines all land on node 0.
  static Topology parse(std::istream& in, int worker_count) {
    Topology t;
    t.worker_count_ = worker_count;
    t.group_of_.assign(worker_count, -1);
    std::vector<int> node_of_group;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::istringstream ls(line);
      std::string kind;
      if (!(ls >> kind) || kind[0] == '#') continue;
      std::string idtok;
      if (!(ls >> idtok) || idtok.back() != ':')
        throw ConfigError("topology: expected '<kind> <id>:' at line " + std::to_string(lineno));
      const int id = std::stoi(idtok.substr(0, idtok.size() - 1));
      if (kind == "group") {
        int w;
        while (ls >> w) {
          if (w < 0 || w >= worker_count)
            throw ConfigError("topology: worker id out of range at line " + std::to_string(lineno));
          if (t.group_of_[w] != -1)
            throw ConfigError("topology: worker " + std::to_string(w) + " referenced twice");
          t.group_of_[w] = id;
        }
      } else if (kind == "node") {
        int g;
        while (ls >> g) {
          if (g < 0) throw ConfigError("topology: bad group id at line " + std::to_string(lineno));
          if (static_cast<std::size_t>(g) >= node_of_group.size())
            node_of_group.resize(g + 1, -1);
          if (node_of_group[g] != -1)
            throw ConfigError("topology: group " + std::to_string(g) + " referenced twice");
          node_of_group[g] = id;
        }
      } else {
        throw ConfigError("topology: unknown entry '" + kind + "' at line " + std::to_string(lineno));
      }
    }
    int max_group = -1;
    for (int w = 0; w < worker_count; ++w) {
      if (t.group_of_[w] == -1)
        throw ConfigError("topology: worker " + std::to_string(w) + " not assigned to a group");
      max_group = std::max(max_group, t.group_of_[w]);
    }
    node_of_group.resize(max_group + 1, -1);
    for (auto& n : node_of_group)
      if (n == -1) n = 0;
    t.node_of_group_ = std::move(node_of_group);
    return t;
  }

  int worker_count() const { return worker_count_; }
  int group_of(WorkerId w) const { return group_of_[w]; }
  int node_of(WorkerId w) const { return node_of_group_[group_of_[w]]; }

  Medium medium_between(WorkerId a, WorkerId b) const {
    if (a == kMasterId || b == kMasterId) return Medium::SharedMemHost;
    check(a);
    check(b);
    if (group_of_[a] == group_of_[b]) return Medium::PeerToPeer;
    if (node_of(a) == node_of(b)) return Medium::IntraNodeFabric;
    return Medium::InterNodeFabric;
  }

private:
  void check(WorkerId w) const {
    if (w < 0 || w >= worker_count_) throw ConfigError("topology: unknown worker id");
  }

  int worker_count_ = 0;
  std::vector<int> group_of_;
  std::vector<int> node_of_group_;
};

}  // namespace gridgemm
