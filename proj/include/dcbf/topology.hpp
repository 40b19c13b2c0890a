#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcbf {

// Agent ids are 1..N and group ids 1..E throughout the public API; internal
// storage is zero-based with the translation confined to this class.

struct TopologyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexOutOfRange : TopologyError {
  explicit IndexOutOfRange(const std::string& what) : TopologyError(what) {}
};

struct DisconnectedGroup : TopologyError {
  int group;
  explicit DisconnectedGroup(int e)
      : TopologyError("group " + std::to_string(e) +
                      " is not connected through its induced edge set"),
        group(e) {}
};

struct NotMember : TopologyError {
  NotMember(int i, int e)
      : TopologyError("agent " + std::to_string(i) + " is not a member of group " +
                      std::to_string(e)) {}
};

class NetworkTopology {
 public:
  NetworkTopology() = default;

  // Edges are undirected pairs; groups list the agents whose states enter one
  // shared constraint. Every group must be connected within the subgraph its
  // members induce, so that group-internal quantities can actually be
  // exchanged hop-by-hop.
  NetworkTopology(int num_agents, std::vector<std::pair<int, int>> edges,
                  std::vector<std::vector<int>> groups)
      : n_(num_agents) {
    if (num_agents <= 0) throw IndexOutOfRange("num_agents must be positive");
    adj_.assign(n_, {});
    for (auto [a, b] : edges) {
      check_agent(a);
      check_agent(b);
      if (a == b) throw IndexOutOfRange("self edge at agent " + std::to_string(a));
      if (!has_edge(a, b)) {
        adj_[a - 1].push_back(b);
        adj_[b - 1].push_back(a);
      }
    }
    for (auto& nb : adj_) std::sort(nb.begin(), nb.end());

    groups_.reserve(groups.size());
    constraints_of_.assign(n_, {});
    for (auto& g : groups) {
      if (g.empty()) throw IndexOutOfRange("empty group");
      std::sort(g.begin(), g.end());
      g.erase(std::unique(g.begin(), g.end()), g.end());
      for (int i : g) check_agent(i);
      groups_.push_back(g);
      int e = static_cast<int>(groups_.size());
      if (!group_connected(g)) throw DisconnectedGroup(e);
      for (int i : g) constraints_of_[i - 1].push_back(e);
    }
  }

  int num_agents() const { return n_; }
  int num_groups() const { return static_cast<int>(groups_.size()); }

  const std::vector<int>& members(int e) const {
    check_group(e);
    return groups_[e - 1];
  }

  // C_i: ids of the groups agent i participates in.
  const std::vector<int>& constraints_of(int i) const {
    check_agent(i);
    return constraints_of_[i - 1];
  }

  const std::vector<int>& neighbors(int i) const {
    check_agent(i);
    return adj_[i - 1];
  }

  bool has_edge(int i, int l) const {
    check_agent(i);
    check_agent(l);
    const auto& nb = adj_[i - 1];
    return std::find(nb.begin(), nb.end(), l) != nb.end();
  }

  // Neighbors of i that share group e with it.
  std::vector<int> group_peers(int i, int e) const {
    const auto& g = members(e);
    if (!std::binary_search(g.begin(), g.end(), i)) throw NotMember(i, e);
    std::vector<int> peers;
    for (int l : neighbors(i))
      if (std::binary_search(g.begin(), g.end(), l)) peers.push_back(l);
    return peers;
  }

  bool is_member(int i, int e) const {
    const auto& g = members(e);
    check_agent(i);
    return std::binary_search(g.begin(), g.end(), i);
  }

 private:
  void check_agent(int i) const {
    if (i < 1 || i > n_)
      throw IndexOutOfRange("agent id " + std::to_string(i) + " outside 1.." +
                            std::to_string(n_));
  }
  void check_group(int e) const {
    if (e < 1 || e > num_groups())
      throw IndexOutOfRange("group id " + std::to_string(e) + " outside 1.." +
                            std::to_string(num_groups()));
  }

  bool group_connected(const std::vector<int>& g) const {
    if (g.size() <= 1) return true;
    std::vector<int> stack{g.front()};
    std::vector<bool> seen(n_ + 1, false);
    seen[g.front()] = true;
    std::size_t reached = 1;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int w : adj_[v - 1]) {
        if (!seen[w] && std::binary_search(g.begin(), g.end(), w)) {
          seen[w] = true;
          ++reached;
          stack.push_back(w);
        }
      }
    }
    return reached == g.size();
  }

  int n_ = 0;
  std::vector<std::vector<int>> adj_;           // per agent, sorted neighbor ids
  std::vector<std::vector<int>> groups_;        // per group, sorted member ids
  std::vector<std::vector<int>> constraints_of_;  // per agent, group ids
};

// Complete communication graph with one pairwise group per agent pair,
// ordered (1,2), (1,3), ..., (2,3), ...
inline NetworkTopology all_pairs_topology(int num_agents) {
  std::vector<std::pair<int, int>> edges;
  std::vector<std::vector<int>> groups;
  for (int i = 1; i <= num_agents; ++i)
    for (int j = i + 1; j <= num_agents; ++j) {
      edges.emplace_back(i, j);
      groups.push_back({i, j});
    }
  return NetworkTopology(num_agents, std::move(edges), std::move(groups));
}

}  // namespace dcbf
