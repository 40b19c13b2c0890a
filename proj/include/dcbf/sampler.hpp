#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dcbf/barrier.hpp"
#include "dcbf/dynamics.hpp"
#include "dcbf/topology.hpp"

namespace dcbf {

struct SamplingExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SamplerOptions {
  int rejection_draws = 10000;  // draws per conditional-set attempt
  int max_restarts = 1000;      // failure events per scenario before giving up
};

struct SampleStats {
  long draws = 0;
  int restarts = 0;
  int max_failure_counter = 0;
  // (position at failure, counter after increment, jump target)
  std::vector<std::tuple<int, int, int>> failures;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform01(std::mt19937_64& gen) {
  return (gen() >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Deterministic per-scenario generator stream: scenario r of a run keyed by
// `master` always sees the same draws regardless of which other scenarios
// are produced.
inline std::mt19937_64 scenario_stream(std::uint64_t master, int scenario) {
  return std::mt19937_64(
      detail::splitmix64(master + static_cast<std::uint64_t>(scenario) *
                                      0x9e3779b97f4a7c15ULL));
}

// Groups whose membership closes at agent i: every other member has a lower
// id, so the group's barrier becomes checkable once x_i is drawn.
inline std::vector<int> groups_closed_at(const NetworkTopology& topo, int i) {
  std::vector<int> out;
  for (int e : topo.constraints_of(i)) {
    bool last = true;
    for (int l : topo.members(e))
      if (l > i) {
        last = false;
        break;
      }
    if (last) out.push_back(e);
  }
  return out;
}

// True when every group closing at agent i admits the partial state: the
// barrier is defined there and nonnegative. Only agents 1..i of x are read.
inline bool conditional_set_test(const NetworkTopology& topo,
                                 const std::vector<BarrierGroup>& groups, int i,
                                 const JointState& x) {
  for (int e : groups_closed_at(topo, i)) {
    const auto& g = groups[e - 1];
    try {
      if (g.value(x) < 0.0) return false;
    } catch (const BarrierDomainError&) {
      return false;
    }
  }
  return true;
}

// One scenario of the sequential conditional sampler. Agents are drawn in id
// order, uniformly over their state boxes; agent i's draw is accepted when
// all groups closing at i check out. When `rejection_draws` draws all fail
// the failure counter F grows and sampling restarts from agent max(1, i-F);
// a successful forward step resets F.
inline JointState sample_scenario(const std::vector<AgentSpec>& specs,
                                  const NetworkTopology& topo,
                                  const std::vector<BarrierGroup>& groups,
                                  std::mt19937_64& gen,
                                  const SamplerOptions& opts = {},
                                  SampleStats* stats = nullptr) {
  const int n = topo.num_agents();
  for (const auto& s : specs)
    if (!s.state_box.lo.allFinite() || !s.state_box.hi.allFinite())
      throw std::invalid_argument("scenario sampling needs bounded state boxes");

  JointState x = JointState::zeros(specs);
  SampleStats local;
  SampleStats& st = stats ? *stats : local;
  st = SampleStats{};

  int failure_counter = 0;
  int i = 1;
  while (i <= n) {
    const auto& box = specs[i - 1].state_box;
    auto xi = x.part(i);
    bool accepted = false;
    for (int d = 0; d < opts.rejection_draws; ++d) {
      ++st.draws;
      for (Eigen::Index k = 0; k < xi.size(); ++k)
        xi[k] = box.lo[k] + (box.hi[k] - box.lo[k]) * detail::uniform01(gen);
      if (conditional_set_test(topo, groups, i, x)) {
        accepted = true;
        break;
      }
    }
    if (accepted) {
      failure_counter = 0;
      ++i;
      continue;
    }
    ++failure_counter;
    ++st.restarts;
    st.max_failure_counter = std::max(st.max_failure_counter, failure_counter);
    const int target = std::max(1, i - failure_counter);
    st.failures.emplace_back(i, failure_counter, target);
    if (st.restarts > opts.max_restarts)
      throw SamplingExhausted("scenario sampling stalled at agent " +
                              std::to_string(i) + " after " +
                              std::to_string(st.restarts) + " restarts");
    i = target;
  }
  return x;
}

// Batch of scenarios on independent per-index streams.
inline std::vector<JointState> sample_many(const std::vector<AgentSpec>& specs,
                                           const NetworkTopology& topo,
                                           const std::vector<BarrierGroup>& groups,
                                           int count, std::uint64_t master_seed,
                                           const SamplerOptions& opts = {},
                                           std::vector<SampleStats>* stats = nullptr) {
  if (count < 0) throw std::invalid_argument("negative sample count");
  std::vector<JointState> out;
  out.reserve(count);
  if (stats) stats->assign(count, SampleStats{});
  for (int r = 0; r < count; ++r) {
    std::mt19937_64 gen = scenario_stream(master_seed, r);
    out.push_back(sample_scenario(specs, topo, groups, gen, opts,
                                  stats ? &(*stats)[r] : nullptr));
  }
  return out;
}

}  // namespace dcbf
