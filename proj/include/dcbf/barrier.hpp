#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dcbf/dynamics.hpp"

namespace dcbf {

struct BarrierDomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One scalar barrier b_e over the states of its member agents, with the
// per-member slice of its gradient and a linear class-K gain per member.
// `safety` is the plain safety certificate the barrier protects (s_e >= 0).
struct BarrierGroup {
  int id = 0;
  std::vector<int> members;  // sorted agent ids
  std::function<double(const JointState&)> value;
  std::function<Eigen::VectorXd(const JointState&, int agent)> gradient;
  std::function<double(const JointState&)> safety;
  std::vector<std::pair<int, double>> kappa;  // (agent id, linear class-K gain)

  double kappa_of(int agent) const {
    for (const auto& [i, k] : kappa)
      if (i == agent) return k;
    throw std::out_of_range("no class-K gain for agent " + std::to_string(agent));
  }
};

namespace detail {

struct PairGeometry {
  Eigen::Vector2d dp, dv;
  double q;  // squared center distance
};

inline PairGeometry pair_geometry(const JointState& x, int i, int j) {
  PairGeometry g;
  auto xi = x.part(i);
  auto xj = x.part(j);
  g.dp = xi.head<2>() - xj.head<2>();
  g.dv = xi.tail<2>() - xj.tail<2>();
  g.q = g.dp.squaredNorm();
  return g;
}

}  // namespace detail

// Braking-distance barrier between planar robots i and j. The default form
// keeps the squared center distance both inside the root and as the relative
// velocity normalization:
//   b = sqrt(2(a_i+a_j)(|dp|^2 - D)) + dp.dv / |dp|^2,     s = |dp|^2 - D.
// With standard_form the familiar distance-based variant is used instead:
//   b = sqrt(2(a_i+a_j)(|dp| - D)) + dp.dv / |dp|,         s = |dp| - D.
// Both are undefined at or below the margin D; evaluation there throws.
inline BarrierGroup pairwise_robot_barrier(int i, int j, double accel_i,
                                           double accel_j, double margin,
                                           double kappa_i = 1.0, double kappa_j = 1.0,
                                           bool standard_form = false) {
  if (i == j) throw std::invalid_argument("pair barrier needs distinct agents");
  if (i > j) {
    std::swap(i, j);
    std::swap(accel_i, accel_j);
    std::swap(kappa_i, kappa_j);
  }
  const double A = accel_i + accel_j;
  if (A <= 0.0 || margin <= 0.0)
    throw std::invalid_argument("pair barrier needs positive acceleration and margin");

  BarrierGroup g;
  g.members = {i, j};
  g.kappa = {{i, kappa_i}, {j, kappa_j}};

  auto radial = [i, j, margin, standard_form](const JointState& x) {
    auto geo = detail::pair_geometry(x, i, j);
    double r = standard_form ? std::sqrt(geo.q) : geo.q;
    if (r <= margin + 1e-9)
      throw BarrierDomainError("agents " + std::to_string(i) + "," + std::to_string(j) +
                               " inside barrier margin");
    return std::pair<detail::PairGeometry, double>(geo, r);
  };

  g.value = [radial, A, margin](const JointState& x) {
    auto [geo, r] = radial(x);
    return std::sqrt(2.0 * A * (r - margin)) + geo.dp.dot(geo.dv) / r;
  };

  g.gradient = [radial, A, margin, i, j, standard_form](const JointState& x, int agent) {
    if (agent != i && agent != j)
      throw std::out_of_range("gradient requested for non-member agent");
    auto [geo, r] = radial(x);
    const double root = std::sqrt(2.0 * A * (r - margin));
    const double pv = geo.dp.dot(geo.dv);
    Eigen::Vector2d dpos, dvel;
    if (standard_form) {
      dpos = (A / (root * r)) * geo.dp + geo.dv / r - (pv / (r * r * r)) * geo.dp;
      dvel = geo.dp / r;
    } else {
      dpos = (2.0 * A / root) * geo.dp + geo.dv / r - (2.0 * pv / (r * r)) * geo.dp;
      dvel = geo.dp / r;
    }
    Eigen::VectorXd grad(4);
    if (agent == i)
      grad << dpos[0], dpos[1], dvel[0], dvel[1];
    else
      grad << -dpos[0], -dpos[1], -dvel[0], -dvel[1];
    return grad;
  };

  g.safety = [i, j, margin, standard_form](const JointState& x) {
    auto geo = detail::pair_geometry(x, i, j);
    return (standard_form ? std::sqrt(geo.q) : geo.q) - margin;
  };

  return g;
}

// Agent i's slice of the group-e safety condition, written as an affine bound
// on u_i:  h_ie(u_i) = constant + coeff.u_i <= share of the group budget.
// coeff = -(db/dx_i)^T g_i(x_i), constant = -((db/dx_i).f_i(x_i) + kappa_ie b_e).
struct ConstraintRow {
  int agent = 0;
  int group = 0;
  Eigen::VectorXd coeff;
  double constant = 0.0;

  double eval(const Eigen::Ref<const Eigen::VectorXd>& u) const {
    return constant + coeff.dot(u);
  }
};

inline ConstraintRow assemble_row(const BarrierGroup& group,
                                  const std::vector<AgentSpec>& specs,
                                  const JointState& x, int agent) {
  const double b = group.value(x);
  const Eigen::VectorXd grad = group.gradient(x, agent);
  const AgentSpec& spec = specs[agent - 1];
  auto xi = x.part(agent);
  ConstraintRow row;
  row.agent = agent;
  row.group = group.id;
  row.coeff = -(spec.input_map(xi).transpose() * grad);
  row.constant = -(grad.dot(spec.drift(xi)) + group.kappa_of(agent) * b);
  return row;
}

// Sum of the member rows at the given stacked input; <= 0 means the group's
// safety condition holds at (x, u).
inline double group_residual(const BarrierGroup& group,
                             const std::vector<AgentSpec>& specs, const JointState& x,
                             const Eigen::Ref<const Eigen::VectorXd>& u_stacked) {
  std::vector<int> uoff(specs.size() + 1, 0);
  for (std::size_t k = 0; k < specs.size(); ++k)
    uoff[k + 1] = uoff[k] + specs[k].input_dim;
  if (u_stacked.size() != uoff.back())
    throw std::invalid_argument("stacked input dimension mismatch");
  double r = 0.0;
  for (int agent : group.members) {
    ConstraintRow row = assemble_row(group, specs, x, agent);
    r += row.eval(u_stacked.segment(uoff[agent - 1], specs[agent - 1].input_dim));
  }
  return r;
}

// All pairwise barriers for a robot collection, one group per topology group
// (which must be pairs), with per-robot margins D_i combining additively.
inline std::vector<BarrierGroup> pairwise_robot_barriers(
    const std::vector<AgentSpec>& specs, const std::vector<std::vector<int>>& pairs,
    const std::vector<double>& radius, double kappa, bool standard_form = false) {
  std::vector<BarrierGroup> out;
  out.reserve(pairs.size());
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    if (pairs[e].size() != 2)
      throw std::invalid_argument("pairwise barriers need two-agent groups");
    int i = pairs[e][0], j = pairs[e][1];
    double D = radius[i - 1] + radius[j - 1];
    BarrierGroup g = pairwise_robot_barrier(i, j, specs[i - 1].accel_limit,
                                            specs[j - 1].accel_limit, D, kappa, kappa,
                                            standard_form);
    g.id = static_cast<int>(e) + 1;
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace dcbf
