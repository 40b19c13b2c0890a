#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "dcbf/barrier.hpp"
#include "dcbf/distsolve.hpp"
#include "dcbf/dynamics.hpp"
#include "dcbf/topology.hpp"
#include "oracles.hpp"

using Eigen::VectorXd;

namespace {

// Singleton diagnostic group with a fixed gradient; lets the spectrum tests
// pin exact row norms.
dcbf::BarrierGroup probe_group(int id, int agent, VectorXd grad,
                               double value = 1.0) {
  dcbf::BarrierGroup g;
  g.id = id;
  g.members = {agent};
  g.kappa = {{agent, 1.0}};
  g.value = [value](const dcbf::JointState&) { return value; };
  g.safety = [value](const dcbf::JointState&) { return value; };
  g.gradient = [grad, agent](const dcbf::JointState&, int a) {
    if (a != agent) throw std::out_of_range("non-member");
    return grad;
  };
  return g;
}

dcbf::AgentSpec identity_agent(int dim, double half_width) {
  dcbf::AgentSpec s;
  s.state_dim = dim;
  s.input_dim = dim;
  s.state_box = dcbf::Box::centered(dim, half_width);
  s.input_box = dcbf::Box::centered(dim, half_width);
  s.drift = [dim](const Eigen::Ref<const VectorXd>&) -> VectorXd {
    return VectorXd::Zero(dim);
  };
  s.input_map = [dim](const Eigen::Ref<const VectorXd>&) -> Eigen::MatrixXd {
    return Eigen::MatrixXd::Identity(dim, dim);
  };
  s.nominal = [dim](const Eigen::Ref<const VectorXd>&) -> VectorXd {
    return VectorXd::Zero(dim);
  };
  return s;
}

// Closed-form eigenvalues of a symmetric 3x3 matrix (trigonometric method),
// ascending. Independent of the iterative solver under test.
std::array<double, 3> sym3_eigs(const Eigen::Matrix3d& A) {
  const double p1 =
      A(0, 1) * A(0, 1) + A(0, 2) * A(0, 2) + A(1, 2) * A(1, 2);
  if (p1 == 0.0) {
    std::array<double, 3> e{A(0, 0), A(1, 1), A(2, 2)};
    std::sort(e.begin(), e.end());
    return e;
  }
  const double q = A.trace() / 3.0;
  const double p2 = (A(0, 0) - q) * (A(0, 0) - q) +
                    (A(1, 1) - q) * (A(1, 1) - q) +
                    (A(2, 2) - q) * (A(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  Eigen::Matrix3d B = (A - q * Eigen::Matrix3d::Identity()) / p;
  double r = B.determinant() / 2.0;
  r = std::clamp(r, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double hi = q + 2.0 * p * std::cos(phi);
  const double lo = q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
  return {lo, 3.0 * q - hi - lo, hi};
}

struct Fleet {
  std::vector<dcbf::AgentSpec> specs;
  dcbf::NetworkTopology topo;
  std::vector<dcbf::BarrierGroup> groups;
  dcbf::JointState x;
};

// Two planar robots on the x axis closing on each other.
Fleet head_on(double gap_half, double speed, double accel, double margin,
              double kd) {
  Fleet f;
  f.specs.push_back(dcbf::double_integrator_agent(accel, 4.0, 3.0, {3.0, 0.0},
                                                  1.0, kd));
  f.specs.push_back(dcbf::double_integrator_agent(accel, 4.0, 3.0, {-3.0, 0.0},
                                                  1.0, kd));
  f.topo = dcbf::NetworkTopology(2, {{1, 2}}, {{1, 2}});
  f.groups = {dcbf::pairwise_robot_barrier(1, 2, accel, accel, margin)};
  f.groups[0].id = 1;
  f.x = dcbf::JointState::zeros(f.specs);
  f.x.part(1) << -gap_half, 0.0, speed, 0.0;
  f.x.part(2) << gap_half, 0.0, -speed, 0.0;
  return f;
}

// n robots on a circle with inward velocities, all pairwise barriers, goals
// at the antipode.
Fleet ring(int n, double circle, double speed, double accel, double D,
           double phase = 0.0, double kd = -1.0) {
  Fleet f;
  std::vector<Eigen::VectorXd> parts;
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * M_PI * i / n + phase;
    Eigen::Vector2d p(circle * std::cos(a), circle * std::sin(a));
    f.specs.push_back(
        dcbf::double_integrator_agent(accel, 4.0, 3.0, -p, 1.0, kd));
    Eigen::VectorXd s(4);
    s << p[0], p[1], -speed * std::cos(a), -speed * std::sin(a);
    parts.push_back(s);
  }
  f.topo = dcbf::all_pairs_topology(n);
  std::vector<std::vector<int>> pairs;
  for (int e = 1; e <= f.topo.num_groups(); ++e) pairs.push_back(f.topo.members(e));
  f.groups = dcbf::pairwise_robot_barriers(f.specs, pairs,
                                           std::vector<double>(n, D / 2.0), 1.0);
  f.x = dcbf::pack_state(f.specs, parts);
  return f;
}

// Stacked safety QP built independently of the solver's internal assembly.
dcbf::QpProblem stacked_problem(const Fleet& f) {
  const std::vector<int> uoff = dcbf::input_offsets(f.specs);
  dcbf::QpProblem p;
  const int d = uoff.back();
  p.H = 2.0 * Eigen::MatrixXd::Identity(d, d);
  p.f.resize(d);
  p.lb.resize(d);
  p.ub.resize(d);
  for (std::size_t i = 0; i < f.specs.size(); ++i) {
    const auto& sp = f.specs[i];
    p.f.segment(uoff[i], sp.input_dim) = -2.0 * sp.nominal(f.x.part(int(i) + 1));
    p.lb.segment(uoff[i], sp.input_dim) = sp.input_box.lo;
    p.ub.segment(uoff[i], sp.input_dim) = sp.input_box.hi;
  }
  p.G.setZero(int(f.groups.size()), d);
  p.g.resize(int(f.groups.size()));
  for (std::size_t e = 0; e < f.groups.size(); ++e) {
    double c = 0.0;
    for (int i : f.groups[e].members) {
      auto row = dcbf::assemble_row(f.groups[e], f.specs, f.x, i);
      p.G.row(int(e)).segment(uoff[i - 1], f.specs[i - 1].input_dim) = row.coeff;
      c += row.constant;
    }
    p.g[int(e)] = -c;
  }
  return p;
}

dcbf::SolverParams basic_params(const Fleet& f, double rate, double tol) {
  return dcbf::select_penalties(f.specs, f.topo, f.x, rate,
                                VectorXd::Constant(f.topo.num_agents(), tol));
}

}  // namespace

TEST_CASE("contraction spectrum on pinned row sets") {
  std::vector<dcbf::AgentSpec> one{
      dcbf::double_integrator_agent(1.0, 4.0, 3.0, {0.0, 0.0})};
  dcbf::JointState x = dcbf::JointState::zeros(one);

  SECTION("single unit row") {
    VectorXd g(4);
    g << 0.0, 0.0, 1.0, 0.0;  // input slice (1,0): unit norm
    dcbf::NetworkTopology topo(1, {}, {{1}});
    auto info = dcbf::compute_theta(one, topo, {probe_group(1, 1, g)}, x);
    CHECK(info.rate == Catch::Approx(0.0).margin(1e-14));
    CHECK(info.step_max == Catch::Approx(0.125));
    CHECK(info.rows == 1);
  }

  SECTION("two independent rows with norms 1 and 2") {
    std::vector<dcbf::AgentSpec> two{
        dcbf::double_integrator_agent(1.0, 4.0, 3.0, {0.0, 0.0}),
        dcbf::double_integrator_agent(1.0, 4.0, 3.0, {0.0, 0.0})};
    dcbf::JointState x2 = dcbf::JointState::zeros(two);
    VectorXd g1(4), g2(4);
    g1 << 0.0, 0.0, 1.0, 0.0;
    g2 << 0.0, 0.0, 0.0, 2.0;
    dcbf::NetworkTopology topo(2, {}, {{1}, {2}});
    auto info = dcbf::compute_theta(
        two, topo, {probe_group(1, 1, g1), probe_group(2, 2, g2)}, x2);
    CHECK(info.sigma_min == Catch::Approx(1.0));
    CHECK(info.sigma_max == Catch::Approx(4.0));
    CHECK(info.rate == Catch::Approx(0.75));
    CHECK(info.step_max == Catch::Approx(0.125));
  }

  SECTION("general 3x3 case against the closed-form characteristic roots") {
    std::vector<dcbf::AgentSpec> tri{identity_agent(3, 10.0)};
    dcbf::JointState x3 = dcbf::JointState::zeros(tri);
    VectorXd g1(3), g2(3), g3(3);
    g1 << 1.0, 2.0, 0.0;
    g2 << 0.0, 1.0, 1.0;
    g3 << 2.0, 0.0, 1.0;
    dcbf::NetworkTopology topo(1, {}, {{1}, {1}, {1}});
    auto info = dcbf::compute_theta(
        tri, topo,
        {probe_group(1, 1, g1), probe_group(2, 1, g2), probe_group(3, 1, g3)},
        x3);

    Eigen::Matrix3d gram;
    gram << g1.dot(g1), g1.dot(g2), g1.dot(g3),
            g2.dot(g1), g2.dot(g2), g2.dot(g3),
            g3.dot(g1), g3.dot(g2), g3.dot(g3);
    auto eig = sym3_eigs(gram);
    REQUIRE(eig[0] > 0.0);
    CHECK(info.sigma_min == Catch::Approx(eig[0]).epsilon(1e-10));
    CHECK(info.sigma_max == Catch::Approx(eig[2]).epsilon(1e-10));
    CHECK(info.rate == Catch::Approx(1.0 - eig[0] / eig[2]).epsilon(1e-10));
    CHECK(info.step_max == Catch::Approx(0.125));
  }

  SECTION("duplicated rows are rank deficient") {
    VectorXd g(4);
    g << 0.0, 0.0, 1.0, 0.5;
    dcbf::NetworkTopology topo(1, {}, {{1}, {1}});
    CHECK_THROWS_AS(dcbf::compute_theta(
                        one, topo, {probe_group(1, 1, g), probe_group(2, 1, g)}, x),
                    dcbf::RankDeficient);
  }

  SECTION("rows that never touch the input are dropped") {
    VectorXd pos_only(4), unit(4);
    pos_only << 1.0, 0.0, 0.0, 0.0;  // zero input-slice coefficient
    unit << 0.0, 0.0, 1.0, 0.0;

    dcbf::NetworkTopology solo(1, {}, {{1}});
    CHECK_THROWS_WITH(
        dcbf::compute_theta(one, solo, {probe_group(1, 1, pos_only)}, x),
        Catch::Matchers::ContainsSubstring("no constraint rows"));

    dcbf::NetworkTopology both(1, {}, {{1}, {1}});
    auto info = dcbf::compute_theta(
        one, both, {probe_group(1, 1, pos_only), probe_group(2, 1, unit)}, x);
    CHECK(info.rate == Catch::Approx(0.0).margin(1e-14));
    CHECK(info.step_max == Catch::Approx(0.125));
  }

  SECTION("a single pair barrier always has matched row norms") {
    Fleet f = head_on(1.0, 0.3, 1.0, 0.5, -1.0);
    auto info = dcbf::compute_theta(f.specs, f.topo, f.groups, f.x);
    const double q = 4.0;  // squared distance at gap_half = 1
    CHECK(info.rate == Catch::Approx(0.0).margin(1e-12));
    // matched row norms: sigma_min = sigma_max = 1/q, step bound is the
    // geometry-independent base step of the norm-scaled exchange
    CHECK(info.sigma_min == Catch::Approx(1.0 / q).epsilon(1e-12));
    CHECK(info.step_max == Catch::Approx(0.125));
  }
}

TEST_CASE("worst-case tracking deviation over the input box") {
  auto spec = dcbf::double_integrator_agent(1.0, 4.0, 3.0, {0.0, 0.0}, 1.0, 2.0);
  VectorXd at_goal(4), offset(4);
  at_goal << 0.0, 0.0, 0.0, 0.0;
  offset << -0.5, 0.0, 0.0, 0.0;  // nominal = (0.5, 0)

  CHECK(dcbf::deviation_bound(spec, at_goal) == Catch::Approx(2.0));
  CHECK(dcbf::deviation_bound(spec, offset) == Catch::Approx(3.25));

  dcbf::AgentSpec open = identity_agent(2, 1.0);
  open.input_box = dcbf::Box::centered(2, dcbf::kUnbounded);
  CHECK(std::isinf(dcbf::deviation_bound(open, VectorXd::Zero(2))));
}

TEST_CASE("penalty selection sizes the relaxation price") {
  std::vector<dcbf::AgentSpec> one{
      dcbf::double_integrator_agent(1.0, 4.0, 3.0, {0.0, 0.0}, 1.0, 2.0)};
  dcbf::NetworkTopology topo(1, {}, {{1}});
  dcbf::JointState x = dcbf::JointState::zeros(one);  // nominal (0,0), dev = 2

  auto p = dcbf::select_penalties(one, topo, x, 0.5, VectorXd::Constant(1, 0.001));
  CHECK(p.dev_bound[0] == Catch::Approx(2.0));
  // need = 0.5 * 2 / (0.5 * 0.001) = 2000, margin 25% on top
  CHECK(p.penalty[0] == Catch::Approx(2500.0));
  CHECK(p.rate == 0.5);

  // large budget: the floor wins
  auto q = dcbf::select_penalties(one, topo, x, 0.5, VectorXd::Constant(1, 1.0));
  CHECK(q.penalty[0] == Catch::Approx(100.0));

  CHECK_THROWS_AS(dcbf::select_penalties(one, topo, x, 0.0, VectorXd::Constant(1, 0.1)),
                  dcbf::SolveError);
  CHECK_THROWS_AS(dcbf::select_penalties(one, topo, x, 1.0, VectorXd::Constant(1, 0.1)),
                  dcbf::SolveError);
  CHECK_THROWS_AS(dcbf::select_penalties(one, topo, x, 0.5, VectorXd::Constant(2, 0.1)),
                  dcbf::SolveError);

  // optional price enforcement against a centralized dual: prices already
  // above the multiplier are left alone, short ones are raised to the
  // multiplier plus the selection margin
  dcbf::CentralizedSolution ref;
  ref.group_dual = VectorXd::Constant(1, 2000.0);
  auto ok = dcbf::select_penalties(one, topo, x, 0.5, VectorXd::Constant(1, 0.001),
                                   {}, &ref);
  CHECK(ok.lemma_validated);
  CHECK(ok.penalty[0] == Catch::Approx(2500.0));  // unchanged: 2500 > 2000
  ref.group_dual[0] = 3000.0;
  auto raised = dcbf::select_penalties(one, topo, x, 0.5,
                                       VectorXd::Constant(1, 0.001), {}, &ref);
  CHECK(raised.lemma_validated);
  CHECK(raised.penalty[0] == Catch::Approx(3750.0));  // 3000 * 1.25
}

TEST_CASE("exchange ledger bookkeeping") {
  dcbf::NetworkTopology topo(2, {{1, 2}}, {{1, 2}});
  auto led = dcbf::AuxLedger::build(topo);
  REQUIRE(led.keys().size() == 2);

  dcbf::dual_update(led, 1, 2, 1, 2.0, 0.5, 0.1);
  CHECK(led.at(1, 2, 1) == Catch::Approx(-0.15));
  CHECK(led.at(2, 1, 1) == 0.0);
  CHECK(led.offset(1, 1, topo) == Catch::Approx(-0.15));
  CHECK(led.offset(2, 1, topo) == Catch::Approx(0.15));
  CHECK(led.offset(1, 1, topo) + led.offset(2, 1, topo) ==
        Catch::Approx(0.0).margin(1e-15));

  CHECK_THROWS_AS(led.at(1, 3, 1), dcbf::SolveError);
}

TEST_CASE("local subproblem satisfies the relaxation price identity") {
  // Hot state: the row is unsatisfiable inside the input box, so the
  // relaxation must engage and its dual equals 2*rho + M.
  Fleet hot = head_on(0.6, 3.0, 1.0, 0.5, 0.0);
  auto rows = dcbf::detail::RowTable::build(hot.specs, hot.topo, hot.groups, hot.x);
  const double M = 100.0;
  std::vector<double> zero_offs(1, 0.0);
  auto lp = dcbf::local_subproblem(hot.specs[0], rows.per_agent[0], zero_offs,
                                   hot.specs[0].nominal(hot.x.part(1)), M);
  auto sol = dcbf::solve_qp(lp.qp);
  REQUIRE(sol.status == dcbf::QpStatus::Optimal);
  const double rho = sol.z[2];
  REQUIRE(rho > 1e-9);
  CHECK(sol.mu[0] == Catch::Approx(2.0 * rho + M).epsilon(1e-9));

  auto ref = oracle::solve(lp.qp, 1e-9);
  REQUIRE(ref.has_value());
  CHECK((sol.z - ref->z).cwiseAbs().maxCoeff() <
        1e-8 * std::max(1.0, ref->z.cwiseAbs().maxCoeff()));

  // Cold state: row slack at the nominal input, no relaxation, dual under M.
  Fleet cold = head_on(1.5, -0.5, 1.0, 0.5, 0.0);  // opening velocities
  auto crows = dcbf::detail::RowTable::build(cold.specs, cold.topo, cold.groups,
                                             cold.x);
  auto clp = dcbf::local_subproblem(cold.specs[0], crows.per_agent[0], zero_offs,
                                    cold.specs[0].nominal(cold.x.part(1)), M);
  auto csol = dcbf::solve_qp(clp.qp);
  REQUIRE(csol.status == dcbf::QpStatus::Optimal);
  CHECK(csol.z[2] <= 1e-9);
  CHECK(csol.mu[0] <= M + 1e-8);
}

TEST_CASE("centralized filter agrees with the enumeration oracle") {
  Fleet f = head_on(1.0, 1.0, 1.0, 0.5, 0.5);
  auto cs = dcbf::centralized_solve(f.specs, f.topo, f.groups, f.x);
  auto ref = oracle::solve(stacked_problem(f), 1e-9);
  REQUIRE(ref.has_value());
  CHECK((cs.u - ref->z).cwiseAbs().maxCoeff() < 1e-8);
  REQUIRE(cs.group_dual.size() == 1);
  CHECK(cs.group_dual[0] > 0.0);  // the row binds at this state

  // the group condition holds at the filtered input
  CHECK(dcbf::group_residual(f.groups[0], f.specs, f.x, cs.u) < 1e-8);

  // closing too fast for the actuation: no feasible input exists
  Fleet doomed = head_on(1.0, 2.5, 1.0, 0.5, 0.5);
  CHECK_THROWS_AS(dcbf::centralized_solve(doomed.specs, doomed.topo, doomed.groups,
                                          doomed.x),
                  dcbf::InfeasibleProblem);
}

TEST_CASE("distributed consensus matches the centralized solution") {
  SECTION("two robots, one active constraint") {
    Fleet f = head_on(1.0, 1.0, 1.0, 0.5, 0.5);
    auto cs = dcbf::centralized_solve(f.specs, f.topo, f.groups, f.x);
    auto params = basic_params(f, 0.5, 0.001);
    auto dec = dcbf::run_full(f.specs, f.topo, f.groups, f.x, params);
    CHECK(dec.converged);
    CHECK((dec.u - cs.u).cwiseAbs().maxCoeff() < 1e-4);
    CHECK(dec.rho_sum_last <= params.penalty.dot(params.tol) + 1e-9);
  }

  SECTION("three robots, coupled pairs") {
    Fleet f = ring(3, 1.3, 0.8, 1.0, 0.5, 0.35);
    auto cs = dcbf::centralized_solve(f.specs, f.topo, f.groups, f.x);
    auto theta = dcbf::compute_theta(f.specs, f.topo, f.groups, f.x);
    const double rate = std::min(std::max(theta.rate, 0.05), 0.999);
    auto params = basic_params(f, rate, 0.001);
    auto dec = dcbf::run_full(f.specs, f.topo, f.groups, f.x, params);
    CHECK(dec.converged);
    CHECK((dec.u - cs.u).cwiseAbs().maxCoeff() < 1e-4);
    for (const auto& g : f.groups)
      CHECK(dcbf::group_residual(g, f.specs, f.x, dec.u) < 1e-6);
  }
}

TEST_CASE("round trace carries the dual decomposition invariants") {
  Fleet f = ring(4, 1.2, 1.0, 1.0, 0.5, 0.2);
  auto theta = dcbf::compute_theta(f.specs, f.topo, f.groups, f.x);
  REQUIRE(theta.rate > 0.0);
  REQUIRE(theta.rate < 1.0);
  auto params = basic_params(f, theta.rate, 0.01);

  dcbf::RunOptions opts;
  opts.record_trace = true;
  auto dec = dcbf::run_truncated(f.specs, f.topo, f.groups, f.x, params, 15, opts);
  REQUIRE(dec.trace);
  REQUIRE(!dec.trace->rounds.empty());

  const auto& index = dec.trace->rho_index;
  const int n = f.topo.num_agents();
  const std::vector<int> uoff = dcbf::input_offsets(f.specs);
  auto ref_ledger = dcbf::AuxLedger::build(f.topo);
  auto rows = dcbf::detail::RowTable::build(f.specs, f.topo, f.groups, f.x);

  for (const auto& rec : dec.trace->rounds) {
    REQUIRE(rec.rho.size() == index.size());
    REQUIRE(rec.lambda.size() == ref_ledger.values().size());

    // rebuild the ledger the round saw
    auto led = dcbf::AuxLedger::build(f.topo);
    for (std::size_t k = 0; k < rec.lambda.size(); ++k) {
      auto [i, l, e] = led.keys()[k];
      led.at(i, l, e) = rec.lambda[k];
    }

    // the exchange offsets cancel inside every group
    for (int e = 1; e <= f.topo.num_groups(); ++e) {
      double total = 0.0;
      for (int i : f.topo.members(e)) total += led.offset(i, e, f.topo);
      CHECK(std::abs(total) < 1e-12);
    }

    // primal cost equals the dual value at the reported multipliers,
    // agent by agent (strong duality of each local solve)
    std::size_t k = 0;
    for (int i = 1; i <= n; ++i) {
      const auto& my_rows = rows.per_agent[i - 1];
      const VectorXd d = f.specs[i - 1].nominal(f.x.part(i));
      const VectorXd ui = rec.u.segment(uoff[i - 1], f.specs[i - 1].input_dim);
      const double M = params.penalty[i - 1];

      double primal = (ui - d).squaredNorm();
      VectorXd s = VectorXd::Zero(d.size());
      double dual = 0.0;
      for (std::size_t r = 0; r < my_rows.size(); ++r, ++k) {
        REQUIRE(index[k].first == i);
        REQUIRE(index[k].second == my_rows[r].group);
        const double rho = rec.rho[k];
        const double mu = rec.mu[k];
        primal += rho * rho + M * rho;
        s += mu * my_rows[r].coeff;
        dual += mu * (my_rows[r].constant + led.offset(i, my_rows[r].group, f.topo));
        if (mu > M) dual -= (mu - M) * (mu - M) / 4.0;
      }
      // inner minimization over the input box is separable
      const VectorXd u_star =
          (d - 0.5 * s).cwiseMax(f.specs[i - 1].input_box.lo)
              .cwiseMin(f.specs[i - 1].input_box.hi);
      dual += (u_star - d).squaredNorm() + s.dot(u_star);
      CHECK(primal == Catch::Approx(dual).epsilon(1e-6).margin(1e-6));
    }

    // summed member rows bound the group residual by the total relaxation
    double rho_l1 = 0.0;
    for (double r : rec.rho) rho_l1 += r;
    CHECK(rec.max_group_residual <= rho_l1 + 1e-6);
  }
}

TEST_CASE("relaxation total shrinks and stays under the decay envelope") {
  // The decay guarantee presumes the unrelaxed group constraints are jointly
  // satisfiable at the state: otherwise the relaxation floor is positive for
  // any price and no envelope can hold. Keep the inward speeds low enough
  // that the braking authority covers every pair and assert that premise.
  int checked_states = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const double speed = 0.5 + 0.0375 * trial;
    const double phase = 0.05 * trial;
    Fleet f = ring(4, 1.2, speed, 1.0, 0.5, phase);
    REQUIRE_NOTHROW(dcbf::centralized_solve(f.specs, f.topo, f.groups, f.x));
    auto theta = dcbf::compute_theta(f.specs, f.topo, f.groups, f.x);
    auto params = basic_params(f, std::min(std::max(theta.rate, 0.05), 0.999),
                               0.005);

    dcbf::RunOptions opts;
    opts.record_trace = true;
    auto dec =
        dcbf::run_truncated(f.specs, f.topo, f.groups, f.x, params, 40, opts);
    REQUIRE(dec.trace);
    const auto& rounds = dec.trace->rounds;
    REQUIRE(!rounds.empty());

    const double budget = params.penalty.dot(params.tol);
    double dev_total = 0.0;
    for (int i = 1; i <= 4; ++i)
      dev_total += dcbf::deviation_bound(f.specs[i - 1], f.x.part(i));
    const double th = dec.spectrum.rate;

    // group the per-(agent,group) entries back per agent
    const auto& index = dec.trace->rho_index;
    for (std::size_t k = 0; k + 1 < rounds.size(); ++k) {
      bool all_over_budget = true;
      for (int i = 1; i <= 4; ++i) {
        double used = 0.0;
        for (std::size_t r = 0; r < index.size(); ++r)
          if (index[r].first == i) {
            const double rho = rounds[k].rho[r];
            used += rho * rho / params.penalty[i - 1] + rho;
          }
        if (used <= params.tol[i - 1]) all_over_budget = false;
      }
      if (all_over_budget) {
        CHECK(rounds[k + 1].rho_sum <=
              rounds[k].rho_sum + 1e-9 * std::max(1.0, rounds[k].rho_sum));
      }
    }

    const double rho0 = rounds[0].rho_sum;
    for (std::size_t k = 0; k < rounds.size(); ++k) {
      const double decay =
          std::pow(th, double(k)) * rho0 +
          (th - std::pow(th, double(k) + 1.0)) / (1.0 - th) * dev_total;
      const double envelope = std::max(budget, decay);
      CHECK(rounds[k].rho_sum <= envelope + 1e-6 * std::max(1.0, envelope));
    }
    ++checked_states;
  }
  CHECK(checked_states == 20);
}

TEST_CASE("long truncation reaches the converged answer") {
  Fleet f = head_on(1.0, 1.0, 1.0, 0.5, 0.5);
  auto params = basic_params(f, 0.5, 0.001);
  auto full = dcbf::run_full(f.specs, f.topo, f.groups, f.x, params);
  auto fixed = dcbf::run_truncated(f.specs, f.topo, f.groups, f.x, params, 5000);
  CHECK((full.u - fixed.u).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(fixed.rounds < 5001);  // ledger fixed point cuts the loop short

  // zero requested updates still produces the round-zero solve
  auto zero = dcbf::run_truncated(f.specs, f.topo, f.groups, f.x, params, 0);
  CHECK(zero.rounds == 1);
  CHECK(zero.rho_sum_first == zero.rho_sum_last);
}

TEST_CASE("asymmetric exchange settles on the centralized answer") {
  // Symmetric fleets agree after a single round because the exchanged duals
  // match; this state breaks the symmetry (different speeds, an off-axis
  // offset) so agreement requires the ledger to actually move prices.
  Fleet f = head_on(1.0, 1.0, 1.0, 0.5, 0.5);
  f.x.part(1)[2] = 1.4;                  // faster closer on the left
  f.x.part(2) << 0.9, 0.15, -0.6, 0.0;   // shifted, slower, off-axis right

  auto central = dcbf::centralized_solve(f.specs, f.topo, f.groups, f.x);
  REQUIRE(central.group_dual[0] > 1e-3);  // the pair constraint binds here

  // price the relaxation above the centralized multiplier so the relaxed
  // fixed point coincides with the unrelaxed optimum
  auto params = dcbf::select_penalties(f.specs, f.topo, f.x, 0.5,
                                       VectorXd::Constant(2, 1e-4), {}, &central);
  REQUIRE(params.lemma_validated);

  auto full = dcbf::run_full(f.specs, f.topo, f.groups, f.x, params);
  CHECK(full.converged);
  CHECK(full.rounds > 1);  // agreement takes genuine exchange here
  CHECK((full.u - central.u).cwiseAbs().maxCoeff() < 5e-4);

  auto fixed = dcbf::run_truncated(f.specs, f.topo, f.groups, f.x, params, 5000);
  CHECK((full.u - fixed.u).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("vanishing relaxation certifies the group conditions") {
  Fleet f = head_on(1.0, 1.0, 1.0, 0.5, 0.5);
  auto params = basic_params(f, 0.5, 0.001);
  auto dec = dcbf::run_full(f.specs, f.topo, f.groups, f.x, params);
  REQUIRE(dec.converged);
  if (dec.rho_sum_last < 1e-10) {
    for (const auto& g : f.groups)
      CHECK(dcbf::group_residual(g, f.specs, f.x, dec.u) <= 1e-8);
  }
}

TEST_CASE("round budget arithmetic") {
  // already inside the budget
  CHECK(dcbf::rounds_for_budget(0.5, 100.0, 0.001, 0.01, 0.0) == 0);
  // the steady-state tail alone overshoots
  CHECK(dcbf::rounds_for_budget(0.9, 100.0, 2.0, 0.5, 10.0) == -1);
  // boundary: tail exactly equals the budget but the start is above it
  CHECK(dcbf::rounds_for_budget(0.5, 100.0, 0.05, 0.01, 1.0) == -1);
  // clean halving: 16 -> 8 -> 4 -> 2 -> 1
  CHECK(dcbf::rounds_for_budget(0.5, 100.0, 0.16, 0.01, 0.0) == 4);
  // exact integer boundary
  CHECK(dcbf::rounds_for_budget(0.5, 100.0, 0.16, 0.04, 0.0) == 2);
  // one-shot contraction
  CHECK(dcbf::rounds_for_budget(0.0, 100.0, 0.16, 0.01, 0.0) == 1);
}

TEST_CASE("truncation certificate from a sample batch") {
  const int nbar = 50;
  std::vector<dcbf::JointState> samples;
  Fleet base = ring(4, 1.5, 0.6, 1.0, 0.5);
  for (int r = 0; r < nbar; ++r) {
    Fleet f = ring(4, 1.5, 0.4 + 0.02 * r, 1.0, 0.5, 0.03 * r);
    samples.push_back(f.x);
  }
  const VectorXd tol = VectorXd::Constant(4, 0.05);
  const VectorXd beta = VectorXd::Constant(4, 0.01);

  auto cert = dcbf::select_truncation(base.specs, base.topo, base.groups, samples,
                                      tol, beta);

  CHECK(cert.rate.size() == nbar);
  CHECK(cert.rate_max ==
        Catch::Approx(*std::max_element(cert.rate.begin(), cert.rate.end())));
  CHECK(cert.epsilon_total == Catch::Approx(cert.penalty.dot(tol)));
  CHECK(cert.confidence == Catch::Approx(0.96));
  for (int i = 0; i < 4; ++i) {
    CHECK(cert.violation_level[i] ==
          Catch::Approx(1.0 - std::pow(0.01, 1.0 / 50.0)));
    CHECK(cert.violation_level[i] == Catch::Approx(0.0879892).margin(5e-7));
    CHECK(cert.penalty[i] >= 100.0);
    CHECK(cert.eps_tilde[i] >= 0.0);
  }
  CHECK(cert.params.penalty == cert.penalty);
  CHECK(cert.params.rate == Catch::Approx(cert.rate_max));

  // substituting the chosen round count back into the decay bound closes the
  // budget everywhere, and one fewer round does not
  auto envelope = [&](int s, int i, int k) {
    const double T =
        cert.rate[s] * cert.dev_bound[s][i] / (1.0 - cert.rate[s]);
    return std::pow(cert.rate[s], double(k)) *
               (cert.penalty[i] * cert.eps_tilde[i] - T) +
           T;
  };
  bool tight = cert.eta == 0;
  for (int s = 0; s < nbar; ++s)
    for (int i = 0; i < 4; ++i) {
      const double budget = cert.penalty[i] * tol[i];
      CHECK(envelope(s, i, cert.eta) <= budget + 1e-9 * budget);
      if (cert.eta > 0 && envelope(s, i, cert.eta - 1) > budget) tight = true;
    }
  CHECK(tight);

  // running at the certified horizon lands inside the budget on every sample
  for (int r = 0; r < nbar; r += 10) {
    auto dec = dcbf::run_truncated(base.specs, base.topo, base.groups, samples[r],
                                   cert.params, cert.eta);
    CHECK(dec.rho_sum_last <=
          cert.epsilon_total + 1e-6 * std::max(1.0, cert.epsilon_total));
  }
}

TEST_CASE("impossible budgets are reported, not silently rounded") {
  // slow actuation against fast closure: the zero-exchange relaxation is
  // large, and a huge price with a tiny budget pushes the tail above it
  Fleet f = ring(4, 1.0, 3.0, 0.1, 0.5);
  dcbf::SolverParams draft;
  draft.penalty_floor = 1e9;
  draft.selection_margin = 0.0;
  CHECK_THROWS_AS(
      dcbf::select_truncation(f.specs, f.topo, f.groups, {f.x},
                              VectorXd::Constant(4, 1e-12),
                              VectorXd::Constant(4, 0.01), draft),
      dcbf::EnvelopeImpossible);
}

TEST_CASE("certificate input validation") {
  Fleet f = head_on(1.0, 0.5, 1.0, 0.5, 0.5);
  const VectorXd tol = VectorXd::Constant(2, 0.01);
  CHECK_THROWS_AS(dcbf::select_truncation(f.specs, f.topo, f.groups, {}, tol,
                                          VectorXd::Constant(2, 0.01)),
                  dcbf::SolveError);
  CHECK_THROWS_AS(dcbf::select_truncation(f.specs, f.topo, f.groups, {f.x}, tol,
                                          VectorXd::Constant(3, 0.01)),
                  dcbf::SolveError);
  CHECK_THROWS_AS(dcbf::select_truncation(f.specs, f.topo, f.groups, {f.x}, tol,
                                          VectorXd::Constant(2, 0.0)),
                  dcbf::SolveError);
  CHECK_THROWS_AS(dcbf::select_truncation(f.specs, f.topo, f.groups, {f.x}, tol,
                                          VectorXd::Constant(2, 0.6)),
                  dcbf::SolveError);

  auto params = basic_params(f, 0.5, 0.01);
  CHECK_THROWS_AS(dcbf::run_truncated(f.specs, f.topo, f.groups, f.x, params, -1),
                  dcbf::SolveError);
  params.penalty.resize(3);
  CHECK_THROWS_AS(dcbf::run_full(f.specs, f.topo, f.groups, f.x, params),
                  dcbf::SolveError);
}

TEST_CASE("feedback smoothness probe") {
  std::vector<dcbf::AgentSpec> one{
      dcbf::double_integrator_agent(5.0, 10.0, 10.0, {0.0, 0.0})};
  dcbf::JointState x = dcbf::JointState::zeros(one);
  x.part(1) << 0.3, -0.2, 0.1, 0.0;

  Eigen::MatrixXd K(2, 4);
  K << 1.0, -0.5, 2.0, 0.0, 0.3, 0.7, -1.0, 0.4;
  auto linear = [&K](const dcbf::JointState& js) -> VectorXd { return K * js.x; };

  const double r1 = dcbf::lipschitz_probe(linear, x, 1e-3, 32, 99);
  const double r2 = dcbf::lipschitz_probe(linear, x, 1e-2, 32, 99);
  CHECK(r1 == Catch::Approx(r2).epsilon(1e-10));
  CHECK(r1 <= K.jacobiSvd().singularValues()[0] + 1e-9);
  CHECK(r1 > 0.5 * K.jacobiSvd().singularValues()[0]);
  CHECK(dcbf::lipschitz_probe(linear, x, 1e-3, 32, 99) == r1);  // deterministic

  auto constant = [](const dcbf::JointState&) -> VectorXd {
    return VectorXd::Zero(2);
  };
  CHECK(dcbf::lipschitz_probe(constant, x, 1e-3, 8, 1) == 0.0);

  CHECK_THROWS_AS(dcbf::lipschitz_probe(linear, x, 0.0, 8, 1), dcbf::SolveError);
  CHECK_THROWS_AS(dcbf::lipschitz_probe(linear, x, 1e-3, 0, 1), dcbf::SolveError);
}
