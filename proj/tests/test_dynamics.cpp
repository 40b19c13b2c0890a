#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dcbf/dynamics.hpp"

using Eigen::Vector2d;
using Eigen::VectorXd;

namespace {

VectorXd vec4(double a, double b, double c, double d) {
  VectorXd v(4);
  v << a, b, c, d;
  return v;
}

}  // namespace

TEST_CASE("box construction and clipping") {
  dcbf::Box box = dcbf::Box::centered(2, 1.5);
  CHECK(box.contains(Vector2d(1.5, -1.5)));
  CHECK_FALSE(box.contains(Vector2d(1.6, 0.0)));
  CHECK(box.contains(Vector2d(1.6, 0.0), 0.2));
  CHECK(box.clip(Vector2d(3.0, -9.0)) == Vector2d(1.5, -1.5));

  VectorXd lo(1), hi(1);
  lo << 2.0;
  hi << 1.0;
  CHECK_THROWS_AS(dcbf::Box(lo, hi), dcbf::DynamicsError);

  dcbf::Box open(VectorXd::Constant(1, 0.0),
                 VectorXd::Constant(1, dcbf::kUnbounded));
  CHECK(open.contains(VectorXd::Constant(1, 1e9)));
}

TEST_CASE("planar double integrator spec") {
  dcbf::AgentSpec s = dcbf::double_integrator_agent(2.0, 4.0, 3.0, {1.0, 0.0});
  REQUIRE(s.state_dim == 4);
  REQUIRE(s.input_dim == 2);

  VectorXd x = vec4(0.0, 0.0, 0.5, -0.25);
  VectorXd dx = s.drift(x);
  CHECK(dx == vec4(0.5, -0.25, 0.0, 0.0));
  Eigen::MatrixXd g = s.input_map(x);
  CHECK(g.rows() == 4);
  CHECK(g.cols() == 2);
  CHECK(g(2, 0) == 1.0);
  CHECK(g(3, 1) == 1.0);

  // critical damping by default: u = kp (goal - p) - 2 sqrt(kp) v
  VectorXd u = s.nominal(vec4(0.0, 0.0, 0.0, 0.0));
  CHECK(u.isApprox(Vector2d(1.0, 0.0)));
  u = s.nominal(vec4(0.0, 0.0, 1.0, 0.0));
  CHECK(u.isApprox(Vector2d(-1.0, 0.0)));
  // far from the goal the law saturates at the input box
  u = s.nominal(vec4(-4.0, 0.0, 0.0, 0.0));
  CHECK(u.isApprox(Vector2d(2.0, 0.0)));
}

TEST_CASE("rk4 reproduces the double integrator exactly") {
  dcbf::AgentSpec s = dcbf::double_integrator_agent(5.0, 100.0, 100.0, {0.0, 0.0});
  VectorXd x = vec4(1.0, -2.0, 0.5, 1.5);
  Vector2d u(0.75, -0.25);
  const double dt = 0.1;
  VectorXd cur = x;
  for (int k = 1; k <= 7; ++k) {
    cur = dcbf::step_rk4(s, cur, u, dt);
    const double t = k * dt;
    // constant acceleration has a quadratic closed form
    VectorXd ref = vec4(1.0 + 0.5 * t + 0.5 * u[0] * t * t,
                        -2.0 + 1.5 * t + 0.5 * u[1] * t * t, 0.5 + u[0] * t,
                        1.5 + u[1] * t);
    CHECK((cur - ref).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("joint state packing and views") {
  std::vector<dcbf::AgentSpec> specs(3,
      dcbf::double_integrator_agent(1.0, 4.0, 3.0, {0.0, 0.0}));
  std::vector<VectorXd> parts{vec4(1, 2, 3, 4), vec4(5, 6, 7, 8),
                              vec4(9, 10, 11, 12)};
  dcbf::JointState js = dcbf::pack_state(specs, parts);
  REQUIRE(js.agents() == 3);
  CHECK(js.dim_of(2) == 4);
  CHECK(js.part(2) == parts[1]);
  js.part(3)[0] = -1.0;
  CHECK(js.x[8] == -1.0);

  CHECK(dcbf::input_offsets(specs) == std::vector<int>{0, 2, 4, 6});
  CHECK_THROWS_AS(dcbf::pack_state(specs, {vec4(0, 0, 0, 0)}),
                  dcbf::DynamicsError);
}

TEST_CASE("closed-loop rollout bookkeeping") {
  std::vector<dcbf::AgentSpec> specs(2,
      dcbf::double_integrator_agent(1.0, 50.0, 50.0, {0.0, 0.0}));
  dcbf::JointState x0 = dcbf::pack_state(
      specs, {vec4(0, 0, 1, 0), vec4(1, 1, 0, -1)});

  auto coast = [](const dcbf::JointState&) { return Eigen::VectorXd::Zero(4); };
  dcbf::Trajectory traj = dcbf::simulate_closed_loop(specs, coast, x0, 0.25, 8);
  REQUIRE(traj.x.size() == 9);
  REQUIRE(traj.u.size() == 8);
  CHECK(traj.t.back() == Catch::Approx(2.0));
  // zero input drifts along the initial velocity
  CHECK(traj.x.back().part(1)[0] == Catch::Approx(2.0));
  CHECK(traj.x.back().part(2)[3] == Catch::Approx(-1.0));

  auto broken = [](const dcbf::JointState&) -> Eigen::VectorXd {
    throw std::runtime_error("boom");
  };
  CHECK_THROWS_WITH(dcbf::simulate_closed_loop(specs, broken, x0, 0.25, 3),
                    Catch::Matchers::ContainsSubstring("step 0"));

  auto short_u = [](const dcbf::JointState&) { return Eigen::VectorXd::Zero(3); };
  CHECK_THROWS_AS(dcbf::simulate_closed_loop(specs, short_u, x0, 0.25, 3),
                  dcbf::DynamicsError);
  CHECK_THROWS_AS(dcbf::simulate_closed_loop(specs, coast, x0, -0.1, 3),
                  dcbf::DynamicsError);
}

TEST_CASE("trajectory csv layout") {
  std::vector<dcbf::AgentSpec> specs(2,
      dcbf::double_integrator_agent(1.0, 50.0, 50.0, {0.0, 0.0}));
  dcbf::JointState x0 = dcbf::pack_state(
      specs, {vec4(0, 0, 1, 0), vec4(1, 1, 0, -1)});
  auto coast = [](const dcbf::JointState&) { return Eigen::VectorXd::Zero(4); };
  dcbf::Trajectory traj = dcbf::simulate_closed_loop(specs, coast, x0, 0.5, 3);

  const std::string path = "traj_csv_test.csv";
  dcbf::write_trajectory_csv(path, traj);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "t,agent,p1,p2,v1,v2,u1,u2");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4 * 2);  // (steps+1) states x 2 agents
  in.close();
  std::remove(path.c_str());
}
