#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dcbf {

inline constexpr double kUnbounded = std::numeric_limits<double>::infinity();

struct DynamicsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Axis-aligned box; +-inf entries mark unbounded coordinates.
struct Box {
  Eigen::VectorXd lo, hi;

  Box() = default;
  Box(Eigen::VectorXd l, Eigen::VectorXd h) : lo(std::move(l)), hi(std::move(h)) {
    if (lo.size() != hi.size()) throw DynamicsError("box bound sizes differ");
    for (Eigen::Index k = 0; k < lo.size(); ++k)
      if (lo[k] > hi[k]) throw DynamicsError("box has lo > hi");
  }

  static Box centered(int dim, double half_width) {
    return Box(Eigen::VectorXd::Constant(dim, -half_width),
               Eigen::VectorXd::Constant(dim, half_width));
  }

  Eigen::Index dim() const { return lo.size(); }

  bool contains(const Eigen::Ref<const Eigen::VectorXd>& v, double tol = 0.0) const {
    for (Eigen::Index k = 0; k < lo.size(); ++k)
      if (v[k] < lo[k] - tol || v[k] > hi[k] + tol) return false;
    return true;
  }

  Eigen::VectorXd clip(const Eigen::Ref<const Eigen::VectorXd>& v) const {
    return v.cwiseMax(lo).cwiseMin(hi);
  }
};

// Control-affine agent: xdot = drift(x) + input_map(x) * u, with state and
// input boxes and the nominal input the safety filter tracks.
struct AgentSpec {
  int state_dim = 0;
  int input_dim = 0;
  Box state_box;
  Box input_box;
  std::function<Eigen::VectorXd(const Eigen::Ref<const Eigen::VectorXd>&)> drift;
  std::function<Eigen::MatrixXd(const Eigen::Ref<const Eigen::VectorXd>&)> input_map;
  std::function<Eigen::VectorXd(const Eigen::Ref<const Eigen::VectorXd>&)> nominal;
  double accel_limit = 0.0;  // meaningful for the planar robot instantiation
};

// Stacked multi-agent state with per-agent segment views. Agent ids are
// 1-based to match the topology API.
struct JointState {
  Eigen::VectorXd x;
  std::vector<int> offset;  // size N+1, offset[N] == x.size()

  static JointState zeros(const std::vector<AgentSpec>& specs) {
    JointState js;
    js.offset.resize(specs.size() + 1);
    js.offset[0] = 0;
    for (std::size_t i = 0; i < specs.size(); ++i)
      js.offset[i + 1] = js.offset[i] + specs[i].state_dim;
    js.x = Eigen::VectorXd::Zero(js.offset.back());
    return js;
  }

  int agents() const { return static_cast<int>(offset.size()) - 1; }
  int dim_of(int i) const { return offset[i] - offset[i - 1]; }

  Eigen::Ref<const Eigen::VectorXd> part(int i) const {
    return x.segment(offset[i - 1], dim_of(i));
  }
  Eigen::Ref<Eigen::VectorXd> part(int i) {
    return x.segment(offset[i - 1], dim_of(i));
  }
};

inline JointState pack_state(const std::vector<AgentSpec>& specs,
                             const std::vector<Eigen::VectorXd>& parts) {
  if (parts.size() != specs.size()) throw DynamicsError("state count mismatch");
  JointState js = JointState::zeros(specs);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].size() != specs[i].state_dim)
      throw DynamicsError("state dim mismatch at agent " + std::to_string(i + 1));
    js.part(static_cast<int>(i) + 1) = parts[i];
  }
  return js;
}

// Planar double integrator: x = (p1, p2, v1, v2), u = acceleration, with a
// box-clipped PD law toward `goal` as the nominal input.
inline AgentSpec double_integrator_agent(double accel_limit, double pos_limit,
                                         double vel_limit, Eigen::Vector2d goal,
                                         double kp = 1.0, double kd = -1.0) {
  if (kd < 0.0) kd = 2.0 * std::sqrt(kp);
  AgentSpec s;
  s.state_dim = 4;
  s.input_dim = 2;
  Eigen::VectorXd slo(4), shi(4);
  slo << -pos_limit, -pos_limit, -vel_limit, -vel_limit;
  shi << pos_limit, pos_limit, vel_limit, vel_limit;
  s.state_box = Box(slo, shi);
  s.input_box = Box::centered(2, accel_limit);
  s.accel_limit = accel_limit;
  s.drift = [](const Eigen::Ref<const Eigen::VectorXd>& x) {
    Eigen::VectorXd dx(4);
    dx << x[2], x[3], 0.0, 0.0;
    return dx;
  };
  s.input_map = [](const Eigen::Ref<const Eigen::VectorXd>&) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(4, 2);
    g(2, 0) = 1.0;
    g(3, 1) = 1.0;
    return g;
  };
  Box ubox = s.input_box;
  s.nominal = [goal, kp, kd, ubox](const Eigen::Ref<const Eigen::VectorXd>& x) {
    Eigen::VectorXd u = kp * (goal - x.head<2>()) - kd * x.tail<2>();
    return ubox.clip(u);
  };
  return s;
}

inline std::vector<int> input_offsets(const std::vector<AgentSpec>& specs) {
  std::vector<int> off(specs.size() + 1, 0);
  for (std::size_t i = 0; i < specs.size(); ++i)
    off[i + 1] = off[i] + specs[i].input_dim;
  return off;
}

// Classic fourth-order Runge-Kutta step of the control-affine dynamics with u
// held constant over the step.
inline Eigen::VectorXd step_rk4(const AgentSpec& spec,
                                const Eigen::Ref<const Eigen::VectorXd>& x,
                                const Eigen::Ref<const Eigen::VectorXd>& u,
                                double dt) {
  auto f = [&](const Eigen::VectorXd& z) -> Eigen::VectorXd {
    return spec.drift(z) + spec.input_map(z) * u;
  };
  Eigen::VectorXd k1 = f(x);
  Eigen::VectorXd k2 = f(x + 0.5 * dt * k1);
  Eigen::VectorXd k3 = f(x + 0.5 * dt * k2);
  Eigen::VectorXd k4 = f(x + dt * k3);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

struct Trajectory {
  std::vector<double> t;
  std::vector<JointState> x;            // length steps+1
  std::vector<Eigen::VectorXd> u;       // length steps, stacked inputs
  std::vector<int> input_offset;       // size N+1
};

// Rolls the closed loop forward; `controller` maps the joint state to the
// stacked input vector. Controller failures are rethrown with the step index
// attached so a long run points at the offending state.
inline Trajectory simulate_closed_loop(
    const std::vector<AgentSpec>& specs,
    const std::function<Eigen::VectorXd(const JointState&)>& controller,
    const JointState& x0, double dt, int steps) {
  if (dt <= 0.0 || steps < 0) throw DynamicsError("bad dt or step count");
  Trajectory traj;
  traj.input_offset.resize(specs.size() + 1);
  traj.input_offset[0] = 0;
  for (std::size_t i = 0; i < specs.size(); ++i)
    traj.input_offset[i + 1] = traj.input_offset[i] + specs[i].input_dim;

  traj.t.push_back(0.0);
  traj.x.push_back(x0);
  JointState cur = x0;
  for (int k = 0; k < steps; ++k) {
    Eigen::VectorXd u;
    try {
      u = controller(cur);
    } catch (const std::exception& ex) {
      throw DynamicsError("controller failed at step " + std::to_string(k) + ": " +
                          ex.what());
    }
    if (u.size() != traj.input_offset.back())
      throw DynamicsError("controller returned wrong input dimension");
    JointState next = cur;
    for (std::size_t i = 0; i < specs.size(); ++i) {
      int ai = static_cast<int>(i) + 1;
      next.part(ai) = step_rk4(specs[i], cur.part(ai),
                               u.segment(traj.input_offset[i], specs[i].input_dim), dt);
    }
    traj.u.push_back(std::move(u));
    traj.t.push_back((k + 1) * dt);
    traj.x.push_back(next);
    cur = traj.x.back();
  }
  return traj;
}

// One row per (time, agent); requires the planar-robot layout (4 states, 2
// inputs per agent). The final state row carries the last applied input.
inline void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw DynamicsError("cannot open " + path);
  out << "t,agent,p1,p2,v1,v2,u1,u2\n";
  const int n = traj.x.empty() ? 0 : traj.x.front().agents();
  char buf[256];
  for (std::size_t k = 0; k < traj.x.size(); ++k) {
    const auto& js = traj.x[k];
    std::size_t uk = k < traj.u.size() ? k : traj.u.size() - 1;
    for (int i = 1; i <= n; ++i) {
      if (js.dim_of(i) != 4) throw DynamicsError("trajectory csv needs 4-state agents");
      auto xi = js.part(i);
      auto ui = traj.u.empty()
                    ? Eigen::Vector2d::Zero().eval()
                    : Eigen::Vector2d(traj.u[uk].segment(traj.input_offset[i - 1], 2));
      std::snprintf(buf, sizeof(buf), "%.10g,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                    traj.t[k], i, xi[0], xi[1], xi[2], xi[3], ui[0], ui[1]);
      out << buf;
    }
  }
}

}  // namespace dcbf
