#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dcbf {

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Resolved run configuration. Per-agent quantities are stored expanded (one
// entry per agent) regardless of whether the file spelled them as a scalar.
struct RunConfig {
  std::string output_dir = ".";

  // topology
  int num_agents = 4;
  std::vector<std::vector<int>> pairs;  // empty = every pair

  // dynamics
  std::vector<double> accel_limit;  // per agent
  double pos_limit = 4.0;
  double vel_limit = 3.0;
  std::vector<std::array<double, 2>> goals;  // empty = antipodal circle swap
  double circle_radius = 3.0;
  double goal_rotation_deg = 0.0;  // rotates the default antipodal goals
  double kp = 1.0;
  double kd = -1.0;  // -1 = critical damping for kp
  double dt = 0.02;
  int steps = 500;

  // barrier
  std::vector<double> radius;  // per agent
  double kappa = 1.0;
  bool standard_form = false;

  // solver
  double tol = 0.1;
  double penalty_floor = 100.0;
  double selection_margin = 0.25;
  double step_margin = 0.9;
  int max_rounds = 20000;
  double input_tol = 1e-7;
  std::string mode = "truncated";
  int eta = 30;

  // sampler
  int sample_count = 50;
  std::uint64_t seed = 20260801;
  int rejection_draws = 10000;
  int max_restarts = 1000;

  // verification
  double beta = 0.025;
  double verification_penalty = 1e4;
  int validation_count = 2000;
  int repeats = 300;
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::string& where,
                        std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw SchemaError((where.empty() ? std::string("config") : where) +
                      " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw SchemaError("unknown key " +
                        (where.empty() ? it.key() : where + "." + it.key()));
  }
}

inline std::vector<double> per_agent(const nlohmann::json& j, int n,
                                     const std::string& where) {
  std::vector<double> v;
  if (j.is_number()) {
    v.assign(n, j.get<double>());
  } else if (j.is_array()) {
    v = j.get<std::vector<double>>();
    if (static_cast<int>(v.size()) != n)
      throw SchemaError(where + " needs one entry per agent (" +
                        std::to_string(n) + ")");
  } else {
    throw SchemaError(where + " must be a number or an array");
  }
  return v;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw SchemaError(msg);
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::expect_keys;
  using detail::require;
  expect_keys(j, "", {"output_dir", "topology", "dynamics", "barrier", "solver",
                      "sampler", "verification"});
  RunConfig c;
  if (j.contains("output_dir")) {
    require(j["output_dir"].is_string(), "output_dir must be a string");
    c.output_dir = j["output_dir"].get<std::string>();
  }

  if (j.contains("topology")) {
    const auto& t = j["topology"];
    expect_keys(t, "topology", {"num_agents", "pairs"});
    if (t.contains("num_agents")) c.num_agents = t["num_agents"].get<int>();
    if (t.contains("pairs") && !(t["pairs"].is_string() && t["pairs"] == "all")) {
      require(t["pairs"].is_array(), "topology.pairs must be \"all\" or an array");
      for (const auto& p : t["pairs"]) {
        require(p.is_array() && p.size() == 2, "topology.pairs entries are [i,j]");
        c.pairs.push_back({p[0].get<int>(), p[1].get<int>()});
      }
    }
  }
  require(c.num_agents >= 2, "topology.num_agents must be at least 2");
  const int n = c.num_agents;

  c.accel_limit.assign(n, 1.0);
  c.radius.assign(n, 0.25);

  if (j.contains("dynamics")) {
    const auto& d = j["dynamics"];
    expect_keys(d, "dynamics",
                {"accel_limit", "pos_limit", "vel_limit", "goals", "circle_radius",
                 "goal_rotation_deg", "kp", "kd", "dt", "steps"});
    if (d.contains("accel_limit"))
      c.accel_limit = detail::per_agent(d["accel_limit"], n, "dynamics.accel_limit");
    if (d.contains("pos_limit")) c.pos_limit = d["pos_limit"].get<double>();
    if (d.contains("vel_limit")) c.vel_limit = d["vel_limit"].get<double>();
    if (d.contains("goals") && !(d["goals"].is_string() && d["goals"] == "circle")) {
      require(d["goals"].is_array(), "dynamics.goals must be \"circle\" or an array");
      for (const auto& g : d["goals"]) {
        require(g.is_array() && g.size() == 2, "dynamics.goals entries are [x,y]");
        c.goals.push_back({g[0].get<double>(), g[1].get<double>()});
      }
      require(static_cast<int>(c.goals.size()) == n,
              "dynamics.goals needs one entry per agent");
    }
    if (d.contains("circle_radius")) c.circle_radius = d["circle_radius"].get<double>();
    if (d.contains("goal_rotation_deg"))
      c.goal_rotation_deg = d["goal_rotation_deg"].get<double>();
    if (d.contains("kp")) c.kp = d["kp"].get<double>();
    if (d.contains("kd")) c.kd = d["kd"].get<double>();
    if (d.contains("dt")) c.dt = d["dt"].get<double>();
    if (d.contains("steps")) c.steps = d["steps"].get<int>();
  }
  for (double a : c.accel_limit)
    require(a > 0.0, "dynamics.accel_limit entries must be positive");
  require(c.pos_limit > 0.0, "dynamics.pos_limit must be positive");
  require(c.vel_limit > 0.0, "dynamics.vel_limit must be positive");
  require(c.circle_radius > 0.0, "dynamics.circle_radius must be positive");
  require(c.kp > 0.0, "dynamics.kp must be positive");
  require(c.kd > 0.0 || c.kd == -1.0, "dynamics.kd must be positive (or -1 = auto)");
  require(c.dt > 0.0, "dynamics.dt must be positive");
  require(c.steps >= 1, "dynamics.steps must be at least 1");

  if (j.contains("barrier")) {
    const auto& b = j["barrier"];
    expect_keys(b, "barrier", {"radius", "kappa", "standard_form"});
    if (b.contains("radius"))
      c.radius = detail::per_agent(b["radius"], n, "barrier.radius");
    if (b.contains("kappa")) c.kappa = b["kappa"].get<double>();
    if (b.contains("standard_form")) c.standard_form = b["standard_form"].get<bool>();
  }
  for (double r : c.radius) require(r > 0.0, "barrier.radius entries must be positive");
  require(c.kappa > 0.0, "barrier.kappa must be positive");

  if (j.contains("solver")) {
    const auto& s = j["solver"];
    expect_keys(s, "solver",
                {"tol", "penalty_floor", "selection_margin", "step_margin",
                 "max_rounds", "input_tol", "mode", "eta"});
    if (s.contains("tol")) c.tol = s["tol"].get<double>();
    if (s.contains("penalty_floor")) c.penalty_floor = s["penalty_floor"].get<double>();
    if (s.contains("selection_margin"))
      c.selection_margin = s["selection_margin"].get<double>();
    if (s.contains("step_margin")) c.step_margin = s["step_margin"].get<double>();
    if (s.contains("max_rounds")) c.max_rounds = s["max_rounds"].get<int>();
    if (s.contains("input_tol")) c.input_tol = s["input_tol"].get<double>();
    if (s.contains("mode")) c.mode = s["mode"].get<std::string>();
    if (s.contains("eta")) c.eta = s["eta"].get<int>();
  }
  require(c.tol > 0.0, "solver.tol must be positive");
  require(c.penalty_floor > 0.0, "solver.penalty_floor must be positive");
  require(c.selection_margin >= 0.0, "solver.selection_margin must be nonnegative");
  require(c.step_margin > 0.0 && c.step_margin <= 1.0,
          "solver.step_margin must lie in (0,1]");
  require(c.max_rounds >= 1, "solver.max_rounds must be at least 1");
  require(c.input_tol > 0.0, "solver.input_tol must be positive");
  require(c.mode == "full" || c.mode == "truncated",
          "solver.mode must be \"full\" or \"truncated\"");
  require(c.eta >= 0, "solver.eta must be nonnegative");

  if (j.contains("sampler")) {
    const auto& s = j["sampler"];
    expect_keys(s, "sampler", {"count", "seed", "rejection_draws", "max_restarts"});
    if (s.contains("count")) c.sample_count = s["count"].get<int>();
    if (s.contains("seed")) c.seed = s["seed"].get<std::uint64_t>();
    if (s.contains("rejection_draws"))
      c.rejection_draws = s["rejection_draws"].get<int>();
    if (s.contains("max_restarts")) c.max_restarts = s["max_restarts"].get<int>();
  }
  require(c.sample_count >= 1, "sampler.count must be at least 1");
  require(c.rejection_draws >= 1, "sampler.rejection_draws must be at least 1");
  require(c.max_restarts >= 1, "sampler.max_restarts must be at least 1");

  if (j.contains("verification")) {
    const auto& v = j["verification"];
    expect_keys(v, "verification",
                {"beta", "penalty", "validation_count", "repeats"});
    if (v.contains("beta")) c.beta = v["beta"].get<double>();
    if (v.contains("penalty")) c.verification_penalty = v["penalty"].get<double>();
    if (v.contains("validation_count"))
      c.validation_count = v["validation_count"].get<int>();
    if (v.contains("repeats")) c.repeats = v["repeats"].get<int>();
  }
  require(c.beta > 0.0 && c.beta < 1.0, "verification.beta must lie in (0,1)");
  require(c.beta * n < 1.0,
          "verification.beta times the agent count must stay below 1");
  require(c.verification_penalty > 0.0, "verification.penalty must be positive");
  require(c.validation_count >= 1, "verification.validation_count must be at least 1");
  require(c.repeats >= 1, "verification.repeats must be at least 1");

  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["output_dir"] = c.output_dir;
  j["topology"]["num_agents"] = c.num_agents;
  if (c.pairs.empty())
    j["topology"]["pairs"] = "all";
  else
    j["topology"]["pairs"] = c.pairs;
  auto& d = j["dynamics"];
  d["accel_limit"] = c.accel_limit;
  d["pos_limit"] = c.pos_limit;
  d["vel_limit"] = c.vel_limit;
  if (c.goals.empty())
    d["goals"] = "circle";
  else
    d["goals"] = c.goals;
  d["circle_radius"] = c.circle_radius;
  d["kp"] = c.kp;
  d["kd"] = c.kd;
  d["dt"] = c.dt;
  d["steps"] = c.steps;
  auto& b = j["barrier"];
  b["radius"] = c.radius;
  b["kappa"] = c.kappa;
  b["standard_form"] = c.standard_form;
  auto& s = j["solver"];
  s["tol"] = c.tol;
  s["penalty_floor"] = c.penalty_floor;
  s["selection_margin"] = c.selection_margin;
  s["step_margin"] = c.step_margin;
  s["max_rounds"] = c.max_rounds;
  s["input_tol"] = c.input_tol;
  s["mode"] = c.mode;
  s["eta"] = c.eta;
  auto& sa = j["sampler"];
  sa["count"] = c.sample_count;
  sa["seed"] = c.seed;
  sa["rejection_draws"] = c.rejection_draws;
  sa["max_restarts"] = c.max_restarts;
  auto& v = j["verification"];
  v["beta"] = c.beta;
  v["penalty"] = c.verification_penalty;
  v["validation_count"] = c.validation_count;
  v["repeats"] = c.repeats;
  return j;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("cannot parse " + path + ": " + e.what());
  }
  return parse_config(j);
}

inline void write_config_file(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot open " + path + " for writing");
  out << to_json(c).dump(2) << "\n";
}

}  // namespace dcbf
