#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dcbf/barrier.hpp"
#include "dcbf/config.hpp"
#include "dcbf/distsolve.hpp"
#include "dcbf/dynamics.hpp"
#include "dcbf/risk.hpp"
#include "dcbf/sampler.hpp"
#include "dcbf/topology.hpp"
#include "json.hpp"

namespace dcbf {

struct SystemSetup {
  std::vector<AgentSpec> specs;
  NetworkTopology topo;
  std::vector<BarrierGroup> groups;
  JointState x0;  // agents on a circle, at rest
  std::vector<Eigen::Vector2d> goals;
};

// Concrete planar multi-robot system described by a resolved config: double
// integrators with clipped PD position tracking, one pairwise braking
// barrier per pair, agents started on a circle with antipodal goals unless
// the config pins goals explicitly.
inline SystemSetup build_system(const RunConfig& c) {
  const int n = c.num_agents;
  // Exactly antipodal goals make every crossing meet at the center at once;
  // rotating the default assignment turns the paths into a pinwheel of
  // chords that clear the core, which is how crossing demos are usually set
  // up. Explicit goals are taken verbatim.
  const Eigen::Rotation2Dd spin(c.goal_rotation_deg * M_PI / 180.0);
  std::vector<Eigen::Vector2d> starts(n), goals(n);
  for (int i = 0; i < n; ++i) {
    const double ang = 2.0 * M_PI * i / n;
    starts[i] = c.circle_radius * Eigen::Vector2d(std::cos(ang), std::sin(ang));
    goals[i] = c.goals.empty()
                   ? Eigen::Vector2d(spin * (-starts[i]))
                   : Eigen::Vector2d(c.goals[i][0], c.goals[i][1]);
  }

  std::vector<AgentSpec> specs;
  specs.reserve(n);
  for (int i = 0; i < n; ++i)
    specs.push_back(double_integrator_agent(c.accel_limit[i], c.pos_limit,
                                            c.vel_limit, goals[i], c.kp, c.kd));

  std::vector<std::vector<int>> pairs = c.pairs;
  if (pairs.empty())
    for (int i = 1; i <= n; ++i)
      for (int j = i + 1; j <= n; ++j) pairs.push_back({i, j});

  std::vector<std::pair<int, int>> edges;
  std::vector<std::vector<int>> group_members;
  for (const auto& p : pairs) {
    edges.emplace_back(p[0], p[1]);
    group_members.push_back({p[0], p[1]});
  }
  NetworkTopology topo(n, edges, group_members);
  std::vector<BarrierGroup> groups =
      pairwise_robot_barriers(specs, pairs, c.radius, c.kappa, c.standard_form);

  std::vector<Eigen::VectorXd> parts;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd xi(4);
    xi << starts[i][0], starts[i][1], 0.0, 0.0;
    parts.push_back(xi);
  }
  JointState x0 = pack_state(specs, parts);
  return SystemSetup{std::move(specs), std::move(topo), std::move(groups),
                     std::move(x0), std::move(goals)};
}

// Worst tracking deviation over any state: the nominal law is clipped into
// the input box, so the per-coordinate gap never exceeds the box width.
inline double global_deviation_bound(const AgentSpec& spec) {
  double p = 0.0;
  for (int k = 0; k < spec.input_dim; ++k) {
    const double w = spec.input_box.hi[k] - spec.input_box.lo[k];
    p += w * w;
  }
  return p;
}

inline SolverParams solver_params_from_config(const RunConfig& c,
                                              const SystemSetup& sys,
                                              double rate) {
  SolverParams draft;
  draft.penalty_floor = c.penalty_floor;
  draft.selection_margin = c.selection_margin;
  draft.step_margin = c.step_margin;
  draft.max_rounds = c.max_rounds;
  draft.input_tol = c.input_tol;
  draft.rate = rate;
  const int n = c.num_agents;
  draft.tol = Eigen::VectorXd::Constant(n, c.tol);
  draft.penalty.resize(n);
  draft.dev_bound.resize(n);
  for (int i = 0; i < n; ++i) {
    const double dev = global_deviation_bound(sys.specs[i]);
    draft.dev_bound[i] = dev;
    const double need = rate * dev / ((1.0 - rate) * c.tol);
    draft.penalty[i] =
        std::max(c.penalty_floor, need * (1.0 + c.selection_margin));
  }
  return draft;
}

struct StepRecord {
  double t = 0.0;
  double rho_sum_first = 0.0;
  double rho_sum_last = 0.0;
  int rounds = 0;
  double max_group_residual = 0.0;
  double min_safety = 0.0;  // min over groups of the distance slack
};

struct ControlRun {
  Trajectory trajectory;
  std::vector<StepRecord> steps;
  SolverParams params;
  ContractionInfo spectrum0;
  Eigen::VectorXd goal_error;  // per agent, final position error
  double min_safety = 0.0;     // over the whole run
};

inline ControlRun run_control_experiment(const RunConfig& c) {
  SystemSetup sys = build_system(c);
  ControlRun run;
  run.spectrum0 = compute_theta(sys.specs, sys.topo, sys.groups, sys.x0);
  run.params = solver_params_from_config(c, sys, run.spectrum0.rate);

  const bool truncated = c.mode == "truncated";
  auto controller = [&](const JointState& x) {
    ControlDecision dec =
        truncated ? run_truncated(sys.specs, sys.topo, sys.groups, x, run.params,
                                  c.eta)
                  : run_full(sys.specs, sys.topo, sys.groups, x, run.params);
    StepRecord rec;
    rec.t = run.steps.empty() ? 0.0 : run.steps.back().t + c.dt;
    rec.rho_sum_first = dec.rho_sum_first;
    rec.rho_sum_last = dec.rho_sum_last;
    rec.rounds = dec.rounds;
    double worst = 0.0, slack = std::numeric_limits<double>::infinity();
    for (const auto& g : sys.groups) {
      worst = std::max(worst, group_residual(g, sys.specs, x, dec.u));
      slack = std::min(slack, g.safety(x));
    }
    rec.max_group_residual = worst;
    rec.min_safety = slack;
    run.steps.push_back(rec);
    return dec.u;
  };

  run.trajectory = simulate_closed_loop(sys.specs, controller, sys.x0, c.dt, c.steps);

  run.goal_error.resize(c.num_agents);
  const JointState& xf = run.trajectory.x.back();
  for (int i = 1; i <= c.num_agents; ++i)
    run.goal_error[i - 1] =
        (xf.part(i).head<2>() - sys.goals[i - 1]).norm();
  run.min_safety = std::numeric_limits<double>::infinity();
  for (const auto& s : run.steps) run.min_safety = std::min(run.min_safety, s.min_safety);
  // the terminal state is not covered by any step record
  for (const auto& g : sys.groups)
    run.min_safety = std::min(run.min_safety, g.safety(xf));
  return run;
}

inline void write_steps_jsonl(const std::string& path,
                              const std::vector<StepRecord>& steps) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot open " + path + " for writing");
  for (const auto& s : steps) {
    nlohmann::json row;
    row["t"] = s.t;
    row["rho_sum_0"] = s.rho_sum_first;
    row["rho_sum_eta"] = s.rho_sum_last;
    row["iterations"] = s.rounds;
    row["max_group_residual"] = s.max_group_residual;
    row["min_safety"] = s.min_safety;
    out << row.dump() << "\n";
  }
}

inline void write_samples_csv(const std::string& path,
                              const std::vector<JointState>& states) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot open " + path + " for writing");
  out << "sample,agent,p1,p2,v1,v2\n";
  char buf[256];
  for (std::size_t r = 0; r < states.size(); ++r)
    for (int i = 1; i <= states[r].agents(); ++i) {
      const auto xi = states[r].part(i);
      if (xi.size() != 4)
        throw SchemaError("sample CSV needs planar position/velocity agents");
      std::snprintf(buf, sizeof(buf), "%zu,%d,%.10g,%.10g,%.10g,%.10g\n", r + 1, i,
                    xi[0], xi[1], xi[2], xi[3]);
      out << buf;
    }
}

struct VerifyOutcome {
  TruncationCertificate certificate;  // derived from the same sample batch
  int eta_used = 0;
  VerificationResult verification;
  std::vector<EpsilonRoots> roots;  // per agent
  RiskInterval interval;
};

inline VerifyOutcome verify_experiment(const RunConfig& c) {
  SystemSetup sys = build_system(c);
  const int n = c.num_agents;
  SamplerOptions sopts;
  sopts.rejection_draws = c.rejection_draws;
  sopts.max_restarts = c.max_restarts;
  std::vector<JointState> samples =
      sample_many(sys.specs, sys.topo, sys.groups, c.sample_count, c.seed, sopts);

  SolverParams draft;
  draft.penalty_floor = c.penalty_floor;
  draft.selection_margin = c.selection_margin;
  draft.step_margin = c.step_margin;
  draft.max_rounds = c.max_rounds;
  draft.input_tol = c.input_tol;
  const Eigen::VectorXd tol = Eigen::VectorXd::Constant(n, c.tol);
  const Eigen::VectorXd beta = Eigen::VectorXd::Constant(n, c.beta);

  VerifyOutcome out;
  out.certificate =
      select_truncation(sys.specs, sys.topo, sys.groups, samples, tol, beta, draft);
  out.eta_used = c.mode == "truncated" ? c.eta : -1;

  std::vector<Eigen::VectorXd> inputs;
  inputs.reserve(samples.size());
  for (const auto& x : samples) {
    ControlDecision dec =
        c.mode == "truncated"
            ? run_truncated(sys.specs, sys.topo, sys.groups, x,
                            out.certificate.params, c.eta)
            : run_full(sys.specs, sys.topo, sys.groups, x, out.certificate.params);
    inputs.push_back(dec.u);
  }
  out.verification = solve_verification(sys.specs, sys.topo, sys.groups, samples,
                                        inputs, c.verification_penalty);
  for (int i = 0; i < n; ++i)
    out.roots.push_back(
        epsilon_roots(c.sample_count, out.verification.support_count[i], c.beta));
  out.interval = risk_interval(out.roots);
  return out;
}

inline nlohmann::json verify_report(const VerifyOutcome& v) {
  nlohmann::json j;
  j["eta_used"] = v.eta_used;
  j["eta_derived"] = v.certificate.eta;
  j["epsilon_total"] = v.certificate.epsilon_total;
  j["s_star"] = v.verification.total_support;
  j["eps_lower"] = v.interval.lower;
  j["eps_upper"] = v.interval.upper;
  j["confidence"] = v.interval.confidence;
  j["max_violation"] = v.verification.max_violation;
  nlohmann::json agents = nlohmann::json::array();
  for (std::size_t i = 0; i < v.roots.size(); ++i) {
    nlohmann::json a;
    a["agent"] = i + 1;
    a["support"] = v.verification.support_count[static_cast<int>(i)];
    a["violated_samples"] = v.verification.violated_samples[static_cast<int>(i)];
    a["eps_lower"] = v.roots[i].eps_lower;
    a["eps_upper"] = v.roots[i].eps_upper;
    a["violation_level"] = v.certificate.violation_level[static_cast<int>(i)];
    agents.push_back(a);
  }
  j["agents"] = agents;
  return j;
}

struct CdfRow {
  int repeat = 0;
  double eps_lower = 0.0;
  double eps_upper = 1.0;
  double empirical = 0.0;
  int support_total = 0;
};

struct CdfStudy {
  std::vector<CdfRow> rows;
  double coverage = 0.0;  // fraction of repeats with empirical inside the interval
};

// Repeated end-to-end certification: fresh scenario batch, truncated runs,
// verification counts, risk interval — checked against the violation
// frequency on an independent validation batch drawn from the same sampler.
inline CdfStudy cdf_experiment(const RunConfig& c,
                               const std::function<void(int)>& progress = {}) {
  SystemSetup sys = build_system(c);
  const int n = c.num_agents;
  SamplerOptions sopts;
  sopts.rejection_draws = c.rejection_draws;
  sopts.max_restarts = c.max_restarts;
  const Eigen::VectorXd tol = Eigen::VectorXd::Constant(n, c.tol);
  const Eigen::VectorXd beta = Eigen::VectorXd::Constant(n, c.beta);
  SolverParams draft;
  draft.penalty_floor = c.penalty_floor;
  draft.selection_margin = c.selection_margin;
  draft.step_margin = c.step_margin;
  draft.max_rounds = c.max_rounds;
  draft.input_tol = c.input_tol;

  CdfStudy study;
  int covered = 0;
  for (int rep = 0; rep < c.repeats; ++rep) {
    const std::uint64_t master =
        detail::splitmix64(c.seed ^ (0x5bf0a8b1ULL + static_cast<std::uint64_t>(rep)));
    std::vector<JointState> samples =
        sample_many(sys.specs, sys.topo, sys.groups, c.sample_count, master, sopts);
    TruncationCertificate cert =
        select_truncation(sys.specs, sys.topo, sys.groups, samples, tol, beta, draft);

    std::vector<Eigen::VectorXd> inputs;
    inputs.reserve(samples.size());
    for (const auto& x : samples)
      inputs.push_back(
          run_truncated(sys.specs, sys.topo, sys.groups, x, cert.params, c.eta).u);
    VerificationResult ver = solve_verification(sys.specs, sys.topo, sys.groups,
                                                samples, inputs,
                                                c.verification_penalty);
    std::vector<EpsilonRoots> roots;
    for (int i = 0; i < n; ++i)
      roots.push_back(epsilon_roots(c.sample_count, ver.support_count[i], c.beta));
    RiskInterval interval = risk_interval(roots);

    const std::uint64_t vmaster = detail::splitmix64(master ^ 0xda3e39cb94b95bdbULL);
    std::vector<JointState> validation = sample_many(
        sys.specs, sys.topo, sys.groups, c.validation_count, vmaster, sopts);
    int violated = 0;
    for (const auto& x : validation) {
      const Eigen::VectorXd u =
          run_truncated(sys.specs, sys.topo, sys.groups, x, cert.params, c.eta).u;
      for (const auto& g : sys.groups)
        if (group_residual(g, sys.specs, x, u) > 1e-9) {
          ++violated;
          break;
        }
    }
    CdfRow row;
    row.repeat = rep + 1;
    row.eps_lower = interval.lower;
    row.eps_upper = interval.upper;
    row.empirical = static_cast<double>(violated) / c.validation_count;
    row.support_total = ver.total_support;
    if (row.empirical >= row.eps_lower - 1e-12 &&
        row.empirical <= row.eps_upper + 1e-12)
      ++covered;
    study.rows.push_back(row);
    if (progress) progress(rep + 1);
  }
  study.coverage = static_cast<double>(covered) / c.repeats;
  return study;
}

inline void write_cdf_csv(const std::string& path, const CdfStudy& study) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot open " + path + " for writing");
  out << "repeat,eps_lo,eps_hi,empirical_violation\n";
  char buf[160];
  for (const auto& r : study.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g\n", r.repeat, r.eps_lower,
                  r.eps_upper, r.empirical);
    out << buf;
  }
}

// Named experiment presets as config patches over the schema defaults.
inline nlohmann::json experiment_patch(const std::string& name) {
  using nlohmann::json;
  if (name == "swap10")
    return json::parse(R"({
      "topology": {"num_agents": 10},
      "dynamics": {"accel_limit": [1,1,1,1,1,10,10,10,10,10],
                   "goal_rotation_deg": 18},
      "solver": {"mode": "truncated", "eta": 30}
    })");
  if (name == "verify4")
    return json::parse(R"({
      "topology": {"num_agents": 4},
      "sampler": {"count": 200},
      "solver": {"mode": "truncated", "eta": 30},
      "verification": {"beta": 0.025}
    })");
  if (name == "truncation_study")
    return json::parse(R"({
      "topology": {"num_agents": 4},
      "sampler": {"count": 50}
    })");
  if (name == "cdf_study")
    return json::parse(R"({
      "topology": {"num_agents": 4},
      "sampler": {"count": 50},
      "solver": {"mode": "truncated", "eta": 10},
      "verification": {"repeats": 300, "validation_count": 10000}
    })");
  throw SchemaError("unknown experiment \"" + name + "\"");
}

inline std::vector<std::string> experiment_names() {
  return {"swap10", "verify4", "truncation_study", "cdf_study"};
}

inline RunConfig experiment_config(const std::string& name,
                                   const nlohmann::json& overrides = {}) {
  nlohmann::json base = experiment_patch(name);
  if (!overrides.is_null() && !overrides.empty()) base.merge_patch(overrides);
  return parse_config(base);
}

}  // namespace dcbf
