#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dcbf/barrier.hpp"
#include "dcbf/dynamics.hpp"
#include "dcbf/qp.hpp"
#include "dcbf/topology.hpp"

namespace dcbf {

struct SolveError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RankDeficient : SolveError {
  using SolveError::SolveError;
};
struct InfeasibleProblem : SolveError {
  using SolveError::SolveError;
};
struct NoConvergence : SolveError {
  using SolveError::SolveError;
};
struct EnvelopeImpossible : SolveError {
  using SolveError::SolveError;
};

// Spectrum of the stacked input-direction constraint rows at a state. `rate`
// is the per-round geometric contraction estimate 1 - sigma_min/sigma_max.
// `step_max` is the base stepsize bound backing the dual updates. Each
// exchange step is scaled by the squared norm of the group's rows (capped at
// one), which is equivalent to trading prices on unit-normalized rows. In
// those units the multiplier of a member's row moves by at most twice any
// offset perturbation in every activity regime (row slack, row binding with
// zero relaxation, relaxation engaged, inputs saturated); a price
// disagreement drives both members' offsets through both ledger directions,
// for a worst-case loop response of 8x the base step. Base steps up to 1/8
// therefore keep every exchange mode monotone, independent of the row
// geometry; the spectrum governs the contraction rate, not the step.
struct ContractionInfo {
  double sigma_min = 0.0;
  double sigma_max = 0.0;
  double rate = 0.0;
  double step_max = 0.0;
  int rows = 0;
  int cols = 0;
};

struct SolverParams {
  Eigen::VectorXd penalty;     // per-agent relaxation price M_i
  Eigen::VectorXd tol;         // per-agent relaxation budget eps_i
  Eigen::VectorXd dev_bound;   // per-agent worst-case deviation P_i (diagnostic)
  double rate = 0.0;           // contraction estimate used for the selection
  double step = 0.0;           // dual stepsize; 0 = per-state auto selection
  double step_margin = 0.9;    // auto stepsize = margin * step_max
  double penalty_floor = 100.0;
  double selection_margin = 0.25;
  double lambda_init = 0.0;
  int max_rounds = 20000;
  double input_tol = 1e-7;
  bool lemma_validated = false;  // penalties checked against centralized duals
};

// Exchange ledger for the auxiliary variables lambda_il^e. One entry exists
// per (owner i, peer l, group e) with l a neighbor of i inside group e; the
// two directions of a pair are distinct entries owned by distinct agents.
class AuxLedger {
 public:
  static AuxLedger build(const NetworkTopology& topo, double init = 0.0) {
    AuxLedger led;
    for (int e = 1; e <= topo.num_groups(); ++e)
      for (int i : topo.members(e))
        for (int l : topo.group_peers(i, e)) {
          led.index_[key(i, l, e)] = static_cast<int>(led.keys_.size());
          led.keys_.emplace_back(i, l, e);
          led.value_.push_back(init);
        }
    return led;
  }

  double at(int i, int l, int e) const { return value_[find(i, l, e)]; }
  double& at(int i, int l, int e) { return value_[find(i, l, e)]; }

  const std::vector<std::tuple<int, int, int>>& keys() const { return keys_; }
  const std::vector<double>& values() const { return value_; }

  // Offset agent i sees on its group-e row: sum over peers of
  // (lambda_il - lambda_li).
  double offset(int i, int e, const NetworkTopology& topo) const {
    double d = 0.0;
    for (int l : topo.group_peers(i, e)) d += at(i, l, e) - at(l, i, e);
    return d;
  }

 private:
  static std::uint64_t key(int i, int l, int e) {
    return (static_cast<std::uint64_t>(i) << 42) |
           (static_cast<std::uint64_t>(l) << 21) | static_cast<std::uint64_t>(e);
  }
  int find(int i, int l, int e) const {
    auto it = index_.find(key(i, l, e));
    if (it == index_.end())
      throw SolveError("no ledger entry (" + std::to_string(i) + "," +
                       std::to_string(l) + "," + std::to_string(e) + ")");
    return it->second;
  }

  std::vector<std::tuple<int, int, int>> keys_;
  std::unordered_map<std::uint64_t, int> index_;
  std::vector<double> value_;
};

inline void dual_update(AuxLedger& ledger, int i, int l, int e, double mu_ie,
                        double mu_le, double gamma) {
  ledger.at(i, l, e) -= gamma * (mu_ie - mu_le);
}

namespace detail {

// Rows of every (agent, group) incidence at the state, grouped per agent in
// C_i order. Assembled once per state; only the ledger offsets change
// between rounds.
struct RowTable {
  std::vector<std::vector<ConstraintRow>> per_agent;  // index i-1, order C_i

  static RowTable build(const std::vector<AgentSpec>& specs,
                        const NetworkTopology& topo,
                        const std::vector<BarrierGroup>& groups,
                        const JointState& x) {
    RowTable t;
    t.per_agent.resize(specs.size());
    for (int i = 1; i <= topo.num_agents(); ++i)
      for (int e : topo.constraints_of(i))
        t.per_agent[i - 1].push_back(assemble_row(groups[e - 1], specs, x, i));
    return t;
  }
};

inline ContractionInfo spectrum_of_rows(const RowTable& rows,
                                        const std::vector<AgentSpec>& specs) {
  const std::vector<int> uoff = input_offsets(specs);
  const int d = uoff.back();
  std::vector<std::pair<int, const ConstraintRow*>> live;  // (agent idx, row)
  double max_norm = 0.0;
  for (std::size_t ai = 0; ai < rows.per_agent.size(); ++ai)
    for (const auto& r : rows.per_agent[ai])
      max_norm = std::max(max_norm, r.coeff.norm());
  for (std::size_t ai = 0; ai < rows.per_agent.size(); ++ai)
    for (const auto& r : rows.per_agent[ai])
      if (r.coeff.norm() > 1e-14 * std::max(1.0, max_norm))
        live.emplace_back(static_cast<int>(ai), &r);

  ContractionInfo info;
  info.rows = static_cast<int>(live.size());
  info.cols = d;
  if (live.empty()) return info;

  const int k = info.rows;
  Eigen::MatrixXd gram;
  if (k <= d) {
    gram.setZero(k, k);
    for (int a = 0; a < k; ++a)
      for (int b = a; b < k; ++b) {
        double dot = 0.0;
        if (live[a].first == live[b].first) dot = live[a].second->coeff.dot(live[b].second->coeff);
        gram(a, b) = gram(b, a) = dot;
      }
  } else {
    gram.setZero(d, d);
    for (const auto& [ai, r] : live) {
      const int o = uoff[ai];
      const int m = static_cast<int>(r->coeff.size());
      gram.block(o, o, m, m).noalias() += r->coeff * r->coeff.transpose();
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
  info.sigma_min = std::max(0.0, es.eigenvalues().minCoeff());
  info.sigma_max = std::max(0.0, es.eigenvalues().maxCoeff());
  if (info.sigma_max > 0.0) {
    info.rate = 1.0 - info.sigma_min / info.sigma_max;
    info.step_max = 0.125;  // norm-scaled exchange: see ContractionInfo
  }
  return info;
}

}  // namespace detail

// Contraction data at a state. The stacked row matrix is rectangular in any
// non-trivial group structure, so the nonzero spectrum is taken from the
// smaller Gram matrix; degeneracy of that reduced spectrum raises
// RankDeficient.
inline ContractionInfo compute_theta(const std::vector<AgentSpec>& specs,
                                     const NetworkTopology& topo,
                                     const std::vector<BarrierGroup>& groups,
                                     const JointState& x) {
  auto rows = detail::RowTable::build(specs, topo, groups, x);
  ContractionInfo info = detail::spectrum_of_rows(rows, specs);
  if (info.rows == 0) throw RankDeficient("no constraint rows at this state");
  if (info.sigma_min <= 1e-10 * info.sigma_max)
    throw RankDeficient("constraint rows are rank deficient at this state");
  return info;
}

// Exact sup of |u - nominal|^2 over the input box, reached at a box corner
// coordinate-wise.
inline double deviation_bound(const AgentSpec& spec,
                              const Eigen::Ref<const Eigen::VectorXd>& x_i) {
  const Eigen::VectorXd d = spec.nominal(x_i);
  double p = 0.0;
  for (int k = 0; k < spec.input_dim; ++k) {
    const double lo = spec.input_box.lo[k], hi = spec.input_box.hi[k];
    if (!std::isfinite(lo) || !std::isfinite(hi))
      return std::numeric_limits<double>::infinity();
    p += std::max((hi - d[k]) * (hi - d[k]), (d[k] - lo) * (d[k] - lo));
  }
  return p;
}

struct CentralizedSolution {
  Eigen::VectorXd u;
  Eigen::VectorXd group_dual;  // one multiplier per group
  QpSolution qp;
};

// Reference solution of the combined safety program over all agents at once.
inline CentralizedSolution centralized_solve(const std::vector<AgentSpec>& specs,
                                             const NetworkTopology& topo,
                                             const std::vector<BarrierGroup>& groups,
                                             const JointState& x) {
  const std::vector<int> uoff = input_offsets(specs);
  const int d = uoff.back();
  const int E = topo.num_groups();

  QpProblem p;
  p.H = 2.0 * Eigen::MatrixXd::Identity(d, d);
  p.f.resize(d);
  p.lb.resize(d);
  p.ub.resize(d);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto seg = Eigen::seqN(uoff[i], specs[i].input_dim);
    p.f(seg) = -2.0 * specs[i].nominal(x.part(static_cast<int>(i) + 1));
    p.lb(seg) = specs[i].input_box.lo;
    p.ub(seg) = specs[i].input_box.hi;
  }
  p.G.setZero(E, d);
  p.g.resize(E);
  for (int e = 1; e <= E; ++e) {
    double rhs = 0.0;
    for (int i : topo.members(e)) {
      ConstraintRow row = assemble_row(groups[e - 1], specs, x, i);
      p.G.row(e - 1).segment(uoff[i - 1], specs[i - 1].input_dim) = row.coeff;
      rhs -= row.constant;
    }
    p.g[e - 1] = rhs;
  }

  QpOptions opts;
  opts.validate = false;
  QpSolution sol = solve_qp(p, opts);
  if (sol.status == QpStatus::Infeasible)
    throw InfeasibleProblem("combined safety program infeasible at this state");
  if (sol.status != QpStatus::Optimal)
    throw SolveError(std::string("centralized solve failed: ") + to_string(sol.status));
  return {sol.z, sol.mu, std::move(sol)};
}

// Agent i's relaxed local program at given ledger offsets: variables
// (u_i, rho_e for e in C_i), cost |u_i - nominal|^2 + sum(rho^2 + M_i rho).
struct LocalProblem {
  QpProblem qp;
  std::vector<int> group_ids;  // C_i order; rho_k belongs to group_ids[k]
  int input_dim = 0;
};

inline LocalProblem local_subproblem(const AgentSpec& spec,
                                     const std::vector<ConstraintRow>& rows,
                                     const std::vector<double>& offsets,
                                     const Eigen::Ref<const Eigen::VectorXd>& nominal,
                                     double penalty) {
  const int m = spec.input_dim;
  const int c = static_cast<int>(rows.size());
  LocalProblem lp;
  lp.input_dim = m;
  lp.qp.H = 2.0 * Eigen::MatrixXd::Identity(m + c, m + c);
  lp.qp.f.resize(m + c);
  lp.qp.f.head(m) = -2.0 * nominal;
  lp.qp.f.tail(c).setConstant(penalty);
  lp.qp.G.setZero(c, m + c);
  lp.qp.g.resize(c);
  for (int k = 0; k < c; ++k) {
    lp.qp.G.row(k).head(m) = rows[k].coeff;
    lp.qp.G(k, m + k) = -1.0;
    lp.qp.g[k] = -rows[k].constant - offsets[k];
    lp.group_ids.push_back(rows[k].group);
  }
  lp.qp.lb.resize(m + c);
  lp.qp.ub.resize(m + c);
  lp.qp.lb.head(m) = spec.input_box.lo;
  lp.qp.ub.head(m) = spec.input_box.hi;
  lp.qp.lb.tail(c).setZero();
  lp.qp.ub.tail(c).setConstant(std::numeric_limits<double>::infinity());
  return lp;
}

struct RoundRecord {
  Eigen::VectorXd u;                  // stacked inputs after this round's solves
  std::vector<double> rho;            // per (i, e in C_i), agent-major order
  std::vector<double> mu;             // matching duals
  std::vector<double> lambda;         // ledger snapshot before the dual update
  double rho_sum = 0.0;
  double cost = 0.0;                  // sum of local objective values
  double max_group_residual = 0.0;
};

struct IterationTrace {
  std::vector<std::pair<int, int>> rho_index;  // (agent, group) order of rho/mu
  std::vector<RoundRecord> rounds;
};

struct ControlDecision {
  Eigen::VectorXd u;
  bool converged = false;
  int rounds = 0;
  double rho_sum_first = 0.0;
  double rho_sum_last = 0.0;
  double step_used = 0.0;
  ContractionInfo spectrum;
  std::shared_ptr<IterationTrace> trace;
};

struct RunOptions {
  bool record_trace = false;
};

namespace detail {

// Shared round engine. `eta < 0` runs to convergence (relaxations inside the
// budget and inputs stationary); `eta >= 0` runs exactly eta dual updates
// unless the ledger reaches a fixed point earlier, which cannot change any
// later round.
inline ControlDecision run_rounds(const std::vector<AgentSpec>& specs,
                                  const NetworkTopology& topo,
                                  const std::vector<BarrierGroup>& groups,
                                  const JointState& x, const SolverParams& params,
                                  int eta, const RunOptions& opts) {
  const int n = topo.num_agents();
  if (params.penalty.size() != n || params.tol.size() != n)
    throw SolveError("penalty/tolerance vectors must have one entry per agent");

  const std::vector<int> uoff = input_offsets(specs);
  auto rows = RowTable::build(specs, topo, groups, x);

  // Per-row geometry, aligned with per_agent order. Each exchange step is
  // scaled by the smaller squared row norm of the pair (capped at one), which
  // bounds the dual response per base step uniformly over row geometries in
  // every regime where the inputs stay free; see ContractionInfo. `rowspan`
  // is the full range of the row value over the input box: the scale on
  // which constraint activity can change, used to cap single-round ledger
  // movement when reported prices jump by the relaxation penalty.
  std::vector<std::vector<double>> rownorm2(n), rowspan(n);
  for (int i = 1; i <= n; ++i) {
    const auto& box = specs[i - 1].input_box;
    rownorm2[i - 1].reserve(rows.per_agent[i - 1].size());
    rowspan[i - 1].reserve(rows.per_agent[i - 1].size());
    for (const auto& r : rows.per_agent[i - 1]) {
      rownorm2[i - 1].push_back(r.coeff.squaredNorm());
      double span = 0.0;
      for (int j = 0; j < r.coeff.size(); ++j)
        if (r.coeff[j] != 0.0)  // avoid 0 * inf on unbounded boxes
          span += std::abs(r.coeff[j]) * (box.hi[j] - box.lo[j]);
      rowspan[i - 1].push_back(span);
    }
  }

  ControlDecision dec;
  dec.spectrum = spectrum_of_rows(rows, specs);
  double gamma = params.step;
  if (gamma <= 0.0)
    gamma = dec.spectrum.step_max > 0.0 ? params.step_margin * dec.spectrum.step_max
                                        : 0.0;
  dec.step_used = gamma;

  AuxLedger ledger = AuxLedger::build(topo, params.lambda_init);
  const double budget = params.penalty.dot(params.tol);

  // Per-key trust region. The reported price of a row is a monotone but
  // piecewise map of the ledger offset whose slope steepens as input
  // coordinates pin against the box, ending in a jump of the relaxation
  // penalty; a fixed step sized for the flat segments overshoots the steep
  // ones, and the balanced-price point can sit exactly on such a jump, where
  // the disagreement never reads zero no matter how close the allocation is.
  // The base step keeps every smooth mode's gain positive, so a sign reversal
  // of a pair's disagreement only ever means the step crossed a nonsmooth
  // feature: halve that key's motion radius so the bracket around the feature
  // shrinks geometrically, and let the radius regrow between reversals so
  // long marches across flat segments stay fast. The inputs are continuous in
  // the ledger, so pinching the allocation onto the balance point recovers
  // the group answer even when the reported prices stay split across the
  // jump. Radii start at a fraction of the row's value range over the input
  // box (the scale on which activity can change at all) and never exceed it.
  std::vector<double> key_cap(ledger.keys().size(), -1.0);  // set on first use
  std::vector<double> key_prev(ledger.keys().size(), 0.0);

  if (opts.record_trace) {
    dec.trace = std::make_shared<IterationTrace>();
    for (int i = 1; i <= n; ++i)
      for (int e : topo.constraints_of(i)) dec.trace->rho_index.emplace_back(i, e);
  }

  std::vector<Eigen::VectorXd> nominal(n);
  for (int i = 1; i <= n; ++i) nominal[i - 1] = specs[i - 1].nominal(x.part(i));

  Eigen::VectorXd u_prev;
  Eigen::VectorXd u_cur(uoff.back());
  std::vector<std::vector<double>> rho(n), mu(n), offs(n);
  std::vector<Eigen::VectorXd> warm(n);
  for (int i = 1; i <= n; ++i) {
    const std::size_t c = rows.per_agent[i - 1].size();
    rho[i - 1].assign(c, 0.0);
    mu[i - 1].assign(c, 0.0);
    offs[i - 1].assign(c, 0.0);
  }

  const int max_rounds = eta >= 0 ? eta + 1 : params.max_rounds;
  bool converged = false;
  int round = 0;
  for (; round < max_rounds; ++round) {
    double rho_sum = 0.0, cost = 0.0;
    for (int i = 1; i <= n; ++i) {
      const auto& my_rows = rows.per_agent[i - 1];
      const int c = static_cast<int>(my_rows.size());
      for (int k = 0; k < c; ++k)
        offs[i - 1][k] = ledger.offset(i, my_rows[k].group, topo);
      LocalProblem lp =
          local_subproblem(specs[i - 1], my_rows, offs[i - 1], nominal[i - 1],
                           params.penalty[i - 1]);
      QpOptions qopts;
      qopts.validate = false;
      if (warm[i - 1].size() == lp.qp.f.size()) {
        qopts.start = warm[i - 1];
      } else {
        Eigen::VectorXd s(lp.qp.f.size());
        s.head(lp.input_dim) =
            nominal[i - 1].cwiseMax(lp.qp.lb.head(lp.input_dim))
                .cwiseMin(lp.qp.ub.head(lp.input_dim));
        for (int k = 0; k < c; ++k)
          s[lp.input_dim + k] =
              std::max(0.0, my_rows[k].eval(s.head(lp.input_dim)) + offs[i - 1][k]);
        qopts.start = s;
      }
      // Keep the start feasible against the current offsets.
      if (qopts.start.size() == lp.qp.f.size()) {
        for (int k = 0; k < c; ++k) {
          const double resid =
              my_rows[k].eval(qopts.start.head(lp.input_dim)) + offs[i - 1][k];
          qopts.start[lp.input_dim + k] =
              std::max(qopts.start[lp.input_dim + k], std::max(0.0, resid));
        }
      }
      QpSolution sol = solve_qp(lp.qp, qopts);
      if (sol.status != QpStatus::Optimal) {
#ifdef DCBF_DEBUG_DUMP_QP
        {
          std::FILE* fp = std::fopen("/tmp/qpfail.txt", "w");
          if (fp) {
            auto dump = [&](const char* name, const Eigen::MatrixXd& m) {
              std::fprintf(fp, "%s %ld %ld\n", name, (long)m.rows(), (long)m.cols());
              for (long a = 0; a < m.rows(); ++a) {
                for (long b = 0; b < m.cols(); ++b)
                  std::fprintf(fp, "%.17g ", m(a, b));
                std::fprintf(fp, "\n");
              }
            };
            dump("H", lp.qp.H); dump("f", lp.qp.f); dump("G", lp.qp.G);
            dump("g", lp.qp.g); dump("lb", lp.qp.lb); dump("ub", lp.qp.ub);
            dump("start", qopts.start);
            std::fclose(fp);
          }
        }
#endif
        throw SolveError("local solve failed for agent " + std::to_string(i) + ": " +
                         to_string(sol.status));
      }
      warm[i - 1] = sol.z;
      u_cur.segment(uoff[i - 1], lp.input_dim) = sol.z.head(lp.input_dim);
      double local_cost = (sol.z.head(lp.input_dim) - nominal[i - 1]).squaredNorm();
      for (int k = 0; k < c; ++k) {
        const double rr = std::max(0.0, sol.z[lp.input_dim + k]);
        rho[i - 1][k] = rr;
        mu[i - 1][k] = sol.mu[k];
        rho_sum += rr * rr + params.penalty[i - 1] * rr;
        local_cost += rr * rr + params.penalty[i - 1] * rr;
      }
      cost += local_cost;
    }

    if (round == 0) dec.rho_sum_first = rho_sum;
    dec.rho_sum_last = rho_sum;

    if (opts.record_trace) {
      RoundRecord rec;
      rec.u = u_cur;
      rec.rho_sum = rho_sum;
      rec.cost = cost;
      for (int i = 1; i <= n; ++i) {
        rec.rho.insert(rec.rho.end(), rho[i - 1].begin(), rho[i - 1].end());
        rec.mu.insert(rec.mu.end(), mu[i - 1].begin(), mu[i - 1].end());
      }
      rec.lambda = ledger.values();
      double worst = 0.0;
      for (const auto& g : groups)
        worst = std::max(worst, group_residual(g, specs, x, u_cur));
      rec.max_group_residual = worst;
      dec.trace->rounds.push_back(std::move(rec));
    }

    if (eta < 0 && round > 0 &&
        (u_cur - u_prev).cwiseAbs().maxCoeff() <= params.input_tol &&
        rho_sum <= budget + 1e-12 * std::max(1.0, budget)) {
      converged = true;
      ++round;
      break;
    }
    u_prev = u_cur;

    if (round == max_rounds - 1) {
      ++round;
      break;  // last requested round: no further update would be consumed
    }

    // Synchronous exchange of this round's duals.
    double max_disagree = 0.0;
    double max_ledger = 0.0;
    const auto& keys = ledger.keys();
    for (std::size_t t = 0; t < keys.size(); ++t) {
      const auto& [i, l, e] = keys[t];
      const auto& ci = topo.constraints_of(i);
      const auto& cl = topo.constraints_of(l);
      const int ki = static_cast<int>(std::find(ci.begin(), ci.end(), e) - ci.begin());
      const int kl = static_cast<int>(std::find(cl.begin(), cl.end(), e) - cl.begin());
      const double d = mu[i - 1][ki] - mu[l - 1][kl];
      const double cap0 =
          0.25 * std::min(rowspan[i - 1][ki], rowspan[l - 1][kl]);
      if (key_cap[t] < 0.0)
        key_cap[t] = cap0;
      else if (d * key_prev[t] < 0.0)
        key_cap[t] *= 0.5;
      else
        key_cap[t] = std::min(cap0, 1.25 * key_cap[t]);
      key_prev[t] = d;
      const double scale =
          std::min(1.0, std::min(rownorm2[i - 1][ki], rownorm2[l - 1][kl]));
      const double change =
          std::clamp(gamma * scale * d, -key_cap[t], key_cap[t]);
      double& slot = ledger.at(i, l, e);
      slot -= change;
      max_disagree = std::max(max_disagree, std::abs(d));
      max_ledger = std::max(max_ledger, std::abs(slot));
    }
    // Legitimate ledger entries are bounded by step * rounds * O(penalty);
    // anything orders of magnitude beyond that is geometric blow-up from a
    // stepsize the constraint geometry cannot support.
    if (!std::isfinite(max_ledger) ||
        max_ledger > 1e14 * std::max(1.0, params.penalty.maxCoeff()))
      throw SolveError(
          "dual exchange diverged: stepsize too large for this constraint "
          "geometry (step=" + std::to_string(gamma) + ")");
    if (eta >= 0 && max_disagree <= 1e-15) {
      // Ledger fixed point: every remaining round would repeat verbatim.
      converged = true;
      ++round;
      break;
    }
  }

  dec.u = u_cur;
  dec.rounds = round;
  dec.converged = converged || eta >= 0;
  if (eta < 0 && !converged)
    throw NoConvergence("no convergence after " + std::to_string(params.max_rounds) +
                        " rounds (rho_sum=" + std::to_string(dec.rho_sum_last) + ")");
  return dec;
}

}  // namespace detail

inline ControlDecision run_full(const std::vector<AgentSpec>& specs,
                                const NetworkTopology& topo,
                                const std::vector<BarrierGroup>& groups,
                                const JointState& x, const SolverParams& params,
                                const RunOptions& opts = {}) {
  return detail::run_rounds(specs, topo, groups, x, params, -1, opts);
}

inline ControlDecision run_truncated(const std::vector<AgentSpec>& specs,
                                     const NetworkTopology& topo,
                                     const std::vector<BarrierGroup>& groups,
                                     const JointState& x, const SolverParams& params,
                                     int eta, const RunOptions& opts = {}) {
  if (eta < 0) throw SolveError("eta must be nonnegative");
  return detail::run_rounds(specs, topo, groups, x, params, eta, opts);
}

// Penalty selection: M_i large enough that the stationary relaxation budget
// dominates the worst-case tracking deviation at the given contraction rate,
// with a safety margin on top of the floor.
inline SolverParams select_penalties(const std::vector<AgentSpec>& specs,
                                     const NetworkTopology& topo,
                                     const JointState& x, double rate,
                                     const Eigen::VectorXd& tol,
                                     const SolverParams& draft = {},
                                     const CentralizedSolution* reference = nullptr) {
  const int n = topo.num_agents();
  if (tol.size() != n) throw SolveError("tolerance vector size mismatch");
  if (!(rate > 0.0) || rate >= 1.0)
    throw SolveError("contraction rate must lie in (0,1) for penalty selection");
  SolverParams p = draft;
  p.rate = rate;
  p.tol = tol;
  p.penalty.resize(n);
  p.dev_bound.resize(n);
  for (int i = 1; i <= n; ++i) {
    const double dev = deviation_bound(specs[i - 1], x.part(i));
    p.dev_bound[i - 1] = dev;
    const double need = rate * dev / ((1.0 - rate) * tol[i - 1]);
    p.penalty[i - 1] = std::max(p.penalty_floor, need * (1.0 + p.selection_margin));
  }
  if (reference) {
    // Exact-penalty requirement: every member's relaxation price must
    // dominate its group's multiplier at the unrelaxed optimum, or the
    // relaxed problem settles on a cheaper answer than the true one. Raise
    // any price that falls short, with the same safety margin.
    for (int e = 1; e <= topo.num_groups(); ++e) {
      const double mu_e = reference->group_dual[e - 1];
      for (int i : topo.members(e))
        p.penalty[i - 1] =
            std::max(p.penalty[i - 1], mu_e * (1.0 + p.selection_margin));
    }
    p.lemma_validated = true;
  }
  return p;
}

// Smallest round count eta with rate^eta * (M eps_tilde - T) + T <= M eps,
// where T = rate/(1-rate) * dev. Returns -1 when even eta -> infinity cannot
// meet the budget (then EnvelopeImpossible is the caller's signal).
inline int rounds_for_budget(double rate, double penalty, double eps_tilde,
                             double eps, double dev) {
  const double T = rate * dev / (1.0 - rate);
  const double A = penalty * eps_tilde - T;
  const double C = penalty * eps - T;
  if (A <= C) return 0;
  if (C <= 0.0) return -1;  // A > C here, so the tail alone already overshoots
  int eta = static_cast<int>(std::ceil(std::log(C / A) / std::log(rate)));
  eta = std::max(eta, 0);
  auto envelope = [&](int k) { return std::pow(rate, k) * A + T; };
  while (envelope(eta) > penalty * eps) ++eta;
  while (eta > 0 && envelope(eta - 1) <= penalty * eps) --eta;
  return eta;
}

struct TruncationCertificate {
  int eta = 0;
  double epsilon_total = 0.0;       // relaxation budget sum M_i eps_i
  Eigen::VectorXd violation_level;  // per agent, 1 - beta_i^(1/N)
  double confidence = 0.0;          // 1 - sum beta_i
  Eigen::VectorXd penalty;
  Eigen::VectorXd tol;
  Eigen::VectorXd eps_tilde;        // per agent, sup over samples
  double rate_max = 0.0;
  std::vector<double> rate;                  // per sample
  std::vector<Eigen::VectorXd> dev_bound;    // per sample, per agent
  std::vector<Eigen::VectorXd> budget_used;  // per sample, per agent: sum(rho^2/M + rho)
  SolverParams params;                       // ready-to-run parameter set
};

// Scenario-backed choice of the truncation horizon: a single relaxed solve at
// zero ledger per sample bounds the starting relaxation, the per-sample
// contraction rate turns it into a round count, and the worst case over
// samples and agents is kept. The probabilistic meaning of the result is the
// per-agent violation level at confidence 1 - sum beta.
inline TruncationCertificate select_truncation(
    const std::vector<AgentSpec>& specs, const NetworkTopology& topo,
    const std::vector<BarrierGroup>& groups, const std::vector<JointState>& samples,
    const Eigen::VectorXd& tol, const Eigen::VectorXd& beta,
    const SolverParams& draft = {}) {
  const int n = topo.num_agents();
  const int nbar = static_cast<int>(samples.size());
  if (nbar == 0) throw SolveError("no samples given");
  if (beta.size() != n || tol.size() != n) throw SolveError("beta/tol size mismatch");
  double beta_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    if (beta[i] <= 0.0 || beta[i] >= 1.0)
      throw SolveError("confidence splits must lie in (0,1)");
    beta_sum += beta[i];
  }
  if (beta_sum >= 1.0) throw SolveError("confidence splits must sum below 1");

  TruncationCertificate cert;
  cert.tol = tol;
  cert.rate.reserve(nbar);
  cert.dev_bound.reserve(nbar);

  // Pass 1: contraction and deviation per sample.
  std::vector<detail::RowTable> tables;
  tables.reserve(nbar);
  double rate_max = 0.0;
  Eigen::VectorXd dev_max = Eigen::VectorXd::Zero(n);
  for (const auto& x : samples) {
    ContractionInfo ci = compute_theta(specs, topo, groups, x);
    cert.rate.push_back(ci.rate);
    rate_max = std::max(rate_max, ci.rate);
    Eigen::VectorXd dev(n);
    for (int i = 1; i <= n; ++i) dev[i - 1] = deviation_bound(specs[i - 1], x.part(i));
    dev_max = dev_max.cwiseMax(dev);
    cert.dev_bound.push_back(std::move(dev));
    tables.push_back(detail::RowTable::build(specs, topo, groups, x));
  }
  cert.rate_max = rate_max;

  SolverParams params = draft;
  params.rate = rate_max;
  params.tol = tol;
  params.penalty.resize(n);
  params.dev_bound = dev_max;
  for (int i = 0; i < n; ++i) {
    const double need = rate_max * dev_max[i] / ((1.0 - rate_max) * tol[i]);
    params.penalty[i] = std::max(params.penalty_floor,
                                 need * (1.0 + params.selection_margin));
  }
  cert.penalty = params.penalty;

  // Pass 2: zero-ledger relaxations per sample give the starting budgets.
  cert.eps_tilde = Eigen::VectorXd::Zero(n);
  for (int s = 0; s < nbar; ++s) {
    Eigen::VectorXd used = Eigen::VectorXd::Zero(n);
    for (int i = 1; i <= n; ++i) {
      const auto& my_rows = tables[s].per_agent[i - 1];
      const std::vector<double> zero_offs(my_rows.size(), 0.0);
      const Eigen::VectorXd nom = specs[i - 1].nominal(samples[s].part(i));
      LocalProblem lp = local_subproblem(specs[i - 1], my_rows, zero_offs, nom,
                                         params.penalty[i - 1]);
      QpOptions qopts;
      qopts.validate = false;
      Eigen::VectorXd s0(lp.qp.f.size());
      s0.head(lp.input_dim) = nom.cwiseMax(lp.qp.lb.head(lp.input_dim))
                                  .cwiseMin(lp.qp.ub.head(lp.input_dim));
      for (std::size_t k = 0; k < my_rows.size(); ++k)
        s0[lp.input_dim + static_cast<int>(k)] =
            std::max(0.0, my_rows[k].eval(s0.head(lp.input_dim)));
      qopts.start = s0;
      QpSolution sol = solve_qp(lp.qp, qopts);
      if (sol.status != QpStatus::Optimal)
        throw SolveError("zero-ledger solve failed for agent " + std::to_string(i));
      double acc = 0.0;
      for (std::size_t k = 0; k < my_rows.size(); ++k) {
        const double rr = std::max(0.0, sol.z[lp.input_dim + static_cast<int>(k)]);
        acc += rr * rr / params.penalty[i - 1] + rr;
      }
      used[i - 1] = acc;
      cert.eps_tilde[i - 1] = std::max(cert.eps_tilde[i - 1], acc);
    }
    cert.budget_used.push_back(std::move(used));
  }

  // Pass 3: worst round count over samples and agents.
  int eta = 0;
  for (int s = 0; s < nbar; ++s)
    for (int i = 0; i < n; ++i) {
      const int k = rounds_for_budget(cert.rate[s], params.penalty[i],
                                      cert.eps_tilde[i], tol[i],
                                      cert.dev_bound[s][i]);
      if (k < 0)
        throw EnvelopeImpossible(
            "relaxation budget unreachable for agent " + std::to_string(i + 1) +
            " at sample " + std::to_string(s));
      eta = std::max(eta, k);
    }
  cert.eta = eta;
  cert.epsilon_total = params.penalty.dot(tol);
  cert.violation_level.resize(n);
  for (int i = 0; i < n; ++i)
    cert.violation_level[i] = 1.0 - std::pow(beta[i], 1.0 / nbar);
  cert.confidence = 1.0 - beta_sum;
  cert.params = params;
  return cert;
}

// Empirical local-Lipschitz estimate of a state-feedback law around x:
// largest |u(x+delta)-u(x)| / |delta| over random fixed-radius perturbations.
inline double lipschitz_probe(
    const std::function<Eigen::VectorXd(const JointState&)>& controller,
    const JointState& x, double radius, int trials, std::uint64_t seed) {
  if (radius <= 0.0 || trials <= 0) throw SolveError("bad probe parameters");
  std::uint64_t s = seed ? seed : 0x9e3779b97f4a7c15ULL;
  auto next = [&s]() {
    s += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  auto gauss = [&next]() {
    // Box-Muller on two uniform draws.
    double u1 = (next() >> 11) * 0x1.0p-53;
    double u2 = (next() >> 11) * 0x1.0p-53;
    u1 = std::max(u1, 1e-300);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  };
  const Eigen::VectorXd u0 = controller(x);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Eigen::VectorXd dir(x.x.size());
    for (Eigen::Index k = 0; k < dir.size(); ++k) dir[k] = gauss();
    dir *= radius / dir.norm();
    JointState xp = x;
    xp.x += dir;
    const Eigen::VectorXd up = controller(xp);
    worst = std::max(worst, (up - u0).norm() / radius);
  }
  return worst;
}

}  // namespace dcbf
