#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcbf {

// Strictly convex quadratic program
//   min 0.5 z'Hz + f'z   s.t.  Gz <= g,  lb <= z <= ub,
// with +-inf box entries marking unbounded coordinates.
struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd f;
  Eigen::MatrixXd G;
  Eigen::VectorXd g;
  Eigen::VectorXd lb, ub;
};

enum class QpStatus { Optimal, Infeasible, MaxIterations, IllConditioned };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "Optimal";
    case QpStatus::Infeasible: return "Infeasible";
    case QpStatus::MaxIterations: return "MaxIterations";
    case QpStatus::IllConditioned: return "IllConditioned";
  }
  return "?";
}

struct QpSolution {
  Eigen::VectorXd z;
  Eigen::VectorXd mu;         // one multiplier per row of G, zero when inactive
  Eigen::VectorXd box_lower;  // multipliers of lb <= z
  Eigen::VectorXd box_upper;  // multipliers of z <= ub
  QpStatus status = QpStatus::IllConditioned;
  int iterations = 0;
  double stationarity = 0.0;
  double primal_gap = 0.0;
  double complementarity = 0.0;
};

struct QpOptions {
  int max_iterations = 0;   // 0 = derived from problem size
  double feas_tol = 1e-10;
  bool validate = true;     // spectral check of H; hot paths may skip it
  Eigen::VectorXd start;    // optional feasible start; ignored if not feasible
};

struct QpError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Unified constraint list: general rows first, then finite upper and lower
// box faces, each as a'z <= b. Order fixes the deterministic tie-breaking.
struct ConstraintSet {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  int num_rows = 0;                 // leading entries that came from G
  std::vector<int> box_upper_of;    // unified index -> variable, -1 elsewhere
  std::vector<int> box_lower_of;

  static ConstraintSet build(const QpProblem& p) {
    const int d = static_cast<int>(p.f.size());
    const int r = static_cast<int>(p.g.size());
    int extra = 0;
    for (int j = 0; j < d; ++j) {
      if (std::isfinite(p.ub[j])) ++extra;
      if (std::isfinite(p.lb[j])) ++extra;
    }
    ConstraintSet cs;
    cs.num_rows = r;
    cs.A.setZero(r + extra, d);
    cs.b.resize(r + extra);
    cs.box_upper_of.assign(r + extra, -1);
    cs.box_lower_of.assign(r + extra, -1);
    if (r > 0) {
      cs.A.topRows(r) = p.G;
      cs.b.head(r) = p.g;
    }
    int k = r;
    for (int j = 0; j < d; ++j)
      if (std::isfinite(p.ub[j])) {
        cs.A(k, j) = 1.0;
        cs.b[k] = p.ub[j];
        cs.box_upper_of[k] = j;
        ++k;
      }
    for (int j = 0; j < d; ++j)
      if (std::isfinite(p.lb[j])) {
        cs.A(k, j) = -1.0;
        cs.b[k] = -p.lb[j];
        cs.box_lower_of[k] = j;
        ++k;
      }
    return cs;
  }

  int size() const { return static_cast<int>(cs_size()); }
  Eigen::Index cs_size() const { return b.size(); }
};

struct ActiveSetResult {
  Eigen::VectorXd z;
  Eigen::VectorXd nu;        // multipliers of the final working set
  std::vector<int> working;  // unified constraint indices, sorted
  QpStatus status;
  int iterations;
};

// Primal active-set iteration from a feasible start. H is given through its
// Cholesky factor; the working-set Schur complement is refactored on change,
// which is cheap at the dimensions this library runs at.
inline ActiveSetResult active_set_iterate(const Eigen::LLT<Eigen::MatrixXd>& hllt,
                                          const Eigen::VectorXd& f,
                                          const ConstraintSet& cs, Eigen::VectorXd z,
                                          int max_iterations, double feas_tol) {
  const int total = cs.size();
  std::vector<int> working;
  Eigen::VectorXd nu;

  ActiveSetResult res;
  res.status = QpStatus::MaxIterations;
  res.iterations = 0;

  const Eigen::VectorXd hinv_f = hllt.solve(f);
  int degenerate_streak = 0;  // consecutive zero-length steps at one vertex

  for (int iter = 0; iter < max_iterations; ++iter) {
    res.iterations = iter + 1;
    const int w = static_cast<int>(working.size());
    Eigen::VectorXd z_eq;
    nu.resize(w);
    if (w == 0) {
      z_eq = -hinv_f;
    } else {
      Eigen::MatrixXd Aw(w, f.size());
      Eigen::VectorXd bw(w);
      for (int k = 0; k < w; ++k) {
        Aw.row(k) = cs.A.row(working[k]);
        bw[k] = cs.b[working[k]];
      }
      Eigen::MatrixXd Y = hllt.solve(Aw.transpose());
      Eigen::MatrixXd S = Aw * Y;
      const Eigen::VectorXd rhs = -(bw + Aw * hinv_f);
      Eigen::LLT<Eigen::MatrixXd> sllt(S);
      if (sllt.info() == Eigen::Success) nu = sllt.solve(rhs);
      if (sllt.info() != Eigen::Success || !nu.allFinite()) {
        // A degenerate vertex can make the working rows dependent; the
        // system stays consistent (every row was active when it entered),
        // so take the minimum-norm multipliers instead of giving up.
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(S);
        nu = cod.solve(rhs);
        if (!nu.allFinite()) {
          res.status = QpStatus::IllConditioned;
          break;
        }
      }
      z_eq = -hinv_f - Y * nu;
    }

    const double step_scale = std::max(1.0, z.cwiseAbs().maxCoeff());
    Eigen::VectorXd delta = z_eq - z;
    if (delta.cwiseAbs().maxCoeff() <= 1e-12 * step_scale) {
      // Stationary on the working set: optimal unless a multiplier is negative.
      // The drop threshold follows the dual scale; at large multipliers an
      // absolute cutoff would chase roundoff and cycle.
      int drop = -1;
      double dual_scale = 1.0;
      for (int k = 0; k < w; ++k) dual_scale = std::max(dual_scale, std::abs(nu[k]));
      const double negative_floor = -1e-11 * dual_scale;
      if (degenerate_streak >= 8) {
        // A run of zero-length steps means ties are being re-pivoted at one
        // vertex; lowest-index selection breaks the cycle.
        for (int k = 0; k < w; ++k)
          if (nu[k] < negative_floor) {
            drop = k;
            break;
          }
      } else {
        double most_negative = negative_floor;
        for (int k = 0; k < w; ++k)
          if (nu[k] < most_negative ||
              (drop >= 0 && nu[k] == most_negative && working[k] < working[drop])) {
            most_negative = nu[k];
            drop = k;
          }
      }
      if (drop < 0) {
        res.status = QpStatus::Optimal;
        break;
      }
      working.erase(working.begin() + drop);
      continue;
    }

    double alpha = 1.0;
    int blocker = -1;
    for (int c = 0; c < total; ++c) {
      if (std::binary_search(working.begin(), working.end(), c)) continue;
      const double along = cs.A.row(c).dot(delta);
      if (along <= 1e-13 * step_scale) continue;
      const double slack = cs.b[c] - cs.A.row(c).dot(z);
      const double a = std::max(0.0, slack) / along;
      if (a < alpha - 1e-14 || (blocker >= 0 && std::abs(a - alpha) <= 1e-14 && c < blocker)) {
        alpha = a;
        blocker = c;
      }
    }
    degenerate_streak = alpha <= 1e-12 ? degenerate_streak + 1 : 0;
    z += alpha * delta;
    if (blocker >= 0) {
      // A working set must stay linearly independent: at a degenerate vertex
      // (more active constraints than dimensions, e.g. a row grazing a box
      // corner) the blocker can lie in the span of the current rows, and
      // appending it would make the equality system inconsistent. Exchange
      // instead: expand the blocker over the working rows and retire the
      // constraint carrying the largest coefficient.
      if (!working.empty()) {
        const int w_now = static_cast<int>(working.size());
        Eigen::MatrixXd Awt(f.size(), w_now);
        for (int k = 0; k < w_now; ++k)
          Awt.col(k) = cs.A.row(working[k]).transpose();
        const Eigen::VectorXd a_new = cs.A.row(blocker).transpose();
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Awt);
        const Eigen::VectorXd lam = qr.solve(a_new);
        const double resid = (Awt * lam - a_new).norm();
        if (resid <= 1e-10 * std::max(1.0, a_new.norm())) {
          int out = 0;
          for (int k = 1; k < w_now; ++k)
            if (std::abs(lam[k]) > std::abs(lam[out])) out = k;
          if (std::abs(lam[out]) > 1e-8)
            working.erase(working.begin() + out);
        }
      }
      working.insert(std::upper_bound(working.begin(), working.end(), blocker), blocker);
    } else if (alpha == 1.0) {
      continue;  // full step; next pass checks stationarity/duals
    }
    (void)feas_tol;
  }

  res.z = std::move(z);
  res.nu = std::move(nu);
  res.working = std::move(working);
  return res;
}

}  // namespace detail

// Solves the QP with a primal active-set method. A feasible start is taken
// from the box-clipped origin when that satisfies the rows; otherwise a
// slack-relaxed phase-1 problem locates one or certifies infeasibility.
inline QpSolution solve_qp(const QpProblem& p, const QpOptions& opts = {}) {
  const int d = static_cast<int>(p.f.size());
  const int r = static_cast<int>(p.g.size());
  if (p.H.rows() != d || p.H.cols() != d) throw QpError("H dimension mismatch");
  if (p.G.size() > 0 && (p.G.rows() != r || p.G.cols() != d))
    throw QpError("G dimension mismatch");
  if (p.lb.size() != d || p.ub.size() != d) throw QpError("box dimension mismatch");
  for (int j = 0; j < d; ++j)
    if (p.lb[j] > p.ub[j]) throw QpError("box has lb > ub");

  if (opts.validate) {
    if ((p.H - p.H.transpose()).cwiseAbs().maxCoeff() >
        1e-12 * std::max(1.0, p.H.cwiseAbs().maxCoeff()))
      throw QpError("H must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.H, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < 1e-12)
      throw QpError("H must be positive definite (min eigenvalue < 1e-12)");
  }

  Eigen::LLT<Eigen::MatrixXd> hllt(p.H);
  QpSolution sol;
  sol.mu = Eigen::VectorXd::Zero(r);
  sol.box_lower = Eigen::VectorXd::Zero(d);
  sol.box_upper = Eigen::VectorXd::Zero(d);
  if (hllt.info() != Eigen::Success) {
    sol.status = QpStatus::IllConditioned;
    return sol;
  }

  detail::ConstraintSet cs = detail::ConstraintSet::build(p);
  int max_iter = opts.max_iterations > 0 ? opts.max_iterations
                                         : 100 + 10 * (d + cs.size());

  // Row violations are judged against the natural magnitude of each row's
  // evaluation, so a start that is exact up to roundoff is never rejected just
  // because the row data are large.
  auto scaled_violation = [&](const Eigen::VectorXd& zc) {
    double worst = 0.0;
    if (r == 0) return worst;
    const Eigen::VectorXd lhs = p.G * zc;
    const Eigen::VectorXd mag = p.G.cwiseAbs() * zc.cwiseAbs();
    for (int k = 0; k < r; ++k)
      worst = std::max(worst, (lhs[k] - p.g[k]) /
                                  std::max({1.0, std::abs(p.g[k]), mag[k]}));
    return worst;
  };

  Eigen::VectorXd z0 = Eigen::VectorXd::Zero(d).cwiseMax(p.lb).cwiseMin(p.ub);
  if (opts.start.size() == d) {
    Eigen::VectorXd cand = opts.start.cwiseMax(p.lb).cwiseMin(p.ub);
    if (scaled_violation(cand) <= opts.feas_tol) z0 = cand;
  }

  if (scaled_violation(z0) > opts.feas_tol) {
    // Phase 1: relax the general rows with penalized slacks; the slack vector
    // max(0, violation) makes the start feasible by construction. The slack
    // weight only has to dominate the problem's dual scale, and an oversized
    // weight is not harmless: the solved slacks then cancel to roundoff at
    // that scale. Start the weight near |f| and escalate it only while the
    // slacks refuse to close.
    QpProblem aux;
    aux.H = Eigen::MatrixXd::Zero(d + r, d + r);
    aux.H.topLeftCorner(d, d) = p.H;
    aux.H.bottomRightCorner(r, r) = 2.0 * Eigen::MatrixXd::Identity(r, r);
    aux.f.resize(d + r);
    aux.f.head(d) = p.f;
    aux.G = Eigen::MatrixXd::Zero(r, d + r);
    aux.G.leftCols(d) = p.G;
    aux.G.rightCols(r) = -Eigen::MatrixXd::Identity(r, r);
    aux.g = p.g;
    aux.lb.resize(d + r);
    aux.ub.resize(d + r);
    aux.lb.head(d) = p.lb;
    aux.ub.head(d) = p.ub;
    aux.lb.tail(r).setZero();
    aux.ub.tail(r).setConstant(std::numeric_limits<double>::infinity());

    detail::ConstraintSet aux_cs = detail::ConstraintSet::build(aux);
    Eigen::VectorXd start(d + r);
    start.head(d) = z0;
    start.tail(r) = (p.G * z0 - p.g).cwiseMax(0.0);
    Eigen::LLT<Eigen::MatrixXd> aux_llt(aux.H);

    const double fmag = std::max(1.0, p.f.cwiseAbs().maxCoeff());
    double weight = 1e2 * fmag;
    const double weight_cap = 1e8 * fmag;
    for (;;) {
      aux.f.tail(r).setConstant(weight);
      auto aux_res = detail::active_set_iterate(aux_llt, aux.f, aux_cs, start,
                                                100 + 10 * (d + r + aux_cs.size()),
                                                opts.feas_tol);
      if (aux_res.status != QpStatus::Optimal) {
        sol.status = aux_res.status;
        return sol;
      }
      const double residual = aux_res.z.tail(r).maxCoeff();
      const double noise_floor =
          256.0 * std::numeric_limits<double>::epsilon() * weight;
      const double accept = std::max(
          1e-7 * std::max(1.0, p.g.cwiseAbs().maxCoeff()), noise_floor);
      if (residual <= accept) {
        z0 = aux_res.z.head(d);
        break;
      }
      if (weight >= weight_cap) {
        sol.status = QpStatus::Infeasible;
        sol.primal_gap = residual;
        return sol;
      }
      weight = std::min(weight * 1e3, weight_cap);
      start = aux_res.z;
      start.tail(r) =
          start.tail(r).cwiseMax(p.G * start.head(d) - p.g).cwiseMax(0.0);
    }
    // Pull the iterate exactly inside the rows so the main loop starts clean.
    if (r > 0) {
      Eigen::VectorXd viol = p.G * z0 - p.g;
      if (viol.maxCoeff() > 0.0) {
        for (int k = 0; k < r; ++k)
          if (viol[k] > 0.0) {
            const double nn = p.G.row(k).squaredNorm();
            if (nn > 0.0) z0 -= (viol[k] / nn) * p.G.row(k).transpose();
          }
        z0 = z0.cwiseMax(p.lb).cwiseMin(p.ub);
      }
    }
  }

  auto res = detail::active_set_iterate(hllt, p.f, cs, z0, max_iter, opts.feas_tol);
  sol.status = res.status;
  sol.iterations = res.iterations;
  if (res.status != QpStatus::Optimal) return sol;

  sol.z = res.z;
  for (std::size_t k = 0; k < res.working.size(); ++k) {
    const int c = res.working[k];
    const double m = std::max(0.0, res.nu[static_cast<int>(k)]);
    if (c < cs.num_rows)
      sol.mu[c] = m;
    else if (cs.box_upper_of[c] >= 0)
      sol.box_upper[cs.box_upper_of[c]] = m;
    else
      sol.box_lower[cs.box_lower_of[c]] = m;
  }

  Eigen::VectorXd grad = p.H * sol.z + p.f + sol.box_upper - sol.box_lower;
  if (r > 0) grad += p.G.transpose() * sol.mu;
  sol.stationarity = grad.cwiseAbs().maxCoeff();
  double gap = 0.0, comp = 0.0;
  if (r > 0) {
    Eigen::VectorXd slack = p.g - p.G * sol.z;
    gap = std::max(gap, -slack.minCoeff());
    comp = (sol.mu.array() * slack.array()).abs().maxCoeff();
  }
  for (int j = 0; j < d; ++j) {
    if (std::isfinite(p.ub[j])) {
      gap = std::max(gap, sol.z[j] - p.ub[j]);
      comp = std::max(comp, std::abs(sol.box_upper[j] * (p.ub[j] - sol.z[j])));
    }
    if (std::isfinite(p.lb[j])) {
      gap = std::max(gap, p.lb[j] - sol.z[j]);
      comp = std::max(comp, std::abs(sol.box_lower[j] * (sol.z[j] - p.lb[j])));
    }
  }
  sol.primal_gap = std::max(0.0, gap);
  sol.complementarity = comp;
  return sol;
}

}  // namespace dcbf
