#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcbf/barrier.hpp"
#include "dcbf/dynamics.hpp"
#include "dcbf/topology.hpp"

namespace dcbf {

struct RiskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BracketFailure : RiskError {
  using RiskError::RiskError;
};

// Outcome of the sampled-constraint verification program. With the
// relaxations free to absorb every violated row, the optimal threshold is
// zero and each violated group's slack splits equally over its members (the
// minimum-norm point of the optimal face); what matters downstream are the
// per-agent counts of nonzero relaxations.
struct VerificationResult {
  double z_star = 0.0;
  double penalty = 0.0;
  Eigen::VectorXi support_count;    // per agent: nonzero relaxations over (group, sample)
  Eigen::VectorXi violated_samples; // per agent: distinct samples with any violated group
  int total_support = 0;
  std::vector<std::vector<double>> violation;   // [sample][group] positive residual part
  std::vector<std::vector<double>> zeta_share;  // [sample][group] per-member relaxation
  double max_violation = 0.0;
};

inline VerificationResult solve_verification(
    const std::vector<AgentSpec>& specs, const NetworkTopology& topo,
    const std::vector<BarrierGroup>& groups, const std::vector<JointState>& samples,
    const std::vector<Eigen::VectorXd>& inputs, double penalty = 1e4,
    double violation_tol = 1e-9) {
  if (samples.size() != inputs.size())
    throw RiskError("one input vector per sampled state required");
  if (violation_tol < 0.0) throw RiskError("violation tolerance must be >= 0");
  const int n = topo.num_agents();
  const int E = topo.num_groups();
  VerificationResult res;
  res.penalty = penalty;
  res.support_count = Eigen::VectorXi::Zero(n);
  res.violated_samples = Eigen::VectorXi::Zero(n);
  std::vector<bool> hit(n);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    std::vector<double> v(E, 0.0), share(E, 0.0);
    std::fill(hit.begin(), hit.end(), false);
    for (int e = 1; e <= E; ++e) {
      const double resid = group_residual(groups[e - 1], specs, samples[r], inputs[r]);
      if (resid > violation_tol) {
        v[e - 1] = resid;
        share[e - 1] = resid / static_cast<double>(topo.members(e).size());
        res.max_violation = std::max(res.max_violation, resid);
        for (int i : topo.members(e)) {
          res.support_count[i - 1] += 1;
          hit[i - 1] = true;
        }
        res.total_support += 1;
      }
    }
    for (int i = 0; i < n; ++i)
      if (hit[i]) res.violated_samples[i] += 1;
    res.violation.push_back(std::move(v));
    res.zeta_share.push_back(std::move(share));
  }
  return res;
}

namespace detail {

// Certificate polynomial in split log form. The polynomial is
//   C(N,s) t^(N-s) - (b/2N) sum_{j=s}^{N-1} C(j,s) t^(j-s)
//                  - (b/6N) sum_{j=N+1}^{4N} C(j,s) t^(j-s)
// and `margin` returns log of the leading term minus log of the subtracted
// mass, so the polynomial is positive exactly where the margin is. The
// margin is concave in log t (linear minus a log-sum-exp of affines), which
// makes its positive set an interval and lets a ternary search bracket it.
class RiskPolynomial {
 public:
  RiskPolynomial(int nbar, int support, double beta)
      : nbar_(nbar), s_(support), beta_(beta) {
    if (nbar < 1) throw RiskError("need at least one sample");
    if (support < 0 || support > nbar)
      throw RiskError("support count " + std::to_string(support) +
                      " outside [0," + std::to_string(nbar) + "]");
    if (!(beta > 0.0 && beta < 1.0)) throw RiskError("beta must lie in (0,1)");
    log_t1_ = log_choose(nbar, s_);
    const double lb2 = std::log(beta / (2.0 * nbar));
    const double lb6 = std::log(beta / (6.0 * nbar));
    for (int j = s_; j <= nbar - 1; ++j)
      neg_.push_back({lb2 + log_choose(j, s_), j - s_});
    for (int j = nbar + 1; j <= 4 * nbar; ++j)
      neg_.push_back({lb6 + log_choose(j, s_), j - s_});
  }

  // log(leading term) - log(sum of subtracted terms) at t = exp(lt).
  double margin(double lt) const {
    const double t1 = log_t1_ + (nbar_ - s_) * lt;
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& [c, p] : neg_) hi = std::max(hi, c + p * lt);
    double acc = 0.0;
    for (const auto& [c, p] : neg_) acc += std::exp(c + p * lt - hi);
    return t1 - (hi + std::log(acc));
  }

  int degree_gap() const { return nbar_ - s_; }

 private:
  static double log_choose(int a, int b) {
    return std::lgamma(a + 1.0) - std::lgamma(b + 1.0) - std::lgamma(a - b + 1.0);
  }
  int nbar_, s_;
  double beta_;
  double log_t1_;
  std::vector<std::pair<double, int>> neg_;
};

inline double bisect_margin(const RiskPolynomial& poly, double lt_neg, double lt_pos,
                            double tol = 1e-13, int max_iter = 200) {
  double fn = poly.margin(lt_neg);
  if (!(fn < 0.0)) throw BracketFailure("bisection bracket has no sign change");
  for (int it = 0; it < max_iter && std::abs(lt_pos - lt_neg) > tol; ++it) {
    const double mid = 0.5 * (lt_neg + lt_pos);
    if (poly.margin(mid) > 0.0)
      lt_pos = mid;
    else
      lt_neg = mid;
  }
  return 0.5 * (lt_neg + lt_pos);
}

}  // namespace detail

// Positive-margin probe of the certificate polynomial, exposed so the roots
// can be residual-checked independently.
inline double risk_poly_margin(int nbar, int support, double beta, double t) {
  if (!(t > 0.0)) throw RiskError("margin needs t > 0");
  return detail::RiskPolynomial(nbar, support, beta).margin(std::log(t));
}

struct EpsilonRoots {
  int samples = 0;
  int support = 0;
  double beta = 0.0;
  double t_lower = 0.0;  // lower edge of the positive region
  double t_upper = 0.0;  // upper edge
  double eps_lower = 0.0;
  double eps_upper = 1.0;
};

// Per-agent risk bounds from a support count: the certificate polynomial's
// positive region [t_lower, t_upper] maps to eps in [max(0, 1-t_upper),
// 1-t_lower]. A full support count (every sample relaxed) degenerates to the
// single-root form whose positive region starts at t = 0.
inline EpsilonRoots epsilon_roots(int nbar, int support, double beta) {
  detail::RiskPolynomial poly(nbar, support, beta);
  EpsilonRoots out;
  out.samples = nbar;
  out.support = support;
  out.beta = beta;

  const double lt_min = std::log(1e-12);
  const double lt_max = std::log(4.0);  // margin provably negative by t = 4

  if (poly.degree_gap() == 0) {
    // Leading term is the constant 1: positive at t -> 0, single upper root.
    if (!(poly.margin(lt_min) > 0.0))
      throw BracketFailure("degenerate certificate is nowhere positive");
    const double lt = detail::bisect_margin(poly, lt_max, lt_min);
    out.t_lower = 0.0;
    out.t_upper = std::exp(lt);
    out.eps_lower = std::max(0.0, 1.0 - out.t_upper);
    out.eps_upper = 1.0;
    return out;
  }

  // Concave margin: ternary search for an interior positive point.
  double a = lt_min, b = lt_max;
  for (int it = 0; it < 300; ++it) {
    const double m1 = a + (b - a) / 3.0, m2 = b - (b - a) / 3.0;
    if (poly.margin(m1) < poly.margin(m2))
      a = m1;
    else
      b = m2;
    if (b - a < 1e-9 && poly.margin(0.5 * (a + b)) > 0.0) break;
  }
  const double lt_peak = 0.5 * (a + b);
  if (!(poly.margin(lt_peak) > 0.0))
    throw BracketFailure("certificate polynomial has no positive region");

  const double lo = detail::bisect_margin(poly, lt_min, lt_peak);
  const double hi = detail::bisect_margin(poly, lt_max, lt_peak);
  out.t_lower = std::exp(lo);
  out.t_upper = std::exp(hi);
  out.eps_lower = std::max(0.0, 1.0 - out.t_upper);
  out.eps_upper = std::min(1.0, 1.0 - out.t_lower);
  return out;
}

struct RiskInterval {
  double lower = 0.0;
  double upper = 1.0;
  double confidence = 0.0;
};

// Network-level risk interval: the union of per-agent violation events has
// probability at least the per-agent average of lower bounds and at most the
// (clipped) sum of upper bounds, at confidence 1 - sum beta_i.
inline RiskInterval risk_interval(const std::vector<EpsilonRoots>& per_agent) {
  if (per_agent.empty()) throw RiskError("no per-agent bounds given");
  RiskInterval out;
  double lo = 0.0, hi = 0.0, beta_sum = 0.0;
  for (const auto& r : per_agent) {
    lo += r.eps_lower;
    hi += r.eps_upper;
    beta_sum += r.beta;
  }
  if (beta_sum >= 1.0) throw RiskError("confidence splits must sum below 1");
  out.lower = lo / static_cast<double>(per_agent.size());
  out.upper = std::min(1.0, hi);
  out.confidence = 1.0 - beta_sum;
  return out;
}

}  // namespace dcbf
