#pragma once

#include <algorithm>
#include <functional>
#include <optional>

#include "steersim/net_model.hpp"

namespace steersim {

struct SolveConfig {
  double tolerance = 1e-8;   // relative objective decrease at which to stop
  long max_iters = 20000;
  double barrier_cap = kRhoCap;  // loads clipped to this inside the log for gradients
  double step_init = 1.0;        // initial mirror-descent step scale
  double step_grow = 1.5;
  double step_shrink = 0.5;
  double kkt_tol = 5e-5;         // marginal-cost equalization residual target
  double active_mass = 1e-6;     // policy mass below which a BS counts as unused
  double warm_floor = 1e-7;      // warm-start mass floor so dropped BSs can re-enter

  void validate() const {
    if (tolerance <= 0) throw ConfigError("SolveConfig: tolerance must be > 0");
    if (max_iters < 1) throw ConfigError("SolveConfig: max_iters must be >= 1");
  }
};

struct SolveResult {
  SteeringPolicy policy;
  LoadVector loads;
  double objective = kInf;
  long iterations = 0;
  bool converged = false;
  bool feasible = false;
};

namespace detail {

/// One entropic mirror-descent step over every row simplex:
/// pi'_{x,j} ∝ pi_{x,j} * exp(-eta * g_{x,j}), row-max subtracted for stability.
/// Rows whose weights all underflow to zero are reset to uniform.
inline long md_step(const Eigen::MatrixXd& pi, const Eigen::MatrixXd& grad, double eta,
                    Eigen::MatrixXd& out) {
  const long x_count = pi.rows();
  const long k = pi.cols();
  out.resize(x_count, k);
  long resets = 0;
  for (long x = 0; x < x_count; ++x) {
    double lo = kInf;
    for (long j = 0; j < k; ++j) lo = std::min(lo, grad(x, j));
    double sum = 0.0;
    for (long j = 0; j < k; ++j) {
      const double w = pi(x, j) * std::exp(-eta * (grad(x, j) - lo));
      out(x, j) = w;
      sum += w;
    }
    if (sum <= 0.0) {
      out.row(x).setConstant(1.0 / static_cast<double>(k));
      ++resets;
    } else {
      out.row(x) /= sum;
    }
  }
  return resets;
}

/// Normalized-exponentiated-gradient variant used by the solvers: each row's
/// step is scaled by its mass-weighted mean gradient, so the update moves in
/// relative marginal-cost gaps. Rows in different convergence stages then
/// share one meaningful global eta. Requires nonnegative gradients (true for
/// every objective here).
inline void md_step_rowscaled(const Eigen::MatrixXd& pi, const Eigen::MatrixXd& grad,
                              double eta, Eigen::MatrixXd& out) {
  const long x_count = pi.rows();
  const long k = pi.cols();
  out.resize(x_count, k);
  for (long x = 0; x < x_count; ++x) {
    double lo = kInf;
    double mean = 0.0;
    for (long j = 0; j < k; ++j) {
      lo = std::min(lo, grad(x, j));
      mean += pi(x, j) * grad(x, j);
    }
    if (!(mean > 1e-300)) {  // zero-gradient row, stationary
      out.row(x) = pi.row(x);
      continue;
    }
    const double scale = eta / mean;
    double sum = 0.0;
    for (long j = 0; j < k; ++j) {
      const double e = std::min(scale * (grad(x, j) - lo), 700.0);
      const double w = pi(x, j) * std::exp(-e);
      out(x, j) = w;
      sum += w;
    }
    if (sum <= 0.0) {
      out.row(x) = pi.row(x);
    } else {
      out.row(x) /= sum;
    }
  }
}

struct MdProblem {
  // Objective may return +inf; the line search then rejects the step.
  std::function<double(const Eigen::MatrixXd&)> objective;
  // Gradient must be finite everywhere (loads clipped at infeasible iterates).
  std::function<void(const Eigen::MatrixXd&, Eigen::MatrixXd&)> gradient;
  // Optional stationarity residual; when set, iteration stops once it is
  // below cfg.kkt_tol (checked periodically).
  std::function<double(const Eigen::MatrixXd&)> residual;
};

struct MdOutcome {
  Eigen::MatrixXd pi;
  double objective = kInf;
  long iterations = 0;
  bool converged = false;
};

inline MdOutcome mirror_descent(const MdProblem& prob, Eigen::MatrixXd start,
                                const SolveConfig& cfg) {
  MdOutcome out;
  out.pi = std::move(start);
  double f = prob.objective(out.pi);
  double eta = cfg.step_init;
  Eigen::MatrixXd grad, candidate;
  long flat_steps = 0;
  for (long it = 0; it < cfg.max_iters; ++it) {
    out.iterations = it + 1;
    prob.gradient(out.pi, grad);
    double f_new = kInf;
    bool accepted = false;
    while (eta > 1e-18) {
      md_step_rowscaled(out.pi, grad, eta, candidate);
      f_new = prob.objective(candidate);
      if (f_new <= f) {
        accepted = true;
        break;
      }
      eta *= cfg.step_shrink;
    }
    if (!accepted) {
      out.converged = true;  // no descent direction at numeric step floor
      break;
    }
    const double decrease = f - f_new;
    out.pi.swap(candidate);
    f = f_new;
    eta = std::min(eta * cfg.step_grow, 64.0);
    const double rel = decrease / std::max(1.0, std::abs(f));
    if (rel < cfg.tolerance) {
      if (prob.residual) {
        if (prob.residual(out.pi) <= cfg.kkt_tol) {
          out.converged = true;
          break;
        }
        // Not yet stationary: give it a bounded chase, then hand over to the
        // caller's polish phase.
        if (++flat_steps > 50) break;
      } else if (++flat_steps >= 3) {
        out.converged = true;
        break;
      }
    } else {
      flat_steps = 0;
    }
  }
  out.objective = f;
  return out;
}

/// Mass floor for warm starts: coordinates a previous solution drove to ~0
/// can re-enter in a reasonable number of multiplicative updates.
inline Eigen::MatrixXd floored_start(Eigen::MatrixXd pi, double floor) {
  pi = pi.cwiseMax(floor);
  Eigen::VectorXd sums = pi.rowwise().sum();
  for (long x = 0; x < pi.rows(); ++x) pi.row(x) /= sums[x];
  return pi;
}

/// Exact minimization of the barrier objective over one location's simplex
/// with all other rows fixed: water-filling on the marginal costs. base[j] is
/// the load at BS j from the other locations; c[j] the per-unit load of this
/// one. Requires a feasible base (all base[j] < 1).
inline bool waterfill_row(const Eigen::VectorXd& base, const Eigen::VectorXd& c,
                          Eigen::Ref<Eigen::VectorXd> row_out) {
  const long k = c.size();
  // a_j = mass that saturates BS j; optimal allocation is p_j = max(a_j - w, 0)
  // with the water level w chosen so the masses sum to 1.
  std::vector<std::pair<double, long>> a(k);
  double total = 0.0;
  for (long j = 0; j < k; ++j) {
    const double slack = 1.0 - base[j];
    if (slack <= 0.0 || c[j] <= 0.0) return false;
    a[j] = {slack / c[j], j};
    total += a[j].first;
  }
  if (total <= 1.0) return false;  // cannot place this location feasibly
  std::sort(a.rbegin(), a.rend());
  double prefix = 0.0;
  double level = 0.0;
  long active = 0;
  for (long m = 0; m < k; ++m) {
    prefix += a[m].first;
    const double candidate = (prefix - 1.0) / static_cast<double>(m + 1);
    const double next = m + 1 < k ? a[m + 1].first : 0.0;
    if (candidate < a[m].first && candidate >= next) {
      level = candidate;
      active = m + 1;
      break;
    }
  }
  row_out.setZero();
  for (long m = 0; m < active; ++m) row_out[a[m].second] = a[m].first - level;
  // Guard against rounding drift in the mass budget.
  const double sum = row_out.sum();
  if (sum > 0) row_out /= sum;
  return active > 0;
}

/// Cyclic exact coordinate minimization over locations. Each row update never
/// increases the objective; used to polish the mirror-descent solution to the
/// stationarity target. Near-tied locations can trade mass in long geometric
/// plateaus (Gauss-Seidel's flat modes); periodic Aitken extrapolation of the
/// sweep map collapses those. Returns the number of full sweeps run.
inline long polish_rows(Eigen::MatrixXd& pi, const Eigen::MatrixXd& coeff,
                        const std::function<double(const Eigen::MatrixXd&)>& residual,
                        double kkt_tol, long max_sweeps) {
  const long x_count = pi.rows();
  const long k = pi.cols();
  Eigen::VectorXd loads = (pi.array() * coeff.array()).colwise().sum().transpose();
  Eigen::VectorXd base(k), row(k);
  auto objective_of = [&](const Eigen::MatrixXd& p) {
    Eigen::VectorXd rho = (p.array() * coeff.array()).colwise().sum().transpose();
    double sum = 0.0;
    for (long j = 0; j < k; ++j) {
      if (rho[j] >= 1.0) return kInf;
      sum += -std::log1p(-rho[j]);
    }
    return sum / static_cast<double>(k);
  };
  auto one_sweep = [&]() {
    for (long x = 0; x < x_count; ++x) {
      if (coeff.row(x).maxCoeff() <= 0.0) continue;  // zero demand
      base = loads - (pi.row(x).array() * coeff.row(x).array()).matrix().transpose();
      if (!waterfill_row(base, coeff.row(x).transpose(), row)) continue;
      loads = base + (row.array() * coeff.row(x).transpose().array()).matrix();
      pi.row(x) = row.transpose();
    }
  };

  long sweeps = 0;
  Eigen::MatrixXd snap0, snap1, candidate;
  while (sweeps < max_sweeps) {
    one_sweep();
    ++sweeps;
    if (residual(pi) <= kkt_tol) break;

    if (sweeps % 16 == 0 && sweeps + 2 < max_sweeps) {
      // Aitken step on the sweep map: extrapolate the dominant geometric mode.
      snap0 = pi;
      one_sweep();
      snap1 = pi;
      one_sweep();
      sweeps += 2;
      const double d1 = (snap1 - snap0).norm();
      const double d2 = (pi - snap1).norm();
      if (d1 > 0.0 && d2 > 0.0 && d2 < d1) {
        const double ratio = d2 / d1;
        candidate = pi + (pi - snap1) * (ratio / (1.0 - ratio));
        candidate = candidate.cwiseMax(0.0);
        Eigen::VectorXd sums = candidate.rowwise().sum();
        for (long x = 0; x < x_count; ++x)
          if (sums[x] > 0) candidate.row(x) /= sums[x];
        if (objective_of(candidate) <= objective_of(pi) + 1e-14) {
          pi = candidate;
          loads = (pi.array() * coeff.array()).colwise().sum().transpose();
        }
      }
      if (residual(pi) <= kkt_tol) break;
    }
  }
  return sweeps;
}

}  // namespace detail

/// Worst relative spread of per-location marginal costs d_x/(R_{x,j}(1-rho_j))
/// over BSs holding mass, plus any inactive BS undercutting the active level.
/// Zero-demand rows are stationary by construction.
inline double kkt_residual(const TrafficFrame& traffic, const SteeringPolicy& policy,
                           const RateMatrix& rates, double slot_duration_s,
                           double active_mass = 1e-6, double cap = kRhoCap) {
  LoadVector loads = compute_loads(traffic, policy, rates, slot_duration_s);
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();
  Eigen::VectorXd slack(k);
  for (long j = 0; j < k; ++j) slack[j] = 1.0 - std::min(loads.rho[j], cap);
  double worst = 0.0;
  for (long x = 0; x < x_count; ++x) {
    const double d = traffic.demand[x] / slot_duration_s;
    if (d <= 0.0) continue;
    double active_min = kInf, active_max = 0.0, inactive_min = kInf;
    for (long j = 0; j < k; ++j) {
      const double marginal = d / (rates.r(x, j) * slack[j]);
      if (policy.pi(x, j) > active_mass) {
        active_min = std::min(active_min, marginal);
        active_max = std::max(active_max, marginal);
      } else {
        inactive_min = std::min(inactive_min, marginal);
      }
    }
    if (active_max <= 0.0) continue;
    double res = (active_max - active_min) / active_max;
    if (inactive_min < active_min)
      res = std::max(res, (active_min - inactive_min) / active_min);
    worst = std::max(worst, res);
  }
  return worst;
}

/// Approximately minimizes max_j rho_j through the smooth log-sum-exp
/// surrogate (1/beta) ln sum_j exp(beta rho_j), beta = 200.
inline std::pair<SteeringPolicy, double> min_max_load(const TrafficFrame& traffic,
                                                      const RateMatrix& rates,
                                                      double slot_duration_s,
                                                      const SolveConfig& cfg = {}) {
  cfg.validate();
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();
  require_dim(traffic.demand.size() == x_count, "locations", x_count, traffic.demand.size());
  constexpr double beta = 200.0;

  Eigen::VectorXd per_sec = traffic.demand / slot_duration_s;
  Eigen::MatrixXd coeff = per_sec.replicate(1, k).array() / rates.r.array();  // d_x / R_{x,j}
  auto loads_of = [&](const Eigen::MatrixXd& pi) {
    return Eigen::VectorXd((pi.array() * coeff.array()).colwise().sum().transpose());
  };
  detail::MdProblem prob;
  prob.objective = [&](const Eigen::MatrixXd& pi) {
    Eigen::VectorXd rho = loads_of(pi);
    const double m = rho.maxCoeff();
    return m + std::log((beta * (rho.array() - m)).exp().sum()) / beta;
  };
  prob.gradient = [&](const Eigen::MatrixXd& pi, Eigen::MatrixXd& g) {
    Eigen::VectorXd rho = loads_of(pi);
    const double m = rho.maxCoeff();
    Eigen::VectorXd w = (beta * (rho.array() - m)).exp();
    w /= w.sum();
    g = coeff * w.asDiagonal();
  };
  SolveConfig mm_cfg = cfg;
  mm_cfg.tolerance = std::min(cfg.tolerance, 1e-9);
  auto outcome = detail::mirror_descent(prob, SteeringPolicy::uniform(x_count, k).pi, mm_cfg);
  SteeringPolicy policy;
  policy.pi = std::move(outcome.pi);
  const double max_load = loads_of(policy.pi).maxCoeff();
  return {std::move(policy), max_load};
}

/// Per-slot exact optimization of the proportional-fairness objective
/// F(pi) = (1/K) sum_j -ln(1 - rho_j) over the product of row simplices.
/// Cold or infeasible starts go through a demand-scaling homotopy: the scaled
/// problem (s * lambda) is easy at small s, and each stage warm-starts the
/// next. Infeasibility (no reachable policy with all loads < 1) is a result,
/// not an error: the min-max policy is returned with objective +inf.
inline SolveResult solve_oracle(const TrafficFrame& traffic, const RateMatrix& rates,
                                double slot_duration_s, const SolveConfig& cfg = {},
                                const std::optional<SteeringPolicy>& warm_start = {}) {
  cfg.validate();
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();
  require_dim(traffic.demand.size() == x_count, "locations", x_count, traffic.demand.size());

  Eigen::VectorXd per_sec = traffic.demand / slot_duration_s;
  Eigen::MatrixXd coeff = per_sec.replicate(1, k).array() / rates.r.array();  // d_x / R_{x,j}
  auto loads_of = [&](const Eigen::MatrixXd& pi) {
    return Eigen::VectorXd((pi.array() * coeff.array()).colwise().sum().transpose());
  };
  auto objective_scaled = [&](const Eigen::MatrixXd& pi, double s) {
    Eigen::VectorXd rho = s * loads_of(pi);
    double sum = 0.0;
    for (long j = 0; j < k; ++j) {
      if (rho[j] >= 1.0) return kInf;
      sum += -std::log1p(-rho[j]);
    }
    return sum / static_cast<double>(k);
  };

  SolveResult res;
  res.iterations = 0;

  // Stage runner: minimize the s-scaled objective from the given start.
  auto run_stage = [&](Eigen::MatrixXd start, double s, bool final_stage) {
    detail::MdProblem prob;
    prob.objective = [&, s](const Eigen::MatrixXd& pi) { return objective_scaled(pi, s); };
    prob.gradient = [&, s](const Eigen::MatrixXd& pi, Eigen::MatrixXd& g) {
      Eigen::VectorXd rho = s * loads_of(pi);
      Eigen::VectorXd inv_slack(k);
      for (long j = 0; j < k; ++j)
        inv_slack[j] =
            s / (static_cast<double>(k) * (1.0 - std::min(rho[j], cfg.barrier_cap)));
      g = coeff * inv_slack.asDiagonal();
    };
    if (final_stage) {
      prob.residual = [&](const Eigen::MatrixXd& pi) {
        SteeringPolicy p;
        p.pi = pi;
        return kkt_residual(traffic, p, rates, slot_duration_s, cfg.active_mass,
                            cfg.barrier_cap);
      };
    }
    SolveConfig stage_cfg = cfg;
    if (!final_stage) {
      stage_cfg.tolerance = std::max(cfg.tolerance, 1e-6);
      stage_cfg.max_iters = std::min<long>(cfg.max_iters, 2000);
    }
    return detail::mirror_descent(prob, std::move(start), stage_cfg);
  };

  // Chase the optimum through relaxed demand scales from the given point.
  auto homotopy = [&](Eigen::MatrixXd from, double from_max_load) {
    double s = std::min(0.85 / std::max(from_max_load, 1e-30), 0.8);
    while (s < 1.0) {
      auto stage = run_stage(std::move(from), s, false);
      res.iterations += stage.iterations;
      from = std::move(stage.pi);
      s = std::min(1.0, s * 1.25);
    }
    return from;
  };

  // Pick a start. A feasible (floored) warm start skips the homotopy; an
  // infeasible one enters it at the scale that makes it feasible.
  Eigen::MatrixXd start;
  bool have_start = false;
  if (warm_start) {
    require_dim(warm_start->num_locations() == x_count, "locations", x_count,
                warm_start->num_locations());
    require_dim(warm_start->num_bs() == k, "base_stations", k, warm_start->num_bs());
    Eigen::MatrixXd floored = detail::floored_start(warm_start->pi, cfg.warm_floor);
    const double warm_max = loads_of(floored).maxCoeff();
    start = warm_max < 1.0 ? std::move(floored) : homotopy(std::move(floored), warm_max);
    have_start = true;
  }
  if (!have_start) {
    Eigen::MatrixXd uni = SteeringPolicy::uniform(x_count, k).pi;
    const double uni_max = loads_of(uni).maxCoeff();
    if (uni_max < 0.8) {
      start = std::move(uni);
    } else {
      SolveConfig mm_cfg = cfg;  // a rough balanced start is enough here
      mm_cfg.tolerance = std::max(cfg.tolerance, 1e-7);
      mm_cfg.max_iters = std::min<long>(cfg.max_iters, 4000);
      auto [mm_policy, mm_max] = min_max_load(traffic, rates, slot_duration_s, mm_cfg);
      if (mm_max >= 1.0) {
        res.policy = std::move(mm_policy);
        res.loads = compute_loads(traffic, res.policy, rates, slot_duration_s);
        res.objective = kInf;
        res.feasible = false;
        return res;
      }
      start = mm_max > 0.8 ? homotopy(std::move(mm_policy.pi), mm_max)
                           : std::move(mm_policy.pi);
    }
  }

  auto outcome = run_stage(std::move(start), 1.0, true);
  res.policy.pi = std::move(outcome.pi);
  res.iterations += outcome.iterations;
  res.converged = outcome.converged;

  // Mirror descent closes the gap globally; exact per-location coordinate
  // minimization finishes the stationarity tail.
  auto residual_of = [&](const Eigen::MatrixXd& pi) {
    SteeringPolicy p;
    p.pi = pi;
    return kkt_residual(traffic, p, rates, slot_duration_s, cfg.active_mass, cfg.barrier_cap);
  };
  if (outcome.objective < kInf &&
      (!res.converged || residual_of(res.policy.pi) > cfg.kkt_tol)) {
    detail::polish_rows(res.policy.pi, coeff, residual_of, cfg.kkt_tol, 4000);
    res.converged = residual_of(res.policy.pi) <= cfg.kkt_tol;
  }
  res.loads = compute_loads(traffic, res.policy, rates, slot_duration_s);
  res.objective = objective_scaled(res.policy.pi, 1.0);
  res.feasible = res.loads.max_load() < 1.0;
  return res;
}

}  // namespace steersim
