#pragma once

#include "steersim/predictors.hpp"
#include "steersim/solver.hpp"

namespace steersim {

/// Standard normal quantile (Acklam's rational approximation refined by one
/// Halley step on erfc; accurate to near machine precision).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("normal_quantile: p must be in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

struct RobustConfig {
  double epsilon = 0.999;  // per-BS service-guarantee probability, in (0.5, 1)
  double headroom = 0.0;   // deterministic load margin, in [0, 0.5)
  SolveConfig solve;

  void validate() const {
    if (!(epsilon > 0.5 && epsilon < 1.0))
      throw ConfigError("RobustConfig: epsilon must be in (0.5, 1)");
    if (!(headroom >= 0.0 && headroom < 0.5))
      throw ConfigError("RobustConfig: headroom must be in [0, 0.5)");
    solve.validate();
  }
};

/// Minimizes (1/K) sum_j -ln(1 - m_j - z(eps)*s_j - headroom) over row
/// simplices, where m_j is the predicted mean load and s_j the aggregated
/// Gaussian error scale. With zero uncertainty and headroom this coincides
/// with solve_oracle on the predicted demand. Result loads report m_j.
inline SolveResult solve_robust(const PredictionWithUncertainty& prediction,
                                const RateMatrix& rates, double slot_duration_s,
                                const RobustConfig& cfg,
                                const std::optional<SteeringPolicy>& warm_start = {}) {
  cfg.validate();
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();
  require_dim(prediction.mean.size() == x_count, "locations", x_count, prediction.mean.size());
  require_dim(prediction.std.size() == x_count, "locations", x_count, prediction.std.size());

  // Degenerate uncertainty: the problem IS the deterministic one on the mean.
  if (cfg.headroom == 0.0 && (prediction.std.array() == 0.0).all()) {
    TrafficFrame frame;
    frame.demand = prediction.mean;
    return solve_oracle(frame, rates, slot_duration_s, cfg.solve, warm_start);
  }

  const double z = normal_quantile(cfg.epsilon);
  const double cap = cfg.solve.barrier_cap;

  Eigen::MatrixXd mu_c = (prediction.mean / slot_duration_s).replicate(1, k).array() /
                         rates.r.array();  // per-unit mean load
  Eigen::MatrixXd var_c = ((prediction.std / slot_duration_s).replicate(1, k).array() /
                           rates.r.array()).square();  // per-unit error variance

  struct Terms {
    Eigen::VectorXd m, s, u;
  };
  auto terms_of = [&](const Eigen::MatrixXd& pi) {
    Terms t;
    t.m = (pi.array() * mu_c.array()).colwise().sum().transpose();
    t.s = (pi.array().square() * var_c.array()).colwise().sum().transpose().cwiseSqrt();
    t.u = t.m + z * t.s + Eigen::VectorXd::Constant(k, cfg.headroom);
    return t;
  };
  auto objective = [&](const Eigen::MatrixXd& pi) {
    Terms t = terms_of(pi);
    double sum = 0.0;
    for (long j = 0; j < k; ++j) {
      if (t.u[j] >= 1.0) return kInf;
      sum += -std::log1p(-t.u[j]);
    }
    return sum / static_cast<double>(k);
  };

  // Feasible start: warm start, uniform, else the min-max fallback on the mean.
  TrafficFrame mean_frame;
  mean_frame.demand = prediction.mean;
  Eigen::MatrixXd start;
  bool have_start = false;
  if (warm_start) {
    Eigen::MatrixXd floored = detail::floored_start(warm_start->pi, cfg.solve.warm_floor);
    if (objective(floored) < kInf) {
      start = std::move(floored);
      have_start = true;
    }
  }
  if (!have_start) {
    Eigen::MatrixXd uni = SteeringPolicy::uniform(x_count, k).pi;
    if (objective(uni) < kInf) {
      start = std::move(uni);
      have_start = true;
    }
  }
  if (!have_start) {
    auto [mm_policy, mm_max] = min_max_load(mean_frame, rates, slot_duration_s, cfg.solve);
    if (objective(mm_policy.pi) >= kInf) {
      SolveResult res;
      res.policy = std::move(mm_policy);
      Terms t = terms_of(res.policy.pi);
      res.loads.rho = t.m;
      res.objective = kInf;
      res.feasible = false;
      return res;
    }
    start = std::move(mm_policy.pi);
  }

  detail::MdProblem prob;
  prob.objective = objective;
  prob.gradient = [&](const Eigen::MatrixXd& pi, Eigen::MatrixXd& g) {
    Terms t = terms_of(pi);
    g.resize(x_count, k);
    for (long j = 0; j < k; ++j) {
      const double inv_slack =
          1.0 / (static_cast<double>(k) * (1.0 - std::min(t.u[j], cap)));
      const double s_safe = std::max(t.s[j], 1e-30);
      for (long x = 0; x < x_count; ++x) {
        g(x, j) = (mu_c(x, j) + z * pi(x, j) * var_c(x, j) / s_safe) * inv_slack;
      }
    }
  };
  prob.residual = [&](const Eigen::MatrixXd& pi) {
    Eigen::MatrixXd g;
    prob.gradient(pi, g);
    // Per-row stationarity of the convex objective over the simplex.
    double worst = 0.0;
    for (long x = 0; x < x_count; ++x) {
      double active_min = kInf, active_max = 0.0, inactive_min = kInf;
      for (long j = 0; j < k; ++j) {
        if (pi(x, j) > cfg.solve.active_mass) {
          active_min = std::min(active_min, g(x, j));
          active_max = std::max(active_max, g(x, j));
        } else {
          inactive_min = std::min(inactive_min, g(x, j));
        }
      }
      if (active_max <= 1e-300) continue;
      double res = (active_max - active_min) / active_max;
      if (inactive_min < active_min) res = std::max(res, (active_min - inactive_min) / active_min);
      worst = std::max(worst, res);
    }
    return worst;
  };

  auto outcome = detail::mirror_descent(prob, std::move(start), cfg.solve);
  SolveResult res;
  res.policy.pi = std::move(outcome.pi);
  Terms t = terms_of(res.policy.pi);
  res.loads.rho = t.m;  // predicted mean loads
  res.objective = outcome.objective;
  res.iterations = outcome.iterations;
  res.converged = outcome.converged;
  res.feasible = outcome.objective < kInf;
  return res;
}

struct ViolationReport {
  Eigen::VectorXd per_bs_frequency;  // empirical frequency of rho_j >= 1
  double rejected_fraction = 0.0;    // rejected demand / total demand over the range
  long slots = 0;
};

/// Realized overload statistics of per-slot policies against the true trace.
inline ViolationReport violation_rate(const std::vector<SteeringPolicy>& policies,
                                      const RateMatrix& rates, const TrafficTrace& trace,
                                      long t_begin, long t_end) {
  if (t_begin < 0 || t_end > trace.num_slots() || t_begin >= t_end)
    throw ConfigError("violation_rate: bad slot range");
  require_dim(static_cast<long>(policies.size()) == t_end - t_begin, "policies",
              t_end - t_begin, static_cast<long>(policies.size()));
  ViolationReport rep;
  const long k = rates.num_bs();
  rep.per_bs_frequency = Eigen::VectorXd::Zero(k);
  rep.slots = t_end - t_begin;
  double rejected = 0.0;
  double total = 0.0;
  for (long t = t_begin; t < t_end; ++t) {
    const auto& policy = policies[t - t_begin];
    LoadVector loads = compute_loads(trace.frames[t], policy, rates, trace.slot_duration_s);
    for (long j = 0; j < k; ++j)
      if (loads.rho[j] >= 1.0) rep.per_bs_frequency[j] += 1.0;
    auto rej = rejected_traffic(trace.frames[t], policy, rates, trace.slot_duration_s);
    rejected += rej.per_bs.sum();
    total += trace.frames[t].demand.sum();
  }
  rep.per_bs_frequency /= static_cast<double>(rep.slots);
  rep.rejected_fraction = total > 0.0 ? rejected / total : 0.0;
  return rep;
}

}  // namespace steersim
