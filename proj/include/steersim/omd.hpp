#pragma once

#include "steersim/net_model.hpp"
#include "steersim/solver.hpp"

namespace steersim {

enum class OmdSchedule { Constant, InverseSqrtT };

struct OmdConfig {
  double eta0 = 1.0;
  OmdSchedule schedule = OmdSchedule::InverseSqrtT;
  double grad_clip_load = 0.999;  // loads clipped to this in gradient evaluation
  long d = 0;  // decision dimensionality X*K, recorded for regret reporting

  void validate() const {
    if (eta0 <= 0) throw ConfigError("OmdConfig: eta0 must be > 0");
    if (!(grad_clip_load > 0 && grad_clip_load < 1))
      throw ConfigError("OmdConfig: grad_clip_load must be in (0,1)");
  }
};

/// Gradient of the realized cost at (lambda_t, pi_t):
/// g_{x,j} = (1/K) (lambda_x/slot) / (R_{x,j} (1 - min(rho_j, clip))).
/// Always finite; overloads are clipped, not raised.
inline Eigen::MatrixXd loss_gradient(const TrafficFrame& traffic, const SteeringPolicy& policy,
                                     const RateMatrix& rates, double slot_duration_s,
                                     double grad_clip_load = 0.999) {
  LoadVector loads = compute_loads(traffic, policy, rates, slot_duration_s);
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();
  Eigen::VectorXd inv_slack(k);
  for (long j = 0; j < k; ++j)
    inv_slack[j] = 1.0 / (static_cast<double>(k) *
                          (1.0 - std::min(loads.rho[j], grad_clip_load)));
  Eigen::MatrixXd coeff =
      (traffic.demand / slot_duration_s).replicate(1, k).array() / rates.r.array();
  return coeff * inv_slack.asDiagonal();
}

/// Entropic mirror-map update, one multiplicative-weights step per row.
/// Zero-mass coordinates stay zero; a row whose weights all vanish is reset to
/// uniform (counted by the caller via the returned reset count).
inline std::pair<SteeringPolicy, long> omd_step(const SteeringPolicy& policy,
                                                const Eigen::MatrixXd& gradient, double eta) {
  require_dim(gradient.rows() == policy.num_locations(), "locations", policy.num_locations(),
              gradient.rows());
  require_dim(gradient.cols() == policy.num_bs(), "base_stations", policy.num_bs(),
              gradient.cols());
  if (!(eta > 0)) throw ConfigError("omd_step: eta must be > 0");
  if (!gradient.allFinite()) throw ConfigError("omd_step: gradient must be finite");
  SteeringPolicy out;
  const long resets = detail::md_step(policy.pi, gradient, eta, out.pi);
  return {std::move(out), resets};
}

struct OmdSlotRecord {
  SteeringPolicy policy;   // played before lambda_t was revealed
  double realized_cost;    // may be +inf on overload
  double loss;             // clipped surrogate used for the gradient, finite
  LoadVector loads;
};

struct OmdRun {
  std::vector<OmdSlotRecord> slots;
  long uniform_resets = 0;
};

/// Online protocol over [t_begin, t_end): play pi_t, observe lambda_t, pay the
/// loss, update with the entropic step. The policy at t depends only on frames
/// before t.
inline OmdRun run_omd(const TrafficTrace& trace, const RateMatrix& rates, const OmdConfig& cfg,
                      long t_begin = 0, long t_end = -1) {
  cfg.validate();
  if (t_end < 0) t_end = trace.num_slots();
  if (t_begin < 0 || t_end > trace.num_slots() || t_begin >= t_end)
    throw ConfigError("run_omd: bad slot range");
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();

  OmdRun run;
  run.slots.reserve(t_end - t_begin);
  SteeringPolicy pi = SteeringPolicy::uniform(x_count, k);
  for (long t = t_begin; t < t_end; ++t) {
    OmdSlotRecord rec;
    rec.policy = pi;
    rec.loads = compute_loads(trace.frames[t], pi, rates, trace.slot_duration_s);
    rec.realized_cost = cost(rec.loads);
    double clipped = 0.0;
    for (long j = 0; j < k; ++j)
      clipped += -std::log1p(-std::min(rec.loads.rho[j], cfg.grad_clip_load));
    rec.loss = clipped / static_cast<double>(k);

    Eigen::MatrixXd g =
        loss_gradient(trace.frames[t], pi, rates, trace.slot_duration_s, cfg.grad_clip_load);
    const long step_no = t - t_begin + 1;
    const double eta = cfg.schedule == OmdSchedule::InverseSqrtT
                           ? cfg.eta0 / std::sqrt(static_cast<double>(step_no))
                           : cfg.eta0;
    auto [next, resets] = omd_step(pi, g, eta);
    run.uniform_resets += resets;
    pi = std::move(next);
    run.slots.push_back(std::move(rec));
  }
  return run;
}

}  // namespace steersim
