#pragma once

#include <Eigen/Dense>
#include <array>
#include <vector>

#include "steersim/common.hpp"

namespace steersim {

/// Static topology of the serving area: X demand locations, K base stations.
struct Topology {
  long num_locations = 0;  // X
  long num_bs = 0;         // K
  std::vector<std::array<double, 2>> location_coords;  // optional, size X or empty
  std::vector<std::array<double, 2>> bs_coords;        // optional, size K or empty

  void validate() const {
    if (num_locations < 1) throw ConfigError("Topology: num_locations must be >= 1");
    if (num_bs < 1) throw ConfigError("Topology: num_bs must be >= 1");
    if (!location_coords.empty())
      require_dim(static_cast<long>(location_coords.size()) == num_locations, "location_coords",
                  num_locations, static_cast<long>(location_coords.size()));
    if (!bs_coords.empty())
      require_dim(static_cast<long>(bs_coords.size()) == num_bs, "bs_coords", num_bs,
                  static_cast<long>(bs_coords.size()));
  }
};

/// Connection rates R[x][j] in service-units/second per unit of steered demand.
struct RateMatrix {
  Eigen::MatrixXd r;  // X x K, strictly positive

  long num_locations() const { return r.rows(); }
  long num_bs() const { return r.cols(); }

  void validate() const {
    if (r.size() == 0) throw ConfigError("RateMatrix: empty");
    if (!(r.array() > 0.0).all() || !r.allFinite())
      throw ConfigError("RateMatrix: all rates must be finite and > 0");
  }
};

/// Demand of one time slot: lambda[x] in service units per slot.
struct TrafficFrame {
  long slot_index = 0;
  Eigen::VectorXd demand;  // length X, entries >= 0

  void validate() const {
    if (!demand.allFinite() || (demand.array() < 0.0).any())
      throw ConfigError("TrafficFrame: demand must be finite and >= 0");
  }
};

struct TrafficTrace {
  double slot_duration_s = 600.0;
  long season_length_slots = 1008;  // slots per week at 10-minute slots
  long slot_offset = 0;             // origin of frame 0 in the parent trace, if split
  std::vector<TrafficFrame> frames;

  long num_slots() const { return static_cast<long>(frames.size()); }
  long num_locations() const { return frames.empty() ? 0 : frames.front().demand.size(); }

  void validate() const {
    if (slot_duration_s <= 0) throw ConfigError("TrafficTrace: slot_duration_s must be > 0");
    if (season_length_slots <= 0) throw ConfigError("TrafficTrace: season_length_slots must be > 0");
    const long x = num_locations();
    for (long t = 0; t < num_slots(); ++t) {
      if (frames[t].slot_index != t)
        throw ConfigError("TrafficTrace: frame slot_index must be consecutive from 0");
      require_dim(frames[t].demand.size() == x, "locations", x, frames[t].demand.size());
      frames[t].validate();
    }
  }
};

/// Per-location distribution over base stations; rows sum to 1.
struct SteeringPolicy {
  Eigen::MatrixXd pi;  // X x K, entries in [0,1]

  long num_locations() const { return pi.rows(); }
  long num_bs() const { return pi.cols(); }

  static SteeringPolicy uniform(long x, long k) {
    SteeringPolicy p;
    p.pi = Eigen::MatrixXd::Constant(x, k, 1.0 / static_cast<double>(k));
    return p;
  }

  void validate(double tol = 1e-9) const {
    if ((pi.array() < 0.0).any() || !pi.allFinite())
      throw ConfigError("SteeringPolicy: entries must be finite and >= 0");
    Eigen::VectorXd sums = pi.rowwise().sum();
    if (((sums.array() - 1.0).abs() > tol).any())
      throw ConfigError("SteeringPolicy: rows must sum to 1");
  }
};

/// Base-station utilizations. Values >= 1 represent overload; never clamped here.
struct LoadVector {
  Eigen::VectorXd rho;  // length K, >= 0

  long num_bs() const { return rho.size(); }
  double max_load() const { return rho.size() ? rho.maxCoeff() : 0.0; }
};

// ---------------------------------------------------------------------------
// Deterministic physics of the use case.
// ---------------------------------------------------------------------------

/// rho_j = sum_x pi[x][j] * (lambda[x]/slot_duration) / R[x][j]. Linear in both
/// the demand and the policy.
inline LoadVector compute_loads(const TrafficFrame& traffic, const SteeringPolicy& policy,
                                const RateMatrix& rates, double slot_duration_s) {
  if (slot_duration_s <= 0) throw ConfigError("compute_loads: slot_duration_s must be > 0");
  const long x = rates.num_locations();
  const long k = rates.num_bs();
  require_dim(traffic.demand.size() == x, "locations", x, traffic.demand.size());
  require_dim(policy.num_locations() == x, "locations", x, policy.num_locations());
  require_dim(policy.num_bs() == k, "base_stations", k, policy.num_bs());

  Eigen::VectorXd per_sec = traffic.demand / slot_duration_s;
  LoadVector out;
  out.rho = (policy.pi.array() * (per_sec.replicate(1, k).array() / rates.r.array()))
                .colwise()
                .sum()
                .transpose();
  return out;
}

/// Average proportional-fairness cost (1/K) sum_j -log(1-rho_j).
/// Overload (any rho_j >= 1) yields +infinity, a legal value rather than an error.
inline double cost(const LoadVector& loads) {
  const long k = loads.num_bs();
  if (k == 0) return 0.0;
  double sum = 0.0;
  for (long j = 0; j < k; ++j) {
    const double rho = loads.rho[j];
    if (rho >= 1.0) return kInf;
    sum += -std::log1p(-rho);
  }
  return sum / static_cast<double>(k);
}

/// M/M/1-style delay per BS: base/(1-rho), +infinity at saturation.
inline Eigen::VectorXd delay(const LoadVector& loads, double base_service_ms) {
  if (base_service_ms <= 0) throw ConfigError("delay: base_service_ms must be > 0");
  Eigen::VectorXd d(loads.num_bs());
  for (long j = 0; j < loads.num_bs(); ++j) {
    const double rho = loads.rho[j];
    d[j] = rho < 1.0 ? base_service_ms / (1.0 - rho) : kInf;
  }
  return d;
}

struct RejectedTraffic {
  Eigen::VectorXd per_bs;  // rejected demand per BS, service units per slot
  double total_fraction = 0.0;
};

/// At each overloaded BS the proportional excess (rho - rho_cap)/rho of the
/// demand steered there is rejected. Zero total demand gives fraction 0.
inline RejectedTraffic rejected_traffic(const TrafficFrame& traffic, const SteeringPolicy& policy,
                                        const RateMatrix& rates, double slot_duration_s) {
  LoadVector loads = compute_loads(traffic, policy, rates, slot_duration_s);
  const long k = rates.num_bs();
  RejectedTraffic out;
  out.per_bs = Eigen::VectorXd::Zero(k);
  const double total = traffic.demand.sum();
  for (long j = 0; j < k; ++j) {
    const double rho = loads.rho[j];
    if (rho >= 1.0) {
      const double steered = policy.pi.col(j).dot(traffic.demand);
      out.per_bs[j] = steered * (rho - kRhoCap) / rho;
    }
  }
  out.total_fraction = total > 0.0 ? out.per_bs.sum() / total : 0.0;
  return out;
}

}  // namespace steersim
