#pragma once

#include <deque>
#include <functional>

#include "steersim/lstm.hpp"
#include "steersim/solver.hpp"

namespace steersim {

struct ExpansionConfig {
  enum class Mode { OneShot, FixedPoint };
  Mode mode = Mode::OneShot;
  double damping = 0.5;   // fixed-point relaxation, in (0,1]
  long max_fp_iters = 20;

  void validate() const {
    if (!(damping > 0 && damping <= 1))
      throw ConfigError("ExpansionConfig: damping must be in (0,1]");
    if (max_fp_iters < 1) throw ConfigError("ExpansionConfig: max_fp_iters must be >= 1");
  }
};

struct InputReduction {
  LoadVector loads;  // optimal BS loads for the frame
  bool feasible = true;
};

/// Dimension reduction of Fig-style pipelines: a frame's X*K steering problem
/// is collapsed to the K optimal BS loads. Infeasible frames fall back to the
/// min-max-load policy's loads, flagged.
inline InputReduction input_reduce(const TrafficFrame& frame, const RateMatrix& rates,
                                   double slot_duration_s, const SolveConfig& cfg = {},
                                   const std::optional<SteeringPolicy>& warm = {}) {
  SolveResult res = solve_oracle(frame, rates, slot_duration_s, cfg, warm);
  return {res.loads, res.feasible};
}

/// Supervised pairs: window of W consecutive optimal load vectors (plus a
/// slot-of-week phase encoding) mapped to the next optimal loads. One pair per
/// admissible t; count = len - W. Inputs/targets are raw; normalization is the
/// trainer's concern.
struct LoadWindowSample {
  Eigen::MatrixXd input;   // W x (K+2): loads + sin/cos(2 pi t / season)
  Eigen::MatrixXd target;  // W x K: loads shifted by one slot
};

inline Eigen::VectorXd load_phase_row(const Eigen::VectorXd& loads, long slot, long season) {
  Eigen::VectorXd row(loads.size() + 2);
  row.head(loads.size()) = loads;
  const double phase = 2.0 * M_PI * static_cast<double>(slot % season) /
                       static_cast<double>(season);
  row[loads.size()] = std::sin(phase);
  row[loads.size() + 1] = std::cos(phase);
  return row;
}

inline std::vector<LoadWindowSample> build_training_set(
    const std::vector<Eigen::VectorXd>& optimal_loads, long first_slot, long season,
    long window) {
  const long n = static_cast<long>(optimal_loads.size());
  if (window < 1) throw ConfigError("build_training_set: window must be >= 1");
  if (n <= window) throw ConfigError("build_training_set: trace too short for the window");
  const long k = optimal_loads.front().size();
  std::vector<LoadWindowSample> out;
  out.reserve(n - window);
  for (long start = 0; start + window < n; ++start) {
    LoadWindowSample s;
    s.input.resize(window, k + 2);
    s.target.resize(window, k);
    for (long i = 0; i < window; ++i) {
      s.input.row(i) =
          load_phase_row(optimal_loads[start + i], first_slot + start + i, season).transpose();
      s.target.row(i) = optimal_loads[start + i + 1].transpose();
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Oracle solves for every frame of a trace, chunked for deterministic
/// parallelism; each fixed-size chunk is solved sequentially with warm starts.
inline std::vector<SolveResult> solve_all_slots(const TrafficTrace& trace,
                                                const RateMatrix& rates,
                                                const SolveConfig& cfg = {},
                                                long chunk = 64) {
  const long n = trace.num_slots();
  std::vector<SolveResult> out(n);
  const long num_chunks = (n + chunk - 1) / chunk;
  parallel_for(num_chunks, [&](long c) {
    const long lo = c * chunk;
    const long hi = std::min(n, lo + chunk);
    std::optional<SteeringPolicy> warm;
    for (long t = lo; t < hi; ++t) {
      out[t] = solve_oracle(trace.frames[t], rates, trace.slot_duration_s, cfg, warm);
      warm = out[t].policy;
    }
  }, 1);
  return out;
}

struct OutputExpansion {
  SteeringPolicy policy;
  long clamped_entries = 0;  // predicted loads that had to be clamped below 1
  long fp_iterations = 0;
  double fp_residual = 0.0;  // final ||rho - loads(one_shot(rho))||_inf in fixed-point mode
};

namespace detail {

inline SteeringPolicy one_shot_policy(const Eigen::VectorXd& rho, const RateMatrix& rates) {
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();
  SteeringPolicy policy;
  policy.pi = Eigen::MatrixXd::Zero(x_count, k);
  for (long x = 0; x < x_count; ++x) {
    long best = 0;
    double best_w = -kInf;
    for (long j = 0; j < k; ++j) {
      const double w = rates.r(x, j) * (1.0 - rho[j]);
      if (w > best_w) {  // ties keep the lowest BS index
        best_w = w;
        best = j;
      }
    }
    policy.pi(x, best) = 1.0;
  }
  return policy;
}

}  // namespace detail

/// Expands predicted optimal loads back to a full steering policy. Each
/// location goes to argmax_j R_{x,j}(1 - rho_j) — the BS with the lowest
/// marginal cost under the -log(1-rho) objective — ties to the lowest index.
/// Fixed-point mode relaxes rho toward the loads its own policy induces on a
/// traffic estimate.
inline OutputExpansion output_expand(const LoadVector& pred_loads, const RateMatrix& rates,
                                     const ExpansionConfig& cfg = {},
                                     const std::optional<TrafficFrame>& traffic_estimate = {},
                                     double slot_duration_s = 600.0) {
  cfg.validate();
  const long k = rates.num_bs();
  require_dim(pred_loads.rho.size() == k, "base_stations", k, pred_loads.rho.size());

  OutputExpansion out;
  Eigen::VectorXd rho = pred_loads.rho;
  for (long j = 0; j < k; ++j) {
    if (!(rho[j] >= 0.0)) rho[j] = 0.0;
    if (rho[j] >= 1.0) {
      rho[j] = kRhoCap;
      ++out.clamped_entries;
    }
  }

  if (cfg.mode == ExpansionConfig::Mode::FixedPoint) {
    if (!traffic_estimate)
      throw ConfigError("output_expand: fixed_point mode needs a traffic estimate");
    double prev_residual = kInf;
    for (long it = 0; it < cfg.max_fp_iters; ++it) {
      SteeringPolicy policy = detail::one_shot_policy(rho, rates);
      LoadVector induced = compute_loads(*traffic_estimate, policy, rates, slot_duration_s);
      induced.rho = induced.rho.cwiseMin(kRhoCap);
      const double residual = (rho - induced.rho).cwiseAbs().maxCoeff();
      out.fp_iterations = it + 1;
      out.fp_residual = residual;
      if (residual >= prev_residual) break;  // stop once the damped residual stops shrinking
      prev_residual = residual;
      rho = (1.0 - cfg.damping) * rho + cfg.damping * induced.rho;
    }
  }

  out.policy = detail::one_shot_policy(rho, rates);
  return out;
}

// ---------------------------------------------------------------------------
// Model training and the online loop.
// ---------------------------------------------------------------------------

struct AdaptedAiConfig {
  long window = 24;
  std::vector<long> hidden = {32, 32};
  ExpansionConfig expansion;
  TrainConfig train{.window_length = 24,
                    .batch_size = 32,
                    .learning_rate = 2e-3,
                    .max_epochs = 40,
                    .patience = 8,
                    .grad_clip = 5.0,
                    .validation_fraction = 0.15,
                    .rng_seed = 0};
  SolveConfig solve;
};

struct AdaptedAiModel {
  LstmParams params;
  Normalizer in_norm;   // over K+2 input features
  Normalizer out_norm;  // over K targets
  long window = 0;
  long num_bs = 0;

  /// Predicts the next optimal loads from a window of past optimal loads.
  /// window_loads[i] pairs with global slot window_slots[i].
  Eigen::VectorXd predict(const std::vector<Eigen::VectorXd>& window_loads,
                          long first_slot, long season) const {
    require_dim(static_cast<long>(window_loads.size()) == window, "window", window,
                static_cast<long>(window_loads.size()));
    Eigen::MatrixXd input(window, num_bs + 2);
    for (long i = 0; i < window; ++i)
      input.row(i) = load_phase_row(window_loads[i], first_slot + i, season).transpose();
    auto [y, state] = lstm_forward(params, in_norm.apply(input));
    Eigen::MatrixXd denorm = out_norm.invert(y.row(window - 1));
    return denorm.row(0).transpose().cwiseMax(0.0);
  }

  void save(std::ostream& out) const {
    detail::write_u64(out, static_cast<std::uint64_t>(window));
    detail::write_u64(out, static_cast<std::uint64_t>(num_bs));
    save_model(params, in_norm, out_norm, out);
  }
  static AdaptedAiModel load(std::istream& in) {
    AdaptedAiModel m;
    m.window = static_cast<long>(detail::read_u64(in));
    m.num_bs = static_cast<long>(detail::read_u64(in));
    std::tie(m.params, m.in_norm, m.out_norm) = load_model(in);
    return m;
  }
};

/// Trains the load-forecasting LSTM on optimal loads of the training split.
/// The model's input/output dimensionality is K-scale, never X*K.
inline std::pair<AdaptedAiModel, TrainHistory> train_adapted_model(
    const std::vector<Eigen::VectorXd>& optimal_loads, long first_slot, long season,
    const AdaptedAiConfig& cfg, std::uint64_t seed) {
  auto raw = build_training_set(optimal_loads, first_slot, season, cfg.window);
  const long k = optimal_loads.front().size();

  std::vector<Eigen::MatrixXd> inputs, targets;
  inputs.reserve(raw.size());
  targets.reserve(raw.size());
  for (auto& s : raw) {
    inputs.push_back(std::move(s.input));
    targets.push_back(std::move(s.target));
  }
  AdaptedAiModel model;
  model.window = cfg.window;
  model.num_bs = k;
  model.in_norm = Normalizer::fit(inputs, k + 2);
  model.out_norm = Normalizer::fit(targets, k);

  std::vector<TrainSample> samples(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    samples[i].input = model.in_norm.apply(inputs[i]);
    samples[i].target = model.out_norm.apply(targets[i]);
  }
  TrainConfig tc = cfg.train;
  tc.window_length = cfg.window;
  tc.rng_seed = seed;
  auto params = LstmParams::init(k + 2, cfg.hidden, k, derive_seed(seed, "adapted-init"));
  auto [trained, history] = train(std::move(params), samples, tc);
  model.params = std::move(trained);
  return {std::move(model), std::move(history)};
}

struct AdaptedAiSlot {
  SteeringPolicy policy;
  Eigen::VectorXd predicted_loads;
  bool bootstrap = false;  // played before enough load history existed
  long clamped_entries = 0;
};

/// Online loop over [t_begin, t_end): predict next optimal loads from the
/// window of past slots' optimal loads (the feedback of the observed frames),
/// expand to a policy, then append the revealed slot's optimal loads.
///
/// optimal_loads_of(t) supplies the feedback for any t in
/// [t_begin - window, t_end); the scenario runner backs it by a shared cache
/// of oracle solutions. history_available says how many slots before t_begin
/// may be consulted (0 forces bootstrap slots, which play bootstrap_policy).
inline std::vector<AdaptedAiSlot> run_adapted_ai(
    const TrafficTrace& trace, const RateMatrix& rates, const AdaptedAiModel& model,
    const ExpansionConfig& expansion, long t_begin, long t_end,
    const std::function<Eigen::VectorXd(long)>& optimal_loads_of, long history_available,
    const std::optional<SteeringPolicy>& bootstrap_policy = {}) {
  if (t_begin < 0 || t_end > trace.num_slots() || t_begin >= t_end)
    throw ConfigError("run_adapted_ai: bad slot range");
  const long w = model.window;
  const long season = trace.season_length_slots;
  const long x_count = rates.num_locations();
  const long k = rates.num_bs();

  std::deque<Eigen::VectorXd> window;
  const long preload = std::min(history_available, w);
  for (long t = t_begin - preload; t < t_begin; ++t) window.push_back(optimal_loads_of(t));

  std::vector<AdaptedAiSlot> out;
  out.reserve(t_end - t_begin);
  for (long t = t_begin; t < t_end; ++t) {
    AdaptedAiSlot slot;
    if (static_cast<long>(window.size()) < w) {
      slot.bootstrap = true;
      slot.policy = bootstrap_policy ? *bootstrap_policy : SteeringPolicy::uniform(x_count, k);
      slot.predicted_loads = Eigen::VectorXd::Zero(k);
    } else {
      std::vector<Eigen::VectorXd> win(window.begin(), window.end());
      slot.predicted_loads = model.predict(win, trace.slot_offset + t - w, season);
      LoadVector pred;
      pred.rho = slot.predicted_loads;
      std::optional<TrafficFrame> estimate;
      if (expansion.mode == ExpansionConfig::Mode::FixedPoint && t > 0)
        estimate = trace.frames[t - 1];
      auto exp = output_expand(pred, rates, expansion, estimate, trace.slot_duration_s);
      slot.policy = std::move(exp.policy);
      slot.clamped_entries = exp.clamped_entries;
    }
    // Feedback after lambda_t is revealed: the slot's own optimal loads.
    window.push_back(optimal_loads_of(t));
    if (static_cast<long>(window.size()) > w) window.pop_front();
    out.push_back(std::move(slot));
  }
  return out;
}

}  // namespace steersim
