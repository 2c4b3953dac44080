#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "steersim/net_model.hpp"

namespace steersim {

// ---------------------------------------------------------------------------
// Synthetic traces: cyclostationary demand on a square grid with spatially
// anti-phased commute patterns, per-location growth trends and multiplicative
// lognormal noise with short-range temporal correlation.
// ---------------------------------------------------------------------------

struct SyntheticConfig {
  long grid_side = 20;          // locations = grid_side^2
  long num_bs = 8;
  long weeks = 5;
  double slot_duration_s = 600.0;
  double base_demand = 1.0;     // per-location demand scale, service units per slot
  double diurnal_amplitude = 0.75;  // in [0,1]
  double weekend_factor = 0.7;      // in (0,1]
  bool commute_antiphase = true;
  double noise_cv = 0.2;        // coefficient of variation of the lognormal noise
  double noise_ma1 = -0.35;     // MA(1) coefficient of the log-noise; 0 = white
  double growth_spread = 0.12;  // per-location weekly growth rate ~ U(-spread, +spread)
  std::uint64_t rng_seed = 0;
  double pathloss_exponent = 2.0;
  double rate_scale = 1.0;      // peak connection rate at distance 0

  void validate() const {
    if (grid_side < 1) throw ConfigError("SyntheticConfig: grid_side must be >= 1");
    if (num_bs < 1) throw ConfigError("SyntheticConfig: num_bs must be >= 1");
    if (weeks < 1) throw ConfigError("SyntheticConfig: weeks must be >= 1");
    if (slot_duration_s <= 0) throw ConfigError("SyntheticConfig: slot_duration_s must be > 0");
    if (base_demand <= 0) throw ConfigError("SyntheticConfig: base_demand must be > 0");
    if (diurnal_amplitude < 0 || diurnal_amplitude > 1)
      throw ConfigError("SyntheticConfig: diurnal_amplitude must be in [0,1]");
    if (weekend_factor <= 0 || weekend_factor > 1)
      throw ConfigError("SyntheticConfig: weekend_factor must be in (0,1]");
    if (noise_cv < 0) throw ConfigError("SyntheticConfig: noise_cv must be >= 0");
    if (growth_spread < 0 || growth_spread >= 0.2)
      throw ConfigError("SyntheticConfig: growth_spread must be in [0, 0.2)");
    if (pathloss_exponent <= 0) throw ConfigError("SyntheticConfig: pathloss_exponent must be > 0");
    if (rate_scale <= 0) throw ConfigError("SyntheticConfig: rate_scale must be > 0");
  }
};

namespace detail {

// Daily shape: two harmonics (24 h and 12 h) floored at 10% of the daily peak.
inline double daily_profile(double hour_of_day, double amplitude, double peak_value) {
  const double phi = 2.0 * M_PI * (hour_of_day - 9.0) / 24.0;
  const double raw = 1.0 + amplitude * (0.8 * std::sin(phi) + 0.2 * std::sin(2.0 * phi));
  return std::max(raw, 0.1 * peak_value);
}

inline double daily_profile_peak(double amplitude, long slots_per_day, double slot_s) {
  double peak = 0.0;
  for (long s = 0; s < slots_per_day; ++s) {
    const double h = s * slot_s / 3600.0;
    const double phi = 2.0 * M_PI * (h - 9.0) / 24.0;
    peak = std::max(peak, 1.0 + amplitude * (0.8 * std::sin(phi) + 0.2 * std::sin(2.0 * phi)));
  }
  return peak;
}

}  // namespace detail

struct SyntheticScenario {
  TrafficTrace trace;
  RateMatrix rates;
  Topology topology;
};

/// Pure function of the config (including the seed): identical configs yield
/// bit-identical traces.
inline SyntheticScenario generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const long x_count = cfg.grid_side * cfg.grid_side;
  const long slots_per_day = static_cast<long>(std::llround(86400.0 / cfg.slot_duration_s));
  if (slots_per_day < 1 || std::abs(slots_per_day * cfg.slot_duration_s - 86400.0) > 1e-6)
    throw ConfigError("SyntheticConfig: slot_duration_s must divide a day");
  const long season = 7 * slots_per_day;
  const long total_slots = cfg.weeks * season;

  SyntheticScenario out;
  out.topology.num_locations = x_count;
  out.topology.num_bs = cfg.num_bs;
  out.topology.location_coords.resize(x_count);
  for (long x = 0; x < x_count; ++x) {
    out.topology.location_coords[x] = {static_cast<double>(x / cfg.grid_side),
                                       static_cast<double>(x % cfg.grid_side)};
  }

  // BSs on a uniform sub-grid.
  const long m = static_cast<long>(std::ceil(std::sqrt(static_cast<double>(cfg.num_bs))));
  out.topology.bs_coords.resize(cfg.num_bs);
  for (long b = 0; b < cfg.num_bs; ++b) {
    const long bi = b / m;
    const long bj = b % m;
    out.topology.bs_coords[b] = {(bi + 0.5) * cfg.grid_side / m - 0.5,
                                 (bj + 0.5) * cfg.grid_side / m - 0.5};
  }
  out.topology.validate();

  out.rates.r.resize(x_count, cfg.num_bs);
  for (long x = 0; x < x_count; ++x) {
    for (long b = 0; b < cfg.num_bs; ++b) {
      const double dx = out.topology.location_coords[x][0] - out.topology.bs_coords[b][0];
      const double dy = out.topology.location_coords[x][1] - out.topology.bs_coords[b][1];
      const double dist = std::sqrt(dx * dx + dy * dy);
      out.rates.r(x, b) = cfg.rate_scale / (1.0 + std::pow(dist, cfg.pathloss_exponent));
    }
  }
  out.rates.validate();

  // Center half of the grid vs outskirts, by distance from the grid midpoint.
  const double cx = (cfg.grid_side - 1) / 2.0;
  std::vector<double> dist2(x_count);
  for (long x = 0; x < x_count; ++x) {
    const double dx = out.topology.location_coords[x][0] - cx;
    const double dy = out.topology.location_coords[x][1] - cx;
    dist2[x] = dx * dx + dy * dy;
  }
  std::vector<double> sorted = dist2;
  std::nth_element(sorted.begin(), sorted.begin() + x_count / 2, sorted.end());
  const double median = sorted[x_count / 2];

  // Per-location statics: base scale, growth rate, commute phase shift.
  std::vector<double> base(x_count), growth(x_count), phase_shift_h(x_count);
  for (long x = 0; x < x_count; ++x) {
    std::mt19937_64 rng(derive_seed(cfg.rng_seed, "location-static", static_cast<std::uint64_t>(x)));
    std::uniform_real_distribution<double> u_base(0.5, 1.5);
    std::uniform_real_distribution<double> u_growth(-cfg.growth_spread, cfg.growth_spread);
    base[x] = cfg.base_demand * u_base(rng);
    growth[x] = u_growth(rng);
    const bool outskirt = dist2[x] >= median;
    phase_shift_h[x] = (cfg.commute_antiphase && outskirt) ? 12.0 : 0.0;
  }

  const double peak = detail::daily_profile_peak(cfg.diurnal_amplitude, slots_per_day,
                                                 cfg.slot_duration_s);

  // Lognormal noise, mean 1, CV = noise_cv; MA(1) correlation in the log.
  const double sigma_ln = std::sqrt(std::log1p(cfg.noise_cv * cfg.noise_cv));
  const double mu_ln = -0.5 * sigma_ln * sigma_ln;
  const double theta = cfg.noise_ma1;
  const double ma_norm = std::sqrt(1.0 + theta * theta);

  out.trace.slot_duration_s = cfg.slot_duration_s;
  out.trace.season_length_slots = season;
  out.trace.frames.resize(total_slots);
  for (long t = 0; t < total_slots; ++t) {
    out.trace.frames[t].slot_index = t;
    out.trace.frames[t].demand.resize(x_count);
  }

  parallel_for(x_count, [&](long x) {
    std::mt19937_64 rng(derive_seed(cfg.rng_seed, "location-noise", static_cast<std::uint64_t>(x)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    double v_prev = (cfg.noise_cv > 0) ? gauss(rng) : 0.0;
    for (long t = 0; t < total_slots; ++t) {
      const long slot_of_day = t % slots_per_day;
      const long day_of_week = (t / slots_per_day) % 7;
      const double hour = std::fmod(slot_of_day * cfg.slot_duration_s / 3600.0 + phase_shift_h[x], 24.0);
      double s = detail::daily_profile(hour, cfg.diurnal_amplitude, peak);
      if (day_of_week >= 5) s *= cfg.weekend_factor;
      const double trend = 1.0 + growth[x] * (static_cast<double>(t) / season);
      double eps = 1.0;
      if (cfg.noise_cv > 0) {
        const double v = gauss(rng);
        eps = std::exp(mu_ln + sigma_ln * (v + theta * v_prev) / ma_norm);
        v_prev = v;
      }
      out.trace.frames[t].demand[x] = base[x] * trend * s * eps;
    }
  }, 64);

  return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion of long-format (location_id, epoch_ms, demand) rows.
// ---------------------------------------------------------------------------

struct IngestSchema {
  int col_location = 0;
  int col_epoch_ms = 1;
  int col_demand = 2;
  char delimiter = '\t';
  double window_s = 600.0;  // aggregation window

  void validate() const {
    if (col_location < 0 || col_epoch_ms < 0 || col_demand < 0)
      throw ConfigError("IngestSchema: all three columns must be mapped");
    if (col_location == col_epoch_ms || col_location == col_demand || col_epoch_ms == col_demand)
      throw ConfigError("IngestSchema: column indices must be distinct");
    if (window_s <= 0) throw ConfigError("IngestSchema: window_s must be > 0");
  }
};

struct IngestResult {
  TrafficTrace trace;
  std::vector<long long> location_ids;  // dense index -> external id, first-seen order
};

inline IngestResult ingest_rows(std::istream& in, const IngestSchema& schema,
                                const std::string& origin = "<stream>") {
  schema.validate();
  const int max_col = std::max({schema.col_location, schema.col_epoch_ms, schema.col_demand});

  std::map<long long, long> dense;  // external id -> dense index
  std::vector<long long> ids;
  // (dense location, absolute bin) -> summed demand
  std::map<std::pair<long, long long>, double> bins;
  long long min_bin = std::numeric_limits<long long>::max();
  long long max_bin = std::numeric_limits<long long>::min();

  std::string line;
  long line_no = 0;
  long rows = 0;
  const double window_ms = schema.window_s * 1000.0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ls(line);
    while (std::getline(ls, field, schema.delimiter)) fields.push_back(field);
    if (static_cast<int>(fields.size()) <= max_col)
      throw IoError(origin + ": line " + std::to_string(line_no) + ": expected at least " +
                    std::to_string(max_col + 1) + " fields, got " + std::to_string(fields.size()));
    long long loc;
    long long epoch_ms;
    double demand;
    try {
      loc = std::stoll(fields[schema.col_location]);
      epoch_ms = std::stoll(fields[schema.col_epoch_ms]);
      demand = std::stod(fields[schema.col_demand]);
    } catch (const std::exception&) {
      throw IoError(origin + ": line " + std::to_string(line_no) + ": unparseable row");
    }
    if (!std::isfinite(demand) || demand < 0)
      throw IoError(origin + ": line " + std::to_string(line_no) + ": demand must be finite and >= 0");
    auto [it, inserted] = dense.try_emplace(loc, static_cast<long>(ids.size()));
    if (inserted) ids.push_back(loc);
    const long long bin = static_cast<long long>(std::floor(epoch_ms / window_ms));
    bins[{it->second, bin}] += demand;
    min_bin = std::min(min_bin, bin);
    max_bin = std::max(max_bin, bin);
    ++rows;
  }
  if (rows == 0) throw IoError(origin + ": no rows");

  IngestResult out;
  out.location_ids = ids;
  const long x = static_cast<long>(ids.size());
  const long num_slots = static_cast<long>(max_bin - min_bin + 1);
  out.trace.slot_duration_s = schema.window_s;
  const double week_slots = 7.0 * 86400.0 / schema.window_s;
  out.trace.season_length_slots = std::max<long>(1, static_cast<long>(std::llround(week_slots)));
  out.trace.frames.resize(num_slots);
  for (long t = 0; t < num_slots; ++t) {
    out.trace.frames[t].slot_index = t;
    out.trace.frames[t].demand = Eigen::VectorXd::Zero(x);
  }
  for (const auto& [key, value] : bins) {
    out.trace.frames[static_cast<long>(key.second - min_bin)].demand[key.first] = value;
  }
  return out;
}

inline IngestResult ingest_csv(const std::string& path, const IngestSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open");
  return ingest_rows(in, schema, path);
}

// ---------------------------------------------------------------------------
// Train/test split and spatial aggregation.
// ---------------------------------------------------------------------------

inline std::pair<TrafficTrace, TrafficTrace> split_trace(const TrafficTrace& trace,
                                                         long train_slots) {
  if (train_slots <= 0 || train_slots >= trace.num_slots())
    throw ConfigError("split_trace: train_slots must be in (0, length)");
  TrafficTrace train;
  TrafficTrace test;
  train.slot_duration_s = test.slot_duration_s = trace.slot_duration_s;
  train.season_length_slots = test.season_length_slots = trace.season_length_slots;
  train.slot_offset = trace.slot_offset;
  test.slot_offset = trace.slot_offset + train_slots;
  train.frames.assign(trace.frames.begin(), trace.frames.begin() + train_slots);
  test.frames.assign(trace.frames.begin() + train_slots, trace.frames.end());
  for (long t = 0; t < test.num_slots(); ++t) test.frames[t].slot_index = t;
  return {std::move(train), std::move(test)};
}

/// Sum demand over factor x factor grid blocks. The block rate toward BS j is
/// the demand-weighted harmonic mean (sum lam) / (sum lam/R), which preserves
/// block load contributions for steering proportional to the mean demands.
inline std::pair<TrafficTrace, RateMatrix> spatial_aggregate(const TrafficTrace& trace,
                                                             const RateMatrix& rates,
                                                             long factor) {
  if (factor < 1) throw ConfigError("spatial_aggregate: factor must be >= 1");
  const long x = trace.num_locations();
  require_dim(rates.num_locations() == x, "locations", x, rates.num_locations());
  const long side = static_cast<long>(std::llround(std::sqrt(static_cast<double>(x))));
  if (side * side != x)
    throw ConfigError("spatial_aggregate: trace is not a square grid");
  if (side % factor != 0)
    throw ConfigError("spatial_aggregate: grid side " + std::to_string(side) +
                      " not divisible by factor " + std::to_string(factor));
  if (factor == 1) return {trace, rates};

  const long new_side = side / factor;
  const long new_x = new_side * new_side;
  const long k = rates.num_bs();

  // Mean demands over the given trace weight the per-block effective rates.
  Eigen::VectorXd mean_demand = Eigen::VectorXd::Zero(x);
  for (const auto& f : trace.frames) mean_demand += f.demand;
  if (trace.num_slots() > 0) mean_demand /= static_cast<double>(trace.num_slots());

  std::vector<long> block_of(x);
  for (long i = 0; i < x; ++i) {
    const long row = i / side;
    const long col = i % side;
    block_of[i] = (row / factor) * new_side + (col / factor);
  }

  RateMatrix new_rates;
  new_rates.r.resize(new_x, k);
  for (long b = 0; b < new_x; ++b) {
    for (long j = 0; j < k; ++j) {
      double num = 0.0;
      double den = 0.0;
      double num_u = 0.0;  // unweighted fallback for all-zero blocks
      double den_u = 0.0;
      for (long i = 0; i < x; ++i) {
        if (block_of[i] != b) continue;
        num += mean_demand[i];
        den += mean_demand[i] / rates.r(i, j);
        num_u += 1.0;
        den_u += 1.0 / rates.r(i, j);
      }
      new_rates.r(b, j) = den > 0.0 ? num / den : num_u / den_u;
    }
  }

  TrafficTrace new_trace;
  new_trace.slot_duration_s = trace.slot_duration_s;
  new_trace.season_length_slots = trace.season_length_slots;
  new_trace.slot_offset = trace.slot_offset;
  new_trace.frames.resize(trace.num_slots());
  for (long t = 0; t < trace.num_slots(); ++t) {
    new_trace.frames[t].slot_index = t;
    new_trace.frames[t].demand = Eigen::VectorXd::Zero(new_x);
    for (long i = 0; i < x; ++i)
      new_trace.frames[t].demand[block_of[i]] += trace.frames[t].demand[i];
  }
  return {std::move(new_trace), std::move(new_rates)};
}

// ---------------------------------------------------------------------------
// Persistence. Textual, bit-exact round trip (17 significant digits).
// Header line: num_locations,slot_duration_s,season_length_slots
// then one CSV row of demands per frame.
// ---------------------------------------------------------------------------

inline void save_trace(const TrafficTrace& trace, std::ostream& out) {
  out << trace.num_locations() << ',' << fmt_g(trace.slot_duration_s, 17) << ','
      << trace.season_length_slots << '\n';
  for (const auto& f : trace.frames) {
    for (long i = 0; i < f.demand.size(); ++i) {
      if (i) out << ',';
      out << fmt_g(f.demand[i], 17);
    }
    out << '\n';
  }
}

inline void save_trace(const TrafficTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot open for writing");
  save_trace(trace, out);
}

inline TrafficTrace load_trace(std::istream& in, const std::string& origin = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw IoError(origin + ": empty trace file");
  TrafficTrace trace;
  long x = 0;
  {
    std::stringstream hs(line);
    std::string f;
    std::vector<std::string> fields;
    while (std::getline(hs, f, ',')) fields.push_back(f);
    if (fields.size() != 3) throw IoError(origin + ": bad header");
    x = std::stol(fields[0]);
    trace.slot_duration_s = std::stod(fields[1]);
    trace.season_length_slots = std::stol(fields[2]);
  }
  long t = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrafficFrame frame;
    frame.slot_index = t++;
    frame.demand.resize(x);
    std::stringstream ls(line);
    std::string f;
    long i = 0;
    while (std::getline(ls, f, ',')) {
      if (i >= x) throw IoError(origin + ": row " + std::to_string(t) + " has too many fields");
      frame.demand[i++] = std::stod(f);
    }
    if (i != x) throw IoError(origin + ": row " + std::to_string(t) + " has too few fields");
    trace.frames.push_back(std::move(frame));
  }
  trace.validate();
  return trace;
}

inline TrafficTrace load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open");
  return load_trace(in, path);
}

inline void save_rates(const RateMatrix& rates, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot open for writing");
  for (long i = 0; i < rates.num_locations(); ++i) {
    for (long j = 0; j < rates.num_bs(); ++j) {
      if (j) out << ',';
      out << fmt_g(rates.r(i, j), 17);
    }
    out << '\n';
  }
}

inline RateMatrix load_rates(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) row.push_back(std::stod(f));
    if (!rows.empty() && row.size() != rows.front().size())
      throw IoError(path + ": ragged rate matrix");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError(path + ": no rows");
  RateMatrix rates;
  rates.r.resize(static_cast<long>(rows.size()), static_cast<long>(rows.front().size()));
  for (long i = 0; i < rates.r.rows(); ++i)
    for (long j = 0; j < rates.r.cols(); ++j) rates.r(i, j) = rows[i][j];
  rates.validate();
  return rates;
}

/// Long-format export compatible with ingest_csv: one (location, epoch_ms,
/// demand) row per cell, 17 significant digits.
inline void export_long_csv(const TrafficTrace& trace, std::ostream& out, char delimiter = '\t') {
  for (const auto& f : trace.frames) {
    const long long epoch_ms =
        static_cast<long long>(f.slot_index * trace.slot_duration_s * 1000.0);
    for (long x = 0; x < f.demand.size(); ++x) {
      out << x << delimiter << epoch_ms << delimiter << fmt_g(f.demand[x], 17) << '\n';
    }
  }
}

inline void save_location_ids(const std::vector<long long>& ids, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << "external_id,dense_index\n";
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << ',' << i << '\n';
}

inline std::uint64_t trace_digest(const TrafficTrace& trace) {
  std::uint64_t h = fnv1a64("trace-v1");
  h = fnv1a64(&trace.slot_duration_s, sizeof(double), h);
  for (const auto& f : trace.frames)
    h = fnv1a64(f.demand.data(), sizeof(double) * f.demand.size(), h);
  return h;
}

}  // namespace steersim
