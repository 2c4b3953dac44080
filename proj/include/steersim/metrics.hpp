#pragma once

#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "steersim/net_model.hpp"

namespace steersim {

using Json = nlohmann::json;

/// One row of the per-slot log: everything the reducers need.
struct SlotRecord {
  long slot_index = 0;
  std::string technique;
  double cost = 0.0;           // may be +inf
  double avg_delay_ms = 0.0;   // average over BSs, +inf if any BS saturated
  double max_load = 0.0;
  double rejected_frac = 0.0;
  double wall_time_s = 0.0;
  std::string policy_digest;   // 16 hex chars
  Eigen::VectorXd delays_ms;   // per BS, kept in memory, not serialized
};

inline std::string policy_digest(const SteeringPolicy& policy) {
  return hex16(fnv1a64(policy.pi.data(), sizeof(double) * policy.pi.size()));
}

/// Daytime window as slot-of-day offsets; defaults correspond to 7:30-20:30.
struct DaytimeWindow {
  double start_s = 7.5 * 3600.0;
  double end_s = 20.5 * 3600.0;

  std::pair<long, long> slots(double slot_duration_s) const {
    if (start_s >= end_s || end_s > 86400.0)
      throw ConfigError("DaytimeWindow: need 0 <= start < end <= 24h");
    const long lo = static_cast<long>(std::llround(start_s / slot_duration_s));
    const long hi = static_cast<long>(std::llround(end_s / slot_duration_s));
    return {lo, hi};
  }
};

struct MeanWithExclusions {
  std::optional<double> mean;  // empty when every slot was excluded
  long included = 0;
  long excluded = 0;
};

/// Arithmetic mean of finite costs; infinite slots are excluded and counted
/// (or propagated as +inf when filtering is disabled).
inline MeanWithExclusions average_cost(const std::vector<SlotRecord>& records,
                                       bool filter_infinite = true) {
  MeanWithExclusions out;
  double sum = 0.0;
  for (const auto& r : records) {
    if (std::isinf(r.cost)) {
      ++out.excluded;
      continue;
    }
    sum += r.cost;
    ++out.included;
  }
  if (!filter_infinite && out.excluded > 0) {
    out.mean = kInf;
    return out;
  }
  if (out.included > 0) out.mean = sum / static_cast<double>(out.included);
  return out;
}

inline long slot_of_day(long slot_index, long slot_offset, long slots_per_day) {
  return (slot_index + slot_offset) % slots_per_day;
}

inline bool in_daytime(long slot_index, long slot_offset, long slots_per_day,
                       const DaytimeWindow& window, double slot_duration_s) {
  auto [lo, hi] = window.slots(slot_duration_s);
  const long sod = slot_of_day(slot_index, slot_offset, slots_per_day);
  return sod >= lo && sod < hi;
}

/// Mean over in-window slots and BSs of finite delays. Slots containing any
/// infinite delay are omitted entirely and counted.
inline MeanWithExclusions daytime_average_delay(const std::vector<SlotRecord>& records,
                                                const DaytimeWindow& window,
                                                double slot_duration_s, long slots_per_day,
                                                long slot_offset = 0) {
  MeanWithExclusions out;
  double sum = 0.0;
  long cells = 0;
  for (const auto& r : records) {
    if (!in_daytime(r.slot_index, slot_offset, slots_per_day, window, slot_duration_s)) continue;
    if (!r.delays_ms.allFinite()) {
      ++out.excluded;
      continue;
    }
    sum += r.delays_ms.sum();
    cells += r.delays_ms.size();
    ++out.included;
  }
  if (cells > 0) out.mean = sum / static_cast<double>(cells);
  return out;
}

/// Mean over in-window slots of (avg-over-BS delay - oracle's)^2, omitting
/// slots infinite in either series.
inline MeanWithExclusions delay_mse_vs_oracle(const std::vector<SlotRecord>& records,
                                              const std::vector<SlotRecord>& oracle_records,
                                              const DaytimeWindow& window,
                                              double slot_duration_s, long slots_per_day,
                                              long slot_offset = 0) {
  require_dim(records.size() == oracle_records.size(), "slots",
              static_cast<long>(oracle_records.size()), static_cast<long>(records.size()));
  MeanWithExclusions out;
  double sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto& o = oracle_records[i];
    if (r.slot_index != o.slot_index)
      throw ConfigError("delay_mse_vs_oracle: misaligned slots");
    if (!in_daytime(r.slot_index, slot_offset, slots_per_day, window, slot_duration_s)) continue;
    if (std::isinf(r.avg_delay_ms) || std::isinf(o.avg_delay_ms)) {
      ++out.excluded;
      continue;
    }
    const double d = r.avg_delay_ms - o.avg_delay_ms;
    sum += d * d;
    ++out.included;
  }
  if (out.included > 0) out.mean = sum / static_cast<double>(out.included);
  return out;
}

/// Partial sums of cost_t - oracle_cost_t over finite pairs: dynamic regret
/// against the per-slot oracle. Pass any fixed comparator's records instead to
/// obtain a static regret curve.
inline std::vector<double> regret_curve(const std::vector<SlotRecord>& records,
                                        const std::vector<SlotRecord>& oracle_records) {
  require_dim(records.size() == oracle_records.size(), "slots",
              static_cast<long>(oracle_records.size()), static_cast<long>(records.size()));
  std::vector<double> curve;
  curve.reserve(records.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const double a = records[i].cost;
    const double b = oracle_records[i].cost;
    if (std::isfinite(a) && std::isfinite(b)) acc += a - b;
    curve.push_back(acc);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Report emission: per-slot CSV + summary JSON.
// ---------------------------------------------------------------------------

constexpr const char* kResultsCsvHeader =
    "slot,technique,cost,avg_delay_ms,max_load,rejected_frac,wall_time_s,policy_digest";

inline void write_results_csv(const std::map<std::string, std::vector<SlotRecord>>& by_technique,
                              const std::vector<std::string>& technique_order,
                              std::ostream& out) {
  out << kResultsCsvHeader << '\n';
  long max_slots = 0;
  for (const auto& [name, recs] : by_technique)
    max_slots = std::max<long>(max_slots, static_cast<long>(recs.size()));
  for (long i = 0; i < max_slots; ++i) {
    for (const auto& name : technique_order) {
      auto it = by_technique.find(name);
      if (it == by_technique.end() || i >= static_cast<long>(it->second.size())) continue;
      const auto& r = it->second[i];
      out << r.slot_index << ',' << r.technique << ',' << fmt_g(r.cost, 12) << ','
          << fmt_g(r.avg_delay_ms, 12) << ',' << fmt_g(r.max_load, 12) << ','
          << fmt_g(r.rejected_frac, 12) << ',' << fmt_g(r.wall_time_s, 12) << ','
          << r.policy_digest << '\n';
    }
  }
}

inline std::map<std::string, std::vector<SlotRecord>> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("results csv: empty");
  if (line != kResultsCsvHeader) throw IoError("results csv: unexpected header");
  std::map<std::string, std::vector<SlotRecord>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string f;
    std::vector<std::string> fields;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    if (fields.size() != 8) throw IoError("results csv: bad row: " + line);
    SlotRecord r;
    r.slot_index = std::stol(fields[0]);
    r.technique = fields[1];
    r.cost = std::stod(fields[2]);
    r.avg_delay_ms = std::stod(fields[3]);
    r.max_load = std::stod(fields[4]);
    r.rejected_frac = std::stod(fields[5]);
    r.wall_time_s = std::stod(fields[6]);
    r.policy_digest = fields[7];
    out[r.technique].push_back(std::move(r));
  }
  return out;
}

struct SummaryOptions {
  DaytimeWindow window;
  double slot_duration_s = 600.0;
  long slots_per_day = 144;
  long slot_offset = 0;  // global slot of record 0, for slot-of-week arithmetic
};

namespace detail {

inline Json mean_to_json(const MeanWithExclusions& m) {
  Json j;
  if (m.mean && std::isfinite(*m.mean)) {
    j["value"] = *m.mean;
  } else if (m.mean) {
    j["value"] = "inf";
  } else {
    j["value"] = nullptr;  // undefined: everything excluded
  }
  j["included"] = m.included;
  j["excluded"] = m.excluded;
  return j;
}

}  // namespace detail

/// Per-technique, per-day and overall KPIs. The oracle technique's records
/// provide the comparison baseline for MSE and regret.
inline Json summarize(const std::map<std::string, std::vector<SlotRecord>>& by_technique,
                      const SummaryOptions& opt, const std::string& oracle_name = "oracle") {
  Json techniques = Json::object();
  const std::vector<SlotRecord>* oracle = nullptr;
  if (auto it = by_technique.find(oracle_name); it != by_technique.end()) oracle = &it->second;

  static const char* day_names[7] = {"Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"};

  for (const auto& [name, recs] : by_technique) {
    Json tj;
    auto avg = average_cost(recs, true);
    tj["avg_cost"] = detail::mean_to_json(avg);
    // Peak-hour (daytime-window) average cost.
    std::vector<SlotRecord> daytime;
    for (const auto& r : recs)
      if (in_daytime(r.slot_index, opt.slot_offset, opt.slots_per_day, opt.window,
                     opt.slot_duration_s))
        daytime.push_back(r);
    tj["peak_cost"] = detail::mean_to_json(average_cost(daytime, true));
    tj["daytime_avg_delay_ms"] = detail::mean_to_json(
        daytime_average_delay(recs, opt.window, opt.slot_duration_s, opt.slots_per_day,
                              opt.slot_offset));
    double rejected = 0.0;
    double wall = 0.0;
    for (const auto& r : recs) {
      rejected += r.rejected_frac;
      wall += r.wall_time_s;
    }
    tj["rejected_traffic_pct"] =
        recs.empty() ? 0.0 : 100.0 * rejected / static_cast<double>(recs.size());
    tj["avg_wall_time_s"] = recs.empty() ? 0.0 : wall / static_cast<double>(recs.size());
    if (oracle != nullptr && oracle->size() == recs.size()) {
      tj["delay_mse_vs_oracle"] = detail::mean_to_json(
          delay_mse_vs_oracle(recs, *oracle, opt.window, opt.slot_duration_s,
                              opt.slots_per_day, opt.slot_offset));
      auto curve = regret_curve(recs, *oracle);
      tj["regret_total"] = curve.empty() ? 0.0 : curve.back();
    }

    // Per-day rows, day boundaries at slot-of-day 0, day 0 = Monday.
    Json days = Json::array();
    std::map<long, std::vector<SlotRecord>> by_day;
    std::map<long, std::vector<SlotRecord>> oracle_by_day;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const long global = recs[i].slot_index + opt.slot_offset;
      const long day = global / opt.slots_per_day;
      by_day[day].push_back(recs[i]);
      if (oracle != nullptr && oracle->size() == recs.size())
        oracle_by_day[day].push_back((*oracle)[i]);
    }
    for (const auto& [day, day_recs] : by_day) {
      Json dj;
      dj["day_index"] = day;
      dj["weekday"] = day_names[day % 7];
      dj["avg_delay_ms"] = detail::mean_to_json(
          daytime_average_delay(day_recs, opt.window, opt.slot_duration_s, opt.slots_per_day,
                                opt.slot_offset));
      double day_rej = 0.0;
      for (const auto& r : day_recs) day_rej += r.rejected_frac;
      dj["rejected_traffic_pct"] =
          day_recs.empty() ? 0.0 : 100.0 * day_rej / static_cast<double>(day_recs.size());
      if (auto it = oracle_by_day.find(day); it != oracle_by_day.end())
        dj["delay_mse_vs_oracle"] = detail::mean_to_json(
            delay_mse_vs_oracle(day_recs, it->second, opt.window, opt.slot_duration_s,
                                opt.slots_per_day, opt.slot_offset));
      days.push_back(std::move(dj));
    }
    tj["per_day"] = std::move(days);
    techniques[name] = std::move(tj);
  }

  Json summary;
  summary["schema_version"] = 1;
  summary["slots_per_day"] = opt.slots_per_day;
  summary["slot_duration_s"] = opt.slot_duration_s;
  summary["daytime_window_s"] = Json::array({opt.window.start_s, opt.window.end_s});
  summary["techniques"] = std::move(techniques);
  return summary;
}

/// Flags the best (lowest) value per KPI row across techniques, Table-style.
inline Json compare_summaries(const std::vector<Json>& summaries) {
  if (summaries.empty()) throw ConfigError("compare: no summaries");
  std::string digest;
  for (const auto& s : summaries) {
    const std::string d = s.value("trace_digest", "");
    if (digest.empty()) digest = d;
    if (d != digest) throw ConfigError("compare: trace digests differ; refusing to join");
  }
  Json joined;
  joined["trace_digest"] = digest;
  Json techniques = Json::object();
  for (const auto& s : summaries)
    for (auto it = s["techniques"].begin(); it != s["techniques"].end(); ++it)
      techniques[it.key()] = it.value();

  auto flag_best = [&](const char* kpi) {
    Json best = Json::object();
    double best_val = kInf;
    std::vector<std::string> best_names;
    for (auto it = techniques.begin(); it != techniques.end(); ++it) {
      const Json& node = it.value().contains(kpi) ? it.value()[kpi] : Json();
      double v = kInf;
      if (node.is_object() && node.contains("value") && node["value"].is_number())
        v = node["value"].get<double>();
      else if (node.is_number())
        v = node.get<double>();
      if (v < best_val - 1e-15) {
        best_val = v;
        best_names = {it.key()};
      } else if (std::abs(v - best_val) <= 1e-15) {
        best_names.push_back(it.key());
      }
    }
    best["value"] = std::isfinite(best_val) ? Json(best_val) : Json(nullptr);
    best["techniques"] = best_names;
    return best;
  };

  Json best = Json::object();
  for (const char* kpi :
       {"avg_cost", "peak_cost", "daytime_avg_delay_ms", "delay_mse_vs_oracle",
        "rejected_traffic_pct"})
    best[kpi] = flag_best(kpi);
  joined["techniques"] = std::move(techniques);
  joined["best"] = std::move(best);
  return joined;
}

// ---------------------------------------------------------------------------
// Minimal JSON-schema validation (type/required/properties/items subset), used
// to check emitted summaries against the shipped schema file.
// ---------------------------------------------------------------------------

inline bool validate_against_schema(const Json& value, const Json& schema, std::string* error,
                                    const std::string& path = "$") {
  auto fail = [&](const std::string& msg) {
    if (error) *error = path + ": " + msg;
    return false;
  };
  if (schema.contains("type")) {
    const std::string t = schema["type"];
    const bool ok = (t == "object" && value.is_object()) || (t == "array" && value.is_array()) ||
                    (t == "string" && value.is_string()) || (t == "number" && value.is_number()) ||
                    (t == "integer" && value.is_number_integer()) ||
                    (t == "boolean" && value.is_boolean()) || (t == "null" && value.is_null());
    if (!ok) return fail("expected type " + t);
  }
  if (schema.contains("required")) {
    for (const auto& key : schema["required"]) {
      if (!value.contains(key.get<std::string>()))
        return fail("missing required key " + key.get<std::string>());
    }
  }
  if (schema.contains("properties") && value.is_object()) {
    for (auto it = schema["properties"].begin(); it != schema["properties"].end(); ++it) {
      if (value.contains(it.key())) {
        if (!validate_against_schema(value[it.key()], it.value(), error, path + "." + it.key()))
          return false;
      }
    }
  }
  if (schema.contains("items") && value.is_array()) {
    long i = 0;
    for (const auto& item : value) {
      if (!validate_against_schema(item, schema["items"], error,
                                   path + "[" + std::to_string(i) + "]"))
        return false;
      ++i;
    }
  }
  if (schema.contains("additionalProperties") && value.is_object() &&
      schema["additionalProperties"].is_object()) {
    for (auto it = value.begin(); it != value.end(); ++it) {
      const bool declared =
          schema.contains("properties") && schema["properties"].contains(it.key());
      if (!declared) {
        if (!validate_against_schema(it.value(), schema["additionalProperties"], error,
                                     path + "." + it.key()))
          return false;
      }
    }
  }
  return true;
}

}  // namespace steersim
