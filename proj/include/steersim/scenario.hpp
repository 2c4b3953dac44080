#pragma once

#include <chrono>
#include <filesystem>
#include <set>

#include "steersim/adapted_ai.hpp"
#include "steersim/metrics.hpp"
#include "steersim/omd.hpp"
#include "steersim/predictors.hpp"
#include "steersim/robust.hpp"
#include "steersim/traffic.hpp"

namespace steersim {

// ---------------------------------------------------------------------------
// Scenario configuration. JSON-backed; every field has a default.
// ---------------------------------------------------------------------------

enum class TraceSource { Synthetic, Csv, TraceFile };

struct ScenarioConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "out";

  TraceSource source = TraceSource::Synthetic;
  SyntheticConfig synthetic;
  std::string csv_path;
  IngestSchema ingest;
  std::string trace_path;  // persisted-trace source
  std::string rates_path;  // required for csv / trace_file sources

  long train_slots = 4032;  // 4 weeks of 10-minute slots
  std::vector<std::string> techniques = {"oracle", "robust_sample_mean", "omd", "adapted_ai"};

  RobustConfig robust;
  OmdConfig omd;
  AdaptedAiConfig adapted;
  long predictor_period_slots = 0;  // 0 = trace season length
  int predictor_ar_order = 2;
  LstmPredictorConfig predictor_lstm;

  SolveConfig solver;
  DaytimeWindow daytime;
  double base_service_ms = 1.0;
  bool measure_wall_time = true;
  bool save_models = false;
  std::string models_dir;  // load pre-trained models instead of training
  long max_incidents = 0;

  void validate() const {
    if (techniques.empty()) throw ConfigError("ScenarioConfig: need at least one technique");
    if (train_slots < 1) throw ConfigError("ScenarioConfig: train_slots must be >= 1");
    robust.validate();
    omd.validate();
    solver.validate();
  }
};

inline const std::set<std::string>& known_techniques() {
  static const std::set<std::string> k = {
      "oracle",        "omd",
      "adapted_ai",    "robust_sample_mean",
      "robust_previous_value", "robust_seasonal_ar",
      "robust_lstm",   "robust_oracle"};
  return k;
}

namespace detail {

template <typename T>
void get_to_if(const Json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline SyntheticConfig synthetic_from_json(const Json& j) {
  SyntheticConfig c;
  detail::get_to_if(j, "grid_side", c.grid_side);
  detail::get_to_if(j, "num_bs", c.num_bs);
  detail::get_to_if(j, "weeks", c.weeks);
  detail::get_to_if(j, "slot_duration_s", c.slot_duration_s);
  detail::get_to_if(j, "base_demand", c.base_demand);
  detail::get_to_if(j, "diurnal_amplitude", c.diurnal_amplitude);
  detail::get_to_if(j, "weekend_factor", c.weekend_factor);
  detail::get_to_if(j, "commute_antiphase", c.commute_antiphase);
  detail::get_to_if(j, "noise_cv", c.noise_cv);
  detail::get_to_if(j, "noise_ma1", c.noise_ma1);
  detail::get_to_if(j, "growth_spread", c.growth_spread);
  detail::get_to_if(j, "rng_seed", c.rng_seed);
  detail::get_to_if(j, "pathloss_exponent", c.pathloss_exponent);
  detail::get_to_if(j, "rate_scale", c.rate_scale);
  return c;
}

inline Json synthetic_to_json(const SyntheticConfig& c) {
  return Json{{"grid_side", c.grid_side},
              {"num_bs", c.num_bs},
              {"weeks", c.weeks},
              {"slot_duration_s", c.slot_duration_s},
              {"base_demand", c.base_demand},
              {"diurnal_amplitude", c.diurnal_amplitude},
              {"weekend_factor", c.weekend_factor},
              {"commute_antiphase", c.commute_antiphase},
              {"noise_cv", c.noise_cv},
              {"noise_ma1", c.noise_ma1},
              {"growth_spread", c.growth_spread},
              {"rng_seed", c.rng_seed},
              {"pathloss_exponent", c.pathloss_exponent},
              {"rate_scale", c.rate_scale}};
}

inline ScenarioConfig scenario_from_json(const Json& j) {
  ScenarioConfig c;
  detail::get_to_if(j, "seed", c.seed);
  detail::get_to_if(j, "out_dir", c.out_dir);
  if (j.contains("trace")) {
    const Json& t = j.at("trace");
    const std::string source = t.value("source", "synthetic");
    if (source == "synthetic") {
      c.source = TraceSource::Synthetic;
      if (t.contains("synthetic")) c.synthetic = synthetic_from_json(t.at("synthetic"));
    } else if (source == "csv") {
      c.source = TraceSource::Csv;
      c.csv_path = t.value("path", "");
      if (t.contains("schema")) {
        const Json& s = t.at("schema");
        detail::get_to_if(s, "col_location", c.ingest.col_location);
        detail::get_to_if(s, "col_epoch_ms", c.ingest.col_epoch_ms);
        detail::get_to_if(s, "col_demand", c.ingest.col_demand);
        if (s.contains("delimiter")) {
          const std::string d = s.at("delimiter");
          if (d.size() != 1) throw ConfigError("schema.delimiter must be one character");
          c.ingest.delimiter = d[0];
        }
        detail::get_to_if(s, "window_s", c.ingest.window_s);
      }
      c.rates_path = t.value("rates_path", "");
    } else if (source == "trace_file") {
      c.source = TraceSource::TraceFile;
      c.trace_path = t.value("path", "");
      c.rates_path = t.value("rates_path", "");
    } else {
      throw ConfigError("trace.source must be synthetic|csv|trace_file");
    }
  }
  detail::get_to_if(j, "train_slots", c.train_slots);
  detail::get_to_if(j, "techniques", c.techniques);
  for (const auto& t : c.techniques)
    if (!known_techniques().count(t)) throw ConfigError("unknown technique: " + t);
  if (j.contains("robust")) {
    const Json& r = j.at("robust");
    detail::get_to_if(r, "epsilon", c.robust.epsilon);
    detail::get_to_if(r, "headroom", c.robust.headroom);
  }
  if (j.contains("omd")) {
    const Json& o = j.at("omd");
    detail::get_to_if(o, "eta0", c.omd.eta0);
    if (o.contains("schedule")) {
      const std::string s = o.at("schedule");
      if (s == "constant")
        c.omd.schedule = OmdSchedule::Constant;
      else if (s == "inverse_sqrt_t")
        c.omd.schedule = OmdSchedule::InverseSqrtT;
      else
        throw ConfigError("omd.schedule must be constant|inverse_sqrt_t");
    }
    detail::get_to_if(o, "grad_clip_load", c.omd.grad_clip_load);
  }
  if (j.contains("adapted")) {
    const Json& a = j.at("adapted");
    detail::get_to_if(a, "window", c.adapted.window);
    detail::get_to_if(a, "hidden", c.adapted.hidden);
    if (a.contains("mode")) {
      const std::string m = a.at("mode");
      if (m == "one_shot")
        c.adapted.expansion.mode = ExpansionConfig::Mode::OneShot;
      else if (m == "fixed_point")
        c.adapted.expansion.mode = ExpansionConfig::Mode::FixedPoint;
      else
        throw ConfigError("adapted.mode must be one_shot|fixed_point");
    }
    detail::get_to_if(a, "damping", c.adapted.expansion.damping);
    detail::get_to_if(a, "max_fp_iters", c.adapted.expansion.max_fp_iters);
    detail::get_to_if(a, "learning_rate", c.adapted.train.learning_rate);
    detail::get_to_if(a, "max_epochs", c.adapted.train.max_epochs);
    detail::get_to_if(a, "batch_size", c.adapted.train.batch_size);
    detail::get_to_if(a, "patience", c.adapted.train.patience);
  }
  if (j.contains("predictor")) {
    const Json& p = j.at("predictor");
    detail::get_to_if(p, "period_slots", c.predictor_period_slots);
    detail::get_to_if(p, "ar_order", c.predictor_ar_order);
    if (p.contains("lstm")) {
      const Json& l = p.at("lstm");
      detail::get_to_if(l, "window", c.predictor_lstm.window);
      detail::get_to_if(l, "hidden", c.predictor_lstm.hidden);
      detail::get_to_if(l, "sample_stride", c.predictor_lstm.sample_stride);
      detail::get_to_if(l, "learning_rate", c.predictor_lstm.train.learning_rate);
      detail::get_to_if(l, "max_epochs", c.predictor_lstm.train.max_epochs);
      detail::get_to_if(l, "batch_size", c.predictor_lstm.train.batch_size);
      detail::get_to_if(l, "patience", c.predictor_lstm.train.patience);
    }
  }
  if (j.contains("solver")) {
    const Json& s = j.at("solver");
    detail::get_to_if(s, "tolerance", c.solver.tolerance);
    detail::get_to_if(s, "max_iters", c.solver.max_iters);
    detail::get_to_if(s, "kkt_tol", c.solver.kkt_tol);
  }
  if (j.contains("metrics")) {
    const Json& m = j.at("metrics");
    detail::get_to_if(m, "base_service_ms", c.base_service_ms);
    detail::get_to_if(m, "daytime_start_s", c.daytime.start_s);
    detail::get_to_if(m, "daytime_end_s", c.daytime.end_s);
  }
  detail::get_to_if(j, "measure_wall_time", c.measure_wall_time);
  detail::get_to_if(j, "save_models", c.save_models);
  detail::get_to_if(j, "models_dir", c.models_dir);
  detail::get_to_if(j, "max_incidents", c.max_incidents);
  c.validate();
  return c;
}

inline Json scenario_to_json(const ScenarioConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  Json t;
  switch (c.source) {
    case TraceSource::Synthetic:
      t["source"] = "synthetic";
      t["synthetic"] = synthetic_to_json(c.synthetic);
      break;
    case TraceSource::Csv:
      t["source"] = "csv";
      t["path"] = c.csv_path;
      t["rates_path"] = c.rates_path;
      t["schema"] = Json{{"col_location", c.ingest.col_location},
                         {"col_epoch_ms", c.ingest.col_epoch_ms},
                         {"col_demand", c.ingest.col_demand},
                         {"delimiter", std::string(1, c.ingest.delimiter)},
                         {"window_s", c.ingest.window_s}};
      break;
    case TraceSource::TraceFile:
      t["source"] = "trace_file";
      t["path"] = c.trace_path;
      t["rates_path"] = c.rates_path;
      break;
  }
  j["trace"] = std::move(t);
  j["train_slots"] = c.train_slots;
  j["techniques"] = c.techniques;
  j["robust"] = Json{{"epsilon", c.robust.epsilon}, {"headroom", c.robust.headroom}};
  j["omd"] = Json{{"eta0", c.omd.eta0},
                  {"schedule", c.omd.schedule == OmdSchedule::Constant ? "constant"
                                                                       : "inverse_sqrt_t"},
                  {"grad_clip_load", c.omd.grad_clip_load}};
  j["adapted"] = Json{{"window", c.adapted.window},
                      {"hidden", c.adapted.hidden},
                      {"mode", c.adapted.expansion.mode == ExpansionConfig::Mode::OneShot
                                   ? "one_shot"
                                   : "fixed_point"},
                      {"damping", c.adapted.expansion.damping},
                      {"max_epochs", c.adapted.train.max_epochs}};
  j["predictor"] = Json{{"period_slots", c.predictor_period_slots},
                        {"ar_order", c.predictor_ar_order},
                        {"lstm", Json{{"window", c.predictor_lstm.window},
                                      {"hidden", c.predictor_lstm.hidden},
                                      {"sample_stride", c.predictor_lstm.sample_stride},
                                      {"max_epochs", c.predictor_lstm.train.max_epochs}}}};
  j["solver"] = Json{{"tolerance", c.solver.tolerance},
                     {"max_iters", c.solver.max_iters},
                     {"kkt_tol", c.solver.kkt_tol}};
  j["metrics"] = Json{{"base_service_ms", c.base_service_ms},
                      {"daytime_start_s", c.daytime.start_s},
                      {"daytime_end_s", c.daytime.end_s}};
  j["measure_wall_time"] = c.measure_wall_time;
  j["max_incidents"] = c.max_incidents;
  return j;
}

// ---------------------------------------------------------------------------
// Scenario assembly and the time-slotted loop.
// ---------------------------------------------------------------------------

struct ScenarioData {
  TrafficTrace trace;
  RateMatrix rates;
  Topology topology;
  std::vector<long long> location_ids;  // csv sources only
};

inline ScenarioData build_scenario_data(const ScenarioConfig& cfg) {
  ScenarioData data;
  switch (cfg.source) {
    case TraceSource::Synthetic: {
      SyntheticConfig sc = cfg.synthetic;
      if (sc.rng_seed == 0) sc.rng_seed = derive_seed(cfg.seed, "traffic");
      auto scen = generate_synthetic(sc);
      data.trace = std::move(scen.trace);
      data.rates = std::move(scen.rates);
      data.topology = std::move(scen.topology);
      break;
    }
    case TraceSource::Csv: {
      if (cfg.csv_path.empty()) throw ConfigError("csv source needs trace.path");
      if (cfg.rates_path.empty()) throw ConfigError("csv source needs trace.rates_path");
      auto res = ingest_csv(cfg.csv_path, cfg.ingest);
      data.trace = std::move(res.trace);
      data.location_ids = std::move(res.location_ids);
      data.rates = load_rates(cfg.rates_path);
      break;
    }
    case TraceSource::TraceFile: {
      if (cfg.trace_path.empty()) throw ConfigError("trace_file source needs trace.path");
      if (cfg.rates_path.empty()) throw ConfigError("trace_file source needs trace.rates_path");
      data.trace = load_trace(cfg.trace_path);
      data.rates = load_rates(cfg.rates_path);
      break;
    }
  }
  require_dim(data.rates.num_locations() == data.trace.num_locations(), "locations",
              data.trace.num_locations(), data.rates.num_locations());
  if (cfg.train_slots >= data.trace.num_slots())
    throw ConfigError("train_slots must leave a non-empty test range");
  return data;
}

struct TrainedModels {
  std::map<std::string, Predictor> predictors;  // keyed by predictor kind name
  std::optional<AdaptedAiModel> adapted;
  Json training_info = Json::object();
};

inline PredictorKind predictor_kind_of_technique(const std::string& technique) {
  if (technique.rfind("robust_", 0) != 0)
    throw ConfigError("not a robust technique: " + technique);
  return predictor_kind_from_string(technique.substr(7));
}

/// Trains everything the configured techniques need, on the training split
/// only. Oracle solutions for training slots are reused by the caller via the
/// returned cache.
inline TrainedModels train_models(const ScenarioConfig& cfg, const ScenarioData& data,
                                  const TrafficTrace& train,
                                  std::vector<SolveResult>* train_solutions) {
  TrainedModels models;
  const long period = cfg.predictor_period_slots > 0 ? cfg.predictor_period_slots
                                                     : data.trace.season_length_slots;
  for (const auto& technique : cfg.techniques) {
    if (technique.rfind("robust_", 0) != 0) continue;
    const PredictorKind kind = predictor_kind_of_technique(technique);
    const std::string key = to_string(kind);
    if (models.predictors.count(key)) continue;
    PredictorConfig pc;
    pc.kind = kind;
    pc.period_slots = period;
    pc.ar_order = cfg.predictor_ar_order;
    pc.lstm = cfg.predictor_lstm;
    models.predictors.emplace(key,
                              Predictor::fit(pc, train, derive_seed(cfg.seed, "predictor-" + key)));
  }

  const bool wants_adapted =
      std::find(cfg.techniques.begin(), cfg.techniques.end(), "adapted_ai") !=
      cfg.techniques.end();
  if (wants_adapted) {
    if (train_solutions->empty())
      *train_solutions = solve_all_slots(train, data.rates, cfg.solver);
    std::vector<Eigen::VectorXd> loads;
    loads.reserve(train_solutions->size());
    for (const auto& s : *train_solutions) loads.push_back(s.loads.rho);
    AdaptedAiConfig ac = cfg.adapted;
    ac.solve = cfg.solver;
    auto [model, history] =
        train_adapted_model(loads, train.slot_offset, train.season_length_slots, ac,
                            derive_seed(cfg.seed, "adapted-model"));
    models.adapted = std::move(model);
    models.training_info["adapted_best_val_loss"] = history.best_val_loss;
    models.training_info["adapted_epochs"] = history.train_loss.size();
  }
  return models;
}

// ---------------------------------------------------------------------------
// Model persistence for the `train` subcommand / pre-trained runs.
// ---------------------------------------------------------------------------

inline void save_models(const TrainedModels& models, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [key, predictor] : models.predictors) {
    std::ofstream out(dir + "/predictor_" + key + ".bin", std::ios::binary);
    if (!out) throw IoError(dir + ": cannot write predictor file");
    predictor.save(out);
  }
  if (models.adapted) {
    std::ofstream out(dir + "/adapted_model.bin", std::ios::binary);
    if (!out) throw IoError(dir + ": cannot write model file");
    models.adapted->save(out);
  }
}

inline TrainedModels load_models(const ScenarioConfig& cfg, const ScenarioData& data,
                                 const TrafficTrace& train,
                                 std::vector<SolveResult>* train_solutions) {
  TrainedModels models;
  for (const auto& technique : cfg.techniques) {
    if (technique.rfind("robust_", 0) != 0) continue;
    const std::string key = to_string(predictor_kind_of_technique(technique));
    if (models.predictors.count(key)) continue;
    const std::string path = cfg.models_dir + "/predictor_" + key + ".bin";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open (run the train subcommand first)");
    models.predictors.emplace(key, Predictor::load(in));
  }
  if (std::find(cfg.techniques.begin(), cfg.techniques.end(), "adapted_ai") !=
      cfg.techniques.end()) {
    const std::string path = cfg.models_dir + "/adapted_model.bin";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open (run the train subcommand first)");
    models.adapted = AdaptedAiModel::load(in);
    // The adapted feedback loop still needs training-split optimal loads.
    if (train_solutions->empty())
      *train_solutions = solve_all_slots(train, data.rates, cfg.solver);
  }
  (void)data;
  return models;
}

struct ScenarioResult {
  std::map<std::string, std::vector<SlotRecord>> records;
  Json summary;
  long incidents = 0;
  int exit_code = 0;
  double wall_time_s = 0.0;
};

namespace detail {

inline SlotRecord make_record(long slot, const std::string& technique,
                              const SteeringPolicy& policy, const TrafficFrame& frame,
                              const RateMatrix& rates, double slot_duration_s,
                              double base_service_ms, double wall_time_s) {
  SlotRecord rec;
  rec.slot_index = slot;
  rec.technique = technique;
  LoadVector loads = compute_loads(frame, policy, rates, slot_duration_s);
  rec.cost = cost(loads);
  rec.delays_ms = delay(loads, base_service_ms);
  rec.avg_delay_ms = rec.delays_ms.mean();
  rec.max_load = loads.max_load();
  rec.rejected_frac = rejected_traffic(frame, policy, rates, slot_duration_s).total_fraction;
  rec.wall_time_s = wall_time_s;
  rec.policy_digest = steersim::policy_digest(policy);
  return rec;
}

class WallClock {
 public:
  explicit WallClock(bool enabled) : enabled_(enabled) {}
  void start() {
    if (enabled_) t0_ = std::chrono::steady_clock::now();
  }
  double stop() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point t0_;
};

}  // namespace detail

/// The full pipeline: build/ingest, train on the training split, run every
/// configured technique over the test slots (policies decided causally; the
/// oracle is the one exception), realize KPIs, summarize. Identical config and
/// seed give bit-identical outputs.
inline ScenarioResult run_scenario(const ScenarioConfig& cfg, const ScenarioData& data) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  auto [train, test] = split_trace(data.trace, cfg.train_slots);
  const long test_begin = cfg.train_slots;
  const long test_end = data.trace.num_slots();
  const double slot_s = data.trace.slot_duration_s;
  const long slots_per_day = data.trace.season_length_slots % 7 == 0
                                 ? data.trace.season_length_slots / 7
                                 : data.trace.season_length_slots;

  // Training split only; test frames never reach any fit.
  std::vector<SolveResult> train_solutions;
  TrainedModels models;
  if (!cfg.models_dir.empty()) {
    models = load_models(cfg, data, train, &train_solutions);
  } else {
    models = train_models(cfg, data, train, &train_solutions);
  }

  // Per-slot oracle solutions over the test range: the baseline technique, the
  // regret/MSE reference and the adapted-AI feedback share these.
  const long num_test = test_end - test_begin;
  std::vector<SolveResult> test_solutions(num_test);
  std::vector<double> oracle_wall(num_test, 0.0);
  {
    const long chunk = 64;
    const long num_chunks = (num_test + chunk - 1) / chunk;
    parallel_for(num_chunks, [&](long c) {
      const long lo = c * chunk;
      const long hi = std::min(num_test, lo + chunk);
      std::optional<SteeringPolicy> warm;
      detail::WallClock clk(cfg.measure_wall_time);
      for (long i = lo; i < hi; ++i) {
        clk.start();
        test_solutions[i] = solve_oracle(data.trace.frames[test_begin + i], data.rates, slot_s,
                                         cfg.solver, warm);
        oracle_wall[i] = clk.stop();
        warm = test_solutions[i].policy;
      }
    }, 1);
  }

  ScenarioResult result;
  long incidents = 0;

  auto run_technique = [&](const std::string& technique) {
    std::vector<SlotRecord>& records = result.records[technique];
    records.clear();
    records.reserve(num_test);
    const long x_count = data.rates.num_locations();
    const long k = data.rates.num_bs();

    auto record_slot = [&](long t, const SteeringPolicy& policy, double wall) {
      records.push_back(detail::make_record(t - test_begin, technique, policy,
                                            data.trace.frames[t], data.rates, slot_s,
                                            cfg.base_service_ms, wall));
    };

    if (technique == "oracle") {
      for (long t = test_begin; t < test_end; ++t)
        record_slot(t, test_solutions[t - test_begin].policy, oracle_wall[t - test_begin]);
    } else if (technique == "omd") {
      OmdConfig oc = cfg.omd;
      oc.d = x_count * k;
      detail::WallClock clk(cfg.measure_wall_time);
      clk.start();
      auto run = run_omd(data.trace, data.rates, oc, test_begin, test_end);
      const double per_slot = clk.stop() / static_cast<double>(num_test);
      for (long t = test_begin; t < test_end; ++t)
        record_slot(t, run.slots[t - test_begin].policy, per_slot);
    } else if (technique == "adapted_ai") {
      if (!models.adapted) throw ConfigError("adapted_ai technique needs a trained model");
      auto loads_of = [&](long t) -> Eigen::VectorXd {
        if (t < test_begin) return train_solutions[t].loads.rho;
        return test_solutions[t - test_begin].loads.rho;
      };
      detail::WallClock clk(cfg.measure_wall_time);
      clk.start();
      auto slots = run_adapted_ai(data.trace, data.rates, *models.adapted,
                                  cfg.adapted.expansion, test_begin, test_end, loads_of,
                                  /*history_available=*/cfg.train_slots);
      const double per_slot = clk.stop() / static_cast<double>(num_test);
      for (long t = test_begin; t < test_end; ++t)
        record_slot(t, slots[t - test_begin].policy, per_slot);
    } else {
      // Two-step robust techniques: predict, guard, solve, realize.
      const PredictorKind kind = predictor_kind_of_technique(technique);
      const auto& predictor = models.predictors.at(to_string(kind));
      std::optional<SteeringPolicy> warm;
      detail::WallClock clk(cfg.measure_wall_time);
      for (long t = test_begin; t < test_end; ++t) {
        try {
          clk.start();
          auto prediction = predictor.predict(data.trace, t);
          auto solved = solve_robust(prediction, data.rates, slot_s, cfg.robust, warm);
          warm = solved.policy;
          record_slot(t, solved.policy, clk.stop());
        } catch (const std::exception&) {
          ++incidents;
          record_slot(t, SteeringPolicy::uniform(x_count, k), 0.0);
          warm.reset();
        }
      }
    }
  };

  std::vector<std::string> order = cfg.techniques;
  if (std::find(order.begin(), order.end(), "oracle") == order.end())
    order.push_back("oracle");
  for (const auto& technique : order) {
    try {
      run_technique(technique);
    } catch (const std::exception& e) {
      // A failed technique degrades to the uniform policy for every slot so
      // that comparisons stay aligned.
      auto& records = result.records[technique];
      records.clear();
      const long x_count = data.rates.num_locations();
      const long k = data.rates.num_bs();
      for (long t = test_begin; t < test_end; ++t) {
        ++incidents;
        records.push_back(detail::make_record(t - test_begin, technique,
                                              SteeringPolicy::uniform(x_count, k),
                                              data.trace.frames[t], data.rates, slot_s,
                                              cfg.base_service_ms, 0.0));
      }
      result.summary["technique_errors"][technique] = e.what();
    }
  }

  if (cfg.save_models && cfg.models_dir.empty())
    save_models(models, cfg.out_dir + "/models");

  result.incidents = incidents;
  result.exit_code = incidents > cfg.max_incidents ? 3 : 0;
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  SummaryOptions opt;
  opt.window = cfg.daytime;
  opt.slot_duration_s = slot_s;
  opt.slots_per_day = slots_per_day;
  opt.slot_offset = test.slot_offset;
  result.summary = summarize(result.records, opt);
  result.summary["config_echo"] = scenario_to_json(cfg);
  result.summary["seed"] = cfg.seed;
  result.summary["trace_digest"] = hex16(trace_digest(data.trace));
  result.summary["test_slots"] = num_test;
  result.summary["train_slots"] = cfg.train_slots;
  result.summary["decision_dimensionality"] =
      data.rates.num_locations() * data.rates.num_bs();
  result.summary["incidents"] = incidents;
  result.summary["training"] = models.training_info;
  if (cfg.measure_wall_time) result.summary["scenario_wall_time_s"] = result.wall_time_s;
  return result;
}

inline ScenarioResult run_scenario(const ScenarioConfig& cfg) {
  ScenarioData data = build_scenario_data(cfg);
  return run_scenario(cfg, data);
}

inline void write_reports(const ScenarioResult& result, const ScenarioConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream out(cfg.out_dir + "/results.csv");
    if (!out) throw IoError(cfg.out_dir + "/results.csv: cannot open for writing");
    std::vector<std::string> order = cfg.techniques;
    if (std::find(order.begin(), order.end(), "oracle") == order.end())
      order.push_back("oracle");
    write_results_csv(result.records, order, out);
  }
  {
    std::ofstream out(cfg.out_dir + "/summary.json");
    if (!out) throw IoError(cfg.out_dir + "/summary.json: cannot open for writing");
    out << result.summary.dump(2) << '\n';
  }
}

}  // namespace steersim
