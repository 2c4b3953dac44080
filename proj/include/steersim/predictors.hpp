#pragma once

#include <memory>
#include <sstream>

#include "steersim/lstm.hpp"
#include "steersim/net_model.hpp"

namespace steersim {

/// One-step-ahead forecast with a Gaussian error scale per location.
struct PredictionWithUncertainty {
  Eigen::VectorXd mean;  // lambda-hat, >= 0
  Eigen::VectorXd std;   // error scale, >= 0 (0 for the oracle)
};

enum class PredictorKind { SampleMean, PreviousValue, SeasonalAr, Lstm, Oracle };

inline const char* to_string(PredictorKind k) {
  switch (k) {
    case PredictorKind::SampleMean: return "sample_mean";
    case PredictorKind::PreviousValue: return "previous_value";
    case PredictorKind::SeasonalAr: return "seasonal_ar";
    case PredictorKind::Lstm: return "lstm";
    case PredictorKind::Oracle: return "oracle";
  }
  return "?";
}

inline PredictorKind predictor_kind_from_string(const std::string& s) {
  if (s == "sample_mean") return PredictorKind::SampleMean;
  if (s == "previous_value") return PredictorKind::PreviousValue;
  if (s == "seasonal_ar") return PredictorKind::SeasonalAr;
  if (s == "lstm") return PredictorKind::Lstm;
  if (s == "oracle") return PredictorKind::Oracle;
  throw ConfigError("unknown predictor kind: " + s);
}

struct LstmPredictorConfig {
  long window = 12;
  std::vector<long> hidden = {8};
  long sample_stride = 2;  // spacing of window starts in the training set
  TrainConfig train{.window_length = 12,
                    .batch_size = 32,
                    .learning_rate = 5e-3,
                    .max_epochs = 30,
                    .patience = 6,
                    .grad_clip = 5.0,
                    .validation_fraction = 0.15,
                    .rng_seed = 0};
};

struct PredictorConfig {
  PredictorKind kind = PredictorKind::SampleMean;
  long period_slots = 1008;  // one week of 10-minute slots
  int ar_order = 2;
  LstmPredictorConfig lstm;

  void validate() const {
    if (period_slots < 1) throw ConfigError("PredictorConfig: period_slots must be >= 1");
    if (ar_order < 1) throw ConfigError("PredictorConfig: ar_order must be >= 1");
    if (lstm.window < 1) throw ConfigError("PredictorConfig: lstm window must be >= 1");
  }
};

namespace detail {

// Cyclic phase encoding of a slot: day, half-day and week harmonics.
constexpr long kPhaseFeatures = 6;

inline void phase_features(long slot, long season, double* out) {
  const long slots_per_day = season % 7 == 0 ? season / 7 : season;
  const double day = 2.0 * M_PI * static_cast<double>(slot % slots_per_day) /
                     static_cast<double>(slots_per_day);
  const double week =
      2.0 * M_PI * static_cast<double>(slot % season) / static_cast<double>(season);
  out[0] = std::sin(day);
  out[1] = std::cos(day);
  out[2] = std::sin(2.0 * day);
  out[3] = std::cos(2.0 * day);
  out[4] = std::sin(week);
  out[5] = std::cos(week);
}

}  // namespace detail

/// Per-location one-step forecasters. Fitted state is immutable after fit();
/// predict(trace, t) reads only frames before t (the oracle kind reads frame t,
/// by definition).
class Predictor {
 public:
  static Predictor fit(const PredictorConfig& cfg, const TrafficTrace& train,
                       std::uint64_t seed) {
    cfg.validate();
    Predictor p;
    p.cfg_ = cfg;
    p.num_locations_ = train.num_locations();
    const long n = train.num_slots();
    const long x_count = p.num_locations_;

    switch (cfg.kind) {
      case PredictorKind::SampleMean:
      case PredictorKind::Oracle:
        break;  // no fitted state
      case PredictorKind::PreviousValue: {
        if (n < 2) throw InsufficientHistory("previous_value: need at least 2 training slots");
        p.residual_std_ = Eigen::VectorXd::Zero(x_count);
        for (long x = 0; x < x_count; ++x) {
          double ss = 0.0;
          for (long t = 1; t < n; ++t) {
            const double r = train.frames[t].demand[x] - train.frames[t - 1].demand[x];
            ss += r * r;
          }
          p.residual_std_[x] = std::sqrt(ss / static_cast<double>(n - 1));
        }
        break;
      }
      case PredictorKind::SeasonalAr: {
        const long s = cfg.period_slots;
        const long p_ord = cfg.ar_order;
        if (n < 2 * s || n < s + p_ord + 2)
          throw InsufficientHistory("seasonal_ar: need at least two seasons of training data");
        p.ar_coeff_.resize(x_count, p_ord + 1);
        p.residual_std_ = Eigen::VectorXd::Zero(x_count);
        const long rows = n - s - p_ord;
        Eigen::MatrixXd design(rows, p_ord + 1);
        Eigen::VectorXd y(rows);
        for (long x = 0; x < x_count; ++x) {
          auto z = [&](long t) {
            return train.frames[t].demand[x] - train.frames[t - s].demand[x];
          };
          for (long r = 0; r < rows; ++r) {
            const long t = s + p_ord + r;
            y[r] = z(t);
            design(r, 0) = 1.0;
            for (long i = 1; i <= p_ord; ++i) design(r, i) = z(t - i);
          }
          Eigen::VectorXd beta = design.colPivHouseholderQr().solve(y);
          p.ar_coeff_.row(x) = beta.transpose();
          const double ss = (y - design * beta).squaredNorm();
          p.residual_std_[x] = std::sqrt(ss / static_cast<double>(rows));
        }
        break;
      }
      case PredictorKind::Lstm: {
        const long w = cfg.lstm.window;
        if (n < w + 2) throw InsufficientHistory("lstm: training split shorter than the window");
        p.lstm_models_.resize(x_count);
        p.lstm_norms_.resize(x_count);
        p.residual_std_ = Eigen::VectorXd::Zero(x_count);
        const long season = train.season_length_slots;
        const long offset = train.slot_offset;
        std::vector<std::uint64_t> seeds(x_count);
        for (long x = 0; x < x_count; ++x)
          seeds[x] = derive_seed(seed, "lstm-location", static_cast<std::uint64_t>(x));
        parallel_for(x_count, [&](long x) {
          Eigen::VectorXd series(n);
          for (long t = 0; t < n; ++t) series[t] = train.frames[t].demand[x];
          const double mean = series.mean();
          double sd = std::sqrt((series.array() - mean).square().mean());
          if (sd < 1e-12) sd = 1.0;

          auto make_input = [&](long start) {
            Eigen::MatrixXd m(w, 1 + detail::kPhaseFeatures);
            for (long i = 0; i < w; ++i) {
              m(i, 0) = (series[start + i] - mean) / sd;
              detail::phase_features(offset + start + i, season, m.row(i).data() + 1);
            }
            return m;
          };
          std::vector<TrainSample> samples;
          for (long start = 0; start + w < n; start += cfg.lstm.sample_stride) {
            TrainSample smp;
            smp.input = make_input(start);
            smp.target.resize(w, 1);
            for (long i = 0; i < w; ++i)
              smp.target(i, 0) = (series[start + i + 1] - mean) / sd;
            samples.push_back(std::move(smp));
          }
          auto params = LstmParams::init(1 + detail::kPhaseFeatures, cfg.lstm.hidden, 1, seeds[x]);
          TrainConfig tc = cfg.lstm.train;
          tc.window_length = w;
          tc.rng_seed = splitmix64(seeds[x]);
          auto [trained, history] = train_lstm_guarded(std::move(params), samples, tc);
          // Validation residual scale, in demand units.
          p.residual_std_[x] = sd * std::sqrt(std::min(history.best_val_loss, 1e12));
          p.lstm_models_[x] = std::make_shared<LstmParams>(std::move(trained));
          p.lstm_norms_[x] = {mean, sd};
        }, 4);
        break;
      }
    }
    return p;
  }

  PredictionWithUncertainty predict(const TrafficTrace& trace, long t) const {
    const long x_count = trace.num_locations();
    require_dim(x_count == num_locations_ || num_locations_ == 0, "locations", num_locations_,
                x_count);
    PredictionWithUncertainty out;
    out.mean.resize(x_count);
    out.std.resize(x_count);

    switch (cfg_.kind) {
      case PredictorKind::Oracle: {
        if (t >= trace.num_slots()) throw InsufficientHistory("oracle: slot beyond trace");
        out.mean = trace.frames[t].demand;
        out.std.setZero();
        break;
      }
      case PredictorKind::SampleMean: {
        const long s = cfg_.period_slots;
        const long first = t % s;
        long count = 0;
        for (long u = first; u < t; u += s) ++count;
        if (count < 2) throw InsufficientHistory();
        for (long x = 0; x < x_count; ++x) {
          double sum = 0.0;
          for (long u = first; u < t; u += s) sum += trace.frames[u].demand[x];
          const double mean = sum / static_cast<double>(count);
          double ss = 0.0;
          for (long u = first; u < t; u += s) {
            const double d = trace.frames[u].demand[x] - mean;
            ss += d * d;
          }
          out.mean[x] = mean;
          out.std[x] = std::sqrt(ss / static_cast<double>(count - 1));
        }
        break;
      }
      case PredictorKind::PreviousValue: {
        if (t < 1) throw InsufficientHistory();
        out.mean = trace.frames[t - 1].demand;
        out.std = residual_std_;
        break;
      }
      case PredictorKind::SeasonalAr: {
        const long s = cfg_.period_slots;
        const long p_ord = cfg_.ar_order;
        if (t < s + p_ord) throw InsufficientHistory();
        if (ar_coeff_.rows() != x_count)
          throw ConfigError("seasonal_ar: predictor not fitted for this trace");
        for (long x = 0; x < x_count; ++x) {
          double zhat = ar_coeff_(x, 0);
          for (long i = 1; i <= p_ord; ++i) {
            const double z =
                trace.frames[t - i].demand[x] - trace.frames[t - i - s].demand[x];
            zhat += ar_coeff_(x, i) * z;
          }
          out.mean[x] = std::max(0.0, trace.frames[t - s].demand[x] + zhat);
          out.std[x] = residual_std_[x];
        }
        break;
      }
      case PredictorKind::Lstm: {
        const long w = cfg_.lstm.window;
        if (t < w) throw InsufficientHistory();
        if (static_cast<long>(lstm_models_.size()) != x_count)
          throw ConfigError("lstm: predictor not fitted for this trace");
        const long season = trace.season_length_slots;
        for (long x = 0; x < x_count; ++x) {
          const auto [mean, sd] = lstm_norms_[x];
          Eigen::MatrixXd input(w, 1 + detail::kPhaseFeatures);
          for (long i = 0; i < w; ++i) {
            const long u = t - w + i;
            input(i, 0) = (trace.frames[u].demand[x] - mean) / sd;
            detail::phase_features(trace.slot_offset + u, season, input.row(i).data() + 1);
          }
          auto [y, state] = lstm_forward(*lstm_models_[x], input);
          out.mean[x] = std::max(0.0, y(w - 1, 0) * sd + mean);
          out.std[x] = residual_std_[x];
        }
        break;
      }
    }
    return out;
  }

  PredictorKind kind() const { return cfg_.kind; }
  const PredictorConfig& config() const { return cfg_; }
  const Eigen::VectorXd& residual_std() const { return residual_std_; }

  // -- serialization: version tag + hyperparameters + coefficient arrays --

  void save(std::ostream& out) const {
    detail::write_u64(out, kPredictorMagic);
    detail::write_u64(out, static_cast<std::uint64_t>(cfg_.kind));
    detail::write_u64(out, static_cast<std::uint64_t>(cfg_.period_slots));
    detail::write_u64(out, static_cast<std::uint64_t>(cfg_.ar_order));
    detail::write_u64(out, static_cast<std::uint64_t>(num_locations_));
    switch (cfg_.kind) {
      case PredictorKind::SampleMean:
      case PredictorKind::Oracle:
        break;
      case PredictorKind::PreviousValue:
        detail::write_doubles(out, residual_std_.data(), residual_std_.size());
        break;
      case PredictorKind::SeasonalAr:
        detail::write_doubles(out, ar_coeff_.data(), ar_coeff_.size());
        detail::write_doubles(out, residual_std_.data(), residual_std_.size());
        break;
      case PredictorKind::Lstm: {
        detail::write_u64(out, static_cast<std::uint64_t>(cfg_.lstm.window));
        detail::write_doubles(out, residual_std_.data(), residual_std_.size());
        for (long x = 0; x < num_locations_; ++x) {
          Normalizer in_norm;
          in_norm.mean = Eigen::VectorXd::Constant(1, lstm_norms_[x].first);
          in_norm.scale = Eigen::VectorXd::Constant(1, lstm_norms_[x].second);
          save_model(*lstm_models_[x], in_norm, in_norm, out);
        }
        break;
      }
    }
  }

  static Predictor load(std::istream& in) {
    if (detail::read_u64(in) != kPredictorMagic)
      throw IoError("predictor file: bad magic/version");
    Predictor p;
    p.cfg_.kind = static_cast<PredictorKind>(detail::read_u64(in));
    p.cfg_.period_slots = static_cast<long>(detail::read_u64(in));
    p.cfg_.ar_order = static_cast<int>(detail::read_u64(in));
    p.num_locations_ = static_cast<long>(detail::read_u64(in));
    const long x_count = p.num_locations_;
    switch (p.cfg_.kind) {
      case PredictorKind::SampleMean:
      case PredictorKind::Oracle:
        break;
      case PredictorKind::PreviousValue:
        p.residual_std_.resize(x_count);
        detail::read_doubles(in, p.residual_std_.data(), x_count);
        break;
      case PredictorKind::SeasonalAr:
        p.ar_coeff_.resize(x_count, p.cfg_.ar_order + 1);
        p.residual_std_.resize(x_count);
        detail::read_doubles(in, p.ar_coeff_.data(), p.ar_coeff_.size());
        detail::read_doubles(in, p.residual_std_.data(), x_count);
        break;
      case PredictorKind::Lstm: {
        p.cfg_.lstm.window = static_cast<long>(detail::read_u64(in));
        p.residual_std_.resize(x_count);
        detail::read_doubles(in, p.residual_std_.data(), x_count);
        p.lstm_models_.resize(x_count);
        p.lstm_norms_.resize(x_count);
        for (long x = 0; x < x_count; ++x) {
          auto [params, in_norm, out_norm] = load_model(in);
          p.lstm_models_[x] = std::make_shared<LstmParams>(std::move(params));
          p.lstm_norms_[x] = {in_norm.mean[0], in_norm.scale[0]};
        }
        break;
      }
    }
    return p;
  }

 private:
  static constexpr std::uint64_t kPredictorMagic = 0x3130444552505453ULL;  // "STPRED01"

  // train() raising on a pathological location must not sink the whole fit;
  // fall back to a freshly initialized net for that location.
  static std::pair<LstmParams, TrainHistory> train_lstm_guarded(
      LstmParams params, const std::vector<TrainSample>& samples, const TrainConfig& tc) {
    return train(std::move(params), samples, tc);
  }

  PredictorConfig cfg_;
  long num_locations_ = 0;
  Eigen::VectorXd residual_std_;                 // per location
  Eigen::MatrixXd ar_coeff_;                     // X x (order+1), intercept first
  std::vector<std::shared_ptr<LstmParams>> lstm_models_;
  std::vector<std::pair<double, double>> lstm_norms_;  // per-location (mean, std)
};

struct PredictorEvaluation {
  double mse = 0.0;
  Eigen::VectorXd per_location_std;  // RMS of the reported error scale
};

/// MSE of one-step predictions over [t_begin, t_end).
inline PredictorEvaluation evaluate_predictor(const Predictor& pred, const TrafficTrace& trace,
                                              long t_begin, long t_end) {
  if (t_begin < 0 || t_end > trace.num_slots() || t_begin >= t_end)
    throw ConfigError("evaluate_predictor: bad slot range");
  const long x_count = trace.num_locations();
  PredictorEvaluation out;
  out.per_location_std = Eigen::VectorXd::Zero(x_count);
  double se = 0.0;
  for (long t = t_begin; t < t_end; ++t) {
    auto p = pred.predict(trace, t);
    se += (p.mean - trace.frames[t].demand).squaredNorm();
    out.per_location_std += p.std.cwiseProduct(p.std);
  }
  const double slots = static_cast<double>(t_end - t_begin);
  out.mse = se / (slots * static_cast<double>(x_count));
  out.per_location_std = (out.per_location_std / slots).cwiseSqrt();
  return out;
}

}  // namespace steersim
