#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <iostream>
#include <numeric>
#include <random>
#include <vector>

#include "steersim/common.hpp"

namespace steersim {

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; big-endian hosts are not supported");

// Gate row blocks in the stacked 4H pre-activation: input, forget, output, candidate.
enum : long { kGateI = 0, kGateF = 1, kGateO = 2, kGateG = 3 };

struct LstmLayerParams {
  Eigen::MatrixXd w_in;   // 4H x in
  Eigen::MatrixXd w_rec;  // 4H x H
  Eigen::VectorXd bias;   // 4H
};

struct LstmParams {
  long input_dim = 0;
  long output_dim = 0;
  std::vector<long> hidden_dims;
  std::vector<LstmLayerParams> layers;
  Eigen::MatrixXd w_out;  // out x H_last
  Eigen::VectorXd b_out;  // out

  /// Uniform +-1/sqrt(fan_in) init; forget-gate bias starts at 1.
  static LstmParams init(long input_dim, std::vector<long> hidden_dims, long output_dim,
                         std::uint64_t seed) {
    if (input_dim < 1 || output_dim < 1 || hidden_dims.empty())
      throw ConfigError("LstmParams: dimensions must be >= 1");
    LstmParams p;
    p.input_dim = input_dim;
    p.output_dim = output_dim;
    p.hidden_dims = std::move(hidden_dims);
    std::mt19937_64 rng(seed);
    auto fill = [&rng](Eigen::Ref<Eigen::MatrixXd> m, long fan_in) {
      std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(static_cast<double>(fan_in)),
                                                  1.0 / std::sqrt(static_cast<double>(fan_in)));
      for (long i = 0; i < m.rows(); ++i)
        for (long j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
    };
    long in = input_dim;
    for (long h : p.hidden_dims) {
      LstmLayerParams layer;
      layer.w_in.resize(4 * h, in);
      layer.w_rec.resize(4 * h, h);
      layer.bias = Eigen::VectorXd::Zero(4 * h);
      fill(layer.w_in, in);
      fill(layer.w_rec, h);
      layer.bias.segment(kGateF * h, h).setOnes();
      p.layers.push_back(std::move(layer));
      in = h;
    }
    p.w_out.resize(output_dim, in);
    p.b_out = Eigen::VectorXd::Zero(output_dim);
    fill(p.w_out, in);
    return p;
  }

  long num_coeffs() const {
    long n = 0;
    for (const auto& l : layers) n += l.w_in.size() + l.w_rec.size() + l.bias.size();
    return n + w_out.size() + b_out.size();
  }

  void to_vector(Eigen::VectorXd& v) const {
    v.resize(num_coeffs());
    long pos = 0;
    auto put = [&](const double* data, long n) {
      std::copy(data, data + n, v.data() + pos);
      pos += n;
    };
    for (const auto& l : layers) {
      put(l.w_in.data(), l.w_in.size());
      put(l.w_rec.data(), l.w_rec.size());
      put(l.bias.data(), l.bias.size());
    }
    put(w_out.data(), w_out.size());
    put(b_out.data(), b_out.size());
  }

  void from_vector(const Eigen::VectorXd& v) {
    long pos = 0;
    auto take = [&](double* data, long n) {
      std::copy(v.data() + pos, v.data() + pos + n, data);
      pos += n;
    };
    for (auto& l : layers) {
      take(l.w_in.data(), l.w_in.size());
      take(l.w_rec.data(), l.w_rec.size());
      take(l.bias.data(), l.bias.size());
    }
    take(w_out.data(), w_out.size());
    take(b_out.data(), b_out.size());
  }
};

struct LstmState {
  std::vector<Eigen::VectorXd> h;  // per layer
  std::vector<Eigen::VectorXd> c;
};

namespace detail {

inline Eigen::ArrayXd sigmoid(const Eigen::ArrayXd& z) { return 1.0 / (1.0 + (-z).exp()); }

struct LayerCache {
  Eigen::MatrixXd x;   // in x T, layer input
  Eigen::MatrixXd i, f, o, g, c, th;  // H x T
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Eigen::MatrixXd outputs;  // T x out
};

inline void lstm_forward_cached(const LstmParams& p, const Eigen::MatrixXd& sequence,
                                ForwardCache& cache) {
  const long t_len = sequence.rows();
  if (t_len < 1) throw ConfigError("lstm_forward: sequence must have length >= 1");
  require_dim(sequence.cols() == p.input_dim, "input_dim", p.input_dim, sequence.cols());

  const long num_layers = static_cast<long>(p.layers.size());
  cache.layers.resize(num_layers);
  Eigen::MatrixXd below = sequence.transpose();  // in x T
  for (long l = 0; l < num_layers; ++l) {
    const auto& lp = p.layers[l];
    const long h_dim = p.hidden_dims[l];
    auto& lc = cache.layers[l];
    lc.x = below;
    lc.i.resize(h_dim, t_len);
    lc.f.resize(h_dim, t_len);
    lc.o.resize(h_dim, t_len);
    lc.g.resize(h_dim, t_len);
    lc.c.resize(h_dim, t_len);
    lc.th.resize(h_dim, t_len);
    Eigen::MatrixXd h(h_dim, t_len);
    Eigen::VectorXd h_prev = Eigen::VectorXd::Zero(h_dim);
    Eigen::VectorXd c_prev = Eigen::VectorXd::Zero(h_dim);
    for (long t = 0; t < t_len; ++t) {
      Eigen::VectorXd z = lp.w_in * lc.x.col(t) + lp.w_rec * h_prev + lp.bias;
      lc.i.col(t) = sigmoid(z.segment(kGateI * h_dim, h_dim).array());
      lc.f.col(t) = sigmoid(z.segment(kGateF * h_dim, h_dim).array());
      lc.o.col(t) = sigmoid(z.segment(kGateO * h_dim, h_dim).array());
      lc.g.col(t) = z.segment(kGateG * h_dim, h_dim).array().tanh();
      lc.c.col(t) = lc.f.col(t).cwiseProduct(c_prev) + lc.i.col(t).cwiseProduct(lc.g.col(t));
      lc.th.col(t) = lc.c.col(t).array().tanh();
      h.col(t) = lc.o.col(t).cwiseProduct(lc.th.col(t));
      h_prev = h.col(t);
      c_prev = lc.c.col(t);
    }
    below = std::move(h);
  }
  cache.outputs = (p.w_out * below).colwise() + p.b_out;  // out x T
  cache.outputs.transposeInPlace();                        // T x out
}

}  // namespace detail

/// Runs the stacked LSTM over a T x input_dim sequence. Returns T x output_dim
/// dense-layer outputs plus the final hidden/cell state of every layer.
inline std::pair<Eigen::MatrixXd, LstmState> lstm_forward(const LstmParams& p,
                                                          const Eigen::MatrixXd& sequence) {
  detail::ForwardCache cache;
  detail::lstm_forward_cached(p, sequence, cache);
  LstmState state;
  const long t_last = sequence.rows() - 1;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lc = cache.layers[l];
    state.c.push_back(lc.c.col(t_last));
    state.h.push_back(lc.o.col(t_last).cwiseProduct(lc.th.col(t_last)));
  }
  return {cache.outputs, std::move(state)};
}

struct LstmGrads {
  std::vector<LstmLayerParams> layers;  // same shapes as params
  Eigen::MatrixXd w_out;
  Eigen::VectorXd b_out;

  static LstmGrads zeros_like(const LstmParams& p) {
    LstmGrads g;
    for (const auto& l : p.layers) {
      LstmLayerParams z;
      z.w_in = Eigen::MatrixXd::Zero(l.w_in.rows(), l.w_in.cols());
      z.w_rec = Eigen::MatrixXd::Zero(l.w_rec.rows(), l.w_rec.cols());
      z.bias = Eigen::VectorXd::Zero(l.bias.size());
      g.layers.push_back(std::move(z));
    }
    g.w_out = Eigen::MatrixXd::Zero(p.w_out.rows(), p.w_out.cols());
    g.b_out = Eigen::VectorXd::Zero(p.b_out.size());
    return g;
  }

  void accumulate(const LstmGrads& other, double scale) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].w_in += scale * other.layers[l].w_in;
      layers[l].w_rec += scale * other.layers[l].w_rec;
      layers[l].bias += scale * other.layers[l].bias;
    }
    w_out += scale * other.w_out;
    b_out += scale * other.b_out;
  }

  void to_vector(Eigen::VectorXd& v) const {
    long n = w_out.size() + b_out.size();
    for (const auto& l : layers) n += l.w_in.size() + l.w_rec.size() + l.bias.size();
    v.resize(n);
    long pos = 0;
    auto put = [&](const double* data, long count) {
      std::copy(data, data + count, v.data() + pos);
      pos += count;
    };
    for (const auto& l : layers) {
      put(l.w_in.data(), l.w_in.size());
      put(l.w_rec.data(), l.w_rec.size());
      put(l.bias.data(), l.bias.size());
    }
    put(w_out.data(), w_out.size());
    put(b_out.data(), b_out.size());
  }
};

/// Exact analytic backpropagation through time of the mean-squared-error loss
/// L = mean_{t,d} (y - target)^2. Returns the loss and fills grads.
inline double lstm_backward(const LstmParams& p, const Eigen::MatrixXd& sequence,
                            const Eigen::MatrixXd& target, LstmGrads& grads) {
  const long t_len = sequence.rows();
  require_dim(target.rows() == t_len, "target_rows", t_len, target.rows());
  require_dim(target.cols() == p.output_dim, "output_dim", p.output_dim, target.cols());

  detail::ForwardCache cache;
  detail::lstm_forward_cached(p, sequence, cache);
  const double denom = static_cast<double>(t_len) * static_cast<double>(p.output_dim);
  Eigen::MatrixXd diff = cache.outputs - target;  // T x out
  const double loss = diff.squaredNorm() / denom;

  grads = LstmGrads::zeros_like(p);
  const long num_layers = static_cast<long>(p.layers.size());
  Eigen::MatrixXd d_out = (2.0 / denom) * diff.transpose();  // out x T

  std::vector<Eigen::VectorXd> dh_next(num_layers), dc_next(num_layers);
  for (long l = 0; l < num_layers; ++l) {
    dh_next[l] = Eigen::VectorXd::Zero(p.hidden_dims[l]);
    dc_next[l] = Eigen::VectorXd::Zero(p.hidden_dims[l]);
  }

  for (long t = t_len - 1; t >= 0; --t) {
    const auto& top = cache.layers[num_layers - 1];
    Eigen::VectorXd h_top = top.o.col(t).cwiseProduct(top.th.col(t));
    grads.w_out += d_out.col(t) * h_top.transpose();
    grads.b_out += d_out.col(t);
    Eigen::VectorXd carry = p.w_out.transpose() * d_out.col(t);

    for (long l = num_layers - 1; l >= 0; --l) {
      const auto& lc = cache.layers[l];
      const auto& lp = p.layers[l];
      const long h_dim = p.hidden_dims[l];
      Eigen::ArrayXd i = lc.i.col(t).array();
      Eigen::ArrayXd f = lc.f.col(t).array();
      Eigen::ArrayXd o = lc.o.col(t).array();
      Eigen::ArrayXd g = lc.g.col(t).array();
      Eigen::ArrayXd th = lc.th.col(t).array();
      Eigen::VectorXd c_prev =
          t > 0 ? Eigen::VectorXd(lc.c.col(t - 1)) : Eigen::VectorXd::Zero(h_dim);
      Eigen::VectorXd h_prev =
          t > 0 ? Eigen::VectorXd(lc.o.col(t - 1).cwiseProduct(lc.th.col(t - 1)))
                : Eigen::VectorXd::Zero(h_dim);

      Eigen::ArrayXd dh = carry.array() + dh_next[l].array();
      Eigen::ArrayXd dc = dh * o * (1.0 - th.square()) + dc_next[l].array();
      Eigen::ArrayXd dz(4 * h_dim);
      dz.segment(kGateI * h_dim, h_dim) = dc * g.array() * i * (1.0 - i);
      dz.segment(kGateF * h_dim, h_dim) = dc * c_prev.array() * f * (1.0 - f);
      dz.segment(kGateO * h_dim, h_dim) = dh * th * o * (1.0 - o);
      dz.segment(kGateG * h_dim, h_dim) = dc * i.array() * (1.0 - g.square());
      dc_next[l] = (dc * f).matrix();

      Eigen::VectorXd dzv = dz.matrix();
      grads.layers[l].w_in += dzv * lc.x.col(t).transpose();
      grads.layers[l].w_rec += dzv * h_prev.transpose();
      grads.layers[l].bias += dzv;
      dh_next[l] = lp.w_rec.transpose() * dzv;
      if (l > 0) carry = lp.w_in.transpose() * dzv;
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainSample {
  Eigen::MatrixXd input;   // T x input_dim
  Eigen::MatrixXd target;  // T x output_dim
};

struct TrainConfig {
  long window_length = 24;
  long batch_size = 32;
  double learning_rate = 1e-3;
  long max_epochs = 100;
  long patience = 8;          // early stop after this many non-improving epochs
  double grad_clip = 5.0;     // global L2 norm
  double validation_fraction = 0.15;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (window_length < 1 || batch_size < 1 || max_epochs < 1 || patience < 1)
      throw ConfigError("TrainConfig: counts must be >= 1");
    if (learning_rate <= 0 || grad_clip <= 0)
      throw ConfigError("TrainConfig: learning_rate and grad_clip must be > 0");
    if (validation_fraction <= 0 || validation_fraction >= 1)
      throw ConfigError("TrainConfig: validation_fraction must be in (0,1)");
  }
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  long best_epoch = -1;
  double best_val_loss = kInf;
};

/// Mini-batch Adam with gradient-norm clipping and best-validation
/// checkpointing. Deterministic for a fixed seed.
inline std::pair<LstmParams, TrainHistory> train(LstmParams params,
                                                 const std::vector<TrainSample>& dataset,
                                                 const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train: dataset must be non-empty");

  std::mt19937_64 rng(cfg.rng_seed);
  std::vector<long> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  long val_count = static_cast<long>(std::llround(cfg.validation_fraction * dataset.size()));
  val_count = std::min<long>(val_count, static_cast<long>(dataset.size()) - 1);
  std::vector<long> val_idx(idx.begin(), idx.begin() + val_count);
  std::vector<long> train_idx(idx.begin() + val_count, idx.end());

  auto eval_loss = [&](const LstmParams& p, const std::vector<long>& which) {
    if (which.empty()) return kInf;
    double sum = 0.0;
    detail::ForwardCache cache;
    for (long s : which) {
      detail::lstm_forward_cached(p, dataset[s].input, cache);
      sum += (cache.outputs - dataset[s].target).squaredNorm() /
             (dataset[s].target.size());
    }
    return sum / static_cast<double>(which.size());
  };

  Eigen::VectorXd theta;
  params.to_vector(theta);
  Eigen::VectorXd m = Eigen::VectorXd::Zero(theta.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(theta.size());
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;

  TrainHistory history;
  LstmParams best = params;
  long stale = 0;
  LstmGrads batch_grads, sample_grads;
  Eigen::VectorXd flat_grad;

  for (long epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double epoch_loss = 0.0;
    long seen = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(train_idx.size(), start + cfg.batch_size);
      batch_grads = LstmGrads::zeros_like(params);
      double batch_loss = 0.0;
      for (std::size_t s = start; s < stop; ++s) {
        batch_loss += lstm_backward(params, dataset[train_idx[s]].input,
                                    dataset[train_idx[s]].target, sample_grads);
        batch_grads.accumulate(sample_grads, 1.0);
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      batch_loss *= inv;
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: loss became non-finite (learning rate too high?)");
      epoch_loss += batch_loss * static_cast<double>(stop - start);
      seen += static_cast<long>(stop - start);

      batch_grads.to_vector(flat_grad);
      flat_grad *= inv;
      const double norm = flat_grad.norm();
      if (norm > cfg.grad_clip) flat_grad *= cfg.grad_clip / norm;

      ++step;
      m = beta1 * m + (1.0 - beta1) * flat_grad;
      v = beta2 * v + (1.0 - beta2) * flat_grad.cwiseProduct(flat_grad);
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      theta -= (cfg.learning_rate / bc1) *
               (m.array() / ((v.array() / bc2).sqrt() + eps)).matrix();
      params.from_vector(theta);
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(std::max<long>(seen, 1)));

    const double val = val_idx.empty() ? history.train_loss.back() : eval_loss(params, val_idx);
    if (!std::isfinite(val))
      throw std::runtime_error("train: validation loss became non-finite");
    history.val_loss.push_back(val);
    if (val < history.best_val_loss) {
      history.best_val_loss = val;
      history.best_epoch = epoch;
      best = params;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return {std::move(best), std::move(history)};
}

// ---------------------------------------------------------------------------
// Per-feature affine normalization, fitted on training data only.
// ---------------------------------------------------------------------------

struct Normalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // standard deviation floored away from zero

  static Normalizer fit(const std::vector<Eigen::MatrixXd>& rows_list, long dim) {
    Normalizer n;
    n.mean = Eigen::VectorXd::Zero(dim);
    n.scale = Eigen::VectorXd::Zero(dim);
    long count = 0;
    for (const auto& m : rows_list) {
      require_dim(m.cols() == dim, "features", dim, m.cols());
      n.mean += m.colwise().sum().transpose();
      count += m.rows();
    }
    if (count == 0) throw ConfigError("Normalizer: no data");
    n.mean /= static_cast<double>(count);
    for (const auto& m : rows_list)
      n.scale += (m.rowwise() - n.mean.transpose()).array().square().colwise().sum().matrix().transpose();
    n.scale = (n.scale / static_cast<double>(count)).cwiseSqrt();
    for (long i = 0; i < dim; ++i)
      if (n.scale[i] < 1e-12) n.scale[i] = 1.0;
    return n;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& m) const {
    return (m.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }

  Eigen::MatrixXd invert(const Eigen::MatrixXd& m) const {
    return (m.array().rowwise() * scale.transpose().array()).matrix().rowwise() +
           mean.transpose();
  }
};

// ---------------------------------------------------------------------------
// Model files: versioned binary layout, bit-exact round trip.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw IoError("model file: truncated");
  return v;
}
inline void write_doubles(std::ostream& out, const double* data, long n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}
inline void read_doubles(std::istream& in, double* data, long n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("model file: truncated");
}

}  // namespace detail

constexpr std::uint64_t kLstmModelMagic = 0x31304d54534c5453ULL;  // "STLSTM01"

inline void save_model(const LstmParams& p, const Normalizer& in_norm, const Normalizer& out_norm,
                       std::ostream& out) {
  detail::write_u64(out, kLstmModelMagic);
  detail::write_u64(out, static_cast<std::uint64_t>(p.input_dim));
  detail::write_u64(out, static_cast<std::uint64_t>(p.output_dim));
  detail::write_u64(out, p.hidden_dims.size());
  for (long h : p.hidden_dims) detail::write_u64(out, static_cast<std::uint64_t>(h));
  Eigen::VectorXd flat;
  p.to_vector(flat);
  detail::write_u64(out, static_cast<std::uint64_t>(flat.size()));
  detail::write_doubles(out, flat.data(), flat.size());
  detail::write_doubles(out, in_norm.mean.data(), p.input_dim);
  detail::write_doubles(out, in_norm.scale.data(), p.input_dim);
  detail::write_doubles(out, out_norm.mean.data(), p.output_dim);
  detail::write_doubles(out, out_norm.scale.data(), p.output_dim);
}

inline std::tuple<LstmParams, Normalizer, Normalizer> load_model(std::istream& in) {
  if (detail::read_u64(in) != kLstmModelMagic)
    throw IoError("model file: bad magic/version");
  const long input_dim = static_cast<long>(detail::read_u64(in));
  const long output_dim = static_cast<long>(detail::read_u64(in));
  const long num_layers = static_cast<long>(detail::read_u64(in));
  std::vector<long> hidden;
  for (long l = 0; l < num_layers; ++l) hidden.push_back(static_cast<long>(detail::read_u64(in)));
  LstmParams p = LstmParams::init(input_dim, hidden, output_dim, 0);
  Eigen::VectorXd flat(static_cast<long>(detail::read_u64(in)));
  if (flat.size() != p.num_coeffs()) throw IoError("model file: coefficient count mismatch");
  detail::read_doubles(in, flat.data(), flat.size());
  p.from_vector(flat);
  Normalizer in_norm, out_norm;
  in_norm.mean.resize(input_dim);
  in_norm.scale.resize(input_dim);
  out_norm.mean.resize(output_dim);
  out_norm.scale.resize(output_dim);
  detail::read_doubles(in, in_norm.mean.data(), input_dim);
  detail::read_doubles(in, in_norm.scale.data(), input_dim);
  detail::read_doubles(in, out_norm.mean.data(), output_dim);
  detail::read_doubles(in, out_norm.scale.data(), output_dim);
  return {std::move(p), std::move(in_norm), std::move(out_norm)};
}

}  // namespace steersim
