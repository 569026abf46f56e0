#pragma once

/**
 * @file score.hpp
 * @brief Score functions for the reverse chain.
 *
 * Analytic targets (diagonal Gaussian, Gaussian mixture) return the exact
 * gradient of the log density and ignore the diffusion time. The learned
 * variant wraps a noise-prediction network eps(x_t, t/T) and turns it into a
 * score through -eps / sqrt(1 - alpha_bar_t).
 *
 * A learned model works in normalised coordinates; `coords` maps them back to
 * the data space so constraints can be evaluated on physical quantities.
 */

#include "cdiff/nn.hpp"
#include "cdiff/schedule.hpp"

#include <variant>
#include <vector>

namespace cdiff {

/// Per-coordinate affine map between model space y and world space x:
/// x = offset + scale .* y.
struct AffineMap {
  Vec offset;
  Vec scale;

  static AffineMap identity(Index dim) { return {Vec::Zero(dim), Vec::Ones(dim)}; }

  Index dim() const { return offset.size(); }
  Vec to_world(const Vec& y) const { return offset + scale.cwiseProduct(y); }
  Vec to_model(const Vec& x) const { return (x - offset).cwiseQuotient(scale); }
  bool is_identity() const {
    return (offset.array() == 0.0).all() && (scale.array() == 1.0).all();
  }
};

struct AnalyticGaussian {
  Vec mean;
  Vec variance;  // diagonal covariance
};

struct AnalyticGmm {
  Vec weights;
  std::vector<AnalyticGaussian> components;
};

struct LearnedNoise {
  Mlp net;               // input: [x_t ; t/T], output: predicted noise
  NoiseSchedule schedule;
  AffineMap coords;      // model space -> data space
};

using ScoreModel = std::variant<AnalyticGaussian, AnalyticGmm, LearnedNoise>;

inline AnalyticGaussian make_gaussian(Vec mean, Vec variance) {
  require_dim(mean.size(), variance.size(), "gaussian variance");
  require((variance.array() > 0.0).all(), "gaussian variances must be strictly positive");
  return {std::move(mean), std::move(variance)};
}

inline AnalyticGaussian standard_gaussian(Index dim) { return {Vec::Zero(dim), Vec::Ones(dim)}; }

inline AnalyticGmm make_gmm(Vec weights, std::vector<AnalyticGaussian> components) {
  require_dim(weights.size(), Index(components.size()), "gmm weights");
  require(!components.empty(), "gmm needs at least one component");
  require((weights.array() >= 0.0).all(), "gmm weights must be non-negative");
  require(std::abs(weights.sum() - 1.0) <= 1e-12, "gmm weights must sum to 1");
  for (const auto& c : components) {
    require_dim(components.front().mean.size(), c.mean.size(), "gmm component mean");
    make_gaussian(c.mean, c.variance);
  }
  return {std::move(weights), std::move(components)};
}

inline Index model_dim(const ScoreModel& m) {
  if (auto* g = std::get_if<AnalyticGaussian>(&m)) return g->mean.size();
  if (auto* g = std::get_if<AnalyticGmm>(&m)) return g->components.front().mean.size();
  return std::get<LearnedNoise>(m).net.output_dim();
}

/// Map from the model's sampling space to data space.
inline AffineMap model_coords(const ScoreModel& m) {
  if (auto* l = std::get_if<LearnedNoise>(&m)) return l->coords;
  return AffineMap::identity(model_dim(m));
}

namespace detail {

inline double gaussian_log_density(const AnalyticGaussian& g, const Vec& x) {
  const double quad = ((x - g.mean).array().square() / g.variance.array()).sum();
  const double logdet = g.variance.array().log().sum();
  return -0.5 * (quad + logdet + double(x.size()) * std::log(2.0 * M_PI));
}

}  // namespace detail

/// Gradient of log p(x) for an analytic target.
inline Vec analytic_score(const ScoreModel& model, const Vec& x) {
  if (auto* g = std::get_if<AnalyticGaussian>(&model)) {
    require_dim(g->mean.size(), x.size(), "analytic_score point");
    return -(x - g->mean).cwiseQuotient(g->variance);
  }
  if (auto* m = std::get_if<AnalyticGmm>(&model)) {
    require_dim(m->components.front().mean.size(), x.size(), "analytic_score point");
    const Index K = Index(m->components.size());
    Vec logw(K);
    for (Index k = 0; k < K; ++k)
      logw[k] = std::log(m->weights[k]) + detail::gaussian_log_density(m->components[k], x);
    const double mx = logw.maxCoeff();
    Vec resp = (logw.array() - mx).exp();
    resp /= resp.sum();
    Vec s = Vec::Zero(x.size());
    for (Index k = 0; k < K; ++k) {
      const auto& c = m->components[k];
      s -= resp[k] * (x - c.mean).cwiseQuotient(c.variance);
    }
    return s;
  }
  throw RejectedInput("analytic_score requires an analytic score model");
}

/// Tweedie conversion of a noise prediction into a score.
inline Vec score_from_noise(const Vec& eps, int t, const NoiseSchedule& schedule) {
  return -eps / std::sqrt(1.0 - schedule.alpha_bar(t));
}

/// Score of the model at diffusion index t for every row of `x` (N x d).
/// Analytic models are time-independent.
inline Mat model_score(const ScoreModel& model, const Mat& x, int t) {
  if (auto* l = std::get_if<LearnedNoise>(&model)) {
    require_dim(l->net.output_dim(), x.cols(), "model_score particle");
    const int T = l->schedule.T();
    Mat in(x.cols() + 1, x.rows());
    in.topRows(x.cols()) = x.transpose();
    in.row(x.cols()).setConstant(double(l->schedule.check(t)) / double(T));
    Mat eps = l->net.forward_batch(in).transpose();
    return -eps / std::sqrt(1.0 - l->schedule.alpha_bar(t));
  }
  Mat out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) out.row(i) = analytic_score(model, x.row(i).transpose()).transpose();
  return out;
}

inline Vec model_score(const ScoreModel& model, const Vec& x, int t) {
  return model_score(model, Mat(x.transpose()), t).row(0).transpose();
}

/// Marginal of a Gaussian target after forward diffusion to index t.
inline AnalyticGaussian diffused(const AnalyticGaussian& g, int t, const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  return {std::sqrt(ab) * g.mean, (ab * g.variance.array() + (1.0 - ab)).matrix()};
}

/// Posterior-mean noise E[eps | x_t] for Gaussian data.
inline Vec exact_noise_prediction(const AnalyticGaussian& g, const Vec& x, int t,
                                  const NoiseSchedule& schedule) {
  const auto m = diffused(g, t, schedule);
  return std::sqrt(1.0 - schedule.alpha_bar(t)) * (x - m.mean).cwiseQuotient(m.variance);
}

struct Diffused {
  Vec x_t;
  Vec eps;
};

/// Closed-form forward marginal: x_t = sqrt(ab) x0 + sqrt(1 - ab) eps.
inline Diffused forward_diffuse(const Vec& x0, int t, const NoiseSchedule& schedule, Rng& rng) {
  const double ab = schedule.alpha_bar(t);
  Vec eps = standard_normal(x0.size(), rng);
  return {std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps, std::move(eps)};
}

// ---------------------------------------------------------------------------
// Expert data

/// Trajectories of equal length; each is (horizon + 1) x state_dim, one state
/// per row. Normalisation statistics are per state dimension, pooled over time.
struct ExpertDataset {
  std::vector<RowMat> trajectories;
  Vec mean;
  Vec scale;

  Index size() const { return Index(trajectories.size()); }
  Index state_dim() const { return trajectories.empty() ? 0 : trajectories.front().cols(); }
  Index n_states() const { return trajectories.empty() ? 0 : trajectories.front().rows(); }
  Index horizon() const { return n_states() - 1; }
  Index flat_dim() const { return state_dim() * n_states(); }

  /// Expand per-state statistics into a flat-trajectory map.
  AffineMap coords() const {
    AffineMap m{Vec(flat_dim()), Vec(flat_dim())};
    for (Index s = 0; s < n_states(); ++s) {
      m.offset.segment(s * state_dim(), state_dim()) = mean;
      m.scale.segment(s * state_dim(), state_dim()) = scale;
    }
    return m;
  }

  Vec flat(Index i) const {
    const RowMat& tr = trajectories[i];
    return Eigen::Map<const Vec>(tr.data(), tr.size());
  }
};

inline RowMat unflatten(const Vec& flat, Index state_dim) {
  require(state_dim > 0 && flat.size() % state_dim == 0, "flat trajectory length is not a multiple of state_dim");
  return Eigen::Map<const RowMat>(flat.data(), flat.size() / state_dim, state_dim);
}

inline Vec flatten(const RowMat& traj) { return Eigen::Map<const Vec>(traj.data(), traj.size()); }

/// Fill in normalisation statistics. Dimensions with (near) zero spread get scale 1.
inline void compute_stats(ExpertDataset& ds) {
  require(ds.size() > 0, "expert dataset is empty");
  const Index d = ds.state_dim();
  for (const auto& tr : ds.trajectories) {
    require_dim(d, tr.cols(), "trajectory state dimension");
    require_dim(ds.n_states(), tr.rows(), "trajectory horizon");
  }
  Vec sum = Vec::Zero(d), sq = Vec::Zero(d);
  double n = 0;
  for (const auto& tr : ds.trajectories) {
    sum += tr.colwise().sum().transpose();
    n += double(tr.rows());
  }
  ds.mean = sum / n;
  for (const auto& tr : ds.trajectories)
    sq += (tr.rowwise() - ds.mean.transpose()).array().square().colwise().sum().matrix().transpose();
  ds.scale = (sq / n).cwiseSqrt();
  for (Index k = 0; k < d; ++k)
    if (!(ds.scale[k] > 1e-8)) ds.scale[k] = 1.0;
}

struct ScoreTrainingConfig {
  std::vector<int> hidden = {256, 256};
  Activation activation = Activation::tanh;
  int epochs = 150;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double final_lr_fraction = 0.1;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct TrainedScore {
  LearnedNoise model;
  std::vector<double> train_loss;       // one entry per epoch
  std::vector<double> validation_loss;  // one entry per epoch
};

/// Fit eps_theta to the denoising objective E|eps - eps_theta(sqrt(ab) x0 + sqrt(1-ab) eps, t)|^2
/// on normalised, flattened trajectories.
inline TrainedScore train_score(const ExpertDataset& dataset, const NoiseSchedule& schedule,
                                const ScoreTrainingConfig& cfg) {
  require(dataset.size() > 0, "train_score: expert dataset is empty");
  require(dataset.mean.size() == dataset.state_dim() && dataset.scale.size() == dataset.state_dim(),
          "train_score: dataset normalisation statistics missing");
  require(cfg.epochs >= 0 && cfg.batch_size > 0, "train_score: invalid epochs/batch_size");

  Rng rng = make_rng(cfg.seed);
  const Index D = dataset.flat_dim();
  const int T = schedule.T();
  AffineMap coords = dataset.coords();

  std::vector<int> dims{int(D + 1)};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(int(D));
  TrainedScore out{{Mlp::glorot(dims, cfg.activation, rng), schedule, coords}, {}, {}};
  Mlp& net = out.model.net;

  Mat data(D, dataset.size());
  for (Index i = 0; i < dataset.size(); ++i) data.col(i) = coords.to_model(dataset.flat(i));

  // Deterministic split; the tail of a shuffled index list is held out.
  std::vector<Index> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  Index n_val = Index(std::floor(cfg.validation_fraction * double(idx.size())));
  if (idx.size() < 2) n_val = 0;
  std::vector<Index> train(idx.begin(), idx.end() - n_val), val(idx.end() - n_val, idx.end());

  std::uniform_int_distribution<int> tdist(0, T - 1);
  auto noisy_batch = [&](const std::vector<Index>& ids, Index from, Index n, Mat& in, Mat& eps) {
    in.resize(D + 1, n);
    eps = standard_normal(n, D, rng).transpose();
    for (Index k = 0; k < n; ++k) {
      const int t = tdist(rng);
      const double ab = schedule.alpha_bar(t);
      in.col(k).head(D) = std::sqrt(ab) * data.col(ids[from + k]) + std::sqrt(1.0 - ab) * eps.col(k);
      in(D, k) = double(t) / double(T);
    }
  };

  Mat val_in, val_eps;
  if (n_val > 0) noisy_batch(val, 0, n_val, val_in, val_eps);

  AdamState adam(net.num_parameters(), cfg.learning_rate);
  const double decay = cfg.epochs > 1 ? std::pow(cfg.final_lr_fraction, 1.0 / (cfg.epochs - 1)) : 1.0;
  Mat in, eps;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double total = 0.0;
    for (Index start = 0; start < Index(train.size()); start += cfg.batch_size) {
      const Index n = std::min<Index>(cfg.batch_size, Index(train.size()) - start);
      noisy_batch(train, start, n, in, eps);
      Mat resid = net.forward_batch(in) - eps;
      total += resid.squaredNorm();
      Mat grad_out = (2.0 / double(n * D)) * resid;
      adam_step(net.parameters(), mlp_backward_batch(net, in, grad_out).params, adam);
    }
    out.train_loss.push_back(total / double(train.size() * D));
    out.validation_loss.push_back(n_val > 0 ? (net.forward_batch(val_in) - val_eps).squaredNorm() / double(n_val * D)
                                            : out.train_loss.back());
    adam.learning_rate *= decay;
  }
  return out;
}

}  // namespace cdiff
