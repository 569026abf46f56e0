#pragma once

/**
 * @file samplers.hpp
 * @brief Reverse-diffusion steps written as Langevin updates, plus the three
 * constrained variants.
 *
 * Every step has the form
 *
 *     x' = x + (beta/2) * (score(x) - multiplier^T grad g(x)) + sqrt(beta) * z
 *
 * with the multiplier fixed at zero for the unconstrained and projected
 * samplers. Particles are rows of an N x d matrix in the score model's
 * coordinates; constraints are always evaluated in data coordinates through
 * the model's affine map.
 *
 * Time convention: a step with schedule index t in [0, T) moves the batch
 * from diffusion time t + 1 to t, using beta_t and the score at index t.
 * The last step (t = 0) adds no noise unless configured otherwise.
 */

#include "cdiff/constraints.hpp"
#include "cdiff/score.hpp"

#include <chrono>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cdiff {

enum class Method { unconstrained, projected, primal_dual, alm };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::unconstrained: return "unconstrained";
    case Method::projected: return "projected";
    case Method::primal_dual: return "pd";
    case Method::alm: return "alm";
  }
  return "unconstrained";
}

inline const char* method_names() { return "unconstrained, projected, pd, alm"; }

inline Method method_from_string(std::string_view s) {
  if (s == "unconstrained") return Method::unconstrained;
  if (s == "projected") return Method::projected;
  if (s == "pd" || s == "primal_dual") return Method::primal_dual;
  if (s == "alm") return Method::alm;
  throw RejectedInput("unknown method '" + std::string(s) + "' (valid: " + method_names() + ")");
}

enum class Expectation { batch_mean, per_particle };

struct SamplerConfig {
  Method method = Method::unconstrained;
  Expectation expectation = Expectation::batch_mean;
  /// eta_lambda = dual_step_factor * beta_t unless `dual_step` is set.
  double dual_step_factor = 100.0;
  std::optional<double> dual_step;
  double rho0 = 1.0;
  double penalty_growth = 1.05;
  double rho_cap = 1e6;
  bool suppress_final_noise = true;
  /// Keep the best projection iterate (and flag it) instead of throwing.
  bool projection_best_effort = false;
  ProjectionOptions projection;

  double eta_lambda(double beta) const { return dual_step ? *dual_step : dual_step_factor * beta; }

  void validate() const {
    if (method == Method::primal_dual) require(eta_lambda(1.0) > 0.0, "dual step must be positive");
    if (method == Method::alm) {
      require(rho0 > 0.0, "ALM needs rho0 > 0");
      require(penalty_growth > 1.0, "ALM penalty growth c must exceed 1");
      require(rho_cap >= rho0, "ALM rho cap must be at least rho0");
    }
  }
};

struct ParticleBatch {
  Mat particles;  // N x d
  int t = 0;      // diffusion time in [0, T]

  Index size() const { return particles.rows(); }
  Index dim() const { return particles.cols(); }
};

/// Multipliers, slacks and penalty for one expectation estimate.
struct DualState {
  Vec lambda;
  Vec slack;
  double rho = 1.0;
  bool rho_capped = false;

  static DualState fresh(Index m, double rho0 = 1.0) { return {Vec::Zero(m), Vec::Zero(m), rho0, false}; }
};

/// Known coordinates (model space) overwritten after every step.
struct Conditioning {
  std::vector<Index> indices;
  std::vector<double> values;

  bool empty() const { return indices.empty(); }

  void pin(Index i, double v) {
    indices.push_back(i);
    values.push_back(v);
  }

  void apply(Mat& particles) const {
    for (std::size_t k = 0; k < indices.size(); ++k) particles.col(indices[k]).setConstant(values[k]);
  }

  std::vector<bool> frozen(Index dim) const {
    if (indices.empty()) return {};
    std::vector<bool> mask(dim, false);
    for (Index i : indices) mask[i] = true;
    return mask;
  }
};

/// Everything a step needs besides the batch and the duals.
struct ChainProblem {
  const ScoreModel& model;
  const NoiseSchedule& schedule;
  const ConstraintSet& constraints;
  Conditioning conditioning = {};
};

/// A constraint set seen from model coordinates.
class ModelConstraints {
 public:
  ModelConstraints(const ConstraintSet& set, AffineMap map) : set_(set), map_(std::move(map)) {
    set_.check_dim(map_.dim());
  }

  Index size() const { return set_.size(); }
  const AffineMap& map() const { return map_; }
  const ConstraintSet& set() const { return set_; }

  Vec values(const Vec& y) const { return set_.values(map_.to_world(y)); }
  Vec raw_values(const Vec& y) const { return set_.raw_values(map_.to_world(y)); }
  Vec weighted_gradient(const Vec& y, const Vec& w) const {
    return set_.weighted_gradient(map_.to_world(y), w).cwiseProduct(map_.scale);
  }

  ProjectionResult project(const Vec& y, const ProjectionOptions& opt) const {
    auto r = project_best(set_, map_.to_world(y), opt);
    r.point = map_.to_model(r.point);
    return r;
  }

 private:
  const ConstraintSet& set_;
  AffineMap map_;
};

// Elementary updates -----------------------------------------------------------

/// SGLD: x + (eps/2) * score + sqrt(eps) * z.
inline Vec sgld_step(const Vec& x, const Vec& score, double eps, const Vec& z) {
  require(eps > 0.0, "SGLD step size must be positive");
  require_dim(x.size(), score.size(), "sgld score");
  require_dim(x.size(), z.size(), "sgld noise");
  require_finite(score, "sgld score");
  return x + 0.5 * eps * score + std::sqrt(eps) * z;
}

template <typename ScoreFn>
Vec sgld_step(const Vec& x, ScoreFn&& score, double eps, Rng& rng) {
  return sgld_step(x, Vec(score(x)), eps, standard_normal(x.size(), rng));
}

/// Noise for one step: standard normal, or zero at the final step.
inline Mat step_noise(Index n, Index d, int t, bool suppress_final, Rng& rng) {
  Mat z = standard_normal(n, d, rng);
  if (t == 0 && suppress_final) z.setZero();
  return z;
}

/// Langevin-form reverse update x + (beta_t/2) * drift + sqrt(beta_t) * z.
inline Mat langevin_update(const Mat& x, const Mat& drift, double beta, const Mat& noise) {
  require_finite(drift, "reverse-step drift");
  return x + 0.5 * beta * drift + std::sqrt(beta) * noise;
}

inline Mat ddpm_reverse_step(const Mat& x, const ScoreModel& model, int t, const NoiseSchedule& schedule,
                             const Mat& noise) {
  require_dim(x.rows(), noise.rows(), "reverse-step noise rows");
  require_dim(x.cols(), noise.cols(), "reverse-step noise cols");
  return langevin_update(x, model_score(model, x, t), schedule.beta(t), noise);
}

inline Mat ddpm_reverse_step(const Mat& x, const ScoreModel& model, int t, const NoiseSchedule& schedule,
                             Rng& rng, bool suppress_final_noise = true) {
  return ddpm_reverse_step(x, model, t, schedule, step_noise(x.rows(), x.cols(), t, suppress_final_noise, rng));
}

// Dual updates -------------------------------------------------------------------

/// [lambda + eta * E[g]]_+
inline Vec pd_dual_update(const Vec& lambda, const Vec& expected_g, double eta) {
  return (lambda + eta * expected_g).cwiseMax(0.0);
}

/// s = [-E[g] - lambda / rho]_+
inline Vec alm_slack(const Vec& expected_g, const Vec& lambda, double rho) {
  return (-expected_g - lambda / rho).cwiseMax(0.0);
}

/// lambda + rho * (E[g] + s); used both as the primal multiplier and as the
/// next dual iterate.
inline Vec alm_multiplier(const Vec& expected_g, const Vec& lambda, double rho, const Vec& slack) {
  return lambda + rho * (expected_g + slack);
}

// Constrained steps ----------------------------------------------------------------

struct StepReport {
  bool projection_failed = false;
  double projection_residual = 0.0;
};

namespace detail {

inline Mat smoothed_values(const ModelConstraints& mc, const Mat& x) {
  Mat g(x.rows(), mc.size());
  for (Index i = 0; i < x.rows(); ++i) g.row(i) = mc.values(x.row(i).transpose()).transpose();
  return g;
}

/// Unconstrained drift minus the multiplier-weighted constraint gradient.
inline Mat multiplier_drift(const ModelConstraints& mc, const Mat& x, const Mat& score,
                            std::span<const Vec> multipliers) {
  Mat drift = score;
  for (Index i = 0; i < x.rows(); ++i) {
    const Vec& w = multipliers.size() == 1 ? multipliers[0] : multipliers[i];
    if (w.size() == 0 || (w.array() == 0.0).all()) continue;
    drift.row(i) -= mc.weighted_gradient(x.row(i).transpose(), w).transpose();
  }
  return drift;
}

inline void check_duals(std::span<DualState> duals, Index n_particles, Index m, Expectation e) {
  const Index expected = e == Expectation::batch_mean ? 1 : n_particles;
  require_dim(expected, Index(duals.size()), "dual state count");
  for (const auto& d : duals) require_dim(m, d.lambda.size(), "lambda dimension");
}

/// Expectation estimate per dual state: the batch mean, or each particle's own value.
inline Vec expectation_for(const Mat& g, Index k, Expectation e) {
  return e == Expectation::batch_mean ? Vec(g.colwise().mean().transpose()) : Vec(g.row(k).transpose());
}

}  // namespace detail

/// Unconstrained reverse step followed by projection of every particle.
inline StepReport projected_step(ParticleBatch& batch, const ChainProblem& p, const SamplerConfig& cfg,
                                 int t, const Mat& noise) {
  batch.particles = ddpm_reverse_step(batch.particles, p.model, t, p.schedule, noise);
  p.conditioning.apply(batch.particles);
  batch.t = t;
  StepReport rep;
  if (p.constraints.empty()) return rep;
  ModelConstraints mc(p.constraints, model_coords(p.model));
  ProjectionOptions opt = cfg.projection;
  if (opt.frozen.empty()) opt.frozen = p.conditioning.frozen(batch.dim());
  for (Index i = 0; i < batch.size(); ++i) {
    auto r = mc.project(batch.particles.row(i).transpose(), opt);
    if (!r.feasible) {
      if (!cfg.projection_best_effort) throw InfeasibleProjection(mc.map().to_world(r.point), r.residual);
      rep.projection_failed = true;
      rep.projection_residual = std::max(rep.projection_residual, r.residual);
    }
    batch.particles.row(i) = r.point.transpose();
  }
  return rep;
}

/// Primal step with lambda_t, then lambda_{t-1} = [lambda_t + eta E[g(x_t)]]_+.
inline StepReport primal_dual_step(ParticleBatch& batch, const ChainProblem& p, std::span<DualState> duals,
                                   const SamplerConfig& cfg, int t, const Mat& noise) {
  ModelConstraints mc(p.constraints, model_coords(p.model));
  detail::check_duals(duals, batch.size(), mc.size(), cfg.expectation);
  const double beta = p.schedule.beta(t);
  const Mat g = detail::smoothed_values(mc, batch.particles);

  std::vector<Vec> multipliers;
  for (const auto& d : duals) multipliers.push_back(d.lambda);
  const Mat score = model_score(p.model, batch.particles, t);
  batch.particles = langevin_update(batch.particles, detail::multiplier_drift(mc, batch.particles, score, multipliers),
                                    beta, noise);
  p.conditioning.apply(batch.particles);
  batch.t = t;

  for (std::size_t k = 0; k < duals.size(); ++k)
    duals[k].lambda = pd_dual_update(duals[k].lambda, detail::expectation_for(g, Index(k), cfg.expectation),
                                     cfg.eta_lambda(beta));
  return {};
}

/// Slack, primal, dual and penalty updates in that order.
inline StepReport alm_step(ParticleBatch& batch, const ChainProblem& p, std::span<DualState> duals,
                           const SamplerConfig& cfg, int t, const Mat& noise) {
  ModelConstraints mc(p.constraints, model_coords(p.model));
  detail::check_duals(duals, batch.size(), mc.size(), cfg.expectation);
  const double beta = p.schedule.beta(t);
  const Mat g = detail::smoothed_values(mc, batch.particles);

  std::vector<Vec> multipliers;
  for (std::size_t k = 0; k < duals.size(); ++k) {
    DualState& d = duals[k];
    const Vec eg = detail::expectation_for(g, Index(k), cfg.expectation);
    d.slack = alm_slack(eg, d.lambda, d.rho);
    multipliers.push_back(alm_multiplier(eg, d.lambda, d.rho, d.slack));
  }
  const Mat score = model_score(p.model, batch.particles, t);
  batch.particles = langevin_update(batch.particles, detail::multiplier_drift(mc, batch.particles, score, multipliers),
                                    beta, noise);
  p.conditioning.apply(batch.particles);
  batch.t = t;

  for (std::size_t k = 0; k < duals.size(); ++k) {
    DualState& d = duals[k];
    d.lambda = multipliers[k];
    const double next = cfg.penalty_growth * d.rho;
    if (next > cfg.rho_cap) {
      d.rho = cfg.rho_cap;
      d.rho_capped = true;
    } else {
      d.rho = next;
    }
  }
  return {};
}

// Whole chain --------------------------------------------------------------------------

struct DiagnosticsRecord {
  int t = 0;
  double mean_raw_violation = 0.0;    // mean over particles of max_i g_i (signed)
  double mean_hinge_violation = 0.0;  // mean over particles of sum_i [g_i]_+
  double lambda_norm = 0.0;
  double s_norm = 0.0;
  double rho = 0.0;
  double step_wall_clock_seconds = 0.0;
};

using ChainDiagnostics = std::vector<DiagnosticsRecord>;

inline void write_diagnostics_csv(std::ostream& os, const ChainDiagnostics& diag) {
  os << "t,mean_raw_violation,mean_hinge_violation,lambda_norm,s_norm,rho,step_wall_clock_seconds\n";
  os.precision(17);
  for (const auto& r : diag)
    os << r.t << ',' << r.mean_raw_violation << ',' << r.mean_hinge_violation << ',' << r.lambda_norm << ','
       << r.s_norm << ',' << r.rho << ',' << r.step_wall_clock_seconds << '\n';
}

struct ChainOptions {
  Index n_particles = 1;
  /// Starting particles in model coordinates; drawn from N(0, I) when absent.
  std::optional<Mat> initial;
  /// Incoming dual state (warm start); fresh duals when empty.
  std::vector<DualState> duals;
};

struct ChainResult {
  ParticleBatch batch;
  ChainDiagnostics diagnostics;  // T + 1 records, t = T down to 0
  std::vector<DualState> duals;
  bool rho_capped = false;
  bool projection_failed = false;
  double projection_residual = 0.0;
};

struct Violation {
  double mean_raw = 0.0;
  double mean_hinge = 0.0;
};

/// Mean over particles of the worst raw value and of the summed hinge.
inline Violation batch_violation(const ModelConstraints& mc, const Mat& x) {
  Violation v;
  if (mc.size() == 0 || x.rows() == 0) return v;
  for (Index i = 0; i < x.rows(); ++i) {
    const Vec g = mc.raw_values(x.row(i).transpose());
    v.mean_raw += g.maxCoeff();
    v.mean_hinge += g.cwiseMax(0.0).sum();
  }
  v.mean_raw /= double(x.rows());
  v.mean_hinge /= double(x.rows());
  return v;
}

inline ChainResult run_reverse_chain(const SamplerConfig& cfg, const ChainProblem& p, const ChainOptions& opt,
                                     Rng& rng) {
  cfg.validate();
  require(opt.n_particles >= 1, "chain needs at least one particle");
  const Index d = model_dim(p.model);
  const int T = p.schedule.T();
  if (auto* l = std::get_if<LearnedNoise>(&p.model))
    require(l->schedule.T() == T, "learned model was trained with a different schedule length");
  ModelConstraints mc(p.constraints, model_coords(p.model));

  ChainResult res;
  res.batch.t = T;
  if (opt.initial) {
    require_dim(d, opt.initial->cols(), "initial particles");
    res.batch.particles = *opt.initial;
  } else {
    res.batch.particles = standard_normal(opt.n_particles, d, rng);
  }
  p.conditioning.apply(res.batch.particles);
  const Index N = res.batch.size();

  const Index n_duals = cfg.expectation == Expectation::batch_mean ? 1 : N;
  res.duals = opt.duals;
  if (res.duals.empty()) res.duals.assign(n_duals, DualState::fresh(mc.size(), cfg.rho0));

  auto record = [&](int t, double secs) {
    const Violation v = batch_violation(mc, res.batch.particles);
    DiagnosticsRecord r{t, v.mean_raw, v.mean_hinge, 0.0, 0.0, 0.0, secs};
    for (const auto& du : res.duals) {
      r.lambda_norm += du.lambda.norm();
      r.s_norm += du.slack.norm();
      r.rho += du.rho;
    }
    r.lambda_norm /= double(res.duals.size());
    r.s_norm /= double(res.duals.size());
    r.rho /= double(res.duals.size());
    res.diagnostics.push_back(r);
  };
  record(T, 0.0);

  for (int t = T - 1; t >= 0; --t) {
    const Mat noise = step_noise(N, d, t, cfg.suppress_final_noise, rng);
    const auto start = std::chrono::steady_clock::now();
    StepReport rep;
    switch (cfg.method) {
      case Method::unconstrained:
        res.batch.particles = ddpm_reverse_step(res.batch.particles, p.model, t, p.schedule, noise);
        p.conditioning.apply(res.batch.particles);
        res.batch.t = t;
        break;
      case Method::projected: rep = projected_step(res.batch, p, cfg, t, noise); break;
      case Method::primal_dual: rep = primal_dual_step(res.batch, p, res.duals, cfg, t, noise); break;
      case Method::alm: rep = alm_step(res.batch, p, res.duals, cfg, t, noise); break;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (rep.projection_failed) {
      res.projection_failed = true;
      res.projection_residual = std::max(res.projection_residual, rep.projection_residual);
    }
    require_finite(res.batch.particles, "reverse chain particles");
    record(t, secs);
  }
  for (const auto& du : res.duals) res.rho_capped = res.rho_capped || du.rho_capped;
  return res;
}

/// Particles mapped to data coordinates.
inline Mat to_world(const ScoreModel& model, const Mat& particles) {
  const AffineMap m = model_coords(model);
  Mat out(particles.rows(), particles.cols());
  for (Index i = 0; i < particles.rows(); ++i) out.row(i) = m.to_world(particles.row(i).transpose()).transpose();
  return out;
}

}  // namespace cdiff
