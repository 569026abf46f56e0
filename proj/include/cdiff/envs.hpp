#pragma once

/**
 * @file envs.hpp
 * @brief 2D point-mass arenas, expert demonstrations and inverse dynamics.
 *
 * States are 4-vectors (px, py, vx, vy). The dynamics are a double
 * integrator: v' = v + u dt, p' = p + v' dt, with positions clamped to the
 * arena box.
 */

#include "cdiff/constraints.hpp"
#include "cdiff/nn.hpp"
#include "cdiff/score.hpp"

#include <variant>
#include <vector>

namespace cdiff {

inline constexpr Index kStateDim = 4;
inline constexpr Index kPosDim = 2;
inline constexpr double kDefaultDt = 0.1;

struct PointMassState {
  Vec position = Vec::Zero(2);
  Vec velocity = Vec::Zero(2);
  bool contact = false;

  Vec packed() const {
    Vec s(kStateDim);
    s << position, velocity;
    return s;
  }

  static PointMassState unpack(const Vec& s) {
    require_dim(kStateDim, s.size(), "point-mass state");
    return {s.head(2), s.tail(2), false};
  }
};

/// Unsafe-region description on positions: the point is safe when raw g <= 0.
/// `motion[k]` is the displacement of the obstacle at env step k; past the end
/// of the table the last entry holds.
struct Obstacle {
  Constraint constraint;
  std::vector<Vec> motion;

  bool moving() const { return !motion.empty(); }
};

struct Arena {
  std::string name = "arena";
  Vec lower = Vec::Zero(2);
  Vec upper = Vec::Ones(2);
  std::vector<Obstacle> obstacles;
  Vec goal = Vec::Zero(2);
  /// Box from which episode starts are drawn (zero initial velocity).
  Vec start_lower = Vec::Zero(2);
  Vec start_upper = Vec::Zero(2);
};

/// Constraint moved by `offset` in position space.
inline Constraint translated(const Constraint& c, const Vec& offset) {
  Constraint out = c;
  std::visit(
      [&](auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Halfspace>) s.b += s.a.dot(offset);
        else if constexpr (std::is_same_v<T, BallInterior> || std::is_same_v<T, BallExterior>) s.center += offset;
        else if constexpr (std::is_same_v<T, AxisBound>) s.bound += offset[s.dim];
        else throw RejectedInput("custom obstacles cannot move");
      },
      out.shape);
  return out;
}

/// Obstacles as they stand at env step tau; no later positions are revealed.
inline std::vector<Constraint> observe_obstacle(const Arena& arena, int tau) {
  require(tau >= 0, "observation time must be non-negative");
  std::vector<Constraint> out;
  for (const auto& ob : arena.obstacles) {
    if (!ob.moving()) {
      out.push_back(ob.constraint);
      continue;
    }
    const std::size_t k = std::min<std::size_t>(std::size_t(tau), ob.motion.size() - 1);
    out.push_back(translated(ob.constraint, ob.motion[k]));
  }
  return out;
}

/// Offsets k * velocity for k = 0..steps.
inline std::vector<Vec> linear_motion(const Vec& velocity, int steps) {
  std::vector<Vec> m;
  for (int k = 0; k <= steps; ++k) m.push_back(double(k) * velocity);
  return m;
}

inline double max_obstacle_value(const std::vector<Constraint>& obstacles, const Vec& position) {
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& c : obstacles) worst = std::max(worst, raw_value(c.shape, position));
  return worst;
}

inline double obstacle_hinge(const std::vector<Constraint>& obstacles, const Vec& position) {
  double total = 0.0;
  for (const auto& c : obstacles) total += positive_part(raw_value(c.shape, position));
  return total;
}

inline void validate_arena(const Arena& a) {
  require(a.lower.size() == 2 && a.upper.size() == 2 && a.goal.size() == 2, "arena vectors must be 2D");
  require((a.lower.array() < a.upper.array()).all(), "arena bounds must have lower < upper");
  require((a.goal.array() > a.lower.array()).all() && (a.goal.array() < a.upper.array()).all(),
          "arena goal must lie inside the bounds");
  for (const auto& ob : a.obstacles) {
    require(shape_dim(ob.constraint.shape) == 2 || shape_dim(ob.constraint.shape) == -1,
            "arena obstacles must act on 2D positions");
    for (const auto& m : ob.motion) require(m.size() == 2, "obstacle motion entries must be 2D");
    if (auto* b = std::get_if<BallExterior>(&ob.constraint.shape))
      require((b->center.array() >= a.lower.array()).all() && (b->center.array() <= a.upper.array()).all(),
              "obstacle center outside the arena");
  }
  for (const auto& c : observe_obstacle(a, 0))
    require(raw_value(c.shape, a.goal) < 0.0, "arena goal must be strictly feasible");
}

// Presets ---------------------------------------------------------------------------

inline Vec vec2(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

/// Corridor walls y >= 0.5, y <= 4.5, x <= 5.5 inside [0,6] x [0,5].
inline std::vector<Obstacle> maze_walls() {
  return {{halfspace(vec2(0, -1), -0.5), {}}, {halfspace(vec2(0, 1), 4.5), {}}, {halfspace(vec2(1, 0), 5.5), {}}};
}

/// Walls only; the arena the expert demonstrations come from.
inline Arena maze_training_arena() {
  Arena a;
  a.name = "maze_training";
  a.lower = vec2(0, 0);
  a.upper = vec2(6, 5);
  a.obstacles = maze_walls();
  a.goal = vec2(4.0, 2.5);
  a.start_lower = vec2(0.3, 1.0);
  a.start_upper = vec2(2.0, 4.0);
  return a;
}

/// Walls plus a disk between the start region and the goal.
inline Arena maze_arena() {
  Arena a = maze_training_arena();
  a.name = "maze";
  a.obstacles.push_back({ball_exterior(vec2(2.3, 2.5), 0.5), {}});
  a.start_lower = vec2(0.3, 1.5);
  a.start_upper = vec2(1.5, 3.5);
  return a;
}

/// A disk that drifts along +x toward the goal from just ahead of the start region.
inline Arena ball_run_arena(int steps = 200) {
  Arena a;
  a.name = "ball_run";
  a.lower = vec2(0, 0);
  a.upper = vec2(6, 5);
  a.obstacles.push_back({ball_exterior(vec2(1.6, 2.5), 0.8), linear_motion(vec2(0.04, 0.0), steps)});
  a.goal = vec2(4.0, 2.5);
  a.start_lower = vec2(0.3, 2.0);
  a.start_upper = vec2(0.8, 3.0);
  return a;
}

inline Arena arena_preset(std::string_view name) {
  if (name == "maze") return maze_arena();
  if (name == "maze_training") return maze_training_arena();
  if (name == "ball_run") return ball_run_arena();
  throw RejectedInput("unknown arena preset '" + std::string(name) + "' (valid: maze, maze_training, ball_run)");
}

inline PointMassState sample_start(const Arena& a, Rng& rng) {
  PointMassState s;
  s.position = vec2(uniform(a.start_lower[0], a.start_upper[0], rng), uniform(a.start_lower[1], a.start_upper[1], rng));
  return s;
}

// Dynamics ----------------------------------------------------------------------------

inline PointMassState env_step(const PointMassState& s, const Vec& u, const Arena& arena, double dt = kDefaultDt) {
  require_dim(2, u.size(), "action");
  require(dt > 0.0, "dt must be positive");
  require_finite(s.position, "state position");
  require_finite(s.velocity, "state velocity");
  require_finite(u, "action");
  PointMassState out;
  out.velocity = s.velocity + u * dt;
  out.position = s.position + out.velocity * dt;
  const Vec clamped = out.position.cwiseMax(arena.lower).cwiseMin(arena.upper);
  out.contact = (clamped.array() != out.position.array()).any();
  out.position = clamped;
  return out;
}

// Inverse dynamics ------------------------------------------------------------------------

enum class IdmChannel { velocity, position };

/// Exact inverse of the double integrator. The velocity channel reads
/// u = (v' - v) / dt; the position channel reads u = (p' - p - v dt) / dt^2,
/// which reproduces the next position instead.
struct AnalyticDoubleIntegrator {
  double dt = kDefaultDt;
  IdmChannel channel = IdmChannel::velocity;
};

/// MLP on [x, x_next - x] with its own input/output normalisation.
struct LearnedIdm {
  Mlp net;
  AffineMap input;   // 8-dim
  AffineMap output;  // 2-dim
};

using InverseDynamicsModel = std::variant<AnalyticDoubleIntegrator, LearnedIdm>;

struct IdmResult {
  Vec u;
  /// False when the position increment disagrees with the velocities.
  bool consistent = true;
};

inline Vec idm_features(const Vec& x, const Vec& x_next) {
  Vec f(2 * kStateDim);
  f << x, x_next - x;
  return f;
}

inline IdmResult inverse_dynamics(const InverseDynamicsModel& model, const Vec& x, const Vec& x_next,
                                  double consistency_tol = 1e-9) {
  require_dim(kStateDim, x.size(), "IDM state");
  require_dim(kStateDim, x_next.size(), "IDM next state");
  require_finite(x, "IDM state");
  require_finite(x_next, "IDM next state");
  if (auto* a = std::get_if<AnalyticDoubleIntegrator>(&model)) {
    const double dt = a->dt;
    const Vec p = x.head(2), v = x.tail(2), p1 = x_next.head(2), v1 = x_next.tail(2);
    const double mismatch = (p1 - p - v1 * dt).cwiseAbs().maxCoeff();
    const bool ok = mismatch <= consistency_tol * std::max(1.0, p1.cwiseAbs().maxCoeff());
    if (a->channel == IdmChannel::velocity) return {(v1 - v) / dt, ok};
    return {(p1 - p - v * dt) / (dt * dt), ok};
  }
  const auto& l = std::get<LearnedIdm>(model);
  return {l.output.to_world(l.net.forward(l.input.to_model(idm_features(x, x_next)))), true};
}

struct IdmTrainingConfig {
  int n_transitions = 10000;
  double validation_fraction = 0.1;
  std::vector<int> hidden = {64, 64};
  Activation activation = Activation::tanh;
  RegressionConfig regression{300, 64, 3e-3, 0.02};
  double max_speed = 1.0;
  double max_action = 2.0;
  double dt = kDefaultDt;
  std::uint64_t seed = 0;
};

struct TrainedIdm {
  LearnedIdm model;
  std::vector<double> train_loss;
  double validation_mse = 0.0;  // in action units
};

/// Random transitions of the double integrator, returned as (features, actions)
/// with one sample per column.
inline std::pair<Mat, Mat> random_transitions(const Arena& arena, int n, double max_speed, double max_action,
                                              double dt, Rng& rng) {
  Mat feats(2 * kStateDim, n), acts(2, n);
  Arena open = arena;  // no clamping: transitions must be exact
  open.lower.setConstant(-1e9);
  open.upper.setConstant(1e9);
  for (int k = 0; k < n; ++k) {
    PointMassState s;
    s.position = vec2(uniform(arena.lower[0], arena.upper[0], rng), uniform(arena.lower[1], arena.upper[1], rng));
    s.velocity = vec2(uniform(-max_speed, max_speed, rng), uniform(-max_speed, max_speed, rng));
    const Vec u = vec2(uniform(-max_action, max_action, rng), uniform(-max_action, max_action, rng));
    feats.col(k) = idm_features(s.packed(), env_step(s, u, open, dt).packed());
    acts.col(k) = u;
  }
  return {feats, acts};
}

inline AffineMap column_stats(const Mat& samples) {
  const Vec mean = samples.rowwise().mean();
  Vec scale = ((samples.colwise() - mean).array().square().rowwise().mean()).sqrt();
  for (Index k = 0; k < scale.size(); ++k)
    if (!(scale[k] > 1e-8)) scale[k] = 1.0;
  return {mean, scale};
}

inline TrainedIdm train_idm(const Arena& arena, const IdmTrainingConfig& cfg) {
  require(cfg.n_transitions >= 2, "IDM training needs at least two transitions");
  Rng rng = make_rng(cfg.seed);
  auto [feats, acts] = random_transitions(arena, cfg.n_transitions, cfg.max_speed, cfg.max_action, cfg.dt, rng);
  const Index n_val = Index(std::floor(cfg.validation_fraction * cfg.n_transitions));
  const Index n_train = cfg.n_transitions - n_val;

  TrainedIdm out;
  out.model.input = column_stats(feats.leftCols(n_train));
  out.model.output = column_stats(acts.leftCols(n_train));
  auto normalise = [](const AffineMap& m, const Mat& x) {
    return Mat((x.colwise() - m.offset).array().colwise() / m.scale.array());
  };
  std::vector<int> dims{int(2 * kStateDim)};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(2);
  out.model.net = Mlp::glorot(dims, cfg.activation, rng);
  out.train_loss = fit_regression(out.model.net, normalise(out.model.input, feats.leftCols(n_train)),
                                  normalise(out.model.output, acts.leftCols(n_train)), cfg.regression, rng);
  if (n_val > 0) {
    double sse = 0.0;
    for (Index k = n_train; k < cfg.n_transitions; ++k) {
      const Vec u = inverse_dynamics(out.model, feats.col(k).head(kStateDim),
                                     feats.col(k).head(kStateDim) + feats.col(k).tail(kStateDim))
                        .u;
      sse += (u - acts.col(k)).squaredNorm();
    }
    out.validation_mse = sse / double(2 * n_val);
  }
  return out;
}

// Expert demonstrations ----------------------------------------------------------------

struct ExpertConfig {
  int n_trajectories = 2000;
  int horizon = 64;
  double kp = 2.0;
  double kd = 1.0;
  double dt = kDefaultDt;
  double max_start_speed = 0.3;
  /// A trajectory counts as reaching the goal within this distance.
  double goal_tolerance = 0.15;
  /// Intermediate targets visited in order before the goal.
  std::vector<Vec> waypoints;
  double waypoint_radius = 0.3;
  int max_retries = 100;
  std::uint64_t seed = 0;
};

/// Proportional-derivative controller toward the active waypoint.
inline RowMat expert_rollout(const Arena& arena, const PointMassState& start, const ExpertConfig& cfg) {
  RowMat traj(cfg.horizon + 1, kStateDim);
  PointMassState s = start;
  traj.row(0) = s.packed().transpose();
  std::size_t wp = 0;
  for (int k = 0; k < cfg.horizon; ++k) {
    while (wp < cfg.waypoints.size() && (cfg.waypoints[wp] - s.position).norm() <= cfg.waypoint_radius) ++wp;
    const Vec& target = wp < cfg.waypoints.size() ? cfg.waypoints[wp] : arena.goal;
    const Vec u = cfg.kp * (target - s.position) - cfg.kd * s.velocity;
    s = env_step(s, u, arena, cfg.dt);
    traj.row(k + 1) = s.packed().transpose();
  }
  return traj;
}

inline bool trajectory_feasible(const Arena& arena, const RowMat& traj) {
  const auto obstacles = observe_obstacle(arena, 0);
  for (Index k = 0; k < traj.rows(); ++k)
    if (max_obstacle_value(obstacles, traj.row(k).head(2).transpose()) > 0.0) return false;
  return true;
}

/// Demonstrations from random feasible starts; failed or unsafe rollouts are
/// redrawn up to max_retries times per trajectory.
inline ExpertDataset generate_expert_data(const Arena& arena, const ExpertConfig& cfg) {
  require(cfg.n_trajectories >= 1, "expert data needs at least one trajectory");
  require(cfg.horizon >= 1, "expert horizon must be positive");
  validate_arena(arena);
  ExpertDataset ds;
  ds.trajectories.reserve(cfg.n_trajectories);
  for (int i = 0; i < cfg.n_trajectories; ++i) {
    Rng rng = make_rng(split_seed(cfg.seed, std::uint64_t(i)));
    bool done = false;
    for (int attempt = 0; attempt < cfg.max_retries && !done; ++attempt) {
      PointMassState s;
      s.position = vec2(uniform(arena.start_lower[0], arena.start_upper[0], rng),
                        uniform(arena.start_lower[1], arena.start_upper[1], rng));
      s.velocity = vec2(uniform(-cfg.max_start_speed, cfg.max_start_speed, rng),
                        uniform(-cfg.max_start_speed, cfg.max_start_speed, rng));
      RowMat traj = expert_rollout(arena, s, cfg);
      const double final_dist = (traj.row(cfg.horizon).head(2).transpose() - arena.goal).norm();
      if (final_dist <= cfg.goal_tolerance && trajectory_feasible(arena, traj)) {
        ds.trajectories.push_back(std::move(traj));
        done = true;
      }
    }
    if (!done)
      throw std::runtime_error("expert controller failed to produce trajectory " + std::to_string(i) + " within " +
                               std::to_string(cfg.max_retries) + " attempts");
  }
  compute_stats(ds);
  return ds;
}

}  // namespace cdiff
