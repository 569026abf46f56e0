#pragma once

/**
 * @file planner.hpp
 * @brief Receding-horizon safe planning: sample a trajectory under obstacle and
 * DCBF constraints, extract the first action with an inverse dynamics model,
 * execute it, repeat.
 */

#include "cdiff/envs.hpp"
#include "cdiff/samplers.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ostream>
#include <thread>

namespace cdiff {

struct EpisodeConfig {
  SamplerConfig sampler = default_planner_sampler();
  /// Smoothing applied to obstacle and DCBF terms inside the sampler.
  Smoothing smoothing = Smoothing::hinge;
  double dcbf_alpha = 0.3;
  bool use_dcbf = true;
  int episode_length = 40;
  int replan_every = 1;
  bool reset_duals = true;
  bool pin_start = true;
  bool pin_goal = true;
  double dt = kDefaultDt;
  InverseDynamicsModel idm = AnalyticDoubleIntegrator{kDefaultDt, IdmChannel::position};
  /// Also sample the shared-seed unconstrained plan for the distance metric.
  bool compute_distance = true;

  static SamplerConfig default_planner_sampler() {
    SamplerConfig s;
    s.expectation = Expectation::per_particle;
    s.projection_best_effort = true;
    return s;
  }

  void validate() const {
    sampler.validate();
    require(episode_length >= 0, "episode length must be non-negative");
    require(replan_every >= 1, "replan interval must be at least 1");
    require(dcbf_alpha > 0.0 && dcbf_alpha <= 1.0, "DCBF alpha must lie in (0, 1]");
    require(dt > 0.0, "dt must be positive");
  }
};

struct PlanResult {
  RowMat trajectory;  // (H+1) x 4, data coordinates
  ChainDiagnostics diagnostics;
  std::vector<DualState> duals;
  double dcbf_residual = -std::numeric_limits<double>::infinity();
  double planning_violation = 0.0;  // sum over states of the obstacle hinge
  Vec action;
  bool idm_consistent = true;
  bool infeasible_start = false;
  bool projection_failed = false;
  bool rho_capped = false;
};

inline Index planning_horizon(const ScoreModel& model) {
  const Index d = model_dim(model);
  require(d % kStateDim == 0 && d / kStateDim >= 2, "score model does not hold a 4D-state trajectory of length >= 2");
  return d / kStateDim - 1;
}

/// h = -g(position) for a position-space obstacle.
inline Barrier obstacle_barrier(const Constraint& c, Index state_dim = kStateDim) {
  if (auto* b = std::get_if<BallExterior>(&c.shape)) return point_distance_barrier(b->center, b->radius, state_dim);
  const ConstraintShape shape = c.shape;
  return {"obstacle", state_dim, [shape](const Vec& s, int) { return -raw_value(shape, Vec(s.head(2))); },
          [shape, state_dim](const Vec& s, int) {
            Vec g = Vec::Zero(state_dim);
            g.head(2) = -raw_gradient(shape, Vec(s.head(2)));
            return g;
          }};
}

/// Per-state obstacle terms plus one DCBF chain per obstacle.
inline ConstraintSet planning_constraints(const std::vector<Constraint>& obstacles, Index horizon, Smoothing s,
                                          double alpha, bool use_dcbf) {
  ConstraintSet set;
  for (const auto& ob : obstacles) {
    Constraint c = ob;
    c.smoothing = s;
    set.add_per_state(c, kStateDim, horizon + 1, 0, 2);
  }
  if (use_dcbf)
    for (const auto& ob : obstacles) set.append(build_dcbf_constraints({obstacle_barrier(ob), alpha}, horizon, s));
  return set;
}

inline Conditioning plan_conditioning(const ScoreModel& model, const PointMassState& state, const Vec& goal,
                                      const EpisodeConfig& cfg) {
  const AffineMap m = model_coords(model);
  const Index H = planning_horizon(model);
  Conditioning c;
  auto pin_state = [&](Index step, const Vec& x) {
    for (Index k = 0; k < kStateDim; ++k) {
      const Index i = step * kStateDim + k;
      c.pin(i, (x[k] - m.offset[i]) / m.scale[i]);
    }
  };
  if (cfg.pin_start) pin_state(0, state.packed());
  if (cfg.pin_goal) {
    Vec g = Vec::Zero(kStateDim);
    g.head(2) = goal;
    pin_state(H, g);
  }
  return c;
}

inline double trajectory_hinge(const std::vector<Constraint>& obstacles, const RowMat& traj) {
  double total = 0.0;
  for (Index k = 0; k < traj.rows(); ++k) total += obstacle_hinge(obstacles, traj.row(k).head(2).transpose());
  return total;
}

/// One constrained plan from `state`. Duals are read from and written back to
/// `duals` (empty means fresh).
inline PlanResult plan(const PointMassState& state, const std::vector<Constraint>& obstacles, const Vec& goal,
                       const EpisodeConfig& cfg, const ScoreModel& model, const NoiseSchedule& schedule, Rng& rng,
                       std::vector<DualState> duals = {}) {
  const Index H = planning_horizon(model);
  const ConstraintSet set = planning_constraints(obstacles, H, cfg.smoothing, cfg.dcbf_alpha, cfg.use_dcbf);
  ChainProblem problem{model, schedule, set, plan_conditioning(model, state, goal, cfg)};
  ChainOptions opt;
  opt.n_particles = 1;
  if (cfg.sampler.method == Method::primal_dual || cfg.sampler.method == Method::alm) opt.duals = std::move(duals);

  auto chain = run_reverse_chain(cfg.sampler, problem, opt, rng);
  PlanResult r;
  r.trajectory = unflatten(to_world(model, chain.batch.particles).row(0).transpose(), kStateDim);
  r.diagnostics = std::move(chain.diagnostics);
  r.duals = std::move(chain.duals);
  r.projection_failed = chain.projection_failed;
  r.rho_capped = chain.rho_capped;
  r.infeasible_start = max_obstacle_value(obstacles, state.position) > 0.0;
  r.planning_violation = trajectory_hinge(obstacles, r.trajectory);
  for (const auto& ob : obstacles)
    r.dcbf_residual = std::max(r.dcbf_residual, dcbf_satisfied({obstacle_barrier(ob), cfg.dcbf_alpha}, r.trajectory).max_residual);
  const auto idm = inverse_dynamics(cfg.idm, r.trajectory.row(0).transpose(), r.trajectory.row(1).transpose());
  r.action = idm.u;
  r.idm_consistent = idm.consistent;
  return r;
}

// Episodes ------------------------------------------------------------------------

struct StepRecord {
  int step = 0;
  Vec state;   // executed state after the step
  Vec action;
  int plan_id = 0;
  double planning_violation = 0.0;  // of the plan in force
  double violation = 0.0;           // obstacle hinge at the executed state
  bool violated = false;            // any raw g > 0 at the executed state
  double min_barrier = 0.0;         // min over obstacles of h at the executed state
  double dcbf_residual = 0.0;
  double plan_seconds = 0.0;
  bool contact = false;
  bool idm_consistent = true;
};

struct EpisodeMetrics {
  double planning_violations = 0.0;
  double impl_violations = 0.0;
  double violation_rate = 0.0;  // percent of executed steps
  double distance_from_unconstrained = 0.0;
  double reward = 0.0;
  double per_step_time = 0.0;  // median seconds per diffusion step
  double final_goal_distance = 0.0;
  int n_plans = 0;
  int projection_failures = 0;
  bool aborted = false;
};

struct EpisodeResult {
  EpisodeMetrics metrics;
  std::vector<StepRecord> trace;
  std::vector<RowMat> plans;
  PointMassState start;
  std::string error;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + m, v.end());
  if (v.size() % 2) return v[m];
  const double hi = v[m];
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + m));
}

inline double min_barrier(const std::vector<Constraint>& obstacles, const Vec& state) {
  double h = std::numeric_limits<double>::infinity();
  for (const auto& ob : obstacles) h = std::min(h, obstacle_barrier(ob).h(state, 0));
  return h;
}

/// Starting point and per-plan seeds derive from `seed` only, so two methods
/// run with the same seed share starts and noise streams.
inline EpisodeResult run_episode(const Arena& arena, const EpisodeConfig& cfg, const ScoreModel& model,
                                 const NoiseSchedule& schedule, std::uint64_t seed) {
  cfg.validate();
  validate_arena(arena);
  EpisodeResult res;
  Rng start_rng = make_rng(split_seed(seed, 0));
  res.start = sample_start(arena, start_rng);
  PointMassState state = res.start;

  std::vector<double> step_times, distances, plan_viol;
  std::vector<DualState> duals;
  RowMat current;
  int plan_step = 0;
  double dcbf_res = 0.0, plan_secs = 0.0, current_viol = 0.0;

  try {
    for (int k = 0; k < cfg.episode_length; ++k) {
      const Index H = planning_horizon(model);
      const bool replan = res.plans.empty() || (k - plan_step) % cfg.replan_every == 0 || k - plan_step >= H;
      if (replan) {
        const auto obstacles = observe_obstacle(arena, k);
        const std::uint64_t plan_seed = split_seed(seed, 1000 + std::uint64_t(k));
        Rng rng = make_rng(plan_seed);
        if (cfg.reset_duals) duals.clear();
        const auto t0 = std::chrono::steady_clock::now();
        PlanResult p = plan(state, obstacles, arena.goal, cfg, model, schedule, rng, duals);
        plan_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        duals = p.duals;
        for (const auto& d : p.diagnostics)
          if (d.t < schedule.T()) step_times.push_back(d.step_wall_clock_seconds);
        if (cfg.compute_distance) {
          EpisodeConfig ref = cfg;
          ref.sampler.method = Method::unconstrained;
          Rng ref_rng = make_rng(plan_seed);
          const PlanResult u = plan(state, obstacles, arena.goal, ref, model, schedule, ref_rng);
          distances.push_back((p.trajectory.leftCols(2) - u.trajectory.leftCols(2)).rowwise().norm().mean());
        }
        res.metrics.projection_failures += p.projection_failed ? 1 : 0;
        plan_viol.push_back(p.planning_violation);
        current_viol = p.planning_violation;
        dcbf_res = p.dcbf_residual;
        current = p.trajectory;
        plan_step = k;
        res.plans.push_back(current);
      }
      const Index j = k - plan_step;
      const auto idm = inverse_dynamics(cfg.idm, state.packed(), current.row(j + 1).transpose());
      state = env_step(state, idm.u, arena, cfg.dt);

      const auto now = observe_obstacle(arena, k + 1);
      StepRecord rec;
      rec.step = k;
      rec.state = state.packed();
      rec.action = idm.u;
      rec.plan_id = int(res.plans.size()) - 1;
      rec.planning_violation = current_viol;
      rec.violation = obstacle_hinge(now, state.position);
      rec.violated = max_obstacle_value(now, state.position) > 0.0;
      rec.min_barrier = min_barrier(now, state.packed());
      rec.dcbf_residual = dcbf_res;
      rec.plan_seconds = replan ? plan_secs : 0.0;
      rec.contact = state.contact;
      rec.idm_consistent = idm.consistent;
      res.trace.push_back(rec);
    }
  } catch (const std::exception& e) {
    res.metrics.aborted = true;
    res.error = e.what();
  }

  auto& m = res.metrics;
  m.n_plans = int(res.plans.size());
  for (double v : plan_viol) m.planning_violations += v;
  if (!plan_viol.empty()) m.planning_violations /= double(plan_viol.size());
  int violated = 0;
  for (const auto& r : res.trace) {
    m.impl_violations += r.violation;
    violated += r.violated ? 1 : 0;
    m.reward -= (r.state.head(2) - arena.goal).norm();
  }
  m.violation_rate = res.trace.empty() ? 0.0 : 100.0 * violated / double(res.trace.size());
  for (double d : distances) m.distance_from_unconstrained += d;
  if (!distances.empty()) m.distance_from_unconstrained /= double(distances.size());
  m.per_step_time = median(step_times);
  m.final_goal_distance = (state.position - arena.goal).norm();
  return res;
}

/// Violation rate recounted from a trace, independent of run_episode's tally.
inline double recount_violation_rate(const Arena& arena, const std::vector<StepRecord>& trace) {
  if (trace.empty()) return 0.0;
  int n = 0;
  for (const auto& r : trace) n += max_obstacle_value(observe_obstacle(arena, r.step + 1), r.state.head(2)) > 0.0;
  return 100.0 * n / double(trace.size());
}

// Benchmark ---------------------------------------------------------------------------

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"planning_violations", "impl_violations", "violation_rate",
                                              "distance_from_unconstrained", "reward", "per_step_time",
                                              "final_goal_distance"};
  return names;
}

inline std::vector<double> metric_values(const EpisodeMetrics& m) {
  return {m.planning_violations, m.impl_violations,  m.violation_rate,     m.distance_from_unconstrained,
          m.reward,              m.per_step_time,    m.final_goal_distance};
}

struct SuiteSpec {
  std::vector<std::string> arenas{"maze"};
  std::vector<Method> methods{Method::unconstrained, Method::projected, Method::primal_dual, Method::alm};
  int seeds = 10;
  std::uint64_t base_seed = 0;
  EpisodeConfig episode;
  int jobs = 1;
};

struct SeedRun {
  std::string arena;
  Method method;
  std::uint64_t seed;
  EpisodeResult result;
};

struct Summary {
  double mean = 0.0;
  std::optional<double> standard_error;  // absent with fewer than two samples
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= double(v.size());
  if (v.size() >= 2) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.standard_error = std::sqrt(ss / double(v.size() - 1)) / std::sqrt(double(v.size()));
  }
  return s;
}

struct BenchmarkRow {
  std::string arena;
  Method method;
  std::vector<Summary> metrics;  // in metric_names() order
};

struct BenchmarkResult {
  std::vector<SeedRun> runs;  // sorted by (arena, method, seed)
  std::vector<BenchmarkRow> rows;
};

/// Runs every (arena, method, seed) cell. `arena_lookup` maps a name to an arena.
template <typename ArenaLookup>
BenchmarkResult benchmark(const SuiteSpec& suite, const ScoreModel& model, const NoiseSchedule& schedule,
                          ArenaLookup&& arena_lookup) {
  require(suite.seeds >= 1, "benchmark needs at least one seed");
  require(!suite.arenas.empty() && !suite.methods.empty(), "benchmark suite is empty");
  std::vector<std::pair<Arena, std::string>> arenas;
  for (const auto& a : suite.arenas) arenas.emplace_back(arena_lookup(a), a);

  BenchmarkResult out;
  for (const auto& [arena, name] : arenas)
    for (Method m : suite.methods)
      for (int s = 0; s < suite.seeds; ++s) out.runs.push_back({name, m, suite.base_seed + std::uint64_t(s), {}});

  std::vector<const Arena*> arena_of(out.runs.size());
  for (std::size_t i = 0; i < out.runs.size(); ++i)
    for (const auto& [arena, name] : arenas)
      if (name == out.runs[i].arena) arena_of[i] = &arena;

  auto work = [&](std::size_t i) {
    EpisodeConfig cfg = suite.episode;
    cfg.sampler.method = out.runs[i].method;
    out.runs[i].result = run_episode(*arena_of[i], cfg, model, schedule, out.runs[i].seed);
  };
  const int jobs = std::max(1, suite.jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < out.runs.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < out.runs.size(); i = next++) work(i);
      });
    for (auto& t : pool) t.join();
  }

  for (const auto& [arena, name] : arenas)
    for (Method m : suite.methods) {
      BenchmarkRow row{name, m, {}};
      for (std::size_t k = 0; k < metric_names().size(); ++k) {
        std::vector<double> vals;
        for (const auto& r : out.runs)
          if (r.arena == name && r.method == m) vals.push_back(metric_values(r.result.metrics)[k]);
        row.metrics.push_back(summarize(vals));
      }
      out.rows.push_back(std::move(row));
    }
  return out;
}

inline constexpr const char* kAbsent = "NA";

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// One row per seed with raw metric values.
inline void write_runs_csv(std::ostream& os, const BenchmarkResult& b) {
  os << "arena,method,seed";
  for (const auto& n : metric_names()) os << ',' << n;
  os << '\n';
  for (const auto& r : b.runs) {
    os << r.arena << ',' << to_string(r.method) << ',' << r.seed;
    for (double v : metric_values(r.result.metrics)) os << ',' << format_number(v);
    os << '\n';
  }
}

/// Mean and standard error per (arena, method).
inline void write_summary_csv(std::ostream& os, const BenchmarkResult& b) {
  os << "arena,method";
  for (const auto& n : metric_names()) os << ',' << n << "_mean," << n << "_se";
  os << '\n';
  for (const auto& r : b.rows) {
    os << r.arena << ',' << to_string(r.method);
    for (const auto& s : r.metrics)
      os << ',' << format_number(s.mean) << ',' << (s.standard_error ? format_number(*s.standard_error) : kAbsent);
    os << '\n';
  }
}

inline std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

inline void write_table(std::ostream& os, const BenchmarkResult& b) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"arena", "method"};
  for (const auto& n : metric_names()) header.push_back(n);
  cells.push_back(header);
  for (const auto& r : b.rows) {
    std::vector<std::string> line{r.arena, std::string(to_string(r.method))};
    for (const auto& s : r.metrics) {
      char buf[96];
      if (s.standard_error)
        std::snprintf(buf, sizeof buf, "%.4g +- %.2g", s.mean, *s.standard_error);
      else
        std::snprintf(buf, sizeof buf, "%.4g +- %s", s.mean, kAbsent);
      line.emplace_back(buf);
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) os << (c ? "  " : "") << pad(line[c], width[c]);
    os << '\n';
  }
}

}  // namespace cdiff
