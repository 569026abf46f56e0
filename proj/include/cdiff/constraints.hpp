#pragma once

/**
 * @file constraints.hpp
 * @brief Scalar constraints g(x) <= 0, their smoothed forms, projections and
 * the discrete control barrier function (DCBF) trajectory builder.
 *
 * A ConstraintSet is a flat list of scalar terms. Each term applies one
 * Constraint to a contiguous window of the input vector, which is how a
 * per-state constraint is broadcast over a flattened trajectory and how a
 * DCBF condition touches exactly two consecutive states.
 */

#include "cdiff/core.hpp"

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace cdiff {

enum class Smoothing { raw, hinge, sigmoid };

inline std::string_view to_string(Smoothing s) {
  switch (s) {
    case Smoothing::raw: return "raw";
    case Smoothing::hinge: return "hinge";
    case Smoothing::sigmoid: return "sigmoid";
  }
  return "raw";
}

inline Smoothing smoothing_from_string(std::string_view s) {
  if (s == "raw") return Smoothing::raw;
  if (s == "hinge") return Smoothing::hinge;
  if (s == "sigmoid") return Smoothing::sigmoid;
  throw RejectedInput("unknown smoothing '" + std::string(s) + "'");
}

/// a.x - b <= 0
struct Halfspace {
  Vec a;
  double b = 0.0;
};

/// |x - c|^2 - r^2 <= 0
struct BallInterior {
  Vec center;
  double radius = 1.0;
};

/// r^2 - |x - c|^2 <= 0
struct BallExterior {
  Vec center;
  double radius = 1.0;
};

/// x[dim] - bound <= 0 when upper, bound - x[dim] <= 0 otherwise.
struct AxisBound {
  Index dim = 0;
  double bound = 0.0;
  bool upper = true;
};

/// User supplied constraint. `project` is optional.
struct Custom {
  std::string name;
  Index dim = -1;  // -1 accepts any window length
  std::function<double(const Vec&)> eval;
  std::function<Vec(const Vec&)> grad;
  std::function<Vec(const Vec&)> project;
};

using ConstraintShape = std::variant<Halfspace, BallInterior, BallExterior, AxisBound, Custom>;

struct Constraint {
  ConstraintShape shape;
  Smoothing smoothing = Smoothing::raw;
};

inline Constraint halfspace(Vec a, double b, Smoothing s = Smoothing::raw) {
  require(a.norm() > 0.0, "halfspace normal must be non-zero");
  return {Halfspace{std::move(a), b}, s};
}

inline Constraint ball_interior(Vec c, double r, Smoothing s = Smoothing::raw) {
  require(r > 0.0, "ball radius must be positive");
  return {BallInterior{std::move(c), r}, s};
}

inline Constraint ball_exterior(Vec c, double r, Smoothing s = Smoothing::raw) {
  require(r > 0.0, "ball radius must be positive");
  return {BallExterior{std::move(c), r}, s};
}

inline Constraint axis_bound(Index dim, double bound, bool upper, Smoothing s = Smoothing::raw) {
  require(dim >= 0, "axis bound dimension must be non-negative");
  return {AxisBound{dim, bound, upper}, s};
}

/// Natural input length of a constraint, or -1 if it adapts to its window.
inline Index shape_dim(const ConstraintShape& shape) {
  return std::visit(
      [](const auto& c) -> Index {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Halfspace>) return c.a.size();
        else if constexpr (std::is_same_v<T, BallInterior> || std::is_same_v<T, BallExterior>) return c.center.size();
        else if constexpr (std::is_same_v<T, AxisBound>) return -1;
        else return c.dim;
      },
      shape);
}

inline double raw_value(const ConstraintShape& shape, const Vec& x) {
  return std::visit(
      [&](const auto& c) -> double {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Halfspace>) return c.a.dot(x) - c.b;
        else if constexpr (std::is_same_v<T, BallInterior>) return (x - c.center).squaredNorm() - c.radius * c.radius;
        else if constexpr (std::is_same_v<T, BallExterior>) return c.radius * c.radius - (x - c.center).squaredNorm();
        else if constexpr (std::is_same_v<T, AxisBound>) {
          require(c.dim < x.size(), "axis bound dimension outside the input");
          return c.upper ? x[c.dim] - c.bound : c.bound - x[c.dim];
        } else return c.eval(x);
      },
      shape);
}

inline Vec raw_gradient(const ConstraintShape& shape, const Vec& x) {
  return std::visit(
      [&](const auto& c) -> Vec {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Halfspace>) return c.a;
        else if constexpr (std::is_same_v<T, BallInterior>) return 2.0 * (x - c.center);
        else if constexpr (std::is_same_v<T, BallExterior>) return -2.0 * (x - c.center);
        else if constexpr (std::is_same_v<T, AxisBound>) {
          Vec g = Vec::Zero(x.size());
          g[c.dim] = c.upper ? 1.0 : -1.0;
          return g;
        } else return c.grad(x);
      },
      shape);
}

/// Exact Euclidean projection onto {g <= 0} when one is known.
inline std::optional<Vec> closed_form_projection(const ConstraintShape& shape, const Vec& x) {
  return std::visit(
      [&](const auto& c) -> std::optional<Vec> {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Halfspace>) {
          const double v = c.a.dot(x) - c.b;
          if (v <= 0.0) return x;
          return Vec(x - (v / c.a.squaredNorm()) * c.a);
        } else if constexpr (std::is_same_v<T, BallInterior>) {
          const Vec d = x - c.center;
          const double n = d.norm();
          if (n <= c.radius) return x;
          return Vec(c.center + (c.radius / n) * d);
        } else if constexpr (std::is_same_v<T, BallExterior>) {
          const Vec d = x - c.center;
          const double n = d.norm();
          if (n >= c.radius) return x;
          if (n == 0.0) {
            // no unique nearest point; fixed tie-break along the first axis
            Vec out = c.center;
            out[0] += c.radius;
            return out;
          }
          return Vec(c.center + (c.radius / n) * d);
        } else if constexpr (std::is_same_v<T, AxisBound>) {
          Vec out = x;
          out[c.dim] = c.upper ? std::min(out[c.dim], c.bound) : std::max(out[c.dim], c.bound);
          return out;
        } else {
          if (c.project) return c.project(x);
          return std::nullopt;
        }
      },
      shape);
}

// Smoothing -----------------------------------------------------------------

inline double stable_sigmoid(double g) {
  if (g >= 0) return 1.0 / (1.0 + std::exp(-g));
  const double e = std::exp(g);
  return e / (1.0 + e);
}

inline double smooth(Smoothing s, double g) {
  switch (s) {
    case Smoothing::raw: return g;
    case Smoothing::hinge: return positive_part(g);
    case Smoothing::sigmoid: return g * stable_sigmoid(g);
  }
  return g;
}

/// d smooth(g) / dg
inline double smooth_derivative(Smoothing s, double g) {
  switch (s) {
    case Smoothing::raw: return 1.0;
    case Smoothing::hinge: return g > 0.0 ? 1.0 : 0.0;
    case Smoothing::sigmoid: {
      const double sg = stable_sigmoid(g);
      return sg + g * sg * (1.0 - sg);
    }
  }
  return 1.0;
}

// ConstraintSet -------------------------------------------------------------

/// One scalar constraint applied to x[offset, offset + length).
/// length == -1 means the whole input vector.
struct ConstraintTerm {
  Constraint constraint;
  Index offset = 0;
  Index length = -1;
};

class ConstraintSet {
 public:
  ConstraintSet() = default;

  /// Constraint on the whole input vector.
  ConstraintSet& add(Constraint c) {
    terms_.push_back({std::move(c), 0, -1});
    return *this;
  }

  /// Constraint on the window x[offset, offset + length).
  ConstraintSet& add_window(Constraint c, Index offset, Index length) {
    require(offset >= 0 && length > 0, "constraint window must be non-empty");
    const Index d = shape_dim(c.shape);
    require(d < 0 || d == length, dims_message("constraint window", d, length));
    terms_.push_back({std::move(c), offset, length});
    return *this;
  }

  /// Broadcast a state-level constraint over n_states consecutive states of a
  /// flattened trajectory. The constraint reads `slice` entries starting at
  /// `slice_offset` inside each state (slice defaults to the constraint's own
  /// dimension).
  ConstraintSet& add_per_state(const Constraint& c, Index state_dim, Index n_states,
                               Index slice_offset = 0, Index slice = -1) {
    if (slice < 0) slice = shape_dim(c.shape) >= 0 ? shape_dim(c.shape) : state_dim - slice_offset;
    require(slice_offset >= 0 && slice_offset + slice <= state_dim, "per-state slice exceeds the state");
    require(n_states > 0, "per-state broadcast needs at least one state");
    for (Index s = 0; s < n_states; ++s) add_window(c, s * state_dim + slice_offset, slice);
    return *this;
  }

  ConstraintSet& append(const ConstraintSet& other) {
    terms_.insert(terms_.end(), other.terms_.begin(), other.terms_.end());
    return *this;
  }

  Index size() const { return Index(terms_.size()); }
  bool empty() const { return terms_.empty(); }
  const std::vector<ConstraintTerm>& terms() const { return terms_; }

  /// Every term's window must fit inside a vector of length dim.
  void check_dim(Index dim) const {
    for (const auto& t : terms_) {
      if (t.length < 0) {
        const Index d = shape_dim(t.constraint.shape);
        if (d >= 0) require_dim(d, dim, "constraint input");
      } else {
        require(t.offset + t.length <= dim, dims_message("constraint window end", dim, t.offset + t.length));
      }
    }
  }

  static Vec window(const ConstraintTerm& t, const Vec& x) {
    return t.length < 0 ? x : Vec(x.segment(t.offset, t.length));
  }

  double raw_value(Index i, const Vec& x) const {
    return cdiff::raw_value(terms_[i].constraint.shape, window(terms_[i], x));
  }

  /// Gradient of term i embedded in a vector of length x.size().
  Vec raw_gradient(Index i, const Vec& x) const {
    const auto& t = terms_[i];
    Vec g = cdiff::raw_gradient(t.constraint.shape, window(t, x));
    if (t.length < 0) return g;
    Vec full = Vec::Zero(x.size());
    full.segment(t.offset, t.length) = g;
    return full;
  }

  Vec raw_values(const Vec& x) const {
    check_dim(x.size());
    Vec out(size());
    for (Index i = 0; i < size(); ++i) out[i] = raw_value(i, x);
    return out;
  }

  /// Values with each term's smoothing applied.
  Vec values(const Vec& x) const {
    Vec g = raw_values(x);
    for (Index i = 0; i < size(); ++i) g[i] = smooth(terms_[i].constraint.smoothing, g[i]);
    return g;
  }

  /// Jacobian of the smoothed values, one row per term.
  Mat jacobian(const Vec& x) const {
    check_dim(x.size());
    Mat J = Mat::Zero(size(), x.size());
    for (Index i = 0; i < size(); ++i) accumulate_gradient(i, x, 1.0, J.row(i).transpose(), true);
    return J;
  }

  Mat raw_jacobian(const Vec& x) const {
    check_dim(x.size());
    Mat J = Mat::Zero(size(), x.size());
    for (Index i = 0; i < size(); ++i) accumulate_gradient(i, x, 1.0, J.row(i).transpose(), false);
    return J;
  }

  /// sum_i w_i * grad(smoothed g_i)(x), without materialising the Jacobian.
  Vec weighted_gradient(const Vec& x, const Vec& w) const {
    check_dim(x.size());
    require_dim(size(), w.size(), "constraint weights");
    Vec out = Vec::Zero(x.size());
    for (Index i = 0; i < size(); ++i)
      if (w[i] != 0.0) accumulate_gradient(i, x, w[i], out, true);
    return out;
  }

 private:
  template <typename Out>
  void accumulate_gradient(Index i, const Vec& x, double weight, Out&& out, bool smoothed) const {
    const auto& t = terms_[i];
    const Vec xi = window(t, x);
    double factor = weight;
    if (smoothed && t.constraint.smoothing != Smoothing::raw) {
      factor *= smooth_derivative(t.constraint.smoothing, cdiff::raw_value(t.constraint.shape, xi));
      if (factor == 0.0) return;
    }
    const Vec g = cdiff::raw_gradient(t.constraint.shape, xi);
    if (t.length < 0) out += factor * g;
    else out.segment(t.offset, t.length) += factor * g;
  }

  std::vector<ConstraintTerm> terms_;
};

inline Vec eval_constraints(const ConstraintSet& set, const Vec& x) { return set.values(x); }
inline Mat grad_constraints(const ConstraintSet& set, const Vec& x) { return set.jacobian(x); }

/// Set a smoothing tag on every term.
inline ConstraintSet with_smoothing(ConstraintSet set, Smoothing s) {
  ConstraintSet out;
  for (auto t : set.terms()) {
    t.constraint.smoothing = s;
    if (t.length < 0) out.add(t.constraint);
    else out.add_window(t.constraint, t.offset, t.length);
  }
  return out;
}

// Projection ------------------------------------------------------------------

struct ProjectionOptions {
  int max_sweeps = 50;
  double tolerance = 1e-9;
  /// Coordinates that must not move (e.g. pinned start/goal states).
  std::vector<bool> frozen;
  int penalty_rounds = 6;
  int penalty_iters = 200;
};

struct ProjectionResult {
  Vec point;
  double residual = 0.0;  // max raw g at `point`
  bool feasible = true;
  int sweeps = 0;
};

namespace detail {

inline double max_raw(const ConstraintSet& set, const Vec& x) {
  double worst = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < set.size(); ++i) worst = std::max(worst, set.raw_value(i, x));
  return worst;
}

inline bool window_frozen(const ConstraintTerm& t, const std::vector<bool>& frozen, Index n) {
  if (frozen.empty()) return false;
  const Index lo = t.length < 0 ? 0 : t.offset;
  const Index hi = t.length < 0 ? n : t.offset + t.length;
  for (Index k = lo; k < hi; ++k)
    if (frozen[k]) return true;
  return false;
}

inline void mask(Vec& g, const std::vector<bool>& frozen) {
  if (frozen.empty()) return;
  for (Index k = 0; k < g.size(); ++k)
    if (frozen[k]) g[k] = 0.0;
}

/// One pass over all terms: exact projection where available, otherwise a
/// linearised step onto the tangent halfspace.
inline void cyclic_sweep(const ConstraintSet& set, Vec& x, const ProjectionOptions& opt) {
  for (Index i = 0; i < set.size(); ++i) {
    const auto& t = set.terms()[i];
    const double g = set.raw_value(i, x);
    if (g <= 0.5 * opt.tolerance) continue;
    if (!window_frozen(t, opt.frozen, x.size())) {
      if (auto p = closed_form_projection(t.constraint.shape, ConstraintSet::window(t, x))) {
        if (t.length < 0) x = *p;
        else x.segment(t.offset, t.length) = *p;
        continue;
      }
    }
    Vec grad = set.raw_gradient(i, x);
    mask(grad, opt.frozen);
    const double n2 = grad.squaredNorm();
    if (n2 <= 0.0) continue;
    x -= ((g + 0.5 * opt.tolerance) / n2) * grad;
  }
}

}  // namespace detail

/// Nearest feasible point (best effort). Single closed-form constraints are
/// solved exactly; otherwise cyclic projections run for max_sweeps, then a
/// penalised gradient descent on |x - z|^2 takes over.
inline ProjectionResult project_best(const ConstraintSet& set, const Vec& z, const ProjectionOptions& opt = {}) {
  set.check_dim(z.size());
  require(opt.frozen.empty() || Index(opt.frozen.size()) == z.size(), "frozen mask length mismatch");
  ProjectionResult res{z, set.empty() ? 0.0 : detail::max_raw(set, z), true, 0};
  if (set.empty() || res.residual <= opt.tolerance) return res;

  Vec x = z;
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    detail::cyclic_sweep(set, x, opt);
    res.sweeps = sweep + 1;
    const double r = detail::max_raw(set, x);
    if (r <= opt.tolerance) return {x, r, true, res.sweeps};
  }

  Vec best = x;
  double best_r = detail::max_raw(set, x);
  double mu = 10.0;
  for (int round = 0; round < opt.penalty_rounds; ++round, mu *= 10.0) {
    for (int it = 0; it < opt.penalty_iters; ++it) {
      Vec grad = 2.0 * (x - z);
      double curvature = 2.0;
      for (Index i = 0; i < set.size(); ++i) {
        const double g = set.raw_value(i, x);
        if (g <= 0.0) continue;
        Vec gi = set.raw_gradient(i, x);
        grad += 2.0 * mu * g * gi;
        curvature += 2.0 * mu * gi.squaredNorm();
      }
      detail::mask(grad, opt.frozen);
      x -= grad / curvature;
    }
    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) detail::cyclic_sweep(set, x, opt);
    const double r = detail::max_raw(set, x);
    if (r < best_r) {
      best_r = r;
      best = x;
    }
    if (r <= opt.tolerance) return {x, r, true, res.sweeps};
  }
  return {best, best_r, false, res.sweeps};
}

/// Feasible projection or InfeasibleProjection carrying the best iterate.
inline Vec project(const ConstraintSet& set, const Vec& z, const ProjectionOptions& opt = {}) {
  auto r = project_best(set, z, opt);
  if (!r.feasible) throw InfeasibleProjection(std::move(r.point), r.residual);
  return std::move(r.point);
}

// Discrete control barrier functions -------------------------------------------

/// Barrier h(state, step) >= 0 on the safe set, with its gradient in the state.
/// `step` is the trajectory index, used by time-varying barriers.
struct Barrier {
  std::string name;
  Index state_dim = 0;
  std::function<double(const Vec&, int)> h;
  std::function<Vec(const Vec&, int)> grad;
};

struct DcbfSpec {
  Barrier barrier;
  double alpha = 0.5;
};

/// h = |p - c| - r, p = state[offset, offset + dim(c)).
inline Barrier point_distance_barrier(Vec center, double radius, Index state_dim, Index offset = 0) {
  require(radius > 0.0, "barrier radius must be positive");
  require(offset + center.size() <= state_dim, "barrier slice exceeds the state");
  const Index k = center.size();
  return {"point_distance", state_dim,
          [=](const Vec& s, int) { return (s.segment(offset, k) - center).norm() - radius; },
          [=](const Vec& s, int) {
            Vec g = Vec::Zero(s.size());
            const Vec d = s.segment(offset, k) - center;
            const double n = d.norm();
            if (n > 0.0) g.segment(offset, k) = d / n;
            return g;
          }};
}

/// h = |p - c|^2 - r^2.
inline Barrier point_distance_squared_barrier(Vec center, double radius, Index state_dim, Index offset = 0) {
  require(radius > 0.0, "barrier radius must be positive");
  require(offset + center.size() <= state_dim, "barrier slice exceeds the state");
  const Index k = center.size();
  return {"point_distance_squared", state_dim,
          [=](const Vec& s, int) { return (s.segment(offset, k) - center).squaredNorm() - radius * radius; },
          [=](const Vec& s, int) {
            Vec g = Vec::Zero(s.size());
            g.segment(offset, k) = 2.0 * (s.segment(offset, k) - center);
            return g;
          }};
}

/// h = bound - s[dim] (upper) or s[dim] - bound (lower).
inline Barrier axis_bound_barrier(Index dim, double bound, bool upper, Index state_dim) {
  require(dim >= 0 && dim < state_dim, "barrier dimension outside the state");
  return {"axis_bound", state_dim,
          [=](const Vec& s, int) { return upper ? bound - s[dim] : s[dim] - bound; },
          [=](const Vec& s, int) {
            Vec g = Vec::Zero(s.size());
            g[dim] = upper ? -1.0 : 1.0;
            return g;
          }};
}

/// Point-distance barrier whose center follows a table indexed by
/// first_step + trajectory index (held at the last entry past the end).
inline Barrier moving_obstacle_barrier(std::vector<Vec> centers, double radius, Index state_dim,
                                       int first_step = 0, Index offset = 0) {
  require(!centers.empty(), "moving obstacle needs at least one center");
  require(radius > 0.0, "barrier radius must be positive");
  const Index k = centers.front().size();
  auto center_at = [centers, first_step](int step) -> const Vec& {
    const int i = std::clamp(first_step + step, 0, int(centers.size()) - 1);
    return centers[i];
  };
  return {"moving_obstacle", state_dim,
          [=](const Vec& s, int step) { return (s.segment(offset, k) - center_at(step)).norm() - radius; },
          [=](const Vec& s, int step) {
            Vec g = Vec::Zero(s.size());
            const Vec d = s.segment(offset, k) - center_at(step);
            const double n = d.norm();
            if (n > 0.0) g.segment(offset, k) = d / n;
            return g;
          }};
}

/// Constraint (1 - alpha) h(x^tau) - h(x^{tau+1}) <= 0 on the window holding
/// states tau and tau+1.
inline Constraint dcbf_pair_constraint(const DcbfSpec& spec, int tau, Smoothing s = Smoothing::raw) {
  const Index sd = spec.barrier.state_dim;
  const double keep = 1.0 - spec.alpha;
  const Barrier b = spec.barrier;
  Custom c;
  c.name = "dcbf[" + std::to_string(tau) + "]";
  c.dim = 2 * sd;
  c.eval = [=](const Vec& w) { return keep * b.h(w.head(sd), tau) - b.h(w.tail(sd), tau + 1); };
  c.grad = [=](const Vec& w) {
    Vec g(2 * sd);
    g.head(sd) = keep * b.grad(w.head(sd), tau);
    g.tail(sd) = -b.grad(w.tail(sd), tau + 1);
    return g;
  };
  return {std::move(c), s};
}

/// One DCBF condition per consecutive pair of a (horizon + 1)-state trajectory.
inline ConstraintSet build_dcbf_constraints(const DcbfSpec& spec, Index horizon, Smoothing s = Smoothing::raw) {
  require(horizon >= 1, "DCBF constraints need a horizon of at least 1");
  require(spec.alpha > 0.0 && spec.alpha <= 1.0, "DCBF alpha must lie in (0, 1]");
  require(spec.barrier.state_dim > 0, "DCBF barrier needs a state dimension");
  ConstraintSet set;
  const Index sd = spec.barrier.state_dim;
  for (Index tau = 0; tau < horizon; ++tau)
    set.add_window(dcbf_pair_constraint(spec, int(tau), s), tau * sd, 2 * sd);
  return set;
}

struct DcbfCheck {
  bool satisfied = true;
  double max_residual = -std::numeric_limits<double>::infinity();
};

/// Checks h(x^{tau+1}) >= (1 - alpha) h(x^tau) for every consecutive pair of
/// rows; residual is the largest (1 - alpha) h(x^tau) - h(x^{tau+1}).
inline DcbfCheck dcbf_satisfied(const DcbfSpec& spec, const RowMat& trajectory, double tol = 1e-9) {
  require(trajectory.rows() >= 2, "DCBF check needs at least two states");
  require_dim(spec.barrier.state_dim, trajectory.cols(), "DCBF trajectory state");
  DcbfCheck out;
  for (Index tau = 0; tau + 1 < trajectory.rows(); ++tau) {
    const double r = (1.0 - spec.alpha) * spec.barrier.h(trajectory.row(tau).transpose(), int(tau)) -
                     spec.barrier.h(trajectory.row(tau + 1).transpose(), int(tau + 1));
    out.max_residual = std::max(out.max_residual, r);
  }
  out.satisfied = out.max_residual <= tol;
  return out;
}

}  // namespace cdiff
