#include "cdiff/constraints.hpp"

#include <gtest/gtest.h>

using namespace cdiff;

namespace {

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

/// Central differences of every smoothed constraint value.
Mat fd_jacobian(const ConstraintSet& set, const Vec& x, double h = 1e-6) {
  Mat J(set.size(), x.size());
  for (Index k = 0; k < x.size(); ++k) {
    Vec xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    J.col(k) = (set.values(xp) - set.values(xm)) / (2 * h);
  }
  return J;
}

void expect_jacobian_matches(const ConstraintSet& set, const Vec& x, double tol) {
  const Mat J = set.jacobian(x);
  const Mat F = fd_jacobian(set, x);
  for (Index i = 0; i < J.rows(); ++i)
    for (Index k = 0; k < J.cols(); ++k) EXPECT_LE(rel_err(J(i, k), F(i, k)), tol) << "row " << i << " col " << k;
}

Barrier scalar_identity_barrier() {
  return {"identity", 1, [](const Vec& s, int) { return s[0]; }, [](const Vec&, int) { return Vec::Ones(1); }};
}

}  // namespace

TEST(EvalConstraints, HalfspaceRawAndHinge) {
  ConstraintSet raw, hinge;
  raw.add(halfspace(v2(1, 0), 1.0));
  hinge.add(halfspace(v2(1, 0), 1.0, Smoothing::hinge));
  EXPECT_DOUBLE_EQ(eval_constraints(raw, v2(2, 0))[0], 1.0);
  EXPECT_DOUBLE_EQ(eval_constraints(hinge, v2(2, 0))[0], 1.0);
  EXPECT_DOUBLE_EQ(eval_constraints(hinge, v2(0, 0))[0], 0.0);
  EXPECT_THROW(eval_constraints(raw, Vec::Zero(3)), RejectedInput);
}

TEST(EvalConstraints, SigmoidAtZeroIsZero) {
  EXPECT_EQ(smooth(Smoothing::sigmoid, 0.0), 0.0);
  ConstraintSet s;
  s.add(halfspace(v2(1, 0), 1.0, Smoothing::sigmoid));
  EXPECT_EQ(s.values(v2(1, 5))[0], 0.0);
}

TEST(Smoothing, HingeDominatesSigmoid) {
  for (double g = 0.0; g <= 20.0; g += 0.25) EXPECT_LE(smooth(Smoothing::sigmoid, g), smooth(Smoothing::hinge, g));
  EXPECT_LE(std::abs(smooth(Smoothing::sigmoid, 50.0) - 50.0), 1e-12);
  EXPECT_LE(std::abs(smooth(Smoothing::hinge, 50.0) - 50.0), 1e-12);
}

TEST(GradConstraints, BallExteriorRaw) {
  ConstraintSet s;
  s.add(ball_exterior(Vec::Zero(2), 1.0));
  const Mat J = grad_constraints(s, v2(0.5, 0));
  EXPECT_DOUBLE_EQ(J(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(J(0, 1), 0.0);
}

TEST(GradConstraints, HingeZeroAtFeasiblePoint) {
  ConstraintSet s;
  s.add(ball_exterior(Vec::Zero(2), 1.0, Smoothing::hinge));
  EXPECT_EQ(grad_constraints(s, v2(3, 0)).norm(), 0.0);
}

TEST(GradConstraints, EveryVariantMatchesFiniteDifferences) {
  Rng rng = make_rng(21);
  const Mat A = standard_normal(3, 3, rng);
  const Mat Q = A * A.transpose();
  Custom quad{"quadratic", 3, [Q](const Vec& x) { return x.dot(Q * x) - 1.0; },
              [Q](const Vec& x) { return Vec(2.0 * Q * x); }, {}};
  for (Smoothing sm : {Smoothing::raw, Smoothing::sigmoid}) {
    ConstraintSet s;
    s.add(halfspace(standard_normal(3, rng), 0.3, sm));
    s.add(ball_interior(standard_normal(3, rng), 0.7, sm));
    s.add(ball_exterior(standard_normal(3, rng), 1.2, sm));
    s.add(axis_bound(1, 0.2, false, sm));
    s.add({quad, sm});
    for (int trial = 0; trial < 20; ++trial) expect_jacobian_matches(s, standard_normal(3, rng), 1e-6);
  }
}

TEST(GradConstraints, WeightedGradientEqualsJacobianTranspose) {
  Rng rng = make_rng(22);
  ConstraintSet s;
  s.add_per_state(ball_exterior(v2(0.5, 0.5), 0.4, Smoothing::sigmoid), 4, 5, 0, 2);
  s.add_per_state(halfspace(v2(0, 1), 1.0, Smoothing::hinge), 4, 5, 0, 2);
  const Vec x = standard_normal(20, rng);
  const Vec w = standard_normal(s.size(), rng);
  EXPECT_LT((s.weighted_gradient(x, w) - s.jacobian(x).transpose() * w).norm(), 1e-12);
}

TEST(ConstraintSet, PerStateExpansionCounts) {
  ConstraintSet s;
  s.add_per_state(ball_exterior(v2(0, 0), 1.0), 4, 9, 0, 2);
  EXPECT_EQ(s.size(), 9);
  s.append(build_dcbf_constraints({point_distance_barrier(v2(0, 0), 1.0, 4), 0.5}, 8));
  EXPECT_EQ(s.size(), 17);
}

TEST(Project, HalfspaceClosedForm) {
  ConstraintSet s;
  s.add(halfspace(v2(1, 0), 1.0));
  const Vec p = project(s, v2(2, 0));
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_NEAR(p[1], 0.0, 1e-15);
}

TEST(Project, BallExteriorPushesOut) {
  ConstraintSet s;
  s.add(ball_exterior(Vec::Zero(2), 1.0));
  const Vec p = project(s, v2(0.5, 0));
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_NEAR(p[1], 0.0, 1e-15);
  const Vec c = project(s, Vec::Zero(2));  // singular point tie-break
  EXPECT_NEAR(c[0], 1.0, 1e-15);
  EXPECT_NEAR(c[1], 0.0, 1e-15);
}

TEST(Project, TwoHalfspacesMatchGridSearch) {
  ConstraintSet s;
  s.add(halfspace(v2(1, 0), 1.0));
  s.add(halfspace(v2(0, 1), 1.0));
  const Vec z = v2(2, 2);
  const Vec p = project(s, z);
  // brute-force grid over the feasible set
  Vec best = v2(0, 0);
  double best_d = 1e300;
  for (double a = -1.0; a <= 1.0 + 1e-12; a += 1e-3)
    for (double b = -1.0; b <= 1.0 + 1e-12; b += 1e-3) {
      const double d = (v2(a, b) - z).squaredNorm();
      if (d < best_d) best_d = d, best = v2(a, b);
    }
  EXPECT_LT((p - best).norm(), 1e-3);
  EXPECT_NEAR(p[0], 1.0, 1e-9);
  EXPECT_NEAR(p[1], 1.0, 1e-9);
}

TEST(Project, EmptySetIsIdentity) {
  ConstraintSet s;
  const Vec z = v2(0.3, -4);
  EXPECT_EQ(project(s, z), z);
}

TEST(Project, InfeasibleThrowsWithBestIterate) {
  ConstraintSet s;
  s.add(halfspace(v2(1, 0), -1.0));   // x <= -1
  s.add(halfspace(v2(-1, 0), -1.0));  // x >= 1
  ProjectionOptions opt;
  opt.max_sweeps = 5;
  opt.penalty_rounds = 2;
  opt.penalty_iters = 20;
  try {
    project(s, v2(0, 0), opt);
    FAIL() << "expected InfeasibleProjection";
  } catch (const InfeasibleProjection& e) {
    EXPECT_EQ(e.best().size(), 2);
    EXPECT_GT(e.residual(), 0.0);
  }
}

TEST(Project, NonClosedFormCustomConstraint) {
  // sin(x0) + x1 <= 0 has no closed-form projection
  Custom c{"sine", 2, [](const Vec& x) { return std::sin(x[0]) + x[1]; },
           [](const Vec& x) { return v2(std::cos(x[0]), 1.0); }, {}};
  ConstraintSet s;
  s.add({c, Smoothing::raw});
  Rng rng = make_rng(23);
  for (int k = 0; k < 50; ++k) {
    const Vec z = 2.0 * standard_normal(2, rng);
    const Vec p = project(s, z);
    EXPECT_LE(s.raw_values(p)[0], 1e-9);
  }
}

TEST(Project, FrozenCoordinatesStayPut) {
  ConstraintSet s;
  s.add(ball_exterior(Vec::Zero(2), 1.0));
  ProjectionOptions opt;
  opt.frozen = {true, false};
  const Vec p = project(s, v2(0.5, 0.1), opt);
  EXPECT_EQ(p[0], 0.5);
  EXPECT_LE(s.raw_values(p)[0], 1e-9);
}

TEST(ProjectProperties, IdempotenceAndOptimalityOnRandomCases) {
  Rng rng = make_rng(24);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index d = 1 + trial % 4;
    Constraint c;
    switch (trial % 4) {
      case 0: c = halfspace(standard_normal(d, rng), standard_normal(1, rng)[0]); break;
      case 1: c = ball_interior(standard_normal(d, rng), 0.2 + uniform(0, 2, rng)); break;
      case 2: c = ball_exterior(standard_normal(d, rng), 0.2 + uniform(0, 2, rng)); break;
      default: c = axis_bound(trial % int(d), standard_normal(1, rng)[0], trial % 2 == 0); break;
    }
    ConstraintSet s;
    s.add(c);
    const Vec z = 2.0 * standard_normal(d, rng);
    const Vec p = project(s, z);
    EXPECT_LE(s.raw_values(p)[0], 1e-9);
    EXPECT_LT((project(s, p) - p).norm(), 1e-9);
    if (trial % 4 != 2) {  // convex sets: no feasible point is closer
      for (int k = 0; k < 1000; ++k) {
        Vec x = p + standard_normal(d, rng) * uniform(0, 3, rng);
        x = project(s, x);
        ASSERT_LE((p - z).norm(), (x - z).norm() + 1e-12);
      }
    }
  }
}

TEST(Dcbf, ScalarIdentityBarrier) {
  const DcbfSpec spec{scalar_identity_barrier(), 0.5};
  const ConstraintSet s = build_dcbf_constraints(spec, 1);
  ASSERT_EQ(s.size(), 1);
  EXPECT_DOUBLE_EQ(s.raw_values(v2(1.0, 0.2))[0], 0.5 - 0.2);
  const ConstraintSet one = build_dcbf_constraints({scalar_identity_barrier(), 1.0}, 1);
  EXPECT_DOUBLE_EQ(one.raw_values(v2(7.0, 0.2))[0], -0.2);
}

TEST(Dcbf, RejectsBadInputs) {
  EXPECT_THROW(build_dcbf_constraints({scalar_identity_barrier(), 0.5}, 0), RejectedInput);
  EXPECT_THROW(build_dcbf_constraints({scalar_identity_barrier(), 0.0}, 3), RejectedInput);
  EXPECT_THROW(build_dcbf_constraints({scalar_identity_barrier(), 1.5}, 3), RejectedInput);
}

TEST(Dcbf, GradientRowsLocalAndMatchFiniteDifferences) {
  Rng rng = make_rng(25);
  const DcbfSpec spec{point_distance_squared_barrier(v2(0.3, -0.2), 0.5, 4), 0.3};
  const Index H = 6;
  const ConstraintSet s = build_dcbf_constraints(spec, H);
  ASSERT_EQ(s.size(), H);
  const Vec x = standard_normal(4 * (H + 1), rng);
  const Mat J = s.jacobian(x);
  for (Index tau = 0; tau < H; ++tau)
    for (Index k = 0; k < x.size(); ++k)
      if (k < 4 * tau || k >= 4 * (tau + 2)) {
        EXPECT_EQ(J(tau, k), 0.0);
      }
  expect_jacobian_matches(s, x, 1e-6);
  const ConstraintSet dist = build_dcbf_constraints({point_distance_barrier(v2(0.3, -0.2), 0.5, 4), 0.3}, H);
  expect_jacobian_matches(dist, x, 1e-6);
}

TEST(Dcbf, SatisfiedExamples) {
  const Barrier one{"one", 1, [](const Vec&, int) { return 1.0; }, [](const Vec&, int) { return Vec::Zero(1); }};
  RowMat traj = RowMat::Zero(5, 1);
  auto c = dcbf_satisfied({one, 0.4}, traj);
  EXPECT_TRUE(c.satisfied);
  EXPECT_NEAR(c.max_residual, -0.4, 1e-15);

  RowMat decay(6, 1);
  for (Index k = 0; k < 6; ++k) decay(k, 0) = std::pow(0.5, double(k));
  c = dcbf_satisfied({scalar_identity_barrier(), 0.5}, decay);
  EXPECT_TRUE(c.satisfied);
  EXPECT_EQ(c.max_residual, 0.0);
}

TEST(Dcbf, RandomTrajectoriesAgreeWithLoopAndChain) {
  Rng rng = make_rng(26);
  const DcbfSpec spec{point_distance_barrier(v2(0, 0), 1.0, 2), 0.25};
  for (int trial = 0; trial < 200; ++trial) {
    RowMat traj(8, 2);
    for (Index k = 0; k < 8; ++k) traj.row(k) = (2.0 * standard_normal(2, rng)).transpose();
    double worst = -1e300;
    for (Index k = 0; k + 1 < 8; ++k)
      worst = std::max(worst, 0.75 * (traj.row(k).norm() - 1.0) - (traj.row(k + 1).norm() - 1.0));
    const auto c = dcbf_satisfied(spec, traj);
    EXPECT_EQ(c.max_residual, worst);
    EXPECT_EQ(c.satisfied, worst <= 1e-9);
  }
  // Chained trajectories: each h at least (1 - alpha) times the previous one.
  for (int trial = 0; trial < 200; ++trial) {
    RowMat traj(10, 2);
    double h = uniform(0, 2, rng);
    for (Index k = 0; k < 10; ++k) {
      const double ang = uniform(0, 6.28, rng);
      traj.row(k) << (1.0 + h) * std::cos(ang), (1.0 + h) * std::sin(ang);
      h = h * (0.75 + uniform(0, 0.5, rng));
    }
    const auto c = dcbf_satisfied(spec, traj);
    if (!c.satisfied) continue;
    const double h0 = traj.row(0).norm() - 1.0;
    for (Index k = 0; k < 10; ++k) EXPECT_GE(traj.row(k).norm() - 1.0, std::pow(0.75, double(k)) * h0 - 1e-9);
  }
}

TEST(Barriers, MovingObstacleFollowsTable) {
  const std::vector<Vec> centers{v2(0, 0), v2(1, 0), v2(2, 0)};
  const Barrier b = moving_obstacle_barrier(centers, 0.5, 4, 1);
  Vec s = Vec::Zero(4);
  s.head(2) = v2(3, 0);
  EXPECT_DOUBLE_EQ(b.h(s, 0), 2.0 - 0.5);
  EXPECT_DOUBLE_EQ(b.h(s, 1), 1.0 - 0.5);
  EXPECT_DOUBLE_EQ(b.h(s, 5), 1.0 - 0.5);  // held at the last entry
}
