#include "cdiff/envs.hpp"

#include <gtest/gtest.h>

using namespace cdiff;

namespace {

Arena open_arena() {
  Arena a = maze_training_arena();
  a.obstacles.clear();
  a.lower = vec2(-1e6, -1e6);
  a.upper = vec2(1e6, 1e6);
  return a;
}

PointMassState state(double px, double py, double vx, double vy) {
  return {vec2(px, py), vec2(vx, vy), false};
}

}  // namespace

TEST(EnvStep, DoubleIntegratorExample) {
  const auto s = env_step(state(0, 0, 0, 0), vec2(1, 0), open_arena(), 0.1);
  EXPECT_NEAR(s.velocity[0], 0.1, 1e-15);
  EXPECT_NEAR(s.position[0], 0.01, 1e-15);
  EXPECT_EQ(s.position[1], 0.0);
  EXPECT_FALSE(s.contact);
}

TEST(EnvStep, ClampsAtArenaBoundary) {
  const Arena a = maze_training_arena();
  const auto s = env_step(state(0.0, 1.0, 0, 0), vec2(-1, 0), a, 0.1);
  EXPECT_EQ(s.position[0], 0.0);
  EXPECT_TRUE(s.contact);
  const auto inside = env_step(state(3.0, 2.0, 0, 0), vec2(-1, 0), a, 0.1);
  EXPECT_FALSE(inside.contact);
}

TEST(EnvStep, RejectsBadInput) {
  EXPECT_THROW(env_step(state(0, 0, 0, 0), Vec::Zero(3), open_arena()), RejectedInput);
  EXPECT_THROW(env_step(state(0, 0, 0, 0), vec2(0, std::nan("")), open_arena()), NonFiniteValue);
}

TEST(EnvStep, HundredStepsMatchClosedForm) {
  const double dt = 0.1;
  const int n = 100;
  Rng rng = make_rng(51);
  const PointMassState s0 = state(0.5, -0.2, 0.3, 0.1);
  std::vector<Vec> us;
  for (int k = 0; k < n; ++k) us.push_back(standard_normal(2, rng));
  PointMassState s = s0;
  for (const auto& u : us) s = env_step(s, u, open_arena(), dt);
  // p_n = p0 + n dt v0 + dt^2 sum_j (n - j) u_j ; v_n = v0 + dt sum_j u_j
  Vec p = s0.position + n * dt * s0.velocity, v = s0.velocity;
  for (int j = 0; j < n; ++j) {
    p += dt * dt * double(n - j) * us[std::size_t(j)];
    v += dt * us[std::size_t(j)];
  }
  EXPECT_LT((s.position - p).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((s.velocity - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(InverseDynamics, AnalyticRoundTrip) {
  Rng rng = make_rng(52);
  for (IdmChannel ch : {IdmChannel::velocity, IdmChannel::position}) {
    const InverseDynamicsModel m = AnalyticDoubleIntegrator{0.1, ch};
    for (int k = 0; k < 50; ++k) {
      const PointMassState s = state(uniform(0, 5, rng), uniform(0, 4, rng), uniform(-1, 1, rng), uniform(-1, 1, rng));
      const Vec u = 2.0 * standard_normal(2, rng);
      const auto next = env_step(s, u, open_arena(), 0.1);
      const auto r = inverse_dynamics(m, s.packed(), next.packed());
      EXPECT_LT((r.u - u).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_TRUE(r.consistent);
    }
  }
}

TEST(InverseDynamics, EqualVelocitiesGiveZeroAction) {
  const InverseDynamicsModel m = AnalyticDoubleIntegrator{0.1, IdmChannel::velocity};
  const Vec x = state(1, 1, 0.5, -0.5).packed();
  const Vec x1 = state(1.05, 0.95, 0.5, -0.5).packed();
  const auto r = inverse_dynamics(m, x, x1);
  EXPECT_EQ(r.u.norm(), 0.0);
  EXPECT_TRUE(r.consistent);
}

TEST(InverseDynamics, InconsistentPairFlagged) {
  const InverseDynamicsModel m = AnalyticDoubleIntegrator{0.1, IdmChannel::velocity};
  const auto r = inverse_dynamics(m, state(0, 0, 0, 0).packed(), state(1, 0, 0, 0).packed());
  EXPECT_FALSE(r.consistent);
  EXPECT_THROW(inverse_dynamics(m, Vec::Zero(3), Vec::Zero(4)), RejectedInput);
}

TEST(InverseDynamics, LearnedModelFitsHeldOutTransitions) {
  IdmTrainingConfig cfg;
  cfg.seed = 53;
  const auto trained = train_idm(maze_training_arena(), cfg);
  EXPECT_LE(trained.validation_mse, 1e-3);
  // fresh transitions, independent of the training stream
  Rng rng = make_rng(54);
  auto [feats, acts] = random_transitions(maze_training_arena(), 500, 1.0, 2.0, 0.1, rng);
  const InverseDynamicsModel m = trained.model;
  double sse = 0.0;
  for (Index k = 0; k < feats.cols(); ++k) {
    const Vec x = feats.col(k).head(4);
    sse += (inverse_dynamics(m, x, x + feats.col(k).tail(4)).u - acts.col(k)).squaredNorm();
  }
  EXPECT_LE(sse / double(2 * feats.cols()), 1e-3);
}

TEST(ExpertData, StartAtGoalStaysPut) {
  const Arena a = maze_training_arena();
  ExpertConfig cfg;
  cfg.horizon = 20;
  PointMassState s;
  s.position = a.goal;
  const RowMat tr = expert_rollout(a, s, cfg);
  ASSERT_EQ(tr.rows(), 21);
  for (Index k = 0; k < tr.rows(); ++k) {
    EXPECT_EQ((tr.row(k).head(2).transpose() - a.goal).norm(), 0.0);
    EXPECT_EQ(tr.row(k).tail(2).norm(), 0.0);
  }
}

TEST(ExpertData, FeasibleAndReachesGoal) {
  const Arena a = maze_training_arena();
  ExpertConfig cfg;
  cfg.n_trajectories = 50;
  cfg.seed = 55;
  const auto ds = generate_expert_data(a, cfg);
  ASSERT_EQ(ds.size(), 50);
  EXPECT_EQ(ds.horizon(), 64);
  double dist = 0.0;
  for (const auto& tr : ds.trajectories) {
    for (Index k = 0; k < tr.rows(); ++k)
      EXPECT_LE(max_obstacle_value(observe_obstacle(a, 0), tr.row(k).head(2).transpose()), 0.0);
    dist += (tr.row(tr.rows() - 1).head(2).transpose() - a.goal).norm();
  }
  EXPECT_LE(dist / 50.0, 0.1);
}

TEST(ExpertData, DeterministicForSeed) {
  ExpertConfig cfg;
  cfg.n_trajectories = 5;
  cfg.horizon = 30;
  cfg.goal_tolerance = 1.0;
  cfg.seed = 56;
  const auto a = generate_expert_data(maze_training_arena(), cfg);
  const auto b = generate_expert_data(maze_training_arena(), cfg);
  for (Index i = 0; i < a.size(); ++i) EXPECT_EQ(a.trajectories[i], b.trajectories[i]);
  cfg.seed = 57;
  const auto c = generate_expert_data(maze_training_arena(), cfg);
  EXPECT_NE(a.trajectories[0], c.trajectories[0]);
}

TEST(ExpertData, ImpossibleTaskFailsLoudly) {
  ExpertConfig cfg;
  cfg.n_trajectories = 1;
  cfg.horizon = 1;
  cfg.goal_tolerance = 1e-6;
  cfg.max_retries = 3;
  EXPECT_THROW(generate_expert_data(maze_training_arena(), cfg), std::runtime_error);
}

TEST(Obstacles, StaticObstacleIgnoresTime) {
  const Arena a = maze_arena();
  const auto at0 = observe_obstacle(a, 0);
  const auto at9 = observe_obstacle(a, 9);
  ASSERT_EQ(at0.size(), a.obstacles.size());
  const auto& b0 = std::get<BallExterior>(at0.back().shape);
  const auto& b9 = std::get<BallExterior>(at9.back().shape);
  EXPECT_EQ(b0.center, b9.center);
}

TEST(Obstacles, LinearMotionOffset) {
  Arena a = maze_training_arena();
  a.obstacles = {{ball_exterior(vec2(1, 1), 0.5), linear_motion(vec2(0.1, 0), 10)}};
  const auto at3 = observe_obstacle(a, 3);
  const auto& c = std::get<BallExterior>(at3[0].shape);
  EXPECT_NEAR(c.center[0], 1.3, 1e-15);
  EXPECT_EQ(c.center[1], 1.0);
  // past the end of the table the last offset holds
  const auto at50 = observe_obstacle(a, 50);
  const auto& late = std::get<BallExterior>(at50[0].shape);
  EXPECT_NEAR(late.center[0], 2.0, 1e-15);
  EXPECT_THROW(observe_obstacle(a, -1), RejectedInput);
}

TEST(Obstacles, MotionTableOracle) {
  Rng rng = make_rng(58);
  std::vector<Vec> table;
  for (int k = 0; k < 6; ++k) table.push_back(standard_normal(2, rng));
  Arena a = maze_training_arena();
  a.obstacles = {{ball_exterior(vec2(3, 2), 0.4), table}, {halfspace(vec2(0, 1), 4.0), table}};
  for (int tau = 0; tau < 6; ++tau) {
    const auto obs = observe_obstacle(a, tau);
    EXPECT_EQ(std::get<BallExterior>(obs[0].shape).center, Vec(vec2(3, 2) + table[std::size_t(tau)]));
    EXPECT_NEAR(std::get<Halfspace>(obs[1].shape).b, 4.0 + table[std::size_t(tau)][1], 1e-15);
  }
}

TEST(Arenas, PresetsAreValid) {
  for (const char* name : {"maze", "maze_training", "ball_run"}) EXPECT_NO_THROW(validate_arena(arena_preset(name)));
  EXPECT_THROW(arena_preset("nope"), RejectedInput);
  Arena bad = maze_arena();
  bad.goal = vec2(2.3, 2.5);  // inside the disk
  EXPECT_THROW(validate_arena(bad), RejectedInput);
}
