#include "cdiff/score.hpp"

#include <gtest/gtest.h>

using namespace cdiff;

TEST(Schedule, TwoStepProducts) {
  Vec b(2);
  b << 0.1, 0.2;
  const NoiseSchedule s(b);
  EXPECT_NEAR(s.alpha_bar(0), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(1), 0.72, 1e-15);
  const auto built = build_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(built.beta(1), 0.2, 1e-15);
  EXPECT_NEAR(built.alpha_bar(1), 0.72, 1e-15);
}

TEST(Schedule, SingleStep) {
  const auto s = build_schedule(1, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(0), 0.5);
}

TEST(Schedule, CumulativeProductOracle) {
  const auto s = build_schedule(100, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int t = 0; t < 100; ++t) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * t / 99.0L);
  EXPECT_NEAR(s.alpha_bar(99), double(prod), 1e-12);
  for (int t = 1; t < 100; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  EXPECT_GT(s.alpha_bar(99), 0.0);
  EXPECT_LT(s.alpha_bar(0), 1.0);
}

TEST(Schedule, RejectsInvalidRange) {
  EXPECT_THROW(build_schedule(10, 0.0, 0.1), RejectedInput);
  EXPECT_THROW(build_schedule(10, 0.2, 0.1), RejectedInput);
  EXPECT_THROW(build_schedule(10, 0.1, 1.0), RejectedInput);
  EXPECT_THROW(build_schedule(0, 0.1, 0.2), RejectedInput);
  EXPECT_THROW(build_schedule(10, 0.1, 0.2).beta(10), RejectedInput);
}

TEST(AnalyticScore, StandardGaussian) {
  const ScoreModel m = standard_gaussian(2);
  const Vec s = analytic_score(m, Vec::Ones(2));
  EXPECT_DOUBLE_EQ(s[0], -1.0);
  EXPECT_DOUBLE_EQ(s[1], -1.0);
}

TEST(AnalyticScore, VanishesAtMode) {
  Vec mu(2);
  mu << 2, 0;
  const ScoreModel m = make_gaussian(mu, Vec::Constant(2, 4.0));
  EXPECT_EQ(analytic_score(m, mu).norm(), 0.0);
  EXPECT_THROW(analytic_score(m, Vec::Zero(3)), RejectedInput);
}

TEST(AnalyticScore, GmmMatchesFiniteDifferenceOfLogDensity) {
  Vec m1(2), m2(2);
  m1 << -1, 0.5;
  m2 << 2, -1;
  Vec w(2);
  w << 0.3, 0.7;
  const auto gmm = make_gmm(w, {make_gaussian(m1, Vec::Constant(2, 0.5)), make_gaussian(m2, Vec::Constant(2, 2.0))});
  auto logp = [&](const Vec& x) {
    double p = 0.0;
    for (int k = 0; k < 2; ++k) p += w[k] * std::exp(detail::gaussian_log_density(gmm.components[k], x));
    return std::log(p);
  };
  Rng rng = make_rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x = 1.5 * standard_normal(2, rng);
    const Vec s = analytic_score(gmm, x);
    for (int i = 0; i < 2; ++i) {
      Vec xp = x, xm = x;
      xp[i] += 1e-5;
      xm[i] -= 1e-5;
      const double fd = (logp(xp) - logp(xm)) / 2e-5;
      EXPECT_LE(std::abs(fd - s[i]) / std::max(1.0, std::abs(fd)), 1e-6);
    }
  }
}

TEST(AnalyticScore, GmmWeightsMustSumToOne) {
  Vec w(2);
  w << 0.5, 0.6;
  EXPECT_THROW(make_gmm(w, {standard_gaussian(1), standard_gaussian(1)}), RejectedInput);
  EXPECT_THROW(make_gaussian(Vec::Zero(1), Vec::Zero(1)), RejectedInput);
}

TEST(ScoreFromNoise, Examples) {
  Vec b(1);
  b << 0.25;  // alpha_bar(0) = 0.75
  const NoiseSchedule s(b);
  EXPECT_DOUBLE_EQ(score_from_noise(Vec::Constant(1, 0.5), 0, s)[0], -1.0);
  EXPECT_EQ(score_from_noise(Vec::Zero(3), 0, s).norm(), 0.0);
  EXPECT_THROW(score_from_noise(Vec::Zero(1), 1, s), RejectedInput);
}

TEST(ScoreFromNoise, ClosedFormReevaluation) {
  Vec b(1);
  b << 0.81;  // alpha_bar = 0.19
  const NoiseSchedule s(b);
  Rng rng = make_rng(8);
  const Vec eps = standard_normal(5, rng);
  const Vec got = score_from_noise(eps, 0, s);
  for (Index i = 0; i < 5; ++i) EXPECT_NEAR(got[i], -eps[i] / std::sqrt(0.81), 1e-12);
}

TEST(ScoreFromNoise, TweedieConsistencyForGaussian) {
  const auto sched = build_schedule(50, 1e-3, 0.05);
  const AnalyticGaussian g = make_gaussian(Vec::Constant(1, 0.7), Vec::Constant(1, 2.5));
  for (int t : {0, 10, 49}) {
    for (double x : {-2.0, 0.0, 1.3}) {
      const Vec xv = Vec::Constant(1, x);
      const Vec via_noise = score_from_noise(exact_noise_prediction(g, xv, t, sched), t, sched);
      const Vec direct = analytic_score(diffused(g, t, sched), xv);
      EXPECT_NEAR(via_noise[0], direct[0], 1e-10);
    }
  }
}

TEST(ForwardDiffuse, IdentityAtNoNoiseAndDeterminism) {
  Vec b(1);
  b << 1e-300;
  const NoiseSchedule tiny(b);
  Rng rng = make_rng(9);
  const Vec x0 = standard_normal(4, rng);
  EXPECT_LT((forward_diffuse(x0, 0, tiny, rng).x_t - x0).norm(), 1e-12);

  const auto s = build_schedule(10, 0.01, 0.2);
  Rng a = make_rng(5), c = make_rng(5);
  const auto d1 = forward_diffuse(x0, 4, s, a);
  const auto d2 = forward_diffuse(x0, 4, s, c);
  EXPECT_EQ(d1.x_t, d2.x_t);
  EXPECT_EQ(d1.eps, d2.eps);
}

TEST(ForwardDiffuse, MonteCarloVariance) {
  Vec b(1);
  b << 0.5;
  const NoiseSchedule s(b);
  Rng rng = make_rng(10);
  double sum = 0, sq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = forward_diffuse(Vec::Zero(1), 0, s, rng).x_t[0];
    sum += x;
    sq += x * x;
  }
  const double var = sq / n - (sum / n) * (sum / n);
  EXPECT_NEAR(var, 0.5, 0.01);
}

namespace {

ExpertDataset point_dataset(const std::vector<Vec>& points) {
  ExpertDataset ds;
  for (const auto& p : points) ds.trajectories.push_back(RowMat(p.transpose()));
  compute_stats(ds);
  return ds;
}

}  // namespace

TEST(TrainScore, ZeroEpochsReturnsInitialisedModel) {
  const auto ds = point_dataset({Vec::Zero(2), Vec::Ones(2)});
  const auto sched = build_schedule(20, 1e-3, 0.05);
  ScoreTrainingConfig cfg;
  cfg.hidden = {8};
  cfg.epochs = 0;
  cfg.seed = 3;
  const auto a = train_score(ds, sched, cfg);
  Rng rng = make_rng(3);
  const Mlp init = Mlp::glorot({3, 8, 2}, Activation::tanh, rng);
  EXPECT_EQ(a.model.net.parameters(), init.parameters());
  EXPECT_TRUE(a.train_loss.empty());
}

TEST(TrainScore, EmptyDatasetRejected) {
  ExpertDataset ds;
  EXPECT_THROW(train_score(ds, build_schedule(10, 1e-3, 0.1), {}), RejectedInput);
}

TEST(TrainScore, PointMassDenoisesToThePoint) {
  const auto ds = point_dataset(std::vector<Vec>(2048, Vec::Zero(2)));
  const auto sched = build_schedule(100, 1e-4, 0.02);
  ScoreTrainingConfig cfg;
  cfg.hidden = {32, 32};
  cfg.epochs = 150;
  cfg.learning_rate = 3e-3;
  cfg.seed = 11;
  const auto trained = train_score(ds, sched, cfg);
  Rng rng = make_rng(12);
  for (int t : {10, 50, 99}) {
    double err = 0.0;
    const int n = 200;
    for (int i = 0; i < n; ++i) {
      const auto d = forward_diffuse(Vec::Zero(2), t, sched, rng);
      Vec in(3);
      in << d.x_t, double(t) / 100.0;
      const Vec eps = trained.model.net.forward(in);
      const double ab = sched.alpha_bar(t);
      err += ((d.x_t - std::sqrt(1 - ab) * eps) / std::sqrt(ab)).norm();
    }
    EXPECT_LE(err / n, 0.1) << "t=" << t;
  }
}

TEST(TrainScore, GaussianDataScoreDirection) {
  Rng rng = make_rng(13);
  std::vector<Vec> pts;
  for (int i = 0; i < 2000; ++i) pts.push_back(standard_normal(2, rng));
  const auto ds = point_dataset(pts);
  const auto sched = build_schedule(100, 1e-4, 0.02);
  ScoreTrainingConfig cfg;
  cfg.hidden = {32, 32};
  cfg.epochs = 40;
  cfg.learning_rate = 3e-3;
  cfg.seed = 14;
  const auto trained = train_score(ds, sched, cfg);
  ASSERT_EQ(trained.validation_loss.size(), 40u);
  const ScoreModel model = trained.model;
  // Normalised data is ~N(0, I), so the diffused score is ~ -y at every t.
  for (int t : {0, 50, 99})
    for (double a = -2.0; a <= 2.0; a += 0.5)
      for (double b = -2.0; b <= 2.0; b += 0.5) {
        Vec y(2);
        y << a, b;
        if (y.norm() < 0.5) continue;
        const Vec s = model_score(model, y, t);
        EXPECT_GE(s.dot(-y) / (s.norm() * y.norm()), 0.9) << "t=" << t << " y=" << y.transpose();
      }
}

TEST(ExpertDatasetStats, NormalisedDataIsCentredAndScaled) {
  Rng rng = make_rng(15);
  ExpertDataset ds;
  for (int i = 0; i < 100; ++i) {
    RowMat tr(5, 3);
    for (Index r = 0; r < 5; ++r) tr.row(r) << 3 + 2 * standard_normal(1, rng)[0], -1 + 0.1 * r, 7.0;
    ds.trajectories.push_back(tr);
  }
  compute_stats(ds);
  EXPECT_EQ(ds.scale[2], 1.0);  // constant dimension
  const AffineMap m = ds.coords();
  Vec sum = Vec::Zero(3), sq = Vec::Zero(3);
  double n = 0;
  for (Index i = 0; i < ds.size(); ++i) {
    const RowMat y = unflatten(m.to_model(ds.flat(i)), 3);
    for (Index r = 0; r < y.rows(); ++r) {
      sum += y.row(r).transpose();
      sq += y.row(r).transpose().cwiseAbs2();
      ++n;
    }
  }
  for (int k = 0; k < 2; ++k) {
    EXPECT_NEAR(sum[k] / n, 0.0, 0.05);
    EXPECT_NEAR(std::sqrt(sq[k] / n), 1.0, 0.05);
  }
}
