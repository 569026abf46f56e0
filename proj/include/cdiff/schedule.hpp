#pragma once

#include "cdiff/core.hpp"

namespace cdiff {

/// Variance-preserving noise schedule. Index t runs over [0, T); alpha_bar(t)
/// is the cumulative product of (1 - beta_s) for s <= t.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  explicit NoiseSchedule(Vec betas) : betas_(std::move(betas)) {
    require(betas_.size() > 0, "noise schedule needs at least one step");
    alpha_bars_.resize(betas_.size());
    double prod = 1.0;
    for (Index t = 0; t < betas_.size(); ++t) {
      require(betas_[t] > 0.0 && betas_[t] < 1.0, "noise schedule betas must lie in (0, 1)");
      prod *= 1.0 - betas_[t];
      alpha_bars_[t] = prod;
    }
  }

  int T() const { return int(betas_.size()); }
  const Vec& betas() const { return betas_; }
  const Vec& alpha_bars() const { return alpha_bars_; }

  double beta(int t) const { return betas_[check(t)]; }
  double alpha_bar(int t) const { return alpha_bars_[check(t)]; }

  int check(int t) const {
    if (t < 0 || t >= T())
      throw RejectedInput("diffusion time index " + std::to_string(t) + " outside [0, " +
                          std::to_string(T()) + ")");
    return t;
  }

 private:
  Vec betas_;
  Vec alpha_bars_;
};

struct ScheduleParams {
  int T = 100;
  double beta_min = 1e-4;
  double beta_max = 0.02;
};

/// Linear beta schedule from beta_min to beta_max inclusive.
inline NoiseSchedule build_schedule(int T, double beta_min, double beta_max) {
  require(T > 0, "schedule length T must be positive");
  require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
          "schedule needs 0 < beta_min <= beta_max < 1");
  Vec betas(T);
  for (int t = 0; t < T; ++t)
    betas[t] = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * double(t) / double(T - 1);
  return NoiseSchedule(std::move(betas));
}

inline NoiseSchedule build_schedule(const ScheduleParams& p) {
  return build_schedule(p.T, p.beta_min, p.beta_max);
}

}  // namespace cdiff
