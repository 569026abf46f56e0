#pragma once

// Shared vocabulary for the cdiff headers: vector aliases, error types,
// the injected random generator and a few small numeric helpers.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace cdiff {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Thrown when an argument violates a documented precondition
/// (dimension mismatch, out-of-range index, invalid parameter).
class RejectedInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a NaN or infinity shows up where a finite value is required.
class NonFiniteValue : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown by projection when the iteration budget runs out before the
/// point becomes feasible. Carries the best iterate and its residual.
class InfeasibleProjection : public std::runtime_error {
 public:
  InfeasibleProjection(Vec best, double residual)
      : std::runtime_error("projection failed to reach feasibility (residual " +
                           std::to_string(residual) + ")"),
        best_(std::move(best)),
        residual_(residual) {}

  const Vec& best() const { return best_; }
  double residual() const { return residual_; }

 private:
  Vec best_;
  double residual_;
};

/// All randomness flows through an explicitly seeded generator.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

/// Derive an independent child seed from a parent seed and a stream id
/// (splitmix64 finaliser).
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Vec standard_normal(Index n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vec z(n);
  for (Index i = 0; i < n; ++i) z[i] = dist(rng);
  return z;
}

/// Row-major fill so the draw order is independent of storage order.
inline Mat standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat z(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) z(r, c) = dist(rng);
  return z;
}

inline double uniform(double lo, double hi, Rng& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const char* what) {
  if (!x.allFinite()) throw NonFiniteValue(std::string("non-finite value in ") + what);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw RejectedInput(msg);
}

inline std::string dims_message(const char* what, Index expected, Index got) {
  std::ostringstream os;
  os << what << ": expected dimension " << expected << ", got " << got;
  return os.str();
}

inline void require_dim(Index expected, Index got, const char* what) {
  if (expected != got) throw RejectedInput(dims_message(what, expected, got));
}

inline double positive_part(double v) { return v > 0.0 ? v : 0.0; }

}  // namespace cdiff
