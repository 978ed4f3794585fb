#pragma once

#include "plsim/types.hpp"

#include <span>
#include <stdexcept>
#include <vector>

namespace plsim {

/// Bandwidth h of K_h(u) = K(u/h)/h and an optional ridge for the local-linear
/// denominator. With ridge > 0 the second moment S2 is replaced by
/// S2 + ridge * h^2 * S0, which degrades an isolated point to a local-constant
/// fit instead of a singular one. ridge = 0 gives the plain local-linear weights.
struct KernelConfig {
  double bandwidth = 1.0;
  double ridge = 0.0;

  void validate() const;
};

/// Epanechnikov kernel 0.75 (1 - u^2) on [-1, 1].
double kernel_eval(double u);

struct WeightMoments {
  double s0 = 0.0;
  double s1 = 0.0;
  double s2 = 0.0;
};

/// S_l(t) = N^-1 sum K_h(u_ij - t) (u_ij - t)^l for l = 0, 1, 2.
WeightMoments weight_moments(double t, std::span<const double> index_values, const KernelConfig& cfg);

/// Denominator S0 * S2' - S1^2 after the ridge adjustment.
double weight_denominator(const WeightMoments& m, const KernelConfig& cfg);

/// True when the denominator is at or below 1e-12 * max(1, S0^2).
bool is_degenerate(const WeightMoments& m, const KernelConfig& cfg);

class DegenerateSmootherError : public std::runtime_error {
 public:
  DegenerateSmootherError(double t, double denominator, const std::string& where = {});
  double t() const { return t_; }
  double denominator() const { return denominator_; }

 private:
  double t_;
  double denominator_;
};

class BandwidthSelectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Local-linear weights W (for g) and W~ (for g') at every observation.
struct LocalWeights {
  Vector w;
  Vector w_tilde;
};

LocalWeights local_linear_weights(double t, std::span<const double> index_values, const KernelConfig& cfg);

struct LinkEstimate {
  double g = 0.0;
  double g_prime = 0.0;
};

/// g^(t) = sum W (Y - Z'theta), g^'(t) = sum W~ (Y - Z'theta).
LinkEstimate estimate_g(double t, const IndexParam& beta, const Vector& theta, const LongitudinalDataset& data,
                        const KernelConfig& cfg);

struct ConditionalMeans {
  Vector g1;  // E[X | X'beta = t], length p
  Vector g2;  // E[Z | X'beta = t], length q
};

ConditionalMeans estimate_g1_g2(double t, const IndexParam& beta, const LongitudinalDataset& data,
                                const KernelConfig& cfg);

struct SmootherEval {
  double t = 0.0;
  double g_hat = 0.0;
  double g_prime_hat = 0.0;
  Vector g1_hat;
  Vector g2_hat;
  double effective_mass = 0.0;  // S0(t)
};

/// Smoothed quantities at every observed index value, stacked row order.
struct SmootherFit {
  Vector g;
  Vector g_prime;
  Matrix g1;  // N x p
  Matrix g2;  // N x q
};

/// Windowed evaluator for a fixed (data, beta, h). Sorts the index values once
/// so each evaluation only visits the observations inside [t - h, t + h].
/// Holds a reference to `data`, which must outlive the smoother.
class LocalLinearSmoother {
 public:
  LocalLinearSmoother(const LongitudinalDataset& data, const Vector& beta, KernelConfig cfg);

  const Vector& index_values() const { return index_; }
  const KernelConfig& config() const { return cfg_; }

  /// Throws DegenerateSmootherError when the weights are undefined at t.
  SmootherEval evaluate(double t, const Vector& theta) const;

  /// Evaluates at every observed index value. Degeneracy is reported with
  /// the subject id and row.
  SmootherFit fit_observed(const Vector& theta) const;

  /// g^ and g^' on an arbitrary grid, clipped to the observed index range.
  std::vector<GPoint> curve(const Vector& theta, std::span<const double> grid) const;

  /// Leave-one-subject-out prediction of g at the index values of `subject`'s
  /// rows; rows whose weights are degenerate come back as NaN.
  Vector leave_subject_out(Index subject, const Vector& partial_residual) const;

 private:
  template <class Visit>
  void for_window(double t, Index excluded_subject, Visit&& visit) const;

  WeightMoments moments(double t, Index excluded_subject) const;
  SmootherEval evaluate_sorted(double t, const Vector& r_sorted) const;
  Vector sorted_partial_residual(const Vector& theta) const;

  const LongitudinalDataset* data_;
  KernelConfig cfg_;
  Vector index_;
  std::vector<double> sorted_;  // index values in ascending order
  std::vector<Index> order_;    // stacked row of each sorted position
  Vector sorted_y_;
  Matrix sorted_xz_;  // (p+q) x N, columns follow sorted_
};

struct BandwidthSelection {
  double bandwidth = 0.0;
  std::vector<double> grid;
  std::vector<double> cv_error;      // mean squared leave-one-subject-out error, NaN if nothing evaluable
  std::vector<Index> skipped_points;  // degenerate evaluations per grid entry
};

/// Picks the grid bandwidth minimizing the leave-one-subject-out prediction
/// error of Y - Z'theta. Ties (relative 1e-9) go to the smallest bandwidth.
/// The error is averaged over observations whose index value lies between
/// the `trim` and 1 - `trim` quantiles.
BandwidthSelection select_bandwidth(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                                    std::vector<double> grid, double ridge = 0.0, double trim = 0.05);

/// 10 log-spaced bandwidths between 2 and 8 times sd(t) N^{-1/5}. Below that
/// range the estimated derivative g^' is noisy enough at n of a few dozen
/// subjects that the estimating equations often have no nearby root.
std::vector<double> default_bandwidth_grid(const Vector& index_values);

}  // namespace plsim
