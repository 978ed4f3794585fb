#pragma once

#include "plsim/correlation.hpp"
#include "plsim/kernel_smoother.hpp"
#include "plsim/types.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace plsim {

enum class BandwidthPolicy {
  Fixed,                       // use GeeConfig::bandwidth
  CrossValidateOnce,           // select at the starting point, then hold
  CrossValidateEachIteration,  // re-select before every Newton step
};

struct GeeConfig {
  CorrelationKind correlation = CorrelationKind::Exchangeable;
  /// Marginal variance model for A_i; unset means default_pooling(data).
  std::optional<VariancePooling> pooling;
  /// Working independence in the strict sense: V_i = I, nothing estimated.
  bool unit_variance = false;
  int max_iterations = 100;
  double tolerance = 1e-6;
  double damping = 1.0;
  BandwidthPolicy bandwidth_policy = BandwidthPolicy::CrossValidateOnce;
  double bandwidth = 0.0;
  /// Cross-validation grid; empty means default_bandwidth_grid() at the starting point.
  std::vector<double> bandwidth_grid;
  /// Denominator ridge handed to the smoother (see KernelConfig).
  double kernel_ridge = 1e-3;

  void validate() const;
};

/// The configuration used for the "independence" comparator: V_i = I.
GeeConfig working_independence(GeeConfig base = {});

/// Everything that depends on (beta, theta, h): smoothed link and conditional
/// means at the observed index values, residuals Y - G^ - Z theta, and the
/// stacked bias-corrected derivative rows. Row k of `lambda` is the column of
/// Lambda^_i belonging to observation k:
///   [ J' (X_k - g1^(t_k)) g^'(t_k) ; Z_k - g2^(t_k) ].
struct EstimatingState {
  IndexParam beta;
  Vector theta;
  double bandwidth = 0.0;
  Vector index;
  SmootherFit smooth;
  Vector residual;
  Matrix lambda;  // N x (p-1+q)

  Index dimension() const { return lambda.cols(); }
};

EstimatingState evaluate_state(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                               const KernelConfig& kernel);

/// Per-subject Lambda^_i, each (p-1+q) x m_i.
struct LambdaHat {
  std::vector<Matrix> blocks;
};

LambdaHat build_lambda_hat(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                           const KernelConfig& kernel);
LambdaHat build_lambda_hat(const LongitudinalDataset& data, const EstimatingState& state);

/// sum_i Lambda^_i V_i^-1 (Y_i - G^_i - Z_i theta).
Vector gee_score(const LongitudinalDataset& data, const EstimatingState& state, const WorkingCovariance& v);
Vector gee_score(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                 const KernelConfig& kernel, const WorkingCovariance& v);

/// Pi_n = sum_i Lambda^_i V_i^-1 Lambda^_i'.
Matrix gee_information(const LongitudinalDataset& data, const EstimatingState& state, const WorkingCovariance& v);
Matrix gee_information(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                       const KernelConfig& kernel, const WorkingCovariance& v);

/// Working covariance implied by `cfg` at the state's residuals.
WorkingCovariance working_covariance_for(const LongitudinalDataset& data, const EstimatingState& state,
                                         const GeeConfig& cfg);

struct InitialEstimate {
  IndexParam beta;
  Vector theta;
};

/// Pooled least squares of Y on (1, X, Z), ignoring clustering. The X block
/// gives the index direction (through choose_anchor), the Z block theta.
InitialEstimate initial_estimate(const LongitudinalDataset& data);

/// Bandwidth for a solve starting at (beta, theta) under cfg's policy.
double resolve_bandwidth(const LongitudinalDataset& data, const GeeConfig& cfg, const IndexParam& beta,
                         const Vector& theta);

/// Local quadratic approximation of a coordinate-wise penalty on xi.
struct LqaPenalty {
  /// Diagonal of E(xi): q_lambda(|xi_j|) / (|xi_j| + 1e-8), zero where unpenalized.
  std::function<Vector(const Vector&)> diagonal;
  /// sum_j p_lambda(|xi_j|); used as the merit term by the QIF solver.
  std::function<double(const Vector&)> value;
  /// Coordinates that may be hard-zeroed.
  std::vector<bool> penalized;
  double zero_threshold = 1e-4;
  /// Penalty slope at zero per coordinate, valid while |xi_j| <= kink_j. A
  /// coordinate in that range whose one-dimensional quadratic model has its
  /// minimizer at zero is set to zero. Empty disables the test.
  Vector kink;
};

struct StartingPoint {
  IndexParam beta;
  Vector theta;
  double bandwidth = 0.0;
};

/// Steps 1-4: initial_estimate, bandwidth, then Fisher-scoring updates
/// xi <- xi + Pi_n^-1 Q_n with smoother and V_i refreshed every iteration.
FitResult solve_gee(const LongitudinalDataset& data, const GeeConfig& cfg);

/// Iterates from `start` with start.bandwidth (re-selected per iteration only
/// under CrossValidateEachIteration). With a penalty the update is
/// xi <- xi + (Pi_n + n E)^-1 (Q_n - n E xi) on the active coordinates, and
/// penalized coordinates falling below the zero threshold are frozen at 0.
/// Penalized coordinates that are exactly zero at the start stay frozen.
FitResult solve_gee_from(const LongitudinalDataset& data, const GeeConfig& cfg, const StartingPoint& start,
                         const LqaPenalty* penalty = nullptr);

struct CovarianceEstimate {
  Matrix reduced;  // (p-1+q) square, for (beta^(r), theta)
  Matrix full;     // (p+q) square, for (beta, theta)
};

/// Pi^-1 Omega Pi^-1 / n with Pi, Omega normalized by n, and its image under diag(J, I_q).
CovarianceEstimate sandwich_covariance_gee(const LongitudinalDataset& data, const FitResult& fit,
                                           const KernelConfig& kernel, const WorkingCovariance& v);
CovarianceEstimate sandwich_covariance_gee(const LongitudinalDataset& data, const EstimatingState& state,
                                           const WorkingCovariance& v, const std::vector<bool>& active = {});

/// Link estimates at the observed points of a state, stacked row order.
std::vector<GPoint> g_points(const EstimatingState& state);

}  // namespace plsim
