#pragma once

#include "plsim/gee_solver.hpp"

#include <vector>

namespace plsim {

/// QIF shares the GEE settings. `correlation` picks the basis matrices
/// (independence gives k = 1), `pooling`/`unit_variance` pick A_i.
struct QifConfig : GeeConfig {
  /// Relative step of the central differences used for dU/dxi.
  double fd_step = 1e-6;
  /// C_n gets 1e-8 * trace(C_n) / l added to its diagonal above this condition number.
  double condition_limit = 1e12;

  void validate() const;
};

/// Stacked blocks Lambda_i A_i^-1/2 M_s A_i^-1/2 e_i, s = 1..k.
/// `lambda_i` is (p-1+q) x m_i, `variance_i` the diagonal of A_i.
Vector extended_score(const Matrix& lambda_i, const Vector& residual_i, const Vector& variance_i,
                      const std::vector<Matrix>& bases);

struct QifState {
  Vector mean_score;     // U_n, length l
  Matrix second_moment;  // C_n, l x l, after the ridge when one was needed
  double objective = 0.0;
  bool ridged = false;
  double min_eigenvalue = 0.0;  // of C_n before any ridge
};

/// U_n, C_n and Q_n = U_n' C_n^-1 U_n from per-subject scores.
QifState qif_state_from_scores(const std::vector<Vector>& scores, double condition_limit = 1e12);

/// Diagonals of A_i for a QIF fit at `state`: ones under unit_variance,
/// otherwise the marginal variances of the configured pooling.
std::vector<Vector> qif_variances(const LongitudinalDataset& data, const EstimatingState& state,
                                  const QifConfig& cfg);

QifState qif_objective(const LongitudinalDataset& data, const EstimatingState& state,
                       const std::vector<Vector>& variances, const QifConfig& cfg);
QifState qif_objective(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                       const KernelConfig& kernel, const std::vector<Vector>& variances, const QifConfig& cfg);

/// Initial estimate and bandwidth as in solve_gee, then Gauss-Newton on Q_n.
FitResult solve_qif(const LongitudinalDataset& data, const QifConfig& cfg);

/// Gauss-Newton from `start`: curvature 2 J'C^-1 J with J = dU_n/dxi, and the
/// gradient of Q_n by central differences (C_n moves with xi). With a penalty
/// the step solves (2 J'C^-1 J + E) d = -(grad Q_n + E xi) and the line search
/// works on Q_n + penalty.value(xi); zeroing and freezing follow solve_gee_from.
FitResult solve_qif_from(const LongitudinalDataset& data, const QifConfig& cfg, const StartingPoint& start,
                         const LqaPenalty* penalty = nullptr);

/// (Gamma' Sigma^-1 Gamma)^-1 / n with Sigma = C_n, restricted to the active
/// coordinates when `active` is given. Throws NumericalError if Gamma is rank deficient.
CovarianceEstimate covariance_qif(const LongitudinalDataset& data, const EstimatingState& state,
                                  const std::vector<Vector>& variances, const QifConfig& cfg,
                                  const std::vector<bool>& active = {});
CovarianceEstimate covariance_qif(const LongitudinalDataset& data, const FitResult& fit, const KernelConfig& kernel,
                                  const QifConfig& cfg);

}  // namespace plsim
