#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace plsim {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Raised when an argument lies outside the domain an operation is defined on.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when a dataset violates the shape or finiteness contract.
class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a linear system or matrix factorization fails numerically.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// -------------------------------------------------------------------------
// Data
// -------------------------------------------------------------------------

/// One cluster of repeated measurements: m_i rows of (y, x, z).
struct Subject {
  std::string id;
  Vector y;  // m_i
  Matrix x;  // m_i x p (index covariates)
  Matrix z;  // m_i x q (linear covariates)

  Index size() const { return y.size(); }
};

/// Clustered sample {(Y_ij, X_ij, Z_ij)}. Immutable after construction; the
/// row-stacked copies of y, X and Z are kept alongside the per-subject view
/// so that smoothers can work on all N observations at once.
class LongitudinalDataset {
 public:
  explicit LongitudinalDataset(std::vector<Subject> subjects);

  const std::vector<Subject>& subjects() const { return subjects_; }
  const Subject& subject(Index i) const { return subjects_[static_cast<std::size_t>(i)]; }

  Index n() const { return static_cast<Index>(subjects_.size()); }
  Index p() const { return p_; }
  Index q() const { return q_; }
  Index total_size() const { return y_.size(); }
  Index max_cluster_size() const { return max_cluster_; }
  bool all_clusters_at_least(Index m) const;

  /// First stacked row of subject i.
  Index offset(Index i) const { return offsets_[static_cast<std::size_t>(i)]; }
  Index cluster_size(Index i) const { return subject(i).size(); }
  /// Subject that owns stacked row `row`.
  Index subject_of_row(Index row) const { return row_subject_[static_cast<std::size_t>(row)]; }

  const Vector& y() const { return y_; }
  const Matrix& x() const { return x_; }
  const Matrix& z() const { return z_; }

  /// Copy keeping only the listed X and Z columns (0-based, in the given order).
  LongitudinalDataset select_columns(const std::vector<Index>& x_columns,
                                     const std::vector<Index>& z_columns) const;

 private:
  std::vector<Subject> subjects_;
  Index p_ = 0;
  Index q_ = 0;
  Index max_cluster_ = 0;
  std::vector<Index> offsets_;
  std::vector<Index> row_subject_;
  Vector y_;
  Matrix x_;
  Matrix z_;
};

// -------------------------------------------------------------------------
// Index parameter and the delete-one-component map
// -------------------------------------------------------------------------

/// beta(reduced): inserts sqrt(1 - |reduced|^2) at position `anchor` (0-based).
Vector embed_beta(const Vector& reduced, Index anchor);

/// d beta / d reduced, a p x (p-1) matrix.
Matrix jacobian(const Vector& reduced, Index anchor);

/// Drops coordinate `anchor` from a full index vector.
Vector reduce_beta(const Vector& beta, Index anchor);

struct AnchorChoice {
  Index anchor = 0;
  Vector beta;  // unit norm, beta[anchor] > 0
};

/// Anchor = largest |beta_j| (smallest index on ties); the vector is flipped so
/// that the anchor coordinate is positive and then normalized.
AnchorChoice choose_anchor(const Vector& beta_init);

/// Unit-norm index vector together with its anchored (p-1)-dimensional form.
class IndexParam {
 public:
  IndexParam() = default;

  static IndexParam from_reduced(const Vector& reduced, Index anchor);
  /// `beta` must be unit norm with a positive anchor coordinate.
  static IndexParam from_beta(const Vector& beta, Index anchor);
  /// choose_anchor() followed by from_beta().
  static IndexParam from_direction(const Vector& direction);

  const Vector& beta() const { return beta_; }
  const Vector& reduced() const { return reduced_; }
  Index anchor() const { return anchor_; }
  Index p() const { return beta_.size(); }

  Matrix jacobian() const { return plsim::jacobian(reduced_, anchor_); }
  /// Same direction re-expressed with another anchor; throws if beta[anchor] <= 0.
  IndexParam with_anchor(Index anchor) const;

 private:
  Vector beta_;
  Vector reduced_;
  Index anchor_ = 0;
};

// -------------------------------------------------------------------------
// Fit output
// -------------------------------------------------------------------------

/// Link estimate at one index value.
struct GPoint {
  double t = 0.0;
  double g = 0.0;
  double g_prime = 0.0;
};

struct TraceEntry {
  int iteration = 0;
  double step_norm = 0.0;
  double score_norm = 0.0;
  double bandwidth = 0.0;
  double rho = 0.0;
  double objective = 0.0;  // Q_n (+ penalty) for QIF; unused by GEE
};

struct FitResult {
  IndexParam beta;
  Vector theta;
  /// Link estimates at every observed index value, in stacked row order.
  std::vector<GPoint> g_grid;
  /// Covariance of (beta^(r), theta), (p-1+q) square.
  Matrix sandwich_cov;
  /// Covariance of (beta, theta), (p+q) square, rank <= p-1+q.
  Matrix full_cov;
  int iterations = 0;
  bool converged = false;
  /// Norm of the estimating equation (GEE) or gradient proxy (QIF) at the estimate.
  double score_norm = 0.0;
  double bandwidth = 0.0;
  double rho = 0.0;
  std::vector<TraceEntry> trace;

  /// xi = (beta^(r), theta).
  Vector xi() const;
};

/// Stacks the reduced index vector and theta.
Vector stack_xi(const IndexParam& beta, const Vector& theta);

/// Block matrix diag(J, I_q) mapping reduced-parameter perturbations to (beta, theta).
Matrix full_parameter_map(const IndexParam& beta, Index q);

}  // namespace plsim
