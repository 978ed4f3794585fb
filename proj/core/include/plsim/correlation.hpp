#pragma once

#include "plsim/types.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace plsim {

enum class CorrelationKind { Independence, Exchangeable, Ar1 };
enum class VariancePooling { Pooled, PerSubject };

/// "independence" | "exchangeable" | "ar1"
CorrelationKind parse_correlation_kind(std::string_view s);
std::string to_string(CorrelationKind kind);
/// "pooled" | "per_subject"
VariancePooling parse_variance_pooling(std::string_view s);
std::string to_string(VariancePooling pooling);

/// Open interval of rho values giving a positive definite R for cluster size m.
struct RhoRange {
  double lower;
  double upper;
};
RhoRange rho_range(CorrelationKind kind, Index m);

/// R(rho), m x m. Independence ignores rho.
Matrix build_correlation(CorrelationKind kind, double rho, Index m);

/// Moment estimator of rho from standardized residual vectors, clamped 1e-6
/// inside the positive-definite range for the largest cluster.
double estimate_rho(const std::vector<Vector>& standardized_residuals, CorrelationKind kind);

/// Diagonal of A_i per subject. Nonpositive estimates fall back to the pooled
/// value (or 1 when every residual is zero).
std::vector<Vector> estimate_marginal_variance(const std::vector<Vector>& residuals, VariancePooling pooling);

/// Pooled. A per-subject variance from a handful of rows is a chi-square
/// variate with few degrees of freedom, and weighting by its inverse costs
/// more efficiency than the heteroscedasticity it captures.
VariancePooling default_pooling(const LongitudinalDataset& data);

/// QIF basis matrices: [I] | [I, 11'-I] | [I, sub+super diagonal, corners].
std::vector<Matrix> basis_matrices(CorrelationKind kind, Index m);

/// V_i = A_i^{1/2} R_i(rho) A_i^{1/2} for every subject, with cached inverses.
class WorkingCovariance {
 public:
  WorkingCovariance(CorrelationKind kind, double rho, std::vector<Vector> marginal_variances);

  /// V_i = I for every cluster (working independence with unit variances).
  static WorkingCovariance identity(const LongitudinalDataset& data);

  CorrelationKind kind() const { return kind_; }
  double rho() const { return rho_; }
  Index size() const { return static_cast<Index>(inverses_.size()); }
  const Vector& marginal_variance(Index i) const { return variances_[static_cast<std::size_t>(i)]; }
  const std::vector<Vector>& marginal_variances() const { return variances_; }
  Matrix covariance(Index i) const;
  const Matrix& inverse(Index i) const { return inverses_[static_cast<std::size_t>(i)]; }

 private:
  CorrelationKind kind_;
  double rho_;
  std::vector<Vector> variances_;
  std::vector<Matrix> inverses_;
};

/// Splits stacked residuals into per-subject vectors.
std::vector<Vector> split_by_subject(const LongitudinalDataset& data, const Vector& stacked);

/// Estimates A_i, standardizes, then estimates rho. `pooling` defaults to default_pooling(data).
WorkingCovariance estimate_working_covariance(const LongitudinalDataset& data, const Vector& residuals,
                                              CorrelationKind kind,
                                              std::optional<VariancePooling> pooling = std::nullopt);

}  // namespace plsim
