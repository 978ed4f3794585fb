#pragma once

#include "plsim/correlation.hpp"
#include "plsim/qif_solver.hpp"
#include "plsim/selector.hpp"
#include "plsim/types.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace plsim {

/// Subjects i (1-based) with i <= floor(n * numerator / denominator) that are
/// not claimed by an earlier stratum get this cluster size and error scale.
struct SubjectStratum {
  int numerator = 1;
  int denominator = 1;
  Index cluster_size = 3;
  double sigma = 1.0;
};

/// Y_ij = g(X_ij' beta0) + Z_ij' theta0 + e_ij with X ~ N(0, I_p),
/// Z ~ U(0, 1)^q and e_i ~ N(0, sigma_i^2 R(rho)).
struct SimDesign {
  std::string name = "custom";
  Index n = 60;
  Vector beta0;
  Vector theta0;
  std::function<double(double)> link = [](double t) { return std::exp(t); };
  CorrelationKind error_kind = CorrelationKind::Exchangeable;
  double rho = 0.6;
  std::vector<SubjectStratum> strata;
  std::uint64_t seed = 20240601;

  Index p() const { return beta0.size(); }
  Index q() const { return theta0.size(); }
  /// Cluster size and sigma of subject i (0-based).
  SubjectStratum stratum_of(Index i) const;
  void validate() const;
};

/// p = 3, q = 1, m = 3; sigma 1 for the first half of the subjects, 2 after.
SimDesign example1(Index n, CorrelationKind error_kind = CorrelationKind::Exchangeable, std::uint64_t seed = 1);
/// Example 1 coefficients with m = 3, 4, 5 and sigma = 1, 2, 3 by thirds.
SimDesign example2(Index n, CorrelationKind error_kind = CorrelationKind::Exchangeable, std::uint64_t seed = 1);
/// p = 20, q = 30, m = 3, sparse coefficients; sigma 0.5, 1, 2 by thirds.
SimDesign example3(Index n, CorrelationKind error_kind = CorrelationKind::Exchangeable, std::uint64_t seed = 1);

/// Deterministic in (design.seed, replicate).
LongitudinalDataset generate_dataset(const SimDesign& design, std::uint64_t replicate);

enum class MethodKind { Independence, Gee, Qif, PenalizedGee, PenalizedQif, OracleGee, OracleQif };

std::string to_string(MethodKind kind);
MethodKind parse_method_kind(const std::string& s);

struct MethodSpec {
  std::string label;
  MethodKind kind = MethodKind::Gee;
  /// Solver settings (GEE methods use the GeeConfig part). For Independence
  /// the correlation settings are replaced by V_i = I.
  QifConfig solver;
  PenaltyConfig penalty;
};

/// Fits `data` by the given method; oracle methods need the design's supports.
FitResult fit_method(const LongitudinalDataset& data, const MethodSpec& method, const SimDesign& design);

/// Solve on the columns where beta0 / theta0 are nonzero, then re-embed with exact zeros.
FitResult oracle_fit(const LongitudinalDataset& data, const SimDesign& design, const QifConfig& cfg,
                     bool use_qif = false);

struct MetricsReport {
  std::string method;
  int replications = 0;  // successful fits entering the averages
  int failures = 0;
  int nonconverged = 0;
  Vector bias_beta;
  Vector se_beta;  // Monte Carlo standard deviation of the estimates
  Vector bias_theta;
  Vector se_theta;
  double mse_beta = 0.0;
  double mse_theta = 0.0;
  double mse_g = 0.0;
  double r2_beta = 0.0;
  double r2_theta = 0.0;
  double tn_beta = 0.0;
  double tp_beta = 0.0;
  double tn_theta = 0.0;
  double tp_theta = 0.0;
  std::vector<std::string> failure_messages;
};

/// Metrics of fits against the design's truth; fits[k] belongs to datasets[k].
MetricsReport compute_metrics(const SimDesign& design, const std::vector<FitResult>& fits,
                              const std::vector<LongitudinalDataset>& datasets);

/// Per-replicate quantities the metrics are built from.
struct ReplicateSummary {
  bool ok = false;
  bool converged = false;
  Vector beta;
  Vector theta;
  double mse_g = 0.0;
  std::string error;
};

ReplicateSummary summarize_fit(const SimDesign& design, const FitResult& fit, const LongitudinalDataset& data);
MetricsReport reduce_summaries(const SimDesign& design, const std::string& method,
                               const std::vector<ReplicateSummary>& reps);

/// L replicates of every method on shared datasets. `threads` = 0 uses the
/// hardware concurrency. Results do not depend on `threads`. More than 20%
/// failed fits for any method raises NumericalError.
std::vector<MetricsReport> run_replications(const SimDesign& design, const std::vector<MethodSpec>& methods,
                                            int replications, int threads = 0);

}  // namespace plsim
