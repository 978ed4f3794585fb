#pragma once

#include "plsim/gee_solver.hpp"
#include "plsim/qif_solver.hpp"

#include <string>
#include <vector>

namespace plsim {

struct PenaltyConfig {
  double c = 3.7;
  /// Empty grids are filled by default_lambda_grid() from the pilot fit.
  std::vector<double> lambda1_grid;
  std::vector<double> lambda2_grid;
  double zero_threshold = 1e-4;
  int max_inner_iterations = 100;
  /// Chain warm starts along increasing lambda1 within each lambda2 row.
  bool warm_start = true;

  void validate() const;
};

/// p'_lambda(x) for x >= 0.
double scad_derivative(double x, double lambda, double c = 3.7);
/// p_lambda(x) for x >= 0.
double scad_penalty(double x, double lambda, double c = 3.7);

/// LQA of the SCAD penalty on xi = (beta^(r), theta): lambda1 on the first
/// p-1 coordinates, lambda2 on the last q. Only coordinates with a positive
/// lambda are marked as penalized.
LqaPenalty make_scad_penalty(Index p, Index q, double lambda1, double lambda2, const PenaltyConfig& cfg);

/// Penalized bias-corrected GEE from the usual initial estimate and bandwidth.
FitResult penalized_gee_solve(const LongitudinalDataset& data, const GeeConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2);
FitResult penalized_gee_solve(const LongitudinalDataset& data, const GeeConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2, const StartingPoint& start);

FitResult penalized_qif_solve(const LongitudinalDataset& data, const QifConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2);
FitResult penalized_qif_solve(const LongitudinalDataset& data, const QifConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2, const StartingPoint& start);

/// Nonzero reduced-beta and theta components plus one for the anchor.
int degrees_of_freedom(const FitResult& fit);

/// Sum of squared residuals Y - Z'theta - g^(X'beta) over all observations.
double residual_sum_of_squares(const LongitudinalDataset& data, const FitResult& fit);

/// log(S/n) + df log(n)/n with n the number of subjects; -inf when S = 0.
double bic_score(const LongitudinalDataset& data, const FitResult& fit);

enum class SelectionMethod { Gee, Qif };

struct SelectionConfig {
  SelectionMethod method = SelectionMethod::Gee;
  /// Solver settings; the GEE path uses the GeeConfig part.
  QifConfig solver;
  PenaltyConfig penalty;
};

struct BicPoint {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double bic = 0.0;
  int df = 0;
  int iterations = 0;
  bool converged = false;
  std::string error;  // nonempty when the solve failed
};

struct SelectionResult {
  FitResult fit;
  FitResult pilot;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  std::vector<Index> support_beta;   // 0-based columns of X, anchor included
  std::vector<Index> support_theta;  // 0-based columns of Z
  std::vector<BicPoint> bic_path;
  std::vector<double> lambda1_grid;
  std::vector<double> lambda2_grid;
};

/// `count` log-spaced values in [0.01, 1] * max_j curvature_j |xi_j| over the
/// given coordinates of the pilot estimate.
std::vector<double> default_lambda_grid(const Vector& xi, const Vector& curvature, Index first, Index count,
                                        int points = 8);

/// Pilot fit, then the (lambda1, lambda2) grid with warm starts; returns the BIC minimizer.
SelectionResult tune_lambdas(const LongitudinalDataset& data, const SelectionConfig& cfg);

std::vector<Index> support_of(const Vector& v);

}  // namespace plsim
