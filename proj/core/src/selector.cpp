#include "plsim/selector.hpp"

#include "linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace plsim {

void PenaltyConfig::validate() const {
  if (!(c > 2.0)) throw DomainError("SCAD shape c must exceed 2");
  for (double l : lambda1_grid) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw DomainError("lambda1 grid values must be finite and >= 0");
  }
  for (double l : lambda2_grid) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw DomainError("lambda2 grid values must be finite and >= 0");
  }
  if (!(zero_threshold >= 0.0)) throw DomainError("zero_threshold must be nonnegative");
  if (max_inner_iterations < 1) throw DomainError("max_inner_iterations must be >= 1");
}

// ---- SCAD ----

double scad_derivative(double x, double lambda, double c) {
  if (!(c > 2.0)) throw DomainError("SCAD shape c must exceed 2");
  if (x < 0.0) throw DomainError("scad_derivative needs x >= 0");
  if (x <= lambda) return lambda;
  return std::max(c * lambda - x, 0.0) / (c - 1.0);
}

double scad_penalty(double x, double lambda, double c) {
  if (!(c > 2.0)) throw DomainError("SCAD shape c must exceed 2");
  if (x < 0.0) throw DomainError("scad_penalty needs x >= 0");
  if (x <= lambda) return lambda * x;
  if (x <= c * lambda) return (2.0 * c * lambda * x - x * x - lambda * lambda) / (2.0 * (c - 1.0));
  return 0.5 * (c + 1.0) * lambda * lambda;
}

LqaPenalty make_scad_penalty(Index p, Index q, double lambda1, double lambda2, const PenaltyConfig& cfg) {
  const Index d = p - 1 + q;
  std::vector<double> lambdas(static_cast<std::size_t>(d));
  for (Index j = 0; j < d; ++j) lambdas[static_cast<std::size_t>(j)] = j < p - 1 ? lambda1 : lambda2;
  const double c = cfg.c;

  LqaPenalty pen;
  pen.zero_threshold = cfg.zero_threshold;
  pen.penalized.resize(lambdas.size());
  for (std::size_t j = 0; j < lambdas.size(); ++j) pen.penalized[j] = lambdas[j] > 0.0;
  pen.kink = Eigen::Map<const Vector>(lambdas.data(), d);
  pen.diagonal = [lambdas, c](const Vector& xi) {
    Vector e(xi.size());
    for (Index j = 0; j < xi.size(); ++j) {
      const double l = lambdas[static_cast<std::size_t>(j)];
      const double a = std::abs(xi(j));
      e(j) = l > 0.0 ? scad_derivative(a, l, c) / (a + 1e-8) : 0.0;
    }
    return e;
  };
  pen.value = [lambdas, c](const Vector& xi) {
    double s = 0.0;
    for (Index j = 0; j < xi.size(); ++j) {
      const double l = lambdas[static_cast<std::size_t>(j)];
      if (l > 0.0) s += scad_penalty(std::abs(xi(j)), l, c);
    }
    return s;
  };
  return pen;
}

// ---- penalized solves ----

namespace {

StartingPoint default_start(const LongitudinalDataset& data, const GeeConfig& cfg) {
  if (data.p() < 2) throw DomainError("index part needs p >= 2 for the delete-one-component parameterization");
  const InitialEstimate init = initial_estimate(data);
  return {init.beta, init.theta, resolve_bandwidth(data, cfg, init.beta, init.theta)};
}

}  // namespace

FitResult penalized_gee_solve(const LongitudinalDataset& data, const GeeConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2, const StartingPoint& start) {
  penalty.validate();
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw DomainError("lambdas must be nonnegative");
  GeeConfig inner = cfg;
  inner.max_iterations = penalty.max_inner_iterations;
  const LqaPenalty pen = make_scad_penalty(data.p(), data.q(), lambda1, lambda2, penalty);
  return solve_gee_from(data, inner, start, &pen);
}

FitResult penalized_gee_solve(const LongitudinalDataset& data, const GeeConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2) {
  cfg.validate();
  return penalized_gee_solve(data, cfg, penalty, lambda1, lambda2, default_start(data, cfg));
}

FitResult penalized_qif_solve(const LongitudinalDataset& data, const QifConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2, const StartingPoint& start) {
  penalty.validate();
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw DomainError("lambdas must be nonnegative");
  QifConfig inner = cfg;
  inner.max_iterations = penalty.max_inner_iterations;
  const LqaPenalty pen = make_scad_penalty(data.p(), data.q(), lambda1, lambda2, penalty);
  return solve_qif_from(data, inner, start, &pen);
}

FitResult penalized_qif_solve(const LongitudinalDataset& data, const QifConfig& cfg, const PenaltyConfig& penalty,
                              double lambda1, double lambda2) {
  cfg.validate();
  return penalized_qif_solve(data, cfg, penalty, lambda1, lambda2, default_start(data, cfg));
}

// ---- BIC ----

std::vector<Index> support_of(const Vector& v) {
  std::vector<Index> s;
  for (Index j = 0; j < v.size(); ++j) {
    if (v(j) != 0.0) s.push_back(j);
  }
  return s;
}

int degrees_of_freedom(const FitResult& fit) {
  const auto nz = [](const Vector& v) { return static_cast<int>((v.array() != 0.0).count()); };
  return nz(fit.beta.reduced()) + nz(fit.theta) + 1;
}

double residual_sum_of_squares(const LongitudinalDataset& data, const FitResult& fit) {
  if (static_cast<Index>(fit.g_grid.size()) != data.total_size()) {
    throw DomainError("fit does not carry link estimates for every observation");
  }
  const Vector lin = data.z() * fit.theta;
  double s = 0.0;
  for (Index k = 0; k < data.total_size(); ++k) {
    const double r = data.y()(k) - lin(k) - fit.g_grid[static_cast<std::size_t>(k)].g;
    s += r * r;
  }
  return s;
}

double bic_score(const LongitudinalDataset& data, const FitResult& fit) {
  const double s = residual_sum_of_squares(data, fit);
  const double n = static_cast<double>(data.n());
  if (!(s > 0.0)) return -std::numeric_limits<double>::infinity();
  return std::log(s / n) + static_cast<double>(degrees_of_freedom(fit)) * std::log(n) / n;
}

// ---- tuning ----

std::vector<double> default_lambda_grid(const Vector& xi, const Vector& curvature, Index first, Index count,
                                        int points) {
  double top = 0.0;
  for (Index j = first; j < first + count; ++j) top = std::max(top, std::abs(curvature(j) * xi(j)));
  if (!(top > 0.0) || !std::isfinite(top)) top = 1.0;
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int k = 0; k < points; ++k) {
    const double frac = points == 1 ? 1.0 : static_cast<double>(k) / (points - 1);
    grid[static_cast<std::size_t>(k)] = top * std::pow(10.0, -2.0 + 2.0 * frac);
  }
  return grid;
}

namespace {

// Per-coordinate curvature of the unpenalized criterion at the pilot, on the
// scale where the penalty derivative is compared against it.
Vector pilot_curvature(const LongitudinalDataset& data, const SelectionConfig& cfg, const FitResult& pilot) {
  const KernelConfig kernel{pilot.bandwidth, cfg.solver.kernel_ridge};
  const EstimatingState state = evaluate_state(data, pilot.beta, pilot.theta, kernel);
  if (cfg.method == SelectionMethod::Gee) {
    const WorkingCovariance v = working_covariance_for(data, state, cfg.solver);
    return gee_information(data, state, v).diagonal() / static_cast<double>(data.n());
  }
  const Matrix cov = covariance_qif(data, state, qif_variances(data, state, cfg.solver), cfg.solver).reduced;
  const Matrix info = detail::inverse_symmetric(cov * static_cast<double>(data.n()), "QIF pilot covariance");
  return 2.0 * info.diagonal();
}

FitResult run_solver(const LongitudinalDataset& data, const SelectionConfig& cfg, double l1, double l2,
                     const StartingPoint& start) {
  if (cfg.method == SelectionMethod::Gee) {
    return penalized_gee_solve(data, cfg.solver, cfg.penalty, l1, l2, start);
  }
  return penalized_qif_solve(data, cfg.solver, cfg.penalty, l1, l2, start);
}

}  // namespace

SelectionResult tune_lambdas(const LongitudinalDataset& data, const SelectionConfig& cfg) {
  cfg.penalty.validate();
  cfg.solver.validate();
  SelectionResult out;
  out.pilot = cfg.method == SelectionMethod::Gee ? solve_gee(data, cfg.solver) : solve_qif(data, cfg.solver);

  const AnchorChoice anchor = choose_anchor(out.pilot.beta.beta());
  const StartingPoint pilot_start{IndexParam::from_beta(anchor.beta, anchor.anchor), out.pilot.theta,
                                  out.pilot.bandwidth};
  const Index p = data.p();
  const Index q = data.q();

  out.lambda1_grid = cfg.penalty.lambda1_grid;
  out.lambda2_grid = cfg.penalty.lambda2_grid;
  if (out.lambda1_grid.empty() || out.lambda2_grid.empty()) {
    const Vector xi = stack_xi(pilot_start.beta, pilot_start.theta);
    Vector curv;
    try {
      curv = pilot_curvature(data, cfg, out.pilot);
    } catch (const NumericalError&) {
      curv = Vector::Ones(xi.size());
    }
    if (out.lambda1_grid.empty()) out.lambda1_grid = default_lambda_grid(xi, curv, 0, p - 1);
    if (out.lambda2_grid.empty()) out.lambda2_grid = default_lambda_grid(xi, curv, p - 1, q);
  }
  std::sort(out.lambda1_grid.begin(), out.lambda1_grid.end());
  std::sort(out.lambda2_grid.begin(), out.lambda2_grid.end());

  bool have_best = false;
  double best_bic = std::numeric_limits<double>::infinity();
  std::ostringstream failures;
  for (double l2 : out.lambda2_grid) {
    StartingPoint start = pilot_start;
    for (double l1 : out.lambda1_grid) {
      BicPoint pt{l1, l2, std::numeric_limits<double>::quiet_NaN(), 0, 0, false, {}};
      try {
        // Without a penalty the grid point is the pilot estimator itself.
        FitResult fit = l1 == 0.0 && l2 == 0.0 ? out.pilot : run_solver(data, cfg, l1, l2, start);
        pt.bic = bic_score(data, fit);
        pt.df = degrees_of_freedom(fit);
        pt.iterations = fit.iterations;
        pt.converged = fit.converged;
        if (cfg.penalty.warm_start) start = {fit.beta, fit.theta, fit.bandwidth};
        const double tie = 1e-12 * std::max(1.0, std::abs(best_bic));
        const bool better = !have_best || pt.bic < best_bic - tie ||
                            (std::abs(pt.bic - best_bic) <= tie && l1 + l2 > out.lambda1 + out.lambda2);
        if (better && !std::isnan(pt.bic)) {
          have_best = true;
          best_bic = pt.bic;
          out.fit = std::move(fit);
          out.lambda1 = l1;
          out.lambda2 = l2;
        }
      } catch (const std::exception& e) {
        pt.error = e.what();
        failures << "\n  (" << l1 << ", " << l2 << "): " << e.what();
      }
      out.bic_path.push_back(pt);
    }
  }
  if (!have_best) throw NumericalError("every (lambda1, lambda2) grid point failed:" + failures.str());

  out.support_beta = support_of(out.fit.beta.beta());
  out.support_theta = support_of(out.fit.theta);
  return out;
}

}  // namespace plsim
