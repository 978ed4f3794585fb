#include "plsim/gee_solver.hpp"

#include "linalg.hpp"
#include "solver_common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace plsim {

// -------------------------------------------------------------------------
// Shared helpers
// -------------------------------------------------------------------------

namespace detail {

std::optional<std::pair<IndexParam, Vector>> split_xi(const Vector& xi, Index anchor, Index p) {
  const Vector reduced = xi.head(p - 1);
  if (!(reduced.squaredNorm() < 1.0) || !xi.allFinite()) return std::nullopt;
  return std::make_pair(IndexParam::from_reduced(reduced, anchor), Vector(xi.tail(xi.size() - (p - 1))));
}

std::vector<Index> active_indices(const std::vector<bool>& active) {
  std::vector<Index> idx;
  for (std::size_t j = 0; j < active.size(); ++j) {
    if (active[j]) idx.push_back(static_cast<Index>(j));
  }
  return idx;
}

Vector gather(const Vector& v, const std::vector<Index>& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out(static_cast<Index>(k)) = v(idx[k]);
  return out;
}

Matrix gather(const Matrix& m, const std::vector<Index>& idx) {
  const Index k = static_cast<Index>(idx.size());
  Matrix out(k, k);
  for (Index a = 0; a < k; ++a) {
    for (Index b = 0; b < k; ++b) out(a, b) = m(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
  }
  return out;
}

std::vector<bool> initial_active_set(const Vector& xi, const LqaPenalty* penalty) {
  std::vector<bool> active(static_cast<std::size_t>(xi.size()), true);
  if (penalty == nullptr) return active;
  for (Index j = 0; j < xi.size(); ++j) {
    if (penalty->penalized[static_cast<std::size_t>(j)] && xi(j) == 0.0) active[static_cast<std::size_t>(j)] = false;
  }
  return active;
}

bool apply_hard_zero(Vector& xi, std::vector<bool>& active, const LqaPenalty* penalty) {
  if (penalty == nullptr) return false;
  bool changed = false;
  for (Index j = 0; j < xi.size(); ++j) {
    const auto u = static_cast<std::size_t>(j);
    if (active[u] && penalty->penalized[u] && std::abs(xi(j)) < penalty->zero_threshold) {
      xi(j) = 0.0;
      active[u] = false;
      changed = true;
    }
  }
  return changed;
}

}  // namespace detail

void GeeConfig::validate() const {
  if (max_iterations < 1) throw DomainError("max_iterations must be >= 1");
  if (!(tolerance > 0.0)) throw DomainError("tolerance must be positive");
  if (!(damping > 0.0 && damping <= 1.0)) throw DomainError("damping must lie in (0, 1]");
  if (bandwidth_policy == BandwidthPolicy::Fixed && !(bandwidth > 0.0)) {
    throw DomainError("fixed bandwidth policy needs a positive bandwidth");
  }
  if (!(kernel_ridge >= 0.0)) throw DomainError("kernel_ridge must be nonnegative");
}

GeeConfig working_independence(GeeConfig base) {
  base.correlation = CorrelationKind::Independence;
  base.unit_variance = true;
  return base;
}

// -------------------------------------------------------------------------
// Estimating equation pieces
// -------------------------------------------------------------------------

EstimatingState evaluate_state(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                               const KernelConfig& kernel) {
  if (beta.p() != data.p() || theta.size() != data.q()) {
    throw DomainError("parameter dimensions do not match the dataset");
  }
  const LocalLinearSmoother smoother(data, beta.beta(), kernel);
  EstimatingState s;
  s.beta = beta;
  s.theta = theta;
  s.bandwidth = kernel.bandwidth;
  s.index = smoother.index_values();
  s.smooth = smoother.fit_observed(theta);
  s.residual = data.y() - s.smooth.g - data.z() * theta;

  const Index p = data.p();
  const Index q = data.q();
  const Matrix j = beta.jacobian();  // p x (p-1)
  s.lambda.resize(data.total_size(), p - 1 + q);
  s.lambda.leftCols(p - 1) = ((data.x() - s.smooth.g1) * j).array().colwise() * s.smooth.g_prime.array();
  s.lambda.rightCols(q) = data.z() - s.smooth.g2;
  return s;
}

LambdaHat build_lambda_hat(const LongitudinalDataset& data, const EstimatingState& state) {
  LambdaHat out;
  out.blocks.reserve(static_cast<std::size_t>(data.n()));
  for (Index i = 0; i < data.n(); ++i) {
    out.blocks.push_back(state.lambda.middleRows(data.offset(i), data.cluster_size(i)).transpose());
  }
  return out;
}

LambdaHat build_lambda_hat(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                           const KernelConfig& kernel) {
  return build_lambda_hat(data, evaluate_state(data, beta, theta, kernel));
}

Vector gee_score(const LongitudinalDataset& data, const EstimatingState& state, const WorkingCovariance& v) {
  if (v.size() != data.n()) throw DomainError("working covariance does not match the number of subjects");
  Vector score = Vector::Zero(state.dimension());
  for (Index i = 0; i < data.n(); ++i) {
    const Index off = data.offset(i);
    const Index m = data.cluster_size(i);
    score.noalias() += state.lambda.middleRows(off, m).transpose() * (v.inverse(i) * state.residual.segment(off, m));
  }
  return score;
}

Vector gee_score(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                 const KernelConfig& kernel, const WorkingCovariance& v) {
  return gee_score(data, evaluate_state(data, beta, theta, kernel), v);
}

Matrix gee_information(const LongitudinalDataset& data, const EstimatingState& state, const WorkingCovariance& v) {
  if (v.size() != data.n()) throw DomainError("working covariance does not match the number of subjects");
  const Index d = state.dimension();
  Matrix info = Matrix::Zero(d, d);
  for (Index i = 0; i < data.n(); ++i) {
    const auto l = state.lambda.middleRows(data.offset(i), data.cluster_size(i));
    info.noalias() += l.transpose() * v.inverse(i) * l;
  }
  return 0.5 * (info + info.transpose());
}

Matrix gee_information(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                       const KernelConfig& kernel, const WorkingCovariance& v) {
  return gee_information(data, evaluate_state(data, beta, theta, kernel), v);
}

WorkingCovariance working_covariance_for(const LongitudinalDataset& data, const EstimatingState& state,
                                         const GeeConfig& cfg) {
  if (cfg.unit_variance) return WorkingCovariance::identity(data);
  return estimate_working_covariance(data, state.residual, cfg.correlation, cfg.pooling);
}

std::vector<GPoint> g_points(const EstimatingState& state) {
  std::vector<GPoint> out(static_cast<std::size_t>(state.index.size()));
  for (Index k = 0; k < state.index.size(); ++k) {
    out[static_cast<std::size_t>(k)] = {state.index(k), state.smooth.g(k), state.smooth.g_prime(k)};
  }
  return out;
}

// -------------------------------------------------------------------------
// Initial estimate and bandwidth
// -------------------------------------------------------------------------

InitialEstimate initial_estimate(const LongitudinalDataset& data) {
  const Index n_obs = data.total_size();
  const Index p = data.p();
  const Index q = data.q();
  if (n_obs <= p + q) {
    throw DomainError("initial estimate needs more observations than p + q");
  }
  Matrix design(n_obs, 1 + p + q);
  design.col(0).setOnes();
  design.middleCols(1, p) = data.x();
  design.rightCols(q) = data.z();

  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  if (qr.rank() < design.cols()) {
    Matrix with_x(n_obs, 1 + p);
    with_x << Vector::Ones(n_obs), data.x();
    Eigen::ColPivHouseholderQR<Matrix> qx(with_x);
    const std::string block = qx.rank() < with_x.cols() ? "X (index covariates)" : "Z (linear covariates)";
    throw DomainError("initial least-squares design is rank deficient in the " + block + " block");
  }
  const Vector coef = qr.solve(data.y());
  const Vector x_part = data.x() * coef.segment(1, p);
  if (!(x_part.norm() > 1e-10 * std::max(1.0, data.y().norm()))) {
    throw DomainError("initial least-squares X coefficients are zero; Y carries no index signal to anchor on");
  }
  InitialEstimate out;
  out.beta = IndexParam::from_direction(coef.segment(1, p));
  out.theta = coef.tail(q);
  return out;
}

double resolve_bandwidth(const LongitudinalDataset& data, const GeeConfig& cfg, const IndexParam& beta,
                         const Vector& theta) {
  if (cfg.bandwidth_policy == BandwidthPolicy::Fixed) return cfg.bandwidth;
  std::vector<double> grid = cfg.bandwidth_grid;
  if (grid.empty()) grid = default_bandwidth_grid(data.x() * beta.beta());
  return select_bandwidth(data, beta, theta, std::move(grid), cfg.kernel_ridge).bandwidth;
}

// -------------------------------------------------------------------------
// Newton-Raphson / Fisher scoring
// -------------------------------------------------------------------------

namespace {

struct Merit {
  Vector full;  // penalized score, all coordinates
  double norm;  // norm on the active set
};

// Score minus n E xi, with E the LQA diagonal (empty when unpenalized).
Merit penalized_score(const LongitudinalDataset& data, const EstimatingState& state, const WorkingCovariance& v,
                      const Vector& xi, const Vector& e, const std::vector<Index>& active) {
  Vector u = gee_score(data, state, v);
  if (e.size() > 0) u -= static_cast<double>(data.n()) * e.cwiseProduct(xi);
  return {u, detail::gather(u, active).norm()};
}

// Zeroes penalized coordinates inside the kink range where the coordinate-wise
// quadratic model plus kink_j |xi_j| is minimized at zero, that is
// |u_j / n + pi_jj xi_j| <= kink_j.
bool apply_kink_zero(Vector& xi, std::vector<bool>& active, const LqaPenalty* penalty, const Vector& score,
                     const Matrix& information, double n) {
  if (penalty == nullptr || penalty->kink.size() != xi.size()) return false;
  bool changed = false;
  for (Index j = 0; j < xi.size(); ++j) {
    const auto k = static_cast<std::size_t>(j);
    if (!active[k] || !penalty->penalized[k] || xi(j) == 0.0) continue;
    const double kink = penalty->kink(j);
    if (std::abs(xi(j)) > kink) continue;
    const double pull = score(j) / n + information(j, j) / n * xi(j);
    if (std::abs(pull) <= kink) {
      xi(j) = 0.0;
      active[k] = false;
      changed = true;
    }
  }
  return changed;
}

Vector lqa_diagonal(const LqaPenalty* penalty, const Vector& xi) {
  return penalty != nullptr ? penalty->diagonal(xi) : Vector();
}

}  // namespace

FitResult solve_gee(const LongitudinalDataset& data, const GeeConfig& cfg) {
  cfg.validate();
  if (data.p() < 2) throw DomainError("index part needs p >= 2 for the delete-one-component parameterization");
  const InitialEstimate init = initial_estimate(data);
  const double h = resolve_bandwidth(data, cfg, init.beta, init.theta);
  return solve_gee_from(data, cfg, StartingPoint{init.beta, init.theta, h});
}

FitResult solve_gee_from(const LongitudinalDataset& data, const GeeConfig& cfg, const StartingPoint& start,
                         const LqaPenalty* penalty) {
  cfg.validate();
  const Index p = data.p();
  if (p < 2) throw DomainError("index part needs p >= 2 for the delete-one-component parameterization");
  const Index anchor = start.beta.anchor();
  const double n = static_cast<double>(data.n());

  KernelConfig kernel{start.bandwidth, cfg.kernel_ridge};
  Vector xi = stack_xi(start.beta, start.theta);
  std::vector<bool> active = detail::initial_active_set(xi, penalty);
  if (penalty != nullptr && penalty->penalized.size() != static_cast<std::size_t>(xi.size())) {
    throw DomainError("penalty mask length does not match the parameter dimension");
  }

  EstimatingState state = evaluate_state(data, start.beta, start.theta, kernel);
  WorkingCovariance v = working_covariance_for(data, state, cfg);

  FitResult fit;
  bool converged = false;
  int iter = 0;
  for (iter = 1; iter <= cfg.max_iterations; ++iter) {
    if (cfg.bandwidth_policy == BandwidthPolicy::CrossValidateEachIteration && iter > 1) {
      kernel.bandwidth = resolve_bandwidth(data, cfg, state.beta, state.theta);
      state = evaluate_state(data, state.beta, state.theta, kernel);
      v = working_covariance_for(data, state, cfg);
    }
    const std::vector<Index> act = detail::active_indices(active);
    if (act.empty()) {
      converged = true;
      break;
    }
    // The line search works on the quadratic approximation taken at xi, so E
    // stays fixed within the iteration.
    const Vector e = lqa_diagonal(penalty, xi);
    const Merit merit = penalized_score(data, state, v, xi, e, act);
    Matrix system = gee_information(data, state, v);
    if (penalty != nullptr) system.diagonal() += n * e;
    const Vector delta_act =
        detail::solve_symmetric(detail::gather(system, act), detail::gather(merit.full, act),
                                "information matrix Pi_n (try a kernel ridge or a different anchor)");

    Vector step = Vector::Zero(xi.size());
    for (std::size_t k = 0; k < act.size(); ++k) step(act[k]) = cfg.damping * delta_act(static_cast<Index>(k));

    bool accepted = false;
    Vector xi_new;
    EstimatingState trial;
    const double merit_cap = std::max(merit.norm, n * cfg.tolerance);
    for (int halving = 0; halving <= 20; ++halving, step *= 0.5) {
      xi_new = xi + step;
      auto params = detail::split_xi(xi_new, anchor, p);
      if (!params) continue;
      try {
        trial = evaluate_state(data, params->first, params->second, kernel);
      } catch (const DegenerateSmootherError&) {
        continue;
      }
      const Merit m = penalized_score(data, trial, v, xi_new, e, act);
      if (!std::isfinite(m.norm) || m.norm > merit_cap) continue;
      accepted = true;
      break;
    }
    if (!accepted) break;

    bool zeroed = detail::apply_hard_zero(xi_new, active, penalty);
    if (penalty != nullptr && penalty->kink.size() > 0) {
      const WorkingCovariance v_trial = working_covariance_for(data, trial, cfg);
      zeroed = apply_kink_zero(xi_new, active, penalty, gee_score(data, trial, v_trial),
                               gee_information(data, trial, v_trial), n) ||
               zeroed;
    }
    if (zeroed) {
      auto params = detail::split_xi(xi_new, anchor, p);
      trial = evaluate_state(data, params->first, params->second, kernel);
    }
    const double step_norm = (xi_new - xi).norm();
    xi = xi_new;
    state = std::move(trial);
    v = working_covariance_for(data, state, cfg);

    const std::vector<Index> act_now = detail::active_indices(active);
    const Merit now = penalized_score(data, state, v, xi, lqa_diagonal(penalty, xi), act_now);
    fit.trace.push_back({iter, step_norm, now.norm, kernel.bandwidth, v.rho()});
    // The LQA fixed-point map contracts only linearly, so penalized
    // coordinates stop on the step size alone; the rest must also be a root.
    std::vector<Index> free_now;
    for (Index j : act_now) {
      if (penalty == nullptr || !penalty->penalized[static_cast<std::size_t>(j)]) free_now.push_back(j);
    }
    const bool root = detail::gather(now.full, free_now).norm() / n <= 10.0 * cfg.tolerance;
    if (step_norm < cfg.tolerance && root) {
      converged = true;
      break;
    }
    // Steps this small away from a root mean the line search has stalled.
    if (step_norm < 1e-3 * cfg.tolerance) break;
  }

  fit.beta = state.beta;
  fit.theta = state.theta;
  fit.g_grid = g_points(state);
  fit.iterations = std::min(iter, cfg.max_iterations);
  fit.converged = converged;
  fit.bandwidth = kernel.bandwidth;
  fit.rho = v.rho();
  fit.score_norm = penalized_score(data, state, v, xi, lqa_diagonal(penalty, xi), detail::active_indices(active)).norm;
  try {
    const CovarianceEstimate cov = sandwich_covariance_gee(data, state, v, active);
    fit.sandwich_cov = cov.reduced;
    fit.full_cov = cov.full;
  } catch (const NumericalError&) {
    const Index d = xi.size();
    fit.sandwich_cov = Matrix::Constant(d, d, std::numeric_limits<double>::quiet_NaN());
    fit.full_cov = Matrix::Constant(d + 1, d + 1, std::numeric_limits<double>::quiet_NaN());
  }
  return fit;
}

// -------------------------------------------------------------------------
// Sandwich covariance
// -------------------------------------------------------------------------

CovarianceEstimate sandwich_covariance_gee(const LongitudinalDataset& data, const EstimatingState& state,
                                           const WorkingCovariance& v, const std::vector<bool>& active) {
  const Index d = state.dimension();
  const double n = static_cast<double>(data.n());
  Matrix pi = Matrix::Zero(d, d);
  Matrix omega = Matrix::Zero(d, d);
  for (Index i = 0; i < data.n(); ++i) {
    const Index off = data.offset(i);
    const Index m = data.cluster_size(i);
    const auto l = state.lambda.middleRows(off, m);
    const Matrix lv = l.transpose() * v.inverse(i);  // d x m
    pi.noalias() += lv * l;
    const Vector s = lv * state.residual.segment(off, m);
    omega.noalias() += s * s.transpose();
  }
  pi /= n;
  omega /= n;

  std::vector<Index> act;
  if (active.empty()) {
    for (Index j = 0; j < d; ++j) act.push_back(j);
  } else {
    act = detail::active_indices(active);
  }
  Matrix reduced = Matrix::Zero(d, d);
  if (!act.empty()) {
    const Matrix pi_inv = detail::inverse_symmetric(detail::gather(pi, act), "information matrix Pi");
    const Matrix sub = pi_inv * detail::gather(omega, act) * pi_inv / n;
    for (std::size_t a = 0; a < act.size(); ++a) {
      for (std::size_t b = 0; b < act.size(); ++b) {
        reduced(act[a], act[b]) = sub(static_cast<Index>(a), static_cast<Index>(b));
      }
    }
  }
  reduced = 0.5 * (reduced + reduced.transpose());
  const Matrix map = full_parameter_map(state.beta, data.q());
  Matrix full = map * reduced * map.transpose();
  return {reduced, 0.5 * (full + full.transpose())};
}

CovarianceEstimate sandwich_covariance_gee(const LongitudinalDataset& data, const FitResult& fit,
                                           const KernelConfig& kernel, const WorkingCovariance& v) {
  return sandwich_covariance_gee(data, evaluate_state(data, fit.beta, fit.theta, kernel), v);
}

}  // namespace plsim
