#include "plsim/qif_solver.hpp"

#include "linalg.hpp"
#include "solver_common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace plsim {

void QifConfig::validate() const {
  GeeConfig::validate();
  if (!(fd_step > 0.0)) throw DomainError("fd_step must be positive");
  if (!(condition_limit > 1.0)) throw DomainError("condition_limit must exceed 1");
}

Vector extended_score(const Matrix& lambda_i, const Vector& residual_i, const Vector& variance_i,
                      const std::vector<Matrix>& bases) {
  const Index m = residual_i.size();
  if (lambda_i.cols() != m || variance_i.size() != m) {
    throw DomainError("extended_score: lambda, residual and variance sizes disagree");
  }
  if ((variance_i.array() <= 0.0).any()) throw DomainError("extended_score: A_i must have positive entries");
  const Index d = lambda_i.rows();
  const Vector w = variance_i.array().rsqrt();
  const Vector we = w.cwiseProduct(residual_i);
  Vector out(d * static_cast<Index>(bases.size()));
  for (std::size_t s = 0; s < bases.size(); ++s) {
    if (bases[s].rows() != m) throw DomainError("extended_score: basis matrix has the wrong dimension");
    out.segment(static_cast<Index>(s) * d, d).noalias() = lambda_i * w.cwiseProduct(bases[s] * we);
  }
  return out;
}

QifState qif_state_from_scores(const std::vector<Vector>& scores, double condition_limit) {
  if (scores.empty()) throw DomainError("qif: no extended scores");
  const Index l = scores.front().size();
  const double n = static_cast<double>(scores.size());
  QifState st;
  st.mean_score = Vector::Zero(l);
  st.second_moment = Matrix::Zero(l, l);
  for (const auto& u : scores) {
    st.mean_score += u;
    st.second_moment.selfadjointView<Eigen::Lower>().rankUpdate(u);
  }
  st.mean_score /= n;
  st.second_moment = st.second_moment.selfadjointView<Eigen::Lower>();
  st.second_moment /= n;

  Eigen::SelfAdjointEigenSolver<Matrix> es(st.second_moment, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  st.min_eigenvalue = lo;
  const double trace = st.second_moment.trace();
  // All scores zero: U_n = 0, so Q_n = 0 whatever C_n^-1 would be.
  if (trace == 0.0) return st;
  if (!(trace > 0.0) || !std::isfinite(trace)) {
    std::ostringstream os;
    os << "C_n is singular (smallest eigenvalue " << lo << ", trace " << trace << ")";
    throw NumericalError(os.str());
  }
  if (!(lo > 0.0) || hi / lo > condition_limit) {
    st.second_moment.diagonal().array() += 1e-8 * trace / static_cast<double>(l);
    st.ridged = true;
  }
  Eigen::LLT<Matrix> llt(st.second_moment);
  if (llt.info() != Eigen::Success) {
    std::ostringstream os;
    os << "C_n is singular beyond the ridge (smallest eigenvalue " << lo << ")";
    throw NumericalError(os.str());
  }
  st.objective = std::max(0.0, st.mean_score.dot(llt.solve(st.mean_score)));
  return st;
}

std::vector<Vector> qif_variances(const LongitudinalDataset& data, const EstimatingState& state,
                                  const QifConfig& cfg) {
  if (cfg.unit_variance) return WorkingCovariance::identity(data).marginal_variances();
  const auto per_subject = split_by_subject(data, state.residual);
  return estimate_marginal_variance(per_subject, cfg.pooling.value_or(default_pooling(data)));
}

namespace {

class BasisCache {
 public:
  explicit BasisCache(CorrelationKind kind) : kind_(kind) {}
  const std::vector<Matrix>& at(Index m) {
    auto it = cache_.find(m);
    if (it == cache_.end()) {
      // A single observation carries no within-subject information beyond M_1 = I;
      // pad with zero blocks so every subject contributes a vector of length l.
      std::vector<Matrix> b = m >= 2 ? basis_matrices(kind_, m) : std::vector<Matrix>{Matrix::Identity(1, 1)};
      const std::size_t k = basis_matrices(kind_, 2).size();
      while (b.size() < k) b.push_back(Matrix::Zero(m, m));
      it = cache_.emplace(m, std::move(b)).first;
    }
    return it->second;
  }

 private:
  CorrelationKind kind_;
  std::map<Index, std::vector<Matrix>> cache_;
};

std::vector<Vector> subject_scores(const LongitudinalDataset& data, const EstimatingState& state,
                                   const std::vector<Vector>& variances, BasisCache& bases) {
  if (static_cast<Index>(variances.size()) != data.n()) {
    throw DomainError("qif: one variance vector per subject is required");
  }
  // Residuals at round-off level of Y make C_n pure noise; Q_n being scale
  // free would turn that noise into an O(1) objective.
  const bool vanishing = state.residual.norm() <= 1e-12 * std::max(1.0, data.y().norm());
  std::vector<Vector> out;
  out.reserve(variances.size());
  for (Index i = 0; i < data.n(); ++i) {
    const Index off = data.offset(i);
    const Index m = data.cluster_size(i);
    if (vanishing) {
      out.push_back(Vector::Zero(state.dimension() * static_cast<Index>(bases.at(m).size())));
      continue;
    }
    out.push_back(extended_score(state.lambda.middleRows(off, m).transpose(), state.residual.segment(off, m),
                                 variances[static_cast<std::size_t>(i)], bases.at(m)));
  }
  return out;
}

struct Differences {
  Matrix jacobian;  // dU_n / dxi, l x |active|
  Vector gradient;  // dQ_n / dxi, |active|
};

// Central differences of U_n and Q_n in the active coordinates, falling back
// to a one-sided difference when one side leaves the parameter space or makes
// the smoother degenerate. The gradient of Q_n is differenced directly because
// under continuous updating C_n moves with xi and 2 J'C^-1 U omits that term,
// which can leave the Gauss-Newton step without descent near the minimum.
Differences difference_scores(const LongitudinalDataset& data, const Vector& xi, Index anchor,
                              const KernelConfig& kernel, const std::vector<Vector>& variances, BasisCache& bases,
                              const QifState& at, const std::vector<Index>& act, const QifConfig& cfg) {
  const Index p = data.p();
  Differences out{Matrix(at.mean_score.size(), static_cast<Index>(act.size())),
                  Vector(static_cast<Index>(act.size()))};
  auto eval = [&](const Vector& x) -> std::optional<QifState> {
    auto params = detail::split_xi(x, anchor, p);
    if (!params) return std::nullopt;
    try {
      const EstimatingState st = evaluate_state(data, params->first, params->second, kernel);
      return qif_state_from_scores(subject_scores(data, st, variances, bases), cfg.condition_limit);
    } catch (const DegenerateSmootherError&) {
      return std::nullopt;
    } catch (const NumericalError&) {
      return std::nullopt;
    }
  };
  for (std::size_t k = 0; k < act.size(); ++k) {
    const Index j = act[k];
    const double h = cfg.fd_step * std::max(1.0, std::abs(xi(j)));
    Vector up = xi;
    Vector down = xi;
    up(j) += h;
    down(j) -= h;
    const auto fu = eval(up);
    const auto fd = eval(down);
    const Index col = static_cast<Index>(k);
    if (fu && fd) {
      out.jacobian.col(col) = (fu->mean_score - fd->mean_score) / (2.0 * h);
      out.gradient(col) = (fu->objective - fd->objective) / (2.0 * h);
    } else if (fu) {
      out.jacobian.col(col) = (fu->mean_score - at.mean_score) / h;
      out.gradient(col) = (fu->objective - at.objective) / h;
    } else if (fd) {
      out.jacobian.col(col) = (at.mean_score - fd->mean_score) / h;
      out.gradient(col) = (at.objective - fd->objective) / h;
    } else {
      throw NumericalError("qif: cannot difference the extended score in coordinate " + std::to_string(j));
    }
  }
  return out;
}

double penalty_value(const LqaPenalty* penalty, const Vector& xi) {
  return penalty != nullptr && penalty->value ? penalty->value(xi) : 0.0;
}

}  // namespace

QifState qif_objective(const LongitudinalDataset& data, const EstimatingState& state,
                       const std::vector<Vector>& variances, const QifConfig& cfg) {
  BasisCache bases(cfg.correlation);
  return qif_state_from_scores(subject_scores(data, state, variances, bases), cfg.condition_limit);
}

QifState qif_objective(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                       const KernelConfig& kernel, const std::vector<Vector>& variances, const QifConfig& cfg) {
  return qif_objective(data, evaluate_state(data, beta, theta, kernel), variances, cfg);
}

// -------------------------------------------------------------------------
// Gauss-Newton
// -------------------------------------------------------------------------

FitResult solve_qif(const LongitudinalDataset& data, const QifConfig& cfg) {
  cfg.validate();
  if (data.p() < 2) throw DomainError("index part needs p >= 2 for the delete-one-component parameterization");
  const InitialEstimate init = initial_estimate(data);
  const double h = resolve_bandwidth(data, cfg, init.beta, init.theta);
  return solve_qif_from(data, cfg, StartingPoint{init.beta, init.theta, h});
}

FitResult solve_qif_from(const LongitudinalDataset& data, const QifConfig& cfg, const StartingPoint& start,
                         const LqaPenalty* penalty) {
  cfg.validate();
  const Index p = data.p();
  if (p < 2) throw DomainError("index part needs p >= 2 for the delete-one-component parameterization");
  const Index anchor = start.beta.anchor();
  KernelConfig kernel{start.bandwidth, cfg.kernel_ridge};
  BasisCache bases(cfg.correlation);

  Vector xi = stack_xi(start.beta, start.theta);
  if (penalty != nullptr && penalty->penalized.size() != static_cast<std::size_t>(xi.size())) {
    throw DomainError("penalty mask length does not match the parameter dimension");
  }
  std::vector<bool> active = detail::initial_active_set(xi, penalty);
  EstimatingState state = evaluate_state(data, start.beta, start.theta, kernel);
  std::vector<Vector> variances = qif_variances(data, state, cfg);

  FitResult fit;
  bool converged = false;
  double gradient_norm = std::numeric_limits<double>::quiet_NaN();
  // Q_n is only piecewise smooth (the kernel has a kink at the window edge),
  // so near a minimum full steps can bounce between two points. A step that
  // reverses the previous one halves the scale; a step that does not restores it.
  double scale = cfg.damping;
  Vector previous_step;
  int iter = 0;
  for (iter = 1; iter <= cfg.max_iterations; ++iter) {
    if (cfg.bandwidth_policy == BandwidthPolicy::CrossValidateEachIteration && iter > 1) {
      kernel.bandwidth = resolve_bandwidth(data, cfg, state.beta, state.theta);
      state = evaluate_state(data, state.beta, state.theta, kernel);
      variances = qif_variances(data, state, cfg);
    }
    const std::vector<Index> act = detail::active_indices(active);
    if (act.empty()) {
      converged = true;
      break;
    }
    const QifState cur = qif_state_from_scores(subject_scores(data, state, variances, bases), cfg.condition_limit);
    const double merit_cur = cur.objective + penalty_value(penalty, xi);

    const Differences diff = difference_scores(data, xi, anchor, kernel, variances, bases, cur, act, cfg);
    const Eigen::LLT<Matrix> c_llt(cur.second_moment);
    Matrix curvature = 2.0 * diff.jacobian.transpose() * c_llt.solve(diff.jacobian);
    Vector gradient = diff.gradient;
    if (penalty != nullptr) {
      const Vector e = detail::gather(penalty->diagonal(xi), act);
      curvature.diagonal() += e;
      gradient += e.cwiseProduct(detail::gather(xi, act));
    }
    gradient_norm = gradient.norm();
    const Vector delta = -detail::solve_symmetric(curvature, gradient, "QIF curvature J'C^-1 J");

    Vector step = Vector::Zero(xi.size());
    for (std::size_t k = 0; k < act.size(); ++k) step(act[k]) = scale * delta(static_cast<Index>(k));

    bool accepted = false;
    Vector xi_new;
    EstimatingState trial;
    double merit_new = merit_cur;
    const double slack = 1e-12 * std::max(1.0, merit_cur);
    for (int halving = 0; halving <= 20; ++halving, step *= 0.5) {
      xi_new = xi + step;
      auto params = detail::split_xi(xi_new, anchor, p);
      if (!params) continue;
      try {
        trial = evaluate_state(data, params->first, params->second, kernel);
        const QifState st =
            qif_state_from_scores(subject_scores(data, trial, variances, bases), cfg.condition_limit);
        merit_new = st.objective + penalty_value(penalty, xi_new);
      } catch (const DegenerateSmootherError&) {
        continue;
      } catch (const NumericalError&) {
        continue;
      }
      if (std::isfinite(merit_new) && merit_new <= merit_cur + slack) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No descent within 20 halvings: the Gauss-Newton step is below the
      // resolution of the finite-difference Jacobian.
      converged = delta.norm() < std::sqrt(cfg.tolerance);
      break;
    }

    if (detail::apply_hard_zero(xi_new, active, penalty)) {
      auto params = detail::split_xi(xi_new, anchor, p);
      trial = evaluate_state(data, params->first, params->second, kernel);
    }
    const Vector taken = xi_new - xi;
    const double step_norm = taken.norm();
    if (previous_step.size() == taken.size() && previous_step.dot(taken) < -0.5 * previous_step.norm() * step_norm) {
      scale = std::max(scale * 0.5, 1e-3);
    } else {
      scale = std::min(scale * 2.0, cfg.damping);
    }
    previous_step = taken;
    const double change = std::abs(merit_cur - merit_new);
    xi = xi_new;
    state = std::move(trial);
    variances = qif_variances(data, state, cfg);
    fit.trace.push_back({iter, step_norm, gradient_norm, kernel.bandwidth, 0.0, merit_new});
    // The relative test matters at a kink of Q_n, where iterates creep with
    // changes far above tolerance^2 without making progress.
    if (step_norm < cfg.tolerance || change < cfg.tolerance * cfg.tolerance ||
        change < cfg.tolerance * merit_cur) {
      converged = true;
      break;
    }
  }

  fit.beta = state.beta;
  fit.theta = state.theta;
  fit.g_grid = g_points(state);
  fit.iterations = std::min(iter, cfg.max_iterations);
  fit.converged = converged;
  fit.bandwidth = kernel.bandwidth;
  fit.rho = 0.0;
  fit.score_norm = gradient_norm;
  try {
    const CovarianceEstimate cov = covariance_qif(data, state, variances, cfg, active);
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
// Covariance
// -------------------------------------------------------------------------

CovarianceEstimate covariance_qif(const LongitudinalDataset& data, const EstimatingState& state,
                                  const std::vector<Vector>& variances, const QifConfig& cfg,
                                  const std::vector<bool>& active) {
  BasisCache bases(cfg.correlation);
  const auto scores = subject_scores(data, state, variances, bases);
  const QifState st = qif_state_from_scores(scores, cfg.condition_limit);
  if (!(st.second_moment.trace() > 0.0)) {
    throw NumericalError("QIF covariance: the score second moment Sigma is zero (all extended scores vanish)");
  }

  const Index d = state.dimension();
  const Index l = st.mean_score.size();
  const Index k = l / d;
  Matrix gamma = Matrix::Zero(l, d);
  for (Index i = 0; i < data.n(); ++i) {
    const Index off = data.offset(i);
    const Index m = data.cluster_size(i);
    const Matrix lt = state.lambda.middleRows(off, m);  // m x d
    const Vector w = variances[static_cast<std::size_t>(i)].array().rsqrt();
    const Matrix wl = w.asDiagonal() * lt;
    const auto& b = bases.at(m);
    for (Index s = 0; s < k; ++s) {
      gamma.middleRows(s * d, d).noalias() += wl.transpose() * b[static_cast<std::size_t>(s)] * wl;
    }
  }
  gamma /= static_cast<double>(data.n());

  std::vector<Index> act;
  if (active.empty()) {
    for (Index j = 0; j < d; ++j) act.push_back(j);
  } else {
    act = detail::active_indices(active);
  }
  Matrix reduced = Matrix::Zero(d, d);
  if (!act.empty()) {
    Matrix g_act(l, static_cast<Index>(act.size()));
    for (std::size_t a = 0; a < act.size(); ++a) g_act.col(static_cast<Index>(a)) = gamma.col(act[a]);
    Eigen::ColPivHouseholderQR<Matrix> qr(g_act);
    if (qr.rank() < g_act.cols()) {
      throw NumericalError("Gamma has rank " + std::to_string(qr.rank()) + " < " + std::to_string(g_act.cols()) +
                           "; the QIF covariance is not identified");
    }
    const Matrix info = g_act.transpose() * Eigen::LLT<Matrix>(st.second_moment).solve(g_act);
    const Matrix sub = detail::inverse_symmetric(info, "Gamma' Sigma^-1 Gamma") / static_cast<double>(data.n());
    for (std::size_t a = 0; a < act.size(); ++a) {
      for (std::size_t b = 0; b < act.size(); ++b) {
        reduced(act[a], act[b]) = sub(static_cast<Index>(a), static_cast<Index>(b));
      }
    }
  }
  const Matrix map = full_parameter_map(state.beta, data.q());
  const Matrix full = map * reduced * map.transpose();
  return {reduced, 0.5 * (full + full.transpose())};
}

CovarianceEstimate covariance_qif(const LongitudinalDataset& data, const FitResult& fit, const KernelConfig& kernel,
                                  const QifConfig& cfg) {
  const EstimatingState state = evaluate_state(data, fit.beta, fit.theta, kernel);
  return covariance_qif(data, state, qif_variances(data, state, cfg), cfg);
}

}  // namespace plsim
