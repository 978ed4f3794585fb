#include "plsim/kernel_smoother.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace plsim {

void KernelConfig::validate() const {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw DomainError("bandwidth must be positive and finite");
  }
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) {
    throw DomainError("kernel ridge must be nonnegative");
  }
}

double kernel_eval(double u) {
  const double a = std::abs(u);
  return a <= 1.0 ? 0.75 * (1.0 - u * u) : 0.0;
}

WeightMoments weight_moments(double t, std::span<const double> index_values, const KernelConfig& cfg) {
  cfg.validate();
  const double h = cfg.bandwidth;
  WeightMoments m;
  for (double v : index_values) {
    const double u = v - t;
    const double k = kernel_eval(u / h) / h;
    m.s0 += k;
    m.s1 += k * u;
    m.s2 += k * u * u;
  }
  const double inv_n = index_values.empty() ? 0.0 : 1.0 / static_cast<double>(index_values.size());
  m.s0 *= inv_n;
  m.s1 *= inv_n;
  m.s2 *= inv_n;
  return m;
}

double weight_denominator(const WeightMoments& m, const KernelConfig& cfg) {
  const double s2 = m.s2 + cfg.ridge * cfg.bandwidth * cfg.bandwidth * m.s0;
  return m.s0 * s2 - m.s1 * m.s1;
}

bool is_degenerate(const WeightMoments& m, const KernelConfig& cfg) {
  if (!(m.s0 > 0.0)) return true;
  return weight_denominator(m, cfg) <= 1e-12 * std::max(1.0, m.s0 * m.s0);
}

namespace {

std::string degenerate_message(double t, double d, const std::string& where) {
  std::ostringstream os;
  os << "local-linear weights degenerate at t=" << t << " (denominator " << d << ")";
  if (!where.empty()) os << " for " << where;
  return os.str();
}

}  // namespace

DegenerateSmootherError::DegenerateSmootherError(double t, double denominator, const std::string& where)
    : std::runtime_error(degenerate_message(t, denominator, where)), t_(t), denominator_(denominator) {}

LocalWeights local_linear_weights(double t, std::span<const double> index_values, const KernelConfig& cfg) {
  const WeightMoments m = weight_moments(t, index_values, cfg);
  const double d = weight_denominator(m, cfg);
  if (is_degenerate(m, cfg)) throw DegenerateSmootherError(t, d);

  const double h = cfg.bandwidth;
  const double s2 = m.s2 + cfg.ridge * h * h * m.s0;
  const double inv_n = 1.0 / static_cast<double>(index_values.size());
  LocalWeights out{Vector(static_cast<Index>(index_values.size())), Vector(static_cast<Index>(index_values.size()))};
  for (std::size_t b = 0; b < index_values.size(); ++b) {
    const double u = index_values[b] - t;
    const double k = inv_n * kernel_eval(u / h) / h;
    out.w(static_cast<Index>(b)) = k * (s2 - u * m.s1) / d;
    out.w_tilde(static_cast<Index>(b)) = k * (u * m.s0 - m.s1) / d;
  }
  return out;
}

namespace {

std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

LinkEstimate estimate_g(double t, const IndexParam& beta, const Vector& theta, const LongitudinalDataset& data,
                        const KernelConfig& cfg) {
  const Vector index = data.x() * beta.beta();
  const LocalWeights lw = local_linear_weights(t, as_span(index), cfg);
  const Vector r = data.y() - data.z() * theta;
  return {lw.w.dot(r), lw.w_tilde.dot(r)};
}

ConditionalMeans estimate_g1_g2(double t, const IndexParam& beta, const LongitudinalDataset& data,
                                const KernelConfig& cfg) {
  const Vector index = data.x() * beta.beta();
  const LocalWeights lw = local_linear_weights(t, as_span(index), cfg);
  return {data.x().transpose() * lw.w, data.z().transpose() * lw.w};
}

// -------------------------------------------------------------------------
// Windowed smoother
// -------------------------------------------------------------------------

LocalLinearSmoother::LocalLinearSmoother(const LongitudinalDataset& data, const Vector& beta, KernelConfig cfg)
    : data_(&data), cfg_(cfg) {
  cfg_.validate();
  if (beta.size() != data.p()) throw DomainError("smoother: beta length does not match p");
  index_ = data.x() * beta;
  const Index n = index_.size();
  order_.resize(static_cast<std::size_t>(n));
  std::iota(order_.begin(), order_.end(), Index{0});
  std::stable_sort(order_.begin(), order_.end(), [&](Index a, Index b) { return index_(a) < index_(b); });
  sorted_.resize(static_cast<std::size_t>(n));
  sorted_y_.resize(n);
  sorted_xz_.resize(data.p() + data.q(), n);
  for (std::size_t k = 0; k < order_.size(); ++k) {
    const Index row = order_[k];
    const auto col = static_cast<Index>(k);
    sorted_[k] = index_(row);
    sorted_y_(col) = data.y()(row);
    sorted_xz_.col(col).head(data.p()) = data.x().row(row).transpose();
    sorted_xz_.col(col).tail(data.q()) = data.z().row(row).transpose();
  }
}

template <class Visit>
void LocalLinearSmoother::for_window(double t, Index excluded_subject, Visit&& visit) const {
  const double h = cfg_.bandwidth;
  const auto lo = std::lower_bound(sorted_.begin(), sorted_.end(), t - h);
  const auto hi = std::upper_bound(lo, sorted_.end(), t + h);
  const double inv_nh = 1.0 / (static_cast<double>(sorted_.size()) * h);
  for (auto it = lo; it != hi; ++it) {
    const Index row = order_[static_cast<std::size_t>(it - sorted_.begin())];
    if (excluded_subject >= 0 && data_->subject_of_row(row) == excluded_subject) continue;
    const double u = *it - t;
    const double k = inv_nh * kernel_eval(u / h);
    if (k > 0.0) visit(row, u, k);
  }
}

WeightMoments LocalLinearSmoother::moments(double t, Index excluded_subject) const {
  WeightMoments m;
  for_window(t, excluded_subject, [&](Index, double u, double k) {
    m.s0 += k;
    m.s1 += k * u;
    m.s2 += k * u * u;
  });
  return m;
}

// The window of t is a contiguous block of the sorted observations, so the
// weighted sums become dense dot products and one matrix-vector product.
SmootherEval LocalLinearSmoother::evaluate_sorted(double t, const Vector& r_sorted) const {
  const double h = cfg_.bandwidth;
  const auto lo = std::lower_bound(sorted_.begin(), sorted_.end(), t - h);
  const auto hi = std::upper_bound(lo, sorted_.end(), t + h);
  const Index start = lo - sorted_.begin();
  const Index len = hi - lo;
  const double inv_nh = 1.0 / (static_cast<double>(sorted_.size()) * h);

  const Eigen::Map<const Vector> pts(sorted_.data() + start, len);
  const Vector u = pts.array() - t;
  const Vector k = (inv_nh * 0.75) * (1.0 - (u.array() / h).square()).max(0.0);
  WeightMoments m;
  m.s0 = k.sum();
  m.s1 = k.dot(u);
  m.s2 = k.cwiseProduct(u).dot(u);
  const double d = weight_denominator(m, cfg_);
  if (is_degenerate(m, cfg_)) throw DegenerateSmootherError(t, d);
  const double s2 = m.s2 + cfg_.ridge * h * h * m.s0;

  const Vector w = k.array() * (s2 - u.array() * m.s1) / d;
  const Vector wt = k.array() * (u.array() * m.s0 - m.s1) / d;
  const auto r = r_sorted.segment(start, len);
  const Vector means = sorted_xz_.middleCols(start, len) * w;

  SmootherEval out;
  out.t = t;
  out.effective_mass = m.s0;
  out.g_hat = w.dot(r);
  out.g_prime_hat = wt.dot(r);
  out.g1_hat = means.head(data_->p());
  out.g2_hat = means.tail(data_->q());
  return out;
}

Vector LocalLinearSmoother::sorted_partial_residual(const Vector& theta) const {
  if (theta.size() == 0) return sorted_y_;
  if (theta.size() != data_->q()) throw DomainError("smoother: theta length does not match q");
  return sorted_y_ - sorted_xz_.bottomRows(data_->q()).transpose() * theta;
}

SmootherEval LocalLinearSmoother::evaluate(double t, const Vector& theta) const {
  return evaluate_sorted(t, sorted_partial_residual(theta));
}

SmootherFit LocalLinearSmoother::fit_observed(const Vector& theta) const {
  const Index n = index_.size();
  const Vector r_sorted = sorted_partial_residual(theta);
  SmootherFit fit{Vector(n), Vector(n), Matrix(n, data_->p()), Matrix(n, data_->q())};
  for (Index a = 0; a < n; ++a) {
    SmootherEval e;
    try {
      e = evaluate_sorted(index_(a), r_sorted);
    } catch (const DegenerateSmootherError& err) {
      const Index i = data_->subject_of_row(a);
      throw DegenerateSmootherError(err.t(), err.denominator(),
                                    "subject '" + data_->subject(i).id + "' row " +
                                        std::to_string(a - data_->offset(i) + 1));
    }
    fit.g(a) = e.g_hat;
    fit.g_prime(a) = e.g_prime_hat;
    fit.g1.row(a) = e.g1_hat.transpose();
    fit.g2.row(a) = e.g2_hat.transpose();
  }
  return fit;
}

std::vector<GPoint> LocalLinearSmoother::curve(const Vector& theta, std::span<const double> grid) const {
  std::vector<GPoint> out;
  out.reserve(grid.size());
  const double lo = sorted_.front();
  const double hi = sorted_.back();
  for (double t : grid) {
    if (t < lo || t > hi) continue;
    const SmootherEval e = evaluate(t, theta);
    out.push_back({t, e.g_hat, e.g_prime_hat});
  }
  return out;
}

Vector LocalLinearSmoother::leave_subject_out(Index subject, const Vector& partial_residual) const {
  const Index off = data_->offset(subject);
  const Index m = data_->cluster_size(subject);
  Vector pred(m);
  for (Index j = 0; j < m; ++j) {
    const double t = index_(off + j);
    const WeightMoments mo = moments(t, subject);
    if (is_degenerate(mo, cfg_)) {
      pred(j) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const double d = weight_denominator(mo, cfg_);
    const double s2 = mo.s2 + cfg_.ridge * cfg_.bandwidth * cfg_.bandwidth * mo.s0;
    double g = 0.0;
    for_window(t, subject, [&](Index row, double u, double k) { g += k * (s2 - u * mo.s1) / d * partial_residual(row); });
    pred(j) = g;
  }
  return pred;
}

// -------------------------------------------------------------------------
// Bandwidth selection
// -------------------------------------------------------------------------

BandwidthSelection select_bandwidth(const LongitudinalDataset& data, const IndexParam& beta, const Vector& theta,
                                    std::vector<double> grid, double ridge, double trim) {
  if (!(trim >= 0.0 && trim < 0.5)) throw BandwidthSelectionError("trim fraction must lie in [0, 0.5)");
  if (grid.empty()) throw BandwidthSelectionError("bandwidth grid is empty");
  for (double h : grid) {
    if (!(h > 0.0) || !std::isfinite(h)) throw BandwidthSelectionError("bandwidth grid entries must be positive");
  }
  std::sort(grid.begin(), grid.end());

  const Vector r = data.y() - data.z() * theta;
  const double r_mean = r.mean();
  const double r_var = (r.array() - r_mean).square().mean();

  // Index values outside the central quantile range are predicted by
  // extrapolation once their subject is held out; they are left out of the
  // criterion for every bandwidth so that all grid entries are scored on the
  // same points.
  const Vector t = data.x() * beta.beta();
  std::vector<double> sorted(t.data(), t.data() + t.size());
  std::sort(sorted.begin(), sorted.end());
  const auto at = [&](double frac) {
    const auto k = static_cast<std::size_t>(std::floor(frac * static_cast<double>(sorted.size() - 1)));
    return sorted[k];
  };
  const double t_lo = at(trim);
  const double t_hi = at(1.0 - trim);

  BandwidthSelection out;
  out.grid = grid;
  out.cv_error.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
  out.skipped_points.assign(grid.size(), 0);

  std::ptrdiff_t best = -1;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const LocalLinearSmoother smoother(data, beta.beta(), KernelConfig{grid[g], ridge});
    double sse = 0.0;
    Index used = 0;
    for (Index i = 0; i < data.n(); ++i) {
      const Vector pred = smoother.leave_subject_out(i, r);
      const Index off = data.offset(i);
      for (Index j = 0; j < pred.size(); ++j) {
        if (t(off + j) < t_lo || t(off + j) > t_hi) continue;
        if (std::isnan(pred(j))) {
          ++out.skipped_points[g];
          continue;
        }
        const double e = r(off + j) - pred(j);
        sse += e * e;
        ++used;
      }
    }
    if (used == 0) continue;
    out.cv_error[g] = sse / static_cast<double>(used);
    if (best < 0) {
      best = static_cast<std::ptrdiff_t>(g);
    } else {
      const double cur = out.cv_error[static_cast<std::size_t>(best)];
      if (out.cv_error[g] < cur - 1e-9 * cur - 1e-12 * r_var) best = static_cast<std::ptrdiff_t>(g);
    }
  }
  if (best < 0) {
    throw BandwidthSelectionError("leave-one-subject-out smoother is degenerate at every point for every bandwidth");
  }
  out.bandwidth = grid[static_cast<std::size_t>(best)];
  return out;
}

std::vector<double> default_bandwidth_grid(const Vector& index_values) {
  const double n = static_cast<double>(index_values.size());
  const double mean = index_values.mean();
  double sd = std::sqrt((index_values.array() - mean).square().sum() / std::max(1.0, n - 1.0));
  if (!(sd > 0.0)) sd = 1.0;
  const double base = sd * std::pow(n, -0.2);
  const double lo = std::log(2.0 * base);
  const double hi = std::log(8.0 * base);
  std::vector<double> grid(10);
  for (int k = 0; k < 10; ++k) grid[static_cast<std::size_t>(k)] = std::exp(lo + (hi - lo) * k / 9.0);
  return grid;
}

}  // namespace plsim
