#include "plsim/correlation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace plsim {

CorrelationKind parse_correlation_kind(std::string_view s) {
  if (s == "independence") return CorrelationKind::Independence;
  if (s == "exchangeable") return CorrelationKind::Exchangeable;
  if (s == "ar1") return CorrelationKind::Ar1;
  throw DomainError("unknown correlation kind '" + std::string(s) +
                    "' (valid: independence, exchangeable, ar1)");
}

std::string to_string(CorrelationKind kind) {
  switch (kind) {
    case CorrelationKind::Independence: return "independence";
    case CorrelationKind::Exchangeable: return "exchangeable";
    case CorrelationKind::Ar1: return "ar1";
  }
  return "?";
}

VariancePooling parse_variance_pooling(std::string_view s) {
  if (s == "pooled") return VariancePooling::Pooled;
  if (s == "per_subject") return VariancePooling::PerSubject;
  throw DomainError("unknown variance pooling '" + std::string(s) + "' (valid: pooled, per_subject)");
}

std::string to_string(VariancePooling pooling) {
  return pooling == VariancePooling::Pooled ? "pooled" : "per_subject";
}

RhoRange rho_range(CorrelationKind kind, Index m) {
  switch (kind) {
    case CorrelationKind::Independence: return {-1.0, 1.0};
    case CorrelationKind::Exchangeable:
      return {m >= 2 ? -1.0 / static_cast<double>(m - 1) : -1.0, 1.0};
    case CorrelationKind::Ar1: return {-1.0, 1.0};
  }
  return {-1.0, 1.0};
}

Matrix build_correlation(CorrelationKind kind, double rho, Index m) {
  if (m < 1) throw DomainError("correlation matrix size must be positive");
  if (kind == CorrelationKind::Independence || m == 1) return Matrix::Identity(m, m);
  const RhoRange range = rho_range(kind, m);
  if (!(rho > range.lower && rho < range.upper)) {
    std::ostringstream os;
    os << to_string(kind) << " rho=" << rho << " outside the positive-definite range (" << range.lower << ", "
       << range.upper << ") for m=" << m;
    throw DomainError(os.str());
  }
  Matrix r(m, m);
  for (Index a = 0; a < m; ++a) {
    for (Index b = 0; b < m; ++b) {
      if (a == b) {
        r(a, b) = 1.0;
      } else if (kind == CorrelationKind::Exchangeable) {
        r(a, b) = rho;
      } else {
        r(a, b) = std::pow(rho, static_cast<double>(std::abs(a - b)));
      }
    }
  }
  return r;
}

double estimate_rho(const std::vector<Vector>& standardized_residuals, CorrelationKind kind) {
  if (kind == CorrelationKind::Independence) return 0.0;
  double sum = 0.0;
  double count = 0.0;
  Index m_max = 0;
  for (const auto& r : standardized_residuals) {
    const Index m = r.size();
    m_max = std::max(m_max, m);
    if (m < 2) continue;
    if (kind == CorrelationKind::Exchangeable) {
      // sum_{j<k} r_j r_k = ((sum r)^2 - sum r^2) / 2
      sum += 0.5 * (r.sum() * r.sum() - r.squaredNorm());
      count += 0.5 * static_cast<double>(m * (m - 1));
    } else {
      sum += r.head(m - 1).dot(r.tail(m - 1));
      count += static_cast<double>(m - 1);
    }
  }
  if (count == 0.0) {
    throw DomainError("cannot estimate " + to_string(kind) + " correlation: no subject has 2 or more rows");
  }
  const RhoRange range = rho_range(kind, m_max);
  const double margin = 1e-6;
  return std::clamp(sum / count, range.lower + margin, range.upper - margin);
}

std::vector<Vector> estimate_marginal_variance(const std::vector<Vector>& residuals, VariancePooling pooling) {
  if (residuals.empty()) throw DomainError("no residuals to estimate marginal variances from");
  double ss = 0.0;
  double total = 0.0;
  for (const auto& r : residuals) {
    ss += r.squaredNorm();
    total += static_cast<double>(r.size());
  }
  double pooled = total > 0.0 ? ss / total : 0.0;
  if (!(pooled > 0.0)) pooled = 1.0;

  std::vector<Vector> out;
  out.reserve(residuals.size());
  for (const auto& r : residuals) {
    double v = pooled;
    if (pooling == VariancePooling::PerSubject && r.size() > 0) {
      v = r.squaredNorm() / static_cast<double>(r.size());
      if (!(v > 0.0)) v = pooled;
    }
    out.push_back(Vector::Constant(r.size(), v));
  }
  return out;
}

VariancePooling default_pooling(const LongitudinalDataset&) {
  return VariancePooling::Pooled;
}

std::vector<Matrix> basis_matrices(CorrelationKind kind, Index m) {
  if (m < 1) throw DomainError("basis matrix size must be positive");
  std::vector<Matrix> out{Matrix::Identity(m, m)};
  if (kind == CorrelationKind::Independence) return out;
  if (m < 2) throw DomainError(to_string(kind) + " basis needs cluster size >= 2");
  if (kind == CorrelationKind::Exchangeable) {
    out.push_back(Matrix::Ones(m, m) - Matrix::Identity(m, m));
    return out;
  }
  Matrix band = Matrix::Zero(m, m);
  for (Index a = 0; a + 1 < m; ++a) {
    band(a, a + 1) = 1.0;
    band(a + 1, a) = 1.0;
  }
  Matrix corners = Matrix::Zero(m, m);
  corners(0, 0) = 1.0;
  corners(m - 1, m - 1) = 1.0;
  out.push_back(std::move(band));
  out.push_back(std::move(corners));
  return out;
}

WorkingCovariance::WorkingCovariance(CorrelationKind kind, double rho, std::vector<Vector> marginal_variances)
    : kind_(kind), rho_(kind == CorrelationKind::Independence ? 0.0 : rho), variances_(std::move(marginal_variances)) {
  inverses_.reserve(variances_.size());
  for (std::size_t i = 0; i < variances_.size(); ++i) {
    const Vector& a = variances_[i];
    if ((a.array() <= 0.0).any() || !a.allFinite()) {
      throw DomainError("marginal variances must be positive (subject " + std::to_string(i) + ")");
    }
    const Index m = a.size();
    const Vector inv_sd = a.array().sqrt().inverse();
    if (kind_ == CorrelationKind::Independence || m == 1) {
      inverses_.push_back(a.array().inverse().matrix().asDiagonal());
      continue;
    }
    const Matrix r = build_correlation(kind_, rho_, m);
    Eigen::LLT<Matrix> llt(r);
    if (llt.info() != Eigen::Success) {
      throw DomainError("working correlation is singular for subject " + std::to_string(i));
    }
    const Matrix r_inv = llt.solve(Matrix::Identity(m, m));
    inverses_.push_back(inv_sd.asDiagonal() * r_inv * inv_sd.asDiagonal());
  }
}

WorkingCovariance WorkingCovariance::identity(const LongitudinalDataset& data) {
  std::vector<Vector> ones;
  ones.reserve(static_cast<std::size_t>(data.n()));
  for (Index i = 0; i < data.n(); ++i) ones.push_back(Vector::Ones(data.cluster_size(i)));
  return WorkingCovariance(CorrelationKind::Independence, 0.0, std::move(ones));
}

Matrix WorkingCovariance::covariance(Index i) const {
  const Vector& a = marginal_variance(i);
  const Vector sd = a.array().sqrt();
  return sd.asDiagonal() * build_correlation(kind_, rho_, a.size()) * sd.asDiagonal();
}

std::vector<Vector> split_by_subject(const LongitudinalDataset& data, const Vector& stacked) {
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(data.n()));
  for (Index i = 0; i < data.n(); ++i) out.push_back(stacked.segment(data.offset(i), data.cluster_size(i)));
  return out;
}

WorkingCovariance estimate_working_covariance(const LongitudinalDataset& data, const Vector& residuals,
                                              CorrelationKind kind, std::optional<VariancePooling> pooling) {
  const auto per_subject = split_by_subject(data, residuals);
  auto variances = estimate_marginal_variance(per_subject, pooling.value_or(default_pooling(data)));
  double rho = 0.0;
  if (kind != CorrelationKind::Independence) {
    std::vector<Vector> standardized;
    standardized.reserve(per_subject.size());
    for (std::size_t i = 0; i < per_subject.size(); ++i) {
      standardized.push_back(per_subject[i].array() / variances[i].array().sqrt());
    }
    rho = estimate_rho(standardized, kind);
  }
  return WorkingCovariance(kind, rho, std::move(variances));
}

}  // namespace plsim
