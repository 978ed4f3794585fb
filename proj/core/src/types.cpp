#include "plsim/types.hpp"

#include <cmath>
#include <sstream>

namespace plsim {

namespace {

void require_finite(const Eigen::Ref<const Matrix>& m, const std::string& what, const std::string& id) {
  if (!m.allFinite()) {
    throw DataError("subject '" + id + "': non-finite entry in " + what);
  }
}

}  // namespace

LongitudinalDataset::LongitudinalDataset(std::vector<Subject> subjects)
    : subjects_(std::move(subjects)) {
  if (subjects_.size() < 2) {
    throw DataError("dataset needs at least 2 subjects, got " + std::to_string(subjects_.size()));
  }
  p_ = subjects_.front().x.cols();
  q_ = subjects_.front().z.cols();

  Index total = 0;
  for (const auto& s : subjects_) {
    const Index m = s.y.size();
    if (m < 1) {
      throw DataError("subject '" + s.id + "' has no rows");
    }
    if (s.x.rows() != m || s.z.rows() != m) {
      throw DataError("subject '" + s.id + "': y, x and z row counts differ");
    }
    if (s.x.cols() != p_ || s.z.cols() != q_) {
      throw DataError("subject '" + s.id + "': covariate dimensions differ from the first subject");
    }
    require_finite(s.y, "y", s.id);
    require_finite(s.x, "x", s.id);
    require_finite(s.z, "z", s.id);
    max_cluster_ = std::max(max_cluster_, m);
    total += m;
  }

  y_.resize(total);
  x_.resize(total, p_);
  z_.resize(total, q_);
  offsets_.reserve(subjects_.size());
  row_subject_.reserve(static_cast<std::size_t>(total));
  Index row = 0;
  for (std::size_t i = 0; i < subjects_.size(); ++i) {
    const auto& s = subjects_[i];
    const Index m = s.size();
    offsets_.push_back(row);
    y_.segment(row, m) = s.y;
    x_.middleRows(row, m) = s.x;
    z_.middleRows(row, m) = s.z;
    for (Index j = 0; j < m; ++j) {
      row_subject_.push_back(static_cast<Index>(i));
    }
    row += m;
  }
}

bool LongitudinalDataset::all_clusters_at_least(Index m) const {
  for (const auto& s : subjects_) {
    if (s.size() < m) return false;
  }
  return true;
}

LongitudinalDataset LongitudinalDataset::select_columns(const std::vector<Index>& x_columns,
                                                        const std::vector<Index>& z_columns) const {
  std::vector<Subject> out;
  out.reserve(subjects_.size());
  for (const auto& s : subjects_) {
    Subject t;
    t.id = s.id;
    t.y = s.y;
    t.x.resize(s.size(), static_cast<Index>(x_columns.size()));
    t.z.resize(s.size(), static_cast<Index>(z_columns.size()));
    for (std::size_t c = 0; c < x_columns.size(); ++c) {
      if (x_columns[c] < 0 || x_columns[c] >= p_) throw DomainError("x column out of range");
      t.x.col(static_cast<Index>(c)) = s.x.col(x_columns[c]);
    }
    for (std::size_t c = 0; c < z_columns.size(); ++c) {
      if (z_columns[c] < 0 || z_columns[c] >= q_) throw DomainError("z column out of range");
      t.z.col(static_cast<Index>(c)) = s.z.col(z_columns[c]);
    }
    out.push_back(std::move(t));
  }
  return LongitudinalDataset(std::move(out));
}

// -------------------------------------------------------------------------
// Delete-one-component algebra
// -------------------------------------------------------------------------

namespace {

double checked_anchor_value(const Vector& reduced) {
  const double sq = reduced.squaredNorm();
  if (!(sq < 1.0)) {
    std::ostringstream os;
    os << "reduced index vector must have norm < 1, got norm " << std::sqrt(sq);
    throw DomainError(os.str());
  }
  return std::sqrt(1.0 - sq);
}

void check_anchor(Index anchor, Index p) {
  if (anchor < 0 || anchor >= p) {
    throw DomainError("anchor " + std::to_string(anchor) + " out of range for p=" + std::to_string(p));
  }
}

}  // namespace

Vector embed_beta(const Vector& reduced, Index anchor) {
  const Index p = reduced.size() + 1;
  check_anchor(anchor, p);
  const double top = checked_anchor_value(reduced);
  Vector beta(p);
  beta.head(anchor) = reduced.head(anchor);
  beta(anchor) = top;
  beta.tail(p - anchor - 1) = reduced.tail(p - anchor - 1);
  return beta;
}

Matrix jacobian(const Vector& reduced, Index anchor) {
  const Index p = reduced.size() + 1;
  check_anchor(anchor, p);
  const double top = checked_anchor_value(reduced);
  Matrix j = Matrix::Zero(p, p - 1);
  for (Index s = 0, c = 0; s < p; ++s) {
    if (s == anchor) continue;
    j(s, c++) = 1.0;
  }
  j.row(anchor) = -reduced.transpose() / top;
  return j;
}

Vector reduce_beta(const Vector& beta, Index anchor) {
  const Index p = beta.size();
  check_anchor(anchor, p);
  Vector reduced(p - 1);
  reduced.head(anchor) = beta.head(anchor);
  reduced.tail(p - anchor - 1) = beta.tail(p - anchor - 1);
  return reduced;
}

AnchorChoice choose_anchor(const Vector& beta_init) {
  if (beta_init.size() == 0 || !beta_init.allFinite()) {
    throw DomainError("choose_anchor: empty or non-finite direction");
  }
  Index r = 0;
  double best = std::abs(beta_init(0));
  for (Index j = 1; j < beta_init.size(); ++j) {
    if (std::abs(beta_init(j)) > best) {
      best = std::abs(beta_init(j));
      r = j;
    }
  }
  if (best == 0.0) {
    throw DomainError("choose_anchor: zero direction has no anchor");
  }
  AnchorChoice out;
  out.anchor = r;
  out.beta = beta_init / beta_init.norm();
  if (beta_init(r) < 0.0) out.beta = -out.beta;
  return out;
}

IndexParam IndexParam::from_reduced(const Vector& reduced, Index anchor) {
  IndexParam param;
  param.beta_ = embed_beta(reduced, anchor);
  param.reduced_ = reduced;
  param.anchor_ = anchor;
  return param;
}

IndexParam IndexParam::from_beta(const Vector& beta, Index anchor) {
  check_anchor(anchor, beta.size());
  if (std::abs(beta.norm() - 1.0) > 1e-10) {
    throw DomainError("index vector must have unit norm");
  }
  if (!(beta(anchor) > 0.0)) {
    throw DomainError("anchor coordinate must be positive");
  }
  // Rebuild through the embedding so the anchor coordinate is exactly sqrt(1 - |reduced|^2).
  return from_reduced(reduce_beta(beta, anchor), anchor);
}

IndexParam IndexParam::from_direction(const Vector& direction) {
  const AnchorChoice choice = choose_anchor(direction);
  return from_beta(choice.beta, choice.anchor);
}

IndexParam IndexParam::with_anchor(Index anchor) const {
  return from_beta(beta_, anchor);
}

Vector FitResult::xi() const { return stack_xi(beta, theta); }

Vector stack_xi(const IndexParam& beta, const Vector& theta) {
  Vector xi(beta.reduced().size() + theta.size());
  xi << beta.reduced(), theta;
  return xi;
}

Matrix full_parameter_map(const IndexParam& beta, Index q) {
  const Index p = beta.p();
  Matrix b = Matrix::Zero(p + q, p - 1 + q);
  b.topLeftCorner(p, p - 1) = beta.jacobian();
  b.bottomRightCorner(q, q).setIdentity();
  return b;
}

}  // namespace plsim
