#include "plsim/sim_harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

namespace plsim {

// -------------------------------------------------------------------------
// Designs
// -------------------------------------------------------------------------

SubjectStratum SimDesign::stratum_of(Index i) const {
  const Index one_based = i + 1;
  for (const auto& s : strata) {
    const Index upper = n * s.numerator / s.denominator;
    if (one_based <= upper) return s;
  }
  return strata.back();
}

void SimDesign::validate() const {
  if (n < 2) throw DomainError("design needs n >= 2");
  if (p() < 2) throw DomainError("design needs p >= 2");
  if (std::abs(beta0.norm() - 1.0) > 1e-12) throw DomainError("beta0 must have unit norm");
  if (!link) throw DomainError("design has no link function");
  if (strata.empty()) throw DomainError("design needs at least one subject stratum");
  for (const auto& s : strata) {
    if (s.denominator <= 0 || s.numerator < 0) throw DomainError("stratum bound must be a nonnegative fraction");
    if (s.cluster_size < 1) throw DomainError("stratum cluster size must be >= 1");
    if (!(s.sigma >= 0.0)) throw DomainError("stratum sigma must be >= 0");
    if (s.cluster_size >= 2 && error_kind != CorrelationKind::Independence) {
      const RhoRange r = rho_range(error_kind, s.cluster_size);
      if (!(rho > r.lower && rho < r.upper)) throw DomainError("design rho outside the positive-definite range");
    }
  }
}

namespace {

Vector example_beta(Index p) {
  Vector b = Vector::Zero(p);
  b.head(3) << 3.0, 2.0, 1.0;
  return b / std::sqrt(14.0);
}

}  // namespace

SimDesign example1(Index n, CorrelationKind error_kind, std::uint64_t seed) {
  SimDesign d;
  d.name = "example1";
  d.n = n;
  d.beta0 = example_beta(3);
  d.theta0 = Vector::Constant(1, 0.3);
  d.error_kind = error_kind;
  d.strata = {{1, 2, 3, 1.0}, {1, 1, 3, 2.0}};
  d.seed = seed;
  return d;
}

SimDesign example2(Index n, CorrelationKind error_kind, std::uint64_t seed) {
  SimDesign d = example1(n, error_kind, seed);
  d.name = "example2";
  d.strata = {{1, 3, 3, 1.0}, {2, 3, 4, 2.0}, {1, 1, 5, 3.0}};
  return d;
}

SimDesign example3(Index n, CorrelationKind error_kind, std::uint64_t seed) {
  SimDesign d;
  d.name = "example3";
  d.n = n;
  d.beta0 = example_beta(20);
  d.theta0 = Vector::Zero(30);
  d.theta0.head(2) << 3.0, 1.5;
  d.error_kind = error_kind;
  d.strata = {{1, 3, 3, 0.5}, {2, 3, 3, 1.0}, {1, 1, 3, 2.0}};
  d.seed = seed;
  return d;
}

// -------------------------------------------------------------------------
// Data generation
// -------------------------------------------------------------------------

LongitudinalDataset generate_dataset(const SimDesign& design, std::uint64_t replicate) {
  design.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(design.seed), static_cast<std::uint32_t>(design.seed >> 32),
                    static_cast<std::uint32_t>(replicate), static_cast<std::uint32_t>(replicate >> 32)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  std::map<Index, Matrix> chol;
  const Index p = design.p();
  const Index q = design.q();
  std::vector<Subject> subjects;
  subjects.reserve(static_cast<std::size_t>(design.n));
  for (Index i = 0; i < design.n; ++i) {
    const SubjectStratum st = design.stratum_of(i);
    const Index m = st.cluster_size;
    auto it = chol.find(m);
    if (it == chol.end()) {
      const Matrix r = build_correlation(design.error_kind, design.rho, m);
      it = chol.emplace(m, Matrix(Eigen::LLT<Matrix>(r).matrixL())).first;
    }
    Subject s;
    s.id = std::to_string(i + 1);
    s.x.resize(m, p);
    s.z.resize(m, q);
    for (Index j = 0; j < m; ++j) {
      for (Index c = 0; c < p; ++c) s.x(j, c) = normal(rng);
      for (Index c = 0; c < q; ++c) s.z(j, c) = uniform(rng);
    }
    Vector w(m);
    for (Index j = 0; j < m; ++j) w(j) = normal(rng);
    const Vector e = st.sigma * (it->second * w);
    const Vector t = s.x * design.beta0;
    s.y = t.unaryExpr(design.link) + s.z * design.theta0 + e;
    subjects.push_back(std::move(s));
  }
  return LongitudinalDataset(std::move(subjects));
}

// -------------------------------------------------------------------------
// Methods
// -------------------------------------------------------------------------

std::string to_string(MethodKind kind) {
  switch (kind) {
    case MethodKind::Independence: return "independence";
    case MethodKind::Gee: return "gee";
    case MethodKind::Qif: return "qif";
    case MethodKind::PenalizedGee: return "penalized_gee";
    case MethodKind::PenalizedQif: return "penalized_qif";
    case MethodKind::OracleGee: return "oracle_gee";
    case MethodKind::OracleQif: return "oracle_qif";
  }
  return "?";
}

MethodKind parse_method_kind(const std::string& s) {
  for (auto k : {MethodKind::Independence, MethodKind::Gee, MethodKind::Qif, MethodKind::PenalizedGee,
                 MethodKind::PenalizedQif, MethodKind::OracleGee, MethodKind::OracleQif}) {
    if (to_string(k) == s) return k;
  }
  throw DomainError("unknown method '" + s +
                    "' (valid: independence, gee, qif, penalized_gee, penalized_qif, oracle_gee, oracle_qif)");
}

FitResult oracle_fit(const LongitudinalDataset& data, const SimDesign& design, const QifConfig& cfg,
                     bool use_qif) {
  const std::vector<Index> xs = support_of(design.beta0);
  const std::vector<Index> zs = support_of(design.theta0);
  if (xs.size() < 2) throw DomainError("oracle fit needs at least two nonzero index coefficients");
  const LongitudinalDataset sub = data.select_columns(xs, zs);
  const FitResult f = use_qif ? solve_qif(sub, cfg) : solve_gee(sub, cfg);

  const Index p = data.p();
  const Index q = data.q();
  Vector beta = Vector::Zero(p);
  for (std::size_t k = 0; k < xs.size(); ++k) beta(xs[k]) = f.beta.beta()(static_cast<Index>(k));
  Vector theta = Vector::Zero(q);
  for (std::size_t k = 0; k < zs.size(); ++k) theta(zs[k]) = f.theta(static_cast<Index>(k));

  const Index anchor = xs[static_cast<std::size_t>(f.beta.anchor())];
  FitResult out = f;
  out.beta = IndexParam::from_beta(beta, anchor);
  out.theta = theta;

  // Position of each full coordinate in the sub-fit's (beta, theta) and (beta^(r), theta) vectors.
  std::vector<Index> full_pos(static_cast<std::size_t>(p + q), -1);
  for (std::size_t k = 0; k < xs.size(); ++k) full_pos[static_cast<std::size_t>(xs[k])] = static_cast<Index>(k);
  const Index ps = static_cast<Index>(xs.size());
  for (std::size_t k = 0; k < zs.size(); ++k) {
    full_pos[static_cast<std::size_t>(p + zs[k])] = ps + static_cast<Index>(k);
  }
  out.full_cov = Matrix::Zero(p + q, p + q);
  for (Index a = 0; a < p + q; ++a) {
    for (Index b = 0; b < p + q; ++b) {
      const Index sa = full_pos[static_cast<std::size_t>(a)];
      const Index sb = full_pos[static_cast<std::size_t>(b)];
      if (sa >= 0 && sb >= 0) out.full_cov(a, b) = f.full_cov(sa, sb);
    }
  }
  auto reduced_pos = [&](Index full) -> Index {
    const Index s = full_pos[static_cast<std::size_t>(full)];
    if (s < 0) return -1;
    if (full < p) {
      if (s == f.beta.anchor()) return -1;
      return s < f.beta.anchor() ? s : s - 1;
    }
    return s - 1;
  };
  const Index d = p - 1 + q;
  out.sandwich_cov = Matrix::Zero(d, d);
  std::vector<Index> red_full;  // full coordinate of each reduced coordinate
  for (Index j = 0; j < p + q; ++j) {
    if (j != anchor) red_full.push_back(j);
  }
  for (Index a = 0; a < d; ++a) {
    for (Index b = 0; b < d; ++b) {
      const Index ra = reduced_pos(red_full[static_cast<std::size_t>(a)]);
      const Index rb = reduced_pos(red_full[static_cast<std::size_t>(b)]);
      if (ra >= 0 && rb >= 0) out.sandwich_cov(a, b) = f.sandwich_cov(ra, rb);
    }
  }
  return out;
}

FitResult fit_method(const LongitudinalDataset& data, const MethodSpec& method, const SimDesign& design) {
  switch (method.kind) {
    case MethodKind::Independence: return solve_gee(data, working_independence(method.solver));
    case MethodKind::Gee: return solve_gee(data, method.solver);
    case MethodKind::Qif: return solve_qif(data, method.solver);
    case MethodKind::PenalizedGee:
    case MethodKind::PenalizedQif: {
      SelectionConfig sc;
      sc.method = method.kind == MethodKind::PenalizedGee ? SelectionMethod::Gee : SelectionMethod::Qif;
      sc.solver = method.solver;
      sc.penalty = method.penalty;
      return tune_lambdas(data, sc).fit;
    }
    case MethodKind::OracleGee: return oracle_fit(data, design, method.solver, false);
    case MethodKind::OracleQif: return oracle_fit(data, design, method.solver, true);
  }
  throw DomainError("unknown method kind");
}

// -------------------------------------------------------------------------
// Metrics
// -------------------------------------------------------------------------

ReplicateSummary summarize_fit(const SimDesign& design, const FitResult& fit, const LongitudinalDataset& data) {
  if (fit.beta.p() != design.p() || fit.theta.size() != design.q()) {
    throw DomainError("fit dimensions do not match the design");
  }
  if (static_cast<Index>(fit.g_grid.size()) != data.total_size()) {
    throw DomainError("fit carries no link estimate for every observation");
  }
  ReplicateSummary r;
  r.ok = true;
  r.converged = fit.converged;
  r.beta = fit.beta.beta();
  r.theta = fit.theta;
  const Vector t = data.x() * design.beta0;
  double s = 0.0;
  for (Index k = 0; k < data.total_size(); ++k) {
    const double e = fit.g_grid[static_cast<std::size_t>(k)].g - design.link(t(k));
    s += e * e;
  }
  r.mse_g = s / static_cast<double>(data.total_size());
  return r;
}

namespace {

double r_squared(const Vector& est, const Vector& truth) {
  const double denom = truth.squaredNorm();
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double ip = est.dot(truth);
  return ip * ip / (denom * denom);
}

}  // namespace

MetricsReport reduce_summaries(const SimDesign& design, const std::string& method,
                               const std::vector<ReplicateSummary>& reps) {
  const Index p = design.p();
  const Index q = design.q();
  MetricsReport m;
  m.method = method;
  m.bias_beta = Vector::Zero(p);
  m.se_beta = Vector::Zero(p);
  m.bias_theta = Vector::Zero(q);
  m.se_theta = Vector::Zero(q);
  Vector sum_b = Vector::Zero(p);
  Vector sum_b2 = Vector::Zero(p);
  Vector sum_t = Vector::Zero(q);
  Vector sum_t2 = Vector::Zero(q);
  for (const auto& r : reps) {
    if (!r.ok) {
      ++m.failures;
      m.failure_messages.push_back(r.error);
      continue;
    }
    if (r.beta.size() != p || r.theta.size() != q) throw DomainError("replicate dimensions do not match the design");
    ++m.replications;
    if (!r.converged) ++m.nonconverged;
    sum_b += r.beta;
    sum_b2 += r.beta.cwiseAbs2();
    sum_t += r.theta;
    sum_t2 += r.theta.cwiseAbs2();
    m.mse_beta += (r.beta - design.beta0).squaredNorm() / static_cast<double>(p);
    if (q > 0) m.mse_theta += (r.theta - design.theta0).squaredNorm() / static_cast<double>(q);
    m.mse_g += r.mse_g;
    m.r2_beta += r_squared(r.beta, design.beta0);
    m.r2_theta += r_squared(r.theta, design.theta0);
    for (Index j = 0; j < p; ++j) {
      const bool truth_zero = design.beta0(j) == 0.0;
      const bool est_zero = r.beta(j) == 0.0;
      m.tn_beta += truth_zero && est_zero ? 1.0 : 0.0;
      m.tp_beta += !truth_zero && !est_zero ? 1.0 : 0.0;
    }
    for (Index j = 0; j < q; ++j) {
      const bool truth_zero = design.theta0(j) == 0.0;
      const bool est_zero = r.theta(j) == 0.0;
      m.tn_theta += truth_zero && est_zero ? 1.0 : 0.0;
      m.tp_theta += !truth_zero && !est_zero ? 1.0 : 0.0;
    }
  }
  if (m.replications == 0) return m;
  const double l = static_cast<double>(m.replications);
  const Vector mean_b = sum_b / l;
  const Vector mean_t = sum_t / l;
  m.bias_beta = mean_b - design.beta0;
  m.bias_theta = mean_t - design.theta0;
  const double dof = m.replications > 1 ? l - 1.0 : 1.0;
  m.se_beta = ((sum_b2 - l * mean_b.cwiseAbs2()) / dof).cwiseMax(0.0).cwiseSqrt();
  m.se_theta = ((sum_t2 - l * mean_t.cwiseAbs2()) / dof).cwiseMax(0.0).cwiseSqrt();
  for (double* v : {&m.mse_beta, &m.mse_theta, &m.mse_g, &m.r2_beta, &m.r2_theta, &m.tn_beta, &m.tp_beta,
                    &m.tn_theta, &m.tp_theta}) {
    *v /= l;
  }
  return m;
}

MetricsReport compute_metrics(const SimDesign& design, const std::vector<FitResult>& fits,
                              const std::vector<LongitudinalDataset>& datasets) {
  if (fits.empty()) throw DomainError("compute_metrics needs at least one fit");
  if (fits.size() != datasets.size()) throw DomainError("one dataset per fit is required");
  std::vector<ReplicateSummary> reps;
  reps.reserve(fits.size());
  for (std::size_t k = 0; k < fits.size(); ++k) reps.push_back(summarize_fit(design, fits[k], datasets[k]));
  return reduce_summaries(design, "fits", reps);
}

// -------------------------------------------------------------------------
// Replications
// -------------------------------------------------------------------------

std::vector<MetricsReport> run_replications(const SimDesign& design, const std::vector<MethodSpec>& methods,
                                            int replications, int threads) {
  design.validate();
  if (replications < 1) throw DomainError("replications must be >= 1");
  if (methods.empty()) throw DomainError("no methods to run");
  const std::size_t n_methods = methods.size();
  const auto n_reps = static_cast<std::size_t>(replications);
  // results[method][replicate]
  std::vector<std::vector<ReplicateSummary>> results(n_methods, std::vector<ReplicateSummary>(n_reps));

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t r = next.fetch_add(1); r < n_reps; r = next.fetch_add(1)) {
      std::optional<LongitudinalDataset> data;
      std::string gen_error;
      try {
        data.emplace(generate_dataset(design, r));
      } catch (const std::exception& e) {
        gen_error = e.what();
      }
      for (std::size_t k = 0; k < n_methods; ++k) {
        ReplicateSummary& out = results[k][r];
        if (!data) {
          out.error = "replicate " + std::to_string(r) + ": " + gen_error;
          continue;
        }
        try {
          out = summarize_fit(design, fit_method(*data, methods[k], design), *data);
        } catch (const std::exception& e) {
          out = ReplicateSummary{};
          out.error = "replicate " + std::to_string(r) + ": " + e.what();
        }
      }
    }
  };

  int n_threads = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  n_threads = std::min(n_threads, replications);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<MetricsReport> reports;
  std::ostringstream failures;
  for (std::size_t k = 0; k < n_methods; ++k) {
    const std::string label = methods[k].label.empty() ? to_string(methods[k].kind) : methods[k].label;
    reports.push_back(reduce_summaries(design, label, results[k]));
    const MetricsReport& rep = reports.back();
    if (static_cast<double>(rep.failures) > 0.2 * static_cast<double>(replications)) {
      failures << "\n  " << label << ": " << rep.failures << " of " << replications << " fits failed";
      if (!rep.failure_messages.empty()) failures << " (first: " << rep.failure_messages.front() << ")";
    }
  }
  if (!failures.str().empty()) throw NumericalError("too many failed replications:" + failures.str());
  return reports;
}

}  // namespace plsim
