#include "property_checks.hpp"

#include "plsim/plsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace plsim::testing {

namespace {

LongitudinalDataset random_dataset(std::mt19937_64& rng, Index n, Index m, Index p, Index q, const Vector& beta,
                                   const Vector& theta, double a, double b) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  std::vector<Subject> subjects;
  for (Index i = 0; i < n; ++i) {
    Subject s;
    s.id = std::to_string(i + 1);
    s.x.resize(m, p);
    s.z.resize(m, q);
    s.y.resize(m);
    for (Index j = 0; j < m; ++j) {
      for (Index k = 0; k < p; ++k) s.x(j, k) = normal(rng);
      for (Index k = 0; k < q; ++k) s.z(j, k) = unif(rng);
      s.y(j) = a + b * s.x.row(j).dot(beta) + s.z.row(j).dot(theta);
    }
    subjects.push_back(std::move(s));
  }
  return LongitudinalDataset(std::move(subjects));
}

Vector random_unit(std::mt19937_64& rng, Index p) {
  std::normal_distribution<double> normal;
  Vector v(p);
  for (Index k = 0; k < p; ++k) v(k) = normal(rng);
  return choose_anchor(v).beta;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_bits(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return false;
  for (Index k = 0; k < a.size(); ++k) {
    if (!same_bits(a(k), b(k))) return false;
  }
  return true;
}

}  // namespace

CheckResult check_weight_identities(int datasets) {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> size(20, 200);
  std::uniform_real_distribution<double> width(0.2, 1.5);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  long points = 0;
  for (int d = 0; d < datasets; ++d) {
    const int n = size(rng);
    std::vector<double> t(static_cast<std::size_t>(n));
    for (double& v : t) v = normal(rng);
    const KernelConfig cfg{width(rng), 0.0};
    for (double at : t) {
      if (is_degenerate(weight_moments(at, t, cfg), cfg)) continue;
      const LocalWeights w = local_linear_weights(at, t, cfg);
      double s[4] = {0.0, 0.0, 0.0, 0.0};
      for (int k = 0; k < n; ++k) {
        const double u = t[static_cast<std::size_t>(k)] - at;
        s[0] += w.w(k);
        s[1] += w.w(k) * u;
        s[2] += w.w_tilde(k);
        s[3] += w.w_tilde(k) * u;
      }
      const double err = std::max({std::abs(s[0] - 1.0), std::abs(s[1]), std::abs(s[2]), std::abs(s[3] - 1.0)});
      worst = std::max(worst, err / n);
      ++points;
    }
  }
  return {"local-linear weight identities", worst <= 1e-10 && points > 0,
          std::to_string(points) + " points, max error / N " + fmt(worst)};
}

CheckResult check_affine_reproduction(int datasets) {
  std::mt19937_64 rng(202);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  long points = 0;
  for (int d = 0; d < datasets; ++d) {
    const Vector beta = random_unit(rng, 3);
    Vector theta(2);
    theta << normal(rng), normal(rng);
    const double a = normal(rng);
    const double b = normal(rng);
    const LongitudinalDataset data = random_dataset(rng, 30, 3, 3, 2, beta, theta, a, b);
    const IndexParam param = IndexParam::from_direction(beta);
    const Vector t = data.x() * beta;
    std::vector<double> sorted(t.data(), t.data() + t.size());
    std::sort(sorted.begin(), sorted.end());
    const double lo = sorted[sorted.size() / 10];
    const double hi = sorted[sorted.size() * 9 / 10];
    const KernelConfig cfg{0.8, 0.0};
    for (Index k = 0; k < t.size(); ++k) {
      if (t(k) < lo || t(k) > hi) continue;
      const LinkEstimate g = estimate_g(t(k), param, theta, data, cfg);
      worst = std::max({worst, std::abs(g.g - (a + b * t(k))), std::abs(g.g_prime - b)});
      ++points;
    }
  }
  return {"affine reproduction of estimate_g", worst <= 1e-10 && points > 0,
          std::to_string(points) + " interior points, max error " + fmt(worst)};
}

CheckResult check_jacobian_fd(int points) {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<int> dim(2, 6);
  std::uniform_real_distribution<double> radius(0.0, 0.9);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  for (int k = 0; k < points; ++k) {
    const int p = dim(rng);
    const Index anchor = std::uniform_int_distribution<int>(0, p - 1)(rng);
    Vector r(p - 1);
    for (Index j = 0; j < r.size(); ++j) r(j) = normal(rng);
    r *= radius(rng) / std::max(r.norm(), 1e-12);
    const Matrix j = jacobian(r, anchor);
    Matrix fd(p, p - 1);
    const double step = 1e-6;
    for (Index c = 0; c < p - 1; ++c) {
      Vector up = r;
      Vector dn = r;
      up(c) += step;
      dn(c) -= step;
      fd.col(c) = (embed_beta(up, anchor) - embed_beta(dn, anchor)) / (2.0 * step);
    }
    worst = std::max(worst, (j - fd).norm() / std::max(j.norm(), 1.0));
  }
  return {"jacobian vs central differences", worst <= 1e-5,
          std::to_string(points) + " points, max relative error " + fmt(worst)};
}

CheckResult check_scad_shape() {
  const double c = 3.7;
  double worst_jump = 0.0;
  double worst_tail = 0.0;
  for (double lambda : {0.01, 0.1, 0.5, 1.0, 7.0}) {
    const int mesh = 1000;
    const double top = 2.0 * c * lambda;
    const double lipschitz = 1.0 / (c - 1.0);
    double prev = scad_derivative(0.0, lambda, c);
    for (int k = 1; k <= mesh; ++k) {
      const double x = top * k / mesh;
      const double v = scad_derivative(x, lambda, c);
      // Beyond the Lipschitz bound of the linear pieces any change is a jump.
      worst_jump = std::max(worst_jump, std::abs(v - prev) - lipschitz * top / mesh);
      if (x >= c * lambda) worst_tail = std::max(worst_tail, std::abs(v));
      prev = v;
    }
    for (double knot : {lambda, c * lambda}) {
      const double delta = 1e-12 * std::max(1.0, knot);
      worst_jump = std::max(worst_jump, std::abs(scad_derivative(knot + delta, lambda, c) -
                                                 scad_derivative(knot - delta, lambda, c)));
    }
  }
  return {"SCAD derivative continuity and support", worst_jump < 1e-9 && worst_tail == 0.0,
          "max jump " + fmt(std::max(worst_jump, 0.0)) + ", max value beyond c*lambda " + fmt(worst_tail)};
}

CheckResult check_inverse_in_basis_span() {
  double worst = 0.0;
  int cases = 0;
  for (CorrelationKind kind : {CorrelationKind::Exchangeable, CorrelationKind::Ar1}) {
    for (Index m = 2; m <= 6; ++m) {
      const std::vector<Matrix> bases = basis_matrices(kind, m);
      Matrix design(m * m, static_cast<Index>(bases.size()));
      for (std::size_t s = 0; s < bases.size(); ++s) {
        design.col(static_cast<Index>(s)) = bases[s].reshaped();
      }
      const RhoRange range = rho_range(kind, m);
      for (int k = 0; k < 20; ++k) {
        const double frac = 0.025 + 0.95 * k / 19.0;
        const double rho = range.lower + frac * (range.upper - range.lower);
        const Matrix inv = build_correlation(kind, rho, m).inverse();
        const Vector target = inv.reshaped();
        const Vector coef = design.colPivHouseholderQr().solve(target);
        worst = std::max(worst, (design * coef - target).norm() / target.norm());
        ++cases;
      }
    }
  }
  return {"inverse correlation in basis span", worst <= 1e-10,
          std::to_string(cases) + " (kind, m, rho) cases, max relative residual " + fmt(worst)};
}

CheckResult check_qif_k1_matches_independence_gee() {
  const LongitudinalDataset data = generate_dataset(example1(60, CorrelationKind::Exchangeable, 5), 0);
  QifConfig qcfg;
  qcfg.correlation = CorrelationKind::Independence;
  qcfg.unit_variance = true;
  qcfg.tolerance = 1e-9;
  qcfg.max_iterations = 200;
  GeeConfig gcfg = working_independence();
  gcfg.tolerance = 1e-9;
  gcfg.max_iterations = 200;
  const FitResult q = solve_qif(data, qcfg);
  const FitResult g = solve_gee(data, gcfg);
  const double db = (q.beta.beta() - g.beta.beta()).norm();
  const double dt = (q.theta - g.theta).norm();
  return {"QIF (k=1, A=I) vs independence GEE", db <= 1e-4 && dt <= 1e-4 && q.converged && g.converged,
          "|d beta| " + fmt(db) + ", |d theta| " + fmt(dt)};
}

CheckResult check_zero_lambda_matches_unpenalized() {
  const LongitudinalDataset data = generate_dataset(example1(60, CorrelationKind::Exchangeable, 6), 0);
  const QifConfig cfg;
  const PenaltyConfig pen;
  const FitResult g0 = solve_gee(data, cfg);
  const FitResult g1 = penalized_gee_solve(data, cfg, pen, 0.0, 0.0);
  const FitResult q0 = solve_qif(data, cfg);
  const FitResult q1 = penalized_qif_solve(data, cfg, pen, 0.0, 0.0);
  const double dg = (g0.xi() - g1.xi()).lpNorm<Eigen::Infinity>();
  const double dq = (q0.xi() - q1.xi()).lpNorm<Eigen::Infinity>();
  return {"lambda = 0 penalized vs unpenalized", dg <= 1e-8 && dq <= 1e-8,
          "GEE max diff " + fmt(dg) + ", QIF max diff " + fmt(dq)};
}

CheckResult check_parallel_determinism() {
  const SimDesign design = example1(40, CorrelationKind::Exchangeable, 9);
  const QifConfig cfg;
  const std::vector<MethodSpec> methods{{"independence", MethodKind::Independence, cfg, {}},
                                        {"gee", MethodKind::Gee, cfg, {}}};
  const auto serial = run_replications(design, methods, 8, 1);
  const auto parallel = run_replications(design, methods, 8, 4);
  bool same = serial.size() == parallel.size();
  for (std::size_t k = 0; same && k < serial.size(); ++k) {
    const MetricsReport& a = serial[k];
    const MetricsReport& b = parallel[k];
    same = a.replications == b.replications && a.failures == b.failures && a.nonconverged == b.nonconverged &&
           same_bits(a.bias_beta, b.bias_beta) && same_bits(a.se_beta, b.se_beta) &&
           same_bits(a.bias_theta, b.bias_theta) && same_bits(a.se_theta, b.se_theta) &&
           same_bits(a.mse_beta, b.mse_beta) && same_bits(a.mse_theta, b.mse_theta) &&
           same_bits(a.mse_g, b.mse_g) && same_bits(a.r2_beta, b.r2_beta) && same_bits(a.r2_theta, b.r2_theta) &&
           same_bits(a.tn_beta, b.tn_beta) && same_bits(a.tp_beta, b.tp_beta) &&
           same_bits(a.tn_theta, b.tn_theta) && same_bits(a.tp_theta, b.tp_theta);
  }
  return {"parallel vs serial replication reports", same, same ? "bitwise identical" : "reports differ"};
}

std::vector<CheckResult> run_property_suite() {
  return {check_weight_identities(),
          check_affine_reproduction(),
          check_jacobian_fd(),
          check_scad_shape(),
          check_inverse_in_basis_span(),
          check_qif_k1_matches_independence_gee(),
          check_zero_lambda_matches_unpenalized(),
          check_parallel_determinism()};
}

}  // namespace plsim::testing
