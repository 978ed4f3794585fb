#include "plsim/selector.hpp"
#include "plsim/sim_harness.hpp"

#include <doctest.h>

#include <cmath>

using namespace plsim;

namespace {

// n subjects of two rows each with y = +-sqrt(s_per_subject / 2), so the
// residual sum of squares of a zero fit is n * s_per_subject.
struct BicFixture {
  LongitudinalDataset data;
  FitResult fit;
};

BicFixture bic_fixture(Index n, double s_per_subject) {
  std::vector<Subject> subjects;
  const double a = std::sqrt(s_per_subject / 2.0);
  for (Index i = 0; i < n; ++i) {
    Subject s;
    s.id = std::to_string(i);
    s.y = Vector(2);
    s.y << a, -a;
    s.x = Matrix(2, 2);
    s.x << 1.0, 0.5 * static_cast<double>(i), -1.0, 0.25;
    s.z = Matrix::Ones(2, 1) * static_cast<double>(i);
    subjects.push_back(s);
  }
  BicFixture f{LongitudinalDataset(subjects), {}};
  f.fit.beta = IndexParam::from_reduced(Vector::Zero(1), 0);
  f.fit.theta = Vector::Zero(1);
  f.fit.g_grid.assign(static_cast<std::size_t>(2 * n), GPoint{});
  return f;
}

}  // namespace

// ---- SCAD ----

TEST_CASE("SCAD derivative examples") {
  CHECK(scad_derivative(0.3, 0.5, 3.7) == 0.5);
  CHECK(scad_derivative(1.0, 0.5, 3.7) == doctest::Approx(0.85 / 2.7).epsilon(1e-14));
  CHECK(scad_derivative(1.0, 0.5, 3.7) == doctest::Approx(0.31481).epsilon(1e-4));
  CHECK(scad_derivative(2.0, 0.5, 3.7) == 0.0);
  CHECK_THROWS_AS(scad_derivative(1.0, 0.5, 2.0), DomainError);
  CHECK_THROWS_AS(scad_derivative(-0.1, 0.5, 3.7), DomainError);
}

TEST_CASE("SCAD penalty is the integral of its derivative") {
  const double lambda = 0.4;
  for (double x = 0.0; x < 2.0; x += 0.01) {
    // Midpoint rule on a fine mesh.
    double integral = 0.0;
    const int steps = 2000;
    for (int k = 0; k < steps; ++k) integral += scad_derivative((k + 0.5) * x / steps, lambda) * x / steps;
    CHECK(std::abs(scad_penalty(x, lambda) - integral) < 1e-6);
  }
  CHECK(scad_penalty(0.0, lambda) == 0.0);
  CHECK(scad_penalty(10.0, lambda) == doctest::Approx(0.5 * 4.7 * lambda * lambda));
}

TEST_CASE("SCAD penalty diagonal and kink follow the coordinate blocks") {
  PenaltyConfig cfg;
  const LqaPenalty pen = make_scad_penalty(3, 2, 0.2, 0.7, cfg);
  REQUIRE(pen.penalized.size() == 4);
  for (bool b : pen.penalized) CHECK(b);
  Vector xi(4);
  xi << 0.1, 0.0, 0.1, 5.0;
  const Vector e = pen.diagonal(xi);
  CHECK(e(0) == doctest::Approx(0.2 / (0.1 + 1e-8)));
  CHECK(e(2) == doctest::Approx(0.7 / (0.1 + 1e-8)));
  CHECK(e(3) == 0.0);
  CHECK(pen.kink(1) == 0.2);
  CHECK(pen.kink(2) == 0.7);
  CHECK(pen.value(xi) == doctest::Approx(scad_penalty(0.1, 0.2) + scad_penalty(0.1, 0.7) + scad_penalty(5.0, 0.7)));
}

TEST_CASE("penalty configuration is validated") {
  PenaltyConfig cfg;
  cfg.c = 2.0;
  CHECK_THROWS(cfg.validate());
  cfg = PenaltyConfig{};
  cfg.lambda1_grid = {0.1, -0.2};
  CHECK_THROWS(cfg.validate());
  cfg = PenaltyConfig{};
  cfg.zero_threshold = -1.0;
  CHECK_THROWS(cfg.validate());
}

// ---- BIC ----

TEST_CASE("BIC of S = n and S = n e") {
  const Index n = 10;
  const double log_term = std::log(10.0) / 10.0;
  const BicFixture one = bic_fixture(n, 1.0);
  CHECK(residual_sum_of_squares(one.data, one.fit) == doctest::Approx(10.0).epsilon(1e-14));
  // df is 1 here: the anchor coordinate always counts.
  CHECK(degrees_of_freedom(one.fit) == 1);
  CHECK(bic_score(one.data, one.fit) == doctest::Approx(log_term).epsilon(1e-14));
  const BicFixture e = bic_fixture(n, std::exp(1.0));
  CHECK(bic_score(e.data, e.fit) == doctest::Approx(1.0 + log_term).epsilon(1e-14));
}

TEST_CASE("BIC grows by log(n)/n per degree of freedom") {
  BicFixture f = bic_fixture(12, 1.0);
  const double base = bic_score(f.data, f.fit);
  // A nonzero theta would change S, so move beta instead.
  f.fit.beta = IndexParam::from_reduced(Vector::Constant(1, 0.3), 0);
  CHECK(degrees_of_freedom(f.fit) == 2);
  CHECK(bic_score(f.data, f.fit) - base == doctest::Approx(std::log(12.0) / 12.0).epsilon(1e-12));
}

TEST_CASE("BIC of a perfect fit is minus infinity") {
  const BicFixture f = bic_fixture(5, 0.0);
  CHECK(bic_score(f.data, f.fit) == -std::numeric_limits<double>::infinity());
}

TEST_CASE("support lists nonzero positions") {
  Vector v(5);
  v << 0.0, 1.0, 0.0, -2.0, 1e-300;
  CHECK(support_of(v) == std::vector<Index>{1, 3, 4});
}

// ---- penalized solvers ----

TEST_CASE("zero lambdas reproduce the unpenalized solvers") {
  const LongitudinalDataset data = generate_dataset(example1(60, CorrelationKind::Exchangeable, 61), 0);
  const PenaltyConfig pen;
  const GeeConfig gcfg;
  const FitResult g0 = solve_gee(data, gcfg);
  const FitResult g1 = penalized_gee_solve(data, gcfg, pen, 0.0, 0.0);
  CHECK((g0.beta.beta() - g1.beta.beta()).norm() < 1e-8);
  CHECK((g0.theta - g1.theta).norm() < 1e-8);
  const QifConfig qcfg;
  const FitResult q0 = solve_qif(data, qcfg);
  const FitResult q1 = penalized_qif_solve(data, qcfg, pen, 0.0, 0.0);
  CHECK((q0.beta.beta() - q1.beta.beta()).norm() < 1e-8);
  CHECK((q0.theta - q1.theta).norm() < 1e-8);
}

TEST_CASE("huge lambdas shrink to the anchor unit vector") {
  const LongitudinalDataset data = generate_dataset(example1(60, CorrelationKind::Exchangeable, 62), 0);
  const PenaltyConfig pen;
  for (const bool qif : {false, true}) {
    const FitResult fit = qif ? penalized_qif_solve(data, QifConfig{}, pen, 1e3, 1e3)
                              : penalized_gee_solve(data, GeeConfig{}, pen, 1e3, 1e3);
    CAPTURE(qif);
    CHECK(fit.theta.isZero(0.0));
    CHECK(fit.beta.reduced().isZero(0.0));
    CHECK(fit.beta.beta()(fit.beta.anchor()) == 1.0);
  }
}

TEST_CASE("penalized QIF objective does not exceed its value at the unpenalized fit") {
  SimDesign design = example1(100, CorrelationKind::Exchangeable, 63);
  design.beta0 = Eigen::Vector4d(1.0, 1.0, 0.0, 0.0).normalized();
  design.theta0 = Eigen::Vector3d(1.0, 0.0, 0.0);
  const LongitudinalDataset data = generate_dataset(design, 0);
  const QifConfig cfg;
  const PenaltyConfig pen;
  const FitResult free_fit = solve_qif(data, cfg);
  const StartingPoint start{free_fit.beta, free_fit.theta, free_fit.bandwidth};
  const double l1 = 0.05;
  const double l2 = 0.1;
  const FitResult fit = penalized_qif_solve(data, cfg, pen, l1, l2, start);
  const LqaPenalty lqa = make_scad_penalty(data.p(), data.q(), l1, l2, pen);
  const KernelConfig kernel{free_fit.bandwidth, cfg.kernel_ridge};
  const auto merit = [&](const FitResult& f) {
    const EstimatingState st = evaluate_state(data, f.beta, f.theta, kernel);
    return qif_objective(data, st, qif_variances(data, st, cfg), cfg).objective + lqa.value(f.xi());
  };
  CHECK(merit(fit) <= merit(free_fit) * (1.0 + 1e-9));
}

// ---- tuning ----

TEST_CASE("a zero-only grid returns the unpenalized fit") {
  const LongitudinalDataset data = generate_dataset(example1(60, CorrelationKind::Exchangeable, 64), 0);
  SelectionConfig cfg;
  cfg.penalty.lambda1_grid = {0.0};
  cfg.penalty.lambda2_grid = {0.0};
  const SelectionResult sel = tune_lambdas(data, cfg);
  const FitResult ref = solve_gee(data, cfg.solver);
  CHECK(sel.bic_path.size() == 1);
  CHECK((sel.fit.beta.beta() - ref.beta.beta()).norm() < 1e-12);
  CHECK((sel.fit.theta - ref.theta).norm() < 1e-12);
  CHECK(sel.support_beta.size() == 3);
  CHECK(sel.support_theta.size() == 1);
}

TEST_CASE("degrees of freedom fall along increasing lambda1 on Example 3 data") {
  const LongitudinalDataset data = generate_dataset(example3(100, CorrelationKind::Exchangeable, 65), 0);
  SelectionConfig cfg;
  const SelectionResult sel = tune_lambdas(data, cfg);
  REQUIRE(sel.lambda1_grid.size() == 8);
  REQUIRE(sel.lambda2_grid.size() == 8);
  REQUIRE(sel.bic_path.size() == 64);
  int pairs = 0;
  int monotone = 0;
  for (std::size_t row = 0; row < 8; ++row) {
    for (std::size_t k = 0; k + 1 < 8; ++k) {
      const BicPoint& a = sel.bic_path[row * 8 + k];
      const BicPoint& b = sel.bic_path[row * 8 + k + 1];
      REQUIRE(a.lambda2 == b.lambda2);
      REQUIRE(a.lambda1 < b.lambda1);
      if (!a.error.empty() || !b.error.empty()) continue;
      ++pairs;
      if (b.df <= a.df) ++monotone;
    }
  }
  INFO("monotone pairs: " << monotone << " of " << pairs);
  CHECK(pairs >= 50);
  CHECK(monotone >= 0.8 * pairs);
  // The selected fit is sparse, keeps the anchor and zeroes outside its support.
  CHECK(std::find(sel.support_beta.begin(), sel.support_beta.end(), sel.fit.beta.anchor()) != sel.support_beta.end());
  CHECK(static_cast<Index>(sel.support_theta.size()) < data.q());
  for (const BicPoint& pt : sel.bic_path) {
    if (pt.error.empty()) CHECK(pt.bic >= bic_score(data, sel.fit) - 1e-12);
  }
}
