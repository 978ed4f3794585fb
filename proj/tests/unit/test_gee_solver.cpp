#include "plsim/gee_solver.hpp"
#include "plsim/sim_harness.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace plsim;

namespace {

const double kPi = std::acos(-1.0);

// Local linear intercept and slope of r regressed on t around at.
Eigen::Vector2d local_fit(double at, const Vector& t, const Vector& r, double h) {
  Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  for (Index k = 0; k < t.size(); ++k) {
    const double u = t(k) - at;
    const double z = u / h;
    const double w = std::abs(z) <= 1.0 ? 0.75 * (1.0 - z * z) : 0.0;
    const Eigen::Vector2d d(1.0, u);
    a += w * d * d.transpose();
    b += w * d * r(k);
  }
  return a.ldlt().solve(b);
}

LongitudinalDataset build(const std::vector<Matrix>& x, const std::vector<Matrix>& z, const std::vector<Vector>& y) {
  std::vector<Subject> s;
  for (std::size_t i = 0; i < y.size(); ++i) s.push_back({"s" + std::to_string(i), y[i], x[i], z[i]});
  return LongitudinalDataset(s);
}

LongitudinalDataset with_link(SimDesign design, std::function<double(double)> link, std::uint64_t rep) {
  design.link = std::move(link);
  return generate_dataset(design, rep);
}

double angle_degrees(const Vector& a, const Vector& b) {
  const double c = std::clamp(std::abs(a.dot(b)) / (a.norm() * b.norm()), -1.0, 1.0);
  return std::acos(c) * 180.0 / kPi;
}

}  // namespace

// ---- initial estimate ----

TEST_CASE("initial estimate is exact on noiseless linear data") {
  SimDesign design = example1(40, CorrelationKind::Exchangeable, 31);
  design.strata = {{1, 1, 3, 0.0}};
  const LongitudinalDataset data = with_link(design, [](double t) { return 0.5 + 2.0 * t; }, 0);
  const InitialEstimate init = initial_estimate(data);
  CHECK((init.beta.beta() - design.beta0).norm() < 1e-10);
  // The slope of g scales the X block; theta keeps its own scale.
  CHECK((init.theta - design.theta0).norm() < 1e-10);
}

TEST_CASE("initial estimate names the rank-deficient block") {
  const LongitudinalDataset base = generate_dataset(example1(20, CorrelationKind::Exchangeable, 32), 0);
  std::vector<Subject> subjects = base.subjects();
  for (auto& s : subjects) s.z.col(0) = s.x.col(1);
  try {
    initial_estimate(LongitudinalDataset(subjects));
    FAIL("expected a rank error");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("Z") != std::string::npos);
  }
  subjects = base.subjects();
  for (auto& s : subjects) s.x.col(2) = 2.0 * s.x.col(0);
  try {
    initial_estimate(LongitudinalDataset(subjects));
    FAIL("expected a rank error");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("X") != std::string::npos);
  }
}

TEST_CASE("initial estimate on constant Y surfaces the anchor error") {
  std::vector<Subject> subjects = generate_dataset(example1(20, CorrelationKind::Exchangeable, 33), 0).subjects();
  for (auto& s : subjects) s.y.setConstant(1.0);
  CHECK_THROWS_AS(initial_estimate(LongitudinalDataset(subjects)), DomainError);
}

TEST_CASE("initial direction is within 20 degrees on Example 1 data") {
  const SimDesign design = example1(120, CorrelationKind::Exchangeable, 34);
  int close = 0;
  for (std::uint64_t r = 0; r < 100; ++r) {
    const InitialEstimate init = initial_estimate(generate_dataset(design, r));
    if (angle_degrees(init.beta.beta(), design.beta0) < 20.0) ++close;
  }
  INFO("within 20 degrees: " << close);
  CHECK(close >= 90);
}

// ---- Lambda hat ----

TEST_CASE("Lambda hat matches a direct construction on a small instance") {
  std::mt19937_64 rng(35);
  std::normal_distribution<double> normal;
  std::vector<Matrix> x(3, Matrix(2, 2));
  std::vector<Matrix> z(3, Matrix(2, 1));
  std::vector<Vector> y(3, Vector(2));
  for (int i = 0; i < 3; ++i) {
    for (auto* m : {&x[i], &z[i]}) {
      for (Index a = 0; a < m->size(); ++a) m->data()[a] = normal(rng);
    }
    for (Index j = 0; j < 2; ++j) y[i](j) = normal(rng);
  }
  const LongitudinalDataset data = build(x, z, y);
  const IndexParam beta = IndexParam::from_direction(Eigen::Vector2d(0.8, -0.6));
  const Vector theta = Vector::Constant(1, 0.4);
  const double h = 8.0;
  const LambdaHat lh = build_lambda_hat(data, beta, theta, {h, 0.0});

  const Vector t = data.x() * beta.beta();
  const Vector r = data.y() - data.z() * theta;
  // J for p = 2, anchor 0: beta = (sqrt(1 - b^2), b), d beta / d b = (-b / beta_0, 1).
  const double b = beta.beta()(1);
  REQUIRE(beta.anchor() == 0);
  const Eigen::Vector2d jac(-b / beta.beta()(0), 1.0);
  for (Index i = 0; i < 3; ++i) {
    REQUIRE(lh.blocks[static_cast<std::size_t>(i)].rows() == 2);
    REQUIRE(lh.blocks[static_cast<std::size_t>(i)].cols() == 2);
    for (Index j = 0; j < 2; ++j) {
      const Index k = data.offset(i) + j;
      const double gp = local_fit(t(k), t, r, h)(1);
      const double g1a = local_fit(t(k), t, data.x().col(0), h)(0);
      const double g1b = local_fit(t(k), t, data.x().col(1), h)(0);
      const double g2 = local_fit(t(k), t, data.z().col(0), h)(0);
      const double top = jac.dot(Eigen::Vector2d(data.x()(k, 0) - g1a, data.x()(k, 1) - g1b)) * gp;
      CHECK(std::abs(lh.blocks[static_cast<std::size_t>(i)](0, j) - top) < 1e-12);
      CHECK(std::abs(lh.blocks[static_cast<std::size_t>(i)](1, j) - (data.z()(k, 0) - g2)) < 1e-12);
    }
  }
}

TEST_CASE("Lambda hat vanishes for covariates predictable from the index") {
  // X on the line s * beta and Z affine in s, so both equal their smoothed means.
  const Eigen::Vector2d dir(0.6, 0.8);
  std::vector<Matrix> x;
  std::vector<Matrix> z;
  std::vector<Vector> y;
  std::mt19937_64 rng(36);
  std::normal_distribution<double> normal;
  for (int i = 0; i < 15; ++i) {
    Matrix xi(3, 2);
    Matrix zi(3, 1);
    Vector yi(3);
    for (Index j = 0; j < 3; ++j) {
      const double s = normal(rng);
      xi.row(j) = s * dir.transpose();
      zi(j, 0) = 1.0 + 2.0 * s;
      yi(j) = std::exp(s) + normal(rng);
    }
    x.push_back(xi);
    z.push_back(zi);
    y.push_back(yi);
  }
  const LongitudinalDataset data = build(x, z, y);
  const LambdaHat lh = build_lambda_hat(data, IndexParam::from_direction(dir), Vector::Zero(1), {1.5, 0.0});
  for (const Matrix& blk : lh.blocks) CHECK(blk.norm() < 1e-10);
}

TEST_CASE("Lambda hat top block vanishes when g is flat") {
  std::vector<Subject> subjects = generate_dataset(example1(20, CorrelationKind::Exchangeable, 37), 0).subjects();
  const Vector theta = Vector::Constant(1, 0.3);
  for (auto& s : subjects) s.y = Vector::Constant(s.size(), 2.0) + s.z * theta;
  const LongitudinalDataset data(subjects);
  const LambdaHat lh = build_lambda_hat(data, IndexParam::from_direction(Vector::Ones(3)), theta, {1.5, 0.0});
  for (const Matrix& blk : lh.blocks) {
    CHECK(blk.topRows(2).norm() < 1e-10);
    CHECK(blk.bottomRows(1).norm() > 0.0);
  }
}

// ---- score and information ----

TEST_CASE("GEE score vanishes for zero residuals") {
  std::vector<Subject> subjects = generate_dataset(example1(30, CorrelationKind::Exchangeable, 38), 0).subjects();
  const IndexParam beta = IndexParam::from_direction(Vector::Ones(3));
  const Vector theta = Vector::Constant(1, 0.3);
  for (auto& s : subjects) s.y = (1.0 + 0.5 * (s.x * beta.beta()).array()).matrix() + s.z * theta;
  const LongitudinalDataset data(subjects);
  const WorkingCovariance v(CorrelationKind::Exchangeable, 0.3, std::vector<Vector>(30, Vector::Ones(3)));
  CHECK(gee_score(data, beta, theta, {1.5, 0.0}, v).norm() < 1e-10);
}

TEST_CASE("identity-V score and information match direct summation") {
  const LongitudinalDataset data = generate_dataset(example1(30, CorrelationKind::Exchangeable, 39), 0);
  const IndexParam beta = IndexParam::from_direction(Eigen::Vector3d(1.0, 0.8, 0.3));
  const Vector theta = Vector::Constant(1, 0.2);
  const KernelConfig kernel{1.2, 0.0};
  const LambdaHat lh = build_lambda_hat(data, beta, theta, kernel);
  const SmootherFit fit = LocalLinearSmoother(data, beta.beta(), kernel).fit_observed(theta);
  const Vector resid = data.y() - fit.g - data.z() * theta;
  Vector score = Vector::Zero(3);
  Matrix info = Matrix::Zero(3, 3);
  for (Index i = 0; i < data.n(); ++i) {
    const Matrix& l = lh.blocks[static_cast<std::size_t>(i)];
    for (Index a = 0; a < l.rows(); ++a) {
      for (Index j = 0; j < l.cols(); ++j) {
        score(a) += l(a, j) * resid(data.offset(i) + j);
        for (Index b = 0; b < l.rows(); ++b) info(a, b) += l(a, j) * l(b, j);
      }
    }
  }
  const WorkingCovariance v = WorkingCovariance::identity(data);
  CHECK((gee_score(data, beta, theta, kernel, v) - score).norm() < 1e-10);
  const Matrix pi = gee_information(data, beta, theta, kernel, v);
  CHECK((pi - info).norm() < 1e-10);
  CHECK(pi.isApprox(pi.transpose()));
}

TEST_CASE("information at the truth is positive definite on Example 1 data") {
  const SimDesign design = example1(60, CorrelationKind::Exchangeable, 40);
  const LongitudinalDataset data = generate_dataset(design, 0);
  const IndexParam beta = IndexParam::from_direction(design.beta0);
  const EstimatingState state = evaluate_state(data, beta, design.theta0, {0.8, 1e-3});
  const WorkingCovariance v = working_covariance_for(data, state, GeeConfig{});
  const Eigen::SelfAdjointEigenSolver<Matrix> es(gee_information(data, state, v));
  CHECK(es.eigenvalues().minCoeff() > 0.0);
}

// ---- solver ----

TEST_CASE("GEE recovers beta with a linear link") {
  // At the Example 1 noise level even GLS with the true covariance lands
  // within 0.05 of beta0 only about a third of the time, so use sigma 0.25.
  SimDesign design = example1(120, CorrelationKind::Exchangeable, 41);
  design.strata = {{1, 1, 3, 0.25}};
  int close = 0;
  int converged = 0;
  for (std::uint64_t r = 0; r < 100; ++r) {
    const LongitudinalDataset data = with_link(design, [](double t) { return t; }, r);
    const FitResult fit = solve_gee(data, GeeConfig{});
    if (fit.converged) ++converged;
    if ((fit.beta.beta() - design.beta0).norm() < 0.05) ++close;
  }
  INFO("close: " << close << ", converged: " << converged);
  CHECK(close >= 95);
}

TEST_CASE("converged GEE fit certifies its score and orientation") {
  const SimDesign design = example1(60, CorrelationKind::Exchangeable, 42);
  const LongitudinalDataset data = generate_dataset(design, 0);
  const GeeConfig cfg;
  const FitResult fit = solve_gee(data, cfg);
  REQUIRE(fit.converged);
  CHECK(fit.beta.beta().norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.beta.beta()(fit.beta.anchor()) > 0.0);
  CHECK(fit.trace.size() == static_cast<std::size_t>(fit.iterations));
  const EstimatingState state = evaluate_state(data, fit.beta, fit.theta, {fit.bandwidth, cfg.kernel_ridge});
  const WorkingCovariance v = working_covariance_for(data, state, cfg);
  const double score = gee_score(data, state, v).norm() / static_cast<double>(data.n());
  CHECK(score <= 10.0 * cfg.tolerance);
  for (const TraceEntry& e : fit.trace) CHECK(std::isfinite(e.score_norm));
}

TEST_CASE("GEE solution does not depend on subject order or labels") {
  const SimDesign design = example1(60, CorrelationKind::Exchangeable, 43);
  const LongitudinalDataset data = generate_dataset(design, 1);
  std::vector<Subject> subjects = data.subjects();
  std::reverse(subjects.begin(), subjects.end());
  for (std::size_t i = 0; i < subjects.size(); ++i) subjects[i].id = "relabel" + std::to_string(i);
  const FitResult a = solve_gee(data, GeeConfig{});
  const FitResult b = solve_gee(LongitudinalDataset(subjects), GeeConfig{});
  CHECK((a.beta.beta() - b.beta.beta()).norm() < 1e-6);
  CHECK((a.theta - b.theta).norm() < 1e-6);
}

TEST_CASE("GEE configuration is validated") {
  GeeConfig cfg;
  cfg.tolerance = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg = GeeConfig{};
  cfg.max_iterations = 0;
  CHECK_THROWS(cfg.validate());
  cfg = GeeConfig{};
  cfg.damping = 1.5;
  CHECK_THROWS(cfg.validate());
  cfg = GeeConfig{};
  cfg.bandwidth_policy = BandwidthPolicy::Fixed;
  CHECK_THROWS(cfg.validate());
}

// ---- sandwich covariance ----

TEST_CASE("sandwich covariance vanishes for zero residuals") {
  std::vector<Subject> subjects = generate_dataset(example1(30, CorrelationKind::Exchangeable, 44), 0).subjects();
  const IndexParam beta = IndexParam::from_direction(Vector::Ones(3));
  const Vector theta = Vector::Constant(1, 0.3);
  for (auto& s : subjects) s.y = (1.0 + 0.5 * (s.x * beta.beta()).array()).matrix() + s.z * theta;
  const LongitudinalDataset data(subjects);
  const EstimatingState state = evaluate_state(data, beta, theta, {1.5, 0.0});
  const CovarianceEstimate cov = sandwich_covariance_gee(data, state, WorkingCovariance::identity(data));
  CHECK(cov.reduced.norm() < 1e-15);
  CHECK(cov.full.norm() < 1e-15);
}

TEST_CASE("full covariance has the rank of the free parameters") {
  const SimDesign design = example1(60, CorrelationKind::Exchangeable, 45);
  const LongitudinalDataset data = generate_dataset(design, 0);
  const FitResult fit = solve_gee(data, GeeConfig{});
  REQUIRE(fit.full_cov.rows() == 4);
  const Eigen::SelfAdjointEigenSolver<Matrix> es(fit.full_cov);
  const double top = es.eigenvalues().maxCoeff();
  int rank = 0;
  for (Index k = 0; k < 4; ++k) rank += es.eigenvalues()(k) > 1e-9 * top ? 1 : 0;
  CHECK(rank <= 3);
  // beta'cov beta = 0 along the unit-norm constraint.
  Vector b = Vector::Zero(4);
  b.head(3) = fit.beta.beta();
  CHECK(std::abs(b.dot(fit.full_cov * b)) < 1e-9 * top);
}

TEST_CASE("with the true covariance, the meat matches the bread") {
  SimDesign design = example1(400, CorrelationKind::Exchangeable, 46);
  design.strata = {{1, 1, 3, 1.0}};
  const LongitudinalDataset data = generate_dataset(design, 0);
  const IndexParam beta = IndexParam::from_direction(design.beta0);
  const EstimatingState state = evaluate_state(data, beta, design.theta0, {0.6, 1e-3});
  const WorkingCovariance v(CorrelationKind::Exchangeable, 0.6, std::vector<Vector>(400, Vector::Ones(3)));
  const double n = 400.0;
  Matrix omega = Matrix::Zero(3, 3);
  Matrix pi = Matrix::Zero(3, 3);
  for (Index i = 0; i < data.n(); ++i) {
    const Matrix l = state.lambda.middleRows(data.offset(i), 3).transpose();
    const Vector s = l * v.inverse(i) * state.residual.segment(data.offset(i), 3);
    omega += s * s.transpose() / n;
    pi += l * v.inverse(i) * l.transpose() / n;
  }
  CHECK((omega - pi).norm() / pi.norm() < 0.25);
  CHECK((gee_information(data, state, v) / n - pi).norm() < 1e-10 * pi.norm());
  const Matrix pinv = pi.inverse();
  const CovarianceEstimate cov = sandwich_covariance_gee(data, state, v);
  CHECK((cov.reduced - pinv * omega * pinv / n).norm() < 1e-8 * cov.reduced.norm());
}
