#include "linalg.hpp"

#include <cmath>
#include <sstream>

namespace plsim::detail {

namespace {

bool usable(const Eigen::LDLT<Matrix>& ldlt) {
  return ldlt.info() == Eigen::Success && ldlt.rcond() > 1e-14;
}

}  // namespace

Matrix solve_symmetric(const Matrix& a, const Matrix& b, const std::string& what) {
  if (a.rows() == 0) return Matrix(0, b.cols());
  Eigen::LDLT<Matrix> ldlt(a);
  if (usable(ldlt)) return ldlt.solve(b);

  const double trace = a.diagonal().cwiseAbs().sum();
  Matrix ridged = a;
  ridged.diagonal().array() += 1e-10 * (trace > 0.0 ? trace : 1.0);
  ldlt.compute(ridged);
  if (!usable(ldlt)) {
    std::ostringstream os;
    os << what << " is numerically singular (rcond " << ldlt.rcond() << " after ridge)";
    throw NumericalError(os.str());
  }
  return ldlt.solve(b);
}

Vector solve_symmetric(const Matrix& a, const Vector& b, const std::string& what) {
  return solve_symmetric(a, Matrix(b), what).col(0);
}

Matrix inverse_symmetric(const Matrix& a, const std::string& what) {
  Matrix inv = solve_symmetric(a, Matrix(Matrix::Identity(a.rows(), a.cols())), what);
  return 0.5 * (inv + inv.transpose());
}

double min_eigenvalue(const Matrix& a) {
  if (a.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace plsim::detail
