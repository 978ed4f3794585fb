#pragma once

#include "plsim/types.hpp"

#include <string>

namespace plsim::detail {

/// Solves the symmetric system a x = b by LDL'. If the factorization fails or
/// is badly conditioned, retries once with 1e-10 * trace(a) added to the
/// diagonal; throws NumericalError naming `what` when that fails too.
Matrix solve_symmetric(const Matrix& a, const Matrix& b, const std::string& what);
Vector solve_symmetric(const Matrix& a, const Vector& b, const std::string& what);

/// Symmetric inverse with the same fallback.
Matrix inverse_symmetric(const Matrix& a, const std::string& what);

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Matrix& a);

}  // namespace plsim::detail
