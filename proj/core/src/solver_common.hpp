#pragma once

#include "plsim/gee_solver.hpp"

#include <vector>

namespace plsim::detail {

/// Splits xi = (beta^(r), theta) back into parameters; nullopt when |beta^(r)| >= 1.
std::optional<std::pair<IndexParam, Vector>> split_xi(const Vector& xi, Index anchor, Index p);

std::vector<Index> active_indices(const std::vector<bool>& active);

Vector gather(const Vector& v, const std::vector<Index>& idx);
Matrix gather(const Matrix& m, const std::vector<Index>& idx);

/// Coordinates of the start that are penalized and exactly zero are frozen.
std::vector<bool> initial_active_set(const Vector& xi, const LqaPenalty* penalty);

/// Zeroes and deactivates penalized coordinates below the threshold; returns
/// true if anything changed.
bool apply_hard_zero(Vector& xi, std::vector<bool>& active, const LqaPenalty* penalty);

}  // namespace plsim::detail
