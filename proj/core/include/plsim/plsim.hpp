#pragma once

#include "plsim/correlation.hpp"
#include "plsim/dataset_io.hpp"
#include "plsim/gee_solver.hpp"
#include "plsim/kernel_smoother.hpp"
#include "plsim/qif_solver.hpp"
#include "plsim/selector.hpp"
#include "plsim/sim_harness.hpp"
#include "plsim/types.hpp"
