#pragma once

#include "plsim/plsim.hpp"

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace plsim::cli {

enum class Command { Fit, Select, Simulate };

/// Exit statuses shared by all subcommands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitNotConverged = 2;

struct RunConfig {
  Command command = Command::Fit;
  std::filesystem::path output_dir = "plsim_out";

  // fit / select
  std::string data_path;
  std::string method = "gee";  // gee, qif or independence
  QifConfig solver;
  PenaltyConfig penalty;

  // simulate
  std::string design = "example1";
  Index n = 60;
  int replications = 2;
  std::vector<std::string> methods{"independence", "gee", "qif"};
  CorrelationKind error_kind = CorrelationKind::Exchangeable;
  double rho = 0.6;
  std::uint64_t seed = 1;
  int threads = 1;

  void validate() const;
};

/// Solver settings with the method applied (independence means V_i = I).
QifConfig effective_solver(const RunConfig& cfg);

int run_fit(const RunConfig& cfg, std::ostream& log);
int run_select(const RunConfig& cfg, std::ostream& log);
int run_simulate(const RunConfig& cfg, std::ostream& log);

/// Parses flags (and an optional --config file) and runs the subcommand.
int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace plsim::cli
