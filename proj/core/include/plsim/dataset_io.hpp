#pragma once

#include "plsim/types.hpp"

#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace plsim {

/// Malformed delimited input; `line()` is 1-based (the header is line 1).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& message, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Reads `subject,y,x1..xp,z1..zq` (comma separated, header required). Rows of
/// the same subject need not be contiguous; subjects keep first-appearance order
/// and rows keep file order within a subject.
LongitudinalDataset read_dataset_csv(std::istream& in);
LongitudinalDataset read_dataset_csv(const std::string& path);

void write_dataset_csv(std::ostream& out, const LongitudinalDataset& data);

}  // namespace plsim
