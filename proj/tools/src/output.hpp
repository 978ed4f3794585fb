#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace plsim::cli {

/// Writes `content` to a temporary file in the target directory and renames it
/// over `path`, so readers never see a partially written file.
void write_atomically(const std::filesystem::path& path, const std::string& content);

/// Six significant digits, as used in every human-readable table.
std::string fmt6(double v);

/// Minimal CSV builder; fields containing a comma or quote are quoted.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  void add_row(std::vector<std::string> row);
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace plsim::cli
