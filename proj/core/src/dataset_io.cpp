#include "plsim/dataset_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <vector>

namespace plsim {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// Returns the k in "x<k>" / "z<k>", or 0 when the name does not match.
int numbered_column(const std::string& name, char prefix) {
  if (name.size() < 2 || name[0] != prefix) return 0;
  int k = 0;
  const auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), k);
  if (ec != std::errc() || ptr != name.data() + name.size() || k < 1) return 0;
  return k;
}

double parse_number(const std::string& field, const std::string& column, std::size_t line) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (field.empty() || ec != std::errc() || ptr != last) {
    throw ParseError("column '" + column + "': cannot parse '" + field + "' as a number", line);
  }
  if (!std::isfinite(v)) {
    throw ParseError("column '" + column + "': non-finite value '" + field + "'", line);
  }
  return v;
}

struct PendingSubject {
  std::string id;
  std::vector<double> y;
  std::vector<std::vector<double>> x;
  std::vector<std::vector<double>> z;
};

}  // namespace

LongitudinalDataset read_dataset_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty input, header expected", 1);
  ++line_no;
  const auto header = split(line);

  int subject_col = -1;
  int y_col = -1;
  std::map<int, int> x_cols;
  std::map<int, int> z_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& name = header[c];
    const int ci = static_cast<int>(c);
    if (name == "subject") {
      subject_col = ci;
    } else if (name == "y") {
      y_col = ci;
    } else if (int k = numbered_column(name, 'x'); k > 0) {
      if (!x_cols.emplace(k, ci).second) throw ParseError("duplicate column '" + name + "'", 1);
    } else if (int k2 = numbered_column(name, 'z'); k2 > 0) {
      if (!z_cols.emplace(k2, ci).second) throw ParseError("duplicate column '" + name + "'", 1);
    } else {
      throw ParseError("unexpected column '" + name + "'", 1);
    }
  }
  if (subject_col < 0) throw ParseError("missing 'subject' column", 1);
  if (y_col < 0) throw ParseError("missing 'y' column", 1);
  if (x_cols.empty()) throw ParseError("no x1..xp columns", 1);
  // x1..xp and z1..zq must be contiguous from 1.
  int expect = 1;
  for (const auto& [k, c] : x_cols) {
    if (k != expect++) throw ParseError("x columns must be numbered x1..xp without gaps", 1);
  }
  expect = 1;
  for (const auto& [k, c] : z_cols) {
    if (k != expect++) throw ParseError("z columns must be numbered z1..zq without gaps", 1);
  }

  std::vector<PendingSubject> pending;
  std::map<std::string, std::size_t> by_id;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (fields.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    }
    const std::string& id = fields[static_cast<std::size_t>(subject_col)];
    if (id.empty()) throw ParseError("empty subject id", line_no);
    auto [it, inserted] = by_id.emplace(id, pending.size());
    if (inserted) pending.push_back(PendingSubject{id, {}, {}, {}});
    auto& s = pending[it->second];
    s.y.push_back(parse_number(fields[static_cast<std::size_t>(y_col)], "y", line_no));
    std::vector<double> xr;
    for (const auto& [k, c] : x_cols) {
      xr.push_back(parse_number(fields[static_cast<std::size_t>(c)], "x" + std::to_string(k), line_no));
    }
    std::vector<double> zr;
    for (const auto& [k, c] : z_cols) {
      zr.push_back(parse_number(fields[static_cast<std::size_t>(c)], "z" + std::to_string(k), line_no));
    }
    s.x.push_back(std::move(xr));
    s.z.push_back(std::move(zr));
  }

  const Index p = static_cast<Index>(x_cols.size());
  const Index q = static_cast<Index>(z_cols.size());
  std::vector<Subject> subjects;
  subjects.reserve(pending.size());
  for (auto& ps : pending) {
    const Index m = static_cast<Index>(ps.y.size());
    Subject s;
    s.id = ps.id;
    s.y = Eigen::Map<const Vector>(ps.y.data(), m);
    s.x.resize(m, p);
    s.z.resize(m, q);
    for (Index j = 0; j < m; ++j) {
      for (Index c = 0; c < p; ++c) s.x(j, c) = ps.x[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
      for (Index c = 0; c < q; ++c) s.z(j, c) = ps.z[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
    }
    subjects.push_back(std::move(s));
  }
  try {
    return LongitudinalDataset(std::move(subjects));
  } catch (const DataError& e) {
    throw ParseError(e.what(), line_no);
  }
}

LongitudinalDataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
  return read_dataset_csv(in);
}

void write_dataset_csv(std::ostream& out, const LongitudinalDataset& data) {
  out << "subject,y";
  for (Index c = 1; c <= data.p(); ++c) out << ",x" << c;
  for (Index c = 1; c <= data.q(); ++c) out << ",z" << c;
  out << '\n';
  out << std::setprecision(17);
  for (const auto& s : data.subjects()) {
    for (Index j = 0; j < s.size(); ++j) {
      out << s.id << ',' << s.y(j);
      for (Index c = 0; c < data.p(); ++c) out << ',' << s.x(j, c);
      for (Index c = 0; c < data.q(); ++c) out << ',' << s.z(j, c);
      out << '\n';
    }
  }
}

}  // namespace plsim
