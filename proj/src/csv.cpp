#include "geohet/csv.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace geohet::csv {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

double parse_field(const std::string& s, const std::string& path, int lineno) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  // tolerate surrounding spaces
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  const char* e2 = e;
  while (e2 > b && (*(e2 - 1) == ' ' || *(e2 - 1) == '\t' || *(e2 - 1) == '\r'))
    --e2;
  auto [ptr, ec] = std::from_chars(b, e2, v);
  if (ec != std::errc{} || ptr != e2)
    fail(ErrorCode::DataError, path + ":" + std::to_string(lineno) +
                                   ": cannot parse numeric field '" + s + "'");
  if (!std::isfinite(v))
    fail(ErrorCode::NonFiniteValue,
         path + ":" + std::to_string(lineno) + ": non-finite value");
  return v;
}

}  // namespace

Table read_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  Table t;
  std::string line;
  if (!std::getline(in, line))
    fail(ErrorCode::DataError, path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split_line(line);
  const std::size_t ncols = t.header.size();
  require(ncols > 0, ErrorCode::DataError, path + ": empty header");

  std::vector<double> values;
  int lineno = 1;
  Eigen::Index nrows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_line(line);
    if (fields.size() != ncols)
      fail(ErrorCode::DataError,
           path + ":" + std::to_string(lineno) + ": expected " +
               std::to_string(ncols) + " fields, got " +
               std::to_string(fields.size()));
    for (const auto& f : fields) values.push_back(parse_field(f, path, lineno));
    ++nrows;
  }
  t.rows.resize(nrows, static_cast<Eigen::Index>(ncols));
  for (Eigen::Index r = 0; r < nrows; ++r)
    for (Eigen::Index c = 0; c < t.rows.cols(); ++c)
      t.rows(r, c) = values[static_cast<std::size_t>(r * t.rows.cols() + c)];
  return t;
}

void write_table(const std::string& path, const std::vector<std::string>& header,
                 const Mat& rows) {
  require(!header.empty() &&
              static_cast<Eigen::Index>(header.size()) == rows.cols(),
          ErrorCode::ShapeMismatch, "write_table: header/column count mismatch");
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out << ',';
    out << header[i];
  }
  out << '\n';
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      if (c) out << ',';
      out << format_double(rows(r, c));
    }
    out << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "short write to " + path);
}

Eigen::Index column(const Table& t, const std::string& name) {
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i] == name) return static_cast<Eigen::Index>(i);
  fail(ErrorCode::MissingColumn, "missing required column '" + name + "'");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace geohet::csv
