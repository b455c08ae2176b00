#pragma once

// Strict numeric-CSV helpers.  One header row, comma separators, every field
// a finite double.  Writers use %.17g so values round-trip bit-exactly.

#include <string>
#include <vector>

#include "geohet/common.hpp"

namespace geohet::csv {

struct Table {
  std::vector<std::string> header;
  Mat rows;  // n_rows x n_cols
};

Table read_table(const std::string& path);

void write_table(const std::string& path, const std::vector<std::string>& header,
                 const Mat& rows);

// Column index by header name; throws ErrorCode::MissingColumn if absent.
Eigen::Index column(const Table& t, const std::string& name);

// %.17g formatting shared by all file writers (shortest lossless for humans
// was considered; fixed %.17g keeps writers trivial and still round-trips).
std::string format_double(double v);

}  // namespace geohet::csv
