#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace geohet {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowX = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using Mat = MatX<double>;
using Vec = VecX<double>;
using Row = RowX<double>;

// Error taxonomy shared by library and CLI.  The CLI maps these onto process
// exit codes; library code throws and never calls exit().
enum class ErrorCode {
  ConfigError,      // bad or inconsistent configuration / CLI usage
  MissingColumn,    // CSV header lacks a required column
  RaggedWindow,     // a (location, time) window has the wrong number of rows
  NonFiniteValue,   // NaN/Inf in input data
  ShapeMismatch,    // matrix dimensions disagree
  DataError,        // malformed file contents
  NumericError,     // divergence, singular solve without fallback, ...
  IsolatedNode,     // graph node with no edges
  IndexOutOfRange,  // out-of-bounds node/time/feature index
  IoError,          // file missing / unreadable / unwritable
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool ok, ErrorCode code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }

// lat/lon degrees -> unit sphere.  x toward (0N,0E), z toward the north pole.
inline Eigen::Vector3d to_unit_xyz(double lat_deg, double lon_deg) {
  const double la = deg2rad(lat_deg), lo = deg2rad(lon_deg);
  return {std::cos(la) * std::cos(lo), std::cos(la) * std::sin(lo),
          std::sin(la)};
}

template <class S>
inline void require_finite(const MatX<S>& m, const std::string& what) {
  if (!m.allFinite()) fail(ErrorCode::NonFiniteValue, what + " contains NaN/Inf");
}

// FNV-1a over bytes; used to fingerprint resolved configs in logs.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
  return fnv1a(s.data(), s.size());
}

}  // namespace geohet
