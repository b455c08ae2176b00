#pragma once

// Sample/dataset model, synthetic heterogeneous-regression generator with a
// known coefficient field, CSV ingestion, z-scoring, and metrics.
//
// A sample is a feature window: L consecutive time steps x D channels at one
// (lon, lat, t_index).  Targets are scalars and are never normalized; the
// synthetic ground truth is target = sum_j w_j(lon,lat,t) * mean_window(x_j)
// + noise, which keeps per-feature importances well defined for windowed
// inputs.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "geohet/common.hpp"

namespace geohet::geodata {

struct Sample {
  double lon = 0.0;   // degrees in [-180, 180)
  double lat = 0.0;   // degrees in [-90, 90]
  int t_index = 0;    // non-negative time-step id
  Mat features;       // L x D, z-scored once the dataset is normalized
  double target = 0.0;
  bool is_test = false;
};

struct NormStat {
  std::string name;
  double mean = 0.0;
  double std = 1.0;
  bool degenerate = false;  // constant channel mapped to zeros
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> feature_names;
  std::vector<NormStat> norm_stats;  // empty until zscore_normalize
  bool normalized = false;

  Eigen::Index window_len() const {
    return samples.empty() ? 0 : samples.front().features.rows();
  }
  Eigen::Index feature_dim() const {
    return samples.empty() ? 0 : samples.front().features.cols();
  }
  Eigen::Index size() const { return static_cast<Eigen::Index>(samples.size()); }

  std::vector<int> train_indices() const;
  std::vector<int> test_indices() const;
};

// Smooth per-feature coefficient field over (lon, lat, t):
//   w_j(p, t) = c0_j + a_j * <alpha_j, B(p)> + b_j * <beta_j, B(p)> * sin(2 pi t / period + psi_j)
// where B(p) are unit-variance real spherical harmonics of degree 1..order
// evaluated at the unit-sphere point p.  Being a function of p, the field is
// automatically continuous across the antimeridian.
class CoefficientField {
 public:
  CoefficientField() = default;
  CoefficientField(int order, double period, Vec c0, Vec a, Vec b, Vec psi,
                   Mat alpha, Mat beta);

  // Constant-in-space-and-time field w_j = c0_j (order 0, no seasonal part).
  static CoefficientField constants(Vec c0);

  // Number of degree-1..order harmonic basis functions.
  static int basis_size(int order);

  Vec eval(double lon, double lat, double t_index) const;
  Eigen::Index dim() const { return c0_.size(); }
  int order() const { return order_; }
  double period() const { return period_; }

 private:
  int order_ = 0;
  double period_ = 16.0;
  Vec c0_, a_, b_, psi_;
  Mat alpha_, beta_;  // D x basis_size(order), rows unit norm (or empty)
};

struct GenConfig {
  std::uint64_t seed = 42;
  int n_locations = 600;
  int n_times = 48;
  Eigen::Index L = 8;  // window length
  Eigen::Index D = 6;  // feature channels
  double noise_std = 0.1;
  int field_order = 2;       // max harmonic degree of the spatial patterns (0..2)
  double season_period = 16.0;
  double ar1_phi = 0.6;      // feature autocorrelation
  // Amplitudes of the coefficient field: global mean level, spatial
  // variation, seasonal variation.  Chosen so a global fixed-coefficient fit
  // explains well under half the signal on the defaults.
  double coef_mean_amp = 0.8;
  double coef_space_amp = 1.0;
  double coef_season_amp = 0.8;
};

// Draws the random coefficient field implied by the config (seed-derived
// stream, independent of the feature noise).
CoefficientField random_field(const GenConfig& cfg);

// Quasi-uniform Fibonacci-lattice locations, AR(1) feature series, targets
// from the given field.  Same config => byte-identical dataset.
Dataset generate_with_field(const GenConfig& cfg, const CoefficientField& field);

std::pair<Dataset, CoefficientField> generate_synthetic(const GenConfig& cfg);

// The target formula shared by the generator and tests.
double synth_target(const CoefficientField& field, double lon, double lat,
                    int t_index, const Row& window_mean);

// Marks samples with t_index % stride == offset as test, the rest train.
void assign_time_split(Dataset& ds, int stride, int offset);

// In-place z-score of every feature channel using population statistics of
// the train split; targets untouched.  Constant channels become all-zero and
// are flagged degenerate (callers may warn).  No-op guard: throws if called
// twice.
void zscore_normalize(Dataset& ds);

// Exact inverse on non-degenerate channels.
void denormalize(Dataset& ds);

struct Metrics {
  double rmse = 0.0;
  double r2 = 0.0;  // NaN when target variance is zero (documented sentinel)
  Eigen::Index n = 0;
};

Metrics compute_metrics(const Vec& y, const Vec& y_hat);

// Per-sample window means, n x D (of the features as currently stored).
Mat window_means(const Dataset& ds);
Vec targets(const Dataset& ds);

// CSV: header lon,lat,t_index,<features...>,target; one row per window step,
// L consecutive rows per sample.  Sidecar manifest JSON (path + ".manifest.json")
// records {seed, counts, norm_stats, split_indices} so splits and normalizers
// survive a round trip.
void save_dataset(const Dataset& ds, const std::string& csv_path,
                  std::uint64_t seed);
Dataset load_dataset(const std::string& csv_path, Eigen::Index window_len);

}  // namespace geohet::geodata

namespace geohet {
using namespace geodata;
}
