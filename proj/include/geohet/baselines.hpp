#pragma once

// Global OLS and Geographically Weighted Regression over window-mean
// regressors.  Both solvers consume the same flattened fitting table, so the
// uniform-weight limit of GWR is exactly the OLS problem.

#include <vector>

#include "geohet/common.hpp"
#include "geohet/geodata.hpp"

namespace geohet::baselines {

using geodata::Dataset;
using geodata::Metrics;

// One row per fitting sample: window-mean regressors, target, location.
struct RegressionData {
  Mat X;       // n x D
  Vec y;       // n
  Mat lonlat;  // n x 2
  Eigen::Index size() const { return X.rows(); }
};

// Per-sample rows for the given dataset indices.
RegressionData window_mean_data(const Dataset& ds,
                                const std::vector<int>& idxs);

// One row per distinct location (first-seen order): regressors and targets
// averaged over that location's samples.  This is the desk-scale stand-in
// for fitting local models on long-run per-location averages.
RegressionData location_averaged_data(const Dataset& ds,
                                      const std::vector<int>& idxs);

struct LinFit {
  Vec coef;             // D entries (+ trailing intercept when enabled)
  bool intercept = false;
  bool ridge_fallback = false;  // normal matrix was singular; lambda = 1e-8
};

// Weighted least squares core shared by OLS and GWR: rows are scaled by
// sqrt(w); rank-deficient systems fall back to ridge (lambda = 1e-8) and set
// `ridge_fallback`.
LinFit wls_fit(const Mat& X, const Vec& y, const Vec& w,
               bool intercept = false);

// Unweighted least squares.
LinFit ols_fit(const RegressionData& data, bool intercept = false);

double lin_predict(const LinFit& fit, const Vec& xbar);

struct GwrModel {
  double bandwidth = 0.0;
  Mat locations;  // F x 2 (lon, lat) fitting locations
  Mat coords3d;   // F x 3 unit vectors
  Mat coefs;      // F x (D (+1))
  bool intercept = false;
  std::vector<char> ridge_flags;  // per location
  bool any_ridge() const {
    for (char c : ridge_flags)
      if (c) return true;
    return false;
  }
};

// One weighted least-squares fit per distinct row of `data.lonlat`, with
// Gaussian kernel weights over 3D chord distance:
//   w_i = exp(-dist^2 / (2 bandwidth^2)).
GwrModel gwr_fit(const RegressionData& data, double bandwidth,
                 bool intercept = false);

// Prediction uses the nearest fitted location's coefficients (ties to the
// lower index).
int nearest_fitted(const GwrModel& m, double lon, double lat);
double gwr_predict(const GwrModel& m, double lon, double lat, const Vec& xbar);

// Predictions for every row of `eval`.
Vec gwr_predict_all(const GwrModel& m, const RegressionData& eval);
Vec ols_predict_all(const LinFit& fit, const RegressionData& eval);

// Golden-section search for the bandwidth minimizing RMSE on `val`,
// over [lo, hi] (chord-distance units).
double golden_section_bandwidth(const RegressionData& fit_data,
                                const RegressionData& val, double lo,
                                double hi, bool intercept = false,
                                int iters = 40);

}  // namespace geohet::baselines

namespace geohet {
using namespace baselines;
}
