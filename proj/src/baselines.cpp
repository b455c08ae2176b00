#include "geohet/baselines.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace geohet::baselines {

namespace {

// Weighted least squares on sqrt(w)-scaled rows.  Rank-deficient systems fall
// back to ridge (lambda = 1e-8) and flag it.
LinFit solve_wls(const Mat& X, const Vec& y, const Vec& w, bool intercept) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols() + (intercept ? 1 : 0);
  LinFit fit;
  fit.intercept = intercept;
  if (p == 0) {
    fit.coef = Vec(0);
    return fit;
  }
  Mat A(n, p);
  A.leftCols(X.cols()) = X;
  if (intercept) A.col(p - 1).setOnes();
  const Vec sw = w.array().max(0.0).sqrt();
  const Mat As = sw.asDiagonal() * A;
  const Vec ys = sw.asDiagonal() * y;

  Eigen::ColPivHouseholderQR<Mat> qr(As);
  if (n >= p && qr.rank() == p) {
    fit.coef = qr.solve(ys);
    if (fit.coef.allFinite()) return fit;
  }
  const Mat G = As.transpose() * As + 1e-8 * Mat::Identity(p, p);
  fit.coef = Eigen::LDLT<Mat>(G).solve(As.transpose() * ys);
  fit.ridge_fallback = true;
  require_finite<double>(fit.coef, "ridge-fallback coefficients");
  return fit;
}

Eigen::Index count_effective(const Vec& w) {
  Eigen::Index n = 0;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (w(i) > 0.0) ++n;
  return n;
}

}  // namespace

RegressionData window_mean_data(const Dataset& ds,
                                const std::vector<int>& idxs) {
  const Eigen::Index n = static_cast<Eigen::Index>(idxs.size());
  const Eigen::Index d = ds.feature_dim();
  RegressionData out;
  out.X = Mat(n, d);
  out.y = Vec(n);
  out.lonlat = Mat(n, 2);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& s = ds.samples.at(static_cast<std::size_t>(idxs[r]));
    out.X.row(r) = s.features.colwise().mean();
    out.y(r) = s.target;
    out.lonlat(r, 0) = s.lon;
    out.lonlat(r, 1) = s.lat;
  }
  return out;
}

RegressionData location_averaged_data(const Dataset& ds,
                                      const std::vector<int>& idxs) {
  const RegressionData flat = window_mean_data(ds, idxs);
  // Group rows by exact (lon, lat), first-seen order.
  std::vector<Eigen::Index> group(flat.size(), -1);
  std::vector<std::pair<double, double>> locs;
  for (Eigen::Index r = 0; r < flat.size(); ++r) {
    const std::pair<double, double> key{flat.lonlat(r, 0), flat.lonlat(r, 1)};
    Eigen::Index g = -1;
    for (std::size_t k = 0; k < locs.size(); ++k)
      if (locs[k] == key) {
        g = static_cast<Eigen::Index>(k);
        break;
      }
    if (g < 0) {
      g = static_cast<Eigen::Index>(locs.size());
      locs.push_back(key);
    }
    group[static_cast<std::size_t>(r)] = g;
  }
  const Eigen::Index f = static_cast<Eigen::Index>(locs.size());
  RegressionData out;
  out.X = Mat::Zero(f, flat.X.cols());
  out.y = Vec::Zero(f);
  out.lonlat = Mat(f, 2);
  Vec counts = Vec::Zero(f);
  for (Eigen::Index r = 0; r < flat.size(); ++r) {
    const Eigen::Index g = group[static_cast<std::size_t>(r)];
    out.X.row(g) += flat.X.row(r);
    out.y(g) += flat.y(r);
    counts(g) += 1.0;
  }
  for (Eigen::Index g = 0; g < f; ++g) {
    out.X.row(g) /= counts(g);
    out.y(g) /= counts(g);
    out.lonlat(g, 0) = locs[static_cast<std::size_t>(g)].first;
    out.lonlat(g, 1) = locs[static_cast<std::size_t>(g)].second;
  }
  return out;
}

LinFit wls_fit(const Mat& X, const Vec& y, const Vec& w, bool intercept) {
  require(X.rows() == y.size() && X.rows() == w.size(),
          ErrorCode::ShapeMismatch, "wls_fit: X, y, w row counts disagree");
  return solve_wls(X, y, w, intercept);
}

LinFit ols_fit(const RegressionData& data, bool intercept) {
  require(data.size() >= data.X.cols() + 1, ErrorCode::DataError,
          "ols_fit needs at least D+1 samples");
  return solve_wls(data.X, data.y, Vec::Ones(data.size()), intercept);
}

double lin_predict(const LinFit& fit, const Vec& xbar) {
  const Eigen::Index d = fit.coef.size() - (fit.intercept ? 1 : 0);
  require(xbar.size() == d, ErrorCode::ShapeMismatch,
          "lin_predict: feature count does not match fitted coefficients");
  double y = d > 0 ? fit.coef.head(d).dot(xbar) : 0.0;
  if (fit.intercept) y += fit.coef(d);
  return y;
}

GwrModel gwr_fit(const RegressionData& data, double bandwidth,
                 bool intercept) {
  require(std::isfinite(bandwidth) && bandwidth > 0.0, ErrorCode::ConfigError,
          "gwr_fit: bandwidth must be finite and positive");
  const Eigen::Index n = data.size();
  Mat pts(n, 3);
  for (Eigen::Index r = 0; r < n; ++r)
    pts.row(r) = to_unit_xyz(data.lonlat(r, 1), data.lonlat(r, 0)).transpose();

  GwrModel m;
  m.bandwidth = bandwidth;
  m.intercept = intercept;
  // Distinct fitting locations, first-seen order.
  std::vector<Eigen::Index> reps;
  for (Eigen::Index r = 0; r < n; ++r) {
    bool seen = false;
    for (Eigen::Index k : reps)
      if (data.lonlat(k, 0) == data.lonlat(r, 0) &&
          data.lonlat(k, 1) == data.lonlat(r, 1)) {
        seen = true;
        break;
      }
    if (!seen) reps.push_back(r);
  }
  const Eigen::Index f = static_cast<Eigen::Index>(reps.size());
  m.locations = Mat(f, 2);
  m.coords3d = Mat(f, 3);
  m.coefs = Mat(f, data.X.cols() + (intercept ? 1 : 0));
  m.ridge_flags.assign(static_cast<std::size_t>(f), 0);
  const double denom = 2.0 * bandwidth * bandwidth;
  for (Eigen::Index k = 0; k < f; ++k) {
    const Eigen::Index r0 = reps[static_cast<std::size_t>(k)];
    m.locations.row(k) = data.lonlat.row(r0);
    m.coords3d.row(k) = pts.row(r0);
    Vec w(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const double d2 = (pts.row(r) - pts.row(r0)).squaredNorm();
      w(r) = std::exp(-d2 / denom);
    }
    require(count_effective(w) >= data.X.cols() + 1, ErrorCode::DataError,
            "gwr_fit needs at least D+1 samples with nonzero kernel weight");
    const LinFit fit = solve_wls(data.X, data.y, w, intercept);
    m.coefs.row(k) = fit.coef.transpose();
    m.ridge_flags[static_cast<std::size_t>(k)] = fit.ridge_fallback ? 1 : 0;
  }
  return m;
}

int nearest_fitted(const GwrModel& m, double lon, double lat) {
  require(m.coords3d.rows() > 0, ErrorCode::DataError,
          "gwr_predict: model has no fitted locations");
  const Eigen::Vector3d p = to_unit_xyz(lat, lon);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < m.coords3d.rows(); ++k) {
    const double d = (m.coords3d.row(k).transpose() - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

double gwr_predict(const GwrModel& m, double lon, double lat,
                   const Vec& xbar) {
  const int k = nearest_fitted(m, lon, lat);
  LinFit local;
  local.coef = m.coefs.row(k).transpose();
  local.intercept = m.intercept;
  return lin_predict(local, xbar);
}

Vec gwr_predict_all(const GwrModel& m, const RegressionData& eval) {
  Vec out(eval.size());
  for (Eigen::Index r = 0; r < eval.size(); ++r)
    out(r) = gwr_predict(m, eval.lonlat(r, 0), eval.lonlat(r, 1),
                         eval.X.row(r).transpose());
  return out;
}

Vec ols_predict_all(const LinFit& fit, const RegressionData& eval) {
  Vec out(eval.size());
  for (Eigen::Index r = 0; r < eval.size(); ++r)
    out(r) = lin_predict(fit, eval.X.row(r).transpose());
  return out;
}

double golden_section_bandwidth(const RegressionData& fit_data,
                                const RegressionData& val, double lo,
                                double hi, bool intercept, int iters) {
  require(std::isfinite(lo) && std::isfinite(hi) && 0.0 < lo && lo < hi,
          ErrorCode::ConfigError,
          "golden_section_bandwidth: need 0 < lo < hi, both finite");
  auto rmse_at = [&](double bw) {
    const GwrModel m = gwr_fit(fit_data, bw, intercept);
    return geodata::compute_metrics(val.y, gwr_predict_all(m, val)).rmse;
  };
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - invphi * (b - a);
  double d = a + invphi * (b - a);
  double fc = rmse_at(c), fd = rmse_at(d);
  for (int i = 0; i < iters; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - invphi * (b - a);
      fc = rmse_at(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + invphi * (b - a);
      fd = rmse_at(d);
    }
  }
  return 0.5 * (a + b);
}

}  // namespace geohet::baselines
