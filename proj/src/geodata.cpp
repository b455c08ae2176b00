#include "geohet/geodata.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

#include "geohet/csv.hpp"

namespace geohet::geodata {

namespace {

// Unit-variance real spherical harmonics of degree 1..order on the unit
// sphere (constant term excluded; it lives in c0).  Orthonormal under the
// uniform measure, so a unit-norm coefficient vector gives a unit-variance
// spatial pattern.
void harmonics_at(const Eigen::Vector3d& p, int order, Vec& out) {
  static const double s3 = std::sqrt(3.0);
  static const double s15 = std::sqrt(15.0);
  static const double s5 = std::sqrt(5.0);
  Eigen::Index k = 0;
  if (order >= 1) {
    out[k++] = s3 * p.x();
    out[k++] = s3 * p.y();
    out[k++] = s3 * p.z();
  }
  if (order >= 2) {
    out[k++] = s15 * p.x() * p.y();
    out[k++] = s15 * p.y() * p.z();
    out[k++] = s15 * p.x() * p.z();
    out[k++] = 0.5 * s15 * (p.x() * p.x() - p.y() * p.y());
    out[k++] = 0.5 * s5 * (3.0 * p.z() * p.z() - 1.0);
  }
}

double wrap_lon(double lon) {
  double x = std::fmod(lon + 180.0, 360.0);
  if (x < 0) x += 360.0;
  return x - 180.0;
}

}  // namespace

int CoefficientField::basis_size(int order) {
  require(order >= 0 && order <= 2, ErrorCode::ConfigError,
          "field_order must be 0, 1, or 2");
  return order >= 2 ? 8 : (order >= 1 ? 3 : 0);
}

CoefficientField::CoefficientField(int order, double period, Vec c0, Vec a,
                                   Vec b, Vec psi, Mat alpha, Mat beta)
    : order_(order),
      period_(period),
      c0_(std::move(c0)),
      a_(std::move(a)),
      b_(std::move(b)),
      psi_(std::move(psi)),
      alpha_(std::move(alpha)),
      beta_(std::move(beta)) {
  const Eigen::Index d = c0_.size();
  const int nb = basis_size(order_);
  require(period_ > 0, ErrorCode::ConfigError, "field period must be > 0");
  require(a_.size() == d && b_.size() == d && psi_.size() == d,
          ErrorCode::ShapeMismatch, "coefficient field: vector size mismatch");
  require(alpha_.rows() == (nb ? d : 0) && alpha_.cols() == nb &&
              beta_.rows() == (nb ? d : 0) && beta_.cols() == nb,
          ErrorCode::ShapeMismatch, "coefficient field: basis matrix mismatch");
}

CoefficientField CoefficientField::constants(Vec c0) {
  const Eigen::Index d = c0.size();
  return CoefficientField(0, 16.0, std::move(c0), Vec::Zero(d), Vec::Zero(d),
                          Vec::Zero(d), Mat(0, 0), Mat(0, 0));
}

Vec CoefficientField::eval(double lon, double lat, double t_index) const {
  Vec w = c0_;
  const int nb = basis_size(order_);
  if (nb > 0) {
    const Eigen::Vector3d p = to_unit_xyz(lat, lon);
    Vec B(nb);
    harmonics_at(p, order_, B);
    w += a_.cwiseProduct(alpha_ * B);
    const Vec pattern = beta_ * B;
    for (Eigen::Index j = 0; j < w.size(); ++j)
      w[j] += b_[j] * pattern[j] *
              std::sin(2.0 * kPi * t_index / period_ + psi_[j]);
  }
  return w;
}

CoefficientField random_field(const GenConfig& cfg) {
  const int nb = CoefficientField::basis_size(cfg.field_order);
  const Eigen::Index d = cfg.D;
  // Stream separated from the feature/noise stream so the same field can be
  // paired with different data draws.
  std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec c0(d), a(d), b(d), psi(d);
  Mat alpha(nb ? d : 0, nb), beta(nb ? d : 0, nb);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double sign = (j % 2 == 0) ? 1.0 : -1.0;
    c0[j] = sign * cfg.coef_mean_amp * (0.75 + 0.5 * u01(rng));
    a[j] = nb ? cfg.coef_space_amp * (0.75 + 0.5 * u01(rng)) : 0.0;
    b[j] = nb ? cfg.coef_season_amp * (0.75 + 0.5 * u01(rng)) : 0.0;
    psi[j] = 2.0 * kPi * u01(rng);
    if (nb) {
      for (int m = 0; m < nb; ++m) alpha(j, m) = gauss(rng);
      for (int m = 0; m < nb; ++m) beta(j, m) = gauss(rng);
      alpha.row(j).normalize();
      beta.row(j).normalize();
    }
  }
  return CoefficientField(cfg.field_order, cfg.season_period, std::move(c0),
                          std::move(a), std::move(b), std::move(psi),
                          std::move(alpha), std::move(beta));
}

double synth_target(const CoefficientField& field, double lon, double lat,
                    int t_index, const Row& window_mean) {
  require(window_mean.size() == field.dim(), ErrorCode::ShapeMismatch,
          "synth_target: window mean dimension != field dimension");
  return field.eval(lon, lat, t_index).dot(window_mean.transpose());
}

Dataset generate_with_field(const GenConfig& cfg, const CoefficientField& field) {
  require(cfg.n_locations >= 1, ErrorCode::ConfigError, "n_locations must be >= 1");
  require(cfg.n_times >= 1, ErrorCode::ConfigError, "n_times must be >= 1");
  require(cfg.L >= 1 && cfg.D >= 1, ErrorCode::ConfigError,
          "window length and feature dim must be >= 1");
  require(std::isfinite(cfg.noise_std) && cfg.noise_std >= 0,
          ErrorCode::ConfigError, "noise_std must be finite and >= 0");
  require(std::abs(cfg.ar1_phi) < 1.0, ErrorCode::ConfigError,
          "ar1_phi must lie in (-1, 1)");
  require(field.dim() == cfg.D, ErrorCode::ShapeMismatch,
          "field dimension != D");

  std::mt19937_64 master(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double lon_rot = 360.0 * u01(master);
  std::vector<std::uint64_t> loc_seed(static_cast<std::size_t>(cfg.n_locations));
  for (auto& s : loc_seed) s = master();

  Dataset ds;
  ds.feature_names.reserve(static_cast<std::size_t>(cfg.D));
  for (Eigen::Index j = 0; j < cfg.D; ++j)
    ds.feature_names.push_back("x_" + std::to_string(j + 1));
  ds.samples.reserve(static_cast<std::size_t>(cfg.n_locations) *
                     static_cast<std::size_t>(cfg.n_times));

  // Golden-angle Fibonacci lattice: quasi-uniform, deterministic up to the
  // seed-driven longitude rotation.
  const double golden_deg = 360.0 * (1.0 - 2.0 / (1.0 + std::sqrt(5.0)));
  const double innov = std::sqrt(1.0 - cfg.ar1_phi * cfg.ar1_phi);
  const Eigen::Index series_len = cfg.n_times + cfg.L - 1;

  for (int i = 0; i < cfg.n_locations; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / cfg.n_locations;
    const double lat = std::asin(std::clamp(z, -1.0, 1.0)) * 180.0 / kPi;
    const double lon = wrap_lon(i * golden_deg + lon_rot);

    std::mt19937_64 rng(loc_seed[static_cast<std::size_t>(i)]);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // AR(1) per channel with unit stationary variance; L-1 burn-in steps so
    // t_index 0 already has a full window.
    Mat series(series_len, cfg.D);
    for (Eigen::Index c = 0; c < cfg.D; ++c) {
      series(0, c) = gauss(rng);
      for (Eigen::Index t = 1; t < series_len; ++t)
        series(t, c) = cfg.ar1_phi * series(t - 1, c) + innov * gauss(rng);
    }

    for (int t = 0; t < cfg.n_times; ++t) {
      Sample s;
      s.lon = lon;
      s.lat = lat;
      s.t_index = t;
      s.features = series.middleRows(t, cfg.L);
      const Row xbar = s.features.colwise().mean();
      s.target = synth_target(field, lon, lat, t, xbar) +
                 cfg.noise_std * gauss(rng);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

std::pair<Dataset, CoefficientField> generate_synthetic(const GenConfig& cfg) {
  CoefficientField field = random_field(cfg);
  Dataset ds = generate_with_field(cfg, field);
  return {std::move(ds), std::move(field)};
}

void assign_time_split(Dataset& ds, int stride, int offset) {
  require(stride >= 1, ErrorCode::ConfigError, "split stride must be >= 1");
  require(offset >= 0 && offset < stride, ErrorCode::ConfigError,
          "split offset must lie in [0, stride)");
  for (auto& s : ds.samples) s.is_test = (s.t_index % stride == offset);
}

std::vector<int> Dataset::train_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (!samples[i].is_test) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Dataset::test_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].is_test) out.push_back(static_cast<int>(i));
  return out;
}

void zscore_normalize(Dataset& ds) {
  require(!ds.samples.empty(), ErrorCode::ConfigError,
          "cannot normalize an empty dataset");
  require(!ds.normalized, ErrorCode::ConfigError, "dataset already normalized");
  const Eigen::Index d = ds.feature_dim();
  require(static_cast<Eigen::Index>(ds.feature_names.size()) == d,
          ErrorCode::ShapeMismatch, "feature_names size != feature dim");

  const auto train = ds.train_indices();
  require(!train.empty(), ErrorCode::ConfigError,
          "no train samples to compute normalization statistics from");

  // Population moments over every window row of the train split.
  Vec sum = Vec::Zero(d), sumsq = Vec::Zero(d);
  double n = 0;
  for (int i : train) {
    const Mat& f = ds.samples[static_cast<std::size_t>(i)].features;
    sum += f.colwise().sum().transpose();
    sumsq += f.array().square().colwise().sum().matrix().transpose();
    n += static_cast<double>(f.rows());
  }
  ds.norm_stats.resize(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) {
    NormStat& st = ds.norm_stats[static_cast<std::size_t>(j)];
    st.name = ds.feature_names[static_cast<std::size_t>(j)];
    st.mean = sum[j] / n;
    const double var = std::max(0.0, sumsq[j] / n - st.mean * st.mean);
    st.std = std::sqrt(var);
    st.degenerate = st.std < 1e-12;
    if (st.degenerate) st.std = 0.0;
  }
  for (auto& s : ds.samples)
    for (Eigen::Index j = 0; j < d; ++j) {
      const NormStat& st = ds.norm_stats[static_cast<std::size_t>(j)];
      if (st.degenerate)
        s.features.col(j).setZero();
      else
        s.features.col(j) = (s.features.col(j).array() - st.mean) / st.std;
    }
  ds.normalized = true;
}

void denormalize(Dataset& ds) {
  require(ds.normalized, ErrorCode::ConfigError, "dataset is not normalized");
  const Eigen::Index d = ds.feature_dim();
  for (auto& s : ds.samples)
    for (Eigen::Index j = 0; j < d; ++j) {
      const NormStat& st = ds.norm_stats[static_cast<std::size_t>(j)];
      // For a degenerate channel std is 0 and every stored value is 0, so
      // this restores the original constant (= mean) exactly.
      s.features.col(j) = s.features.col(j).array() * st.std + st.mean;
    }
  ds.normalized = false;
  ds.norm_stats.clear();
}

Metrics compute_metrics(const Vec& y, const Vec& y_hat) {
  require(y.size() == y_hat.size() && y.size() >= 1, ErrorCode::ShapeMismatch,
          "compute_metrics: length mismatch or empty");
  require_finite<double>(y, "y");
  require_finite<double>(y_hat, "y_hat");
  Metrics m;
  m.n = y.size();
  const Vec res = y - y_hat;
  m.rmse = std::sqrt(res.squaredNorm() / static_cast<double>(m.n));
  const double mean_y = y.mean();
  const double ss_tot = (y.array() - mean_y).square().sum();
  m.r2 = ss_tot > 0 ? 1.0 - res.squaredNorm() / ss_tot
                    : std::numeric_limits<double>::quiet_NaN();
  return m;
}

Mat window_means(const Dataset& ds) {
  Mat out(ds.size(), ds.feature_dim());
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    out.row(i) =
        ds.samples[static_cast<std::size_t>(i)].features.colwise().mean();
  return out;
}

Vec targets(const Dataset& ds) {
  Vec out(ds.size());
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    out[i] = ds.samples[static_cast<std::size_t>(i)].target;
  return out;
}

// ---------------------------------------------------------------------------
// CSV + manifest round trip
// ---------------------------------------------------------------------------

void save_dataset(const Dataset& ds, const std::string& csv_path,
                  std::uint64_t seed) {
  const Eigen::Index d = ds.feature_dim(), L = ds.window_len();
  std::vector<std::string> header{"lon", "lat", "t_index"};
  for (const auto& n : ds.feature_names) header.push_back(n);
  header.push_back("target");

  Mat rows(ds.size() * L, 3 + d + 1);
  Eigen::Index r = 0;
  for (const auto& s : ds.samples)
    for (Eigen::Index k = 0; k < L; ++k, ++r) {
      rows(r, 0) = s.lon;
      rows(r, 1) = s.lat;
      rows(r, 2) = static_cast<double>(s.t_index);
      rows.block(r, 3, 1, d) = s.features.row(k);
      rows(r, 3 + d) = s.target;
    }
  csv::write_table(csv_path, header, rows);

  nlohmann::json man;
  man["seed"] = seed;
  man["counts"] = {{"n_samples", ds.size()},
                   {"n_train", static_cast<Eigen::Index>(ds.train_indices().size())},
                   {"n_test", static_cast<Eigen::Index>(ds.test_indices().size())},
                   {"window_len", L},
                   {"feature_dim", d}};
  man["feature_names"] = ds.feature_names;
  man["normalized"] = ds.normalized;
  man["norm_stats"] = nlohmann::json::array();
  for (const auto& st : ds.norm_stats)
    man["norm_stats"].push_back({{"name", st.name},
                                 {"mean", st.mean},
                                 {"std", st.std},
                                 {"degenerate", st.degenerate}});
  man["split_indices"] = {{"test", ds.test_indices()}};

  std::ofstream out(csv_path + ".manifest.json");
  if (!out) fail(ErrorCode::IoError, "cannot write " + csv_path + ".manifest.json");
  out << man.dump(2) << '\n';
}

Dataset load_dataset(const std::string& csv_path, Eigen::Index window_len) {
  require(window_len >= 1, ErrorCode::ConfigError, "window length must be >= 1");
  const csv::Table t = csv::read_table(csv_path);
  const Eigen::Index c_lon = csv::column(t, "lon");
  const Eigen::Index c_lat = csv::column(t, "lat");
  const Eigen::Index c_t = csv::column(t, "t_index");
  const Eigen::Index c_y = csv::column(t, "target");

  Dataset ds;
  std::vector<Eigen::Index> feat_cols;
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(t.header.size()); ++c)
    if (c != c_lon && c != c_lat && c != c_t && c != c_y) {
      feat_cols.push_back(c);
      ds.feature_names.push_back(t.header[static_cast<std::size_t>(c)]);
    }
  require(!feat_cols.empty(), ErrorCode::MissingColumn,
          csv_path + ": no feature columns found");
  const Eigen::Index d = static_cast<Eigen::Index>(feat_cols.size());

  auto row_t_index = [&](Eigen::Index r) {
    const double v = t.rows(r, c_t);
    const double rounded = std::round(v);
    if (std::abs(v - rounded) > 1e-9 || rounded < 0)
      fail(ErrorCode::DataError, csv_path + ": t_index must be a non-negative "
                                            "integer at data row " +
                                     std::to_string(r + 1));
    return static_cast<int>(rounded);
  };

  Eigen::Index r = 0;
  const Eigen::Index n_rows = t.rows.rows();
  while (r < n_rows) {
    const double lon = t.rows(r, c_lon), lat = t.rows(r, c_lat);
    const int ti = row_t_index(r);
    if (lat < -90.0 || lat > 90.0)
      fail(ErrorCode::DataError,
           csv_path + ": latitude out of range at data row " + std::to_string(r + 1));
    Eigen::Index len = 0;
    while (r + len < n_rows && t.rows(r + len, c_lon) == lon &&
           t.rows(r + len, c_lat) == lat && row_t_index(r + len) == ti)
      ++len;
    if (len != window_len)
      fail(ErrorCode::RaggedWindow,
           csv_path + ": window at data row " + std::to_string(r + 1) +
               " has " + std::to_string(len) + " rows, expected " +
               std::to_string(window_len));
    Sample s;
    s.lon = wrap_lon(lon);
    s.lat = lat;
    s.t_index = ti;
    s.features.resize(window_len, d);
    for (Eigen::Index k = 0; k < window_len; ++k)
      for (Eigen::Index j = 0; j < d; ++j)
        s.features(k, j) = t.rows(r + k, feat_cols[static_cast<std::size_t>(j)]);
    s.target = t.rows(r + window_len - 1, c_y);
    ds.samples.push_back(std::move(s));
    r += window_len;
  }
  require(!ds.samples.empty(), ErrorCode::DataError, csv_path + ": no samples");

  // Sidecar manifest (optional): restores split labels and normalizer state.
  std::ifstream man_in(csv_path + ".manifest.json");
  if (man_in) {
    nlohmann::json man;
    try {
      man_in >> man;
    } catch (const std::exception& e) {
      fail(ErrorCode::DataError,
           csv_path + ".manifest.json: " + std::string(e.what()));
    }
    if (man.contains("counts")) {
      const auto& c = man["counts"];
      require(c["n_samples"].get<Eigen::Index>() == ds.size() &&
                  c["window_len"].get<Eigen::Index>() == window_len &&
                  c["feature_dim"].get<Eigen::Index>() == d,
              ErrorCode::DataError,
              csv_path + ".manifest.json: counts disagree with the CSV");
    }
    if (man.contains("split_indices") && man["split_indices"].contains("test"))
      for (const auto& idx : man["split_indices"]["test"]) {
        const auto i = idx.get<Eigen::Index>();
        require(i >= 0 && i < ds.size(), ErrorCode::IndexOutOfRange,
                csv_path + ".manifest.json: test index out of range");
        ds.samples[static_cast<std::size_t>(i)].is_test = true;
      }
    if (man.contains("normalized")) ds.normalized = man["normalized"].get<bool>();
    if (man.contains("norm_stats"))
      for (const auto& st : man["norm_stats"])
        ds.norm_stats.push_back(NormStat{st["name"].get<std::string>(),
                                         st["mean"].get<double>(),
                                         st["std"].get<double>(),
                                         st["degenerate"].get<bool>()});
    if (ds.normalized)
      require(static_cast<Eigen::Index>(ds.norm_stats.size()) == d,
              ErrorCode::DataError,
              csv_path + ".manifest.json: normalized but norm_stats incomplete");
  }
  return ds;
}

}  // namespace geohet::geodata
