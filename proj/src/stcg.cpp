#include "geohet/stcg.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace geohet::stcg {

Eigen::Vector3d latlon_to_xyz(double lon, double lat) {
  require(std::isfinite(lon) && std::isfinite(lat), ErrorCode::NonFiniteValue,
          "latlon_to_xyz: non-finite input");
  return to_unit_xyz(lat, lon);
}

namespace {

Mat points_to_xyz(const Mat& lonlat) {
  require(lonlat.cols() == 2, ErrorCode::ShapeMismatch,
          "expected an n x 2 (lon, lat) matrix");
  Mat out(lonlat.rows(), 3);
  for (Eigen::Index i = 0; i < lonlat.rows(); ++i)
    out.row(i) = latlon_to_xyz(lonlat(i, 0), lonlat(i, 1)).transpose();
  return out;
}

Eigen::Index count_distinct_rows(const Mat& m) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    seen.insert(std::move(row));
  }
  return static_cast<Eigen::Index>(seen.size());
}

// Index of the nearest row of `centers` to point p; ties -> lower index.
Eigen::Index nearest_row(const Mat& centers, const Eigen::RowVector3d& p) {
  Eigen::Index best = 0;
  double best_d = (centers.row(0) - p).squaredNorm();
  for (Eigen::Index c = 1; c < centers.rows(); ++c) {
    const double d = (centers.row(c) - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

Mat kmeans_centers(const Mat& lonlat_points, int k_clusters, std::uint64_t seed) {
  const Mat pts = points_to_xyz(lonlat_points);
  const Eigen::Index n = pts.rows();
  require(k_clusters >= 1, ErrorCode::ConfigError, "k_clusters must be >= 1");
  require(static_cast<Eigen::Index>(k_clusters) <= count_distinct_rows(pts),
          ErrorCode::ConfigError,
          "k_clusters exceeds the number of distinct points");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  // K-means++ seeding on chord distances.
  Mat centers(k_clusters, 3);
  centers.row(0) = pts.row(static_cast<Eigen::Index>(u01(rng) * static_cast<double>(n)) % n);
  Vec d2 = (pts.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k_clusters; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      const double r = u01(rng) * total;
      double acc = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      // all remaining distances zero (duplicate-heavy input); spread by index
      pick = static_cast<Eigen::Index>(c) % n;
    }
    centers.row(c) = pts.row(pick);
    d2 = d2.cwiseMin((pts.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  std::vector<Eigen::Index> assign(static_cast<std::size_t>(n), 0);
  double prev_obj = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 200; ++iter) {
    // Assignment step; the objective is measured here and must not increase.
    double obj = 0;
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index a = nearest_row(centers, pts.row(i));
      obj += (pts.row(i) - centers.row(a)).squaredNorm();
      if (assign[static_cast<std::size_t>(i)] != a) {
        assign[static_cast<std::size_t>(i)] = a;
        changed = true;
      }
    }
    require(obj <= prev_obj + 1e-9, ErrorCode::NumericError,
            "k-means objective increased");
    prev_obj = obj;
    if (!changed && iter > 0) break;

    // Update step: spherical mean (normalized Euclidean mean) minimizes the
    // chord-distance objective over unit-norm centers.
    Mat sums = Mat::Zero(k_clusters, 3);
    Eigen::VectorXi counts = Eigen::VectorXi::Zero(k_clusters);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += pts.row(i);
      counts[assign[static_cast<std::size_t>(i)]] += 1;
    }
    for (int c = 0; c < k_clusters; ++c) {
      if (counts[c] == 0) {
        // Reseed an empty cluster from the point farthest from its center.
        Eigen::Index far_i = 0;
        double far_d = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d =
              (pts.row(i) - centers.row(assign[static_cast<std::size_t>(i)]))
                  .squaredNorm();
          if (d > far_d) {
            far_d = d;
            far_i = i;
          }
        }
        centers.row(c) = pts.row(far_i);
        continue;
      }
      const double norm = sums.row(c).norm();
      if (norm > 0)
        centers.row(c) = sums.row(c) / norm;
      // norm == 0 (antipodal cancellation): keep the previous center.
    }
  }

  Mat out(k_clusters, 2);
  for (int c = 0; c < k_clusters; ++c) {
    const double x = centers(c, 0), y = centers(c, 1), z = centers(c, 2);
    out(c, 0) = std::atan2(y, x) * 180.0 / kPi;
    out(c, 1) = std::asin(std::clamp(z, -1.0, 1.0)) * 180.0 / kPi;
  }
  return out;
}

Eigen::MatrixXi knn_adjacency(const Mat& coords3d, int k_nn) {
  const Eigen::Index k = coords3d.rows();
  require(k_nn >= 1 && k_nn < k, ErrorCode::ConfigError,
          "k_nn must satisfy 1 <= k_nn < n_centers");
  Eigen::MatrixXi A = Eigen::MatrixXi::Zero(k, k);
  std::vector<std::pair<double, Eigen::Index>> cand;
  for (Eigen::Index i = 0; i < k; ++i) {
    cand.clear();
    for (Eigen::Index j = 0; j < k; ++j) {
      if (j == i) continue;
      cand.emplace_back((coords3d.row(i) - coords3d.row(j)).squaredNorm(), j);
    }
    // ties broken toward the lower index by the pair ordering
    std::sort(cand.begin(), cand.end());
    for (int m = 0; m < k_nn; ++m) A(i, cand[static_cast<std::size_t>(m)].second) = 1;
  }
  return A;
}

Mat edge_weights(const Mat& coords3d, const Eigen::MatrixXi& A, double sigma,
                 double mu) {
  require(sigma > 0 && mu > 0, ErrorCode::ConfigError,
          "kernel sigma and mu must be > 0");
  require(A.rows() == coords3d.rows() && A.cols() == coords3d.rows(),
          ErrorCode::ShapeMismatch, "adjacency size mismatch");
  Mat W = Mat::Zero(A.rows(), A.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      if (!A(i, j)) continue;
      const double d = (coords3d.row(i) - coords3d.row(j)).norm();
      const double inner = 1.0 - std::exp(-d / mu);
      W(i, j) = std::exp(-inner * inner / (2.0 * sigma * sigma));
    }
  return W;
}

double mean_support_distance(const Mat& coords3d, const Eigen::MatrixXi& A) {
  double sum = 0;
  Eigen::Index count = 0;
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      if (A(i, j)) {
        sum += (coords3d.row(i) - coords3d.row(j)).norm();
        ++count;
      }
  require(count > 0, ErrorCode::IsolatedNode, "adjacency has no edges");
  return sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Node2vec
// ---------------------------------------------------------------------------

namespace {

struct WalkGraph {
  // CSR-ish: per node, its out-neighbors and edge weights.
  std::vector<std::vector<int>> nbr;
  std::vector<std::vector<double>> wgt;
  const Eigen::MatrixXi* A = nullptr;

  bool has_edge(int u, int v) const { return (*A)(u, v) != 0; }
};

int sample_discrete(const std::vector<double>& w, std::mt19937_64& rng) {
  double total = 0;
  for (double x : w) total += x;
  std::uniform_real_distribution<double> u(0.0, total);
  double r = u(rng);
  for (std::size_t i = 0; i < w.size(); ++i) {
    r -= w[i];
    if (r <= 0) return static_cast<int>(i);
  }
  return static_cast<int>(w.size()) - 1;
}

// One p/q-biased weighted walk from `start`.
std::vector<int> random_walk(const WalkGraph& g, int start, const WalkParams& wp,
                             std::mt19937_64& rng) {
  std::vector<int> walk{start};
  std::vector<double> probs;
  while (static_cast<int>(walk.size()) < wp.walk_length) {
    const int cur = walk.back();
    const auto& nbrs = g.nbr[static_cast<std::size_t>(cur)];
    if (nbrs.empty()) break;
    probs.assign(nbrs.size(), 0.0);
    if (walk.size() == 1) {
      for (std::size_t i = 0; i < nbrs.size(); ++i)
        probs[i] = g.wgt[static_cast<std::size_t>(cur)][i];
    } else {
      const int prev = walk[walk.size() - 2];
      for (std::size_t i = 0; i < nbrs.size(); ++i) {
        const int nxt = nbrs[i];
        double bias;
        if (nxt == prev)
          bias = 1.0 / wp.p;
        else if (g.has_edge(prev, nxt))
          bias = 1.0;
        else
          bias = 1.0 / wp.q;
        probs[i] = bias * g.wgt[static_cast<std::size_t>(cur)][i];
      }
    }
    walk.push_back(nbrs[static_cast<std::size_t>(sample_discrete(probs, rng))]);
  }
  return walk;
}

}  // namespace

Mat node2vec_embed(const Eigen::MatrixXi& A, const Mat& W, int dims,
                   const WalkParams& wp, std::uint64_t seed) {
  const Eigen::Index k = A.rows();
  require(A.cols() == k && W.rows() == k && W.cols() == k,
          ErrorCode::ShapeMismatch, "node2vec: adjacency/weight size mismatch");
  require(dims >= 1, ErrorCode::ConfigError, "node2vec: dims must be >= 1");
  require(wp.walk_length >= 2 && wp.walks_per_node >= 1 && wp.window >= 1 &&
              wp.p > 0 && wp.q > 0 && wp.negatives >= 1 && wp.epochs >= 1,
          ErrorCode::ConfigError, "node2vec: bad walk parameters");

  WalkGraph g;
  g.A = &A;
  g.nbr.resize(static_cast<std::size_t>(k));
  g.wgt.resize(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j)
      if (A(i, j)) {
        require(W(i, j) > 0, ErrorCode::ConfigError,
                "node2vec: non-positive weight on an edge");
        g.nbr[static_cast<std::size_t>(i)].push_back(static_cast<int>(j));
        g.wgt[static_cast<std::size_t>(i)].push_back(W(i, j));
      }
    require(!g.nbr[static_cast<std::size_t>(i)].empty(), ErrorCode::IsolatedNode,
            "node2vec: node " + std::to_string(i) + " has no out-edges");
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> unode(0, static_cast<int>(k) - 1);

  // Skip-gram init: small random center vectors, zero context vectors.
  Mat E(k, dims), C = Mat::Zero(k, dims);
  for (Eigen::Index i = 0; i < k; ++i)
    for (int d = 0; d < dims; ++d)
      E(i, d) = (u01(rng) - 0.5) / static_cast<double>(dims);

  const auto sgd_pair = [&](int center, int ctx, double label, double lr) {
    const double score = E.row(center).dot(C.row(ctx));
    const double p = 1.0 / (1.0 + std::exp(-score));
    const double gscale = lr * (label - p);
    const Row ge = gscale * C.row(ctx);
    C.row(ctx) += gscale * E.row(center);
    E.row(center) += ge;
  };

  const long total_steps = static_cast<long>(wp.epochs) * wp.walks_per_node *
                           static_cast<long>(k);
  long step = 0;
  for (int epoch = 0; epoch < wp.epochs; ++epoch)
    for (int w = 0; w < wp.walks_per_node; ++w)
      for (Eigen::Index start = 0; start < k; ++start) {
        const double lr =
            wp.lr * std::max(0.05, 1.0 - static_cast<double>(step) /
                                             static_cast<double>(total_steps));
        ++step;
        const auto walk = random_walk(g, static_cast<int>(start), wp, rng);
        for (std::size_t i = 0; i < walk.size(); ++i)
          for (int off = -wp.window; off <= wp.window; ++off) {
            if (off == 0) continue;
            const long j = static_cast<long>(i) + off;
            if (j < 0 || j >= static_cast<long>(walk.size())) continue;
            sgd_pair(walk[i], walk[static_cast<std::size_t>(j)], 1.0, lr);
            for (int neg = 0; neg < wp.negatives; ++neg)
              sgd_pair(walk[i], unode(rng), 0.0, lr);
          }
      }
  require_finite<double>(E, "node2vec embeddings");
  return E;
}

Vec rope_time(const Vec& v, double t, double base) {
  require(v.size() % 2 == 0, ErrorCode::ConfigError,
          "rope_time requires an even dimension");
  Vec out(v.size());
  const Eigen::Index d = v.size();
  for (Eigen::Index m = 0; m < d / 2; ++m) {
    const double ang =
        t * std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(d));
    const double c = std::cos(ang), s = std::sin(ang);
    out[2 * m] = c * v[2 * m] - s * v[2 * m + 1];
    out[2 * m + 1] = s * v[2 * m] + c * v[2 * m + 1];
  }
  return out;
}

ConditionGraph build_graph(const Mat& lonlat_points, int k_clusters,
                           const KernelParams& kp, int d_cond,
                           std::uint64_t seed, const WalkParams& wp) {
  require(kp.sigma > 0, ErrorCode::ConfigError, "sigma must be > 0");
  require(kp.mu >= 0, ErrorCode::ConfigError, "mu must be >= 0 (0 = auto)");
  require(d_cond >= 2 && d_cond % 2 == 0, ErrorCode::ConfigError,
          "d_cond must be even (rotary time encoding pairs coordinates)");
  ConditionGraph g;
  g.centers = kmeans_centers(lonlat_points, k_clusters, seed);
  g.coords3d = points_to_xyz(g.centers);
  g.k_nn = kp.k_nn;
  g.adjacency = knn_adjacency(g.coords3d, kp.k_nn);
  g.degrees = g.adjacency.rowwise().sum();
  g.sigma = kp.sigma;
  g.mu = kp.mu > 0 ? kp.mu : mean_support_distance(g.coords3d, g.adjacency);
  g.edge_weights = edge_weights(g.coords3d, g.adjacency, g.sigma, g.mu);
  g.embeddings = node2vec_embed(g.adjacency, g.edge_weights, d_cond, wp,
                                seed ^ 0xD1B54A32D192ED03ull);
  return g;
}

int assign_node(const ConditionGraph& g, double lon, double lat) {
  const Eigen::Vector3d p = latlon_to_xyz(lon, lat);
  return static_cast<int>(nearest_row(g.coords3d, p.transpose()));
}

Mat init_node_embed(const ConditionGraph& g, int n_times) {
  require(n_times >= 1, ErrorCode::ConfigError, "n_times must be >= 1");
  const Eigen::Index k = g.n_nodes(), d = g.d_cond();
  Mat out(k * n_times, d);
  for (int t = 0; t < n_times; ++t)
    for (Eigen::Index i = 0; i < k; ++i)
      out.row(static_cast<Eigen::Index>(t) * k + i) =
          rope_time(g.embeddings.row(i).transpose(), static_cast<double>(t))
              .transpose();
  return out;
}

// ---------------------------------------------------------------------------
// JSON round trip
// ---------------------------------------------------------------------------

void save_graph_json(const ConditionGraph& g, const std::string& path) {
  nlohmann::json j;
  j["k_nn"] = g.k_nn;
  j["sigma"] = g.sigma;
  j["mu"] = g.mu;
  j["centers"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < g.centers.rows(); ++i)
    j["centers"].push_back({g.centers(i, 0), g.centers(i, 1)});
  j["adjacency"] = nlohmann::json::array();
  j["weights"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < g.adjacency.rows(); ++i)
    for (Eigen::Index c = 0; c < g.adjacency.cols(); ++c)
      if (g.adjacency(i, c)) {
        j["adjacency"].push_back({i, c});
        j["weights"].push_back(g.edge_weights(i, c));
      }
  j["embeddings"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < g.embeddings.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < g.embeddings.cols(); ++c)
      row.push_back(g.embeddings(i, c));
    j["embeddings"].push_back(std::move(row));
  }
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out << j.dump(1) << '\n';
}

ConditionGraph load_graph_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail(ErrorCode::DataError, path + ": " + std::string(e.what()));
  }
  ConditionGraph g;
  try {
    g.k_nn = j.at("k_nn").get<int>();
    g.sigma = j.at("sigma").get<double>();
    g.mu = j.at("mu").get<double>();
    const auto& cj = j.at("centers");
    g.centers.resize(static_cast<Eigen::Index>(cj.size()), 2);
    for (std::size_t i = 0; i < cj.size(); ++i) {
      g.centers(static_cast<Eigen::Index>(i), 0) = cj[i][0].get<double>();
      g.centers(static_cast<Eigen::Index>(i), 1) = cj[i][1].get<double>();
    }
    const Eigen::Index k = g.centers.rows();
    g.coords3d = points_to_xyz(g.centers);
    g.adjacency = Eigen::MatrixXi::Zero(k, k);
    g.edge_weights = Mat::Zero(k, k);
    const auto& aj = j.at("adjacency");
    const auto& wj = j.at("weights");
    require(aj.size() == wj.size(), ErrorCode::DataError,
            path + ": adjacency/weights length mismatch");
    for (std::size_t e = 0; e < aj.size(); ++e) {
      const auto r = aj[e][0].get<Eigen::Index>();
      const auto c = aj[e][1].get<Eigen::Index>();
      require(r >= 0 && r < k && c >= 0 && c < k, ErrorCode::IndexOutOfRange,
              path + ": edge index out of range");
      g.adjacency(r, c) = 1;
      g.edge_weights(r, c) = wj[e].get<double>();
    }
    g.degrees = g.adjacency.rowwise().sum();
    const auto& ej = j.at("embeddings");
    require(ej.size() == static_cast<std::size_t>(k), ErrorCode::DataError,
            path + ": embeddings row count mismatch");
    const auto d = static_cast<Eigen::Index>(ej[0].size());
    g.embeddings.resize(k, d);
    for (std::size_t i = 0; i < ej.size(); ++i) {
      require(static_cast<Eigen::Index>(ej[i].size()) == d, ErrorCode::DataError,
              path + ": ragged embeddings");
      for (Eigen::Index c = 0; c < d; ++c)
        g.embeddings(static_cast<Eigen::Index>(i), c) =
            ej[i][static_cast<std::size_t>(c)].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::DataError, path + ": " + std::string(e.what()));
  }
  return g;
}

}  // namespace geohet::stcg
