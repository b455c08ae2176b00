#pragma once

// Spatiotemporal condition graph: cluster-center nodes from spherical
// K-means, KNN adjacency on 3D chord distance (which makes the graph cyclic
// across the antimeridian for global data), log-Gaussian edge weights, and
// node embeddings from Node2vec walks.  Per-(node, time) condition vectors
// start as the Node2vec vector rotated by a rotary time encoding; the
// learnable copy of that tensor is owned by the model parameters, not by the
// graph.

#include <cstdint>
#include <string>
#include <vector>

#include "geohet/common.hpp"

namespace geohet::stcg {

struct KernelParams {
  double sigma = 1.0;
  double mu = 0.0;  // 0 = resolve to the mean over-support chord distance
  int k_nn = 8;
};

struct WalkParams {
  int walk_length = 20;
  int walks_per_node = 10;
  int window = 5;
  double p = 1.0;  // return bias
  double q = 1.0;  // in-out bias
  int negatives = 5;
  int epochs = 3;
  double lr = 0.025;
};

struct ConditionGraph {
  Mat centers;               // k x 2 (lon, lat degrees)
  Mat coords3d;              // k x 3 unit-sphere points
  Eigen::MatrixXi adjacency; // k x k, row i marks the k_nn out-neighbors of i
  Mat edge_weights;          // k x k, zero exactly off the adjacency support
  Eigen::VectorXi degrees;   // unweighted out-degree (row sums of adjacency)
  int k_nn = 0;
  double sigma = 1.0;
  double mu = 1.0;           // resolved value actually used by the kernel
  Mat embeddings;            // k x d_cond Node2vec vectors (time-free)

  Eigen::Index n_nodes() const { return centers.rows(); }
  Eigen::Index d_cond() const { return embeddings.cols(); }
};

// lon/lat degrees -> unit sphere: x = cos(lat)cos(lon), y = cos(lat)sin(lon),
// z = sin(lat).  Any finite angles accepted (wrapped by periodicity).
Eigen::Vector3d latlon_to_xyz(double lon, double lat);

// Spherical K-means (K-means++ seeding, Lloyd updates with re-projection of
// means onto the sphere, empty clusters reseeded from the farthest point).
// Distances are 3D chord distances, so the antimeridian is seamless.  The
// objective is checked to be non-increasing every iteration.  Returns k x 2
// (lon, lat) centers.
Mat kmeans_centers(const Mat& lonlat_points, int k_clusters, std::uint64_t seed);

// A(i,j) = 1 iff j is one of the k_nn nearest other centers to i; ties broken
// toward the lower index.  Not necessarily symmetric.
Eigen::MatrixXi knn_adjacency(const Mat& coords3d, int k_nn);

// w(i,j) = exp(-(1 - exp(-dist/mu))^2 / (2 sigma^2)) on the adjacency
// support, 0 elsewhere.  Requires mu, sigma > 0 (resolve mu first).
Mat edge_weights(const Mat& coords3d, const Eigen::MatrixXi& A, double sigma,
                 double mu);

double mean_support_distance(const Mat& coords3d, const Eigen::MatrixXi& A);

// Skip-gram-with-negative-sampling embeddings over p/q-biased weighted random
// walks.  Deterministic under a fixed seed (single-threaded, fixed order).
Mat node2vec_embed(const Eigen::MatrixXi& A, const Mat& W, int dims,
                   const WalkParams& wp, std::uint64_t seed);

// Rotates consecutive coordinate pairs (2m, 2m+1) by angle t * base^(-2m/d).
// Norm-preserving; t = 0 is the identity.  Throws on odd dimension.
Vec rope_time(const Vec& v, double t, double base = 10000.0);

ConditionGraph build_graph(const Mat& lonlat_points, int k_clusters,
                           const KernelParams& kp, int d_cond,
                           std::uint64_t seed, const WalkParams& wp = {});

// Nearest center by chord distance; ties go to the lower index.
int assign_node(const ConditionGraph& g, double lon, double lat);

// Initial learnable per-(node, time) condition tensor, time-major:
// row(t * k + i) = rope_time(embeddings.row(i), t).
Mat init_node_embed(const ConditionGraph& g, int n_times);

// JSON round trip: {centers, k_nn, sigma, mu, adjacency (index pairs),
// weights, embeddings}.  Doubles survive the trip bit-exactly.
void save_graph_json(const ConditionGraph& g, const std::string& path);
ConditionGraph load_graph_json(const std::string& path);

}  // namespace geohet::stcg

namespace geohet {
using namespace stcg;
}
