#pragma once

// Condition encoding over the cluster graph: depthwise temporal convolution,
// one symmetric-normalized graph convolution, then a per-node LSTM over time.
// All tensors are stored time-major: row (t * n_nodes + i) holds node i at
// time t, so each stage is a few large matrix ops per time slice.

#include <string>
#include <vector>

#include "geohet/common.hpp"
#include "geohet/params.hpp"
#include "geohet/stcg.hpp"
#include "geohet/tape.hpp"

namespace geohet {

struct CondEncConfig {
  Eigen::Index d_cond = 16;  // channel width, equals the graph embedding dim
  Eigen::Index k_t = 1;      // temporal kernel half-width (length 2*k_t + 1)
  std::string activation = "relu";  // graph-convolution nonlinearity

  void validate() const {
    require(d_cond >= 1, ErrorCode::ConfigError, "d_cond must be >= 1");
    require(k_t >= 0, ErrorCode::ConfigError, "k_t must be >= 0");
    require(activation == "relu" || activation == "identity",
            ErrorCode::ConfigError,
            "condenc activation must be 'relu' or 'identity'");
  }
};

inline void add_condenc_params(Params& p, const CondEncConfig& cfg,
                               std::mt19937_64& rng) {
  cfg.validate();
  const Eigen::Index d = cfg.d_cond;
  // delta kernel: the temporal stage starts as the identity and learns
  // away from it
  Mat kernel = Mat::Zero(2 * cfg.k_t + 1, d);
  kernel.row(cfg.k_t).setOnes();
  p.add("condenc.conv.kernel", kernel);
  p.add("condenc.gcn.H", xavier_uniform(d, d, rng));
  p.add("condenc.lstm.Wx", xavier_uniform(d, 4 * d, rng));
  p.add("condenc.lstm.Wh", xavier_uniform(d, 4 * d, rng));
  Mat b = Mat::Zero(1, 4 * d);
  b.middleCols(d, d).setOnes();  // forget gate starts open
  p.add("condenc.lstm.b", b);
}

// Symmetric degree-normalized weighted adjacency P = D^{-1/2} (A.W) D^{-1/2}
// with unweighted degrees.  Fixed at graph-build time, not differentiated.
inline Mat propagation_matrix(const Eigen::MatrixXi& A, const Mat& W) {
  const Eigen::Index n = A.rows();
  require(W.rows() == n && W.cols() == n && A.cols() == n,
          ErrorCode::ShapeMismatch,
          "propagation_matrix: adjacency and weights must be square and equal");
  Vec dinv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int deg = A.row(i).sum();
    require(deg > 0, ErrorCode::IsolatedNode,
            "propagation_matrix: node " + std::to_string(i) +
                " has no neighbors");
    dinv(i) = 1.0 / std::sqrt(double(deg));
  }
  Mat p = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (A(i, j) != 0) p(i, j) = W(i, j) * dinv(i) * dinv(j);
  return p;
}

inline Mat propagation_matrix(const ConditionGraph& g) {
  return propagation_matrix(g.adjacency, g.edge_weights);
}

// Depthwise "same" convolution along time with zero padding.
template <typename S>
Var<S> temporal_conv(Var<S> v, Var<S> kernel, Eigen::Index n_nodes,
                     Eigen::Index n_times) {
  require(kernel.rows() <= 2 * n_times - 1, ErrorCode::ConfigError,
          "temporal_conv: kernel length exceeds 2T-1");
  return conv_time(v, kernel, n_nodes, n_times);
}

// One aggregation pass per time slice: act(P * V_t * H).
template <typename S>
Var<S> gcn_layer(Var<S> v_temp, const MatX<S>& P, Var<S> H,
                 Eigen::Index n_nodes, Eigen::Index n_times,
                 const std::string& activation) {
  auto mixed = matmul(node_mix(v_temp, P, n_nodes, n_times), H);
  if (activation == "identity") return mixed;
  require(activation == "relu", ErrorCode::ConfigError,
          "gcn_layer: unknown activation '" + activation + "'");
  return relu(mixed);
}

// Standard LSTM over t = 0..T-1 run for all nodes at once; gate blocks are
// ordered [input, forget, output, candidate] inside the fused 4d projection.
// Output keeps the time-major layout: row (t * n_nodes + i) = h_t of node i.
template <typename S>
Var<S> lstm_aggregate(Var<S> v_spatial, Var<S> Wx, Var<S> Wh, Var<S> b,
                      Eigen::Index n_nodes, Eigen::Index n_times) {
  const Eigen::Index d = v_spatial.cols();
  require(Wx.rows() == d && Wx.cols() == 4 * d, ErrorCode::ShapeMismatch,
          "lstm_aggregate: Wx must be d x 4d");
  require(Wh.rows() == d && Wh.cols() == 4 * d, ErrorCode::ShapeMismatch,
          "lstm_aggregate: Wh must be d x 4d");
  require(b.rows() == 1 && b.cols() == 4 * d, ErrorCode::ShapeMismatch,
          "lstm_aggregate: b must be 1 x 4d");
  Tape<S>& t = *v_spatial.tape;
  Var<S> h = t.constant(MatX<S>::Zero(n_nodes, d));
  Var<S> c = t.constant(MatX<S>::Zero(n_nodes, d));
  std::vector<Var<S>> hs;
  hs.reserve(static_cast<std::size_t>(n_times));
  for (Eigen::Index step = 0; step < n_times; ++step) {
    auto x = block_rows(v_spatial, step * n_nodes, n_nodes);
    auto z = add_rowvec(add(matmul(x, Wx), matmul(h, Wh)), b);
    auto i_g = sigmoid(block_cols(z, 0, d));
    auto f_g = sigmoid(block_cols(z, d, d));
    auto o_g = sigmoid(block_cols(z, 2 * d, d));
    auto g_g = tanh_act(block_cols(z, 3 * d, d));
    c = add(hadamard(f_g, c), hadamard(i_g, g_g));
    h = hadamard(o_g, tanh_act(c));
    hs.push_back(h);
  }
  return vstack(hs);
}

// Full stage: node embeddings -> V_final, same shape throughout.
template <typename S>
Var<S> condition_encode(Var<S> node_embed, const MatX<S>& P,
                        const BoundParams<S>& bp, const CondEncConfig& cfg,
                        Eigen::Index n_nodes, Eigen::Index n_times) {
  auto v_temp = temporal_conv(node_embed, bp["condenc.conv.kernel"], n_nodes,
                              n_times);
  auto v_spatial = gcn_layer(v_temp, P, bp["condenc.gcn.H"], n_nodes, n_times,
                             cfg.activation);
  return lstm_aggregate(v_spatial, bp["condenc.lstm.Wx"],
                        bp["condenc.lstm.Wh"], bp["condenc.lstm.b"], n_nodes,
                        n_times);
}

// Rows of V_final serving as a sample's decoder memory: the assigned node
// first, then its out-neighbors in ascending node order, all at the sample's
// time step.
inline std::vector<int> condition_row_indices(const ConditionGraph& g,
                                              double lon, double lat,
                                              int t_index,
                                              Eigen::Index n_times) {
  require(t_index >= 0 && t_index < n_times, ErrorCode::IndexOutOfRange,
          "condition_row_indices: t_index " + std::to_string(t_index) +
              " outside [0, " + std::to_string(n_times) + ")");
  const int node = assign_node(g, lon, lat);
  const Eigen::Index base = Eigen::Index(t_index) * g.n_nodes();
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(1 + g.k_nn));
  rows.push_back(static_cast<int>(base) + node);
  for (Eigen::Index j = 0; j < g.n_nodes(); ++j)
    if (g.adjacency(node, j) != 0)
      rows.push_back(static_cast<int>(base + j));
  return rows;
}

}  // namespace geohet
