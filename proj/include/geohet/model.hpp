#pragma once

// Whole-model assembly: one tape carries condition encoding, window encoding
// and dual-branch decoding for a batch, so backward() yields exact joint
// gradients for every parameter group in a single pass.

#include <string>
#include <vector>

#include "geohet/common.hpp"
#include "geohet/condenc.hpp"
#include "geohet/decoder.hpp"
#include "geohet/encoder.hpp"
#include "geohet/geodata.hpp"
#include "geohet/params.hpp"
#include "geohet/stcg.hpp"
#include "geohet/tape.hpp"

namespace geohet {

struct ModelConfig {
  EncoderConfig encoder;
  CondEncConfig condenc;
  DecoderConfig decoder;
  // graph construction
  int k_clusters = 16;
  KernelParams kernel;
  WalkParams walks;

  void validate() const {
    encoder.validate();
    condenc.validate();
    decoder.validate();
    require(k_clusters >= 1, ErrorCode::ConfigError, "k_clusters must be >= 1");
    require(encoder.d_model == decoder.d_model, ErrorCode::ConfigError,
            "encoder and decoder d_model must agree");
    require(condenc.d_cond == decoder.d_cond, ErrorCode::ConfigError,
            "condenc and decoder d_cond must agree");
    require(encoder.feature_dim == decoder.feature_dim, ErrorCode::ConfigError,
            "encoder and decoder feature_dim must agree");
    require(condenc.d_cond % 2 == 0, ErrorCode::ConfigError,
            "d_cond must be even (rotary time encoding)");
  }
};

// Parameter groups in canonical order.  The condition-node embeddings start
// from the graph's walk embeddings rotated by time step.
inline Params init_model_params(const ModelConfig& cfg,
                                const ConditionGraph& graph,
                                Eigen::Index n_times, std::uint64_t seed) {
  cfg.validate();
  require(graph.d_cond() == cfg.condenc.d_cond, ErrorCode::ConfigError,
          "graph embedding width must equal d_cond");
  std::mt19937_64 rng(seed);
  Params p;
  p.add("stcg.node_embed",
        init_node_embed(graph, static_cast<int>(n_times)));
  add_encoder_params(p, cfg.encoder, rng);
  add_condenc_params(p, cfg.condenc, rng);
  add_decoder_params(p, cfg.decoder, rng);
  return p;
}

// Per-dataset precomputation shared by every batch: decoder memory rows,
// window-mean features and targets.
struct PreparedData {
  std::vector<std::vector<int>> mem_rows;  // per sample, into V_final
  Mat xbar;                                // n x D window means
  Vec targets;                             // n
  Eigen::Index memory_per_sample = 0;
  Eigen::Index n_times = 0;
};

inline PreparedData prepare_data(const Dataset& ds, const ConditionGraph& g,
                                 Eigen::Index n_times) {
  PreparedData prep;
  prep.n_times = n_times;
  prep.memory_per_sample = 1 + g.k_nn;
  prep.xbar = window_means(ds);
  prep.targets = targets(ds);
  prep.mem_rows.reserve(ds.size());
  for (const Sample& s : ds.samples) {
    prep.mem_rows.push_back(
        condition_row_indices(g, s.lon, s.lat, s.t_index, n_times));
    require(Eigen::Index(prep.mem_rows.back().size()) ==
                prep.memory_per_sample,
            ErrorCode::ShapeMismatch,
            "prepare_data: ragged condition memory (irregular graph degree)");
  }
  return prep;
}

// One batch, assembled host-side.
struct Batch {
  Mat features;               // B*L x D stacked windows
  Mat xbar;                   // B x D
  Mat targets;                // B x 1
  std::vector<int> mem_rows;  // B*m gather indices into V_final
  Eigen::Index n_samples = 0;
};

inline Batch make_batch(const Dataset& ds, const PreparedData& prep,
                        const std::vector<int>& idxs) {
  require(!idxs.empty(), ErrorCode::ConfigError, "make_batch: empty batch");
  const Eigen::Index B = Eigen::Index(idxs.size());
  const Eigen::Index L = ds.window_len(), D = ds.feature_dim();
  Batch b;
  b.n_samples = B;
  b.features.resize(B * L, D);
  b.xbar.resize(B, D);
  b.targets.resize(B, 1);
  b.mem_rows.reserve(std::size_t(B) * std::size_t(prep.memory_per_sample));
  for (Eigen::Index i = 0; i < B; ++i) {
    const int s = idxs[std::size_t(i)];
    require(s >= 0 && std::size_t(s) < ds.size(), ErrorCode::IndexOutOfRange,
            "make_batch: sample index out of range");
    b.features.middleRows(i * L, L) = ds.samples[std::size_t(s)].features;
    b.xbar.row(i) = prep.xbar.row(s);
    b.targets(i, 0) = prep.targets(s);
    const auto& rows = prep.mem_rows[std::size_t(s)];
    b.mem_rows.insert(b.mem_rows.end(), rows.begin(), rows.end());
  }
  return b;
}

struct ForwardOut {
  DecodeOut<double> decode;
  LossVars<double> loss;
};

// Full forward pass on one tape.  P is the fixed propagation matrix of the
// graph; n_nodes/n_times describe the condition tensor layout.
inline ForwardOut forward_batch(Tape<double>& t, const BoundParams<double>& bp,
                                const ModelConfig& cfg, const Mat& P,
                                Eigen::Index n_nodes, Eigen::Index n_times,
                                const Batch& batch,
                                Eigen::Index memory_per_sample) {
  auto v_final = condition_encode(bp["stcg.node_embed"], P, bp, cfg.condenc,
                                  n_nodes, n_times);
  auto memory = gather_rows(v_final, batch.mem_rows);
  auto tokens = encode(t.constant(batch.features), bp, cfg.encoder);
  ForwardOut out;
  out.decode = decode(tokens, memory, batch.xbar, bp, cfg.decoder,
                      cfg.encoder.window_len, memory_per_sample);
  out.loss =
      loss(out.decode.y_hat, out.decode.y_hat_interp, batch.targets,
           cfg.decoder);
  return out;
}

// Forward-only evaluation over arbitrary sample indices, in chunks.  Returns
// per-sample predictions aligned with `idxs`.
inline std::vector<Prediction> evaluate(const Params& params,
                                        const ModelConfig& cfg, const Mat& P,
                                        Eigen::Index n_nodes,
                                        Eigen::Index n_times,
                                        const Dataset& ds,
                                        const PreparedData& prep,
                                        const std::vector<int>& idxs,
                                        Eigen::Index chunk = 512) {
  std::vector<Prediction> preds;
  preds.reserve(idxs.size());
  for (std::size_t at = 0; at < idxs.size(); at += std::size_t(chunk)) {
    const std::size_t n = std::min(std::size_t(chunk), idxs.size() - at);
    std::vector<int> part(idxs.begin() + long(at), idxs.begin() + long(at + n));
    Batch b = make_batch(ds, prep, part);
    Tape<double> t(false);
    auto bp = bind(t, params);
    auto out = forward_batch(t, bp, cfg, P, n_nodes, n_times, b,
                             prep.memory_per_sample);
    auto chunk_preds = predictions_from(out.decode, b.xbar);
    preds.insert(preds.end(), chunk_preds.begin(), chunk_preds.end());
  }
  return preds;
}

// Metrics of the target head over the given samples.
inline Metrics eval_metrics(const Params& params, const ModelConfig& cfg,
                            const Mat& P, Eigen::Index n_nodes,
                            Eigen::Index n_times, const Dataset& ds,
                            const PreparedData& prep,
                            const std::vector<int>& idxs) {
  auto preds = evaluate(params, cfg, P, n_nodes, n_times, ds, prep, idxs);
  Vec y(Eigen::Index(idxs.size())), yh(Eigen::Index(idxs.size()));
  for (std::size_t i = 0; i < idxs.size(); ++i) {
    y(Eigen::Index(i)) = prep.targets(idxs[i]);
    yh(Eigen::Index(i)) = preds[i].y_hat;
  }
  return compute_metrics(y, yh);
}

}  // namespace geohet
