#pragma once

// Dual-branch decoder.  Each branch cross-attends encoder tokens against the
// sample's condition rows, refines with a feed-forward layer, mean-pools the
// tokens and applies a linear head:
//   target branch  -> scalar prediction
//   weights branch -> one signed weight per input feature, read out linearly
//                     against the window-mean features
//
// Cross-attention keeps the roles fixed: queries and keys come from the data
// tokens (keys gated by a condition summary), the value is a pooled
// projection of the condition rows broadcast across the token axis.

#include <string>
#include <vector>

#include "geohet/common.hpp"
#include "geohet/params.hpp"
#include "geohet/tape.hpp"

namespace geohet {

struct DecoderConfig {
  Eigen::Index d_model = 32;
  Eigen::Index d_cond = 16;
  Eigen::Index feature_dim = 6;  // M: weights emitted per sample
  Eigen::Index ffn_hidden = 64;
  bool intercept = false;  // extra readout constant for the weights branch
  double w_dep = 1.0;      // loss weight, target branch
  double w_interp = 1.0;   // loss weight, readout branch

  void validate() const {
    require(d_model >= 1, ErrorCode::ConfigError, "d_model must be >= 1");
    require(d_cond >= 1, ErrorCode::ConfigError, "d_cond must be >= 1");
    require(feature_dim >= 1, ErrorCode::ConfigError,
            "feature_dim must be >= 1");
    require(ffn_hidden >= 1, ErrorCode::ConfigError, "ffn_hidden must be >= 1");
    require(w_dep >= 0.0 && w_interp >= 0.0, ErrorCode::ConfigError,
            "loss weights must be non-negative");
  }
};

inline void add_decoder_branch_params(Params& p, const std::string& prefix,
                                      const DecoderConfig& cfg,
                                      Eigen::Index head_out,
                                      std::mt19937_64& rng) {
  p.add(prefix + ".Wq", xavier_uniform(cfg.d_model, cfg.d_model, rng));
  p.add(prefix + ".Wk", xavier_uniform(cfg.d_model, cfg.d_model, rng));
  p.add(prefix + ".Wg", xavier_uniform(cfg.d_cond, cfg.d_model, rng));
  p.add(prefix + ".Wv", xavier_uniform(cfg.d_cond, cfg.d_model, rng));
  p.add(prefix + ".ffn.W1", xavier_uniform(cfg.d_model, cfg.ffn_hidden, rng));
  p.add(prefix + ".ffn.b1", Mat::Zero(1, cfg.ffn_hidden));
  p.add(prefix + ".ffn.W2", xavier_uniform(cfg.ffn_hidden, cfg.d_model, rng));
  p.add(prefix + ".ffn.b2", Mat::Zero(1, cfg.d_model));
  p.add(prefix + ".head.W", xavier_uniform(cfg.d_model, head_out, rng));
  p.add(prefix + ".head.b", Mat::Zero(1, head_out));
}

inline void add_decoder_params(Params& p, const DecoderConfig& cfg,
                               std::mt19937_64& rng) {
  cfg.validate();
  add_decoder_branch_params(p, "decoder.target", cfg, 1, rng);
  const Eigen::Index w_out = cfg.feature_dim + (cfg.intercept ? 1 : 0);
  add_decoder_branch_params(p, "decoder.interp", cfg, w_out, rng);
}

// One branch over a [B*L x d_model] token stack and [B*m x d_cond] memory
// stack; returns the pooled head output [B x head_out].
template <typename S>
Var<S> decoder_branch(Var<S> tokens, Var<S> memory, const BoundParams<S>& bp,
                      const std::string& prefix, Eigen::Index tokens_per_sample,
                      Eigen::Index memory_per_sample) {
  require(memory_per_sample >= 1, ErrorCode::ShapeMismatch,
          "decoder_branch: empty condition memory");
  const Eigen::Index L = tokens_per_sample;
  auto mem_mean = block_mean_rows(memory, memory_per_sample);  // B x d_cond
  auto q = matmul(tokens, bp[prefix + ".Wq"]);
  auto gate = sigmoid(matmul(mem_mean, bp[prefix + ".Wg"]));  // B x d_model
  auto k = hadamard(matmul(tokens, bp[prefix + ".Wk"]),
                    repeat_rows_per_block(gate, L));
  auto vrow = matmul(mem_mean, bp[prefix + ".Wv"]);  // B x d_model
  auto att = cross_attention_broadcast(q, k, vrow, L);
  auto h = add(tokens, att);
  auto f = elu1(add_rowvec(matmul(h, bp[prefix + ".ffn.W1"]),
                           bp[prefix + ".ffn.b1"]));
  f = add_rowvec(matmul(f, bp[prefix + ".ffn.W2"]), bp[prefix + ".ffn.b2"]);
  h = add(h, f);
  auto pooled = block_mean_rows(h, L);  // B x d_model
  return add_rowvec(matmul(pooled, bp[prefix + ".head.W"]),
                    bp[prefix + ".head.b"]);
}

// Batched decoder output on the tape.
template <typename S>
struct DecodeOut {
  Var<S> y_hat;         // B x 1
  Var<S> weights;       // B x M, the signed per-feature readout weights
  Var<S> intercept;     // B x 1 readout constant (zeros when disabled)
  Var<S> y_hat_interp;  // B x 1 = weights . xbar (+ intercept)
};

// tokens [B*L x d_model], memory [B*m x d_cond], xbar [B x M] window-mean
// features (not differentiated through).
template <typename S>
DecodeOut<S> decode(Var<S> tokens, Var<S> memory, const MatX<S>& xbar,
                    const BoundParams<S>& bp, const DecoderConfig& cfg,
                    Eigen::Index tokens_per_sample,
                    Eigen::Index memory_per_sample) {
  Tape<S>& t = *tokens.tape;
  const Eigen::Index B = tokens.rows() / tokens_per_sample;
  require(xbar.rows() == B && xbar.cols() == cfg.feature_dim,
          ErrorCode::ShapeMismatch, "decode: xbar must be B x feature_dim");

  DecodeOut<S> out;
  out.y_hat = decoder_branch(tokens, memory, bp, "decoder.target",
                             tokens_per_sample, memory_per_sample);
  auto raw = decoder_branch(tokens, memory, bp, "decoder.interp",
                            tokens_per_sample, memory_per_sample);
  if (cfg.intercept) {
    out.weights = block_cols(raw, 0, cfg.feature_dim);
    out.intercept = block_cols(raw, cfg.feature_dim, 1);
  } else {
    out.weights = raw;
    out.intercept = t.constant(MatX<S>::Zero(B, 1));
  }
  auto readout = matmul(hadamard(out.weights, t.constant(xbar)),
                        t.constant(MatX<S>::Ones(cfg.feature_dim, 1)));
  out.y_hat_interp = cfg.intercept ? add(readout, out.intercept) : readout;
  return out;
}

// Joint loss: mean squared error on each branch, weighted sum.
template <typename S>
struct LossVars {
  Var<S> dep;     // target-branch MSE
  Var<S> interp;  // readout-branch MSE
  Var<S> total;
};

template <typename S>
Var<S> mse(Var<S> pred, const MatX<S>& target) {
  Tape<S>& t = *pred.tape;
  require(pred.rows() == target.rows() && pred.cols() == target.cols(),
          ErrorCode::ShapeMismatch, "mse: prediction/target shape mismatch");
  require(target.size() > 0, ErrorCode::ShapeMismatch, "mse: empty batch");
  auto d = sub(pred, t.constant(target));
  return mean_all(hadamard(d, d));
}

template <typename S>
LossVars<S> loss(Var<S> y_hat, Var<S> y_hat_interp, const MatX<S>& target,
                 const DecoderConfig& cfg) {
  LossVars<S> l;
  l.dep = mse(y_hat, target);
  l.interp = mse(y_hat_interp, target);
  l.total = add(scale(l.dep, S(cfg.w_dep)), scale(l.interp, S(cfg.w_interp)));
  return l;
}

// Host-side view of one sample's decoder output.  The stored y_hat_interp is
// definitionally weights . xbar (+ intercept), computed with the same dot
// product eval and export use.
struct Prediction {
  double y_hat = 0.0;
  Vec weights;
  double intercept = 0.0;
  double y_hat_interp = 0.0;
};

inline double readout_value(const Vec& weights, const Vec& xbar,
                            double intercept) {
  return weights.dot(xbar) + intercept;
}

template <typename S>
std::vector<Prediction> predictions_from(const DecodeOut<S>& out,
                                         const MatX<S>& xbar) {
  const Eigen::Index B = out.y_hat.rows();
  std::vector<Prediction> ps(static_cast<std::size_t>(B));
  for (Eigen::Index b = 0; b < B; ++b) {
    Prediction& p = ps[static_cast<std::size_t>(b)];
    p.y_hat = out.y_hat.val()(b, 0);
    p.weights = out.weights.val().row(b).transpose();
    p.intercept = out.intercept.val()(b, 0);
    p.y_hat_interp =
        readout_value(p.weights, xbar.row(b).transpose(), p.intercept);
  }
  return ps;
}

}  // namespace geohet
