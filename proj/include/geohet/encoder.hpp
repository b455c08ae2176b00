#pragma once

// Window encoder: input embedding with rotary positions, then a stack of
// dual-attention blocks.  Each block runs linear self-attention along the
// time axis, then along the feature axis (on per-sample transposed stacks),
// then a pointwise feed-forward layer — all with residual connections.
//
// Everything here is batched: B sample windows are stacked row-wise into a
// single [B*L x d] matrix so each layer is one big GEMM.

#include <string>
#include <vector>

#include "geohet/common.hpp"
#include "geohet/params.hpp"
#include "geohet/tape.hpp"

namespace geohet {

struct EncoderConfig {
  Eigen::Index window_len = 8;    // L: rows per sample window
  Eigen::Index feature_dim = 6;   // D: input channels
  Eigen::Index d_model = 32;      // embedding width, must be even (rotary)
  Eigen::Index n_blocks = 2;
  Eigen::Index ffn_hidden = 64;
  double eps = 1e-6;  // linear-attention denominator guard

  void validate() const {
    require(window_len >= 1, ErrorCode::ConfigError, "window_len must be >= 1");
    require(feature_dim >= 1, ErrorCode::ConfigError,
            "feature_dim must be >= 1");
    require(d_model >= 2 && d_model % 2 == 0, ErrorCode::ConfigError,
            "d_model must be an even number >= 2");
    require(n_blocks >= 0, ErrorCode::ConfigError, "n_blocks must be >= 0");
    require(ffn_hidden >= 1, ErrorCode::ConfigError,
            "ffn_hidden must be >= 1");
    require(eps > 0.0, ErrorCode::ConfigError,
            "attention eps must be positive");
  }
};

inline std::string encoder_block_prefix(int i) {
  return "encoder.block" + std::to_string(i) + ".";
}

inline void add_encoder_params(Params& p, const EncoderConfig& cfg,
                               std::mt19937_64& rng) {
  cfg.validate();
  p.add("encoder.embed.W",
        xavier_uniform(cfg.feature_dim, cfg.d_model, rng));
  for (int i = 0; i < cfg.n_blocks; ++i) {
    const std::string b = encoder_block_prefix(i);
    p.add(b + "temporal.Wq", xavier_uniform(cfg.d_model, cfg.d_model, rng));
    p.add(b + "temporal.Wk", xavier_uniform(cfg.d_model, cfg.d_model, rng));
    p.add(b + "temporal.Wv", xavier_uniform(cfg.d_model, cfg.d_model, rng));
    p.add(b + "feature.Wq", xavier_uniform(cfg.window_len, cfg.window_len, rng));
    p.add(b + "feature.Wk", xavier_uniform(cfg.window_len, cfg.window_len, rng));
    p.add(b + "feature.Wv", xavier_uniform(cfg.window_len, cfg.window_len, rng));
    p.add(b + "ffn.W1", xavier_uniform(cfg.d_model, cfg.ffn_hidden, rng));
    p.add(b + "ffn.b1", Mat::Zero(1, cfg.ffn_hidden));
    p.add(b + "ffn.W2", xavier_uniform(cfg.ffn_hidden, cfg.d_model, rng));
    p.add(b + "ffn.b2", Mat::Zero(1, cfg.d_model));
  }
}

// Linear self-attention over each L-row block of the stack: one fused pass,
// feature map phi(x) = elu(x) + 1 keeps every denominator positive.
template <typename S>
Var<S> linear_self_attention(Var<S> x, Var<S> Wq, Var<S> Wk, Var<S> Wv,
                             Eigen::Index block, double eps) {
  auto q = elu1(matmul(x, Wq));
  auto k = elu1(matmul(x, Wk));
  auto v = matmul(x, Wv);
  return linear_attention_core(q, k, v, block, eps);
}

// X is [B*L x D]: B windows of L steps each.  Projects into d_model and
// rotates each row by its within-window position.
template <typename S>
Var<S> embed_input(Var<S> X, const BoundParams<S>& bp,
                   const EncoderConfig& cfg) {
  require(X.val().cols() == cfg.feature_dim, ErrorCode::ShapeMismatch,
          "embed_input: feature column count mismatch");
  require(X.val().rows() % cfg.window_len == 0, ErrorCode::ShapeMismatch,
          "embed_input: row count is not a multiple of window_len");
  auto h = matmul(X, bp["encoder.embed.W"]);
  std::vector<double> pos(static_cast<std::size_t>(X.val().rows()));
  for (std::size_t r = 0; r < pos.size(); ++r)
    pos[r] = double(r % static_cast<std::size_t>(cfg.window_len));
  return rope_rows(h, std::move(pos));
}

// One dual-attention block over a [B*L x d_model] stack.
template <typename S>
Var<S> dual_attention_block(Var<S> h, const BoundParams<S>& bp,
                            const EncoderConfig& cfg, int block_index) {
  const std::string b = encoder_block_prefix(block_index);

  // time axis: rows are steps, channels are d_model
  auto att_t = linear_self_attention(h, bp[b + "temporal.Wq"],
                                     bp[b + "temporal.Wk"],
                                     bp[b + "temporal.Wv"],
                                     cfg.window_len, cfg.eps);
  h = add(h, att_t);

  // feature axis: transpose each sample so rows are channels, steps mix
  auto ht = stack_transpose(h, cfg.window_len);
  auto att_f = linear_self_attention(ht, bp[b + "feature.Wq"],
                                     bp[b + "feature.Wk"],
                                     bp[b + "feature.Wv"],
                                     cfg.d_model, cfg.eps);
  ht = add(ht, att_f);
  h = stack_transpose(ht, cfg.d_model);

  // pointwise feed-forward
  auto f = elu1(add_rowvec(matmul(h, bp[b + "ffn.W1"]), bp[b + "ffn.b1"]));
  f = add_rowvec(matmul(f, bp[b + "ffn.W2"]), bp[b + "ffn.b2"]);
  return add(h, f);
}

// Full encoder: [B*L x D] windows -> [B*L x d_model] tokens.
template <typename S>
Var<S> encode(Var<S> X, const BoundParams<S>& bp, const EncoderConfig& cfg) {
  auto h = embed_input(X, bp, cfg);
  for (int i = 0; i < cfg.n_blocks; ++i)
    h = dual_attention_block(h, bp, cfg, i);
  return h;
}

}  // namespace geohet
