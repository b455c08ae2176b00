#pragma once

// Reverse-mode autodiff over dense Eigen matrices.
//
// A Tape owns a flat vector of nodes created in topological (program) order.
// Each op records a closure that scatters the node's adjoint into its inputs'
// adjoints; backward() walks the nodes in reverse creation order.  Adjoint
// buffers are allocated lazily, so subgraphs that never reach the seeded node
// cost nothing on the way back.
//
// Every op checks shapes up front and throws ErrorCode::ShapeMismatch rather
// than letting Eigen assert.  The tape also keeps a rough flop counter (2mnk
// per matmul and similar) so tests can assert cost scaling without timers.

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "geohet/common.hpp"

namespace geohet::ad {

template <class S>
class Tape;

// Lightweight handle: tape pointer + node index.  Copyable, trivially small.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const MatX<S>& val() const { return tape->value(id); }
  const MatX<S>& grad() const { return tape->grad(id); }
  bool grad_touched() const { return tape->grad_touched(id); }
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
};

template <class S>
class Tape {
 public:
  using M = MatX<S>;

  struct Node {
    M value;
    M grad;  // 0x0 until first touched during backward
    bool requires_grad = false;
    std::function<void(Tape&)> backfn;  // empty for leaves/constants
  };

  // When false, ops skip recording backfns and nothing requires grad:
  // forward-only evaluation through the same code path.
  bool recording = true;

  std::vector<Node> nodes;
  std::uint64_t flops = 0;

  void reserve(std::size_t n) { nodes.reserve(n); }
  void clear() {
    nodes.clear();
    flops = 0;
  }
  std::size_t size() const { return nodes.size(); }

  const M& value(int id) const { return nodes[id].value; }

  // Adjoint buffer, allocated as zeros on first touch.
  M& grad(int id) {
    Node& n = nodes[id];
    if (n.grad.size() == 0) n.grad = M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool grad_touched(int id) const { return nodes[id].grad.size() != 0; }
  bool wants_grad(int id) const { return nodes[id].requires_grad; }

  int next_id() const { return static_cast<int>(nodes.size()); }

  Var<S> constant(M v) {
    nodes.push_back(Node{std::move(v), M(), false, nullptr});
    return {this, static_cast<int>(nodes.size()) - 1};
  }

  // Differentiable input (parameter or upstream-stage activation).
  Var<S> leaf(M v) {
    nodes.push_back(Node{std::move(v), M(), recording, nullptr});
    return {this, static_cast<int>(nodes.size()) - 1};
  }

  Var<S> make(M v, bool rg, std::function<void(Tape&)> fn) {
    if (!recording) rg = false;
    nodes.push_back(
        Node{std::move(v), M(), rg, (recording && rg) ? std::move(fn) : nullptr});
    return {this, static_cast<int>(nodes.size()) - 1};
  }

  // Seed the adjoint of `root` with `seed` and propagate back to the leaves.
  // Callable multiple times per tape; adjoints accumulate.
  void backward_seed(Var<S> root, const M& seed) {
    require(root.tape == this, ErrorCode::ShapeMismatch,
            "backward: var from a different tape");
    const M& v = nodes[root.id].value;
    require(seed.rows() == v.rows() && seed.cols() == v.cols(),
            ErrorCode::ShapeMismatch, "backward: seed shape mismatch");
    grad(root.id) += seed;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes[i];
      if (n.backfn && n.grad.size() != 0) n.backfn(*this);
    }
  }

  // Convenience for scalar (1x1) outputs.
  void backward(Var<S> root, S seed = S(1)) {
    require(nodes[root.id].value.size() == 1, ErrorCode::ShapeMismatch,
            "backward: scalar seed on non-scalar node");
    M s(1, 1);
    s(0, 0) = seed;
    backward_seed(root, s);
  }
};

namespace detail {
template <class S>
inline Tape<S>& same_tape(Var<S> a, Var<S> b, const char* op) {
  require(a.tape != nullptr && a.tape == b.tape, ErrorCode::ShapeMismatch,
          std::string(op) + ": vars from different tapes");
  return *a.tape;
}
template <class S>
inline bool want(Tape<S>& t, int id) {
  return t.nodes[id].requires_grad;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "add");
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          ErrorCode::ShapeMismatch, "add: shape mismatch");
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const int ai = a.id, bi = b.id, out = t.next_id();
  const bool rg = detail::want(t, ai) || detail::want(t, bi);
  return t.make(a.val() + b.val(), rg, [ai, bi, out](Tape<S>& tp) {
    const MatX<S>& g = tp.nodes[out].grad;
    if (tp.wants_grad(ai)) tp.grad(ai) += g;
    if (tp.wants_grad(bi)) tp.grad(bi) += g;
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "sub");
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          ErrorCode::ShapeMismatch, "sub: shape mismatch");
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const int ai = a.id, bi = b.id, out = t.next_id();
  const bool rg = detail::want(t, ai) || detail::want(t, bi);
  return t.make(a.val() - b.val(), rg, [ai, bi, out](Tape<S>& tp) {
    const MatX<S>& g = tp.nodes[out].grad;
    if (tp.wants_grad(ai)) tp.grad(ai) += g;
    if (tp.wants_grad(bi)) tp.grad(bi) -= g;
  });
}

template <class S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "hadamard");
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          ErrorCode::ShapeMismatch, "hadamard: shape mismatch");
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const int ai = a.id, bi = b.id, out = t.next_id();
  const bool rg = detail::want(t, ai) || detail::want(t, bi);
  return t.make(a.val().cwiseProduct(b.val()), rg, [ai, bi, out](Tape<S>& tp) {
    const MatX<S>& g = tp.nodes[out].grad;
    if (tp.wants_grad(ai))
      tp.grad(ai) += g.cwiseProduct(tp.value(bi));
    if (tp.wants_grad(bi))
      tp.grad(bi) += g.cwiseProduct(tp.value(ai));
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const int ai = a.id, out = t.next_id();
  return t.make(a.val() * c, detail::want(t, ai), [ai, out, c](Tape<S>& tp) {
    if (tp.wants_grad(ai)) tp.grad(ai) += tp.nodes[out].grad * c;
  });
}

template <class S>
Var<S> add_scalar(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const int ai = a.id, out = t.next_id();
  return t.make(a.val().array() + c, detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (tp.wants_grad(ai)) tp.grad(ai) += tp.nodes[out].grad;
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "matmul");
  require(a.cols() == b.rows(), ErrorCode::ShapeMismatch,
          "matmul: inner dimensions disagree");
  t.flops += 2ull * a.rows() * a.cols() * b.cols();
  const int ai = a.id, bi = b.id, out = t.next_id();
  const bool rg = detail::want(t, ai) || detail::want(t, bi);
  MatX<S> v(a.rows(), b.cols());
  v.noalias() = a.val() * b.val();
  return t.make(std::move(v), rg, [ai, bi, out](Tape<S>& tp) {
    const MatX<S>& g = tp.nodes[out].grad;
    if (tp.wants_grad(ai)) tp.grad(ai).noalias() += g * tp.value(bi).transpose();
    if (tp.wants_grad(bi)) tp.grad(bi).noalias() += tp.value(ai).transpose() * g;
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ai = a.id, out = t.next_id();
  return t.make(a.val().transpose(), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (tp.wants_grad(ai)) tp.grad(ai) += tp.nodes[out].grad.transpose();
  });
}

// ---------------------------------------------------------------------------
// slicing / stacking
// ---------------------------------------------------------------------------

template <class S>
Var<S> block_rows(Var<S> a, Eigen::Index r0, Eigen::Index n) {
  Tape<S>& t = *a.tape;
  require(r0 >= 0 && n >= 0 && r0 + n <= a.rows(), ErrorCode::IndexOutOfRange,
          "block_rows: range outside matrix");
  const int ai = a.id, out = t.next_id();
  return t.make(a.val().middleRows(r0, n), detail::want(t, ai),
                [ai, out, r0, n](Tape<S>& tp) {
                  if (tp.wants_grad(ai))
                    tp.grad(ai).middleRows(r0, n) += tp.nodes[out].grad;
                });
}

template <class S>
Var<S> vstack(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "vstack: no parts");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "vstack");
    require(p.cols() == cols, ErrorCode::ShapeMismatch,
            "vstack: column count mismatch");
    rows += p.rows();
    rg = rg || detail::want(t, p.id);
  }
  MatX<S> v(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offs, lens;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.val();
    ids.push_back(p.id);
    offs.push_back(at);
    lens.push_back(p.rows());
    at += p.rows();
  }
  const int out = t.next_id();
  return t.make(std::move(v), rg, [ids, offs, lens, out](Tape<S>& tp) {
    const MatX<S>& g = tp.nodes[out].grad;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (tp.wants_grad(ids[i]))
        tp.grad(ids[i]) += g.middleRows(offs[i], lens[i]);
  });
}

// out.row(r) = a.row(idx[r]); duplicate indices accumulate on backward.
template <class S>
Var<S> gather_rows(Var<S> a, std::vector<int> idx) {
  Tape<S>& t = *a.tape;
  MatX<S> v(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] >= 0 && idx[r] < a.rows(), ErrorCode::IndexOutOfRange,
            "gather_rows: row index out of range");
    v.row(static_cast<Eigen::Index>(r)) = a.val().row(idx[r]);
  }
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai),
                [ai, out, idx = std::move(idx)](Tape<S>& tp) {
                  if (!tp.wants_grad(ai)) return;
                  const MatX<S>& g = tp.nodes[out].grad;
                  MatX<S>& ga = tp.grad(ai);
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
                });
}

template <class S>
Var<S> block_cols(Var<S> a, Eigen::Index c0, Eigen::Index n) {
  Tape<S>& t = *a.tape;
  require(c0 >= 0 && n >= 0 && c0 + n <= a.cols(), ErrorCode::IndexOutOfRange,
          "block_cols: range outside matrix");
  const int ai = a.id, out = t.next_id();
  return t.make(a.val().middleCols(c0, n), detail::want(t, ai),
                [ai, out, c0, n](Tape<S>& tp) {
                  if (tp.wants_grad(ai))
                    tp.grad(ai).middleCols(c0, n) += tp.nodes[out].grad;
                });
}

// Per-sample-block transpose of a stacked matrix: input holds B blocks of
// `rows` x cols stacked vertically; output holds the B transposed blocks
// (cols x rows) stacked vertically.  Applying it twice is the identity.
template <class S>
Var<S> stack_transpose(Var<S> a, Eigen::Index rows) {
  Tape<S>& t = *a.tape;
  require(rows >= 1 && a.rows() % rows == 0, ErrorCode::ShapeMismatch,
          "stack_transpose: rows does not divide the stack");
  const Eigen::Index nb = a.rows() / rows, cols = a.cols();
  MatX<S> v(nb * cols, rows);
  for (Eigen::Index b = 0; b < nb; ++b)
    v.middleRows(b * cols, cols) = a.val().middleRows(b * rows, rows).transpose();
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai),
                [ai, out, rows, cols, nb](Tape<S>& tp) {
                  if (!tp.wants_grad(ai)) return;
                  const MatX<S>& g = tp.nodes[out].grad;
                  for (Eigen::Index b = 0; b < nb; ++b)
                    tp.grad(ai).middleRows(b * rows, rows) +=
                        g.middleRows(b * cols, cols).transpose();
                });
}

namespace detail {
// Column sums of a row block, accumulated row by row so the result is
// bitwise independent of where the block sits in memory (vectorized column
// reductions peel differently at different alignments).
template <class S>
Eigen::Matrix<S, 1, Eigen::Dynamic> block_colsum(const MatX<S>& m,
                                                 Eigen::Index r0,
                                                 Eigen::Index n) {
  Eigen::Matrix<S, 1, Eigen::Dynamic> acc =
      Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(m.cols());
  for (Eigen::Index r = 0; r < n; ++r) acc += m.row(r0 + r);
  return acc;
}
}  // namespace detail

// Mean over each consecutive block of `block` rows: (B*block) x C -> B x C.
template <class S>
Var<S> block_mean_rows(Var<S> a, Eigen::Index block) {
  Tape<S>& t = *a.tape;
  require(block >= 1 && a.rows() % block == 0, ErrorCode::ShapeMismatch,
          "block_mean_rows: block does not divide rows");
  const Eigen::Index nb = a.rows() / block;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  MatX<S> v(nb, a.cols());
  for (Eigen::Index b = 0; b < nb; ++b)
    v.row(b) = detail::block_colsum(a.val(), b * block, block) / S(block);
  const S inv = S(1) / static_cast<S>(block);
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai),
                [ai, out, block, nb, inv](Tape<S>& tp) {
                  if (!tp.wants_grad(ai)) return;
                  const MatX<S>& g = tp.nodes[out].grad;
                  for (Eigen::Index b = 0; b < nb; ++b)
                    tp.grad(ai).middleRows(b * block, block).rowwise() +=
                        Eigen::Matrix<S, 1, Eigen::Dynamic>(g.row(b) * inv);
                });
}

// Each row repeated `times` consecutive times: B x C -> (B*times) x C.
template <class S>
Var<S> repeat_rows_per_block(Var<S> a, Eigen::Index times) {
  Tape<S>& t = *a.tape;
  require(times >= 1, ErrorCode::ShapeMismatch, "repeat_rows_per_block: times < 1");
  const Eigen::Index nb = a.rows();
  MatX<S> v(nb * times, a.cols());
  for (Eigen::Index b = 0; b < nb; ++b)
    v.middleRows(b * times, times).rowwise() =
        Eigen::Matrix<S, 1, Eigen::Dynamic>(a.val().row(b));
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai),
                [ai, out, times, nb](Tape<S>& tp) {
                  if (!tp.wants_grad(ai)) return;
                  const MatX<S>& g = tp.nodes[out].grad;
                  for (Eigen::Index b = 0; b < nb; ++b)
                    tp.grad(ai).row(b) +=
                        g.middleRows(b * times, times).colwise().sum();
                });
}

// ---------------------------------------------------------------------------
// reductions / broadcasting
// ---------------------------------------------------------------------------

template <class S>
Var<S> colsum(Var<S> a) {  // N x C -> 1 x C
  Tape<S>& t = *a.tape;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const int ai = a.id, out = t.next_id();
  return t.make(a.val().colwise().sum(), detail::want(t, ai),
                [ai, out](Tape<S>& tp) {
                  if (tp.wants_grad(ai))
                    tp.grad(ai).rowwise() +=
                        Eigen::Matrix<S, 1, Eigen::Dynamic>(tp.nodes[out].grad.row(0));
                });
}

template <class S>
Var<S> mean_rows(Var<S> a) {  // N x C -> 1 x C
  Tape<S>& t = *a.tape;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const S inv = S(1) / static_cast<S>(a.rows());
  const int ai = a.id, out = t.next_id();
  return t.make(a.val().colwise().mean(), detail::want(t, ai),
                [ai, out, inv](Tape<S>& tp) {
                  if (tp.wants_grad(ai))
                    tp.grad(ai).rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(
                        tp.nodes[out].grad.row(0) * inv);
                });
}

template <class S>
Var<S> sum_all(Var<S> a) {  // -> 1 x 1
  Tape<S>& t = *a.tape;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  MatX<S> v(1, 1);
  v(0, 0) = a.val().sum();
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (tp.wants_grad(ai))
      tp.grad(ai).array() += tp.nodes[out].grad(0, 0);
  });
}

template <class S>
Var<S> mean_all(Var<S> a) {  // -> 1 x 1
  Tape<S>& t = *a.tape;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  const S inv = S(1) / static_cast<S>(a.val().size());
  MatX<S> v(1, 1);
  v(0, 0) = a.val().sum() * inv;
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out, inv](Tape<S>& tp) {
    if (tp.wants_grad(ai))
      tp.grad(ai).array() += tp.nodes[out].grad(0, 0) * inv;
  });
}

// 1 x C -> n x C (each row a copy).
template <class S>
Var<S> broadcast_rows(Var<S> a, Eigen::Index n) {
  Tape<S>& t = *a.tape;
  require(a.rows() == 1, ErrorCode::ShapeMismatch,
          "broadcast_rows: input must be a row vector");
  MatX<S> v = a.val().replicate(n, 1);
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (tp.wants_grad(ai))
      tp.grad(ai) += tp.nodes[out].grad.colwise().sum();
  });
}

// a (N x C) + row b (1 x C) broadcast over rows.
template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "add_rowvec");
  require(b.rows() == 1 && b.cols() == a.cols(), ErrorCode::ShapeMismatch,
          "add_rowvec: b must be 1 x cols(a)");
  t.flops += static_cast<std::uint64_t>(a.val().size());
  MatX<S> v = a.val();
  v.rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(b.val().row(0));
  const int ai = a.id, bi = b.id, out = t.next_id();
  const bool rg = detail::want(t, ai) || detail::want(t, bi);
  return t.make(std::move(v), rg, [ai, bi, out](Tape<S>& tp) {
    const MatX<S>& g = tp.nodes[out].grad;
    if (tp.wants_grad(ai)) tp.grad(ai) += g;
    if (tp.wants_grad(bi)) tp.grad(bi) += g.colwise().sum();
  });
}

// out(i,j) = a(i,j) / den(i,0);  den is N x 1.
template <class S>
Var<S> divide_rows(Var<S> a, Var<S> den) {
  Tape<S>& t = detail::same_tape(a, den, "divide_rows");
  require(den.cols() == 1 && den.rows() == a.rows(), ErrorCode::ShapeMismatch,
          "divide_rows: denominator must be rows(a) x 1");
  t.flops += 2ull * a.val().size();
  MatX<S> v = a.val().array().colwise() / den.val().col(0).array();
  const int ai = a.id, di = den.id, out = t.next_id();
  const bool rg = detail::want(t, ai) || detail::want(t, di);
  return t.make(std::move(v), rg, [ai, di, out](Tape<S>& tp) {
    const MatX<S>& g = tp.nodes[out].grad;
    const auto d = tp.value(di).col(0).array();
    if (tp.wants_grad(ai))
      tp.grad(ai) += (g.array().colwise() / d).matrix();
    if (tp.wants_grad(di)) {
      // d/dden_i of a_ij/d_i = -a_ij/d_i^2 = -out_ij/d_i
      const MatX<S>& o = tp.nodes[out].value;
      tp.grad(di).col(0) +=
          (-(g.cwiseProduct(o)).rowwise().sum().array() / d).matrix();
    }
  });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

// phi(x) = ELU(x) + 1 = x + 1 for x > 0, exp(x) for x <= 0.  Strictly
// positive, so kernelized attention denominators stay positive.
template <class S>
Var<S> elu1(Var<S> a) {
  Tape<S>& t = *a.tape;
  t.flops += 2ull * a.val().size();
  MatX<S> v = a.val().unaryExpr([](S x) {
    return x > S(0) ? x + S(1) : std::exp(x);
  });
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (!tp.wants_grad(ai)) return;
    const MatX<S>& g = tp.nodes[out].grad;
    const MatX<S>& x = tp.value(ai);
    const MatX<S>& y = tp.nodes[out].value;
    // phi'(x) = 1 for x > 0, exp(x) = phi(x) for x <= 0
    tp.grad(ai).array() +=
        g.array() * (x.array() > S(0)).select(MatX<S>::Ones(x.rows(), x.cols()), y).array();
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  t.flops += static_cast<std::uint64_t>(a.val().size());
  MatX<S> v = a.val().cwiseMax(S(0));
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (!tp.wants_grad(ai)) return;
    const MatX<S>& g = tp.nodes[out].grad;
    const MatX<S>& x = tp.value(ai);
    tp.grad(ai).array() += g.array() * (x.array() > S(0)).template cast<S>();
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  t.flops += 4ull * a.val().size();
  MatX<S> v = a.val().unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (!tp.wants_grad(ai)) return;
    const MatX<S>& g = tp.nodes[out].grad;
    const MatX<S>& y = tp.nodes[out].value;
    tp.grad(ai).array() += g.array() * y.array() * (S(1) - y.array());
  });
}

template <class S>
Var<S> tanh_act(Var<S> a) {
  Tape<S>& t = *a.tape;
  t.flops += 4ull * a.val().size();
  MatX<S> v = a.val().array().tanh();
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (!tp.wants_grad(ai)) return;
    const MatX<S>& g = tp.nodes[out].grad;
    const MatX<S>& y = tp.nodes[out].value;
    tp.grad(ai).array() += g.array() * (S(1) - y.array().square());
  });
}

template <class S>
Var<S> identity_act(Var<S> a) {
  return a;
}

// Row-wise softmax with max-subtraction for stability.
template <class S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  t.flops += 5ull * a.val().size();
  MatX<S> v = a.val();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    auto row = v.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai), [ai, out](Tape<S>& tp) {
    if (!tp.wants_grad(ai)) return;
    const MatX<S>& g = tp.nodes[out].grad;
    const MatX<S>& y = tp.nodes[out].value;
    MatX<S>& ga = tp.grad(ai);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const S dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// rotary position encoding
// ---------------------------------------------------------------------------

// Rotate consecutive coordinate pairs of each row by angle pos[r] * base^(-2m/d).
// Odd trailing coordinate (if any) passes through unchanged.
template <class S>
Var<S> rope_rows(Var<S> a, std::vector<double> pos, double base = 10000.0) {
  Tape<S>& t = *a.tape;
  require(static_cast<Eigen::Index>(pos.size()) == a.rows(),
          ErrorCode::ShapeMismatch, "rope_rows: one position per row required");
  const Eigen::Index d = a.cols();
  const Eigen::Index npair = d / 2;
  t.flops += 6ull * a.rows() * npair;
  std::vector<double> inv_freq(static_cast<std::size_t>(npair));
  for (Eigen::Index m = 0; m < npair; ++m)
    inv_freq[static_cast<std::size_t>(m)] =
        std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(d));
  MatX<S> v = a.val();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double p = pos[static_cast<std::size_t>(r)];
    for (Eigen::Index m = 0; m < npair; ++m) {
      const double ang = p * inv_freq[static_cast<std::size_t>(m)];
      const S c = static_cast<S>(std::cos(ang)), s = static_cast<S>(std::sin(ang));
      const S x0 = v(r, 2 * m), x1 = v(r, 2 * m + 1);
      v(r, 2 * m) = c * x0 - s * x1;
      v(r, 2 * m + 1) = s * x0 + c * x1;
    }
  }
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai),
                [ai, out, pos = std::move(pos), inv_freq = std::move(inv_freq),
                 npair](Tape<S>& tp) {
                  if (!tp.wants_grad(ai)) return;
                  const MatX<S>& g = tp.nodes[out].grad;
                  MatX<S>& ga = tp.grad(ai);
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const double p = pos[static_cast<std::size_t>(r)];
                    for (Eigen::Index m = 0; m < npair; ++m) {
                      const double ang = p * inv_freq[static_cast<std::size_t>(m)];
                      const S c = static_cast<S>(std::cos(ang)),
                              s = static_cast<S>(std::sin(ang));
                      const S g0 = g(r, 2 * m), g1 = g(r, 2 * m + 1);
                      // transpose of the rotation
                      ga(r, 2 * m) += c * g0 + s * g1;
                      ga(r, 2 * m + 1) += -s * g0 + c * g1;
                    }
                    if (g.cols() % 2 != 0)
                      ga(r, g.cols() - 1) += g(r, g.cols() - 1);
                  }
                });
}

// ---------------------------------------------------------------------------
// graph-structured ops (operate on a time-major stacked matrix whose row
// layout is row(t*n_nodes + i) = node i at time t)
// ---------------------------------------------------------------------------

// Depthwise (per-channel) temporal convolution with zero padding at the
// sequence ends.  kernel is (2*k_t+1) x C; kernel row j corresponds to time
// offset tau = j - k_t.  out_{i,t} = sum_tau kernel[tau] .* a_{i,t+tau}.
template <class S>
Var<S> conv_time(Var<S> a, Var<S> kernel, Eigen::Index n_nodes,
                 Eigen::Index n_times) {
  Tape<S>& t = detail::same_tape(a, kernel, "conv_time");
  require(a.rows() == n_nodes * n_times, ErrorCode::ShapeMismatch,
          "conv_time: rows != n_nodes * n_times");
  require(kernel.cols() == a.cols() && kernel.rows() % 2 == 1,
          ErrorCode::ShapeMismatch,
          "conv_time: kernel must be (2k+1) x channels");
  const Eigen::Index k_t = kernel.rows() / 2;
  t.flops += 2ull * a.val().size() * kernel.rows();
  MatX<S> v = MatX<S>::Zero(a.rows(), a.cols());
  const MatX<S>& x = a.val();
  const MatX<S>& ker = kernel.val();
  for (Eigen::Index tt = 0; tt < n_times; ++tt)
    for (Eigen::Index j = 0; j < kernel.rows(); ++j) {
      const Eigen::Index ts = tt + (j - k_t);
      if (ts < 0 || ts >= n_times) continue;  // zero padding
      v.middleRows(tt * n_nodes, n_nodes).array() +=
          x.middleRows(ts * n_nodes, n_nodes).array().rowwise() *
          Eigen::Array<S, 1, Eigen::Dynamic>(ker.row(j));
    }
  const int ai = a.id, ki = kernel.id, out = t.next_id();
  const bool rg = detail::want(t, ai) || detail::want(t, ki);
  return t.make(std::move(v), rg,
                [ai, ki, out, n_nodes, n_times, k_t](Tape<S>& tp) {
                  const MatX<S>& g = tp.nodes[out].grad;
                  const MatX<S>& x = tp.value(ai);
                  const MatX<S>& ker = tp.value(ki);
                  for (Eigen::Index tt = 0; tt < n_times; ++tt)
                    for (Eigen::Index j = 0; j < ker.rows(); ++j) {
                      const Eigen::Index ts = tt + (j - k_t);
                      if (ts < 0 || ts >= n_times) continue;
                      if (tp.wants_grad(ai))
                        tp.grad(ai).middleRows(ts * n_nodes, n_nodes).array() +=
                            g.middleRows(tt * n_nodes, n_nodes).array().rowwise() *
                            Eigen::Array<S, 1, Eigen::Dynamic>(ker.row(j));
                      if (tp.wants_grad(ki))
                        tp.grad(ki).row(j) +=
                            (g.middleRows(tt * n_nodes, n_nodes).array() *
                             x.middleRows(ts * n_nodes, n_nodes).array())
                                .colwise()
                                .sum()
                                .matrix();
                    }
                });
}

// Per-time-slice sparse-in-spirit mix: out_block_t = P * a_block_t where P is
// a fixed (non-differentiable) n_nodes x n_nodes propagation matrix, e.g. the
// degree-normalized weighted adjacency.
template <class S>
Var<S> node_mix(Var<S> a, MatX<S> P, Eigen::Index n_nodes, Eigen::Index n_times) {
  Tape<S>& t = *a.tape;
  require(a.rows() == n_nodes * n_times, ErrorCode::ShapeMismatch,
          "node_mix: rows != n_nodes * n_times");
  require(P.rows() == n_nodes && P.cols() == n_nodes, ErrorCode::ShapeMismatch,
          "node_mix: propagation matrix must be n_nodes x n_nodes");
  t.flops += 2ull * n_times * n_nodes * n_nodes * a.cols();
  MatX<S> v(a.rows(), a.cols());
  for (Eigen::Index tt = 0; tt < n_times; ++tt)
    v.middleRows(tt * n_nodes, n_nodes).noalias() =
        P * a.val().middleRows(tt * n_nodes, n_nodes);
  const int ai = a.id, out = t.next_id();
  return t.make(std::move(v), detail::want(t, ai),
                [ai, out, P = std::move(P), n_nodes, n_times](Tape<S>& tp) {
                  if (!tp.wants_grad(ai)) return;
                  const MatX<S>& g = tp.nodes[out].grad;
                  for (Eigen::Index tt = 0; tt < n_times; ++tt)
                    tp.grad(ai).middleRows(tt * n_nodes, n_nodes).noalias() +=
                        P.transpose() * g.middleRows(tt * n_nodes, n_nodes);
                });
}

// ---------------------------------------------------------------------------
// fused attention cores (batched over consecutive row blocks of `block` rows
// per sample; one tape node for the whole batch)
// ---------------------------------------------------------------------------

// Kernelized linear attention on pre-activated inputs.  Per sample block:
//   out_i = phiQ_i (sum_j phiK_j^T V_j) / (phiQ_i . sum_j phiK_j + eps)
// Cost O(block * d^2) per sample; no block x block matrix is ever formed.
template <class S>
Var<S> linear_attention_core(Var<S> phiQ, Var<S> phiK, Var<S> V,
                             Eigen::Index block, S eps) {
  Tape<S>& t = detail::same_tape(phiQ, phiK, "linear_attention_core");
  detail::same_tape(phiK, V, "linear_attention_core");
  require(eps > S(0), ErrorCode::ConfigError,
          "linear_attention_core: eps must be > 0");
  const Eigen::Index n = phiQ.rows(), d = phiQ.cols();
  require(phiK.rows() == n && V.rows() == n && phiK.cols() == d &&
              V.cols() == d,
          ErrorCode::ShapeMismatch, "linear_attention_core: shape mismatch");
  require(block >= 1 && n % block == 0, ErrorCode::ShapeMismatch,
          "linear_attention_core: block does not divide rows");
  const Eigen::Index nb = n / block;
  t.flops += static_cast<std::uint64_t>(nb) *
             (4ull * block * d * d + 4ull * block * d);

  MatX<S> out(n, d);
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto q = phiQ.val().middleRows(b * block, block);
    const auto k = phiK.val().middleRows(b * block, block);
    const auto v = V.val().middleRows(b * block, block);
    MatX<S> S1(d, d);
    S1.noalias() = k.transpose() * v;                      // d x d
    const Eigen::Matrix<S, Eigen::Dynamic, 1> z =
        detail::block_colsum(phiK.val(), b * block, block).transpose();
    MatX<S> num(block, d);
    num.noalias() = q * S1;
    Eigen::Matrix<S, Eigen::Dynamic, 1> den = q * z;
    den.array() += eps;
    out.middleRows(b * block, block) = num.array().colwise() / den.array();
  }
  require_finite<S>(out, "linear attention output");

  const int qi = phiQ.id, ki = phiK.id, vi = V.id, oi = t.next_id();
  const bool rg = detail::want(t, qi) || detail::want(t, ki) || detail::want(t, vi);
  return t.make(std::move(out), rg, [qi, ki, vi, oi, block, eps](Tape<S>& tp) {
    const MatX<S>& G = tp.nodes[oi].grad;
    const MatX<S>& O = tp.nodes[oi].value;
    const MatX<S>& Q = tp.value(qi);
    const MatX<S>& K = tp.value(ki);
    const MatX<S>& Vv = tp.value(vi);
    const Eigen::Index d = Q.cols(), nb = Q.rows() / block;
    const bool wq = tp.wants_grad(qi), wk = tp.wants_grad(ki),
               wv = tp.wants_grad(vi);
    for (Eigen::Index b = 0; b < nb; ++b) {
      const auto q = Q.middleRows(b * block, block);
      const auto k = K.middleRows(b * block, block);
      const auto v = Vv.middleRows(b * block, block);
      const auto g = G.middleRows(b * block, block);
      const auto o = O.middleRows(b * block, block);
      MatX<S> S1(d, d);
      S1.noalias() = k.transpose() * v;
      const Eigen::Matrix<S, Eigen::Dynamic, 1> z =
          detail::block_colsum(K, b * block, block).transpose();
      Eigen::Matrix<S, Eigen::Dynamic, 1> den = q * z;
      den.array() += eps;
      // out = num / den (row-wise):
      MatX<S> dnum = g.array().colwise() / den.array();           // block x d
      Eigen::Matrix<S, Eigen::Dynamic, 1> dden =
          -((g.cwiseProduct(o)).rowwise().sum().array() / den.array());
      if (wq)
        tp.grad(qi).middleRows(b * block, block).noalias() +=
            dnum * S1.transpose() + dden * z.transpose();
      if (wk || wv) {
        MatX<S> dS1(d, d);
        dS1.noalias() = q.transpose() * dnum;
        if (wv)
          tp.grad(vi).middleRows(b * block, block).noalias() += k * dS1;
        if (wk) {
          const Eigen::Matrix<S, Eigen::Dynamic, 1> dz = q.transpose() * dden;
          tp.grad(ki).middleRows(b * block, block).noalias() +=
              v * dS1.transpose();
          tp.grad(ki).middleRows(b * block, block).rowwise() += dz.transpose();
        }
      }
    }
  });
}

// Softmax cross-attention where every sample's value matrix is one row
// broadcast over the block: out_i = softmax(q_i K^T / sqrt(d))_j V_j with
// V_j = vrow for all j.  Q, K are (B*block) x d; vrows is B x dv.
// Output is (B*block) x dv.  The softmax is computed explicitly (logits are
// checked finite) even though the broadcast value makes the output equal to
// the value row.
template <class S>
Var<S> cross_attention_broadcast(Var<S> Q, Var<S> K, Var<S> vrows,
                                 Eigen::Index block) {
  Tape<S>& t = detail::same_tape(Q, K, "cross_attention_broadcast");
  detail::same_tape(K, vrows, "cross_attention_broadcast");
  const Eigen::Index n = Q.rows(), d = Q.cols(), dv = vrows.cols();
  require(K.rows() == n && K.cols() == d, ErrorCode::ShapeMismatch,
          "cross_attention_broadcast: Q/K mismatch");
  require(block >= 1 && n % block == 0 && vrows.rows() == n / block,
          ErrorCode::ShapeMismatch,
          "cross_attention_broadcast: value rows != sample count");
  const Eigen::Index nb = n / block;
  const S scale = S(1) / std::sqrt(static_cast<S>(d));
  t.flops += static_cast<std::uint64_t>(nb) *
             (2ull * block * block * d + 5ull * block * block +
              2ull * block * dv);

  MatX<S> out(n, dv);
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto q = Q.val().middleRows(b * block, block);
    const auto k = K.val().middleRows(b * block, block);
    MatX<S> logits = (q * k.transpose()) * scale;  // block x block
    require_finite<S>(logits, "cross-attention logits");
    for (Eigen::Index r = 0; r < block; ++r) {
      auto row = logits.row(r).array();
      row -= row.maxCoeff();
      row = row.exp();
      row /= row.sum();
    }
    // rows of the value matrix are identical; attention rows sum to 1
    out.middleRows(b * block, block).rowwise() =
        Eigen::Matrix<S, 1, Eigen::Dynamic>(vrows.val().row(b));
    (void)logits;
  }

  const int qi = Q.id, ki = K.id, vi = vrows.id, oi = t.next_id();
  const bool rg = detail::want(t, qi) || detail::want(t, ki) || detail::want(t, vi);
  return t.make(std::move(out), rg, [qi, ki, vi, oi, block, scale](Tape<S>& tp) {
    const MatX<S>& G = tp.nodes[oi].grad;
    const MatX<S>& Qv = tp.value(qi);
    const MatX<S>& Kv = tp.value(ki);
    const MatX<S>& Vr = tp.value(vi);
    const Eigen::Index nb = Qv.rows() / block;
    const bool wq = tp.wants_grad(qi), wk = tp.wants_grad(ki),
               wv = tp.wants_grad(vi);
    for (Eigen::Index b = 0; b < nb; ++b) {
      const auto g = G.middleRows(b * block, block);
      if (wv) tp.grad(vi).row(b) += g.colwise().sum();
      if (!(wq || wk)) continue;
      const auto q = Qv.middleRows(b * block, block);
      const auto k = Kv.middleRows(b * block, block);
      MatX<S> alpha = (q * k.transpose()) * scale;
      for (Eigen::Index r = 0; r < block; ++r) {
        auto row = alpha.row(r).array();
        row -= row.maxCoeff();
        row = row.exp();
        row /= row.sum();
      }
      // dalpha_{ij} = g_i . vrow, identical across j => softmax backward
      // (alpha .* (dalpha - rowdot)) vanishes exactly; gradients to Q and K
      // are identically zero.  Spelled out for clarity:
      const Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot =
          g * Vr.row(b).transpose();  // block x 1
      const MatX<S> dalpha = rowdot.replicate(1, block);
      const Eigen::Matrix<S, Eigen::Dynamic, 1> srow =
          (dalpha.cwiseProduct(alpha)).rowwise().sum();
      MatX<S> dlogits = alpha.cwiseProduct(
          (dalpha.array().colwise() - srow.array()).matrix());
      dlogits *= scale;
      if (wq)
        tp.grad(qi).middleRows(b * block, block).noalias() += dlogits * k;
      if (wk)
        tp.grad(ki).middleRows(b * block, block).noalias() +=
            dlogits.transpose() * q;
    }
  });
}

}  // namespace geohet::ad

namespace geohet {
using namespace ad;  // the tape vocabulary doubles as the library vocabulary
}
