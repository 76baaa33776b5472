// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cltune/tensor.hpp"

namespace cltune {

// Reverse-mode tape over dense tensors. Operations are recorded in issue
// order; backward() replays the tape in reverse. There is no fusion or
// reordering, so replaying a tape reproduces forward values bitwise.
//
// The element type is a template parameter: training runs on float, and
// the same code instantiated on double serves as the shadow path for
// finite-difference checks.

enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kMatmul,          // (n,m) @ (m,p)
  kBatchMatmul,     // (b,n,m) @ (b,m,p)
  kBatchMatmulNT,   // (b,n,m) @ (b,p,m)^T -> (b,n,p)
  kAdd,             // same shape
  kAddRow,          // (n,d) + (d)
  kScale,           // * constant
  kTanh,
  kGelu,
  kSoftmax,         // over last dim
  kAttentionBias,   // (B*h,L,L) + bias(B,L) broadcast over heads and queries
  kLayerNorm,       // over last dim, affine
  kEmbeddingGather, // (V,d), ids -> (n,d)
  kGatherRows,      // (n,d), rows -> (m,d)
  kSplitHeads,      // (B*L,d) -> (B*h,L,d/h)
  kMergeHeads,      // inverse of kSplitHeads
  kMeanPoolRows,    // (B*L,d) -> (B,d), masked mean over each example's rows
  kCrossEntropy,    // (N,V), labels -> scalar mean
  kSoftCrossEntropy,// (N,V), target probs -> scalar mean
  kQuadPenalty,     // (lam/2) * sum w_i (x_i - a_i)^2 -> scalar
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kMatmul: return "matmul";
    case Op::kBatchMatmul: return "batch_matmul";
    case Op::kBatchMatmulNT: return "batch_matmul_nt";
    case Op::kAdd: return "add";
    case Op::kAddRow: return "add_row";
    case Op::kScale: return "scale";
    case Op::kTanh: return "tanh";
    case Op::kGelu: return "gelu";
    case Op::kSoftmax: return "softmax";
    case Op::kAttentionBias: return "attention_bias";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kEmbeddingGather: return "embedding_gather";
    case Op::kGatherRows: return "gather_rows";
    case Op::kSplitHeads: return "split_heads";
    case Op::kMergeHeads: return "merge_heads";
    case Op::kMeanPoolRows: return "mean_pool_rows";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kSoftCrossEntropy: return "soft_cross_entropy";
    case Op::kQuadPenalty: return "quad_penalty";
  }
  return "?";
}

namespace kernels {

// c += a @ b, a (n,m), b (m,p)
template <class T>
void mm_nn_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t p) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = a + i * m;
    T* crow = c + i * p;
    for (std::size_t k = 0; k < m; ++k) {
      const T aik = arow[k];
      const T* brow = b + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c += a @ b^T, a (n,m), b (p,m)
template <class T>
void mm_nt_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t p) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = a + i * m;
    T* crow = c + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const T* brow = b + j * m;
      T acc = T(0);
      for (std::size_t k = 0; k < m; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// c += a^T @ b, a (n,m), b (n,p), c (m,p)
template <class T>
void mm_tn_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t p) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = a + i * m;
    const T* brow = b + i * p;
    for (std::size_t k = 0; k < m; ++k) {
      const T aik = arow[k];
      T* crow = c + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

}  // namespace kernels

template <class T>
class Graph {
 public:
  using NodeId = std::int32_t;

  NodeId constant(Tensor<T> value) { return push(Op::kConstant, value_only(std::move(value)), false); }

  NodeId parameter(Tensor<T> value) { return push(Op::kParameter, value_only(std::move(value)), true); }

  NodeId matmul(NodeId a, NodeId b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    check(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(0), "matmul", ta, tb);
    Tensor<T> out({ta.dim(0), tb.dim(1)});
    kernels::mm_nn_acc(ta.ptr(), tb.ptr(), out.ptr(), ta.dim(0), ta.dim(1), tb.dim(1));
    return push(Op::kMatmul, Node{.value = std::move(out), .in = {a, b}});
  }

  NodeId batch_matmul(NodeId a, NodeId b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    check(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0) && ta.dim(2) == tb.dim(1),
          "batch_matmul", ta, tb);
    const std::size_t bs = ta.dim(0), n = ta.dim(1), m = ta.dim(2), p = tb.dim(2);
    Tensor<T> out({bs, n, p});
    for (std::size_t i = 0; i < bs; ++i)
      kernels::mm_nn_acc(ta.ptr() + i * n * m, tb.ptr() + i * m * p, out.ptr() + i * n * p, n, m, p);
    return push(Op::kBatchMatmul, Node{.value = std::move(out), .in = {a, b}});
  }

  NodeId batch_matmul_nt(NodeId a, NodeId b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    check(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0) && ta.dim(2) == tb.dim(2),
          "batch_matmul_nt", ta, tb);
    const std::size_t bs = ta.dim(0), n = ta.dim(1), m = ta.dim(2), p = tb.dim(1);
    Tensor<T> out({bs, n, p});
    for (std::size_t i = 0; i < bs; ++i)
      kernels::mm_nt_acc(ta.ptr() + i * n * m, tb.ptr() + i * p * m, out.ptr() + i * n * p, n, m, p);
    return push(Op::kBatchMatmulNT, Node{.value = std::move(out), .in = {a, b}});
  }

  NodeId add(NodeId a, NodeId b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    check(ta.same_shape(tb), "add", ta, tb);
    Tensor<T> out(ta.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = ta.data[i] + tb.data[i];
    return push(Op::kAdd, Node{.value = std::move(out), .in = {a, b}});
  }

  NodeId add_row(NodeId mat, NodeId row) {
    const auto& tm = val(mat);
    const auto& tr = val(row);
    check(tm.rank() == 2 && tr.rank() == 1 && tm.dim(1) == tr.dim(0), "add_row", tm, tr);
    Tensor<T> out(tm.shape);
    const std::size_t n = tm.dim(0), d = tm.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] = tm.data[i * d + j] + tr.data[j];
    return push(Op::kAddRow, Node{.value = std::move(out), .in = {mat, row}});
  }

  NodeId scale(NodeId a, T c) {
    const auto& ta = val(a);
    Tensor<T> out(ta.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = ta.data[i] * c;
    Node n{.value = std::move(out), .in = {a}};
    n.c = c;
    return push(Op::kScale, std::move(n));
  }

  NodeId tanh(NodeId a) {
    const auto& ta = val(a);
    Tensor<T> out(ta.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::tanh(ta.data[i]);
    return push(Op::kTanh, Node{.value = std::move(out), .in = {a}});
  }

  NodeId gelu(NodeId a) {
    const auto& ta = val(a);
    Tensor<T> out(ta.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const T x = ta.data[i];
      out.data[i] = T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
    }
    return push(Op::kGelu, Node{.value = std::move(out), .in = {a}});
  }

  NodeId softmax(NodeId a) {
    const auto& ta = val(a);
    require(ta.rank() >= 1, "softmax requires rank >= 1");
    const std::size_t d = ta.shape.back();
    const std::size_t rows = ta.numel() / d;
    Tensor<T> out(ta.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* x = ta.ptr() + r * d;
      T* y = out.ptr() + r * d;
      T mx = x[0];
      for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
      T sum = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
    }
    return push(Op::kSoftmax, Node{.value = std::move(out), .in = {a}});
  }

  /// scores (B*h, L, L) plus a per-key bias (B, L); the bias row is shared
  /// by all heads and query positions of an example. Used for padding
  /// masks, so the bias input is normally a constant.
  NodeId attention_bias(NodeId scores, NodeId bias, std::size_t heads) {
    const auto& ts = val(scores);
    const auto& tb = val(bias);
    check(ts.rank() == 3 && tb.rank() == 2 && ts.dim(0) == tb.dim(0) * heads &&
              ts.dim(2) == tb.dim(1),
          "attention_bias", ts, tb);
    Tensor<T> out(ts.shape);
    const std::size_t bh = ts.dim(0), l = ts.dim(1), lk = ts.dim(2);
    for (std::size_t g = 0; g < bh; ++g) {
      const T* brow = tb.ptr() + (g / heads) * lk;
      for (std::size_t i = 0; i < l; ++i) {
        const T* s = ts.ptr() + (g * l + i) * lk;
        T* o = out.ptr() + (g * l + i) * lk;
        for (std::size_t j = 0; j < lk; ++j) o[j] = s[j] + brow[j];
      }
    }
    Node n{.value = std::move(out), .in = {scores, bias}};
    n.heads = heads;
    return push(Op::kAttentionBias, std::move(n));
  }

  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias) {
    const auto& tx = val(x);
    const auto& tg = val(gain);
    const auto& tb = val(bias);
    require(tx.rank() >= 1, "layer_norm requires rank >= 1");
    const std::size_t d = tx.shape.back();
    check(tg.rank() == 1 && tg.dim(0) == d && tb.rank() == 1 && tb.dim(0) == d, "layer_norm", tx, tg);
    const std::size_t rows = tx.numel() / d;
    Tensor<T> out(tx.shape);
    Tensor<T> stats({rows, 2});  // mean, rstd per row
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = tx.ptr() + r * d;
      T* o = out.ptr() + r * d;
      double mean = 0;
      for (std::size_t j = 0; j < d; ++j) mean += in[j];
      mean /= static_cast<double>(d);
      double var = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = in[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const T m = static_cast<T>(mean);
      const T rstd = static_cast<T>(1.0 / std::sqrt(var + kLayerNormEps));
      stats.data[r * 2] = m;
      stats.data[r * 2 + 1] = rstd;
      for (std::size_t j = 0; j < d; ++j)
        o[j] = (in[j] - m) * rstd * tg.data[j] + tb.data[j];
    }
    Node n{.value = std::move(out), .in = {x, gain, bias}};
    n.aux = std::move(stats);
    return push(Op::kLayerNorm, std::move(n));
  }

  NodeId embedding_gather(NodeId table, std::vector<std::int32_t> ids) {
    const auto& tt = val(table);
    require(tt.rank() == 2, "embedding_gather table must be rank 2");
    const std::size_t v = tt.dim(0), d = tt.dim(1);
    for (auto id : ids)
      require(id >= 0 && static_cast<std::size_t>(id) < v,
              "embedding id " + std::to_string(id) + " out of range for table " +
                  shape_string(tt.shape));
    Tensor<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const T* src = tt.ptr() + static_cast<std::size_t>(ids[i]) * d;
      T* dst = out.ptr() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
    }
    Node n{.value = std::move(out), .in = {table}};
    n.indices = std::move(ids);
    return push(Op::kEmbeddingGather, std::move(n));
  }

  NodeId gather_rows(NodeId x, std::vector<std::int32_t> rows) {
    const auto& tx = val(x);
    require(tx.rank() == 2, "gather_rows input must be rank 2");
    const std::size_t n = tx.dim(0), d = tx.dim(1);
    for (auto r : rows)
      require(r >= 0 && static_cast<std::size_t>(r) < n,
              "row index " + std::to_string(r) + " out of range for " + shape_string(tx.shape));
    Tensor<T> out({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const T* src = tx.ptr() + static_cast<std::size_t>(rows[i]) * d;
      T* dst = out.ptr() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
    }
    Node nn{.value = std::move(out), .in = {x}};
    nn.indices = std::move(rows);
    return push(Op::kGatherRows, std::move(nn));
  }

  NodeId split_heads(NodeId x, std::size_t batch, std::size_t seq, std::size_t heads) {
    const auto& tx = val(x);
    require(tx.rank() == 2 && tx.dim(0) == batch * seq && tx.dim(1) % heads == 0,
            "split_heads shape mismatch for " + shape_string(tx.shape));
    const std::size_t d = tx.dim(1), hd = d / heads;
    Tensor<T> out({batch * heads, seq, hd});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < seq; ++l) {
        const T* src = tx.ptr() + (b * seq + l) * d;
        for (std::size_t h = 0; h < heads; ++h) {
          T* dst = out.ptr() + ((b * heads + h) * seq + l) * hd;
          for (std::size_t c = 0; c < hd; ++c) dst[c] = src[h * hd + c];
        }
      }
    Node n{.value = std::move(out), .in = {x}};
    n.batch = batch;
    n.seq = seq;
    n.heads = heads;
    return push(Op::kSplitHeads, std::move(n));
  }

  NodeId merge_heads(NodeId x, std::size_t batch, std::size_t seq, std::size_t heads) {
    const auto& tx = val(x);
    require(tx.rank() == 3 && tx.dim(0) == batch * heads && tx.dim(1) == seq,
            "merge_heads shape mismatch for " + shape_string(tx.shape));
    const std::size_t hd = tx.dim(2), d = heads * hd;
    Tensor<T> out({batch * seq, d});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < seq; ++l) {
          const T* src = tx.ptr() + ((b * heads + h) * seq + l) * hd;
          T* dst = out.ptr() + (b * seq + l) * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) dst[c] = src[c];
        }
    Node n{.value = std::move(out), .in = {x}};
    n.batch = batch;
    n.seq = seq;
    n.heads = heads;
    return push(Op::kMergeHeads, std::move(n));
  }

  /// Mean over each example's non-masked rows. x is (B*L, d); weights
  /// holds B*L entries in {0,1}; every example must have at least one
  /// non-zero weight.
  NodeId mean_pool_rows(NodeId x, std::vector<std::uint8_t> weights, std::size_t batch) {
    const auto& tx = val(x);
    require(tx.rank() == 2 && weights.size() == tx.dim(0) && tx.dim(0) % batch == 0,
            "mean_pool_rows shape mismatch for " + shape_string(tx.shape));
    const std::size_t seq = tx.dim(0) / batch, d = tx.dim(1);
    Tensor<T> out({batch, d});
    Tensor<T> counts({batch});
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t cnt = 0;
      T* dst = out.ptr() + b * d;
      for (std::size_t l = 0; l < seq; ++l) {
        if (!weights[b * seq + l]) continue;
        ++cnt;
        const T* src = tx.ptr() + (b * seq + l) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
      require(cnt > 0, "mean_pool_rows: example " + std::to_string(b) + " has no active rows");
      const T inv = T(1) / static_cast<T>(cnt);
      for (std::size_t j = 0; j < d; ++j) dst[j] *= inv;
      counts.data[b] = inv;
    }
    Node n{.value = std::move(out), .in = {x}};
    n.weights = std::move(weights);
    n.aux = std::move(counts);
    n.batch = batch;
    n.seq = seq;
    return push(Op::kMeanPoolRows, std::move(n));
  }

  /// Mean cross-entropy of logits (N,V) against integer labels.
  NodeId cross_entropy(NodeId logits, std::vector<std::int32_t> labels) {
    const auto& tl = val(logits);
    require(tl.rank() == 2, "cross_entropy logits must be rank 2");
    require(!labels.empty() && labels.size() == tl.dim(0),
            "cross_entropy needs one label per logit row, got " + std::to_string(labels.size()) +
                " labels for " + shape_string(tl.shape));
    const std::size_t n = tl.dim(0), v = tl.dim(1);
    for (auto y : labels)
      require(y >= 0 && static_cast<std::size_t>(y) < v, "label out of vocab range");
    Tensor<T> probs({n, v});
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = tl.ptr() + i * v;
      T* p = probs.ptr() + i * v;
      T mx = x[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
      double sum = 0;
      for (std::size_t j = 0; j < v; ++j) {
        p[j] = std::exp(x[j] - mx);
        sum += p[j];
      }
      const T inv = static_cast<T>(1.0 / sum);
      for (std::size_t j = 0; j < v; ++j) p[j] *= inv;
      total += std::log(sum) + mx - x[labels[i]];
    }
    Node node{.value = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))),
              .in = {logits}};
    node.indices = std::move(labels);
    node.aux = std::move(probs);
    return push(Op::kCrossEntropy, std::move(node));
  }

  /// Mean cross-entropy of logits (N,V) against fixed target distributions
  /// (N,V): mean_i of -sum_v t_iv log softmax(x_i)_v.
  NodeId soft_cross_entropy(NodeId logits, Tensor<T> target_probs) {
    const auto& tl = val(logits);
    check(tl.rank() == 2 && tl.same_shape(target_probs), "soft_cross_entropy", tl, target_probs);
    const std::size_t n = tl.dim(0), v = tl.dim(1);
    Tensor<T> probs({n, v});
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = tl.ptr() + i * v;
      const T* t = target_probs.ptr() + i * v;
      T* p = probs.ptr() + i * v;
      T mx = x[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
      double sum = 0;
      for (std::size_t j = 0; j < v; ++j) {
        p[j] = std::exp(x[j] - mx);
        sum += p[j];
      }
      const double lse = std::log(sum) + mx;
      const T inv = static_cast<T>(1.0 / sum);
      double dot = 0;
      for (std::size_t j = 0; j < v; ++j) {
        p[j] *= inv;
        dot += static_cast<double>(t[j]) * (static_cast<double>(x[j]) - lse);
      }
      total -= dot;
    }
    Node node{.value = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))),
              .in = {logits}};
    node.aux = std::move(probs);
    node.aux2 = std::move(target_probs);
    return push(Op::kSoftCrossEntropy, std::move(node));
  }

  /// (lam/2) * sum_i w_i (x_i - a_i)^2 with constant anchor a and
  /// nonnegative constant weights w (pass an empty tensor for w == 1).
  NodeId quadratic_penalty(NodeId x, Tensor<T> anchor, Tensor<T> fisher_weights, T lam) {
    const auto& tx = val(x);
    check(tx.numel() == anchor.numel(), "quad_penalty", tx, anchor);
    const bool weighted = fisher_weights.numel() > 0;
    if (weighted) {
      check(fisher_weights.numel() == tx.numel(), "quad_penalty weights", tx, fisher_weights);
      for (auto w : fisher_weights.data)
        require(w >= T(0), "quad_penalty: negative fisher weight");
    }
    double acc = 0;
    for (std::size_t i = 0; i < tx.numel(); ++i) {
      const double diff = static_cast<double>(tx.data[i]) - static_cast<double>(anchor.data[i]);
      acc += (weighted ? static_cast<double>(fisher_weights.data[i]) : 1.0) * diff * diff;
    }
    Node node{.value = Tensor<T>::scalar(static_cast<T>(0.5 * static_cast<double>(lam) * acc)),
              .in = {x}};
    node.aux = std::move(anchor);
    node.aux2 = std::move(fisher_weights);
    node.c = lam;
    return push(Op::kQuadPenalty, std::move(node));
  }

  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root. Gradients of all grad-requiring
  /// nodes are available through gradient() afterwards.
  void backward(NodeId root) {
    require(root >= 0 && static_cast<std::size_t>(root) < nodes_.size(), "backward: bad root");
    require(nodes_[root].value.numel() == 1, "backward: tape root is not a scalar");
    grads_.assign(nodes_.size(), Tensor<T>());
    if (!nodes_[root].requires_grad) return;  // loss constant in parameters
    grads_[root] = Tensor<T>::scalar(T(1));
    for (NodeId id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || grads_[id].numel() == 0) continue;
      pull(id, n);
    }
  }

  /// Gradient of the last backward() root w.r.t. node `id`. Zero tensor if
  /// the node did not participate.
  const Tensor<T>& gradient(NodeId id) {
    require(!grads_.empty(), "gradient: backward() has not run");
    if (grads_[id].numel() == 0) grads_[id] = Tensor<T>(nodes_[id].value.shape);
    return grads_[id];
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<NodeId> in;
    Op op{};
    bool requires_grad = false;
    std::vector<std::int32_t> indices;  // gather ids / labels
    std::vector<std::uint8_t> weights;  // pooling mask
    Tensor<T> aux, aux2;                // op-specific saved state
    T c{};                              // scalar constant (scale factor, lambda)
    std::size_t batch = 0, seq = 0, heads = 0;
  };

  static Node value_only(Tensor<T> v) { return Node{.value = std::move(v)}; }

  static void check(bool ok, const char* what, const Tensor<T>& a, const Tensor<T>& b) {
    if (!ok)
      throw ShapeError(std::string(what) + ": incompatible shapes " + shape_string(a.shape) +
                       " and " + shape_string(b.shape));
  }

  NodeId push(Op op, Node n, bool requires_grad_leaf = false) {
    n.op = op;
    n.requires_grad = requires_grad_leaf;
    for (NodeId i : n.in)
      if (nodes_[i].requires_grad) n.requires_grad = true;
    scan_finite(n);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void scan_finite(const Node& n) const {
    for (const T x : n.value.data) {
      if (!std::isfinite(x))
        throw NumericsError("non-finite value produced by operation " +
                            std::to_string(nodes_.size()) + " (" + op_name(n.op) + ")");
    }
  }

  Tensor<T>& grad_buf(NodeId id) {
    if (grads_[id].numel() == 0) grads_[id] = Tensor<T>(nodes_[id].value.shape);
    return grads_[id];
  }

  bool wants(NodeId id) const { return nodes_[id].requires_grad; }

  const Tensor<T>& val(NodeId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "bad node id");
    return nodes_[id].value;
  }

  // Accumulate input adjoints for one node. `g` is this node's adjoint.
  void pull(NodeId id, Node& n) {
    const Tensor<T>& g = grads_[id];
    switch (n.op) {
      case Op::kConstant:
      case Op::kParameter:
        break;
      case Op::kMatmul: {
        const auto& a = val(n.in[0]);
        const auto& b = val(n.in[1]);
        const std::size_t nn = a.dim(0), m = a.dim(1), p = b.dim(1);
        if (wants(n.in[0]))
          kernels::mm_nt_acc(g.ptr(), b.ptr(), grad_buf(n.in[0]).ptr(), nn, p, m);
        if (wants(n.in[1]))
          kernels::mm_tn_acc(a.ptr(), g.ptr(), grad_buf(n.in[1]).ptr(), nn, m, p);
        break;
      }
      case Op::kBatchMatmul: {
        const auto& a = val(n.in[0]);
        const auto& b = val(n.in[1]);
        const std::size_t bs = a.dim(0), nn = a.dim(1), m = a.dim(2), p = b.dim(2);
        for (std::size_t i = 0; i < bs; ++i) {
          if (wants(n.in[0]))
            kernels::mm_nt_acc(g.ptr() + i * nn * p, b.ptr() + i * m * p,
                               grad_buf(n.in[0]).ptr() + i * nn * m, nn, p, m);
          if (wants(n.in[1]))
            kernels::mm_tn_acc(a.ptr() + i * nn * m, g.ptr() + i * nn * p,
                               grad_buf(n.in[1]).ptr() + i * m * p, nn, m, p);
        }
        break;
      }
      case Op::kBatchMatmulNT: {
        // out = a @ b^T : da = g @ b, db = g^T @ a
        const auto& a = val(n.in[0]);
        const auto& b = val(n.in[1]);
        const std::size_t bs = a.dim(0), nn = a.dim(1), m = a.dim(2), p = b.dim(1);
        for (std::size_t i = 0; i < bs; ++i) {
          if (wants(n.in[0]))
            kernels::mm_nn_acc(g.ptr() + i * nn * p, b.ptr() + i * p * m,
                               grad_buf(n.in[0]).ptr() + i * nn * m, nn, p, m);
          if (wants(n.in[1]))
            kernels::mm_tn_acc(g.ptr() + i * nn * p, a.ptr() + i * nn * m,
                               grad_buf(n.in[1]).ptr() + i * p * m, nn, p, m);
        }
        break;
      }
      case Op::kAdd: {
        for (int k = 0; k < 2; ++k) {
          if (!wants(n.in[k])) continue;
          auto& gb = grad_buf(n.in[k]);
          for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
        }
        break;
      }
      case Op::kAddRow: {
        const std::size_t rows = n.value.dim(0), d = n.value.dim(1);
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
        }
        if (wants(n.in[1])) {
          auto& gb = grad_buf(n.in[1]);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gb.data[j] += g.data[i * d + j];
        }
        break;
      }
      case Op::kScale: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * n.c;
        }
        break;
      }
      case Op::kTanh: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          for (std::size_t i = 0; i < g.numel(); ++i) {
            const T y = n.value.data[i];
            gb.data[i] += g.data[i] * (T(1) - y * y);
          }
        }
        break;
      }
      case Op::kGelu: {
        if (wants(n.in[0])) {
          const auto& x = val(n.in[0]);
          auto& gb = grad_buf(n.in[0]);
          for (std::size_t i = 0; i < g.numel(); ++i) {
            const T xi = x.data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(xi * T(0.7071067811865476)));
            const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * xi * xi);
            gb.data[i] += g.data[i] * (cdf + xi * pdf);
          }
        }
        break;
      }
      case Op::kSoftmax: {
        if (wants(n.in[0])) {
          const std::size_t d = n.value.shape.back();
          const std::size_t rows = n.value.numel() / d;
          auto& gb = grad_buf(n.in[0]);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* y = n.value.ptr() + r * d;
            const T* gy = g.ptr() + r * d;
            T* gx = gb.ptr() + r * d;
            double dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * y[j];
            const T dt = static_cast<T>(dot);
            for (std::size_t j = 0; j < d; ++j) gx[j] += y[j] * (gy[j] - dt);
          }
        }
        break;
      }
      case Op::kAttentionBias: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
        }
        if (wants(n.in[1])) {
          auto& gb = grad_buf(n.in[1]);
          const std::size_t bh = n.value.dim(0), l = n.value.dim(1), lk = n.value.dim(2);
          for (std::size_t gi = 0; gi < bh; ++gi) {
            T* dst = gb.ptr() + (gi / n.heads) * lk;
            for (std::size_t i = 0; i < l; ++i) {
              const T* src = g.ptr() + (gi * l + i) * lk;
              for (std::size_t j = 0; j < lk; ++j) dst[j] += src[j];
            }
          }
        }
        break;
      }
      case Op::kLayerNorm: {
        const auto& x = val(n.in[0]);
        const auto& gain = val(n.in[1]);
        const std::size_t d = x.shape.back();
        const std::size_t rows = x.numel() / d;
        const bool wx = wants(n.in[0]), wg = wants(n.in[1]), wb = wants(n.in[2]);
        for (std::size_t r = 0; r < rows; ++r) {
          const T mean = n.aux.data[r * 2];
          const T rstd = n.aux.data[r * 2 + 1];
          const T* xr = x.ptr() + r * d;
          const T* gy = g.ptr() + r * d;
          if (wg) {
            T* gg = grad_buf(n.in[1]).ptr();
            for (std::size_t j = 0; j < d; ++j) gg[j] += gy[j] * (xr[j] - mean) * rstd;
          }
          if (wb) {
            T* gb = grad_buf(n.in[2]).ptr();
            for (std::size_t j = 0; j < d; ++j) gb[j] += gy[j];
          }
          if (wx) {
            T* gx = grad_buf(n.in[0]).ptr() + r * d;
            double sum_dxh = 0, sum_dxh_xh = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const double xh = (xr[j] - mean) * rstd;
              const double dxh = static_cast<double>(gy[j]) * gain.data[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh;
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double xh = (xr[j] - mean) * rstd;
              const double dxh = static_cast<double>(gy[j]) * gain.data[j];
              gx[j] += static_cast<T>(rstd * (dxh - inv_d * sum_dxh - xh * inv_d * sum_dxh_xh));
            }
          }
        }
        break;
      }
      case Op::kEmbeddingGather: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          const std::size_t d = n.value.dim(1);
          for (std::size_t i = 0; i < n.indices.size(); ++i) {
            T* dst = gb.ptr() + static_cast<std::size_t>(n.indices[i]) * d;
            const T* src = g.ptr() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
          }
        }
        break;
      }
      case Op::kGatherRows: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          const std::size_t d = n.value.dim(1);
          for (std::size_t i = 0; i < n.indices.size(); ++i) {
            T* dst = gb.ptr() + static_cast<std::size_t>(n.indices[i]) * d;
            const T* src = g.ptr() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
          }
        }
        break;
      }
      case Op::kSplitHeads: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          const std::size_t hd = n.value.dim(2), d = n.heads * hd;
          for (std::size_t b = 0; b < n.batch; ++b)
            for (std::size_t l = 0; l < n.seq; ++l) {
              T* dst = gb.ptr() + (b * n.seq + l) * d;
              for (std::size_t h = 0; h < n.heads; ++h) {
                const T* src = g.ptr() + ((b * n.heads + h) * n.seq + l) * hd;
                for (std::size_t c = 0; c < hd; ++c) dst[h * hd + c] += src[c];
              }
            }
        }
        break;
      }
      case Op::kMergeHeads: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          const std::size_t d = n.value.dim(1), hd = d / n.heads;
          for (std::size_t b = 0; b < n.batch; ++b)
            for (std::size_t h = 0; h < n.heads; ++h)
              for (std::size_t l = 0; l < n.seq; ++l) {
                T* dst = gb.ptr() + ((b * n.heads + h) * n.seq + l) * hd;
                const T* src = g.ptr() + (b * n.seq + l) * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dst[c] += src[c];
              }
        }
        break;
      }
      case Op::kMeanPoolRows: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          const std::size_t d = n.value.dim(1);
          for (std::size_t b = 0; b < n.batch; ++b) {
            const T inv = n.aux.data[b];
            const T* src = g.ptr() + b * d;
            for (std::size_t l = 0; l < n.seq; ++l) {
              if (!n.weights[b * n.seq + l]) continue;
              T* dst = gb.ptr() + (b * n.seq + l) * d;
              for (std::size_t j = 0; j < d; ++j) dst[j] += src[j] * inv;
            }
          }
        }
        break;
      }
      case Op::kCrossEntropy: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          const std::size_t rows = n.aux.dim(0), v = n.aux.dim(1);
          const T scale = g.data[0] / static_cast<T>(rows);
          for (std::size_t i = 0; i < rows; ++i) {
            const T* p = n.aux.ptr() + i * v;
            T* gx = gb.ptr() + i * v;
            for (std::size_t j = 0; j < v; ++j) gx[j] += scale * p[j];
            gx[n.indices[i]] -= scale;
          }
        }
        break;
      }
      case Op::kSoftCrossEntropy: {
        if (wants(n.in[0])) {
          auto& gb = grad_buf(n.in[0]);
          const std::size_t rows = n.aux.dim(0), v = n.aux.dim(1);
          const T scale = g.data[0] / static_cast<T>(rows);
          for (std::size_t i = 0; i < rows; ++i) {
            const T* p = n.aux.ptr() + i * v;
            const T* t = n.aux2.ptr() + i * v;
            T* gx = gb.ptr() + i * v;
            for (std::size_t j = 0; j < v; ++j) gx[j] += scale * (p[j] - t[j]);
          }
        }
        break;
      }
      case Op::kQuadPenalty: {
        if (wants(n.in[0])) {
          const auto& x = val(n.in[0]);
          auto& gb = grad_buf(n.in[0]);
          const bool weighted = n.aux2.numel() > 0;
          const T scale = g.data[0] * n.c;
          for (std::size_t i = 0; i < x.numel(); ++i) {
            const T w = weighted ? n.aux2.data[i] : T(1);
            gb.data[i] += scale * w * (x.data[i] - n.aux.data[i]);
          }
        }
        break;
      }
    }
  }

  static constexpr double kLayerNormEps = 1e-5;

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

}  // namespace cltune
