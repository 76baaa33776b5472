// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cltune/corpus.hpp"
#include "cltune/graph.hpp"
#include "cltune/rng.hpp"
#include "cltune/tensor.hpp"

namespace cltune {

/// Flat per-parameter derivative vector, aligned with the canonical
/// parameter order defined by ParamLayout.
using Gradient = std::vector<float>;

struct ModelConfig {
  int vocab_size = 0;
  int max_seq_len = 0;
  int d_model = 0;
  int n_layers = 0;
  int n_heads = 0;
  int d_ff = 0;
  std::uint64_t seed = 0;

  void validate() const {
    require(vocab_size >= kFirstRegularToken, "vocab_size must leave room for special tokens");
    require(max_seq_len > 0 && d_model > 0 && n_layers > 0 && n_heads > 0 && d_ff > 0,
            "model dimensions must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}, {"d_model", d_model},
            {"n_layers", n_layers},     {"n_heads", n_heads},         {"d_ff", d_ff},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }

  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

enum class ParamRegion { kEmbedding, kBlock, kHead };

struct ParamSlice {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  ParamRegion region = ParamRegion::kEmbedding;
  bool is_weight_matrix = false;  // false: bias or layer-norm parameter
};

/// The single canonical parameter ordering: embeddings, then each encoder
/// block in index order, then the output head. Every flat vector in the
/// system (parameters, gradients, fisher, anchors) uses this order.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
    const std::size_t ff = static_cast<std::size_t>(cfg.d_ff);
    add("tok_emb", {v, d}, ParamRegion::kEmbedding, true);
    add("pos_emb", {static_cast<std::size_t>(cfg.max_seq_len), d}, ParamRegion::kEmbedding, true);
    add("emb_ln_gain", {d}, ParamRegion::kEmbedding, false);
    add("emb_ln_bias", {d}, ParamRegion::kEmbedding, false);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add(p + "wq", {d, d}, ParamRegion::kBlock, true);
      add(p + "bq", {d}, ParamRegion::kBlock, false);
      add(p + "wk", {d, d}, ParamRegion::kBlock, true);
      add(p + "bk", {d}, ParamRegion::kBlock, false);
      add(p + "wv", {d, d}, ParamRegion::kBlock, true);
      add(p + "bv", {d}, ParamRegion::kBlock, false);
      add(p + "wo", {d, d}, ParamRegion::kBlock, true);
      add(p + "bo", {d}, ParamRegion::kBlock, false);
      add(p + "ln1_gain", {d}, ParamRegion::kBlock, false);
      add(p + "ln1_bias", {d}, ParamRegion::kBlock, false);
      add(p + "w_ff1", {d, ff}, ParamRegion::kBlock, true);
      add(p + "b_ff1", {ff}, ParamRegion::kBlock, false);
      add(p + "w_ff2", {ff, d}, ParamRegion::kBlock, true);
      add(p + "b_ff2", {d}, ParamRegion::kBlock, false);
      add(p + "ln2_gain", {d}, ParamRegion::kBlock, false);
      add(p + "ln2_bias", {d}, ParamRegion::kBlock, false);
    }
    add("head_w", {d, v}, ParamRegion::kHead, true);
    add("head_b", {v}, ParamRegion::kHead, false);
  }

  const std::vector<ParamSlice>& slices() const { return slices_; }
  std::size_t total_size() const { return total_; }

  const ParamSlice& slice(const std::string& name) const {
    for (const auto& s : slices_)
      if (s.name == name) return s;
    throw Error("no parameter slice named " + name);
  }

 private:
  void add(std::string name, Shape shape, ParamRegion region, bool weight) {
    ParamSlice s;
    s.name = std::move(name);
    s.size = Tensor<float>::count(shape);
    s.shape = std::move(shape);
    s.offset = total_;
    s.region = region;
    s.is_weight_matrix = weight;
    total_ += s.size;
    slices_.push_back(std::move(s));
  }

  std::vector<ParamSlice> slices_;
  std::size_t total_ = 0;
};

/// Flat model parameters bound to the config that defines their layout.
struct ParamVector {
  std::vector<float> values;
  std::uint64_t config_hash = 0;

  std::size_t size() const { return values.size(); }
};

/// Deterministic initialization: weight matrices are uniform with the
/// usual sqrt(6/(fan_in+fan_out)) bound, biases and layer-norm offsets are
/// zero, layer-norm gains are one.
inline ParamVector init_params(const ModelConfig& cfg) {
  const ParamLayout layout(cfg);
  ParamVector p;
  p.config_hash = cfg.hash();
  p.values.assign(layout.total_size(), 0.0f);
  RngStream rng(mix_seed(cfg.seed, fnv1a64("param-init")));
  for (const auto& s : layout.slices()) {
    float* dst = p.values.data() + s.offset;
    if (s.is_weight_matrix) {
      const float fan_in = static_cast<float>(s.shape[0]);
      const float fan_out = static_cast<float>(s.shape.size() > 1 ? s.shape[1] : s.shape[0]);
      const float bound = std::sqrt(6.0f / (fan_in + fan_out));
      for (std::size_t i = 0; i < s.size; ++i) dst[i] = rng.next_uniform(-bound, bound);
    } else if (s.name.find("gain") != std::string::npos) {
      for (std::size_t i = 0; i < s.size; ++i) dst[i] = 1.0f;
    }
    // biases and layer-norm offsets stay exactly zero
  }
  return p;
}

/// Unflattened view of one parameter slice.
template <class T>
Tensor<T> slice_tensor(const ParamSlice& s, std::span<const T> flat) {
  Tensor<T> t(s.shape);
  for (std::size_t i = 0; i < s.size; ++i) t.data[i] = flat[s.offset + i];
  return t;
}

inline std::vector<Tensor<float>> unflatten(const ParamLayout& layout, const ParamVector& p) {
  require(p.values.size() == layout.total_size(), "parameter vector length mismatch");
  std::vector<Tensor<float>> out;
  out.reserve(layout.slices().size());
  for (const auto& s : layout.slices())
    out.push_back(slice_tensor<float>(s, std::span<const float>(p.values)));
  return out;
}

inline ParamVector flatten(const ParamLayout& layout, const std::vector<Tensor<float>>& tensors,
                           std::uint64_t config_hash) {
  require(tensors.size() == layout.slices().size(), "flatten: slice count mismatch");
  ParamVector p;
  p.config_hash = config_hash;
  p.values.assign(layout.total_size(), 0.0f);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& s = layout.slices()[i];
    require(tensors[i].shape == s.shape, "flatten: shape mismatch at " + s.name);
    for (std::size_t j = 0; j < s.size; ++j) p.values[s.offset + j] = tensors[i].data[j];
  }
  return p;
}

/// One tape holding the model parameters as leaves. Several losses (target
/// batch, source batch, penalties) can be added before a single backward
/// pass; the parameter leaves are shared, so gradients accumulate exactly
/// as the combined loss dictates.
template <class T>
class ModelTape {
 public:
  using NodeId = typename Graph<T>::NodeId;

  ModelTape(const ModelConfig& cfg, std::span<const T> params, bool trainable = true)
      : cfg_(cfg), layout_(cfg) {
    require(params.size() == layout_.total_size(),
            "parameter vector has " + std::to_string(params.size()) + " entries, layout needs " +
                std::to_string(layout_.total_size()));
    param_nodes_.reserve(layout_.slices().size());
    for (const auto& s : layout_.slices()) {
      Tensor<T> t = slice_tensor<T>(s, params);
      param_nodes_.push_back(trainable ? graph_.parameter(std::move(t))
                                       : graph_.constant(std::move(t)));
    }
  }

  Graph<T>& graph() { return graph_; }
  const ParamLayout& layout() const { return layout_; }
  const std::vector<NodeId>& param_nodes() const { return param_nodes_; }

  struct EncoderOut {
    NodeId final_hidden;           // (B*L, d)
    std::vector<NodeId> stages;    // embedding output + each block output
  };

  /// Runs the encoder over a batch. Padding positions are excluded from
  /// attention via an additive key bias.
  EncoderOut encode(const MaskedBatch& batch) {
    require(batch.seq_len <= cfg_.max_seq_len, "batch seq_len exceeds max_seq_len");
    const std::size_t b = static_cast<std::size_t>(batch.batch);
    const std::size_t l = static_cast<std::size_t>(batch.seq_len);
    const std::size_t heads = static_cast<std::size_t>(cfg_.n_heads);
    const T inv_sqrt_hd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.d_model / cfg_.n_heads)));

    std::vector<std::int32_t> pos_ids(b * l);
    for (std::size_t i = 0; i < b * l; ++i) pos_ids[i] = static_cast<std::int32_t>(i % l);

    Tensor<T> key_bias({b, l});
    for (std::size_t i = 0; i < b * l; ++i)
      key_bias.data[i] = batch.attention_mask[i] ? T(0) : T(-1e9);
    const NodeId bias = graph_.constant(std::move(key_bias));

    NodeId h = graph_.add(graph_.embedding_gather(node("tok_emb"), batch.input_ids),
                          graph_.embedding_gather(node("pos_emb"), pos_ids));
    h = graph_.layer_norm(h, node("emb_ln_gain"), node("emb_ln_bias"));

    EncoderOut out;
    out.stages.push_back(h);
    for (int layer = 0; layer < cfg_.n_layers; ++layer) {
      const std::string p = "layer" + std::to_string(layer) + ".";
      const NodeId q = graph_.split_heads(linear(h, p + "wq", p + "bq"), b, l, heads);
      const NodeId k = graph_.split_heads(linear(h, p + "wk", p + "bk"), b, l, heads);
      const NodeId v = graph_.split_heads(linear(h, p + "wv", p + "bv"), b, l, heads);
      NodeId scores = graph_.scale(graph_.batch_matmul_nt(q, k), inv_sqrt_hd);
      scores = graph_.attention_bias(scores, bias, heads);
      const NodeId attn = graph_.softmax(scores);
      const NodeId ctx = graph_.merge_heads(graph_.batch_matmul(attn, v), b, l, heads);
      const NodeId att_out = linear(ctx, p + "wo", p + "bo");
      h = graph_.layer_norm(graph_.add(h, att_out), node(p + "ln1_gain"), node(p + "ln1_bias"));
      const NodeId mid = graph_.gelu(linear(h, p + "w_ff1", p + "b_ff1"));
      const NodeId ff_out = linear(mid, p + "w_ff2", p + "b_ff2");
      h = graph_.layer_norm(graph_.add(h, ff_out), node(p + "ln2_gain"), node(p + "ln2_bias"));
      out.stages.push_back(h);
    }
    out.final_hidden = h;
    return out;
  }

  /// Vocabulary logits at the batch's masked positions, (M, V).
  NodeId mlm_logits(const MaskedBatch& batch) {
    require(!batch.positions.empty(), "batch has no masked positions");
    const EncoderOut enc = encode(batch);
    const NodeId picked = graph_.gather_rows(enc.final_hidden, batch.positions);
    return linear(picked, "head_w", "head_b");
  }

  /// Mean masked-token cross-entropy for the batch.
  NodeId mlm_loss(const MaskedBatch& batch) {
    return graph_.cross_entropy(mlm_logits(batch), batch.labels);
  }

  /// (lambda/2) sum w_i (theta_i - anchor_i)^2 over all parameters.
  /// Pass an empty fisher vector for uniform weights.
  NodeId penalty(std::span<const float> anchor, std::span<const float> fisher, T lambda) {
    require(anchor.size() == layout_.total_size(), "anchor length mismatch");
    require(fisher.empty() || fisher.size() == layout_.total_size(), "fisher length mismatch");
    NodeId total = -1;
    for (std::size_t i = 0; i < layout_.slices().size(); ++i) {
      const auto& s = layout_.slices()[i];
      Tensor<T> a(s.shape);
      for (std::size_t j = 0; j < s.size; ++j) a.data[j] = static_cast<T>(anchor[s.offset + j]);
      Tensor<T> w;
      if (!fisher.empty()) {
        w = Tensor<T>(s.shape);
        for (std::size_t j = 0; j < s.size; ++j) w.data[j] = static_cast<T>(fisher[s.offset + j]);
      }
      const NodeId part =
          graph_.quadratic_penalty(param_nodes_[i], std::move(a), std::move(w), lambda);
      total = (total < 0) ? part : graph_.add(total, part);
    }
    return total;
  }

  double value(NodeId id) const { return static_cast<double>(graph_.value(id).data[0]); }

  void backward(NodeId root) { graph_.backward(root); }

  /// Flat gradient over all parameters in canonical order, in the tape's
  /// own element type.
  std::vector<T> collect_raw() {
    std::vector<T> g(layout_.total_size(), T(0));
    for (std::size_t i = 0; i < layout_.slices().size(); ++i) {
      const auto& s = layout_.slices()[i];
      const auto& t = graph_.gradient(param_nodes_[i]);
      for (std::size_t j = 0; j < s.size; ++j) g[s.offset + j] = t.data[j];
    }
    return g;
  }

  Gradient collect_gradient() {
    const auto raw = collect_raw();
    return Gradient(raw.begin(), raw.end());
  }

 private:
  NodeId node(const std::string& name) {
    const auto& slices = layout_.slices();
    for (std::size_t i = 0; i < slices.size(); ++i)
      if (slices[i].name == name) return param_nodes_[i];
    throw Error("no parameter slice named " + name);
  }

  NodeId linear(NodeId x, const std::string& w, const std::string& b) {
    return graph_.add_row(graph_.matmul(x, node(w)), node(b));
  }

  ModelConfig cfg_;
  ParamLayout layout_;
  Graph<T> graph_;
  std::vector<NodeId> param_nodes_;
};

// --------------------------------------------------------------------------
// Plain-value conveniences over the tape.

inline void check_param_compat(const ModelConfig& cfg, const ParamVector& p) {
  require(p.config_hash == cfg.hash(), "parameter vector was built for a different model config");
  require(p.values.size() == ParamLayout(cfg).total_size(), "parameter vector length mismatch");
}

inline double mlm_loss(const ModelConfig& cfg, const ParamVector& params,
                       const MaskedBatch& batch) {
  check_param_compat(cfg, params);
  ModelTape<float> tape(cfg, params.values, /*trainable=*/false);
  return tape.value(tape.mlm_loss(batch));
}

inline std::pair<double, Gradient> mlm_loss_grad(const ModelConfig& cfg, const ParamVector& params,
                                                 const MaskedBatch& batch) {
  check_param_compat(cfg, params);
  ModelTape<float> tape(cfg, params.values);
  const auto loss = tape.mlm_loss(batch);
  tape.backward(loss);
  return {tape.value(loss), tape.collect_gradient()};
}

/// Per-example concatenation of mean-pooled hidden states from the
/// embedding output and every block output: dimension (n_layers+1)*d_model.
inline std::vector<std::vector<float>> hidden_representations(const ModelConfig& cfg,
                                                              const ParamVector& params,
                                                              const MaskedBatch& batch) {
  check_param_compat(cfg, params);
  ModelTape<float> tape(cfg, params.values, /*trainable=*/false);
  const auto enc = tape.encode(batch);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  std::vector<std::vector<float>> reps(batch.batch,
                                       std::vector<float>((cfg.n_layers + 1) * d));
  for (std::size_t stage = 0; stage < enc.stages.size(); ++stage) {
    const auto pooled = tape.graph().mean_pool_rows(enc.stages[stage], batch.attention_mask,
                                                    static_cast<std::size_t>(batch.batch));
    const auto& t = tape.graph().value(pooled);
    for (int b = 0; b < batch.batch; ++b)
      for (std::size_t j = 0; j < d; ++j) reps[b][stage * d + j] = t.data[b * d + j];
  }
  return reps;
}

/// Teacher-side logits (no gradients), used by distillation.
inline Tensor<float> mlm_logits_value(const ModelConfig& cfg, const ParamVector& params,
                                      const MaskedBatch& batch) {
  check_param_compat(cfg, params);
  ModelTape<float> tape(cfg, params.values, /*trainable=*/false);
  return tape.graph().value(tape.mlm_logits(batch));
}

}  // namespace cltune
