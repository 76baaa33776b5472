// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale transfer measurement: synthetic token-statistic classification
// tasks, a two-layer probe head, mutual-information gaps over frozen
// representations, and zero-shot domain-shift evaluation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cltune/corpus.hpp"
#include "cltune/model.hpp"
#include "cltune/trainer.hpp"

namespace cltune {

/// label = (count of `token` in the row) > threshold
struct LabelRule {
  std::int32_t token = 0;
  int threshold = 0;
  bool operator==(const LabelRule&) const = default;
};

inline int rule_label(const LabelRule& rule, const Row& row) {
  int count = 0;
  for (auto t : row) count += (t == rule.token) ? 1 : 0;
  return count > rule.threshold ? 1 : 0;
}

struct ProbeTask {
  Domain domain = Domain::kTarget;
  int seq_len = 0;
  int n_train = 0;
  std::vector<Row> rows;             // train rows first, then test rows
  std::vector<std::int32_t> labels;  // aligned with rows
  LabelRule rule;
  std::uint64_t seed = 0;

  std::size_t n_test() const { return rows.size() - static_cast<std::size_t>(n_train); }
};

namespace detail {

inline std::vector<Row> probe_rows(const DomainSpec& spec, Domain domain, std::size_t n,
                                   int seq_len, std::uint64_t seed) {
  DomainSpec keyed = spec;
  keyed.seed = mix_seed(spec.seed, mix_seed(seed, fnv1a64("probe-task")));
  const auto stream =
      generate_domain(keyed, n * static_cast<std::size_t>(seq_len), domain, Split::kTrain);
  return pack_sequences(stream, seq_len);
}

inline int median_count(const std::vector<int>& counts) {
  std::vector<int> sorted = counts;
  std::sort(sorted.begin(), sorted.end());
  return sorted[sorted.size() / 2];
}

inline double minority_fraction(const std::vector<std::int32_t>& labels) {
  double ones = 0;
  for (auto l : labels) ones += l;
  const double frac = ones / static_cast<double>(labels.size());
  return std::min(frac, 1.0 - frac);
}

}  // namespace detail

/// Builds a binary task over fresh rows from the domain: the designated
/// token is chosen so the count-above-median labels are as balanced as the
/// domain allows. Faults when ten candidate tokens all leave the minority
/// class under 20%.
inline ProbeTask make_probe_task(const DomainSpec& spec, Domain domain, int n_train, int n_test,
                                 int seq_len, std::uint64_t seed) {
  require(n_train + n_test >= 100, "probe task needs at least 100 examples");
  require(seq_len > 0, "probe seq_len must be positive");
  ProbeTask task;
  task.domain = domain;
  task.seq_len = seq_len;
  task.n_train = n_train;
  task.seed = seed;
  task.rows = detail::probe_rows(spec, domain, static_cast<std::size_t>(n_train) + n_test,
                                 seq_len, seed);

  RngStream pick(mix_seed(seed, fnv1a64("designated-token")));
  double best_minority = -1;
  LabelRule best_rule;
  std::vector<std::int32_t> best_labels;
  for (int attempt = 0; attempt < 10; ++attempt) {
    LabelRule rule;
    rule.token =
        kFirstRegularToken + static_cast<std::int32_t>(pick.next_below(spec.alphabet_size));
    std::vector<int> counts;
    counts.reserve(task.rows.size());
    for (const auto& row : task.rows) {
      int c = 0;
      for (auto t : row) c += (t == rule.token) ? 1 : 0;
      counts.push_back(c);
    }
    rule.threshold = detail::median_count(counts);
    std::vector<std::int32_t> labels(task.rows.size());
    for (std::size_t i = 0; i < task.rows.size(); ++i)
      labels[i] = counts[i] > rule.threshold ? 1 : 0;
    const double minority = detail::minority_fraction(labels);
    if (minority > best_minority) {
      best_minority = minority;
      best_rule = rule;
      best_labels = std::move(labels);
    }
    if (best_minority >= 0.45) break;
  }
  if (best_minority < 0.20)
    throw Error("degenerate probe task: minority class stayed below 20% after 10 candidate "
                "tokens");
  task.rule = best_rule;
  task.labels = std::move(best_labels);
  return task;
}

/// Source and target task variants for the shift experiment. The label
/// rule (token and threshold) is derived once on the source sample and
/// shared verbatim by the target variant.
inline std::pair<ProbeTask, ProbeTask> make_shift_task_pair(const DomainSpec& source_spec,
                                                            const DomainSpec& target_spec,
                                                            int n_train, int n_test, int seq_len,
                                                            std::uint64_t seed) {
  ProbeTask source = make_probe_task(source_spec, Domain::kSource, n_train, n_test, seq_len, seed);
  ProbeTask target;
  target.domain = Domain::kTarget;
  target.seq_len = seq_len;
  target.n_train = n_train;
  target.seed = seed;
  target.rule = source.rule;
  target.rows = detail::probe_rows(target_spec, Domain::kTarget,
                                   static_cast<std::size_t>(n_train) + n_test, seq_len, seed);
  target.labels.reserve(target.rows.size());
  for (const auto& row : target.rows) target.labels.push_back(rule_label(target.rule, row));
  return {std::move(source), std::move(target)};
}

// --------------------------------------------------------------------------
// Two-layer probe head over fixed feature vectors.

struct ProbeConfig {
  int hidden_dim = 64;
  int steps = 500;
  int batch_size = 64;
  double learning_rate = 1e-2;
  double train_fraction = 1.0;  // fraction of the train split actually used
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::vector<float> head;  // w1, b1, w2, b2 flat
  double test_accuracy = 0;
  double test_mean_loglik = 0;  // mean log P(y|x) on the test split, <= 0
  int n_test = 0;
};

namespace detail {

struct HeadShape {
  int dim, hidden, classes;
  std::size_t w1() const { return static_cast<std::size_t>(dim) * hidden; }
  std::size_t w2() const { return static_cast<std::size_t>(hidden) * classes; }
  std::size_t total() const { return w1() + hidden + w2() + classes; }
};

inline std::vector<float> init_head(const HeadShape& s, std::uint64_t seed) {
  std::vector<float> head(s.total(), 0.0f);
  RngStream rng(mix_seed(seed, fnv1a64("probe-head-init")));
  const float b1 = std::sqrt(6.0f / static_cast<float>(s.dim + s.hidden));
  const float b2 = std::sqrt(6.0f / static_cast<float>(s.hidden + s.classes));
  for (std::size_t i = 0; i < s.w1(); ++i) head[i] = rng.next_uniform(-b1, b1);
  for (std::size_t i = 0; i < s.w2(); ++i)
    head[s.w1() + s.hidden + i] = rng.next_uniform(-b2, b2);
  return head;
}

/// Registers the head parameters on a graph and returns the logits node
/// for a feature matrix; `leaves` receives the four parameter node ids.
template <class T>
typename Graph<T>::NodeId head_logits(Graph<T>& g, const HeadShape& s,
                                      const std::vector<float>& head,
                                      typename Graph<T>::NodeId features,
                                      std::vector<typename Graph<T>::NodeId>* leaves) {
  const std::size_t d = s.dim, h = s.hidden, k = s.classes;
  auto take = [&](std::size_t off, Shape shape) {
    Tensor<T> t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<T>(head[off + i]);
    return leaves ? g.parameter(std::move(t)) : g.constant(std::move(t));
  };
  const auto w1 = take(0, {d, h});
  const auto b1 = take(s.w1(), {h});
  const auto w2 = take(s.w1() + h, {h, k});
  const auto b2 = take(s.w1() + h + s.w2(), {k});
  if (leaves) *leaves = {w1, b1, w2, b2};
  const auto hidden = g.tanh(g.add_row(g.matmul(features, w1), b1));
  return g.add_row(g.matmul(hidden, w2), b2);
}

inline Tensor<float> feature_tensor(const std::vector<float>& x, std::size_t n, int dim) {
  Tensor<float> t({n, static_cast<std::size_t>(dim)});
  std::copy(x.begin(), x.begin() + n * dim, t.data.begin());
  return t;
}

}  // namespace detail

/// Evaluates a trained head: accuracy and mean log-likelihood on features.
inline std::pair<double, double> probe_head_eval(const std::vector<float>& head, int dim,
                                                 int hidden, int classes,
                                                 const std::vector<float>& x,
                                                 const std::vector<std::int32_t>& y) {
  const detail::HeadShape shape{dim, hidden, classes};
  const std::size_t n = y.size();
  Graph<float> g;
  const auto feats = g.constant(detail::feature_tensor(x, n, dim));
  const auto logits = g.value(detail::head_logits(g, shape, head, feats, nullptr));
  double correct = 0, loglik = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * classes;
    int arg = 0;
    double mx = row[0];
    for (int c = 1; c < classes; ++c)
      if (row[c] > mx) {
        mx = row[c];
        arg = c;
      }
    correct += (arg == y[i]) ? 1 : 0;
    double lse = 0;
    for (int c = 0; c < classes; ++c) lse += std::exp(row[c] - mx);
    loglik += row[y[i]] - (std::log(lse) + mx);
  }
  return {correct / static_cast<double>(n), loglik / static_cast<double>(n)};
}

/// Trains the two-layer head with Adam on minibatches of the train split
/// and reports held-out accuracy and mean log-likelihood.
inline ProbeResult train_probe_head(const std::vector<float>& x_train,
                                    const std::vector<std::int32_t>& y_train,
                                    const std::vector<float>& x_test,
                                    const std::vector<std::int32_t>& y_test, int dim, int classes,
                                    const ProbeConfig& cfg) {
  require(!y_train.empty() && !y_test.empty(), "probe training needs train and test examples");
  require(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0,
          "train_fraction must be in (0,1]");
  const std::size_t n_train = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.train_fraction * y_train.size())));

  const detail::HeadShape shape{dim, cfg.hidden_dim, classes};
  std::vector<float> head = detail::init_head(shape, cfg.seed);

  BatchSampler sampler(n_train, RngStream(mix_seed(cfg.seed, fnv1a64("probe-batches"))));
  OptimizerConfig opt;
  opt.kind = OptimizerKind::kAdam;
  opt.learning_rate = cfg.learning_rate;
  OptimizerState state;

  const std::size_t bs = std::min<std::size_t>(cfg.batch_size, n_train);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(bs);
    std::vector<float> xb(bs * dim);
    std::vector<std::int32_t> yb(bs);
    for (std::size_t i = 0; i < bs; ++i) {
      std::copy(x_train.begin() + idx[i] * dim, x_train.begin() + (idx[i] + 1) * dim,
                xb.begin() + i * dim);
      yb[i] = y_train[idx[i]];
    }
    Graph<float> g;
    const auto feats = g.constant(detail::feature_tensor(xb, bs, dim));
    std::vector<Graph<float>::NodeId> leaves;
    const auto logits = detail::head_logits(g, shape, head, feats, &leaves);
    const auto loss = g.cross_entropy(logits, yb);
    g.backward(loss);

    Gradient grad;
    grad.reserve(shape.total());
    for (auto leaf : leaves) {
      const auto& t = g.gradient(leaf);
      grad.insert(grad.end(), t.data.begin(), t.data.end());
    }
    optimizer_step(head, grad, state, opt);
  }

  ProbeResult res;
  const auto [acc, ll] = probe_head_eval(head, dim, cfg.hidden_dim, classes, x_test, y_test);
  res.head = std::move(head);
  res.test_accuracy = acc;
  res.test_mean_loglik = ll;
  res.n_test = static_cast<int>(y_test.size());
  return res;
}

// --------------------------------------------------------------------------
// Encoder feature extraction.

/// Mean-pooled final hidden state per row, the downstream probe's input.
inline std::vector<float> pooled_final_features(const ModelConfig& cfg, const ParamVector& params,
                                                const std::vector<Row>& rows) {
  std::vector<float> out;
  out.reserve(rows.size() * static_cast<std::size_t>(cfg.d_model));
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  for (std::size_t start = 0; start < rows.size(); start += 64) {
    std::vector<Row> chunk(rows.begin() + start,
                           rows.begin() + std::min(rows.size(), start + 64));
    const auto reps = hidden_representations(cfg, params, plain_batch(chunk));
    for (const auto& r : reps)
      out.insert(out.end(), r.end() - static_cast<std::ptrdiff_t>(d), r.end());
  }
  return out;
}

/// Full layer-concatenated representation per row, the MI probe's input.
inline std::vector<float> full_representations(const ModelConfig& cfg, const ParamVector& params,
                                               const std::vector<Row>& rows) {
  std::vector<float> out;
  for (std::size_t start = 0; start < rows.size(); start += 64) {
    std::vector<Row> chunk(rows.begin() + start,
                           rows.begin() + std::min(rows.size(), start + 64));
    const auto reps = hidden_representations(cfg, params, plain_batch(chunk));
    for (const auto& r : reps) out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

// --------------------------------------------------------------------------
// Downstream finetuning probe and shift evaluation.

struct FinetuneResult {
  ProbeResult probe;
  ParamVector encoder;  // tuned copy when encoder finetuning is on
  bool encoder_tuned = false;
  LabelRule rule;
  int hidden_dim = 0;
};

/// Trains the classification head on the task's train split; when
/// `finetune_encoder` is set the encoder weights are updated jointly with
/// the head, otherwise the encoder stays frozen.
inline FinetuneResult finetune_probe(const ModelConfig& cfg, const ParamVector& params,
                                     const ProbeTask& task, const ProbeConfig& probe_cfg,
                                     bool finetune_encoder = false) {
  check_param_compat(cfg, params);
  FinetuneResult out;
  out.rule = task.rule;
  out.hidden_dim = probe_cfg.hidden_dim;
  out.encoder = params;
  out.encoder_tuned = finetune_encoder;

  const std::vector<Row> train_rows(task.rows.begin(), task.rows.begin() + task.n_train);
  const std::vector<Row> test_rows(task.rows.begin() + task.n_train, task.rows.end());
  const std::vector<std::int32_t> y_train(task.labels.begin(),
                                          task.labels.begin() + task.n_train);
  const std::vector<std::int32_t> y_test(task.labels.begin() + task.n_train, task.labels.end());

  if (!finetune_encoder) {
    const auto x_train = pooled_final_features(cfg, params, train_rows);
    const auto x_test = pooled_final_features(cfg, params, test_rows);
    out.probe = train_probe_head(x_train, y_train, x_test, y_test, cfg.d_model, 2, probe_cfg);
    return out;
  }

  // Joint finetuning: encoder parameters and head parameters share the tape.
  require(probe_cfg.train_fraction > 0.0 && probe_cfg.train_fraction <= 1.0,
          "train_fraction must be in (0,1]");
  const std::size_t n_train = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(probe_cfg.train_fraction * y_train.size())));
  const detail::HeadShape shape{cfg.d_model, probe_cfg.hidden_dim, 2};
  std::vector<float> head = detail::init_head(shape, probe_cfg.seed);
  ParamVector encoder = params;

  BatchSampler sampler(n_train, RngStream(mix_seed(probe_cfg.seed, fnv1a64("probe-batches"))));
  OptimizerConfig opt;
  opt.kind = OptimizerKind::kAdam;
  opt.learning_rate = probe_cfg.learning_rate;
  OptimizerState state;
  const std::size_t bs = std::min<std::size_t>(probe_cfg.batch_size, n_train);
  const std::size_t enc_n = encoder.values.size();

  double initial_loss = 0;
  int divergent_streak = 0;
  for (int step = 0; step < probe_cfg.steps; ++step) {
    const auto idx = sampler.next(bs);
    std::vector<Row> rows;
    std::vector<std::int32_t> yb(bs);
    rows.reserve(bs);
    for (std::size_t i = 0; i < bs; ++i) {
      rows.push_back(train_rows[idx[i]]);
      yb[i] = y_train[idx[i]];
    }
    const auto batch = plain_batch(rows);
    ModelTape<float> tape(cfg, encoder.values);
    const auto enc = tape.encode(batch);
    const auto pooled = tape.graph().mean_pool_rows(enc.final_hidden, batch.attention_mask,
                                                    static_cast<std::size_t>(batch.batch));
    std::vector<Graph<float>::NodeId> leaves;
    const auto logits = detail::head_logits(tape.graph(), shape, head, pooled, &leaves);
    const auto loss = tape.graph().cross_entropy(logits, yb);
    tape.backward(loss);

    Gradient joint = tape.collect_gradient();
    for (auto leaf : leaves) {
      const auto& t = tape.graph().gradient(leaf);
      joint.insert(joint.end(), t.data.begin(), t.data.end());
    }
    std::vector<float> flat = encoder.values;
    flat.insert(flat.end(), head.begin(), head.end());
    optimizer_step(flat, joint, state, opt);
    std::copy(flat.begin(), flat.begin() + enc_n, encoder.values.begin());
    std::copy(flat.begin() + enc_n, flat.end(), head.begin());

    const double l = tape.value(loss);
    if (step == 0) initial_loss = l;
    divergent_streak = (l > 10.0 * initial_loss) ? divergent_streak + 1 : 0;
    if (divergent_streak >= 100)
      throw NumericsError("probe finetuning diverged for 100 consecutive steps");
  }

  const auto x_test = pooled_final_features(cfg, encoder, test_rows);
  ProbeResult res;
  const auto [acc, ll] =
      probe_head_eval(head, cfg.d_model, probe_cfg.hidden_dim, 2, x_test, y_test);
  res.head = std::move(head);
  res.test_accuracy = acc;
  res.test_mean_loglik = ll;
  res.n_test = static_cast<int>(y_test.size());
  out.probe = std::move(res);
  out.encoder = std::move(encoder);
  return out;
}

/// Zero-shot evaluation of a finetuned probe on the paired task variant.
inline double domain_shift_eval(const ModelConfig& cfg, const FinetuneResult& finetuned,
                                const ProbeTask& eval_task) {
  if (!(finetuned.rule == eval_task.rule))
    throw Error("domain_shift_eval: label-rule mismatch between tasks");
  const std::vector<Row> test_rows(eval_task.rows.begin() + eval_task.n_train,
                                   eval_task.rows.end());
  const std::vector<std::int32_t> y_test(eval_task.labels.begin() + eval_task.n_train,
                                         eval_task.labels.end());
  const auto x_test = pooled_final_features(cfg, finetuned.encoder, test_rows);
  return probe_head_eval(finetuned.probe.head, cfg.d_model, finetuned.hidden_dim, 2, x_test,
                         y_test)
      .first;
}

// --------------------------------------------------------------------------
// Mutual-information probe.

/// Held-out mean log-likelihood: estimates I(Y; phi(X)) up to the constant
/// H(Y), so differences between models are MI differences.
struct MIEstimate {
  double value = 0;  // <= 0
  int n_test = 0;
};

inline MIEstimate mi_estimate(const std::vector<float>& reps_train,
                              const std::vector<std::int32_t>& y_train,
                              const std::vector<float>& reps_test,
                              const std::vector<std::int32_t>& y_test, int dim,
                              const ProbeConfig& cfg) {
  const auto res = train_probe_head(reps_train, y_train, reps_test, y_test, dim, 2, cfg);
  return {res.test_mean_loglik, res.n_test};
}

/// I(Y; phi_A(X)) - I(Y; phi_B(X)) estimated with paired probe seeds so
/// the estimator noise largely cancels.
inline double mi_gap(const ModelConfig& cfg, const ParamVector& params_a,
                     const ParamVector& params_b, const ProbeTask& task,
                     const ProbeConfig& probe_cfg) {
  check_param_compat(cfg, params_a);
  check_param_compat(cfg, params_b);
  const std::vector<Row> train_rows(task.rows.begin(), task.rows.begin() + task.n_train);
  const std::vector<Row> test_rows(task.rows.begin() + task.n_train, task.rows.end());
  const std::vector<std::int32_t> y_train(task.labels.begin(),
                                          task.labels.begin() + task.n_train);
  const std::vector<std::int32_t> y_test(task.labels.begin() + task.n_train, task.labels.end());
  const int dim = (cfg.n_layers + 1) * cfg.d_model;

  const auto a = mi_estimate(full_representations(cfg, params_a, train_rows), y_train,
                             full_representations(cfg, params_a, test_rows), y_test, dim,
                             probe_cfg);
  const auto b = mi_estimate(full_representations(cfg, params_b, train_rows), y_train,
                             full_representations(cfg, params_b, test_rows), y_test, dim,
                             probe_cfg);
  return a.value - b.value;
}

}  // namespace cltune
