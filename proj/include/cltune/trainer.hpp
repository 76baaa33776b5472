// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cltune/corpus.hpp"
#include "cltune/metrics.hpp"
#include "cltune/model.hpp"
#include "cltune/strategies.hpp"

namespace cltune {

enum class OptimizerKind { kSgd, kAdam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer: " + s);
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 3e-4;
  int warmup_steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  long t = 0;  // completed update count
  std::vector<float> m, v;
};

/// Learning rate after `t` updates (1-based): linear warmup, then flat.
inline double lr_at(const OptimizerConfig& cfg, long t) {
  if (cfg.warmup_steps <= 0) return cfg.learning_rate;
  const double ramp = static_cast<double>(t) / static_cast<double>(cfg.warmup_steps);
  return cfg.learning_rate * std::min(1.0, ramp);
}

inline void optimizer_step(std::vector<float>& params, const Gradient& grad,
                           OptimizerState& state, const OptimizerConfig& cfg) {
  require(params.size() == grad.size(), "optimizer: parameter/gradient length mismatch");
  state.t += 1;
  const double lr = lr_at(cfg, state.t);
  if (cfg.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const float upd = static_cast<float>(lr * grad[i]);
      if (!std::isfinite(upd)) throw NumericsError("non-finite sgd update");
      params[i] -= upd;
    }
    return;
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0f);
    state.v.assign(params.size(), 0.0f);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    const double upd = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    if (!std::isfinite(upd)) throw NumericsError("non-finite adam update");
    params[i] -= static_cast<float>(upd);
  }
}

enum class Phase { kPretrain, kDomainTune };

inline const char* phase_name(Phase p) {
  return p == Phase::kPretrain ? "pretrain" : "domain-tune";
}

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  long steps = 0;
  int batch_size = 8;
  int seq_len = 64;
  OptimizerConfig optimizer;
  long eval_every = 0;       // 0: only at step 0 and the final step
  long checkpoint_every = 0; // 0: never mid-run
  int eval_subsets = 5;
  double eval_fraction = 0.5;
  std::uint64_t seed_base = 1;

  void validate() const {
    require(steps > 0, "steps must be positive");
    require(batch_size > 0 && seq_len > 0, "batch_size and seq_len must be positive");
    require(eval_every <= steps, "eval_every must not exceed steps");
    require(optimizer.learning_rate > 0, "learning_rate must be positive");
  }
};

using Row = std::vector<std::int32_t>;

/// Deterministic epoch-reshuffled order over row indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_rows, RngStream stream) : n_(n_rows), rng_(std::move(stream)) {
    require(n_rows > 0, "sampler needs at least one row");
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      if (pos_ == n_) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_ = 0, pos_ = 0;
  std::vector<std::size_t> order_;
  RngStream rng_;
};

inline std::vector<Row> select_rows(const std::vector<Row>& rows,
                                    const std::vector<std::size_t>& idx) {
  std::vector<Row> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(rows[i]);
  return out;
}

// --------------------------------------------------------------------------
// Validation sets: masked once at setup, reused for every eval event.

struct MaskedRow {
  Row ids;
  std::vector<std::uint8_t> attn;
  std::vector<std::int32_t> positions;  // in-row masked positions
  std::vector<std::int32_t> labels;
};

inline std::vector<MaskedRow> make_val_set(const std::vector<Row>& rows, RngStream rng,
                                           int vocab_size, const std::string& stream_id) {
  std::vector<MaskedRow> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    const auto b = mask_batch({row}, rng, vocab_size, stream_id);
    MaskedRow m;
    m.ids.assign(b.input_ids.begin(), b.input_ids.end());
    m.attn = b.attention_mask;
    m.positions = b.mask_positions[0];
    m.labels = b.labels;
    out.push_back(std::move(m));
  }
  return out;
}

inline MaskedBatch merge_rows(const std::vector<MaskedRow>& rows,
                              const std::vector<std::size_t>& idx) {
  require(!idx.empty(), "merge_rows: empty selection");
  MaskedBatch b;
  b.batch = static_cast<int>(idx.size());
  b.seq_len = static_cast<int>(rows[idx[0]].ids.size());
  b.rng_stream_id = "val";
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& m = rows[idx[r]];
    b.input_ids.insert(b.input_ids.end(), m.ids.begin(), m.ids.end());
    b.attention_mask.insert(b.attention_mask.end(), m.attn.begin(), m.attn.end());
    b.mask_positions.push_back(m.positions);
    for (std::size_t i = 0; i < m.positions.size(); ++i) {
      b.positions.push_back(static_cast<std::int32_t>(r) * b.seq_len + m.positions[i]);
      b.labels.push_back(m.labels[i]);
    }
  }
  return b;
}

struct EvalResult {
  double mean = 0;
  std::vector<double> per_subset;
};

/// Mean masked-LM loss over `n_subsets` random half-samples of the
/// validation rows; each subset is drawn without replacement.
inline EvalResult evaluate(const ModelConfig& cfg, const ParamVector& params,
                           const std::vector<MaskedRow>& val, int n_subsets, double fraction,
                           RngStream& rng) {
  require(!val.empty(), "evaluate: empty validation set");
  require(fraction > 0.0 && fraction <= 1.0, "evaluate: fraction must be in (0,1]");
  require(n_subsets > 0, "evaluate: n_subsets must be positive");
  const std::size_t take =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(val.size()))));

  EvalResult res;
  double acc = 0;
  for (int s = 0; s < n_subsets; ++s) {
    auto idx = rng.sample_without_replacement(val.size(), take);
    std::sort(idx.begin(), idx.end());  // canonical batching order
    double ce = 0;
    std::size_t positions = 0;
    for (std::size_t start = 0; start < idx.size(); start += 32) {
      std::vector<std::size_t> chunk(idx.begin() + start,
                                     idx.begin() + std::min(idx.size(), start + 32));
      const auto batch = merge_rows(val, chunk);
      const double mean_loss = mlm_loss(cfg, params, batch);
      ce += mean_loss * static_cast<double>(batch.labels.size());
      positions += batch.labels.size();
    }
    const double subset_mean = ce / static_cast<double>(positions);
    res.per_subset.push_back(subset_mean);
    acc += subset_mean;
  }
  res.mean = acc / static_cast<double>(n_subsets);
  return res;
}

// --------------------------------------------------------------------------
// The training loop shared by pretraining and domain-tuning.

struct RunInputs {
  ModelConfig model;
  TrainConfig train;
  StrategyConfig strategy;            // SDT for pretraining
  ParamVector init;
  std::vector<Row> train_rows;        // rows of the domain being tuned on
  std::vector<Row> source_train_rows; // rehearsal / GEM / distillation source pool
  std::vector<Row> source_val_rows;
  std::vector<Row> target_val_rows;   // empty during pretraining
};

using CheckpointHook = std::function<void(long step, const ParamVector&)>;

/// Runs the loop and returns the final parameters. Eval events fire at
/// step 0, every eval_every steps, and at the final step; they measure the
/// fixed pre-masked validation sets.
inline ParamVector run_training(const RunInputs& in, MetricsWriter& metrics,
                                const CheckpointHook& checkpoint_hook = {}) {
  in.train.validate();
  in.strategy.validate();
  in.model.validate();
  check_param_compat(in.model, in.init);
  require(!in.train_rows.empty(), "no training rows");
  const bool tuning = in.train.phase == Phase::kDomainTune;
  const std::string strategy_label =
      tuning ? strategy_name(in.strategy.kind) : "pretrain";

  const RngSet rng(in.train.seed_base);
  auto order_stream = rng.stream("data-order");
  auto mask_train_stream = rng.stream(tuning ? "masking-target" : "masking-source");
  auto source_order_stream = rng.stream("rehearsal-sampling");
  auto mask_source_stream = rng.stream("masking-source");

  const auto source_val = make_val_set(in.source_val_rows, rng.stream("masking-source-val"),
                                       in.model.vocab_size, "masking-source-val");
  const auto target_val =
      in.target_val_rows.empty()
          ? std::vector<MaskedRow>{}
          : make_val_set(in.target_val_rows, rng.stream("masking-target-val"),
                         in.model.vocab_size, "masking-target-val");

  BatchSampler train_sampler(in.train_rows.size(), order_stream);
  std::optional<BatchSampler> source_sampler;
  const bool needs_fresh_source = in.strategy.kind == StrategyKind::kGem ||
                                  in.strategy.kind == StrategyKind::kDistillation;
  if (needs_fresh_source) {
    require(!in.source_train_rows.empty(), "strategy needs source training rows");
    source_sampler.emplace(in.source_train_rows.size(), std::move(source_order_stream));
  }

  SourceAccess source;
  source.mask_rows = [&](const std::vector<Row>& rows) {
    return mask_batch(rows, mask_source_stream, in.model.vocab_size, "masking-source");
  };
  source.fresh_batch = [&]() {
    const auto idx = source_sampler->next(static_cast<std::size_t>(in.train.batch_size));
    return mask_batch(select_rows(in.source_train_rows, idx), mask_source_stream,
                      in.model.vocab_size, "masking-source");
  };

  ParamVector params = in.init;
  OptimizerState opt_state;

  auto eval_event = [&](long step) {
    MetricsRecord r;
    r.step = step;
    r.phase = phase_name(in.train.phase);
    r.strategy = strategy_label;
    r.seed = in.train.seed_base;
    std::map<std::string, double> losses;
    const auto t0 = std::chrono::steady_clock::now();
    {
      auto eval_rng = RngStream(mix_seed(rng.stream_seed("eval"), static_cast<std::uint64_t>(step)));
      losses["source_val"] = evaluate(in.model, params, source_val, in.train.eval_subsets,
                                      in.train.eval_fraction, eval_rng)
                                 .mean;
    }
    if (!target_val.empty()) {
      auto eval_rng = RngStream(
          mix_seed(rng.stream_seed("eval-target"), static_cast<std::uint64_t>(step)));
      losses["target_val"] = evaluate(in.model, params, target_val, in.train.eval_subsets,
                                      in.train.eval_fraction, eval_rng)
                                 .mean;
    }
    r.eval_losses = std::move(losses);
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    metrics.write(r);
    return r;
  };

  eval_event(0);

  double initial_loss = 0;
  int divergent_streak = 0;
  for (long step = 1; step <= in.train.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto idx = train_sampler.next(static_cast<std::size_t>(in.train.batch_size));
    const auto batch =
        mask_batch(select_rows(in.train_rows, idx), mask_train_stream, in.model.vocab_size,
                   tuning ? "masking-target" : "masking-source");

    const auto outcome = strategy_step(in.strategy, in.model, params, batch, source);
    optimizer_step(params.values, outcome.update_gradient, opt_state, in.train.optimizer);

    MetricsRecord r;
    r.step = step;
    r.phase = phase_name(in.train.phase);
    r.strategy = strategy_label;
    r.seed = in.train.seed_base;
    r.target_loss = outcome.target_loss;
    r.source_loss = outcome.source_loss;
    r.penalty = outcome.penalty;
    if (in.strategy.kind == StrategyKind::kGem) r.gem_flag = outcome.projection_applied;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    metrics.write(r);

    if (step == 1) initial_loss = outcome.target_loss;
    divergent_streak = (outcome.target_loss > 10.0 * initial_loss) ? divergent_streak + 1 : 0;
    if (divergent_streak >= 100)
      throw NumericsError("training diverged: loss above 10x the initial value for 100 "
                          "consecutive steps (step " + std::to_string(step) + ")");

    if (in.train.checkpoint_every > 0 && step % in.train.checkpoint_every == 0 &&
        checkpoint_hook)
      checkpoint_hook(step, params);
    if (in.train.eval_every > 0 && step % in.train.eval_every == 0 && step != in.train.steps)
      eval_event(step);
  }

  eval_event(in.train.steps);
  metrics.flush();
  return params;
}

}  // namespace cltune
