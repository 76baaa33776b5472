// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
//
// The continual-learning mathematics: quadratic penalties anchored at the
// source-trained parameters, rehearsal and distillation auxiliary losses,
// empirical Fisher estimation, and the single-constraint gradient
// projection. Everything here is a pure function of flat vectors plus the
// per-step strategy contract used by the trainer.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cltune/corpus.hpp"
#include "cltune/model.hpp"

namespace cltune {

enum class StrategyKind { kSdt, kRehearsal, kL2, kEwc, kGem, kDistillation };

inline const char* strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::kSdt: return "sdt";
    case StrategyKind::kRehearsal: return "rh";
    case StrategyKind::kL2: return "l2";
    case StrategyKind::kEwc: return "ewc";
    case StrategyKind::kGem: return "gem";
    case StrategyKind::kDistillation: return "dis";
  }
  return "?";
}

inline StrategyKind parse_strategy(const std::string& s) {
  if (s == "sdt") return StrategyKind::kSdt;
  if (s == "rh") return StrategyKind::kRehearsal;
  if (s == "l2") return StrategyKind::kL2;
  if (s == "ewc") return StrategyKind::kEwc;
  if (s == "gem") return StrategyKind::kGem;
  if (s == "dis") return StrategyKind::kDistillation;
  throw ConfigError("unknown strategy: " + s);
}

/// Published default loss multipliers; GEM takes none and SDT is
/// unregularized.
inline double default_lambda(StrategyKind k) {
  switch (k) {
    case StrategyKind::kL2: return 1.0;
    case StrategyKind::kEwc: return 1e4;
    case StrategyKind::kDistillation: return 0.1;
    case StrategyKind::kRehearsal: return 0.1;
    default: return 0.0;
  }
}

/// Diagonal of the empirical Fisher information, aligned with the
/// canonical parameter order.
struct FisherDiagonal {
  std::vector<float> values;
  int n_batches_used = 0;
  std::uint64_t source_seed = 0;
};

inline double l2_penalty(std::span<const float> theta, std::span<const float> anchor,
                         double lambda) {
  if (theta.size() != anchor.size())
    throw ShapeError("l2_penalty: length mismatch " + std::to_string(theta.size()) + " vs " +
                     std::to_string(anchor.size()));
  double acc = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d = static_cast<double>(theta[i]) - static_cast<double>(anchor[i]);
    acc += d * d;
  }
  return 0.5 * lambda * acc;
}

inline double ewc_penalty(std::span<const float> theta, std::span<const float> anchor,
                          const FisherDiagonal& fisher, double lambda) {
  if (theta.size() != anchor.size() || theta.size() != fisher.values.size())
    throw ShapeError("ewc_penalty: length mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double f = fisher.values[i];
    if (f < 0) throw NumericsError("ewc_penalty: negative fisher entry at " + std::to_string(i));
    const double d = static_cast<double>(theta[i]) - static_cast<double>(anchor[i]);
    acc += f * d * d;
  }
  return 0.5 * lambda * acc;
}

/// Mean of elementwise squared gradients.
inline FisherDiagonal fisher_from_gradients(std::span<const Gradient> grads) {
  require(!grads.empty(), "fisher estimation needs at least one gradient");
  const std::size_t n = grads[0].size();
  std::vector<double> acc(n, 0.0);
  for (const auto& g : grads) {
    require(g.size() == n, "fisher estimation: gradient length mismatch");
    for (std::size_t i = 0; i < n; ++i)
      acc[i] += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  }
  FisherDiagonal f;
  f.n_batches_used = static_cast<int>(grads.size());
  f.values.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    f.values[i] = static_cast<float>(acc[i] / static_cast<double>(grads.size()));
  return f;
}

/// Empirical Fisher at fixed parameters: mean over batches of the squared
/// masked-LM gradient on source batches.
inline FisherDiagonal estimate_fisher_diagonal(const ModelConfig& cfg, const ParamVector& params,
                                               std::span<const MaskedBatch> source_batches) {
  require(!source_batches.empty(), "fisher estimation needs at least one source batch");
  std::vector<Gradient> grads;
  grads.reserve(source_batches.size());
  for (const auto& b : source_batches) grads.push_back(mlm_loss_grad(cfg, params, b).second);
  return fisher_from_gradients(grads);
}

inline double rehearsal_loss(double loss_t, double loss_s, double lambda) {
  return loss_t + lambda * loss_s;
}

/// Cross entropy between the teacher's and the student's predictive
/// distributions at the same masked positions, mean over positions.
inline double distillation_loss(const Tensor<float>& teacher_logits,
                                const Tensor<float>& student_logits) {
  if (!(teacher_logits.rank() == 2 && teacher_logits.same_shape(student_logits)))
    throw ShapeError("distillation_loss: logit shapes " + shape_string(teacher_logits.shape) +
                     " vs " + shape_string(student_logits.shape));
  const std::size_t n = teacher_logits.dim(0), v = teacher_logits.dim(1);
  require(n > 0, "distillation_loss: no positions");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* t = teacher_logits.ptr() + i * v;
    const float* s = student_logits.ptr() + i * v;
    double tmx = t[0], smx = s[0];
    for (std::size_t j = 1; j < v; ++j) {
      tmx = std::max(tmx, static_cast<double>(t[j]));
      smx = std::max(smx, static_cast<double>(s[j]));
    }
    double tsum = 0, ssum = 0;
    for (std::size_t j = 0; j < v; ++j) {
      tsum += std::exp(t[j] - tmx);
      ssum += std::exp(s[j] - smx);
    }
    const double s_lse = std::log(ssum) + smx;
    double row = 0;
    for (std::size_t j = 0; j < v; ++j)
      row -= std::exp(t[j] - tmx) / tsum * (s[j] - s_lse);
    total += row;
  }
  return total / static_cast<double>(n);
}

/// Converts logits (N,V) to row-wise softmax probabilities.
inline Tensor<float> softmax_rows_value(const Tensor<float>& logits) {
  Tensor<float> out(logits.shape);
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const float* x = logits.ptr() + i * v;
    float* y = out.ptr() + i * v;
    float mx = x[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double sum = 0;
    for (std::size_t j = 0; j < v; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (std::size_t j = 0; j < v; ++j) y[j] *= inv;
  }
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

/// Removes the negative component of g_t along g_s: if <g_t,g_s> >= 0 the
/// gradient passes through untouched, otherwise g = g_t - (<g_t,g_s>/<g_s,g_s>) g_s.
/// A zero source gradient makes the constraint vacuous.
///
/// The result is stored in float, whose rounding alone can push the inner
/// product to about -2^-24 |g||g_s|, far past the guaranteed bound. Each
/// refinement pass therefore aims a small positive margin into the
/// feasible halfspace instead of the exact boundary; the margin is a few
/// float ulps, well inside the oracle tolerance on |g - g_t|.
inline std::pair<Gradient, bool> gem_project(const Gradient& g_t, const Gradient& g_s) {
  if (g_t.size() != g_s.size())
    throw ShapeError("gem_project: length mismatch " + std::to_string(g_t.size()) + " vs " +
                     std::to_string(g_s.size()));
  const double ss = dot(g_s, g_s);
  const double ts = dot(g_t, g_s);
  if (ss == 0.0 || ts >= 0.0) return {g_t, false};

  const double ns = norm(g_s);
  Gradient g = g_t;
  double d = ts;
  double margin = 0.0;
  for (int pass = 0; pass < 16; ++pass) {
    const double coeff = (d - margin) / ss;
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = static_cast<float>(static_cast<double>(g[i]) - coeff * static_cast<double>(g_s[i]));
    d = dot(g, g_s);
    if (d >= 0.0) break;
    const double noise_scale = 1.2e-7 * norm(g) * ns;  // ~2 ulps of accumulated rounding
    margin = (margin == 0.0) ? noise_scale : margin * 2.0;
  }
  return {std::move(g), true};
}

/// Fixed set of source rows drawn once at strategy initialization and then
/// cycled in order.
struct RehearsalBuffer {
  std::vector<std::vector<std::int32_t>> rows;
  std::size_t cursor = 0;

  static RehearsalBuffer sample(const std::vector<std::vector<std::int32_t>>& source_rows,
                                std::size_t capacity, RngStream& rng) {
    require(!source_rows.empty(), "rehearsal buffer: no source rows");
    RehearsalBuffer b;
    const auto idx = rng.sample_without_replacement(source_rows.size(),
                                                    std::min(capacity, source_rows.size()));
    b.rows.reserve(idx.size());
    for (auto i : idx) b.rows.push_back(source_rows[i]);
    return b;
  }

  std::vector<std::vector<std::int32_t>> next(std::size_t count) {
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      out.push_back(rows[cursor]);
      cursor = (cursor + 1) % rows.size();
    }
    return out;
  }
};

/// Strategy identity plus the state each strategy needs. The trainer owns
/// the referenced artifacts; the config only wires them together.
struct StrategyConfig {
  StrategyKind kind = StrategyKind::kSdt;
  double lambda = 0.0;
  std::shared_ptr<const ParamVector> anchor;   // theta*_s for L2 / EWC
  std::shared_ptr<const FisherDiagonal> fisher;
  std::shared_ptr<RehearsalBuffer> buffer;     // RH; cursor advances per step
  std::shared_ptr<const ParamVector> teacher;  // M_s for distillation

  void validate() const {
    require(lambda >= 0.0, "lambda must be nonnegative");
    switch (kind) {
      case StrategyKind::kSdt:
      case StrategyKind::kGem:
        break;
      case StrategyKind::kL2:
        require(anchor != nullptr, "L2 requires an anchor parameter vector");
        break;
      case StrategyKind::kEwc:
        require(anchor != nullptr && fisher != nullptr, "EWC requires an anchor and a fisher diagonal");
        break;
      case StrategyKind::kRehearsal:
        require(buffer != nullptr && !buffer->rows.empty(), "rehearsal requires a sampled buffer");
        break;
      case StrategyKind::kDistillation:
        require(teacher != nullptr, "distillation requires a teacher parameter vector");
        break;
    }
  }
};

/// Everything a step measured, plus the gradient the optimizer should
/// apply.
struct StepOutcome {
  Gradient update_gradient;
  double target_loss = 0;
  std::optional<double> source_loss;
  std::optional<double> penalty;
  bool projection_applied = false;
};

/// How strategies reach source-domain data: `mask_rows` corrupts given
/// rows with the source masking stream (rehearsal buffer replay), and
/// `fresh_batch` draws and corrupts a new source batch (GEM,
/// distillation).
struct SourceAccess {
  std::function<MaskedBatch(const std::vector<std::vector<std::int32_t>>&)> mask_rows;
  std::function<MaskedBatch()> fresh_batch;
};

inline StepOutcome strategy_step(const StrategyConfig& strategy, const ModelConfig& cfg,
                                 const ParamVector& params, const MaskedBatch& target_batch,
                                 const SourceAccess& source) {
  strategy.validate();
  check_param_compat(cfg, params);
  StepOutcome out;

  switch (strategy.kind) {
    case StrategyKind::kSdt: {
      ModelTape<float> tape(cfg, params.values);
      const auto loss = tape.mlm_loss(target_batch);
      tape.backward(loss);
      out.target_loss = tape.value(loss);
      out.update_gradient = tape.collect_gradient();
      break;
    }
    case StrategyKind::kL2:
    case StrategyKind::kEwc: {
      ModelTape<float> tape(cfg, params.values);
      const auto loss_t = tape.mlm_loss(target_batch);
      const bool weighted = strategy.kind == StrategyKind::kEwc;
      const auto pen = tape.penalty(strategy.anchor->values,
                                    weighted ? std::span<const float>(strategy.fisher->values)
                                             : std::span<const float>(),
                                    static_cast<float>(strategy.lambda));
      const auto total = tape.graph().add(loss_t, pen);
      tape.backward(total);
      out.target_loss = tape.value(loss_t);
      out.penalty = tape.value(pen);
      out.update_gradient = tape.collect_gradient();
      break;
    }
    case StrategyKind::kRehearsal: {
      require(static_cast<bool>(source.mask_rows), "rehearsal needs source masking access");
      const auto src_batch =
          source.mask_rows(strategy.buffer->next(static_cast<std::size_t>(target_batch.batch)));
      ModelTape<float> tape(cfg, params.values);
      const auto loss_t = tape.mlm_loss(target_batch);
      const auto loss_s = tape.mlm_loss(src_batch);
      const auto total =
          tape.graph().add(loss_t, tape.graph().scale(loss_s, static_cast<float>(strategy.lambda)));
      tape.backward(total);
      out.target_loss = tape.value(loss_t);
      out.source_loss = tape.value(loss_s);
      out.update_gradient = tape.collect_gradient();
      break;
    }
    case StrategyKind::kDistillation: {
      require(static_cast<bool>(source.fresh_batch), "distillation needs fresh source batches");
      const auto src_batch = source.fresh_batch();
      const auto teacher_probs =
          softmax_rows_value(mlm_logits_value(cfg, *strategy.teacher, src_batch));
      ModelTape<float> tape(cfg, params.values);
      const auto loss_t = tape.mlm_loss(target_batch);
      const auto dis = tape.graph().soft_cross_entropy(tape.mlm_logits(src_batch), teacher_probs);
      const auto total =
          tape.graph().add(loss_t, tape.graph().scale(dis, static_cast<float>(strategy.lambda)));
      tape.backward(total);
      out.target_loss = tape.value(loss_t);
      out.penalty = tape.value(dis);
      out.update_gradient = tape.collect_gradient();
      break;
    }
    case StrategyKind::kGem: {
      require(static_cast<bool>(source.fresh_batch), "GEM needs fresh source batches");
      ModelTape<float> tape_t(cfg, params.values);
      const auto loss_t = tape_t.mlm_loss(target_batch);
      tape_t.backward(loss_t);
      const Gradient g_t = tape_t.collect_gradient();

      const auto src_batch = source.fresh_batch();
      ModelTape<float> tape_s(cfg, params.values);
      const auto loss_s = tape_s.mlm_loss(src_batch);
      tape_s.backward(loss_s);
      const Gradient g_s = tape_s.collect_gradient();

      auto [g, applied] = gem_project(g_t, g_s);
      out.target_loss = tape_t.value(loss_t);
      out.source_loss = tape_s.value(loss_s);
      out.projection_applied = applied;
      out.update_gradient = std::move(g);
      break;
    }
  }

  for (float v : out.update_gradient)
    if (!std::isfinite(v)) throw NumericsError("strategy_step produced a non-finite gradient");
  return out;
}

}  // namespace cltune
