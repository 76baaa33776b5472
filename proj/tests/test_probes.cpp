// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cltune/probes.hpp"
#include "cltune/trainer.hpp"

using namespace cltune;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 20;
  c.max_seq_len = 16;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.seed = 77;
  return c;
}

// y ~ Bernoulli(1/2); feature is y flipped with the given probability, or
// pure noise when flip = 0.5
struct Channel {
  std::vector<float> x_train, x_test;
  std::vector<std::int32_t> y_train, y_test;
};

Channel binary_channel(std::size_t n_train, std::size_t n_test, double flip,
                       std::uint64_t seed) {
  Channel c;
  RngStream rng(seed);
  auto fill = [&](std::vector<float>& x, std::vector<std::int32_t>& y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const int label = rng.next_double() < 0.5 ? 0 : 1;
      const int feat = rng.next_double() < flip ? 1 - label : label;
      y.push_back(label);
      x.push_back(static_cast<float>(feat));
    }
  };
  fill(c.x_train, c.y_train, n_train);
  fill(c.x_test, c.y_test, n_test);
  return c;
}

double binary_entropy(double p) { return -p * std::log(p) - (1 - p) * std::log(1 - p); }

ProbeConfig fast_probe(std::uint64_t seed) {
  ProbeConfig p;
  p.seed = seed;
  return p;
}

}  // namespace

TEST_CASE("probe tasks are deterministic and balanced") {
  const auto spec = make_source_spec(16, 404);
  const auto a = make_probe_task(spec, Domain::kSource, 6000, 4000, 32, 9);
  const auto b = make_probe_task(spec, Domain::kSource, 6000, 4000, 32, 9);
  CHECK(a.labels == b.labels);
  CHECK(a.rule == b.rule);
  CHECK(a.rows.size() == 10000);

  // class balance within 50% +/- 10% on 10^4 examples
  double ones = 0;
  for (auto l : a.labels) ones += l;
  const double frac = ones / static_cast<double>(a.labels.size());
  CHECK(frac > 0.4);
  CHECK(frac < 0.6);

  // labels follow the stated rule exactly
  for (std::size_t i = 0; i < 50; ++i)
    CHECK(a.labels[i] == rule_label(a.rule, a.rows[i]));
}

TEST_CASE("the label rule on an all-identical row compares length to threshold") {
  LabelRule rule{kFirstRegularToken + 2, 5};
  Row row(12, kFirstRegularToken + 2);  // count = 12 > 5
  CHECK(rule_label(rule, row) == 1);
  LabelRule high{kFirstRegularToken + 2, 12};
  CHECK(rule_label(high, row) == 0);  // count == threshold is not above it
}

TEST_CASE("shift pairs share the rule and overlap 1 gives matched statistics") {
  const auto src = make_source_spec(16, 11);
  const auto tgt = make_target_spec(src, 1.0, 22);
  const auto [s, t] = make_shift_task_pair(src, tgt, 500, 500, 16, 3);
  CHECK(s.rule == t.rule);
  double fs = 0, ft = 0;
  for (auto l : s.labels) fs += l;
  for (auto l : t.labels) ft += l;
  CHECK(std::abs(fs / s.labels.size() - ft / t.labels.size()) < 0.06);
}

TEST_CASE("probe head reaches chance on random labels and 99% on separable data") {
  RngStream rng(5);
  const std::size_t n_train = 2000, n_test = 2000;
  const int dim = 8;

  SECTION("random labels stay at chance") {
    std::vector<float> x_train(n_train * dim), x_test(n_test * dim);
    std::vector<std::int32_t> y_train(n_train), y_test(n_test);
    for (auto& v : x_train) v = rng.next_uniform(-1.f, 1.f);
    for (auto& v : x_test) v = rng.next_uniform(-1.f, 1.f);
    for (auto& v : y_train) v = static_cast<std::int32_t>(rng.next_below(2));
    for (auto& v : y_test) v = static_cast<std::int32_t>(rng.next_below(2));
    const auto res = train_probe_head(x_train, y_train, x_test, y_test, dim, 2, fast_probe(1));
    CHECK(res.test_accuracy > 0.45);
    CHECK(res.test_accuracy < 0.55);
    CHECK(res.test_mean_loglik <= 0.0);
  }

  SECTION("linearly separable features are learned") {
    std::vector<float> x_train(n_train * dim), x_test(n_test * dim);
    std::vector<std::int32_t> y_train(n_train), y_test(n_test);
    auto fill = [&](std::vector<float>& x, std::vector<std::int32_t>& y, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < dim; ++j) x[i * dim + j] = rng.next_uniform(-1.f, 1.f);
        y[i] = x[i * dim] > 0 ? 1 : 0;
      }
    };
    fill(x_train, y_train, n_train);
    fill(x_test, y_test, n_test);
    const auto res = train_probe_head(x_train, y_train, x_test, y_test, dim, 2, fast_probe(2));
    CHECK(res.test_accuracy >= 0.99);
  }

  SECTION("identical seeds give identical results") {
    std::vector<float> x_train(n_train * dim), x_test(n_test * dim);
    std::vector<std::int32_t> y_train(n_train), y_test(n_test);
    for (auto& v : x_train) v = rng.next_uniform(-1.f, 1.f);
    for (auto& v : x_test) v = rng.next_uniform(-1.f, 1.f);
    for (std::size_t i = 0; i < n_train; ++i) y_train[i] = x_train[i * dim + 1] > 0;
    for (std::size_t i = 0; i < n_test; ++i) y_test[i] = x_test[i * dim + 1] > 0;
    const auto r1 = train_probe_head(x_train, y_train, x_test, y_test, dim, 2, fast_probe(3));
    const auto r2 = train_probe_head(x_train, y_train, x_test, y_test, dim, 2, fast_probe(3));
    CHECK(r1.test_accuracy == r2.test_accuracy);
    CHECK(r1.test_mean_loglik == r2.test_mean_loglik);
    CHECK(r1.head == r2.head);
  }
}

TEST_CASE("train_fraction uses a prefix of the training split") {
  RngStream rng(6);
  const int dim = 4;
  std::vector<float> x_train(400 * dim), x_test(400 * dim);
  std::vector<std::int32_t> y_train(400), y_test(400);
  for (auto& v : x_train) v = rng.next_uniform(-1.f, 1.f);
  for (auto& v : x_test) v = rng.next_uniform(-1.f, 1.f);
  for (std::size_t i = 0; i < 400; ++i) y_train[i] = x_train[i * dim] > 0;
  for (std::size_t i = 0; i < 400; ++i) y_test[i] = x_test[i * dim] > 0;
  auto cfg = fast_probe(4);
  cfg.train_fraction = 0.25;
  const auto quarter = train_probe_head(x_train, y_train, x_test, y_test, dim, 2, cfg);
  CHECK(quarter.test_accuracy > 0.8);  // still learnable from 100 examples
  cfg.train_fraction = 0.0;
  CHECK_THROWS_AS(train_probe_head(x_train, y_train, x_test, y_test, dim, 2, cfg), Error);
}

TEST_CASE("mi estimate calibrates on the binary symmetric channel") {
  const auto good = binary_channel(10000, 10000, 0.1, 71);
  const auto noise = binary_channel(10000, 10000, 0.5, 72);

  const auto est_good = mi_estimate(good.x_train, good.y_train, good.x_test, good.y_test, 1,
                                    fast_probe(10));
  const auto est_noise = mi_estimate(noise.x_train, noise.y_train, noise.x_test, noise.y_test, 1,
                                     fast_probe(10));
  CHECK(est_good.value <= 0.0);
  CHECK(est_noise.value <= 0.0);

  const double gap = est_good.value - est_noise.value;
  const double analytic = std::log(2.0) - binary_entropy(0.1);  // 0.368 nats
  CHECK(std::abs(gap - analytic) <= 0.05);
}

TEST_CASE("mi gap error shrinks as the sample grows") {
  const double analytic = std::log(2.0) - binary_entropy(0.1);
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto err_at = [&](std::size_t n) {
      const auto good = binary_channel(n, n, 0.1, 100 + seed);
      const auto noise = binary_channel(n, n, 0.5, 200 + seed);
      const auto a =
          mi_estimate(good.x_train, good.y_train, good.x_test, good.y_test, 1, fast_probe(seed));
      const auto b = mi_estimate(noise.x_train, noise.y_train, noise.x_test, noise.y_test, 1,
                                 fast_probe(seed));
      return std::abs(a.value - b.value - analytic);
    };
    if (err_at(10000) < err_at(1000)) ++improved;
  }
  CHECK(improved >= 2);
}

TEST_CASE("mi gap of a model against itself is exactly zero and antisymmetric") {
  const auto cfg = toy_config();
  const auto params = init_params(cfg);
  auto other = params;
  {
    RngStream rng(15);
    for (auto& v : other.values) v += rng.next_uniform(-0.05f, 0.05f);
  }
  const auto spec = make_source_spec(cfg.vocab_size - kFirstRegularToken, 31);
  const auto task = make_probe_task(spec, Domain::kSource, 150, 100, 16, 5);

  CHECK(mi_gap(cfg, params, params, task, fast_probe(8)) == 0.0);

  const double ab = mi_gap(cfg, params, other, task, fast_probe(8));
  const double ba = mi_gap(cfg, other, params, task, fast_probe(8));
  CHECK(ab == Catch::Approx(-ba).margin(1e-9));
}

TEST_CASE("finetune probe and shift evaluation work end to end") {
  const auto cfg = toy_config();
  const auto params = init_params(cfg);
  const auto src = make_source_spec(cfg.vocab_size - kFirstRegularToken, 91);
  const auto tgt_same = make_target_spec(src, 1.0, 92);
  const auto [source_task, target_task] = make_shift_task_pair(src, tgt_same, 400, 400, 16, 7);

  auto pc = fast_probe(21);
  pc.steps = 300;
  const auto tuned = finetune_probe(cfg, params, target_task, pc);
  CHECK(tuned.probe.test_accuracy > 0.5);

  // the source task evaluated on itself reproduces the probe's accuracy
  const auto self_tuned = finetune_probe(cfg, params, source_task, pc);
  const double self_shift = domain_shift_eval(cfg, self_tuned, source_task);
  CHECK(self_shift == Catch::Approx(self_tuned.probe.test_accuracy));

  // identical domains: shift accuracy close to in-domain accuracy
  const double shift = domain_shift_eval(cfg, tuned, source_task);
  CHECK(std::abs(shift - tuned.probe.test_accuracy) < 0.08);

  // label-rule mismatch faults
  auto bad_task = source_task;
  bad_task.rule.threshold += 1;
  CHECK_THROWS_AS(domain_shift_eval(cfg, tuned, bad_task), Error);
}

TEST_CASE("joint encoder finetuning updates the encoder and helps accuracy") {
  ModelConfig cfg = toy_config();
  const auto params = init_params(cfg);
  const auto spec = make_source_spec(cfg.vocab_size - kFirstRegularToken, 55);
  const auto task = make_probe_task(spec, Domain::kSource, 300, 200, 12, 13);

  auto pc = fast_probe(30);
  pc.steps = 60;
  pc.batch_size = 32;
  pc.learning_rate = 3e-3;
  const auto frozen = finetune_probe(cfg, params, task, pc, false);
  const auto tuned = finetune_probe(cfg, params, task, pc, true);
  CHECK(tuned.encoder_tuned);
  CHECK(tuned.encoder.values != params.values);
  // with a random encoder, joint training should do at least as well as
  // chance and produce a usable probe
  CHECK(tuned.probe.test_accuracy > 0.45);
  CHECK(frozen.encoder.values == params.values);
}

TEST_CASE("random-weight encoders give chance-level shift accuracy") {
  auto cfg = toy_config();
  cfg.max_seq_len = 32;
  const auto params = init_params(cfg);
  const auto src = make_source_spec(cfg.vocab_size - kFirstRegularToken, 123);
  const auto tgt = make_target_spec(src, 0.5, 124);
  const auto [source_task, target_task] = make_shift_task_pair(src, tgt, 1000, 2000, 32, 17);

  // train on shuffled labels so nothing transferable exists; an
  // uninformative probe can score anywhere between the minority and
  // majority class shares of the evaluation labels
  auto shuffled = target_task;
  RngStream rng(3);
  rng.shuffle(shuffled.labels);
  auto pc = fast_probe(31);
  const auto tuned = finetune_probe(cfg, params, shuffled, pc);
  const double shift = domain_shift_eval(cfg, tuned, source_task);

  double ones = 0;
  for (std::size_t i = source_task.n_train; i < source_task.labels.size(); ++i)
    ones += source_task.labels[i];
  const double majority = std::max(ones, source_task.n_test() - ones) /
                          static_cast<double>(source_task.n_test());
  CHECK(shift > (1.0 - majority) - 0.05);
  CHECK(shift < majority + 0.05);
}
