// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cltune/graph.hpp"
#include "cltune/rng.hpp"
#include "oracles.hpp"

using cltune::Graph;
using cltune::RngStream;
using cltune::Tensor;

namespace {

std::vector<double> random_vec(std::size_t n, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = lo + rng.next_double() * (hi - lo);
  return v;
}

// Builds a graph around one differentiable tensor and checks its analytic
// gradient against central finite differences on the same double forward.
template <class Builder>
double grad_check(const std::vector<double>& x0, Builder build) {
  Graph<double> g;
  auto [loss, pnode] = build(g, x0);
  g.backward(loss);
  std::vector<double> analytic = g.gradient(pnode).data;
  auto f = [&](const std::vector<double>& x) {
    Graph<double> g2;
    auto [l2, p2] = build(g2, x);
    (void)p2;
    return g2.value(l2).data[0];
  };
  return oracles::fd_max_rel_err(f, x0, analytic);
}

// Scalar-izes an arbitrary output through a fixed positive quadratic form so
// finite differences can drive any primitive.
template <class T>
typename Graph<T>::NodeId reduce_to_scalar(Graph<T>& g, typename Graph<T>::NodeId out,
                                           std::size_t n) {
  RngStream rw(7);
  Tensor<T> w({n});
  for (auto& x : w.data) x = static_cast<T>(0.5 + rw.next_double());
  return g.quadratic_penalty(out, Tensor<T>({n}), std::move(w), T(2));
}

}  // namespace

TEST_CASE("softmax of symmetric logits splits evenly") {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({2}, {0.f, 0.f}));
  auto s = g.softmax(a);
  CHECK(g.value(s).data[0] == Catch::Approx(0.5));
  CHECK(g.value(s).data[1] == Catch::Approx(0.5));
}

TEST_CASE("layer norm maps a constant row to the affine offset") {
  Graph<float> g;
  auto x = g.constant(Tensor<float>({1, 4}, {3.f, 3.f, 3.f, 3.f}));
  auto gain = g.constant(Tensor<float>({4}, {1.f, 1.f, 1.f, 1.f}));
  auto bias = g.constant(Tensor<float>({4}, {0.f, 0.f, 0.f, 0.f}));
  auto y = g.layer_norm(x, gain, bias);
  for (float v : g.value(y).data) CHECK(v == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("quadratic loss gradient is the parameter itself") {
  // loss = 1/2 ||theta||^2, theta = (1,2) -> grad (1,2)
  Graph<float> g;
  auto p = g.parameter(Tensor<float>({2}, {1.f, 2.f}));
  auto loss = g.quadratic_penalty(p, Tensor<float>({2}), Tensor<float>(), 1.f);
  CHECK(g.value(loss).data[0] == Catch::Approx(2.5));
  g.backward(loss);
  CHECK(g.gradient(p).data[0] == Catch::Approx(1.f));
  CHECK(g.gradient(p).data[1] == Catch::Approx(2.f));
}

TEST_CASE("loss constant in the parameters yields a zero gradient") {
  Graph<float> g;
  auto p = g.parameter(Tensor<float>({3}, {1.f, 2.f, 3.f}));
  auto c = g.constant(Tensor<float>({2}, {1.f, -1.f}));
  auto loss = g.quadratic_penalty(c, Tensor<float>({2}), Tensor<float>(), 1.f);
  g.backward(loss);
  for (float v : g.gradient(p).data) CHECK(v == 0.f);
}

TEST_CASE("backward rejects a non-scalar root") {
  Graph<float> g;
  auto p = g.parameter(Tensor<float>({2, 2}, {1.f, 2.f, 3.f, 4.f}));
  CHECK_THROWS_AS(g.backward(p), cltune::Error);
}

TEST_CASE("shape mismatch names both shapes") {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({2, 3}));
  auto b = g.constant(Tensor<float>({2, 3}));
  try {
    g.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const cltune::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
  }
}

TEST_CASE("non-finite intermediate faults with the operation index") {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({1}, {100.f}));
  auto b = g.constant(Tensor<float>({1}, {100.f}));
  auto s = g.add(a, b);  // 200
  auto big = g.scale(s, 1e18f);
  try {
    g.scale(big, 1e37f);  // overflows to inf
    FAIL("expected NumericsError");
  } catch (const cltune::NumericsError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("operation 4") != std::string::npos);
    CHECK(msg.find("scale") != std::string::npos);
  }
  (void)s;
}

TEST_CASE("matmul adjoint matches finite differences on 3x4 * 4x2") {
  RngStream rng(11);
  const auto a0 = random_vec(12, rng);
  const auto b0 = random_vec(8, rng);

  double err_a = grad_check(a0, [&](Graph<double>& g, const std::vector<double>& x) {
    auto a = g.parameter(Tensor<double>({3, 4}, x));
    auto b = g.constant(Tensor<double>({4, 2}, b0));
    auto c = g.matmul(a, b);
    return std::pair{reduce_to_scalar(g, c, 6), a};
  });
  CHECK(err_a < 1e-5);

  double err_b = grad_check(b0, [&](Graph<double>& g, const std::vector<double>& x) {
    auto a = g.constant(Tensor<double>({3, 4}, a0));
    auto b = g.parameter(Tensor<double>({4, 2}, x));
    auto c = g.matmul(a, b);
    return std::pair{reduce_to_scalar(g, c, 6), b};
  });
  CHECK(err_b < 1e-5);
}

TEST_CASE("every primitive passes a finite-difference check") {
  RngStream rng(23);

  SECTION("batch_matmul both sides") {
    const auto a0 = random_vec(2 * 3 * 4, rng);
    const auto b0 = random_vec(2 * 4 * 2, rng);
    CHECK(grad_check(a0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({2, 3, 4}, x));
            auto b = g.constant(Tensor<double>({2, 4, 2}, b0));
            return std::pair{reduce_to_scalar(g, g.batch_matmul(a, b), 12), a};
          }) < 1e-5);
    CHECK(grad_check(b0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.constant(Tensor<double>({2, 3, 4}, a0));
            auto b = g.parameter(Tensor<double>({2, 4, 2}, x));
            return std::pair{reduce_to_scalar(g, g.batch_matmul(a, b), 12), b};
          }) < 1e-5);
  }

  SECTION("batch_matmul_nt both sides") {
    const auto a0 = random_vec(2 * 3 * 4, rng);
    const auto b0 = random_vec(2 * 5 * 4, rng);
    CHECK(grad_check(a0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({2, 3, 4}, x));
            auto b = g.constant(Tensor<double>({2, 5, 4}, b0));
            return std::pair{reduce_to_scalar(g, g.batch_matmul_nt(a, b), 30), a};
          }) < 1e-5);
    CHECK(grad_check(b0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.constant(Tensor<double>({2, 3, 4}, a0));
            auto b = g.parameter(Tensor<double>({2, 5, 4}, x));
            return std::pair{reduce_to_scalar(g, g.batch_matmul_nt(a, b), 30), b};
          }) < 1e-5);
  }

  SECTION("add, add_row, scale") {
    const auto a0 = random_vec(6, rng);
    const auto r0 = random_vec(3, rng);
    const auto c0 = random_vec(6, rng);
    CHECK(grad_check(a0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({2, 3}, x));
            auto b = g.constant(Tensor<double>({2, 3}, c0));
            return std::pair{reduce_to_scalar(g, g.scale(g.add(a, b), 1.7), 6), a};
          }) < 1e-5);
    CHECK(grad_check(r0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.constant(Tensor<double>({2, 3}, a0));
            auto r = g.parameter(Tensor<double>({3}, x));
            return std::pair{reduce_to_scalar(g, g.add_row(a, r), 6), r};
          }) < 1e-5);
  }

  SECTION("tanh and gelu") {
    const auto x0 = random_vec(8, rng, -2.0, 2.0);
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({8}, x));
            return std::pair{reduce_to_scalar(g, g.tanh(a), 8), a};
          }) < 1e-5);
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({8}, x));
            return std::pair{reduce_to_scalar(g, g.gelu(a), 8), a};
          }) < 1e-5);
  }

  SECTION("softmax rows") {
    const auto x0 = random_vec(2 * 5, rng, -2.0, 2.0);
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({2, 5}, x));
            return std::pair{reduce_to_scalar(g, g.softmax(a), 10), a};
          }) < 1e-4);
  }

  SECTION("attention_bias passes gradient through scores") {
    const auto x0 = random_vec(4 * 3 * 3, rng);
    const auto bias0 = random_vec(2 * 3, rng);
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto s = g.parameter(Tensor<double>({4, 3, 3}, x));
            auto b = g.constant(Tensor<double>({2, 3}, bias0));
            return std::pair{reduce_to_scalar(g, g.attention_bias(s, b, 2), 36), s};
          }) < 1e-5);
    CHECK(grad_check(bias0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto s = g.constant(Tensor<double>({4, 3, 3}, x0));
            auto b = g.parameter(Tensor<double>({2, 3}, x));
            return std::pair{reduce_to_scalar(g, g.attention_bias(s, b, 2), 36), b};
          }) < 1e-5);
  }

  SECTION("layer_norm input, gain and bias") {
    const auto x0 = random_vec(2 * 6, rng);
    const auto g0 = random_vec(6, rng, 0.5, 1.5);
    const auto b0 = random_vec(6, rng);
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({2, 6}, x));
            auto gain = g.constant(Tensor<double>({6}, g0));
            auto bias = g.constant(Tensor<double>({6}, b0));
            return std::pair{reduce_to_scalar(g, g.layer_norm(a, gain, bias), 12), a};
          }) < 1e-4);
    CHECK(grad_check(g0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.constant(Tensor<double>({2, 6}, x0));
            auto gain = g.parameter(Tensor<double>({6}, x));
            auto bias = g.constant(Tensor<double>({6}, b0));
            return std::pair{reduce_to_scalar(g, g.layer_norm(a, gain, bias), 12), gain};
          }) < 1e-4);
    CHECK(grad_check(b0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.constant(Tensor<double>({2, 6}, x0));
            auto gain = g.constant(Tensor<double>({6}, g0));
            auto bias = g.parameter(Tensor<double>({6}, x));
            return std::pair{reduce_to_scalar(g, g.layer_norm(a, gain, bias), 12), bias};
          }) < 1e-4);
  }

  SECTION("embedding_gather and gather_rows scatter correctly") {
    const auto t0 = random_vec(5 * 3, rng);
    CHECK(grad_check(t0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto t = g.parameter(Tensor<double>({5, 3}, x));
            auto e = g.embedding_gather(t, {0, 2, 2, 4});
            return std::pair{reduce_to_scalar(g, e, 12), t};
          }) < 1e-5);
    CHECK(grad_check(t0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto t = g.parameter(Tensor<double>({5, 3}, x));
            auto e = g.gather_rows(t, {1, 1, 3});
            return std::pair{reduce_to_scalar(g, e, 9), t};
          }) < 1e-5);
  }

  SECTION("split and merge heads round-trip gradients") {
    const auto x0 = random_vec(2 * 2 * 4, rng);  // batch 2, seq 2, d 4
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({4, 4}, x));
            auto s = g.split_heads(a, 2, 2, 2);
            auto m = g.merge_heads(s, 2, 2, 2);
            return std::pair{reduce_to_scalar(g, m, 16), a};
          }) < 1e-5);
    // split then reduce, without the inverse
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({4, 4}, x));
            auto s = g.split_heads(a, 2, 2, 2);
            return std::pair{reduce_to_scalar(g, s, 16), a};
          }) < 1e-5);
  }

  SECTION("mean_pool_rows with inactive rows") {
    const auto x0 = random_vec(2 * 3 * 2, rng);  // batch 2, seq 3, d 2
    std::vector<std::uint8_t> weights = {1, 1, 0, 1, 1, 1};
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({6, 2}, x));
            auto p = g.mean_pool_rows(a, weights, 2);
            return std::pair{reduce_to_scalar(g, p, 4), a};
          }) < 1e-5);
  }

  SECTION("cross_entropy") {
    const auto x0 = random_vec(3 * 5, rng, -2.0, 2.0);
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({3, 5}, x));
            return std::pair{g.cross_entropy(a, {1, 4, 0}), a};
          }) < 1e-5);
  }

  SECTION("soft_cross_entropy") {
    const auto x0 = random_vec(3 * 4, rng, -2.0, 2.0);
    Tensor<double> target({3, 4});
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        target.data[r * 4 + j] = 0.1 + rng.next_double();
        sum += target.data[r * 4 + j];
      }
      for (std::size_t j = 0; j < 4; ++j) target.data[r * 4 + j] /= sum;
    }
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({3, 4}, x));
            return std::pair{g.soft_cross_entropy(a, target), a};
          }) < 1e-5);
  }

  SECTION("quadratic_penalty with fisher weights") {
    const auto x0 = random_vec(6, rng);
    Tensor<double> anchor({6});
    Tensor<double> w({6});
    for (std::size_t i = 0; i < 6; ++i) {
      anchor.data[i] = rng.next_double() - 0.5;
      w.data[i] = rng.next_double();
    }
    CHECK(grad_check(x0, [&](Graph<double>& g, const std::vector<double>& x) {
            auto a = g.parameter(Tensor<double>({6}, x));
            return std::pair{g.quadratic_penalty(a, anchor, w, 3.0), a};
          }) < 1e-5);
  }
}

TEST_CASE("cross entropy of uniform logits is log V") {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({2, 7}));
  auto l = g.cross_entropy(a, {3, 6});
  CHECK(g.value(l).data[0] == Catch::Approx(std::log(7.0)).epsilon(1e-6));
}

TEST_CASE("cross entropy rejects empty selection") {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({0, 7}));
  CHECK_THROWS_AS(g.cross_entropy(a, {}), cltune::Error);
}

TEST_CASE("forward and backward are bitwise deterministic") {
  auto run = [] {
    RngStream rng(99);
    Graph<float> g;
    Tensor<float> t({4, 4});
    for (auto& v : t.data) v = rng.next_uniform(-1.f, 1.f);
    auto p = g.parameter(std::move(t));
    auto h = g.tanh(g.matmul(p, p));
    auto loss = g.cross_entropy(h, {0, 1, 2, 3});
    g.backward(loss);
    return std::pair{g.value(loss).data[0], g.gradient(p).data};
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}
