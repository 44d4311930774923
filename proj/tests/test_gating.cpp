// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "tokensieve/gating.hpp"
#include "tokensieve/grad_check.hpp"
#include "tokensieve/kernels.hpp"

using namespace tokensieve;
using namespace tokensieve::testing;

namespace {

Matrix probs_rows(std::size_t n, double p_keep) {
  Matrix p(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    p(i, 0) = p_keep;
    p(i, 1) = 1.0 - p_keep;
  }
  return p;
}

}  // namespace

TEST_CASE("zero gate gives even odds, a large keep bias gives keep") {
  Rng rng(1);
  GateParams g = init_gate(GateDesign::mlp, 16, 0.0, rng);
  auto& m = std::get<MlpGate>(g.net);
  for (Matrix* w : {&m.w1, &m.b1, &m.w2, &m.b2}) w->fill(0.0);
  const Matrix x = random_matrix(rng, 7, 16);
  const Matrix even = gate_probs(x, g);
  for (double v : even.data()) CHECK(v == 0.5);
  m.b2 = Matrix::from_rows({{20.0, -20.0}});
  const Matrix p = gate_probs(x, g);
  for (std::size_t i = 0; i < 7; ++i) CHECK(p(i, 0) >= 1.0 - 1e-8);
}

TEST_CASE("MLP gate matches a two-layer oracle") {
  Rng rng(2);
  GateParams g = init_gate(GateDesign::mlp, 16, 0.5, rng);
  auto& m = std::get<MlpGate>(g.net);
  for (Matrix* w : {&m.b1, &m.b2})
    for (double& v : w->data()) v = rng.normal();
  const Matrix x = random_matrix(rng, 5, 16);
  const Matrix p = gate_probs(x, g);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<long double> h(4);
    for (std::size_t j = 0; j < 4; ++j) {
      long double a = m.b1(0, j);
      for (std::size_t c = 0; c < 16; ++c) a += static_cast<long double>(x(i, c)) * m.w1(c, j);
      h[j] = static_cast<long double>(gelu_scalar(static_cast<double>(a)));
    }
    long double z[2];
    for (std::size_t k = 0; k < 2; ++k) {
      z[k] = m.b2(0, k);
      for (std::size_t j = 0; j < 4; ++j) z[k] += h[j] * m.w2(j, k);
    }
    const long double keep = 1.0L / (1.0L + std::exp(z[1] - z[0]));
    CHECK(std::abs(p(i, 0) - static_cast<double>(keep)) <= 1e-12);
    CHECK(std::abs(p(i, 0) + p(i, 1) - 1.0) <= 1e-15);
  }
}

TEST_CASE("both gate designs emit N x 2 probabilities") {
  Rng rng(3);
  const Matrix x = random_matrix(rng, 9, 16);
  for (GateDesign d : {GateDesign::mlp, GateDesign::pooled}) {
    const Matrix p = gate_probs(x, init_gate(d, 16, 0.0, rng));
    REQUIRE(p.rows() == 9);
    REQUIRE(p.cols() == 2);
    for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(p(i, 0) + p(i, 1) - 1.0) <= 1e-12);
  }
}

TEST_CASE("Gumbel keep frequency stays within 3 sigma of p_keep") {
  for (double pk : {0.1, 0.5, 0.9}) {
    Rng rng(derive_seed(7, "gumbel-test", static_cast<std::uint64_t>(pk * 10)));
    const LayerMask m = sample_mask_train(probs_rows(10000, pk), rng, 1.0);
    const double freq = static_cast<double>(popcount(m)) / 10000.0;
    const double sigma = std::sqrt(pk * (1 - pk) / 10000.0);
    INFO("p_keep ", pk, " freq ", freq);
    CHECK(std::abs(freq - pk) <= 3 * sigma);
    if (pk == 0.5) CHECK(std::abs(freq - 0.5) <= 0.02);
  }
}

TEST_CASE("certain keep is always kept") {
  Rng rng(4);
  const LayerMask m = sample_mask_train(probs_rows(1000, 1.0), rng, 0.5);
  CHECK(popcount(m) == 1000);
  CHECK_THROWS(sample_mask_train(probs_rows(4, 0.5), rng, 0.0));
}

TEST_CASE("relaxed sampler gradient matches finite differences") {
  Rng rng(5);
  Matrix logits = random_matrix(rng, 12, 2);
  const Matrix noise = draw_gumbel_noise(rng, 12);
  for (double tau : {0.5, 1.0, 2.0}) {
    const GradReport r = grad_check(
        [&](Tape& t) {
          auto s = gumbel_softmax_sample(t, t.log_softmax_rows(t.param(logits)), noise, tau);
          return t.mean_all(s.soft_keep);
        },
        {{"logits", &logits}}, 1e-5, 1e-3);
    CHECK(r.passed);
  }
}

TEST_CASE("straight-through gradient equals the relaxed gradient") {
  Rng rng(6);
  Matrix logits = random_matrix(rng, 10, 2);
  const Matrix noise = draw_gumbel_noise(rng, 10);
  const Matrix w = random_matrix(rng, 10, 1);
  auto grad = [&](bool st) {
    Tape t;
    auto lv = t.param(logits);
    auto s = gumbel_softmax_sample(t, t.log_softmax_rows(lv), noise, 1.0);
    auto m = st ? t.straight_through(mask_column(s.hard), s.soft_keep) : s.soft_keep;
    t.backward(t.mean_all(t.mul(m, t.constant(w))));
    return t.grad(lv);
  };
  CHECK(bit_equal(grad(true), grad(false)));
  Tape t;
  auto s = gumbel_softmax_sample(t, t.log_softmax_rows(t.param(logits)), noise, 1.0);
  Matrix lp = log_softmax_rows(logits);
  for (std::size_t i = 0; i < 10; ++i) {
    const bool keep = lp(i, 0) + noise(i, 0) >= lp(i, 1) + noise(i, 1);
    CHECK(s.hard[i] == (keep ? 1 : 0));
  }
}

TEST_CASE("inference mask is the argmax with ties kept") {
  CHECK(select_mask_infer(Matrix::from_rows({{0.9, 0.1}}))[0] == 1);
  CHECK(select_mask_infer(Matrix::from_rows({{0.5, 0.5}}))[0] == 1);
  CHECK(select_mask_infer(Matrix::from_rows({{0.2, 0.8}}))[0] == 0);
  Rng rng(7);
  const Matrix z = random_matrix(rng, 50, 2, 2.0);
  const LayerMask m = select_mask_infer(softmax_rows(z));
  for (double c : {0.1, 3.0, 17.0}) CHECK(select_mask_infer(softmax_rows(scale(z, c))) == m);
  for (std::size_t i = 0; i < 50; ++i) CHECK(m[i] == (z(i, 0) >= z(i, 1) ? 1 : 0));
}

TEST_CASE("attention score selection") {
  CHECK(attention_score_select(std::vector<double>{0.4, 0.3, 0.2, 0.1}, 0.5) == LayerMask{1, 1, 0, 0});
  CHECK(attention_score_select(std::vector<double>{0.1, 0.2, 0.3}, 1.0) == LayerMask{1, 1, 1});
  CHECK(attention_score_select(std::vector<double>{0.2, 0.2, 0.2, 0.2}, 0.5) == LayerMask{1, 1, 0, 0});
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = trial == 0 ? 100 : 1 + rng.below(120);
    std::vector<double> attn(n);
    for (double& a : attn) a = rng.uniform();
    const double ratio = trial == 0 ? 0.7 : 0.01 + 0.99 * rng.uniform();
    const LayerMask m = attention_score_select(attn, ratio);
    const std::size_t k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
    CHECK(popcount(m) == std::max<std::size_t>(k, 1));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return attn[a] > attn[b] || (attn[a] == attn[b] && a < b); });
    LayerMask oracle(n, 0);
    for (std::size_t i = 0; i < popcount(m); ++i) oracle[order[i]] = 1;
    CHECK(m == oracle);
    if (trial == 0) CHECK(popcount(m) == 70);
  }
}
