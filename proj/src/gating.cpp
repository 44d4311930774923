// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/gating.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace tokensieve {

namespace {

constexpr double kInitStd = 0.02;

Matrix normal_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = kInitStd * rng.normal();
  return m;
}

Matrix keep_bias_row(double keep_bias) { return Matrix::from_rows({{keep_bias, 0.0}}); }

}  // namespace

std::size_t popcount(const LayerMask& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

LayerMask all_ones(std::size_t n) { return LayerMask(n, 1); }

Matrix mask_column(const LayerMask& m) {
  Matrix c(m.size(), 1);
  for (std::size_t i = 0; i < m.size(); ++i) c[i] = m[i] ? 1.0 : 0.0;
  return c;
}

Matrix additive_key_mask(const LayerMask& m) {
  Matrix r(1, m.size());
  for (std::size_t i = 0; i < m.size(); ++i) r[i] = m[i] ? 0.0 : -kMaskLarge;
  return r;
}

std::vector<std::size_t> kept_indices(const LayerMask& m) {
  std::vector<std::size_t> idx;
  idx.reserve(m.size());
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) idx.push_back(i);
  return idx;
}

GateParams init_gate(GateDesign design, std::size_t width, double keep_bias, Rng& rng) {
  const std::size_t c = width;
  if (design == GateDesign::mlp) {
    const std::size_t h = c / 4;
    if (h == 0) throw std::invalid_argument("init_gate: width " + std::to_string(c) + " gives an empty hidden layer");
    MlpGate g{normal_matrix(c, h, rng), Matrix(1, h), normal_matrix(h, 2, rng), keep_bias_row(keep_bias)};
    return GateParams{std::move(g)};
  }
  const std::size_t half = c / 2, quarter = c / 4;
  if (quarter == 0 || c % 2 != 0) throw std::invalid_argument("init_gate: pooled gate needs an even width >= 4");
  PooledGate g;
  g.ln_g = Matrix(1, c, 1.0);
  g.ln_b = Matrix(1, c);
  g.w_in = normal_matrix(c, c, rng);
  g.b_in = Matrix(1, c);
  g.w1 = normal_matrix(c, half, rng);
  g.b1 = Matrix(1, half);
  g.w2 = normal_matrix(half, quarter, rng);
  g.b2 = Matrix(1, quarter);
  g.w3 = normal_matrix(quarter, 2, rng);
  g.b3 = keep_bias_row(keep_bias);
  return GateParams{std::move(g)};
}

Matrix gate_probs(const Matrix& x, const GateParams& g) {
  Eager ops;
  return gate_forward(ops, x, g).probs;
}

Matrix draw_gumbel_noise(Rng& rng, std::size_t n) {
  Matrix g(n, 2);
  for (double& v : g.data()) v = rng.gumbel();
  return g;
}

LayerMask gumbel_hard_mask(const Matrix& log_probs, const Matrix& noise) {
  if (!log_probs.same_shape(noise) || log_probs.cols() != 2) {
    throw ShapeError("gumbel_hard_mask: " + shape_pair(log_probs, noise));
  }
  LayerMask m(log_probs.rows());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = (log_probs(i, 0) + noise(i, 0) >= log_probs(i, 1) + noise(i, 1)) ? 1 : 0;
  }
  return m;
}

LayerMask sample_mask_train(const Matrix& probs, Rng& rng, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("sample_mask_train: tau must be positive");
  Matrix logp(probs.rows(), 2);
  for (std::size_t i = 0; i < logp.size(); ++i) logp[i] = std::log(probs[i]);
  return gumbel_hard_mask(logp, draw_gumbel_noise(rng, probs.rows()));
}

LayerMask select_mask_infer(const Matrix& probs) {
  if (probs.cols() != 2) throw ShapeError("select_mask_infer: expected N x 2, got " + probs.shape_str());
  LayerMask m(probs.rows());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = probs(i, 0) >= probs(i, 1) ? 1 : 0;
  return m;
}

std::size_t top_k_count(double keep_ratio, std::size_t n) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
    throw std::invalid_argument("keep ratio " + std::to_string(keep_ratio) + " outside (0, 1]");
  }
  // The 1e-9 slack absorbs representation error, e.g. 0.7 * 100.
  const auto k = static_cast<std::size_t>(std::ceil(keep_ratio * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

LayerMask attention_score_select(std::span<const double> attn, double keep_ratio) {
  const std::size_t n = attn.size();
  const std::size_t k = top_k_count(keep_ratio, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return attn[a] > attn[b]; });
  LayerMask m(n, 0);
  for (std::size_t i = 0; i < k; ++i) m[order[i]] = 1;
  return m;
}

}  // namespace tokensieve
