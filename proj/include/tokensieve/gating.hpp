// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Token-selection policies.
//
// The primary selector is a two-layer MLP (C -> C/4 -> 2) followed by a
// softmax, giving per-token keep/prune probabilities. Training draws a hard
// mask with the Gumbel-max trick and back-propagates through the relaxed
// Gumbel-softmax keep probability (straight-through); inference takes the
// argmax. A DynamicViT-style pooled gate and a class-token attention
// selector are provided as baselines.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "tokensieve/matrix.hpp"
#include "tokensieve/rng.hpp"
#include "tokensieve/tape.hpp"

namespace tokensieve {

// One entry per token, 1 = processed by the block, 0 = pruned.
using LayerMask = std::vector<std::uint8_t>;

std::size_t popcount(const LayerMask& m);
LayerMask all_ones(std::size_t n);
Matrix mask_column(const LayerMask& m);  // n x 1 of 0.0 / 1.0
// 1 x n additive attention mask: 0 for kept keys, -kMaskLarge for pruned.
Matrix additive_key_mask(const LayerMask& m);
std::vector<std::size_t> kept_indices(const LayerMask& m);

enum class GateDesign { mlp, pooled };

struct MlpGate {
  Matrix w1, b1;  // C x floor(C/4), 1 x floor(C/4)
  Matrix w2, b2;  // floor(C/4) x 2, 1 x 2 ; column 0 = keep
};

// Local MLP + mean-pooled global branch + concatenation.
struct PooledGate {
  Matrix ln_g, ln_b;  // 1 x C
  Matrix w_in, b_in;  // C x C
  Matrix w1, b1;      // C x C/2
  Matrix w2, b2;      // C/2 x C/4
  Matrix w3, b3;      // C/4 x 2
};

struct GateParams {
  std::variant<MlpGate, PooledGate> net;

  GateDesign design() const { return net.index() == 0 ? GateDesign::mlp : GateDesign::pooled; }
};

GateParams init_gate(GateDesign design, std::size_t width, double keep_bias, Rng& rng);

template <class P, class F>
void visit_gate_params(P& g, F&& fn) {
  if (auto* m = std::get_if<MlpGate>(&g.net)) {
    fn("w1", m->w1);
    fn("b1", m->b1);
    fn("w2", m->w2);
    fn("b2", m->b2);
  } else {
    auto& p = std::get<PooledGate>(g.net);
    fn("ln_g", p.ln_g);
    fn("ln_b", p.ln_b);
    fn("w_in", p.w_in);
    fn("b_in", p.b_in);
    fn("w1", p.w1);
    fn("b1", p.b1);
    fn("w2", p.w2);
    fn("b2", p.b2);
    fn("w3", p.w3);
    fn("b3", p.b3);
  }
}

inline constexpr double kGateLnEps = 1e-6;

template <class Ops>
struct GateOutput {
  typename Ops::Value probs;      // N x 2, rows sum to 1
  typename Ops::Value log_probs;  // N x 2
};

// p = Softmax(MLP(x)) on the raw incoming tokens.
template <class Ops>
GateOutput<Ops> gate_forward(Ops& ops, const typename Ops::Value& x, const GateParams& g) {
  using V = typename Ops::Value;
  V logits;
  if (const auto* m = std::get_if<MlpGate>(&g.net)) {
    V h = ops.gelu(ops.add_row_bias(ops.matmul(x, ops.param(m->w1)), ops.param(m->b1)));
    logits = ops.add_row_bias(ops.matmul(h, ops.param(m->w2)), ops.param(m->b2));
  } else {
    const auto& p = std::get<PooledGate>(g.net);
    const std::size_t c = ops.value(x).cols();
    const std::size_t n = ops.value(x).rows();
    V h = ops.layer_norm(x, ops.param(p.ln_g), ops.param(p.ln_b), kGateLnEps);
    h = ops.gelu(ops.add_row_bias(ops.matmul(h, ops.param(p.w_in)), ops.param(p.b_in)));
    V local = ops.slice_cols(h, 0, c / 2);
    V global = ops.broadcast_rows(ops.mean_rows(ops.slice_cols(h, c / 2, c)), n);
    V z = ops.concat_cols(std::vector<V>{local, global});
    z = ops.gelu(ops.add_row_bias(ops.matmul(z, ops.param(p.w1)), ops.param(p.b1)));
    z = ops.gelu(ops.add_row_bias(ops.matmul(z, ops.param(p.w2)), ops.param(p.b2)));
    logits = ops.add_row_bias(ops.matmul(z, ops.param(p.w3)), ops.param(p.b3));
  }
  return {ops.softmax_rows(logits), ops.log_softmax_rows(logits)};
}

// Keep/prune probabilities (N x 2, column 0 = keep).
Matrix gate_probs(const Matrix& x, const GateParams& g);

// N x 2 i.i.d. standard Gumbel noise, one draw per token per class.
Matrix draw_gumbel_noise(Rng& rng, std::size_t n);

// Gumbel-max decision: keep iff log p_keep + g_keep >= log p_prune + g_prune.
LayerMask gumbel_hard_mask(const Matrix& log_probs, const Matrix& noise);

template <class Ops>
struct RelaxedSample {
  LayerMask hard;
  typename Ops::Value soft_keep;  // N x 1 Gumbel-softmax keep probability
};

// Straight-through Gumbel-softmax. The hard mask is the Gumbel-max argmax
// (independent of tau); soft_keep = softmax((log p + g) / tau)[:, keep]
// carries the gradient.
template <class Ops>
RelaxedSample<Ops> gumbel_softmax_sample(Ops& ops, const typename Ops::Value& log_probs, const Matrix& noise,
                                         double tau) {
  auto y = ops.softmax_rows(ops.scale(ops.add(log_probs, ops.constant(noise)), 1.0 / tau));
  return {gumbel_hard_mask(ops.value(log_probs), noise), ops.slice_cols(y, 0, 1)};
}

// Hard training mask from probabilities, drawing fresh noise from rng.
LayerMask sample_mask_train(const Matrix& probs, Rng& rng, double tau);

// Deterministic inference decision: keep iff p_keep >= p_prune (ties keep).
LayerMask select_mask_infer(const Matrix& probs);

// Number of tokens kept by a top-k selector: ceil(keep_ratio * n), at least 1.
std::size_t top_k_count(double keep_ratio, std::size_t n);

// Keeps the ceil(keep_ratio * N) tokens with the highest class-token
// attention; ties prefer the lower token index.
LayerMask attention_score_select(std::span<const double> attn, double keep_ratio);

}  // namespace tokensieve
