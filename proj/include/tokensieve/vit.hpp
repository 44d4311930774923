// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Isotropic ViT building blocks: patch embedding, multi-head self-attention
// with key-column masking, pre-norm transformer block and a per-token linear
// prediction head.

#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tokensieve/gating.hpp"
#include "tokensieve/matrix.hpp"
#include "tokensieve/rng.hpp"
#include "tokensieve/tape.hpp"

namespace tokensieve {

// N x C feature map holding every token, active or preserved.
using TokenMap = Matrix;

inline constexpr double kLayerNormEps = 1e-6;

struct ModelDims {
  int layers = 12;
  int heads = 3;
  int width = 48;
  int patch = 4;
  int image_size = 32;
  int channels = 3;
  int classes = 8;

  std::size_t grid() const { return static_cast<std::size_t>(image_size / patch); }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return static_cast<std::size_t>(patch * patch * channels); }
  std::size_t head_dim() const { return static_cast<std::size_t>(width / heads); }
  std::size_t c() const { return static_cast<std::size_t>(width); }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  bool operator==(const ModelDims&) const = default;
};

// H x W x ch image, channel-fastest (HWC) layout.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t ch) : height(h), width(w), channels(ch), pixels(h * w * ch, 0.0) {}
  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

struct ViTBlockParams {
  Matrix ln1_g, ln1_b;
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;  // C x C, 1 x C
  Matrix ln2_g, ln2_b;
  Matrix w1, b1;  // C x 4C, 1 x 4C
  Matrix w2, b2;  // 4C x C, 1 x C
};

struct BackboneParams {
  ModelDims dims;
  Matrix patch_w, patch_b;  // P^2 ch x C, 1 x C
  Matrix pos;               // N x C
  std::vector<ViTBlockParams> blocks;
  std::map<int, GateParams> gates;  // keyed by 1-based layer index
  std::optional<Matrix> cls_token;  // 1 x C, attention-score selector only
  Matrix head_w, head_b;            // C x K, 1 x K
};

BackboneParams init_backbone(const ModelDims& dims, Rng& rng);
void attach_gates(BackboneParams& params, const std::vector<int>& layers, GateDesign design, double keep_bias,
                  Rng& rng);
void attach_class_token(BackboneParams& params, Rng& rng);

// Visits every parameter tensor in a fixed order with a stable dotted name
// (e.g. "blocks.3.wq", "gates.4.w1"). Checkpoints, the optimizer and gradient
// checks all enumerate parameters through this.
template <class P, class F>
void visit_params(P& p, F&& fn) {
  fn(std::string("patch.w"), p.patch_w);
  fn(std::string("patch.b"), p.patch_b);
  fn(std::string("pos"), p.pos);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const std::string prefix = "blocks." + std::to_string(l + 1) + ".";
    auto& b = p.blocks[l];
    fn(prefix + "ln1_g", b.ln1_g);
    fn(prefix + "ln1_b", b.ln1_b);
    fn(prefix + "wq", b.wq);
    fn(prefix + "bq", b.bq);
    fn(prefix + "wk", b.wk);
    fn(prefix + "bk", b.bk);
    fn(prefix + "wv", b.wv);
    fn(prefix + "bv", b.bv);
    fn(prefix + "wo", b.wo);
    fn(prefix + "bo", b.bo);
    fn(prefix + "ln2_g", b.ln2_g);
    fn(prefix + "ln2_b", b.ln2_b);
    fn(prefix + "w1", b.w1);
    fn(prefix + "b1", b.b1);
    fn(prefix + "w2", b.w2);
    fn(prefix + "b2", b.b2);
  }
  for (auto& [layer, g] : p.gates) {
    const std::string prefix = "gates." + std::to_string(layer) + ".";
    visit_gate_params(g, [&](const char* name, auto& m) { fn(prefix + name, m); });
  }
  if (p.cls_token) fn(std::string("cls_token"), *p.cls_token);
  fn(std::string("head.w"), p.head_w);
  fn(std::string("head.b"), p.head_b);
}

// N x P^2 ch matrix of flattened patches in row-major patch order; each
// patch flattens as (row, column, channel).
Matrix extract_patches(const Image& image, int patch);

template <class Ops>
typename Ops::Value patch_embed(Ops& ops, const Image& image, const BackboneParams& p) {
  auto patches = ops.constant(extract_patches(image, p.dims.patch));
  if (ops.value(patches).rows() != p.pos.rows()) {
    throw ShapeError("patch_embed: image gives " + std::to_string(ops.value(patches).rows()) +
                     " tokens, positional embedding has " + std::to_string(p.pos.rows()));
  }
  auto x = ops.add_row_bias(ops.matmul(patches, ops.param(p.patch_w)), ops.param(p.patch_b));
  return ops.add(x, ops.param(p.pos));
}

TokenMap patch_embed(const Image& image, const BackboneParams& p);

template <class Ops>
struct AttentionOut {
  typename Ops::Value out;
  // Row 0 attention averaged over heads (n entries); filled on request.
  std::vector<double> first_row_attention;
};

// Multi-head self-attention on an already-normalized input. `key_mask`, when
// given, is a 1 x n additive mask; masked keys get exactly zero weight.
template <class Ops>
AttentionOut<Ops> attention(Ops& ops, const typename Ops::Value& h, const ViTBlockParams& p, int heads,
                            const Matrix* key_mask, bool want_first_row) {
  using V = typename Ops::Value;
  const std::size_t c = ops.value(h).cols();
  const std::size_t d = c / static_cast<std::size_t>(heads);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  V q = ops.add_row_bias(ops.matmul(h, ops.param(p.wq)), ops.param(p.bq));
  V k = ops.add_row_bias(ops.matmul(h, ops.param(p.wk)), ops.param(p.bk));
  V v = ops.add_row_bias(ops.matmul(h, ops.param(p.wv)), ops.param(p.bv));
  AttentionOut<Ops> res;
  if (want_first_row) res.first_row_attention.assign(ops.value(h).rows(), 0.0);
  std::vector<V> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (std::size_t hd = 0; hd < static_cast<std::size_t>(heads); ++hd) {
    V qh = ops.slice_cols(q, hd * d, (hd + 1) * d);
    V kh = ops.slice_cols(k, hd * d, (hd + 1) * d);
    V vh = ops.slice_cols(v, hd * d, (hd + 1) * d);
    V a = ops.softmax_rows(ops.scale(ops.matmul_nt(qh, kh), inv_sqrt_d), key_mask);
    if (want_first_row) {
      const auto row = ops.value(a).row(0);
      for (std::size_t j = 0; j < row.size(); ++j) res.first_row_attention[j] += row[j] / heads;
    }
    outs.push_back(ops.matmul(a, vh));
  }
  res.out = ops.add_row_bias(ops.matmul(ops.concat_cols(outs), ops.param(p.wo)), ops.param(p.bo));
  return res;
}

template <class Ops>
struct BlockOut {
  typename Ops::Value out;
  std::vector<double> first_row_attention;
};

// Pre-norm block: u = x + MHSA(LN1(x)); v = u + MLP(LN2(u)). Every row is
// computed; the keep/prune combine happens in the caller.
template <class Ops>
BlockOut<Ops> block_apply(Ops& ops, const typename Ops::Value& x, const ViTBlockParams& p, int heads,
                          const Matrix* key_mask = nullptr, bool want_first_row = false) {
  auto h1 = ops.layer_norm(x, ops.param(p.ln1_g), ops.param(p.ln1_b), kLayerNormEps);
  AttentionOut<Ops> att = attention(ops, h1, p, heads, key_mask, want_first_row);
  auto u = ops.add(x, att.out);
  auto h2 = ops.layer_norm(u, ops.param(p.ln2_g), ops.param(p.ln2_b), kLayerNormEps);
  auto m = ops.gelu(ops.add_row_bias(ops.matmul(h2, ops.param(p.w1)), ops.param(p.b1)));
  m = ops.add_row_bias(ops.matmul(m, ops.param(p.w2)), ops.param(p.b2));
  return {ops.add(u, m), std::move(att.first_row_attention)};
}

// Attention where keys at pruned positions receive zero weight from every
// query. Output rows at pruned positions carry no contract.
TokenMap mhsa_masked(const TokenMap& x, const LayerMask& keep, const ViTBlockParams& p, int heads);

enum class ExecForm { masked, gathered };

// Block with the keep/prune combine: kept rows take the block output,
// pruned rows are copied unchanged. `masked` runs all rows with key masking
// (training form); `gathered` runs the dense block on the kept rows only and
// scatters them back over the incoming map (inference form).
TokenMap vit_block_forward(const TokenMap& x, const LayerMask& keep, const ViTBlockParams& p, int heads,
                           ExecForm form);

template <class Ops>
typename Ops::Value head_apply(Ops& ops, const typename Ops::Value& x, const BackboneParams& p) {
  return ops.add_row_bias(ops.matmul(x, ops.param(p.head_w)), ops.param(p.head_b));
}

// Per-token class scores (N x K) over the full feature map.
Matrix head_predict(const TokenMap& x, const BackboneParams& p);

}  // namespace tokensieve
