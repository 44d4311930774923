// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Mask lifecycle across the backbone. For every gated layer the configured
// selector produces a keep mask, optionally restricted to the previous
// layer's active set, and the block runs with
//
//   x <- M * Block(x, M) + (1 - M) * x
//
// so pruned tokens keep their last computed features. Training runs the
// masked (all rows, masked keys) form on a Tape; inference gathers the kept
// rows, runs the dense block on them and scatters them back.

#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "tokensieve/gating.hpp"
#include "tokensieve/tape.hpp"
#include "tokensieve/vit.hpp"

namespace tokensieve {

enum class Selector { gate_mlp, gate_pooled, attention_score };
enum class RateMode { dynamic, fixed };

struct PruneConfig {
  Selector selector = Selector::gate_mlp;
  RateMode rate_mode = RateMode::dynamic;
  bool preserve = true;
  bool reactivate = true;
  std::vector<int> gated_layers = {4, 5, 6, 7, 8, 9, 10, 11, 12};  // 1-based
  std::vector<double> keep_ratios = {0.7, 0.7, 0.7, 0.49, 0.49, 0.49, 0.343, 0.343, 0.343};
  double lambda = 4.0;
  double tau = 1.0;
  // Initial keep-logit offset of a freshly attached gate (b[keep] = value, b[prune] = 0).
  double gate_keep_bias = 2.0;

  bool dense() const { return gated_layers.empty(); }
  // Masks are made cumulative when reactivation is off and in the removal
  // baseline (removed tokens cannot come back).
  bool restricted() const { return !reactivate || !preserve; }
  bool uses_gate() const { return selector != Selector::attention_score; }
  // Throws std::invalid_argument naming the offending field.
  void validate(int layers) const;

  bool operator==(const PruneConfig&) const = default;
};

// All tokens at every layer.
PruneConfig dense_config();

// Expands a base keep ratio r into the grouped schedule
// [r, r, r, r^2, r^2, r^2, r^3, ...] (power = gated index / 3 + 1).
std::vector<double> schedule_from_base(double r, std::size_t gated_count);

const char* to_string(Selector s);
const char* to_string(RateMode m);
Selector parse_selector(const std::string& s);
RateMode parse_rate_mode(const std::string& s);
GateDesign gate_design_of(Selector s);

struct MaskTrace {
  std::vector<int> layers;  // gated layers, parallel to masks
  std::vector<LayerMask> masks;

  std::vector<std::size_t> keep_counts() const;
  bool operator==(const MaskTrace&) const = default;
};

// Thrown when activations stop being finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int layer, const std::string& what) : std::runtime_error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

struct Diagnostics {
  std::uint64_t flops = 0;
  std::vector<double> layer_seconds;  // filled when timing is requested
};

struct BackboneOutput {
  TokenMap features;    // final preserved map (class token excluded)
  TokenMap head_input;  // features, or the zero-padded map when preserve=false
  MaskTrace trace;
  Matrix scores;  // N x K
  Diagnostics diag;
};

// Elementwise product: the active set can only shrink.
LayerMask restrict_no_reactivation(const LayerMask& m, const LayerMask& prev);

// Rows with cumulative_keep = 0 become zero rows; kept rows pass through.
TokenMap zero_pad_removal(const TokenMap& x, const LayerMask& cumulative_keep);

// Product of every mask in the trace (all-ones for an empty trace).
LayerMask cumulative_keep(const MaskTrace& trace, std::size_t tokens);

// If `m` is empty, keeps the single token with the highest score among the
// allowed positions (all positions when `allowed` is null).
void ensure_nonempty(LayerMask& m, std::span<const double> score, const LayerMask* allowed);

struct FlopDims {
  std::size_t tokens = 0;
  std::size_t width = 0;
  int layers = 0;
};

// Multiply-accumulate count of the blocks plus selector overhead. A block with
// k active tokens costs 4kC^2 + 2k^2 C (attention, projections included) plus
// 8kC^2 (MLP). Layers without a gate use k = N. Every gated layer adds its
// selector cost over all N tokens: N C^2 / 2 + N C / 2 for the MLP gate.
std::uint64_t flop_count(const PruneConfig& cfg, const MaskTrace& trace, const FlopDims& dims);
std::uint64_t block_flops(std::uint64_t k, std::uint64_t c);
std::uint64_t selector_flops(Selector s, std::uint64_t n, std::uint64_t c);
FlopDims flop_dims(const ModelDims& d);

enum class MaskGradient {
  straight_through,  // hard mask forward, relaxed gradient backward
  relaxed,           // relaxed keep probability in both directions
};

struct InferOptions {
  ExecForm form = ExecForm::gathered;
  // Overrides selector decisions (restriction and the empty-mask fallback
  // still apply), one mask per gated layer.
  const std::vector<LayerMask>* forced_masks = nullptr;
  bool time_layers = false;
  // Called with the incoming map at each gated layer, before selection.
  std::function<void(int layer, const Matrix& x)> on_gate_input;
};

struct TrainOptions {
  MaskGradient gradient = MaskGradient::straight_through;
  const std::vector<LayerMask>* forced_masks = nullptr;
  // One N x 2 Gumbel noise matrix per gated layer; drawn from rng when null.
  const std::vector<Matrix>* frozen_noise = nullptr;
};

struct TrainForward {
  Var features;
  Var scores;
  std::vector<Var> soft_usage;  // 1x1 mean relaxed keep value per gated layer
  MaskTrace trace;
  std::vector<Matrix> noise;  // Gumbel noise used per gated layer
};

// Inference: argmax / top-k selection, no gradient recording.
BackboneOutput run_backbone_infer(const Image& image, const BackboneParams& params, const PruneConfig& cfg,
                                  const InferOptions& opts = {});

// Training: Gumbel sampling, masked form, recorded on `tape`.
TrainForward run_backbone_train(Tape& tape, const Image& image, const BackboneParams& params,
                                const PruneConfig& cfg, Rng& rng, const TrainOptions& opts = {});

namespace detail {

struct CoreSettings {
  bool sample = false;
  MaskGradient gradient = MaskGradient::straight_through;
  ExecForm form = ExecForm::masked;
  const std::vector<LayerMask>* forced = nullptr;
  const std::vector<Matrix>* frozen_noise = nullptr;
  Rng* rng = nullptr;
  bool time_layers = false;
  std::function<void(int, const Matrix&)> on_gate_input;
};

template <class Ops>
struct CoreResult {
  typename Ops::Value features;
  typename Ops::Value head_input;
  typename Ops::Value scores;
  std::vector<typename Ops::Value> soft_usage;
  MaskTrace trace;
  std::vector<Matrix> noise;
  std::vector<double> layer_seconds;
};

void check_finite(const Matrix& x, int layer);
std::vector<double> column(const Matrix& m, std::size_t c);

template <class Ops>
CoreResult<Ops> run_core(Ops& ops, const Image& image, const BackboneParams& p, const PruneConfig& cfg,
                         const CoreSettings& s) {
  using V = typename Ops::Value;
  using Clock = std::chrono::steady_clock;
  const ModelDims& d = p.dims;
  const std::size_t n = d.tokens();
  const bool with_cls = cfg.selector == Selector::attention_score && !cfg.dense();
  CoreResult<Ops> r;

  V x = patch_embed(ops, image, p);
  if (with_cls) {
    if (!p.cls_token) throw std::invalid_argument("attention-score selector needs a class token");
    x = ops.concat_rows(ops.param(*p.cls_token), x);
  }

  LayerMask prev = all_ones(n);
  std::optional<V> prev_mask_value;
  std::vector<double> cls_attn;
  std::size_t gi = 0;

  for (int layer = 1; layer <= d.layers; ++layer) {
    const auto t0 = Clock::now();
    const ViTBlockParams& bp = p.blocks[static_cast<std::size_t>(layer - 1)];
    const bool gated = gi < cfg.gated_layers.size() && cfg.gated_layers[gi] == layer;
    if (!gated) {
      BlockOut<Ops> b = block_apply(ops, x, bp, d.heads, nullptr, with_cls);
      x = std::move(b.out);
      if (with_cls) cls_attn.assign(b.first_row_attention.begin() + 1, b.first_row_attention.end());
    } else {
      LayerMask hard;
      std::optional<V> soft;
      std::vector<double> score;
      if (s.on_gate_input) s.on_gate_input(layer, ops.value(x));
      if (cfg.uses_gate()) {
        GateOutput<Ops> go = gate_forward(ops, x, p.gates.at(layer));
        score = column(ops.value(go.probs), 0);
        if (s.sample) {
          Matrix noise = s.frozen_noise != nullptr ? s.frozen_noise->at(gi) : draw_gumbel_noise(*s.rng, n);
          RelaxedSample<Ops> rs = gumbel_softmax_sample(ops, go.log_probs, noise, cfg.tau);
          hard = std::move(rs.hard);
          soft = rs.soft_keep;
          r.noise.push_back(std::move(noise));
        } else {
          hard = select_mask_infer(ops.value(go.probs));
        }
      } else {
        hard = attention_score_select(cls_attn, cfg.keep_ratios[gi]);
        score = cls_attn;
      }
      if (s.forced != nullptr) hard = s.forced->at(gi);
      if (hard.size() != n) throw ShapeError("mask for layer " + std::to_string(layer) + " has wrong length");
      if (cfg.restricted()) hard = restrict_no_reactivation(hard, prev);
      ensure_nonempty(hard, score, cfg.restricted() ? &prev : nullptr);

      V m;
      if (soft) {
        V soft_eff = *soft;
        if (cfg.restricted() && prev_mask_value) soft_eff = ops.mul(*soft, *prev_mask_value);
        r.soft_usage.push_back(ops.mean_all(soft_eff));
        m = s.gradient == MaskGradient::relaxed ? soft_eff : ops.straight_through(mask_column(hard), soft_eff);
        prev_mask_value = m;
      } else {
        m = ops.constant(mask_column(hard));
      }

      LayerMask full = hard;
      if (with_cls) full.insert(full.begin(), std::uint8_t{1});
      if (s.form == ExecForm::masked) {
        const Matrix km = additive_key_mask(full);
        BlockOut<Ops> b = block_apply(ops, x, bp, d.heads, &km, with_cls);
        V mm = with_cls ? ops.concat_rows(ops.constant(Matrix::scalar(1.0)), m) : m;
        x = ops.mask_combine(mm, b.out, x);
        if (with_cls) cls_attn.assign(b.first_row_attention.begin() + 1, b.first_row_attention.end());
      } else {
        if constexpr (std::is_same_v<Ops, Eager>) {
          const auto idx = kept_indices(full);
          BlockOut<Ops> b = block_apply(ops, gather_rows(x, idx), bp, d.heads, nullptr, with_cls);
          scatter_rows(x, b.out, idx);
          if (with_cls) {
            cls_attn.assign(n, 0.0);
            for (std::size_t j = 1; j < idx.size(); ++j) cls_attn[idx[j] - 1] = b.first_row_attention[j];
          }
        } else {
          throw std::logic_error("gathered execution is inference-only");
        }
      }
      r.trace.layers.push_back(layer);
      r.trace.masks.push_back(hard);
      prev = std::move(hard);
      ++gi;
    }
    check_finite(ops.value(x), layer);
    if (s.time_layers) r.layer_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
  }

  r.features = with_cls ? ops.slice_rows(x, 1, n + 1) : x;
  // With preserve=false the masks are cumulative, so the last mask is the
  // set of tokens that survived every gated layer.
  r.head_input = cfg.preserve ? r.features : ops.scale_rows(r.features, ops.constant(mask_column(prev)));
  r.scores = head_apply(ops, r.head_input, p);
  return r;
}

}  // namespace detail

}  // namespace tokensieve
