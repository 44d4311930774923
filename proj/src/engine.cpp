// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/engine.hpp"

#include <cmath>
#include <stdexcept>

namespace tokensieve {

void PruneConfig::validate(int layers) const {
  if (gated_layers.size() != keep_ratios.size()) {
    throw std::invalid_argument("prune.keep_ratios has " + std::to_string(keep_ratios.size()) + " entries for " +
                                std::to_string(gated_layers.size()) + " gated layers");
  }
  for (std::size_t i = 0; i < gated_layers.size(); ++i) {
    const int l = gated_layers[i];
    if (l < 1 || l > layers) {
      throw std::invalid_argument("prune.gated_layers entry " + std::to_string(l) + " outside [1, " +
                                  std::to_string(layers) + "]");
    }
    if (i > 0 && l <= gated_layers[i - 1]) throw std::invalid_argument("prune.gated_layers must be strictly increasing");
    const double t = keep_ratios[i];
    if (!(t > 0.0 && t <= 1.0)) {
      throw std::invalid_argument("prune.keep_ratios entry " + std::to_string(t) + " outside (0, 1]");
    }
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("prune.lambda must be finite and >= 0");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("prune.tau must be finite and > 0");
  if (!std::isfinite(gate_keep_bias)) throw std::invalid_argument("prune.gate_init_keep_bias must be finite");
  if (!preserve && reactivate) {
    throw std::invalid_argument("prune.preserve=false requires prune.reactivate=false (removed tokens cannot return)");
  }
  if (restricted()) {
    for (std::size_t i = 1; i < gated_layers.size(); ++i) {
      if (gated_layers[i] != gated_layers[i - 1] + 1) {
        throw std::invalid_argument("prune.gated_layers must be contiguous when tokens cannot be reactivated");
      }
    }
  }
  if (selector == Selector::attention_score && !gated_layers.empty() && gated_layers.front() < 2) {
    throw std::invalid_argument("prune.gated_layers must start at layer 2 or later for the attention-score selector");
  }
}

PruneConfig dense_config() {
  PruneConfig c;
  c.gated_layers.clear();
  c.keep_ratios.clear();
  return c;
}

std::vector<double> schedule_from_base(double r, std::size_t gated_count) {
  if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("base keep ratio must lie in (0, 1]");
  std::vector<double> out(gated_count);
  for (std::size_t j = 0; j < gated_count; ++j) out[j] = std::pow(r, static_cast<double>(j / 3 + 1));
  return out;
}

const char* to_string(Selector s) {
  switch (s) {
    case Selector::gate_mlp: return "gate_mlp";
    case Selector::gate_pooled: return "gate_pooled";
    case Selector::attention_score: return "attention_score";
  }
  return "?";
}

const char* to_string(RateMode m) { return m == RateMode::dynamic ? "dynamic" : "fixed"; }

Selector parse_selector(const std::string& s) {
  if (s == "gate_mlp") return Selector::gate_mlp;
  if (s == "gate_pooled") return Selector::gate_pooled;
  if (s == "attention_score") return Selector::attention_score;
  throw std::invalid_argument("prune.selector: unknown value '" + s + "'");
}

RateMode parse_rate_mode(const std::string& s) {
  if (s == "dynamic") return RateMode::dynamic;
  if (s == "fixed") return RateMode::fixed;
  throw std::invalid_argument("prune.rate_mode: unknown value '" + s + "'");
}

GateDesign gate_design_of(Selector s) {
  if (s == Selector::gate_pooled) return GateDesign::pooled;
  return GateDesign::mlp;
}

std::vector<std::size_t> MaskTrace::keep_counts() const {
  std::vector<std::size_t> out;
  out.reserve(masks.size());
  for (const auto& m : masks) out.push_back(popcount(m));
  return out;
}

LayerMask restrict_no_reactivation(const LayerMask& m, const LayerMask& prev) {
  if (m.size() != prev.size()) {
    throw ShapeError("restrict_no_reactivation: lengths " + std::to_string(m.size()) + " and " +
                     std::to_string(prev.size()));
  }
  LayerMask out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<std::uint8_t>(m[i] & prev[i]);
  return out;
}

TokenMap zero_pad_removal(const TokenMap& x, const LayerMask& cumulative_keep) {
  if (cumulative_keep.size() != x.rows()) {
    throw ShapeError("zero_pad_removal: mask of " + std::to_string(cumulative_keep.size()) + " for " + x.shape_str());
  }
  TokenMap out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (cumulative_keep[i] == 0) {
      for (double& v : out.row(i)) v = 0.0;
    }
  }
  return out;
}

LayerMask cumulative_keep(const MaskTrace& trace, std::size_t tokens) {
  LayerMask acc = all_ones(tokens);
  for (const auto& m : trace.masks) acc = restrict_no_reactivation(m, acc);
  return acc;
}

void ensure_nonempty(LayerMask& m, std::span<const double> score, const LayerMask* allowed) {
  if (popcount(m) > 0) return;
  if (score.size() != m.size()) throw ShapeError("ensure_nonempty: score length mismatch");
  std::size_t best = m.size();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (allowed != nullptr && (*allowed)[i] == 0) continue;
    if (best == m.size() || score[i] > score[best]) best = i;
  }
  if (best == m.size()) throw std::logic_error("ensure_nonempty: no allowed token");
  m[best] = 1;
}

std::uint64_t block_flops(std::uint64_t k, std::uint64_t c) { return 12 * k * c * c + 2 * k * k * c; }

std::uint64_t selector_flops(Selector s, std::uint64_t n, std::uint64_t c) {
  switch (s) {
    case Selector::gate_mlp: return n * c * c / 2 + n * c / 2;
    // Local/global projection C x C, then C -> C/2 -> C/4 -> 2.
    case Selector::gate_pooled: return n * c * c + n * c * c / 2 + n * c * c / 8 + n * c / 2;
    // Reuses the class-token attention already computed by the block.
    case Selector::attention_score: return 0;
  }
  return 0;
}

FlopDims flop_dims(const ModelDims& d) { return {d.tokens(), d.c(), d.layers}; }

std::uint64_t flop_count(const PruneConfig& cfg, const MaskTrace& trace, const FlopDims& dims) {
  const std::uint64_t n = dims.tokens, c = dims.width;
  std::uint64_t total = 0;
  std::size_t gi = 0;
  for (int layer = 1; layer <= dims.layers; ++layer) {
    if (gi < trace.layers.size() && trace.layers[gi] == layer) {
      total += block_flops(popcount(trace.masks[gi]), c) + selector_flops(cfg.selector, n, c);
      ++gi;
    } else {
      total += block_flops(n, c);
    }
  }
  return total;
}

namespace detail {

void check_finite(const Matrix& x, int layer) {
  if (!x.all_finite()) throw DivergenceError(layer, "non-finite activations after layer " + std::to_string(layer));
}

std::vector<double> column(const Matrix& m, std::size_t c) {
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = m(i, c);
  return out;
}

}  // namespace detail

BackboneOutput run_backbone_infer(const Image& image, const BackboneParams& params, const PruneConfig& cfg,
                                  const InferOptions& opts) {
  cfg.validate(params.dims.layers);
  Eager ops;
  detail::CoreSettings s;
  s.form = opts.form;
  s.forced = opts.forced_masks;
  s.time_layers = opts.time_layers;
  s.on_gate_input = opts.on_gate_input;
  auto r = detail::run_core(ops, image, params, cfg, s);
  BackboneOutput out;
  out.features = std::move(r.features);
  out.head_input = std::move(r.head_input);
  out.scores = std::move(r.scores);
  out.diag.flops = flop_count(cfg, r.trace, flop_dims(params.dims));
  out.diag.layer_seconds = std::move(r.layer_seconds);
  out.trace = std::move(r.trace);
  return out;
}

TrainForward run_backbone_train(Tape& tape, const Image& image, const BackboneParams& params, const PruneConfig& cfg,
                                Rng& rng, const TrainOptions& opts) {
  cfg.validate(params.dims.layers);
  detail::CoreSettings s;
  s.sample = true;
  s.gradient = opts.gradient;
  s.form = ExecForm::masked;
  s.forced = opts.forced_masks;
  s.frozen_noise = opts.frozen_noise;
  s.rng = &rng;
  auto r = detail::run_core(tape, image, params, cfg, s);
  TrainForward out;
  out.features = r.features;
  out.scores = r.scores;
  out.soft_usage = std::move(r.soft_usage);
  out.trace = std::move(r.trace);
  out.noise = std::move(r.noise);
  return out;
}

}  // namespace tokensieve
