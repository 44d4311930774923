// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <stdexcept>

#include "tokensieve/harness.hpp"

namespace tokensieve {

namespace {

// Thrown from the gate-input hook once the wanted layer has been seen, so
// calibration does not pay for the rest of the backbone.
struct CaptureDone {};

double& keep_bias(GateParams& g) {
  if (auto* m = std::get_if<MlpGate>(&g.net)) return m->b2(0, 0);
  return std::get<PooledGate>(g.net).b3(0, 0);
}

}  // namespace

void calibrate_gate_bias(BackboneParams& params, const PruneConfig& cfg, const std::vector<Image>& images) {
  if (!cfg.uses_gate()) return;
  if (images.empty()) throw std::invalid_argument("calibrate_gate_bias: no images");
  check_compatible(params, cfg);
  for (std::size_t j = 0; j < cfg.gated_layers.size(); ++j) {
    const int layer = cfg.gated_layers[j];
    GateParams& gate = params.gates.at(layer);
    std::vector<double> margin;
    for (const Image& img : images) {
      InferOptions opts;
      opts.on_gate_input = [&](int l, const Matrix& x) {
        if (l != layer) return;
        const Matrix p = gate_probs(x, gate);
        for (std::size_t i = 0; i < p.rows(); ++i) margin.push_back(std::log(p(i, 0)) - std::log(p(i, 1)));
        throw CaptureDone{};
      };
      try {
        run_backbone_infer(img, params, cfg, opts);
      } catch (const CaptureDone&) {
      }
    }
    std::sort(margin.begin(), margin.end(), std::greater<>());
    const auto k = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(cfg.keep_ratios[j] * static_cast<double>(margin.size()))), 1,
        margin.size());
    // Keep iff margin + shift >= 0: place the threshold between the k-th and
    // (k+1)-th largest margins.
    const double shift = k < margin.size() ? -(margin[k - 1] + margin[k]) / 2.0 : -margin.back() + 1.0;
    keep_bias(gate) += shift;
  }
}

BenchReport bench_wall_clock(const BackboneParams& params, const PruneConfig& cfg, const std::vector<Image>& images,
                             int repeats, int warmup) {
  if (images.empty()) throw std::invalid_argument("bench_wall_clock: no images");
  if (repeats < 1) throw std::invalid_argument("bench_wall_clock: repeats must be >= 1");
  check_compatible(params, cfg);
  const PruneConfig dense = dense_config();
  using Clock = std::chrono::steady_clock;
  BenchReport r;
  r.tokens = params.dims.tokens();
  r.keep_ratio.assign(cfg.gated_layers.size(), 0.0);
  std::vector<double> db, dp, sb, sp;
  double sparse_flops = 0.0;
  for (int rep = 0; rep < warmup + repeats; ++rep) {
    const bool keep = rep >= warmup;
    for (const Image& img : images) {
      // Dense and sparse alternate on the same image so slow drift affects both.
      for (const PruneConfig* c : {&dense, &cfg}) {
        InferOptions opts;
        opts.time_layers = true;
        const auto t0 = Clock::now();
        BackboneOutput o = run_backbone_infer(img, params, *c, opts);
        std::vector<int> pred(o.scores.rows());
        for (std::size_t i = 0; i < o.scores.rows(); ++i) {
          const auto row = o.scores.row(i);
          pred[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        }
        const double pipeline = std::chrono::duration<double>(Clock::now() - t0).count();
        const double backbone = std::accumulate(o.diag.layer_seconds.begin(), o.diag.layer_seconds.end(), 0.0);
        if (!keep) continue;
        if (c == &dense) {
          db.push_back(backbone);
          dp.push_back(pipeline);
          r.dense_flops = o.diag.flops;
        } else {
          sb.push_back(backbone);
          sp.push_back(pipeline);
          sparse_flops += static_cast<double>(o.diag.flops);
          const auto h = hard_usage(o.trace);
          for (std::size_t l = 0; l < h.size(); ++l) r.keep_ratio[l] += h[l];
        }
      }
    }
  }
  const auto count = static_cast<double>(sb.size());
  r.sparse_flops = sparse_flops / count;
  for (double& k : r.keep_ratio) k /= count;
  r.dense_backbone = summarize(std::move(db));
  r.dense_pipeline = summarize(std::move(dp));
  r.sparse_backbone = summarize(std::move(sb));
  r.sparse_pipeline = summarize(std::move(sp));
  return r;
}

std::string bench_csv(const BenchReport& r) {
  std::string out = "variant,scope,tokens,samples,median_s,q1_s,q3_s,iqr_s,flops\n";
  char buf[256];
  auto row = [&](const char* variant, const char* scope, const TimingSummary& s, double flops) {
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%zu,%.9f,%.9f,%.9f,%.9f,%.0f\n", variant, scope, r.tokens,
                  s.samples.size(), s.median, s.q1, s.q3, s.iqr(), flops);
    out += buf;
  };
  row("dense", "backbone", r.dense_backbone, static_cast<double>(r.dense_flops));
  row("dense", "pipeline", r.dense_pipeline, static_cast<double>(r.dense_flops));
  row("sparse", "backbone", r.sparse_backbone, r.sparse_flops);
  row("sparse", "pipeline", r.sparse_pipeline, r.sparse_flops);
  return out;
}

}  // namespace tokensieve
