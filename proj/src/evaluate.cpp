// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <exception>
#include <stdexcept>
#include <thread>
#include <tuple>

#include "tokensieve/harness.hpp"

namespace tokensieve {

namespace {

void expect_shape(const std::string& name, const Matrix& m, std::size_t r, std::size_t c) {
  if (m.rows() != r || m.cols() != c) {
    throw std::invalid_argument("tensor " + name + " has shape " + m.shape_str() + ", model expects " +
                                std::to_string(r) + "x" + std::to_string(c));
  }
}

struct PerImage {
  std::vector<int> pred;
  MaskTrace trace;
  std::uint64_t flops = 0;
  double seconds = 0.0;
};

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots so the outcome does not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<int> argmax_rows(const Matrix& s) {
  std::vector<int> out(s.rows());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[best]) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace

void check_compatible(const BackboneParams& p, const PruneConfig& cfg) {
  const ModelDims& d = p.dims;
  d.validate();
  cfg.validate(d.layers);
  const std::size_t c = d.c(), n = d.tokens(), k = static_cast<std::size_t>(d.classes);
  expect_shape("patch.w", p.patch_w, d.patch_dim(), c);
  expect_shape("patch.b", p.patch_b, 1, c);
  expect_shape("pos", p.pos, n, c);
  if (p.blocks.size() != static_cast<std::size_t>(d.layers)) {
    throw std::invalid_argument("checkpoint has " + std::to_string(p.blocks.size()) + " blocks, model expects " +
                                std::to_string(d.layers));
  }
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& b = p.blocks[l];
    const std::string pre = "blocks." + std::to_string(l + 1) + ".";
    const std::size_t one = 1;
    for (auto [name, m, r, cc] : {std::tuple{"ln1_g", &b.ln1_g, one, c}, {"ln1_b", &b.ln1_b, one, c},
                                  {"wq", &b.wq, c, c}, {"bq", &b.bq, one, c}, {"wk", &b.wk, c, c},
                                  {"bk", &b.bk, one, c}, {"wv", &b.wv, c, c}, {"bv", &b.bv, one, c},
                                  {"wo", &b.wo, c, c}, {"bo", &b.bo, one, c}, {"ln2_g", &b.ln2_g, one, c},
                                  {"ln2_b", &b.ln2_b, one, c}, {"w1", &b.w1, c, 4 * c},
                                  {"b1", &b.b1, one, 4 * c}, {"w2", &b.w2, 4 * c, c}, {"b2", &b.b2, one, c}}) {
      expect_shape(pre + name, *m, r, cc);
    }
  }
  expect_shape("head.w", p.head_w, c, k);
  expect_shape("head.b", p.head_b, 1, k);
  if (cfg.dense()) return;
  if (cfg.uses_gate()) {
    Rng dummy(0);
    for (int layer : cfg.gated_layers) {
      auto it = p.gates.find(layer);
      if (it == p.gates.end()) throw std::invalid_argument("checkpoint has no gate for layer " + std::to_string(layer));
      const GateDesign want = gate_design_of(cfg.selector);
      GateParams ref = init_gate(want, c, 0.0, dummy);
      if (it->second.design() != want) {
        std::string first;
        visit_gate_params(ref, [&](const char* name, const Matrix&) {
          if (first.empty()) first = name;
        });
        throw std::invalid_argument("checkpoint is missing gates." + std::to_string(layer) + "." + first +
                                    ": gate at layer " + std::to_string(layer) + " has a different design than " +
                                    to_string(cfg.selector));
      }
      std::vector<std::pair<std::string, const Matrix*>> have;
      visit_gate_params(it->second, [&](const char* name, const Matrix& m) { have.emplace_back(name, &m); });
      std::size_t i = 0;
      visit_gate_params(ref, [&](const char* name, const Matrix& m) {
        expect_shape("gates." + std::to_string(layer) + "." + name, *have[i++].second, m.rows(), m.cols());
      });
    }
  } else {
    if (!p.cls_token) throw std::invalid_argument("checkpoint has no cls_token for the attention-score selector");
    expect_shape("cls_token", *p.cls_token, 1, c);
  }
}

EvalResult evaluate(const BackboneParams& params, const PruneConfig& cfg, const std::vector<Scene>& scenes,
                    int threads) {
  check_compatible(params, cfg);
  const ModelDims& d = params.dims;
  const auto size = static_cast<std::size_t>(d.image_size);
  for (const Scene& s : scenes) {
    if (s.image.height != size || s.image.width != size || s.image.channels != static_cast<std::size_t>(d.channels)) {
      throw std::invalid_argument("scene image " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                                  "x" + std::to_string(s.image.channels) + " does not match model input " +
                                  std::to_string(size) + "x" + std::to_string(size) + "x" +
                                  std::to_string(d.channels));
    }
  }
  std::vector<PerImage> per(scenes.size());
  parallel_for(scenes.size(), threads, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    BackboneOutput o = run_backbone_infer(scenes[i].image, params, cfg);
    per[i].pred = argmax_rows(o.scores);
    per[i].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    per[i].flops = o.diag.flops;
    per[i].trace = std::move(o.trace);
  });

  const auto k = static_cast<std::size_t>(d.classes);
  const std::size_t n = d.tokens();
  std::vector<double> inter(k, 0.0), uni(k, 0.0);
  double correct = 0, total = 0, fg_correct = 0, fg_total = 0, fg_use = 0, bg_use = 0, bg_total = 0;
  EvalResult res;
  EvalMetrics& m = res.metrics;
  m.images = scenes.size();
  m.keep_ratio.assign(cfg.gated_layers.size(), 0.0);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& labels = scenes[i].token_labels;
    const auto usage = token_usage(per[i].trace, n, d.layers);
    for (std::size_t t = 0; t < n; ++t) {
      const auto y = static_cast<std::size_t>(labels[t]);
      const auto p = static_cast<std::size_t>(per[i].pred[t]);
      const double u = static_cast<double>(usage[t]) / d.layers;
      correct += p == y;
      total += 1;
      if (y != 0) {
        fg_correct += p == y;
        fg_total += 1;
        fg_use += u;
      } else {
        bg_use += u;
        bg_total += 1;
      }
      if (p == y) {
        inter[y] += 1;
        uni[y] += 1;
      } else {
        uni[y] += 1;
        uni[p] += 1;
      }
    }
    const auto h = hard_usage(per[i].trace);
    for (std::size_t l = 0; l < h.size(); ++l) m.keep_ratio[l] += h[l];
    m.flops += static_cast<double>(per[i].flops);
    m.seconds_per_image += per[i].seconds;
    res.traces.push_back(std::move(per[i].trace));
  }
  if (scenes.empty()) return res;
  const double inv = 1.0 / static_cast<double>(scenes.size());
  for (double& r : m.keep_ratio) r *= inv;
  m.flops *= inv;
  m.seconds_per_image *= inv;
  m.token_acc = correct / total;
  m.fg_acc = fg_total > 0 ? fg_correct / fg_total : 0.0;
  m.fg_usage = fg_total > 0 ? fg_use / fg_total : 0.0;
  m.bg_usage = bg_total > 0 ? bg_use / bg_total : 0.0;
  double iou_sum = 0;
  int present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (uni[c] > 0) {
      iou_sum += inter[c] / uni[c];
      ++present;
    }
  }
  m.miou = present > 0 ? iou_sum / present : 0.0;
  return res;
}

std::vector<SweepRow> sweep_pruning_rate(const ExperimentConfig& cfg, const BackboneParams& dense,
                                         const std::vector<double>& base_ratios) {
  const auto tr = train_split(cfg);
  const auto ev = eval_split(cfg);
  std::vector<SweepRow> rows;
  for (double r : base_ratios) {
    ExperimentConfig c = cfg;
    c.prune.keep_ratios = schedule_from_base(r, c.prune.gated_layers.size());
    c.validate();
    BackboneParams start = dense;
    start.gates.clear();
    TrainResult t = train_sparse(c, std::move(start), tr, ev);
    SweepRow row;
    row.base_ratio = r;
    row.schedule = c.prune.keep_ratios;
    row.diverged = t.diverged;
    row.eval = evaluate(t.params, c.prune, ev, c.threads).metrics;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<CompareRow> compare_gate_designs(
    const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
    const std::function<std::optional<BackboneParams>(std::uint64_t)>& dense_for_seed) {
  std::vector<CompareRow> rows;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig c = cfg;
    c.seed = seed;
    c.data.seed = seed;
    c.validate();
    const auto tr = train_split(c);
    const auto ev = eval_split(c);
    std::optional<BackboneParams> dense = dense_for_seed ? dense_for_seed(seed) : std::nullopt;
    if (!dense) {
      TrainResult d = train_dense(c, tr, ev);
      if (d.diverged) throw std::runtime_error("dense training diverged for seed " + std::to_string(seed));
      dense = std::move(d.params);
    }
    for (Selector s : {Selector::gate_mlp, Selector::gate_pooled}) {
      ExperimentConfig cs = c;
      cs.prune.selector = s;
      BackboneParams start = *dense;
      start.gates.clear();
      TrainResult t = train_sparse(cs, std::move(start), tr, ev);
      CompareRow row;
      row.seed = seed;
      row.selector = to_string(s);
      row.diverged = t.diverged;
      row.eval = evaluate(t.params, cs.prune, ev, cs.threads).metrics;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace tokensieve
