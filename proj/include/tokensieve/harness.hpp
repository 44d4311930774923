// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Training, evaluation and diagnostic statistics on synthetic scenes.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokensieve/engine.hpp"
#include "tokensieve/grad_check.hpp"
#include "tokensieve/losses.hpp"
#include "tokensieve/scene.hpp"
#include "tokensieve/vit.hpp"

namespace tokensieve {

struct OptimConfig {
  int dense_epochs = 20;
  int sparse_epochs = 10;
  int batch_size = 8;
  double lr_dense = 1e-3;
  double lr_sparse = 1e-5;
  // Adam constants.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

struct BenchConfig {
  // The benchmark model shares layers, heads, width and classes with the
  // experiment but runs at its own resolution.
  int image_size = 128;  // 1024 tokens at patch 4
  int patch = 4;
  int images = 2;
  int repeats = 5;
  int warmup = 1;

  void validate() const;
  bool operator==(const BenchConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelDims model;
  PruneConfig prune;
  OptimConfig optim;
  SceneSpec data;
  int train_images = 256;
  int eval_images = 64;
  std::string out_dir = "out";
  int threads = 1;
  BenchConfig bench;
  std::vector<double> sweep_ratios = {1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
  std::vector<std::uint64_t> compare_seeds = {1, 2, 3};

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// Datasets for a config: scene i of split "train"/"eval" is seeded by
// derive_seed(data.seed, split, i).
std::vector<Scene> train_split(const ExperimentConfig& cfg);
std::vector<Scene> eval_split(const ExperimentConfig& cfg);

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  // grads follows visit_params order.
  void step(BackboneParams& p, const std::vector<Matrix>& grads);
  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

struct EvalMetrics {
  std::size_t images = 0;
  double token_acc = 0.0;
  double fg_acc = 0.0;  // over tokens whose label is not background
  double miou = 0.0;    // mean IoU over classes present in labels or predictions
  std::vector<double> keep_ratio;  // hard keep fraction per gated layer
  double flops = 0.0;              // mean per image
  double fg_usage = 0.0;  // mean fraction of layers a foreground token is active in
  double bg_usage = 0.0;
  double seconds_per_image = 0.0;  // wall-clock; kept out of metric logs
};

struct EvalResult {
  EvalMetrics metrics;
  std::vector<MaskTrace> traces;
};

// Checks that params carry every tensor cfg needs at the shapes of
// params.dims; throws std::invalid_argument naming the mismatch.
void check_compatible(const BackboneParams& params, const PruneConfig& cfg);

EvalResult evaluate(const BackboneParams& params, const PruneConfig& cfg, const std::vector<Scene>& scenes,
                    int threads = 1);

struct EpochRecord {
  std::string stage;  // "dense" | "sparse"
  int epoch = 0;
  long steps = 0;
  LossReport loss;  // means over the epoch's steps
  EvalMetrics eval;
};

struct TrainResult {
  BackboneParams params;
  std::string stage;
  std::vector<EpochRecord> log;
  bool diverged = false;
  std::string error;
};

using EpochSink = std::function<void(const EpochRecord&)>;

// Fresh init and dense training (all tokens, task loss only).
TrainResult train_dense(const ExperimentConfig& cfg, const std::vector<Scene>& train, const std::vector<Scene>& eval,
                        const EpochSink& sink = {});

// Attaches selectors to `dense` and finetunes everything on task + lambda * ratio.
TrainResult train_sparse(const ExperimentConfig& cfg, BackboneParams dense, const std::vector<Scene>& train,
                         const std::vector<Scene>& eval, const EpochSink& sink = {});

// Dense stage (skipped when `start` is given), then the sparse stage when the
// prune config is not dense.
TrainResult train(const ExperimentConfig& cfg, const std::optional<BackboneParams>& start = std::nullopt,
                  const EpochSink& sink = {});

// Number of layers each token is active in: every ungated layer plus the
// gated layers whose mask keeps it.
std::vector<int> token_usage(const MaskTrace& trace, std::size_t tokens, int layers);

struct Heatmap {
  std::size_t grid = 0;
  int layers = 0;
  std::vector<std::vector<int>> per_image;  // grid*grid each
  std::vector<double> average;
};

Heatmap token_usage_heatmap(const std::vector<MaskTrace>& traces, std::size_t grid, int layers);
std::string heatmap_csv(const Heatmap& h);
// Plain PGM (P2). Per-image maps use maxval = layers; the average is scaled
// to 0..255 over [0, layers].
std::string pgm_image(const std::vector<int>& values, std::size_t grid, int maxval);
std::string pgm_average(const Heatmap& h);

struct ReactivationStat {
  int layer = 0;
  std::size_t pruned = 0;            // tokens with mask 0 at this layer
  std::size_t reused = 0;            // ... and mask 1 at some later gated layer
  std::size_t reused_next = 0;       // ... and mask 1 at the next gated layer
  std::optional<double> ratio;       // reused / pruned; empty when pruned = 0
  std::optional<double> immediate;   // reused_next / reused; empty when reused = 0
};

// Pooled over every trace; traces must share the gated-layer list.
std::vector<ReactivationStat> reactivation_ratio(const std::vector<MaskTrace>& traces);

struct SweepRow {
  double base_ratio = 0.0;
  std::vector<double> schedule;
  bool diverged = false;
  EvalMetrics eval;
};

std::vector<SweepRow> sweep_pruning_rate(const ExperimentConfig& cfg, const BackboneParams& dense,
                                         const std::vector<double>& base_ratios);

struct CompareRow {
  std::uint64_t seed = 0;
  std::string selector;
  bool diverged = false;
  EvalMetrics eval;
};

// For each seed, trains a dense model (or takes it from `dense_for_seed`)
// and finetunes the MLP gate and the pooled gate from it with identical data
// order and noise streams.
std::vector<CompareRow> compare_gate_designs(
    const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
    const std::function<std::optional<BackboneParams>(std::uint64_t)>& dense_for_seed = {});

// Shifts each gate's keep bias, layer by layer, so the argmax keep fraction
// over `images` matches the configured schedule.
void calibrate_gate_bias(BackboneParams& params, const PruneConfig& cfg, const std::vector<Image>& images);

struct TimingSummary {
  std::vector<double> samples;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr() const { return q3 - q1; }
};

// Linear-interpolation quantile of unsorted samples, q in [0, 1].
double quantile(std::vector<double> v, double q);
TimingSummary summarize(std::vector<double> samples);

struct BenchReport {
  std::size_t tokens = 0;
  TimingSummary dense_backbone, dense_pipeline, sparse_backbone, sparse_pipeline;
  std::uint64_t dense_flops = 0;
  double sparse_flops = 0.0;  // mean over images
  std::vector<double> keep_ratio;
  double backbone_ratio() const { return sparse_backbone.median / dense_backbone.median; }
};

// Times dense and sparse inference on identical inputs; each sample is one
// image forward. Warmup passes are discarded.
BenchReport bench_wall_clock(const BackboneParams& params, const PruneConfig& cfg, const std::vector<Image>& images,
                             int repeats, int warmup);
std::string bench_csv(const BenchReport& r);

struct ModelGradcheckOptions {
  std::uint64_t seed = 0;
  RateMode rate_mode = RateMode::dynamic;
  double lambda = 4.0;
  double tau = 1.0;
  Selector selector = Selector::gate_mlp;
  double eps = 1e-5;
  double threshold = 1e-4;
};

// Finite-difference check of task + lambda * ratio over every parameter of
// a tiny gated model (2 blocks, gate on block 2, N=16, C=16, batch of 2).
// Gumbel noise is frozen and the hard masks are pinned to their values at the
// unperturbed point; the combine uses the relaxed keep value so the gate is
// on the differentiated path.
GradReport gradcheck_gated_model(const ModelGradcheckOptions& opts);

// Metric-log records (one JSON object per line). Wall-clock fields are never
// written to these records so replays stay byte-identical.
nlohmann::ordered_json to_json(const EvalMetrics& m);
nlohmann::ordered_json to_json(const LossReport& l);
nlohmann::ordered_json to_json(const EpochRecord& r);
nlohmann::ordered_json to_json(const SweepRow& r);
nlohmann::ordered_json to_json(const CompareRow& r);
nlohmann::ordered_json to_json(const std::vector<ReactivationStat>& s);
// Empty string when the record matches the schema of its "kind"; otherwise a
// description of the first violation.
std::string validate_metric_record(const nlohmann::json& rec);

// Writes to path + ".tmp" and renames over path.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace tokensieve
