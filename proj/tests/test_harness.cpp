// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "tokensieve/harness.hpp"
#include "tokensieve/losses.hpp"

using namespace tokensieve;
using namespace tokensieve::testing;
using nlohmann::json;

TEST_CASE("scene generation") {
  SceneSpec spec;
  spec.image_size = 16;
  spec.patch = 4;
  spec.classes = 4;
  spec.noise = 0.0;
  Rng rng(1);
  SUBCASE("no shapes means all background") {
    spec.shapes = 0;
    const Scene s = gen_synthetic_scene(spec, rng);
    for (int l : s.token_labels) CHECK(l == 0);
    for (double v : s.image.pixels) CHECK(v == kBackgroundLevel);
  }
  SUBCASE("a shape covering exactly one patch makes one foreground token") {
    const Scene s = render_scene(spec, {Shape{Shape::Kind::rect, 2, 4, 8, 4, 4}}, rng);
    int fg = 0;
    for (int l : s.token_labels) fg += l != 0;
    CHECK(fg == 1);
    CHECK(s.token_labels[1 * 4 + 2] == 2);
  }
  SUBCASE("a shape outside the image is rejected") {
    CHECK_THROWS(render_scene(spec, {Shape{Shape::Kind::rect, 1, 14, 0, 4, 4}}, rng));
  }
  SUBCASE("replay is identical") {
    spec.noise = 0.05;
    Rng a(7), b(7);
    const Scene x = gen_synthetic_scene(spec, a), y = gen_synthetic_scene(spec, b);
    CHECK(x.image.pixels == y.image.pixels);
    CHECK(x.token_labels == y.token_labels);
    const auto d1 = make_dataset(spec, 3, "train"), d2 = make_dataset(spec, 3, "train");
    CHECK(d1[2].image.pixels == d2[2].image.pixels);
    CHECK(make_dataset(spec, 3, "eval")[0].image.pixels != d1[0].image.pixels);
  }
}

TEST_CASE("patch majority ties go to the smaller class") {
  // 2x2 image, one patch: two pixels of class 3, two of class 1.
  CHECK(patch_majority_labels({3, 1, 1, 3}, 2, 2, 4) == std::vector<int>{1});
  CHECK(patch_majority_labels({3, 3, 1, 0}, 2, 2, 4) == std::vector<int>{3});
}

TEST_CASE("token usage and heatmaps") {
  MaskTrace tr;
  for (int l = 4; l <= 12; ++l) {
    tr.layers.push_back(l);
    tr.masks.push_back(LayerMask{1, 0});
  }
  CHECK(token_usage(tr, 2, 12) == std::vector<int>{12, 3});

  Rng rng(2);
  std::vector<MaskTrace> traces;
  for (int i = 0; i < 20; ++i) {
    MaskTrace t;
    t.layers = {2, 3, 4};
    for (int g = 0; g < 3; ++g) t.masks.push_back(random_mask(rng, 9));
    traces.push_back(t);
  }
  const Heatmap h = token_usage_heatmap(traces, 3, 5);
  for (std::size_t t = 0; t < 9; ++t) {
    double mean = 0;
    for (const auto& img : h.per_image) {
      CHECK(img[t] >= 2);
      CHECK(img[t] <= 5);
      mean += img[t];
    }
    CHECK(std::abs(h.average[t] - mean / 20) <= 1e-12);
  }
  const std::string csv = heatmap_csv(h);
  CHECK(csv.rfind("image,row,col,usage\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 20 * 9);
  const std::string pgm = pgm_image(h.per_image[0], 3, 5);
  CHECK(pgm.rfind("P2\n3 3\n5\n", 0) == 0);
}

TEST_CASE("reactivation ratio") {
  MaskTrace a, b;
  a.layers = b.layers = {1, 2, 3};
  a.masks = {{1}, {0}, {1}};
  b.masks = {{1}, {0}, {0}};
  const auto s = reactivation_ratio({a, b});
  REQUIRE(s.size() == 3);
  CHECK_FALSE(s[0].ratio.has_value());
  REQUIRE(s[1].ratio.has_value());
  CHECK(*s[1].ratio == 0.5);
  CHECK(*s[1].immediate == 1.0);
  CHECK(s[2].pruned == 1);
  CHECK(*s[2].ratio == 0.0);

  Rng rng(3);
  std::vector<MaskTrace> nested;
  for (int i = 0; i < 50; ++i) {
    MaskTrace t;
    t.layers = {1, 2, 3, 4};
    LayerMask prev = all_ones(10);
    for (int g = 0; g < 4; ++g) {
      prev = restrict_no_reactivation(random_mask(rng, 10), prev);
      t.masks.push_back(prev);
    }
    nested.push_back(t);
  }
  for (const auto& st : reactivation_ratio(nested)) {
    if (st.ratio) CHECK(*st.ratio == 0.0);
    CHECK_FALSE(st.immediate.has_value());
  }
}

TEST_CASE("quantiles") {
  CHECK(quantile({3, 1, 2}, 0.5) == 2);
  CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(quantile({1, 2, 3, 4, 5}, 0.25) == 2);
  const TimingSummary s = summarize({5.0});
  CHECK(s.median == 5.0);
  CHECK(s.q1 == 5.0);
  CHECK_THROWS(quantile({}, 0.5));
}

TEST_CASE("evaluation on the dense path") {
  const ExperimentConfig cfg = tiny_experiment();
  Rng rng(4);
  const BackboneParams p = random_backbone(cfg.model, 4);
  const auto scenes = eval_split(cfg);
  const EvalResult a = evaluate(p, dense_config(), scenes);
  const EvalResult b = evaluate(p, dense_config(), scenes, 3);
  CHECK(a.metrics.flops == static_cast<double>(flop_count(dense_config(), MaskTrace{}, flop_dims(cfg.model))));
  CHECK(to_json(a.metrics).dump() == to_json(b.metrics).dump());
  CHECK(a.metrics.token_acc >= 0.0);
  CHECK(a.metrics.token_acc <= 1.0);
  CHECK(a.metrics.miou >= 0.0);
  CHECK(a.metrics.miou <= 1.0);

  BackboneParams g = p;
  attach_gates(g, cfg.prune.gated_layers, GateDesign::mlp, 0.0, rng);
  const EvalResult s = evaluate(g, cfg.prune, scenes);
  bool any_zero = false;
  for (const auto& t : s.traces)
    for (const auto& m : t.masks) any_zero = any_zero || popcount(m) < m.size();
  if (any_zero) CHECK(s.metrics.flops < a.metrics.flops);
}

TEST_CASE("check_compatible names the offending tensor") {
  const ExperimentConfig cfg = tiny_experiment();
  BackboneParams p = random_backbone(cfg.model, 5);
  try {
    check_compatible(p, cfg.prune);
    FAIL("missing gates must be rejected");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("gate") != std::string::npos);
  }
  Rng rng(5);
  attach_gates(p, cfg.prune.gated_layers, GateDesign::mlp, 0.0, rng);
  CHECK_NOTHROW(check_compatible(p, cfg.prune));
  p.blocks[1].wq = Matrix(3, 3);
  try {
    check_compatible(p, cfg.prune);
    FAIL("bad shape must be rejected");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("blocks.2.wq") != std::string::npos);
  }
}

TEST_CASE("training replays bit-exactly and logs schema-valid records") {
  const ExperimentConfig cfg = tiny_experiment(3);
  auto run = [&] {
    std::string log;
    const TrainResult r = train(cfg, std::nullopt, [&](const EpochRecord& e) {
      const auto j = to_json(e);
      CHECK(validate_metric_record(json::parse(j.dump())).empty());
      log += j.dump() + "\n";
    });
    CHECK_FALSE(r.diverged);
    CHECK(r.stage == "sparse");
    return log;
  };
  const std::string a = run(), b = run();
  CHECK(a == b);
  CHECK(std::count(a.begin(), a.end(), '\n') == 2);
}

TEST_CASE("keep-all targets without ratio pressure converge to keep-all") {
  for (std::uint64_t seed : {1, 2, 3}) {
    ExperimentConfig cfg = tiny_experiment(seed);
    cfg.prune.lambda = 0.0;
    cfg.prune.keep_ratios.assign(3, 1.0);
    cfg.optim.sparse_epochs = 2;
    const TrainResult r = train(cfg);
    REQUIRE_FALSE(r.diverged);
    double mean = 0;
    for (double k : r.log.back().eval.keep_ratio) mean += k;
    mean /= 3;
    CHECK(mean >= 0.99);
  }
}

TEST_CASE("divergence stops training and returns the last good parameters") {
  ExperimentConfig cfg = tiny_experiment(4);
  cfg.optim.lr_dense = 1e200;
  cfg.optim.dense_epochs = 3;
  const TrainResult r = train(cfg);
  CHECK(r.diverged);
  CHECK_FALSE(r.error.empty());
  bool finite = true;
  visit_params(r.params, [&](const std::string&, const Matrix& m) { finite = finite && m.all_finite(); });
  CHECK(finite);
}

TEST_CASE("metric schema rejects malformed records") {
  EvalMetrics m;
  m.images = 2;
  m.token_acc = 0.5;
  m.keep_ratio = {0.5};
  json good = {{"kind", "eval"}, {"eval", json::parse(to_json(m).dump())}};
  CHECK(validate_metric_record(good).empty());
  json bad = good;
  bad["eval"]["token_acc"] = 1.5;
  CHECK_FALSE(validate_metric_record(bad).empty());
  CHECK_FALSE(validate_metric_record(json{{"kind", "nope"}}).empty());
  CHECK_FALSE(validate_metric_record(json::array()).empty());
  CompareRow row;
  row.seed = 1;
  row.selector = "gate_mlp";
  row.eval = m;
  CHECK(validate_metric_record(json::parse(to_json(row).dump())).empty());
}

TEST_CASE("gate bias calibration hits the schedule") {
  ExperimentConfig cfg = tiny_experiment();
  BackboneParams p = random_backbone(cfg.model, 6);
  Rng rng(6);
  attach_gates(p, cfg.prune.gated_layers, GateDesign::mlp, 0.0, rng);
  std::vector<Image> images;
  for (const auto& s : eval_split(cfg)) images.push_back(s.image);
  calibrate_gate_bias(p, cfg.prune, images);
  const EvalResult r = evaluate(p, cfg.prune, eval_split(cfg));
  for (std::size_t g = 0; g < 3; ++g) CHECK(std::abs(r.metrics.keep_ratio[g] - cfg.prune.keep_ratios[g]) <= 0.1);
}

TEST_CASE("a single-repeat benchmark still reports everything") {
  ExperimentConfig cfg = tiny_experiment();
  BackboneParams p = random_backbone(cfg.model, 7);
  Rng rng(7);
  attach_gates(p, cfg.prune.gated_layers, GateDesign::mlp, 0.0, rng);
  std::vector<Image> images = {random_image(rng, cfg.model)};
  const BenchReport r = bench_wall_clock(p, cfg.prune, images, 1, 0);
  CHECK(r.tokens == 16);
  CHECK(r.dense_backbone.samples.size() == 1);
  CHECK(r.sparse_backbone.samples.size() == 1);
  CHECK(r.dense_flops > 0);
  const std::string csv = bench_csv(r);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("gate comparison and sweep emit schema-valid rows") {
  ExperimentConfig cfg = tiny_experiment(5);
  const auto rows = compare_gate_designs(cfg, {5});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].selector != rows[1].selector);
  for (const auto& r : rows) CHECK(validate_metric_record(json::parse(to_json(r).dump())).empty());
  const TrainResult d = train_dense(cfg, train_split(cfg), eval_split(cfg));
  const auto sweep = sweep_pruning_rate(cfg, d.params, {1.0, 0.5});
  REQUIRE(sweep.size() == 2);
  CHECK(sweep[0].schedule == std::vector<double>(3, 1.0));
  CHECK(sweep[1].schedule == std::vector<double>(3, 0.5));
  for (const auto& r : sweep) CHECK(validate_metric_record(json::parse(to_json(r).dump())).empty());
}
