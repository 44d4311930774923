// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "tokensieve/checkpoint.hpp"
#include "tokensieve/config.hpp"
#include "tokensieve/harness.hpp"

namespace tokensieve {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint does not fit the requested config.
struct CompatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
};

struct Ctx {
  ExperimentConfig cfg;
  std::string out_dir;
  std::ostream& out;
};

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ExperimentConfig resolve_config(const Common& c) {
  json j;
  if (!c.config.empty()) {
    const std::string text = read_text(c.config);
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  } else {
    j = json::object();
  }
  if (c.seed_given) {
    if (!j.is_object()) throw ConfigError("config: expected an object");
    j["seed"] = c.seed;
  }
  if (c.config.empty() && !c.seed_given) throw ConfigError("seed: required; pass --config or --seed");
  ExperimentConfig cfg = parse_config(j);
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') cfg.out_dir = env;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.threads > 0) cfg.threads = c.threads;
  return cfg;
}

std::string path_in(const Ctx& ctx, const std::string& name) { return (fs::path(ctx.out_dir) / name).string(); }

void write(const Ctx& ctx, const std::string& name, const std::string& content) {
  try {
    write_file_atomic(path_in(ctx, name), content);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
}

void ensure_out_dir(const Ctx& ctx) {
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + ctx.out_dir + ": " + ec.message());
}

void write_resolved(const Ctx& ctx) { write(ctx, "config.resolved.json", config_to_json(ctx.cfg).dump(2) + "\n"); }

std::string jsonl(const std::vector<ordered_json>& recs) {
  std::string s;
  for (const auto& r : recs) {
    s += r.dump();
    s += '\n';
  }
  return s;
}

BackboneParams load_params(const std::string& path) { return params_from_checkpoint(load_checkpoint(path)); }

BackboneParams require_checkpoint(const Common& c, const ExperimentConfig& cfg) {
  if (c.checkpoint.empty()) throw ConfigError("--checkpoint: required for this command");
  BackboneParams p = load_params(c.checkpoint);
  if (!(p.dims == cfg.model)) {
    throw CompatError("checkpoint model dims (layers " + std::to_string(p.dims.layers) + ", width " +
                      std::to_string(p.dims.width) + ", tokens " + std::to_string(p.dims.tokens()) +
                      ") differ from the config (layers " + std::to_string(cfg.model.layers) + ", width " +
                      std::to_string(cfg.model.width) + ", tokens " + std::to_string(cfg.model.tokens()) + ")");
  }
  try {
    check_compatible(p, cfg.prune);
  } catch (const std::invalid_argument& e) {
    throw CompatError(e.what());
  }
  return p;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cmd_train(Ctx& ctx, const Common& c) {
  std::optional<BackboneParams> start;
  if (!c.checkpoint.empty()) {
    start = load_params(c.checkpoint);
    if (!(start->dims == ctx.cfg.model)) throw CompatError("checkpoint model dims differ from the config");
  }
  std::vector<ordered_json> recs;
  TrainResult r = train(ctx.cfg, start, [&](const EpochRecord& e) {
    recs.push_back(to_json(e));
    ctx.out << e.stage << " epoch " << e.epoch << "  loss " << fmt("%.4f", e.loss.total) << "  acc "
            << fmt("%.4f", e.eval.token_acc) << "\n";
  });
  ensure_out_dir(ctx);
  if (r.diverged) {
    save_checkpoint(make_checkpoint(r.params, r.stage, ctx.cfg.seed), path_in(ctx, "checkpoint.last_good.bin"));
    ordered_json e;
    e["error"] = "divergence";
    e["message"] = r.error;
    write(ctx, "error.json", e.dump(2) + "\n");
    throw DivergenceError(0, r.error);
  }
  save_checkpoint(make_checkpoint(r.params, r.stage, ctx.cfg.seed), path_in(ctx, "checkpoint.bin"));
  write(ctx, "metrics.jsonl", jsonl(recs));
  write_resolved(ctx);
  ctx.out << "wrote " << path_in(ctx, "checkpoint.bin") << "\n";
  return kExitOk;
}

int cmd_eval(Ctx& ctx, const Common& c) {
  const BackboneParams p = require_checkpoint(c, ctx.cfg);
  EvalResult r = evaluate(p, ctx.cfg.prune, eval_split(ctx.cfg), ctx.cfg.threads);
  ordered_json rec;
  rec["kind"] = "eval";
  rec["eval"] = to_json(r.metrics);
  ensure_out_dir(ctx);
  write(ctx, "eval.jsonl", rec.dump() + "\n");
  write(ctx, "eval_timing.csv",
        "images,seconds_per_image\n" + std::to_string(r.metrics.images) + "," +
            fmt("%.9f", r.metrics.seconds_per_image) + "\n");
  write_resolved(ctx);
  ctx.out << "token_acc " << fmt("%.4f", r.metrics.token_acc) << "  fg_acc " << fmt("%.4f", r.metrics.fg_acc)
          << "  miou " << fmt("%.4f", r.metrics.miou) << "  flops " << fmt("%.0f", r.metrics.flops) << "\n";
  return kExitOk;
}

int cmd_heatmap(Ctx& ctx, const Common& c) {
  const BackboneParams p = require_checkpoint(c, ctx.cfg);
  EvalResult r = evaluate(p, ctx.cfg.prune, eval_split(ctx.cfg), ctx.cfg.threads);
  const Heatmap h = token_usage_heatmap(r.traces, p.dims.grid(), p.dims.layers);
  ensure_out_dir(ctx);
  write(ctx, "heatmap.csv", heatmap_csv(h));
  std::string avg = "row,col,usage\n";
  for (std::size_t t = 0; t < h.average.size(); ++t) {
    avg += std::to_string(t / h.grid) + "," + std::to_string(t % h.grid) + "," + fmt("%.6f", h.average[t]) + "\n";
  }
  write(ctx, "heatmap_average.csv", avg);
  write(ctx, "heatmap_average.pgm", pgm_average(h));
  for (std::size_t i = 0; i < std::min<std::size_t>(8, h.per_image.size()); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "heatmap_%04zu.pgm", i);
    write(ctx, name, pgm_image(h.per_image[i], h.grid, h.layers));
  }
  write(ctx, "reactivation.jsonl", to_json(reactivation_ratio(r.traces)).dump() + "\n");
  ordered_json s;
  s["kind"] = "eval";
  s["eval"] = to_json(r.metrics);
  s["usage_gap"] = r.metrics.fg_usage - r.metrics.bg_usage;
  write(ctx, "heatmap_summary.json", s.dump(2) + "\n");
  write_resolved(ctx);
  ctx.out << "fg_usage " << fmt("%.4f", r.metrics.fg_usage) << "  bg_usage " << fmt("%.4f", r.metrics.bg_usage)
          << "\n";
  return kExitOk;
}

int cmd_bench(Ctx& ctx, const Common& c) {
  const ExperimentConfig& cfg = ctx.cfg;
  ModelDims dims = cfg.model;
  dims.image_size = cfg.bench.image_size;
  dims.patch = cfg.bench.patch;
  BackboneParams p;
  bool trained = false;
  if (!c.checkpoint.empty()) {
    p = load_params(c.checkpoint);
    if (!(p.dims == dims)) throw CompatError("checkpoint dims do not match the bench resolution");
    trained = true;
  } else {
    Rng rng(derive_seed(cfg.seed, "bench/init"));
    p = init_backbone(dims, rng);
  }
  SceneSpec spec = cfg.data;
  spec.image_size = dims.image_size;
  spec.patch = dims.patch;
  const double scale = static_cast<double>(dims.image_size) / cfg.data.image_size;
  spec.min_shape = std::max(1, static_cast<int>(std::lround(cfg.data.min_shape * scale)));
  spec.max_shape = std::min(dims.image_size, static_cast<int>(std::lround(cfg.data.max_shape * scale)));
  std::vector<Image> images;
  for (const Scene& s : make_dataset(spec, static_cast<std::size_t>(cfg.bench.images), "bench")) {
    images.push_back(s.image);
  }
  bool calibrated = false;
  if (!cfg.prune.dense()) {
    const bool have = cfg.prune.uses_gate() ? !p.gates.empty() : p.cls_token.has_value();
    if (!trained || !have) {
      Rng rng(derive_seed(cfg.seed, "bench/gates"));
      if (cfg.prune.uses_gate()) {
        attach_gates(p, cfg.prune.gated_layers, gate_design_of(cfg.prune.selector), cfg.prune.gate_keep_bias, rng);
        calibrate_gate_bias(p, cfg.prune, images);
        calibrated = true;
      } else {
        attach_class_token(p, rng);
      }
    }
  }
  try {
    check_compatible(p, cfg.prune);
  } catch (const std::invalid_argument& e) {
    throw CompatError(e.what());
  }
  const BenchReport r = bench_wall_clock(p, cfg.prune, images, cfg.bench.repeats, cfg.bench.warmup);
  ensure_out_dir(ctx);
  write(ctx, "bench.csv", bench_csv(r));
  ordered_json s;
  s["tokens"] = r.tokens;
  s["trained_weights"] = trained;
  s["calibrated_gates"] = calibrated;
  s["backbone_ratio"] = r.backbone_ratio();
  s["pipeline_ratio"] = r.sparse_pipeline.median / r.dense_pipeline.median;
  s["flop_ratio"] = r.sparse_flops / static_cast<double>(r.dense_flops);
  s["keep_ratio"] = r.keep_ratio;
  write(ctx, "bench_summary.json", s.dump(2) + "\n");
  write_resolved(ctx);
  ctx.out << "tokens " << r.tokens << "  dense backbone median " << fmt("%.4f", r.dense_backbone.median)
          << " s  sparse " << fmt("%.4f", r.sparse_backbone.median) << " s  ratio " << fmt("%.3f", r.backbone_ratio())
          << "\n";
  return kExitOk;
}

std::optional<BackboneParams> dense_start(const Common& c, const ExperimentConfig& cfg) {
  if (c.checkpoint.empty()) return std::nullopt;
  BackboneParams p = load_params(c.checkpoint);
  if (!(p.dims == cfg.model)) throw CompatError("checkpoint model dims differ from the config");
  p.gates.clear();
  p.cls_token.reset();
  return p;
}

int cmd_sweep(Ctx& ctx, const Common& c) {
  const ExperimentConfig& cfg = ctx.cfg;
  std::optional<BackboneParams> dense = dense_start(c, cfg);
  if (!dense) {
    TrainResult d = train_dense(cfg, train_split(cfg), eval_split(cfg));
    if (d.diverged) throw DivergenceError(0, d.error);
    dense = std::move(d.params);
  }
  const auto rows = sweep_pruning_rate(cfg, *dense, cfg.sweep_ratios);
  std::vector<ordered_json> recs;
  std::string csv = "base_ratio,token_acc,fg_acc,miou,flops,mean_keep,diverged\n";
  for (const auto& r : rows) {
    recs.push_back(to_json(r));
    double mk = 0;
    for (double k : r.eval.keep_ratio) mk += k;
    if (!r.eval.keep_ratio.empty()) mk /= static_cast<double>(r.eval.keep_ratio.size());
    csv += fmt("%.4f", r.base_ratio) + "," + fmt("%.6f", r.eval.token_acc) + "," + fmt("%.6f", r.eval.fg_acc) + "," +
           fmt("%.6f", r.eval.miou) + "," + fmt("%.0f", r.eval.flops) + "," + fmt("%.6f", mk) + "," +
           (r.diverged ? "1" : "0") + "\n";
    ctx.out << "r=" << fmt("%.3f", r.base_ratio) << "  acc " << fmt("%.4f", r.eval.token_acc) << "  flops "
            << fmt("%.0f", r.eval.flops) << "\n";
  }
  ensure_out_dir(ctx);
  write(ctx, "sweep.jsonl", jsonl(recs));
  write(ctx, "sweep.csv", csv);
  write_resolved(ctx);
  return kExitOk;
}

int cmd_compare(Ctx& ctx, const Common& c) {
  const ExperimentConfig& cfg = ctx.cfg;
  std::optional<BackboneParams> given = dense_start(c, cfg);
  const auto rows = compare_gate_designs(cfg, cfg.compare_seeds, [&](std::uint64_t) { return given; });
  std::vector<ordered_json> recs;
  std::string csv = "seed,selector,token_acc,fg_acc,miou,flops,diverged\n";
  for (const auto& r : rows) {
    recs.push_back(to_json(r));
    csv += std::to_string(r.seed) + "," + r.selector + "," + fmt("%.6f", r.eval.token_acc) + "," +
           fmt("%.6f", r.eval.fg_acc) + "," + fmt("%.6f", r.eval.miou) + "," + fmt("%.0f", r.eval.flops) + "," +
           (r.diverged ? "1" : "0") + "\n";
    ctx.out << "seed " << r.seed << "  " << r.selector << "  acc " << fmt("%.4f", r.eval.token_acc) << "\n";
  }
  ensure_out_dir(ctx);
  write(ctx, "compare.jsonl", jsonl(recs));
  write(ctx, "compare.csv", csv);
  write_resolved(ctx);
  return kExitOk;
}

int cmd_gradcheck(Ctx& ctx, double eps, double threshold) {
  ModelGradcheckOptions o;
  o.seed = ctx.cfg.seed;
  o.rate_mode = ctx.cfg.prune.rate_mode;
  o.lambda = ctx.cfg.prune.lambda;
  o.tau = ctx.cfg.prune.tau;
  o.selector = ctx.cfg.prune.selector;
  o.eps = eps;
  o.threshold = threshold;
  const GradReport r = gradcheck_gated_model(o);
  ordered_json j;
  j["passed"] = r.passed;
  j["threshold"] = r.threshold;
  j["eps"] = eps;
  j["max_rel_err"] = r.max_rel_err;
  j["failure"] = r.failure;
  ordered_json ps = ordered_json::array();
  for (const auto& p : r.params) {
    ps.push_back({{"name", p.name},
                  {"max_rel_err", p.max_rel_err},
                  {"max_abs_err", p.max_abs_err},
                  {"worst_index", p.worst_index},
                  {"passed", p.passed}});
  }
  j["params"] = std::move(ps);
  ensure_out_dir(ctx);
  write(ctx, "gradcheck.json", j.dump(2) + "\n");
  write_resolved(ctx);
  ctx.out << (r.passed ? "PASS" : "FAIL") << "  max rel err " << fmt("%.3e", r.max_rel_err) << " over "
          << r.params.size() << " tensors\n";
  if (!r.passed) {
    for (const auto& p : r.params)
      if (!p.passed) ctx.out << "  " << p.name << "  rel err " << fmt("%.3e", p.max_rel_err) << "\n";
    if (!r.failure.empty()) ctx.out << "  " << r.failure << "\n";
  }
  return r.passed ? kExitOk : kExitGradcheck;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (JSON)");
  sub->add_option("--checkpoint", c.checkpoint, "checkpoint file");
  sub->add_option_function<std::uint64_t>(
      "--seed",
      [&c](const std::uint64_t& v) {
        c.seed = v;
        c.seed_given = true;
      },
      "master seed (overrides the config)");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--threads", c.threads, "worker threads for evaluation")->check(CLI::PositiveNumber);
}

void write_error_report(const std::string& out_dir, const char* kind, const std::string& msg) {
  if (out_dir.empty()) return;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) return;
  ordered_json e;
  e["error"] = kind;
  e["message"] = msg;
  try {
    write_file_atomic((fs::path(out_dir) / "error.json").string(), e.dump(2) + "\n");
  } catch (const std::exception&) {
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tokensieve: dynamic token pruning with preserved features for isotropic ViTs", "tokensieve"};
  app.require_subcommand(1);
  Common common;
  double eps = 1e-5, threshold = 1e-4;
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"train", "dense pretrain then sparse finetune"},
      {"eval", "evaluate a checkpoint on the held-out split"},
      {"bench", "wall-clock dense vs sparse inference"},
      {"heatmap", "token-usage heatmaps and reactivation ratios"},
      {"sweep", "accuracy/FLOPs trade-off across keep ratios"},
      {"gradcheck", "finite-difference check of the gated model"},
      {"compare-gates", "MLP gate vs pooled gate across seeds"},
  };
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, common);
    if (std::string(s.name) == "gradcheck") {
      sub->add_option("--eps", eps, "finite-difference step")->check(CLI::Range(1e-7, 1e-4));
      sub->add_option("--threshold", threshold, "max relative error");
    }
  }
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  // Best guess before the config resolves, so early failures still leave error.json.
  std::string out_dir = common.out;
  if (const char* env = std::getenv(kOutDirEnv); out_dir.empty() && env != nullptr) out_dir = env;
  try {
    Ctx ctx{resolve_config(common), "", out};
    ctx.out_dir = out_dir = ctx.cfg.out_dir;
    if (cmd == "train") return cmd_train(ctx, common);
    if (cmd == "eval") return cmd_eval(ctx, common);
    if (cmd == "bench") return cmd_bench(ctx, common);
    if (cmd == "heatmap") return cmd_heatmap(ctx, common);
    if (cmd == "sweep") return cmd_sweep(ctx, common);
    if (cmd == "gradcheck") return cmd_gradcheck(ctx, eps, threshold);
    if (cmd == "compare-gates") return cmd_compare(ctx, common);
    err << "unknown command " << cmd << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    write_error_report(out_dir, "config", e.what());
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    write_error_report(out_dir, "checkpoint", e.what());
    return e.kind() == CheckpointError::Kind::io ? kExitIo : kExitCheckpoint;
  } catch (const CompatError& e) {
    err << "incompatible checkpoint: " << e.what() << "\n";
    write_error_report(out_dir, "checkpoint", e.what());
    return kExitCheckpoint;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    write_error_report(out_dir, "internal", e.what());
    return kExitConfig;
  }
}

}  // namespace tokensieve
