// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tokensieve/harness.hpp"

namespace tokensieve {

namespace {

void fail(const std::string& field, const std::string& msg) { throw std::invalid_argument(field + " " + msg); }

struct StepOut {
  LossReport report;
  std::vector<Matrix> grads;
};

StepOut batch_step(const BackboneParams& p, const PruneConfig& pc, const std::vector<const Scene*>& batch, Rng& rng,
                   bool sparse) {
  Tape tape;
  std::vector<Var> tasks;
  std::vector<std::vector<Var>> usage;
  std::vector<double> hard_mean(pc.gated_layers.size(), 0.0);
  for (const Scene* sc : batch) {
    TrainForward f = run_backbone_train(tape, sc->image, p, pc, rng);
    tasks.push_back(tape.cross_entropy(f.scores, sc->token_labels));
    usage.push_back(std::move(f.soft_usage));
    const auto h = hard_usage(f.trace);
    for (std::size_t l = 0; l < h.size(); ++l) hard_mean[l] += h[l] / static_cast<double>(batch.size());
  }
  Var task = tasks[0];
  for (std::size_t i = 1; i < tasks.size(); ++i) task = tape.add(task, tasks[i]);
  task = tape.scale(task, 1.0 / static_cast<double>(tasks.size()));
  Var total = task;
  StepOut out;
  if (sparse) {
    Var ratio = ratio_loss(tape, pc.rate_mode, usage, pc.keep_ratios);
    total = tape.add(task, tape.scale(ratio, pc.lambda));
    out.report.ratio = tape.value(ratio)(0, 0);
  }
  out.report.task = tape.value(task)(0, 0);
  out.report.total = tape.value(total)(0, 0);
  out.report.usage = std::move(hard_mean);
  tape.backward(total);
  visit_params(p, [&](const std::string&, const Matrix& m) { out.grads.push_back(tape.grad_of(m)); });
  return out;
}

bool all_finite(const std::vector<Matrix>& ms) {
  for (const auto& m : ms)
    if (!m.all_finite()) return false;
  return true;
}

bool has_gates_for(const BackboneParams& p, const PruneConfig& pc) {
  if (p.gates.size() != pc.gated_layers.size()) return false;
  for (int l : pc.gated_layers) {
    auto it = p.gates.find(l);
    if (it == p.gates.end() || it->second.design() != gate_design_of(pc.selector)) return false;
  }
  return true;
}

// Shared epoch loop of both stages.
TrainResult run_stage(const ExperimentConfig& cfg, const std::string& stage, BackboneParams params,
                      const PruneConfig& pc, double lr, int epochs, const std::vector<Scene>& train,
                      const std::vector<Scene>& eval, const EpochSink& sink) {
  const bool sparse = stage == "sparse";
  TrainResult res;
  res.stage = stage;
  if (train.empty()) throw std::invalid_argument("train_images must be positive");
  Adam adam(lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
  const auto bs = static_cast<std::size_t>(cfg.optim.batch_size);
  long step = 0;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(derive_seed(cfg.seed, stage + "/order", static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    EpochRecord rec;
    rec.stage = stage;
    rec.epoch = epoch;
    rec.loss.usage.assign(pc.gated_layers.size(), 0.0);
    long epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<const Scene*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(&train[order[i]]);
      Rng gumbel(derive_seed(cfg.seed, stage + "/gumbel", static_cast<std::uint64_t>(step)));
      StepOut so;
      try {
        so = batch_step(params, pc, batch, gumbel, sparse);
      } catch (const DivergenceError& e) {
        res.diverged = true;
        res.error = std::string(e.what()) + " at " + stage + " step " + std::to_string(step);
      }
      if (!res.diverged && (!std::isfinite(so.report.total) || !all_finite(so.grads))) {
        res.diverged = true;
        res.error = "non-finite loss or gradient at " + stage + " step " + std::to_string(step);
      }
      if (res.diverged) {
        // params still hold the state before the failing step.
        res.params = std::move(params);
        return res;
      }
      adam.step(params, so.grads);
      ++step;
      ++epoch_steps;
      rec.loss.task += so.report.task;
      rec.loss.ratio += so.report.ratio;
      rec.loss.total += so.report.total;
      for (std::size_t l = 0; l < so.report.usage.size(); ++l) rec.loss.usage[l] += so.report.usage[l];
    }
    const double inv = 1.0 / static_cast<double>(epoch_steps);
    rec.loss.task *= inv;
    rec.loss.ratio *= inv;
    rec.loss.total *= inv;
    for (double& u : rec.loss.usage) u *= inv;
    rec.steps = step;
    if (!eval.empty()) rec.eval = evaluate(params, pc, eval, cfg.threads).metrics;
    if (sink) sink(rec);
    res.log.push_back(std::move(rec));
  }
  res.params = std::move(params);
  return res;
}

}  // namespace

void OptimConfig::validate() const {
  if (dense_epochs < 0) fail("optim.dense_epochs", "must be >= 0");
  if (sparse_epochs < 0) fail("optim.sparse_epochs", "must be >= 0");
  if (batch_size < 1) fail("optim.batch_size", "must be >= 1");
  if (!(lr_dense > 0.0)) fail("optim.lr_dense", "must be > 0");
  if (!(lr_sparse > 0.0)) fail("optim.lr_sparse", "must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("optim.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("optim.beta2", "must lie in [0, 1)");
  if (!(eps > 0.0)) fail("optim.eps", "must be > 0");
}

void BenchConfig::validate() const {
  if (image_size <= 0) fail("bench.image_size", "must be positive");
  if (patch <= 0) fail("bench.patch", "must be positive");
  if (image_size % patch != 0) fail("bench.image_size", "must be divisible by bench.patch");
  if (images < 1) fail("bench.images", "must be >= 1");
  if (repeats < 1) fail("bench.repeats", "must be >= 1");
  if (warmup < 0) fail("bench.warmup", "must be >= 0");
}

void ExperimentConfig::validate() const {
  model.validate();
  prune.validate(model.layers);
  optim.validate();
  data.validate();
  bench.validate();
  if (data.image_size != model.image_size) fail("data.image_size", "must equal model.image_size");
  if (data.patch != model.patch) fail("data.patch", "must equal model.patch");
  if (data.classes != model.classes) fail("data.classes", "must equal model.classes");
  if (model.channels != 3) fail("model.channels", "must be 3 for RGB scenes");
  if (train_images < 1) fail("train_images", "must be >= 1");
  if (eval_images < 1) fail("eval_images", "must be >= 1");
  if (threads < 1) fail("threads", "must be >= 1");
  if (out_dir.empty()) fail("out_dir", "must not be empty");
  for (double r : sweep_ratios) {
    if (!(r > 0.0 && r <= 1.0)) fail("sweep_ratios", "entries must lie in (0, 1]");
  }
  if (compare_seeds.empty()) fail("compare_seeds", "must not be empty");
}

std::vector<Scene> train_split(const ExperimentConfig& cfg) {
  return make_dataset(cfg.data, static_cast<std::size_t>(cfg.train_images), "train");
}

std::vector<Scene> eval_split(const ExperimentConfig& cfg) {
  return make_dataset(cfg.data, static_cast<std::size_t>(cfg.eval_images), "eval");
}

void Adam::step(BackboneParams& p, const std::vector<Matrix>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  std::size_t i = 0;
  const bool fresh = m_.empty();
  visit_params(p, [&](const std::string& name, Matrix& w) {
    if (i >= grads.size() || !grads[i].same_shape(w)) {
      throw ShapeError("Adam::step: gradient for " + name + " does not match the parameter");
    }
    if (fresh) {
      m_.emplace_back(w.rows(), w.cols());
      v_.emplace_back(w.rows(), w.cols());
    }
    auto wd = w.data();
    auto gd = grads[i].data();
    auto md = m_[i].data();
    auto vd = v_[i].data();
    for (std::size_t k = 0; k < wd.size(); ++k) {
      md[k] = b1_ * md[k] + (1.0 - b1_) * gd[k];
      vd[k] = b2_ * vd[k] + (1.0 - b2_) * gd[k] * gd[k];
      wd[k] -= lr_ * (md[k] / c1) / (std::sqrt(vd[k] / c2) + eps_);
    }
    ++i;
  });
  if (i != grads.size()) throw ShapeError("Adam::step: gradient count does not match the parameter count");
}

TrainResult train_dense(const ExperimentConfig& cfg, const std::vector<Scene>& train, const std::vector<Scene>& eval,
                        const EpochSink& sink) {
  Rng init(derive_seed(cfg.seed, "init"));
  BackboneParams p = init_backbone(cfg.model, init);
  return run_stage(cfg, "dense", std::move(p), dense_config(), cfg.optim.lr_dense, cfg.optim.dense_epochs, train,
                   eval, sink);
}

TrainResult train_sparse(const ExperimentConfig& cfg, BackboneParams dense, const std::vector<Scene>& train,
                         const std::vector<Scene>& eval, const EpochSink& sink) {
  const PruneConfig& pc = cfg.prune;
  if (pc.uses_gate()) {
    if (!has_gates_for(dense, pc)) {
      Rng rng(derive_seed(cfg.seed, "gates"));
      attach_gates(dense, pc.gated_layers, gate_design_of(pc.selector), pc.gate_keep_bias, rng);
    }
  } else {
    dense.gates.clear();
    if (!dense.cls_token) {
      Rng rng(derive_seed(cfg.seed, "cls_token"));
      attach_class_token(dense, rng);
    }
  }
  return run_stage(cfg, "sparse", std::move(dense), pc, cfg.optim.lr_sparse, cfg.optim.sparse_epochs, train, eval,
                   sink);
}

TrainResult train(const ExperimentConfig& cfg, const std::optional<BackboneParams>& start, const EpochSink& sink) {
  cfg.validate();
  const auto tr = train_split(cfg);
  const auto ev = eval_split(cfg);
  TrainResult res;
  if (start) {
    if (!(start->dims == cfg.model)) throw std::invalid_argument("starting checkpoint dims differ from model config");
    res.params = *start;
    res.stage = start->gates.empty() && !start->cls_token ? "dense" : "sparse";
  } else {
    res = train_dense(cfg, tr, ev, sink);
    if (res.diverged) return res;
  }
  if (cfg.prune.dense()) return res;
  TrainResult sp = train_sparse(cfg, std::move(res.params), tr, ev, sink);
  res.log.insert(res.log.end(), sp.log.begin(), sp.log.end());
  sp.log = std::move(res.log);
  return sp;
}

}  // namespace tokensieve
