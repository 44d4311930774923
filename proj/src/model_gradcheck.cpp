// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/harness.hpp"

namespace tokensieve {

GradReport gradcheck_gated_model(const ModelGradcheckOptions& opts) {
  ModelDims dims;
  dims.layers = 2;
  dims.heads = 2;
  dims.width = 16;
  dims.patch = 4;
  dims.image_size = 16;
  dims.channels = 3;
  dims.classes = 4;

  PruneConfig pc;
  pc.selector = opts.selector;
  pc.rate_mode = opts.rate_mode;
  pc.gated_layers = {2};
  pc.keep_ratios = {0.5};
  pc.lambda = opts.lambda;
  pc.tau = opts.tau;
  pc.validate(dims.layers);

  Rng init(derive_seed(opts.seed, "gradcheck/init"));
  BackboneParams p = init_backbone(dims, init);
  if (pc.uses_gate()) {
    attach_gates(p, pc.gated_layers, gate_design_of(pc.selector), 0.0, init);
  } else {
    attach_class_token(p, init);
  }
  // Larger weights than the training init so every nonlinearity is off its
  // linear regime.
  visit_params(p, [&](const std::string&, Matrix& m) {
    for (double& v : m.data()) v += 0.3 * init.normal();
  });

  SceneSpec spec;
  spec.image_size = dims.image_size;
  spec.patch = dims.patch;
  spec.classes = dims.classes;
  spec.shapes = 2;
  spec.min_shape = 3;
  spec.max_shape = 8;
  spec.seed = derive_seed(opts.seed, "gradcheck/data");
  const auto scenes = make_dataset(spec, 2, "gradcheck");

  // Freeze noise and masks at the unperturbed point.
  std::vector<std::vector<Matrix>> noise;
  std::vector<std::vector<LayerMask>> masks;
  {
    Tape probe(false);
    Rng rng(derive_seed(opts.seed, "gradcheck/gumbel"));
    for (const Scene& sc : scenes) {
      TrainForward f = run_backbone_train(probe, sc.image, p, pc, rng);
      noise.push_back(f.noise);
      masks.push_back(f.trace.masks);
    }
  }

  auto loss = [&](Tape& t) {
    Rng unused(0);
    std::vector<std::vector<Var>> usage;
    Var task{};
    for (std::size_t b = 0; b < scenes.size(); ++b) {
      TrainOptions o;
      o.gradient = MaskGradient::relaxed;
      o.forced_masks = &masks[b];
      o.frozen_noise = noise[b].empty() ? nullptr : &noise[b];
      TrainForward f = run_backbone_train(t, scenes[b].image, p, pc, unused, o);
      Var ce = t.cross_entropy(f.scores, scenes[b].token_labels);
      task = b == 0 ? ce : t.add(task, ce);
      usage.push_back(std::move(f.soft_usage));
    }
    task = t.scale(task, 1.0 / static_cast<double>(scenes.size()));
    if (!pc.uses_gate()) return task;
    return t.add(task, t.scale(ratio_loss(t, pc.rate_mode, usage, pc.keep_ratios), pc.lambda));
  };

  std::vector<NamedParam> named;
  visit_params(p, [&](const std::string& name, Matrix& m) { named.emplace_back(name, &m); });
  return grad_check(loss, named, opts.eps, opts.threshold);
}

}  // namespace tokensieve
