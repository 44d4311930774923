// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "tokensieve/engine.hpp"
#include "tokensieve/harness.hpp"
#include "tokensieve/matrix.hpp"
#include "tokensieve/rng.hpp"
#include "tokensieve/scene.hpp"
#include "tokensieve/vit.hpp"

namespace tokensieve::testing {

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

inline LayerMask random_mask(Rng& rng, std::size_t n, double p_keep = 0.5) {
  LayerMask m(n);
  for (auto& b : m) b = rng.uniform() < p_keep ? 1 : 0;
  return m;
}

inline LayerMask random_nonempty_mask(Rng& rng, std::size_t n, double p_keep = 0.5) {
  LayerMask m = random_mask(rng, n, p_keep);
  if (popcount(m) == 0) m[rng.below(n)] = 1;
  return m;
}

// Small model used across tests: 16x16 image, patch 4 (N = 16), C = 16.
inline ModelDims tiny_dims(int layers = 4) {
  ModelDims d;
  d.layers = layers;
  d.heads = 2;
  d.width = 16;
  d.patch = 4;
  d.image_size = 16;
  d.classes = 4;
  return d;
}

inline Image random_image(Rng& rng, const ModelDims& d) {
  Image im(static_cast<std::size_t>(d.image_size), static_cast<std::size_t>(d.image_size),
           static_cast<std::size_t>(d.channels));
  for (double& v : im.pixels) v = rng.uniform();
  return im;
}

// Initialized backbone with weights perturbed away from the near-identity
// init so blocks do visible work.
inline BackboneParams random_backbone(const ModelDims& d, std::uint64_t seed) {
  Rng rng(seed);
  BackboneParams p = init_backbone(d, rng);
  visit_params(p, [&](const std::string&, Matrix& m) {
    for (double& v : m.data()) v += 0.2 * rng.normal();
  });
  return p;
}

inline PruneConfig gated_config(const std::vector<int>& layers, double keep) {
  PruneConfig c;
  c.gated_layers = layers;
  c.keep_ratios.assign(layers.size(), keep);
  return c;
}

// Few-second experiment on the tiny model: 3 gated layers, 16 tokens.
inline ExperimentConfig tiny_experiment(std::uint64_t seed = 1) {
  ExperimentConfig c;
  c.seed = seed;
  c.model = tiny_dims(4);
  c.data.image_size = 16;
  c.data.patch = 4;
  c.data.classes = 4;
  c.data.shapes = 2;
  c.data.min_shape = 3;
  c.data.max_shape = 8;
  c.data.seed = seed;
  c.prune.gated_layers = {2, 3, 4};
  c.prune.keep_ratios = schedule_from_base(0.7, 3);
  c.optim.dense_epochs = 1;
  c.optim.sparse_epochs = 1;
  c.optim.batch_size = 4;
  c.optim.lr_dense = 2e-3;
  c.optim.lr_sparse = 2e-3;
  c.train_images = 12;
  c.eval_images = 6;
  c.bench.image_size = 32;
  c.bench.patch = 4;
  c.bench.images = 1;
  c.bench.repeats = 1;
  c.bench.warmup = 0;
  c.sweep_ratios = {1.0, 0.5};
  c.compare_seeds = {1};
  return c;
}

}  // namespace tokensieve::testing
