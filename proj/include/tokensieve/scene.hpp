// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Synthetic dense-prediction scenes: colored rectangles and ellipses on a
// noisy gray background. The class of a shape is encoded by its color, so a
// token's label is recoverable from its own patch; background is class 0.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "tokensieve/rng.hpp"
#include "tokensieve/vit.hpp"

namespace tokensieve {

struct SceneSpec {
  int image_size = 32;
  int patch = 4;
  int shapes = 3;  // foreground shapes per scene
  int classes = 8;  // including background
  int min_shape = 5;  // side length range in pixels
  int max_shape = 13;
  double noise = 0.05;  // std of per-pixel Gaussian noise
  std::uint64_t seed = 0;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

struct Shape {
  enum class Kind { rect, ellipse };
  Kind kind = Kind::rect;
  int cls = 1;
  int y0 = 0, x0 = 0, h = 1, w = 1;  // bounding box, must lie inside the image
};

struct Scene {
  Image image;
  std::vector<int> pixel_labels;  // H*W, row-major
  std::vector<int> token_labels;  // N, row-major patch order
};

// RGB color of a foreground class (1..K-1).
std::array<double, 3> class_color(int cls);
inline constexpr double kBackgroundLevel = 0.35;

// Draws shapes (later shapes occlude earlier ones) and adds noise from rng.
Scene render_scene(const SceneSpec& spec, const std::vector<Shape>& shapes, Rng& rng);
Scene gen_synthetic_scene(const SceneSpec& spec, Rng& rng);

// Majority pixel class per patch; ties go to the smaller class id.
std::vector<int> patch_majority_labels(const std::vector<int>& pixel_labels, int image_size, int patch, int classes);

// Scene i is generated from Rng(derive_seed(spec.seed, tag, i)).
std::vector<Scene> make_dataset(const SceneSpec& spec, std::size_t count, std::string_view tag);

}  // namespace tokensieve
