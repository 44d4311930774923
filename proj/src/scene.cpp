// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/scene.hpp"

#include <array>
#include <stdexcept>
#include <string>

namespace tokensieve {

namespace {

// Saturated, mutually distant colors; none is close to the gray background.
constexpr std::array<std::array<double, 3>, 15> kPalette = {{
    {0.95, 0.10, 0.10},
    {0.10, 0.85, 0.15},
    {0.15, 0.20, 0.95},
    {0.95, 0.90, 0.10},
    {0.90, 0.15, 0.90},
    {0.10, 0.90, 0.90},
    {0.98, 0.55, 0.05},
    {0.55, 0.05, 0.60},
    {0.05, 0.45, 0.30},
    {0.60, 0.95, 0.55},
    {0.95, 0.60, 0.70},
    {0.40, 0.25, 0.05},
    {0.05, 0.05, 0.35},
    {0.98, 0.98, 0.85},
    {0.50, 0.60, 0.05},
}};

void fail(const std::string& field, const std::string& msg) {
  throw std::invalid_argument("data." + field + " " + msg);
}

bool inside(const Shape& s, int y, int x) {
  if (s.kind == Shape::Kind::rect) return true;
  const double cy = s.y0 + (s.h - 1) / 2.0, cx = s.x0 + (s.w - 1) / 2.0;
  const double ry = s.h / 2.0, rx = s.w / 2.0;
  const double dy = (y - cy) / ry, dx = (x - cx) / rx;
  return dy * dy + dx * dx <= 1.0;
}

}  // namespace

void SceneSpec::validate() const {
  if (image_size <= 0) fail("image_size", "must be positive");
  if (patch <= 0) fail("patch", "must be positive");
  if (image_size % patch != 0) fail("image_size", "must be divisible by data.patch");
  if (shapes < 0) fail("shapes", "must be >= 0");
  if (classes < 2) fail("classes", "must be >= 2");
  if (classes - 1 > static_cast<int>(kPalette.size())) {
    fail("classes", "must be at most " + std::to_string(kPalette.size() + 1));
  }
  if (min_shape < 1) fail("min_shape", "must be >= 1");
  if (max_shape < min_shape) fail("max_shape", "must be >= data.min_shape");
  if (max_shape > image_size) fail("max_shape", "must fit inside the image");
  if (!(noise >= 0.0)) fail("noise", "must be >= 0");
}

std::array<double, 3> class_color(int cls) {
  if (cls < 1 || cls > static_cast<int>(kPalette.size())) {
    throw std::out_of_range("class_color: no color for class " + std::to_string(cls));
  }
  return kPalette[static_cast<std::size_t>(cls - 1)];
}

std::vector<int> patch_majority_labels(const std::vector<int>& pixel_labels, int image_size, int patch,
                                       int classes) {
  const int g = image_size / patch;
  std::vector<int> out(static_cast<std::size_t>(g * g));
  std::vector<int> counts(static_cast<std::size_t>(classes));
  for (int py = 0; py < g; ++py) {
    for (int px = 0; px < g; ++px) {
      std::fill(counts.begin(), counts.end(), 0);
      for (int y = py * patch; y < (py + 1) * patch; ++y)
        for (int x = px * patch; x < (px + 1) * patch; ++x)
          ++counts[static_cast<std::size_t>(pixel_labels[static_cast<std::size_t>(y * image_size + x)])];
      int best = 0;
      for (int c = 1; c < classes; ++c)
        if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(best)]) best = c;
      out[static_cast<std::size_t>(py * g + px)] = best;
    }
  }
  return out;
}

Scene render_scene(const SceneSpec& spec, const std::vector<Shape>& shapes, Rng& rng) {
  spec.validate();
  const int s = spec.image_size;
  Scene sc;
  sc.image = Image(static_cast<std::size_t>(s), static_cast<std::size_t>(s), 3);
  sc.pixel_labels.assign(static_cast<std::size_t>(s * s), 0);
  for (const Shape& sh : shapes) {
    if (sh.cls < 1 || sh.cls >= spec.classes) throw std::invalid_argument("render_scene: shape class out of range");
    if (sh.h < 1 || sh.w < 1 || sh.y0 < 0 || sh.x0 < 0 || sh.y0 + sh.h > s || sh.x0 + sh.w > s) {
      throw std::invalid_argument("render_scene: shape does not fit inside the image");
    }
    for (int y = sh.y0; y < sh.y0 + sh.h; ++y)
      for (int x = sh.x0; x < sh.x0 + sh.w; ++x)
        if (inside(sh, y, x)) sc.pixel_labels[static_cast<std::size_t>(y * s + x)] = sh.cls;
  }
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const int cls = sc.pixel_labels[static_cast<std::size_t>(y * s + x)];
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = cls == 0 ? kBackgroundLevel : class_color(cls)[c];
        sc.image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = base + spec.noise * rng.normal();
      }
    }
  }
  sc.token_labels = patch_majority_labels(sc.pixel_labels, s, spec.patch, spec.classes);
  return sc;
}

Scene gen_synthetic_scene(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<Shape> shapes;
  shapes.reserve(static_cast<std::size_t>(spec.shapes));
  const auto span = static_cast<std::size_t>(spec.max_shape - spec.min_shape + 1);
  for (int i = 0; i < spec.shapes; ++i) {
    Shape sh;
    sh.kind = rng.below(2) == 0 ? Shape::Kind::rect : Shape::Kind::ellipse;
    sh.cls = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(spec.classes - 1)));
    sh.h = spec.min_shape + static_cast<int>(rng.below(span));
    sh.w = spec.min_shape + static_cast<int>(rng.below(span));
    sh.y0 = static_cast<int>(rng.below(static_cast<std::size_t>(spec.image_size - sh.h + 1)));
    sh.x0 = static_cast<int>(rng.below(static_cast<std::size_t>(spec.image_size - sh.w + 1)));
    shapes.push_back(sh);
  }
  return render_scene(spec, shapes, rng);
}

std::vector<Scene> make_dataset(const SceneSpec& spec, std::size_t count, std::string_view tag) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(spec.seed, tag, i));
    out.push_back(gen_synthetic_scene(spec, rng));
  }
  return out;
}

}  // namespace tokensieve
