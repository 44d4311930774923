// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "tokensieve/harness.hpp"

namespace tokensieve {

std::vector<int> token_usage(const MaskTrace& trace, std::size_t tokens, int layers) {
  std::vector<int> out(tokens, layers - static_cast<int>(trace.masks.size()));
  for (const auto& m : trace.masks) {
    if (m.size() != tokens) throw ShapeError("token_usage: mask length differs from token count");
    for (std::size_t t = 0; t < tokens; ++t) out[t] += m[t];
  }
  return out;
}

Heatmap token_usage_heatmap(const std::vector<MaskTrace>& traces, std::size_t grid, int layers) {
  Heatmap h;
  h.grid = grid;
  h.layers = layers;
  const std::size_t n = grid * grid;
  h.average.assign(n, 0.0);
  for (const auto& tr : traces) h.per_image.push_back(token_usage(tr, n, layers));
  if (traces.empty()) return h;
  for (const auto& img : h.per_image)
    for (std::size_t t = 0; t < n; ++t) h.average[t] += img[t];
  for (double& v : h.average) v /= static_cast<double>(traces.size());
  return h;
}

std::string heatmap_csv(const Heatmap& h) {
  std::string out = "image,row,col,usage\n";
  char buf[64];
  for (std::size_t i = 0; i < h.per_image.size(); ++i) {
    for (std::size_t t = 0; t < h.per_image[i].size(); ++t) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%d\n", i, t / h.grid, t % h.grid, h.per_image[i][t]);
      out += buf;
    }
  }
  return out;
}

std::string pgm_image(const std::vector<int>& values, std::size_t grid, int maxval) {
  if (values.size() != grid * grid) throw ShapeError("pgm_image: value count differs from grid size");
  if (maxval < 1) throw std::invalid_argument("pgm_image: maxval must be positive");
  std::string out = "P2\n" + std::to_string(grid) + " " + std::to_string(grid) + "\n" + std::to_string(maxval) + "\n";
  for (std::size_t r = 0; r < grid; ++r) {
    for (std::size_t c = 0; c < grid; ++c) {
      const int v = std::clamp(values[r * grid + c], 0, maxval);
      out += std::to_string(v);
      out += c + 1 < grid ? ' ' : '\n';
    }
  }
  return out;
}

std::string pgm_average(const Heatmap& h) {
  std::vector<int> scaled(h.average.size());
  for (std::size_t t = 0; t < scaled.size(); ++t) {
    scaled[t] = static_cast<int>(std::lround(h.average[t] / std::max(1, h.layers) * 255.0));
  }
  return pgm_image(scaled, h.grid, 255);
}

std::vector<ReactivationStat> reactivation_ratio(const std::vector<MaskTrace>& traces) {
  std::vector<ReactivationStat> out;
  if (traces.empty()) return out;
  const auto& layers = traces.front().layers;
  for (const auto& tr : traces) {
    if (tr.layers != layers) throw std::invalid_argument("reactivation_ratio: traces disagree on gated layers");
  }
  out.resize(layers.size());
  for (std::size_t j = 0; j < layers.size(); ++j) {
    ReactivationStat& s = out[j];
    s.layer = layers[j];
    for (const auto& tr : traces) {
      const std::size_t n = tr.masks[j].size();
      for (std::size_t t = 0; t < n; ++t) {
        if (tr.masks[j][t] != 0) continue;
        ++s.pruned;
        bool later = false;
        for (std::size_t k = j + 1; k < layers.size() && !later; ++k) later = tr.masks[k][t] != 0;
        if (later) ++s.reused;
        if (j + 1 < layers.size() && tr.masks[j + 1][t] != 0) ++s.reused_next;
      }
    }
    if (s.pruned > 0) s.ratio = static_cast<double>(s.reused) / static_cast<double>(s.pruned);
    if (s.reused > 0) s.immediate = static_cast<double>(s.reused_next) / static_cast<double>(s.reused);
  }
  return out;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile level must lie in [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

TimingSummary summarize(std::vector<double> samples) {
  TimingSummary s;
  s.median = quantile(samples, 0.5);
  s.q1 = quantile(samples, 0.25);
  s.q3 = quantile(samples, 0.75);
  s.samples = std::move(samples);
  return s;
}

}  // namespace tokensieve
