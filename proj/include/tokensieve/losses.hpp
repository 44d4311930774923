// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Training objectives. Ratio losses take usage[b][l], the mean keep value of
// image b at gated layer l: relaxed values during training, hard-mask
// fractions for reporting.

#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "tokensieve/engine.hpp"
#include "tokensieve/tape.hpp"

namespace tokensieve {

struct LossReport {
  double task = 0.0;
  double ratio = 0.0;
  double total = 0.0;
  std::vector<double> usage;  // per gated layer, averaged over the batch
};

// Mean per-token cross-entropy. Throws std::out_of_range for bad labels.
double task_loss(const Matrix& scores, std::span<const int> labels);

double dynamic_ratio_loss(const std::vector<std::vector<double>>& usage, std::span<const double> targets);
double fixed_ratio_loss(const std::vector<std::vector<double>>& usage, std::span<const double> targets);
double ratio_loss(RateMode mode, const std::vector<std::vector<double>>& usage, std::span<const double> targets);
double total_loss(double task, double ratio, double lambda);

// Fraction of kept tokens per gated layer.
std::vector<double> hard_usage(const MaskTrace& trace);

namespace detail {

template <class Ops>
void check_usage_shape(const std::vector<std::vector<typename Ops::Value>>& usage, std::size_t layers) {
  if (usage.empty()) throw std::invalid_argument("ratio loss: empty batch");
  for (const auto& u : usage) {
    if (u.size() != layers) throw std::invalid_argument("ratio loss: images disagree on gated-layer count");
  }
}

}  // namespace detail

// (1/L) sum_l (mean_b usage[b][l] - t_l)^2
template <class Ops>
typename Ops::Value dynamic_ratio_loss(Ops& ops, const std::vector<std::vector<typename Ops::Value>>& usage,
                                       std::span<const double> targets) {
  detail::check_usage_shape<Ops>(usage, targets.size());
  const double inv_b = 1.0 / static_cast<double>(usage.size());
  const double inv_l = 1.0 / static_cast<double>(targets.size());
  typename Ops::Value acc = ops.constant(Matrix::scalar(0.0));
  for (std::size_t l = 0; l < targets.size(); ++l) {
    typename Ops::Value mean = usage[0][l];
    for (std::size_t b = 1; b < usage.size(); ++b) mean = ops.add(mean, usage[b][l]);
    auto diff = ops.add_scalar(ops.scale(mean, inv_b), -targets[l]);
    acc = ops.add(acc, ops.mul(diff, diff));
  }
  return ops.scale(acc, inv_l);
}

// (1/(L B)) sum_l sum_b (usage[b][l] - t_l)^2
template <class Ops>
typename Ops::Value fixed_ratio_loss(Ops& ops, const std::vector<std::vector<typename Ops::Value>>& usage,
                                     std::span<const double> targets) {
  detail::check_usage_shape<Ops>(usage, targets.size());
  const double inv = 1.0 / static_cast<double>(usage.size() * targets.size());
  typename Ops::Value acc = ops.constant(Matrix::scalar(0.0));
  for (std::size_t l = 0; l < targets.size(); ++l) {
    for (const auto& u : usage) {
      auto diff = ops.add_scalar(u[l], -targets[l]);
      acc = ops.add(acc, ops.mul(diff, diff));
    }
  }
  return ops.scale(acc, inv);
}

template <class Ops>
typename Ops::Value ratio_loss(Ops& ops, RateMode mode, const std::vector<std::vector<typename Ops::Value>>& usage,
                               std::span<const double> targets) {
  return mode == RateMode::dynamic ? dynamic_ratio_loss(ops, usage, targets) : fixed_ratio_loss(ops, usage, targets);
}

}  // namespace tokensieve
