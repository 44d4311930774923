// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/losses.hpp"

namespace tokensieve {

namespace {

std::vector<std::vector<Matrix>> wrap(const std::vector<std::vector<double>>& usage) {
  std::vector<std::vector<Matrix>> out;
  out.reserve(usage.size());
  for (const auto& u : usage) {
    auto& row = out.emplace_back();
    for (double v : u) row.push_back(Matrix::scalar(v));
  }
  return out;
}

}  // namespace

double task_loss(const Matrix& scores, std::span<const int> labels) { return cross_entropy(scores, labels); }

double dynamic_ratio_loss(const std::vector<std::vector<double>>& usage, std::span<const double> targets) {
  Eager ops;
  return dynamic_ratio_loss(ops, wrap(usage), targets)(0, 0);
}

double fixed_ratio_loss(const std::vector<std::vector<double>>& usage, std::span<const double> targets) {
  Eager ops;
  return fixed_ratio_loss(ops, wrap(usage), targets)(0, 0);
}

double ratio_loss(RateMode mode, const std::vector<std::vector<double>>& usage, std::span<const double> targets) {
  return mode == RateMode::dynamic ? dynamic_ratio_loss(usage, targets) : fixed_ratio_loss(usage, targets);
}

double total_loss(double task, double ratio, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be >= 0");
  return task + lambda * ratio;
}

std::vector<double> hard_usage(const MaskTrace& trace) {
  std::vector<double> out;
  out.reserve(trace.masks.size());
  for (const auto& m : trace.masks) {
    out.push_back(m.empty() ? 0.0 : static_cast<double>(popcount(m)) / static_cast<double>(m.size()));
  }
  return out;
}

}  // namespace tokensieve
