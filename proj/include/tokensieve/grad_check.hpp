// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tokensieve/matrix.hpp"
#include "tokensieve/tape.hpp"

namespace tokensieve {

// Relative error used throughout: |analytic - numeric| / max(|analytic|, |numeric|, floor).
// The floor keeps entries whose true gradient is ~0 from dividing by noise.
inline constexpr double kGradCheckFloor = 1e-6;

double grad_rel_error(double analytic, double numeric, double floor = kGradCheckFloor);

struct ParamGradResult {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

struct GradReport {
  std::vector<ParamGradResult> params;
  double max_rel_err = 0.0;
  double threshold = 0.0;
  bool finite = true;
  bool passed = true;
  std::string failure;  // empty on success
};

using NamedParam = std::pair<std::string, Matrix*>;

// Compares the Tape gradient of a scalar computation against central finite
// differences. `f` must register each parameter through Tape::param and
// return a 1x1 Var; it must be deterministic (freeze any noise outside it).
// Parameters are restored bit-exactly afterwards.
GradReport grad_check(const std::function<Var(Tape&)>& f, const std::vector<NamedParam>& params, double eps,
                      double threshold = 1e-4);

}  // namespace tokensieve
