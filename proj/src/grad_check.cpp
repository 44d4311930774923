// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tokensieve {

double grad_rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const std::function<Var(Tape&)>& f) {
  Tape t(false);
  const Var out = f(t);
  return t.value(out)[0];
}

}  // namespace

GradReport grad_check(const std::function<Var(Tape&)>& f, const std::vector<NamedParam>& params, double eps,
                      double threshold) {
  if (eps < 1e-7 || eps > 1e-4) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4]");
  GradReport report;
  report.threshold = threshold;

  std::vector<Matrix> analytic;
  {
    Tape t;
    const Var out = f(t);
    if (!std::isfinite(t.value(out)[0])) {
      report.finite = false;
      report.passed = false;
      report.failure = "non-finite loss";
      return report;
    }
    t.backward(out);
    for (const auto& [name, m] : params) analytic.push_back(t.grad_of(*m));
  }

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& [name, m] = params[p];
    ParamGradResult r;
    r.name = name;
    for (std::size_t i = 0; i < m->size(); ++i) {
      const double saved = (*m)[i];
      (*m)[i] = saved + eps;
      const double fp = evaluate(f);
      (*m)[i] = saved - eps;
      const double fm = evaluate(f);
      (*m)[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.finite = false;
        r.passed = false;
        r.max_rel_err = INFINITY;
        r.worst_index = i;
        break;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[p][i];
      const double rel = grad_rel_error(a, numeric);
      r.max_abs_err = std::max(r.max_abs_err, std::abs(a - numeric));
      if (rel > r.max_rel_err || i == 0) {
        r.max_rel_err = rel;
        r.worst_index = i;
        r.analytic_at_worst = a;
        r.numeric_at_worst = numeric;
      }
    }
    r.passed = r.passed && r.max_rel_err < threshold;
    report.max_rel_err = std::max(report.max_rel_err, r.max_rel_err);
    if (!r.passed && report.failure.empty()) {
      report.failure = report.finite ? "parameter " + name + " exceeds threshold" : "non-finite loss at " + name;
    }
    report.passed = report.passed && r.passed;
    report.params.push_back(std::move(r));
  }
  return report;
}

}  // namespace tokensieve
