// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "tokensieve/grad_check.hpp"
#include "tokensieve/losses.hpp"

using namespace tokensieve;
using Usage = std::vector<std::vector<double>>;

TEST_CASE("task loss") {
  const Matrix uniform(5, 4, 0.0);
  const std::vector<int> labels = {0, 1, 2, 3, 1};
  CHECK(std::abs(task_loss(uniform, labels) - std::log(4.0)) <= 1e-15);
  const Matrix sharp = Matrix::from_rows({{1000, 0}, {0, 1000}});
  CHECK(task_loss(sharp, std::vector<int>{0, 1}) == 0.0);
  Rng rng(1);
  const Matrix s = testing::random_matrix(rng, 6, 3);
  const std::vector<int> l = {2, 0, 1, 1, 0, 2};
  long double oracle = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    long double z = 0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(static_cast<long double>(s(i, k)));
    oracle += std::log(z) - s(i, static_cast<std::size_t>(l[i]));
  }
  CHECK(std::abs(task_loss(s, l) - static_cast<double>(oracle / 6)) <= 1e-12);
  CHECK_THROWS_AS(task_loss(s, std::vector<int>{0, 0, 0, 0, 0, 3}), std::out_of_range);
}

TEST_CASE("dynamic and fixed ratio losses on hand examples") {
  const std::vector<double> t = {0.5};
  const Usage split = {{1.0}, {0.0}};
  CHECK(dynamic_ratio_loss(split, t) == 0.0);
  CHECK(fixed_ratio_loss(split, t) == 0.25);
  const std::vector<double> t7 = {0.7};
  CHECK(dynamic_ratio_loss(Usage{{0.6}, {0.8}}, t7) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(dynamic_ratio_loss(Usage{{0.8}, {0.8}}, t7) - 0.01) <= 1e-15);
  const std::vector<double> t3 = {0.7, 0.49, 0.343};
  const Usage at = {{0.7, 0.49, 0.343}, {0.7, 0.49, 0.343}};
  CHECK(dynamic_ratio_loss(at, t3) == 0.0);
  CHECK(fixed_ratio_loss(at, t3) == 0.0);
  CHECK_THROWS(dynamic_ratio_loss(Usage{{0.5, 0.5}}, t));
  CHECK_THROWS(fixed_ratio_loss(Usage{}, t));
}

TEST_CASE("dynamic loss never exceeds fixed loss and they agree for one image") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b = 1 + rng.below(8), l = 1 + rng.below(9);
    Usage u(b, std::vector<double>(l));
    std::vector<double> t(l);
    for (auto& row : u)
      for (double& v : row) v = rng.uniform();
    for (double& v : t) v = rng.uniform();
    const double dyn = dynamic_ratio_loss(u, t), fix = fixed_ratio_loss(u, t);
    CHECK(dyn <= fix + 1e-15);
    if (b == 1) CHECK(dyn == fix);
  }
}

TEST_CASE("total loss") {
  CHECK(total_loss(1.0, 0.25, 4.0) == 2.0);
  CHECK(total_loss(0.3, 0.7, 0.0) == 0.3);
  CHECK(total_loss(0.3, 0.0, 4.0) == 0.3);
  CHECK_THROWS(total_loss(1.0, 1.0, -0.1));
}

TEST_CASE("taped ratio losses match the double versions and their gradients") {
  Rng rng(3);
  const std::vector<double> t = {0.7, 0.49, 0.343};
  std::vector<Matrix> vals;
  for (int i = 0; i < 12; ++i) vals.push_back(Matrix::scalar(rng.uniform()));
  for (RateMode mode : {RateMode::dynamic, RateMode::fixed}) {
    Usage plain(4, std::vector<double>(3));
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t l = 0; l < 3; ++l) plain[b][l] = vals[b * 3 + l][0];
    Tape tape;
    std::vector<std::vector<Var>> u(4, std::vector<Var>(3));
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t l = 0; l < 3; ++l) u[b][l] = tape.param(vals[b * 3 + l]);
    CHECK(std::abs(tape.value(ratio_loss(tape, mode, u, t))[0] - ratio_loss(mode, plain, t)) <= 1e-15);

    std::vector<NamedParam> named;
    for (std::size_t i = 0; i < vals.size(); ++i) named.emplace_back("u" + std::to_string(i), &vals[i]);
    const GradReport r = grad_check(
        [&](Tape& tp) {
          std::vector<std::vector<Var>> uv(4, std::vector<Var>(3));
          for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t l = 0; l < 3; ++l) uv[b][l] = tp.param(vals[b * 3 + l]);
          return ratio_loss(tp, mode, uv, t);
        },
        named, 1e-5, 1e-6);
    CHECK(r.passed);
  }
}

TEST_CASE("hard usage is the kept fraction per layer") {
  MaskTrace tr;
  tr.layers = {4, 5};
  tr.masks = {LayerMask{1, 1, 0, 0}, LayerMask{1, 0, 0, 0}};
  CHECK(hard_usage(tr) == std::vector<double>{0.5, 0.25});
}
