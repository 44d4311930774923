// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>

#include "doctest.h"
#include "test_util.hpp"
#include "tokensieve/grad_check.hpp"
#include "tokensieve/kernels.hpp"
#include "tokensieve/tape.hpp"

using namespace tokensieve;
using tokensieve::testing::random_matrix;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

long double gelu_oracle(long double x) {
  const long double k = std::sqrt(2.0L / 3.14159265358979323846264338327950288L);
  return 0.5L * x * (1.0L + std::tanh(k * (x + 0.044715L * x * x * x)));
}

}  // namespace

TEST_CASE("matmul matches a naive oracle") {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 5, 7), b = random_matrix(rng, 7, 3);
  CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) <= 1e-12);
  CHECK(max_abs_diff(matmul_nt(a, transpose(b)), naive_matmul(a, b)) <= 1e-12);
  CHECK(max_abs_diff(matmul_tn(transpose(a), b), naive_matmul(a, b)) <= 1e-12);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("shape errors name both shapes") {
  try {
    add(Matrix(2, 3), Matrix(3, 2));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("3x2") != std::string::npos);
  }
}

TEST_CASE("softmax rows are distributions and masked keys get zero weight") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix x = random_matrix(rng, 6, 9, 3.0);
    LayerMask keep = tokensieve::testing::random_nonempty_mask(rng, 9);
    const Matrix km = additive_key_mask(keep);
    const Matrix s = softmax_rows(x, &km);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < s.cols(); ++j) {
        sum += s(i, j);
        if (!keep[j]) CHECK(s(i, j) == 0.0);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
  const Matrix all_masked = additive_key_mask(LayerMask(4, 0));
  CHECK_THROWS(softmax_rows(Matrix(2, 4), &all_masked));
}

TEST_CASE("layer_norm") {
  const Matrix g(1, 4, 1.0), b(1, 4, 0.0);
  SUBCASE("constant row gives zeros") {
    const Matrix y = layer_norm(Matrix(1, 4, 3.5), g, b, 1e-6);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("an already normalized row is unchanged") {
    const Matrix g2(1, 2, 1.0), b2(1, 2, 0.0);
    const Matrix y = layer_norm(Matrix::from_rows({{-1.0, 1.0}}), g2, b2, 1e-14);
    CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(y(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("random rows have zero mean and unit variance before the affine") {
    Rng rng(3);
    const Matrix x = random_matrix(rng, 8, 16, 5.0);
    const Matrix y = layer_norm_stats(x, 1e-12).normalized;
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double mean = 0, var = 0;
      for (double v : y.row(i)) mean += v;
      mean /= 16;
      for (double v : y.row(i)) var += (v - mean) * (v - mean);
      var /= 16;
      CHECK(std::abs(mean) <= 1e-10);
      CHECK(std::abs(var - 1.0) <= 1e-10);
    }
  }
}

TEST_CASE("gelu") {
  CHECK(gelu_scalar(0.0) == 0.0);
  CHECK(std::abs(gelu_scalar(10.0) - 10.0) / 10.0 < 1e-6);
  CHECK(std::abs(gelu_scalar(1.0) - static_cast<double>(gelu_oracle(1.0L))) <= 1e-12);
  for (double x = -3.0; x <= 3.0; x += 0.37) {
    CHECK(std::abs(gelu_scalar(x) - static_cast<double>(gelu_oracle(x))) <= 1e-12);
  }
  double prev = gelu_scalar(-0.5);
  for (double x = -0.49; x <= 6.0; x += 0.01) {
    const double y = gelu_scalar(x);
    CHECK(y >= prev);
    prev = y;
  }
}

TEST_CASE("cross entropy of uniform logits is log K") {
  const Matrix s(3, 4, 0.7);
  const std::vector<int> labels = {0, 1, 3};
  CHECK(std::abs(cross_entropy(s, labels) - std::log(4.0)) <= 1e-15);
  const Matrix sharp = Matrix::from_rows({{800.0, 0.0}, {0.0, 800.0}});
  const std::vector<int> l2 = {0, 1};
  CHECK(cross_entropy(sharp, l2) == doctest::Approx(0.0));
  const std::vector<int> bad = {0, 2};
  CHECK_THROWS(cross_entropy(sharp, bad));
}

TEST_CASE("grad_check on w^2 at 3") {
  Matrix w = Matrix::scalar(3.0);
  const GradReport r = grad_check([&](Tape& t) { auto v = t.param(w); return t.mul(v, v); }, {{"w", &w}}, 1e-5);
  CHECK(r.passed);
  CHECK(r.params[0].max_rel_err < 1e-9);
  CHECK(w[0] == 3.0);
}

TEST_CASE("gradient of the sum of softmax rows is zero") {
  Rng rng(4);
  Matrix x = random_matrix(rng, 3, 5);
  Tape t;
  auto v = t.param(x);
  auto s = t.mean_all(t.softmax_rows(v));
  t.backward(s);
  for (double g : t.grad(v).data()) CHECK(std::abs(g) <= 1e-15);
}

TEST_CASE("grad_check reports a non-finite loss instead of crashing") {
  Matrix w = Matrix::scalar(0.0);
  const GradReport r = grad_check(
      [&](Tape& t) {
        auto v = t.param(w);
        return t.log_softmax_rows(t.concat_cols({v, t.constant(Matrix::scalar(NAN))}));
      },
      {{"w", &w}}, 1e-5);
  CHECK_FALSE(r.passed);
  CHECK_FALSE(r.failure.empty());
}

namespace {

// Reduces an op output to a scalar through fixed random weights so every
// output entry contributes a distinct gradient.
Var reduce(Tape& t, Var y, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix& v = t.value(y);
  return t.mean_all(t.mul(y, t.constant(random_matrix(rng, v.rows(), v.cols()))));
}

struct PrimCase {
  const char* name;
  std::function<Var(Tape&, Var, Var, Var)> f;  // a: 4x6, b: 6x4 or 4x6, r: 1x6
};

void check_primitive(const PrimCase& pc, std::uint64_t seed) {
  Rng rng(seed);
  Matrix a = random_matrix(rng, 4, 6), b = random_matrix(rng, 4, 6), r = random_matrix(rng, 1, 6);
  const GradReport rep = grad_check(
      [&](Tape& t) { return reduce(t, pc.f(t, t.param(a), t.param(b), t.param(r)), seed + 1000); },
      {{"a", &a}, {"b", &b}, {"r", &r}}, 1e-5);
  INFO(std::string(pc.name), " seed ", seed, " err ", rep.max_rel_err, " ", rep.failure);
  CHECK(rep.passed);
  CHECK(rep.max_rel_err < 1e-4);
}

}  // namespace

TEST_CASE("every primitive passes finite differences over 20 seeds") {
  const std::vector<int> labels = {0, 5, 2, 3};
  const LayerMask keep = {1, 0, 1, 1, 0, 1};
  const Matrix km = additive_key_mask(keep);
  const std::vector<PrimCase> cases = {
      {"matmul", [](Tape& t, Var a, Var b, Var) { return t.matmul(a, t.transpose(b)); }},
      {"matmul_nt", [](Tape& t, Var a, Var b, Var) { return t.matmul_nt(a, b); }},
      {"add", [](Tape& t, Var a, Var b, Var) { return t.add(a, b); }},
      {"sub", [](Tape& t, Var a, Var b, Var) { return t.sub(a, b); }},
      {"mul", [](Tape& t, Var a, Var b, Var) { return t.mul(a, b); }},
      {"scale", [](Tape& t, Var a, Var, Var) { return t.scale(a, -1.7); }},
      {"add_scalar", [](Tape& t, Var a, Var, Var) { return t.mul(t.add_scalar(a, 0.3), a); }},
      {"add_row_bias", [](Tape& t, Var a, Var, Var r) { return t.add_row_bias(a, r); }},
      {"layer_norm",
       [](Tape& t, Var a, Var b, Var r) { return t.layer_norm(a, r, t.slice_rows(b, 0, 1), 1e-6); }},
      {"gelu", [](Tape& t, Var a, Var, Var) { return t.gelu(a); }},
      {"softmax_rows", [](Tape& t, Var a, Var, Var) { return t.softmax_rows(a); }},
      {"softmax_rows masked", [&km](Tape& t, Var a, Var, Var) { return t.softmax_rows(a, &km); }},
      {"log_softmax_rows", [](Tape& t, Var a, Var, Var) { return t.log_softmax_rows(a); }},
      {"slice_cols", [](Tape& t, Var a, Var, Var) { return t.slice_cols(a, 1, 4); }},
      {"concat_cols", [](Tape& t, Var a, Var b, Var) { return t.concat_cols({a, t.slice_cols(b, 2, 5)}); }},
      {"slice_rows", [](Tape& t, Var a, Var, Var) { return t.slice_rows(a, 1, 3); }},
      {"concat_rows", [](Tape& t, Var a, Var, Var r) { return t.concat_rows(r, a); }},
      {"mask_combine",
       [](Tape& t, Var a, Var b, Var) {
         return t.mask_combine(t.slice_cols(t.softmax_rows(t.slice_cols(a, 0, 2)), 0, 1), b, t.gelu(a));
       }},
      {"mask_combine column",
       [](Tape& t, Var a, Var b, Var) { return t.mask_combine(t.slice_cols(a, 0, 1), b, t.gelu(a)); }},
      {"scale_rows", [](Tape& t, Var a, Var b, Var) { return t.scale_rows(a, t.slice_cols(b, 3, 4)); }},
      {"mean_rows", [](Tape& t, Var a, Var, Var) { return t.mean_rows(a); }},
      {"broadcast_rows", [](Tape& t, Var, Var, Var r) { return t.broadcast_rows(r, 5); }},
      {"mean_all", [](Tape& t, Var a, Var b, Var) { return t.mul(t.mean_all(a), t.mean_all(t.gelu(b))); }},
      {"cross_entropy", [&labels](Tape& t, Var a, Var, Var) { return t.cross_entropy(a, labels); }},
  };
  for (const auto& pc : cases) {
    for (std::uint64_t s = 0; s < 20; ++s) check_primitive(pc, 100 * s + 7);
  }
}

TEST_CASE("straight-through forwards the hard value and passes the gradient to the soft input") {
  Rng rng(5);
  Matrix soft = random_matrix(rng, 4, 1);
  const Matrix hard = Matrix::from_rows({{1}, {0}, {0}, {1}});
  Tape t;
  auto s = t.param(soft);
  auto y = t.straight_through(hard, s);
  CHECK(bit_equal(t.value(y), hard));
  t.backward(t.mean_all(y));
  const Matrix g = t.grad(s);
  for (double v : g.data()) CHECK(v == 0.25);
}

TEST_CASE("eager and taped forwards are bit-identical and repeatable") {
  Rng rng(6);
  const Matrix x = random_matrix(rng, 5, 8), w = random_matrix(rng, 8, 8);
  auto run = [&](auto& ops) {
    auto h = ops.gelu(ops.matmul(ops.constant(x), ops.param(w)));
    return Matrix(ops.value(ops.softmax_rows(h)));
  };
  Eager e;
  Tape t;
  const Matrix a = run(e), b = run(t), c = run(e);
  CHECK(bit_equal(a, b));
  CHECK(bit_equal(a, c));
}

TEST_CASE("bit_equal distinguishes signed zeros") {
  CHECK_FALSE(bit_equal(Matrix::scalar(0.0), Matrix::scalar(-0.0)));
  CHECK(bit_equal(Matrix::scalar(1.5), Matrix::scalar(1.5)));
}

TEST_CASE("derived seeds are stable and independent per tag and index") {
  CHECK(derive_seed(1, "train", 0) == derive_seed(1, "train", 0));
  CHECK(derive_seed(1, "train", 0) != derive_seed(1, "train", 1));
  CHECK(derive_seed(1, "train", 0) != derive_seed(1, "eval", 0));
  CHECK(derive_seed(1, "train", 0) != derive_seed(2, "train", 0));
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng g(10);
  for (int i = 0; i < 1000; ++i) {
    const double u = g.uniform_open();
    CHECK(u > 0.0);
    CHECK(u < 1.0);
  }
}
