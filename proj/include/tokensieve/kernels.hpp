// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Forward kernels over Matrix. These are the only places arithmetic on
// activations happens; the reverse-mode Tape calls the same kernels for its
// forward values, so eager and recorded evaluation are bit-identical.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tokensieve/matrix.hpp"

namespace tokensieve {

// Additive attention-mask sentinel. Masked logits get -kMaskLarge added
// before the softmax; exp() of such a logit underflows to exactly 0.
inline constexpr double kMaskLarge = 1e9;

// tanh-approximation GELU constants: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix add_scalar(const Matrix& a, double s);
void add_into(Matrix& acc, const Matrix& b);

// a + bias broadcast over rows; bias is 1 x a.cols().
Matrix add_row_bias(const Matrix& a, const Matrix& bias);
// Column sums as a 1 x cols row.
Matrix sum_rows(const Matrix& a);
// Scales row i of x by w(i,0); w is rows x 1.
Matrix scale_rows(const Matrix& x, const Matrix& w);

// Row softmax with optional additive mask. The mask is either the same
// shape as m or a single 1 x cols row broadcast over all rows; entries must
// be 0 or -kMaskLarge. Throws if some row has every key masked.
Matrix softmax_rows(const Matrix& m, const Matrix* additive_mask = nullptr);
Matrix log_softmax_rows(const Matrix& m);

struct LayerNormStats {
  Matrix normalized;         // (x - mean) / sqrt(var + eps), before the affine
  std::vector<double> rstd;  // 1 / sqrt(var + eps) per row
};
LayerNormStats layer_norm_stats(const Matrix& x, double eps);
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps);

double gelu_scalar(double x);
double gelu_grad_scalar(double x);
Matrix gelu(const Matrix& x);

Matrix slice_cols(const Matrix& x, std::size_t c0, std::size_t c1);
Matrix concat_cols(std::span<const Matrix> parts);
Matrix slice_rows(const Matrix& x, std::size_t r0, std::size_t r1);
Matrix concat_rows(const Matrix& top, const Matrix& bottom);
Matrix gather_rows(const Matrix& x, std::span<const std::size_t> idx);
// Writes rows of src into dst at positions idx (dst is modified in place).
void scatter_rows(Matrix& dst, const Matrix& src, std::span<const std::size_t> idx);

// m (n x 1) selects rows: out_i = m_i * v_i + (1 - m_i) * x_i.
Matrix mask_combine(const Matrix& m, const Matrix& v, const Matrix& x);

// Mean per-token cross-entropy of row scores against integer labels, with a
// max-shifted log-sum-exp. Labels must lie in [0, scores.cols()).
double cross_entropy(const Matrix& scores, std::span<const int> labels);

}  // namespace tokensieve
