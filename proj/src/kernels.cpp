// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tokensieve {

namespace {

void require_same(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": " + shape_pair(a, b));
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_pair(a, b));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c.row(i).data();
    const double* arow = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_pair(a, b));
  return matmul(a, transpose(b));
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: " + shape_pair(a, b));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix c(k, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.row(i).data();
    const double* brow = b.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c.row(p).data();
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same(a, b, "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require_same(a, b, "sub");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same(a, b, "hadamard");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

Matrix add_scalar(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data()) v += s;
  return c;
}

void add_into(Matrix& acc, const Matrix& b) {
  require_same(acc, b, "add_into");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

Matrix add_row_bias(const Matrix& a, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_row_bias: " + shape_pair(a, bias));
  Matrix c = a;
  for (std::size_t i = 0; i < c.rows(); ++i) {
    auto r = c.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return c;
}

Matrix sum_rows(const Matrix& a) {
  Matrix s(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) s[j] += r[j];
  }
  return s;
}

Matrix scale_rows(const Matrix& x, const Matrix& w) {
  if (w.rows() != x.rows() || w.cols() != 1) throw ShapeError("scale_rows: " + shape_pair(x, w));
  Matrix c = x;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (double& v : c.row(i)) v *= w[i];
  return c;
}

Matrix softmax_rows(const Matrix& m, const Matrix* additive_mask) {
  const bool broadcast = additive_mask != nullptr && additive_mask->rows() == 1 && m.rows() != 1;
  if (additive_mask != nullptr && !additive_mask->same_shape(m) &&
      !(broadcast && additive_mask->cols() == m.cols())) {
    throw ShapeError("softmax_rows: mask " + shape_pair(*additive_mask, m));
  }
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    const double* mk = nullptr;
    if (additive_mask != nullptr) mk = additive_mask->row(broadcast ? 0 : i).data();
    bool any_open = mk == nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < in.size(); ++j) {
      double v = in[j];
      if (mk != nullptr) {
        v += mk[j];
        if (mk[j] > -0.5 * kMaskLarge) any_open = true;
      }
      o[j] = v;
      mx = std::max(mx, v);
    }
    if (!any_open) throw std::invalid_argument("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double sum = 0.0;
    for (double& v : o) {
      v = std::exp(v - mx);
      sum += v;
    }
    const double inv = 1.0 / sum;
    for (double& v : o) v *= inv;
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (double v : in) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] - lse;
  }
  return out;
}

LayerNormStats layer_norm_stats(const Matrix& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  LayerNormStats st{Matrix(x.rows(), x.cols()), std::vector<double>(x.rows())};
  const double inv_c = 1.0 / static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean *= inv_c;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var *= inv_c;
    const double rstd = 1.0 / std::sqrt(var + eps);
    st.rstd[i] = rstd;
    auto o = st.normalized.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = (r[j] - mean) * rstd;
  }
  return st;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps) {
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layer_norm: x " + x.shape_str() + " gain " + gain.shape_str() + " bias " + bias.shape_str());
  }
  Matrix y = layer_norm_stats(x, eps).normalized;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = r[j] * gain[j] + bias[j];
  }
  return y;
}

double gelu_scalar(double x) {
  const double u = kGeluSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
  const double u = kGeluSqrt2OverPi * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Matrix gelu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data()) v = gelu_scalar(v);
  return y;
}

Matrix slice_cols(const Matrix& x, std::size_t c0, std::size_t c1) {
  if (c0 > c1 || c1 > x.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + x.shape_str());
  }
  Matrix out(x.rows(), c1 - c0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row(i);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(c0), src.begin() + static_cast<std::ptrdiff_t>(c1),
              out.row(i).begin());
  }
  return out;
}

Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw ShapeError("concat_cols: " + shape_pair(parts[0], p));
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto dst = out.row(i).begin();
    for (const auto& p : parts) {
      auto src = p.row(i);
      dst = std::copy(src.begin(), src.end(), dst);
    }
  }
  return out;
}

Matrix slice_rows(const Matrix& x, std::size_t r0, std::size_t r1) {
  if (r0 > r1 || r1 > x.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + x.shape_str());
  }
  Matrix out(r1 - r0, x.cols());
  std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(r0 * x.cols()),
            x.data().begin() + static_cast<std::ptrdiff_t>(r1 * x.cols()), out.data().begin());
  return out;
}

Matrix concat_rows(const Matrix& top, const Matrix& bottom) {
  if (top.cols() != bottom.cols()) throw ShapeError("concat_rows: " + shape_pair(top, bottom));
  Matrix out(top.rows() + bottom.rows(), top.cols());
  auto it = std::copy(top.data().begin(), top.data().end(), out.data().begin());
  std::copy(bottom.data().begin(), bottom.data().end(), it);
  return out;
}

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows()) throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " of " + x.shape_str());
    auto src = x.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void scatter_rows(Matrix& dst, const Matrix& src, std::span<const std::size_t> idx) {
  if (src.rows() != idx.size() || src.cols() != dst.cols()) throw ShapeError("scatter_rows: " + shape_pair(src, dst));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= dst.rows()) throw ShapeError("scatter_rows: index " + std::to_string(idx[i]) + " of " + dst.shape_str());
    auto s = src.row(i);
    std::copy(s.begin(), s.end(), dst.row(idx[i]).begin());
  }
}

Matrix mask_combine(const Matrix& m, const Matrix& v, const Matrix& x) {
  require_same(v, x, "mask_combine");
  if (m.rows() != v.rows() || m.cols() != 1) throw ShapeError("mask_combine: mask " + shape_pair(m, v));
  Matrix out(v.rows(), v.cols());
  for (std::size_t i = 0; i < v.rows(); ++i) {
    const double mi = m[i];
    const double ki = 1.0 - mi;
    auto vr = v.row(i);
    auto xr = x.row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = mi * vr[j] + ki * xr[j];
  }
  return out;
}

double cross_entropy(const Matrix& scores, std::span<const int> labels) {
  if (labels.size() != scores.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for scores " + scores.shape_str());
  }
  double total = 0.0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= scores.cols()) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " at token " + std::to_string(i) +
                              " outside [0," + std::to_string(scores.cols()) + ")");
    }
    auto r = scores.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double v : r) sum += std::exp(v - mx);
    total += mx + std::log(sum) - r[static_cast<std::size_t>(y)];
  }
  return total / static_cast<double>(scores.rows());
}

}  // namespace tokensieve
