// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode differentiation over Matrix values.
//
// Model code is written once as templates over an "ops" type with a common
// method set. Two implementations exist:
//   Eager - Value is Matrix; no history, used for inference and benchmarks.
//   Tape  - Value is Var; each op records its inputs and a backward rule.
// Both call the same kernels, so their forward values are bit-identical.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tokensieve/kernels.hpp"
#include "tokensieve/matrix.hpp"

namespace tokensieve {

struct Var {
  int id = -1;
};

class Tape {
 public:
  using Value = Var;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  // Registers a parameter leaf. Repeated calls with the same Matrix object
  // return the same Var, so gradients from every use accumulate in one place.
  Var param(const Matrix& m);
  Var constant(Matrix m);
  const Matrix& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var add_row_bias(Var a, Var bias);
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  Var gelu(Var x);
  Var softmax_rows(Var x, const Matrix* additive_mask = nullptr);
  Var log_softmax_rows(Var x);
  Var slice_cols(Var x, std::size_t c0, std::size_t c1);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_rows(Var x, std::size_t r0, std::size_t r1);
  Var concat_rows(Var top, Var bottom);
  Var mask_combine(Var m, Var v, Var x);
  Var scale_rows(Var x, Var w);
  Var mean_rows(Var x);
  Var broadcast_rows(Var row, std::size_t n);
  Var mean_all(Var x);
  Var cross_entropy(Var scores, std::span<const int> labels);
  // Forward value is `hard`; backward passes the incoming gradient to `soft`
  // unchanged (straight-through estimator).
  Var straight_through(const Matrix& hard, Var soft);

  // Seeds d(out)/d(out) = 1 and runs every recorded backward rule in exact
  // reverse order of recording. `out` must be 1x1.
  void backward(Var out);

  // Gradient of the last backward() w.r.t. v; zeros if v received none.
  Matrix grad(Var v) const;
  Matrix grad_of(const Matrix& param) const;

  std::size_t size() const { return nodes_.size(); }
  // Op name per node, in recording order.
  std::vector<std::string> op_trace() const;

 private:
  using Backward = std::function<void(Tape&, int)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    const char* op = "";
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, const char* op, Backward bw);
  bool needs(Var v) const { return recording_ && nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  void accumulate(Var v, const Matrix& g);
  const Matrix& gout(int self) const { return nodes_[static_cast<std::size_t>(self)].grad; }

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<const Matrix*, int> params_;
};

class Eager {
 public:
  using Value = Matrix;

  const Matrix& param(const Matrix& m) const { return m; }
  Matrix constant(Matrix m) const { return m; }
  static const Matrix& value(const Matrix& v) { return v; }

  Matrix matmul(const Matrix& a, const Matrix& b) const { return tokensieve::matmul(a, b); }
  Matrix matmul_nt(const Matrix& a, const Matrix& b) const { return tokensieve::matmul_nt(a, b); }
  Matrix transpose(const Matrix& a) const { return tokensieve::transpose(a); }
  Matrix add(const Matrix& a, const Matrix& b) const { return tokensieve::add(a, b); }
  Matrix sub(const Matrix& a, const Matrix& b) const { return tokensieve::sub(a, b); }
  Matrix mul(const Matrix& a, const Matrix& b) const { return hadamard(a, b); }
  Matrix scale(const Matrix& a, double s) const { return tokensieve::scale(a, s); }
  Matrix add_scalar(const Matrix& a, double s) const { return tokensieve::add_scalar(a, s); }
  Matrix add_row_bias(const Matrix& a, const Matrix& b) const { return tokensieve::add_row_bias(a, b); }
  Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, double eps) const {
    return tokensieve::layer_norm(x, g, b, eps);
  }
  Matrix gelu(const Matrix& x) const { return tokensieve::gelu(x); }
  Matrix softmax_rows(const Matrix& x, const Matrix* mask = nullptr) const { return tokensieve::softmax_rows(x, mask); }
  Matrix log_softmax_rows(const Matrix& x) const { return tokensieve::log_softmax_rows(x); }
  Matrix slice_cols(const Matrix& x, std::size_t c0, std::size_t c1) const {
    return tokensieve::slice_cols(x, c0, c1);
  }
  Matrix concat_cols(const std::vector<Matrix>& parts) const { return tokensieve::concat_cols(parts); }
  Matrix slice_rows(const Matrix& x, std::size_t r0, std::size_t r1) const {
    return tokensieve::slice_rows(x, r0, r1);
  }
  Matrix concat_rows(const Matrix& a, const Matrix& b) const { return tokensieve::concat_rows(a, b); }
  Matrix mask_combine(const Matrix& m, const Matrix& v, const Matrix& x) const {
    return tokensieve::mask_combine(m, v, x);
  }
  Matrix scale_rows(const Matrix& x, const Matrix& w) const { return tokensieve::scale_rows(x, w); }
  Matrix mean_rows(const Matrix& x) const;
  Matrix broadcast_rows(const Matrix& row, std::size_t n) const;
  Matrix mean_all(const Matrix& x) const;
  Matrix cross_entropy(const Matrix& s, std::span<const int> labels) const {
    return Matrix::scalar(tokensieve::cross_entropy(s, labels));
  }
  Matrix straight_through(const Matrix& hard, const Matrix&) const { return hard; }
};

}  // namespace tokensieve
