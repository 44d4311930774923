// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tokensieve {

Var Tape::push(Matrix value, bool requires_grad, const char* op, Backward bw) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_ && requires_grad;
  n.op = op;
  if (n.requires_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  if (n.grad.empty() && !n.value.empty()) {
    n.grad = g;
  } else {
    add_into(n.grad, g);
  }
}

Var Tape::param(const Matrix& m) {
  if (auto it = params_.find(&m); it != params_.end()) return Var{it->second};
  Var v = push(m, true, "param", nullptr);
  params_.emplace(&m, v.id);
  return v;
}

Var Tape::constant(Matrix m) { return push(std::move(m), false, "constant", nullptr); }

Var Tape::matmul(Var a, Var b) {
  return push(tokensieve::matmul(value(a), value(b)), needs(a) || needs(b), "matmul", [a, b](Tape& t, int self) {
    const Matrix& g = t.gout(self);
    if (t.needs(a)) t.accumulate(a, tokensieve::matmul_nt(g, t.value(b)));
    if (t.needs(b)) t.accumulate(b, matmul_tn(t.value(a), g));
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  return push(tokensieve::matmul_nt(value(a), value(b)), needs(a) || needs(b), "matmul_nt",
              [a, b](Tape& t, int self) {
                const Matrix& g = t.gout(self);
                if (t.needs(a)) t.accumulate(a, tokensieve::matmul(g, t.value(b)));
                if (t.needs(b)) t.accumulate(b, matmul_tn(g, t.value(a)));
              });
}

Var Tape::transpose(Var a) {
  return push(tokensieve::transpose(value(a)), needs(a), "transpose",
              [a](Tape& t, int self) { t.accumulate(a, tokensieve::transpose(t.gout(self))); });
}

Var Tape::add(Var a, Var b) {
  return push(tokensieve::add(value(a), value(b)), needs(a) || needs(b), "add", [a, b](Tape& t, int self) {
    t.accumulate(a, t.gout(self));
    t.accumulate(b, t.gout(self));
  });
}

Var Tape::sub(Var a, Var b) {
  return push(tokensieve::sub(value(a), value(b)), needs(a) || needs(b), "sub", [a, b](Tape& t, int self) {
    t.accumulate(a, t.gout(self));
    if (t.needs(b)) t.accumulate(b, tokensieve::scale(t.gout(self), -1.0));
  });
}

Var Tape::mul(Var a, Var b) {
  return push(hadamard(value(a), value(b)), needs(a) || needs(b), "mul", [a, b](Tape& t, int self) {
    const Matrix& g = t.gout(self);
    if (t.needs(a)) t.accumulate(a, hadamard(g, t.value(b)));
    if (t.needs(b)) t.accumulate(b, hadamard(g, t.value(a)));
  });
}

Var Tape::scale(Var a, double s) {
  return push(tokensieve::scale(value(a), s), needs(a), "scale",
              [a, s](Tape& t, int self) { t.accumulate(a, tokensieve::scale(t.gout(self), s)); });
}

Var Tape::add_scalar(Var a, double s) {
  return push(tokensieve::add_scalar(value(a), s), needs(a), "add_scalar",
              [a](Tape& t, int self) { t.accumulate(a, t.gout(self)); });
}

Var Tape::add_row_bias(Var a, Var bias) {
  return push(tokensieve::add_row_bias(value(a), value(bias)), needs(a) || needs(bias), "add_row_bias",
              [a, bias](Tape& t, int self) {
                t.accumulate(a, t.gout(self));
                if (t.needs(bias)) t.accumulate(bias, sum_rows(t.gout(self)));
              });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  return push(tokensieve::layer_norm(value(x), value(gain), value(bias), eps),
              needs(x) || needs(gain) || needs(bias), "layer_norm", [x, gain, bias, eps](Tape& t, int self) {
                const Matrix& g = t.gout(self);
                const LayerNormStats st = layer_norm_stats(t.value(x), eps);
                const Matrix& gv = t.value(gain);
                const std::size_t c = g.cols();
                if (t.needs(gain)) t.accumulate(gain, sum_rows(hadamard(g, st.normalized)));
                if (t.needs(bias)) t.accumulate(bias, sum_rows(g));
                if (!t.needs(x)) return;
                Matrix dx(g.rows(), c);
                const double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                  auto gr = g.row(i);
                  auto xh = st.normalized.row(i);
                  double mean_d = 0.0, mean_dx = 0.0;
                  for (std::size_t j = 0; j < c; ++j) {
                    const double d = gr[j] * gv[j];
                    mean_d += d;
                    mean_dx += d * xh[j];
                  }
                  mean_d *= inv_c;
                  mean_dx *= inv_c;
                  auto o = dx.row(i);
                  for (std::size_t j = 0; j < c; ++j) {
                    o[j] = st.rstd[i] * (gr[j] * gv[j] - mean_d - xh[j] * mean_dx);
                  }
                }
                t.accumulate(x, dx);
              });
}

Var Tape::gelu(Var x) {
  return push(tokensieve::gelu(value(x)), needs(x), "gelu", [x](Tape& t, int self) {
    Matrix d = t.value(x);
    const Matrix& g = t.gout(self);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = gelu_grad_scalar(d[i]) * g[i];
    t.accumulate(x, d);
  });
}

Var Tape::softmax_rows(Var x, const Matrix* additive_mask) {
  return push(tokensieve::softmax_rows(value(x), additive_mask), needs(x), "softmax_rows", [x](Tape& t, int self) {
    const Matrix& y = t.nodes_[static_cast<std::size_t>(self)].value;
    const Matrix& g = t.gout(self);
    Matrix d(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto yr = y.row(i);
      auto gr = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto o = d.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) o[j] = yr[j] * (gr[j] - dot);
    }
    t.accumulate(x, d);
  });
}

Var Tape::log_softmax_rows(Var x) {
  return push(tokensieve::log_softmax_rows(value(x)), needs(x), "log_softmax_rows", [x](Tape& t, int self) {
    const Matrix& y = t.nodes_[static_cast<std::size_t>(self)].value;
    const Matrix& g = t.gout(self);
    Matrix d(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto yr = y.row(i);
      auto gr = g.row(i);
      double sum = 0.0;
      for (double v : gr) sum += v;
      auto o = d.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) o[j] = gr[j] - std::exp(yr[j]) * sum;
    }
    t.accumulate(x, d);
  });
}

Var Tape::slice_cols(Var x, std::size_t c0, std::size_t c1) {
  return push(tokensieve::slice_cols(value(x), c0, c1), needs(x), "slice_cols", [x, c0](Tape& t, int self) {
    const Matrix& g = t.gout(self);
    Matrix d(g.rows(), t.value(x).cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto gr = g.row(i);
      auto o = d.row(i);
      for (std::size_t j = 0; j < gr.size(); ++j) o[c0 + j] = gr[j];
    }
    t.accumulate(x, d);
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  std::vector<Matrix> vals;
  vals.reserve(parts.size());
  bool any = false;
  for (Var p : parts) {
    vals.push_back(value(p));
    any = any || needs(p);
  }
  return push(tokensieve::concat_cols(vals), any, "concat_cols", [parts](Tape& t, int self) {
    const Matrix& g = t.gout(self);
    std::size_t c = 0;
    for (Var p : parts) {
      const std::size_t w = t.value(p).cols();
      if (t.needs(p)) t.accumulate(p, tokensieve::slice_cols(g, c, c + w));
      c += w;
    }
  });
}

Var Tape::slice_rows(Var x, std::size_t r0, std::size_t r1) {
  return push(tokensieve::slice_rows(value(x), r0, r1), needs(x), "slice_rows", [x, r0](Tape& t, int self) {
    const Matrix& g = t.gout(self);
    Matrix d(t.value(x).rows(), g.cols());
    std::copy(g.data().begin(), g.data().end(), d.data().begin() + static_cast<std::ptrdiff_t>(r0 * g.cols()));
    t.accumulate(x, d);
  });
}

Var Tape::concat_rows(Var top, Var bottom) {
  return push(tokensieve::concat_rows(value(top), value(bottom)), needs(top) || needs(bottom), "concat_rows",
              [top, bottom](Tape& t, int self) {
                const Matrix& g = t.gout(self);
                const std::size_t r = t.value(top).rows();
                if (t.needs(top)) t.accumulate(top, tokensieve::slice_rows(g, 0, r));
                if (t.needs(bottom)) t.accumulate(bottom, tokensieve::slice_rows(g, r, g.rows()));
              });
}

Var Tape::mask_combine(Var m, Var v, Var x) {
  return push(tokensieve::mask_combine(value(m), value(v), value(x)), needs(m) || needs(v) || needs(x),
              "mask_combine", [m, v, x](Tape& t, int self) {
                const Matrix& g = t.gout(self);
                const Matrix& mv = t.value(m);
                if (t.needs(m)) {
                  const Matrix& vv = t.value(v);
                  const Matrix& xv = t.value(x);
                  Matrix dm(mv.rows(), 1);
                  for (std::size_t i = 0; i < g.rows(); ++i) {
                    auto gr = g.row(i);
                    auto vr = vv.row(i);
                    auto xr = xv.row(i);
                    double s = 0.0;
                    for (std::size_t j = 0; j < gr.size(); ++j) s += (vr[j] - xr[j]) * gr[j];
                    dm[i] = s;
                  }
                  t.accumulate(m, dm);
                }
                if (t.needs(v)) t.accumulate(v, tokensieve::scale_rows(g, mv));
                if (t.needs(x)) {
                  Matrix keep = mv;
                  for (double& k : keep.data()) k = 1.0 - k;
                  t.accumulate(x, tokensieve::scale_rows(g, keep));
                }
              });
}

Var Tape::scale_rows(Var x, Var w) {
  return push(tokensieve::scale_rows(value(x), value(w)), needs(x) || needs(w), "scale_rows",
              [x, w](Tape& t, int self) {
                const Matrix& g = t.gout(self);
                if (t.needs(x)) t.accumulate(x, tokensieve::scale_rows(g, t.value(w)));
                if (t.needs(w)) {
                  const Matrix& xv = t.value(x);
                  Matrix dw(xv.rows(), 1);
                  for (std::size_t i = 0; i < xv.rows(); ++i) {
                    auto xr = xv.row(i);
                    auto gr = g.row(i);
                    double s = 0.0;
                    for (std::size_t j = 0; j < xr.size(); ++j) s += xr[j] * gr[j];
                    dw[i] = s;
                  }
                  t.accumulate(w, dw);
                }
              });
}

Var Tape::mean_rows(Var x) {
  const double inv = 1.0 / static_cast<double>(value(x).rows());
  return push(tokensieve::scale(sum_rows(value(x)), inv), needs(x), "mean_rows", [x, inv](Tape& t, int self) {
    const Matrix& g = t.gout(self);
    Matrix d(t.value(x).rows(), g.cols());
    for (std::size_t i = 0; i < d.rows(); ++i) {
      auto o = d.row(i);
      for (std::size_t j = 0; j < o.size(); ++j) o[j] = g[j] * inv;
    }
    t.accumulate(x, d);
  });
}

Var Tape::broadcast_rows(Var row, std::size_t n) {
  return push(Eager{}.broadcast_rows(value(row), n), needs(row), "broadcast_rows",
              [row](Tape& t, int self) { t.accumulate(row, sum_rows(t.gout(self))); });
}

Var Tape::mean_all(Var x) {
  return push(Eager{}.mean_all(value(x)), needs(x), "mean_all", [x](Tape& t, int self) {
    const Matrix& xv = t.value(x);
    t.accumulate(x, Matrix(xv.rows(), xv.cols(), t.gout(self)[0] / static_cast<double>(xv.size())));
  });
}

Var Tape::cross_entropy(Var scores, std::span<const int> labels) {
  std::vector<int> lab(labels.begin(), labels.end());
  return push(Matrix::scalar(tokensieve::cross_entropy(value(scores), labels)), needs(scores), "cross_entropy",
              [scores, lab = std::move(lab)](Tape& t, int self) {
                Matrix p = tokensieve::softmax_rows(t.value(scores));
                const double g = t.gout(self)[0] / static_cast<double>(p.rows());
                for (std::size_t i = 0; i < p.rows(); ++i) {
                  p(i, static_cast<std::size_t>(lab[i])) -= 1.0;
                  for (double& v : p.row(i)) v *= g;
                }
                t.accumulate(scores, p);
              });
}

Var Tape::straight_through(const Matrix& hard, Var soft) {
  if (!hard.same_shape(value(soft))) throw ShapeError("straight_through: " + shape_pair(hard, value(soft)));
  return push(hard, needs(soft), "straight_through",
              [soft](Tape& t, int self) { t.accumulate(soft, t.gout(self)); });
}

void Tape::backward(Var out) {
  if (value(out).size() != 1) throw ShapeError("backward: output must be 1x1, got " + value(out).shape_str());
  for (Node& n : nodes_) n.grad = Matrix();
  Node& root = nodes_[static_cast<std::size_t>(out.id)];
  if (!root.requires_grad) return;
  root.grad = Matrix::scalar(1.0);
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix Tape::grad_of(const Matrix& param) const {
  auto it = params_.find(&param);
  if (it == params_.end()) return Matrix(param.rows(), param.cols());
  return grad(Var{it->second});
}

std::vector<std::string> Tape::op_trace() const {
  std::vector<std::string> ops;
  ops.reserve(nodes_.size());
  for (const Node& n : nodes_) ops.emplace_back(n.op);
  return ops;
}

Matrix Eager::mean_rows(const Matrix& x) const {
  return tokensieve::scale(sum_rows(x), 1.0 / static_cast<double>(x.rows()));
}

Matrix Eager::broadcast_rows(const Matrix& row, std::size_t n) const {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expected a single row, got " + row.shape_str());
  Matrix out(n, row.cols());
  for (std::size_t i = 0; i < n; ++i) std::copy(row.data().begin(), row.data().end(), out.row(i).begin());
  return out;
}

Matrix Eager::mean_all(const Matrix& x) const {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Matrix::scalar(s / static_cast<double>(x.size()));
}

}  // namespace tokensieve
