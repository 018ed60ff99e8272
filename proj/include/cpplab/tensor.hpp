// Copyright 2026 The cpplab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Tape-based reverse-mode automatic differentiation over 2-D row-major
// arrays. Every tensor in the project is (rows x cols); spatial maps are
// stored as (channels x height*width) with the geometry passed to the ops
// that need it. The tape owns value and gradient buffers; Value is a cheap
// handle. Nodes are created in topological order, so the backward pass is a
// single reverse sweep. Nodes whose inputs carry no gradient (frozen teacher
// weights) skip backward entirely and their gradient buffers stay zero.
#ifndef CPPLAB_TENSOR_HPP_
#define CPPLAB_TENSOR_HPP_

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cpplab/common.hpp"

namespace cpplab::ad {

using Array = Eigen::ArrayXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;

class Tape;

class Value {
 public:
  Value() = default;
  Value(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  int rows() const;
  int cols() const;
  int size() const { return rows() * cols(); }
  const Array& array() const;
  double scalar() const;
  double operator()(int r, int c) const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  struct Node {
    int rows = 0;
    int cols = 0;
    Array val;
    Array grad;
    std::function<void()> back;  // null for leaves and no-grad nodes
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const {
    return nodes_[static_cast<std::size_t>(id)];
  }

  Value make(int rows, int cols, bool needs_grad) {
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.val = Array::Zero(static_cast<Eigen::Index>(rows) * cols);
    n.grad = Array::Zero(static_cast<Eigen::Index>(rows) * cols);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size()) - 1);
  }

  Value leaf(int rows, int cols, const double* data, bool needs_grad) {
    Value v = make(rows, cols, needs_grad);
    if (data != nullptr) {
      std::copy(data, data + static_cast<std::size_t>(rows) * cols,
                node(v.id()).val.data());
    }
    return v;
  }

  Value leaf(int rows, int cols, const std::vector<double>& data,
             bool needs_grad) {
    check_arg(static_cast<int>(data.size()) == rows * cols,
              "leaf: data size does not match shape");
    return leaf(rows, cols, data.data(), needs_grad);
  }

  Value constant(int rows, int cols, double fill) {
    Value v = make(rows, cols, false);
    node(v.id()).val.setConstant(fill);
    return v;
  }

  // Reverse sweep from a scalar root. Gradients accumulate, so run once.
  void backward(Value root) {
    check_arg(root.tape() == this, "backward: value from another tape");
    check_arg(node(root.id()).rows == 1 && node(root.id()).cols == 1,
              "backward: root must be a scalar");
    node(root.id()).grad(0) = 1.0;
    for (int id = root.id(); id >= 0; --id) {
      Node& n = node(id);
      if (n.needs_grad && n.back) n.back();
    }
  }

  const Array& grad(Value v) const { return node(v.id()).grad; }

 private:
  std::vector<Node> nodes_;
};

inline int Value::rows() const { return tape_->node(id_).rows; }
inline int Value::cols() const { return tape_->node(id_).cols; }
inline const Array& Value::array() const { return tape_->node(id_).val; }
inline double Value::scalar() const {
  check_arg(rows() == 1 && cols() == 1, "scalar() on non-scalar value");
  return array()(0);
}
inline double Value::operator()(int r, int c) const {
  return array()(static_cast<Eigen::Index>(r) * cols() + c);
}

namespace detail {

inline bool same_shape(Value a, Value b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline MatMap mat(Tape& t, int id) {
  Tape::Node& n = t.node(id);
  return MatMap(n.val.data(), n.rows, n.cols);
}

inline MatMap gmat(Tape& t, int id) {
  Tape::Node& n = t.node(id);
  return MatMap(n.grad.data(), n.rows, n.cols);
}

inline bool ng(Tape& t, int id) { return t.node(id).needs_grad; }

}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise ops
// --------------------------------------------------------------------------

inline Value add(Value a, Value b) {
  check_arg(detail::same_shape(a, b), "add: shape mismatch");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, b.id());
  Value out = t.make(a.rows(), a.cols(), needs);
  t.node(out.id()).val = t.node(a.id()).val + t.node(b.id()).val;
  if (needs) {
    int ai = a.id(), bi = b.id(), oi = out.id();
    t.node(oi).back = [&t, ai, bi, oi]() {
      if (detail::ng(t, ai)) t.node(ai).grad += t.node(oi).grad;
      if (detail::ng(t, bi)) t.node(bi).grad += t.node(oi).grad;
    };
  }
  return out;
}

inline Value sub(Value a, Value b) {
  check_arg(detail::same_shape(a, b), "sub: shape mismatch");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, b.id());
  Value out = t.make(a.rows(), a.cols(), needs);
  t.node(out.id()).val = t.node(a.id()).val - t.node(b.id()).val;
  if (needs) {
    int ai = a.id(), bi = b.id(), oi = out.id();
    t.node(oi).back = [&t, ai, bi, oi]() {
      if (detail::ng(t, ai)) t.node(ai).grad += t.node(oi).grad;
      if (detail::ng(t, bi)) t.node(bi).grad -= t.node(oi).grad;
    };
  }
  return out;
}

inline Value mul(Value a, Value b) {
  check_arg(detail::same_shape(a, b), "mul: shape mismatch");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, b.id());
  Value out = t.make(a.rows(), a.cols(), needs);
  t.node(out.id()).val = t.node(a.id()).val * t.node(b.id()).val;
  if (needs) {
    int ai = a.id(), bi = b.id(), oi = out.id();
    t.node(oi).back = [&t, ai, bi, oi]() {
      if (detail::ng(t, ai))
        t.node(ai).grad += t.node(bi).val * t.node(oi).grad;
      if (detail::ng(t, bi))
        t.node(bi).grad += t.node(ai).val * t.node(oi).grad;
    };
  }
  return out;
}

inline Value add_scalar(Value a, double s) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val + s;
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() { t.node(ai).grad += t.node(oi).grad; };
  }
  return out;
}

inline Value mul_scalar(Value a, double s) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val * s;
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi, s]() {
      t.node(ai).grad += s * t.node(oi).grad;
    };
  }
  return out;
}

inline Value neg(Value a) { return mul_scalar(a, -1.0); }

inline Value relu(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val.max(0.0);
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      t.node(ai).grad +=
          (t.node(ai).val > 0.0).cast<double>() * t.node(oi).grad;
    };
  }
  return out;
}

inline Value sigmoid(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  // Stable in both tails.
  t.node(out.id()).val = 0.5 * (1.0 + (0.5 * t.node(a.id()).val).tanh());
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      const Array& y = t.node(oi).val;
      t.node(ai).grad += y * (1.0 - y) * t.node(oi).grad;
    };
  }
  return out;
}

// log(1 + e^x), stable.
inline Value softplus(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  const Array& x = t.node(a.id()).val;
  t.node(out.id()).val = x.max(0.0) + (-x.abs()).exp().log1p();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      const Array& x = t.node(ai).val;
      Array s = 0.5 * (1.0 + (0.5 * x).tanh());
      t.node(ai).grad += s * t.node(oi).grad;
    };
  }
  return out;
}

inline Value vexp(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val.exp();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      t.node(ai).grad += t.node(oi).val * t.node(oi).grad;
    };
  }
  return out;
}

inline Value vlog(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val.log();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      t.node(ai).grad += t.node(oi).grad / t.node(ai).val;
    };
  }
  return out;
}

inline Value vsqrt(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val.sqrt();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      t.node(ai).grad += 0.5 / t.node(oi).val * t.node(oi).grad;
    };
  }
  return out;
}

inline Value vinv(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val.inverse();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      const Array& y = t.node(oi).val;
      t.node(ai).grad += -(y * y) * t.node(oi).grad;
    };
  }
  return out;
}

inline Value square(Value a) { return mul(a, a); }

// Per-element binary cross entropy with logits against constant targets:
// max(x,0) - x*t + log(1 + e^-|x|).
inline Value bce_logits(Value logits, const Array& targets) {
  Tape& t = *logits.tape();
  check_arg(targets.size() == logits.size(), "bce_logits: target size");
  Value out = t.make(logits.rows(), logits.cols(),
                     detail::ng(t, logits.id()));
  const Array& x = t.node(logits.id()).val;
  t.node(out.id()).val = x.max(0.0) - x * targets + (-x.abs()).exp().log1p();
  if (t.node(out.id()).needs_grad) {
    int ai = logits.id(), oi = out.id();
    Array tg = targets;
    t.node(oi).back = [&t, ai, oi, tg]() {
      const Array& x = t.node(ai).val;
      Array s = 0.5 * (1.0 + (0.5 * x).tanh());
      t.node(ai).grad += (s - tg) * t.node(oi).grad;
    };
  }
  return out;
}

// --------------------------------------------------------------------------
// Reductions and broadcasts
// --------------------------------------------------------------------------

inline Value sum(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(1, 1, detail::ng(t, a.id()));
  t.node(out.id()).val(0) = t.node(a.id()).val.sum();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      t.node(ai).grad += t.node(oi).grad(0);
    };
  }
  return out;
}

inline Value mean(Value a) { return mul_scalar(sum(a), 1.0 / a.size()); }

// Row sums: (m x n) -> (m x 1).
inline Value sum_cols(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), 1, detail::ng(t, a.id()));
  detail::mat(t, out.id()).col(0) = detail::mat(t, a.id()).rowwise().sum();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      detail::gmat(t, ai).colwise() += detail::gmat(t, oi).col(0);
    };
  }
  return out;
}

inline Value mean_cols(Value a) {
  return mul_scalar(sum_cols(a), 1.0 / a.cols());
}

inline Value add_rowvec(Value a, Value r) {
  check_arg(r.rows() == 1 && r.cols() == a.cols(), "add_rowvec: shape");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, r.id());
  Value out = t.make(a.rows(), a.cols(), needs);
  detail::mat(t, out.id()) =
      detail::mat(t, a.id()).rowwise() + detail::mat(t, r.id()).row(0);
  if (needs) {
    int ai = a.id(), ri = r.id(), oi = out.id();
    t.node(oi).back = [&t, ai, ri, oi]() {
      if (detail::ng(t, ai)) t.node(ai).grad += t.node(oi).grad;
      if (detail::ng(t, ri))
        detail::gmat(t, ri).row(0) += detail::gmat(t, oi).colwise().sum();
    };
  }
  return out;
}

inline Value mul_rowvec(Value a, Value r) {
  check_arg(r.rows() == 1 && r.cols() == a.cols(), "mul_rowvec: shape");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, r.id());
  Value out = t.make(a.rows(), a.cols(), needs);
  detail::mat(t, out.id()) =
      detail::mat(t, a.id()).array().rowwise() *
      detail::mat(t, r.id()).row(0).array();
  if (needs) {
    int ai = a.id(), ri = r.id(), oi = out.id();
    t.node(oi).back = [&t, ai, ri, oi]() {
      if (detail::ng(t, ai))
        detail::gmat(t, ai).array() += detail::gmat(t, oi).array().rowwise() *
                                       detail::mat(t, ri).row(0).array();
      if (detail::ng(t, ri))
        detail::gmat(t, ri).row(0).array() +=
            (detail::gmat(t, oi).array() * detail::mat(t, ai).array())
                .colwise()
                .sum();
    };
  }
  return out;
}

inline Value add_colvec(Value a, Value c) {
  check_arg(c.cols() == 1 && c.rows() == a.rows(), "add_colvec: shape");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, c.id());
  Value out = t.make(a.rows(), a.cols(), needs);
  detail::mat(t, out.id()) =
      detail::mat(t, a.id()).colwise() + detail::mat(t, c.id()).col(0);
  if (needs) {
    int ai = a.id(), ci = c.id(), oi = out.id();
    t.node(oi).back = [&t, ai, ci, oi]() {
      if (detail::ng(t, ai)) t.node(ai).grad += t.node(oi).grad;
      if (detail::ng(t, ci))
        detail::gmat(t, ci).col(0) += detail::gmat(t, oi).rowwise().sum();
    };
  }
  return out;
}

inline Value mul_colvec(Value a, Value c) {
  check_arg(c.cols() == 1 && c.rows() == a.rows(), "mul_colvec: shape");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, c.id());
  Value out = t.make(a.rows(), a.cols(), needs);
  detail::mat(t, out.id()).array() =
      detail::mat(t, a.id()).array().colwise() *
      detail::mat(t, c.id()).col(0).array();
  if (needs) {
    int ai = a.id(), ci = c.id(), oi = out.id();
    t.node(oi).back = [&t, ai, ci, oi]() {
      if (detail::ng(t, ai))
        detail::gmat(t, ai).array() += detail::gmat(t, oi).array().colwise() *
                                       detail::mat(t, ci).col(0).array();
      if (detail::ng(t, ci))
        detail::gmat(t, ci).col(0).array() +=
            (detail::gmat(t, oi).array() * detail::mat(t, ai).array())
                .rowwise()
                .sum();
    };
  }
  return out;
}

// --------------------------------------------------------------------------
// Linear algebra and structure ops
// --------------------------------------------------------------------------

inline Value matmul(Value a, Value b) {
  check_arg(a.cols() == b.rows(), "matmul: inner dimensions");
  Tape& t = *a.tape();
  bool needs = detail::ng(t, a.id()) || detail::ng(t, b.id());
  Value out = t.make(a.rows(), b.cols(), needs);
  detail::mat(t, out.id()).noalias() =
      detail::mat(t, a.id()) * detail::mat(t, b.id());
  if (needs) {
    int ai = a.id(), bi = b.id(), oi = out.id();
    t.node(oi).back = [&t, ai, bi, oi]() {
      if (detail::ng(t, ai))
        detail::gmat(t, ai).noalias() +=
            detail::gmat(t, oi) * detail::mat(t, bi).transpose();
      if (detail::ng(t, bi))
        detail::gmat(t, bi).noalias() +=
            detail::mat(t, ai).transpose() * detail::gmat(t, oi);
    };
  }
  return out;
}

inline Value transpose(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.cols(), a.rows(), detail::ng(t, a.id()));
  detail::mat(t, out.id()) = detail::mat(t, a.id()).transpose();
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      detail::gmat(t, ai) += detail::gmat(t, oi).transpose();
    };
  }
  return out;
}

inline Value reshape(Value a, int rows, int cols) {
  check_arg(rows * cols == a.size(), "reshape: size mismatch");
  Tape& t = *a.tape();
  Value out = t.make(rows, cols, detail::ng(t, a.id()));
  t.node(out.id()).val = t.node(a.id()).val;
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() { t.node(ai).grad += t.node(oi).grad; };
  }
  return out;
}

inline Value slice_rows(Value a, int r0, int r1) {
  check_arg(0 <= r0 && r0 < r1 && r1 <= a.rows(), "slice_rows: range");
  Tape& t = *a.tape();
  Value out = t.make(r1 - r0, a.cols(), detail::ng(t, a.id()));
  detail::mat(t, out.id()) = detail::mat(t, a.id()).middleRows(r0, r1 - r0);
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi, r0, r1]() {
      detail::gmat(t, ai).middleRows(r0, r1 - r0) += detail::gmat(t, oi);
    };
  }
  return out;
}

inline Value concat_rows(const std::vector<Value>& parts) {
  check_arg(!parts.empty(), "concat_rows: empty");
  Tape& t = *parts[0].tape();
  int cols = parts[0].cols();
  int rows = 0;
  bool needs = false;
  for (Value p : parts) {
    check_arg(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
    needs = needs || detail::ng(t, p.id());
  }
  Value out = t.make(rows, cols, needs);
  int r = 0;
  std::vector<int> ids;
  std::vector<int> offs;
  for (Value p : parts) {
    detail::mat(t, out.id()).middleRows(r, p.rows()) =
        detail::mat(t, p.id());
    ids.push_back(p.id());
    offs.push_back(r);
    r += p.rows();
  }
  if (needs) {
    int oi = out.id();
    t.node(oi).back = [&t, oi, ids, offs]() {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (detail::ng(t, ids[i]))
          detail::gmat(t, ids[i]) += detail::gmat(t, oi).middleRows(
              offs[i], t.node(ids[i]).rows);
      }
    };
  }
  return out;
}

inline Value softmax_rows(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  {
    MatMap x = detail::mat(t, a.id());
    MatMap y = detail::mat(t, out.id());
    for (int r = 0; r < a.rows(); ++r) {
      Eigen::ArrayXd row = x.row(r).array();
      row -= row.maxCoeff();
      row = row.exp();
      y.row(r) = (row / row.sum()).matrix();
    }
  }
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      MatMap y = detail::mat(t, oi);
      MatMap dy = detail::gmat(t, oi);
      MatMap dx = detail::gmat(t, ai);
      for (int r = 0; r < t.node(oi).rows; ++r) {
        double dot = y.row(r).dot(dy.row(r));
        dx.row(r).array() +=
            y.row(r).array() * (dy.row(r).array() - dot);
      }
    };
  }
  return out;
}

inline Value log_softmax_rows(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), detail::ng(t, a.id()));
  {
    MatMap x = detail::mat(t, a.id());
    MatMap y = detail::mat(t, out.id());
    for (int r = 0; r < a.rows(); ++r) {
      Eigen::ArrayXd row = x.row(r).array();
      double m = row.maxCoeff();
      double lse = m + std::log((row - m).exp().sum());
      y.row(r) = (row - lse).matrix();
    }
  }
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    t.node(oi).back = [&t, ai, oi]() {
      MatMap y = detail::mat(t, oi);
      MatMap dy = detail::gmat(t, oi);
      MatMap dx = detail::gmat(t, ai);
      for (int r = 0; r < t.node(oi).rows; ++r) {
        double s = dy.row(r).sum();
        dx.row(r).array() +=
            dy.row(r).array() - y.row(r).array().exp() * s;
      }
    };
  }
  return out;
}

// Rows of `table` selected by index: (V x d, L ids) -> (L x d).
inline Value gather_rows(Value table, const std::vector<int>& ids) {
  Tape& t = *table.tape();
  Value out = t.make(static_cast<int>(ids.size()), table.cols(),
                     detail::ng(t, table.id()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check_arg(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows: id range");
    detail::mat(t, out.id()).row(static_cast<int>(i)) =
        detail::mat(t, table.id()).row(ids[i]);
  }
  if (t.node(out.id()).needs_grad) {
    int ai = table.id(), oi = out.id();
    std::vector<int> idx = ids;
    t.node(oi).back = [&t, ai, oi, idx]() {
      for (std::size_t i = 0; i < idx.size(); ++i)
        detail::gmat(t, ai).row(idx[i]) +=
            detail::gmat(t, oi).row(static_cast<int>(i));
    };
  }
  return out;
}

// One entry per row: (m x n, m column ids) -> (m x 1).
inline Value pick_cols(Value a, const std::vector<int>& cols) {
  check_arg(static_cast<int>(cols.size()) == a.rows(), "pick_cols: count");
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), 1, detail::ng(t, a.id()));
  for (int r = 0; r < a.rows(); ++r) {
    check_arg(cols[r] >= 0 && cols[r] < a.cols(), "pick_cols: col range");
    detail::mat(t, out.id())(r, 0) = detail::mat(t, a.id())(r, cols[r]);
  }
  if (t.node(out.id()).needs_grad) {
    int ai = a.id(), oi = out.id();
    std::vector<int> idx = cols;
    t.node(oi).back = [&t, ai, oi, idx]() {
      for (int r = 0; r < t.node(oi).rows; ++r)
        detail::gmat(t, ai)(r, idx[r]) += detail::gmat(t, oi)(r, 0);
    };
  }
  return out;
}

// Copies the value and severs the gradient path.
inline Value stop_gradient(Value a) {
  Tape& t = *a.tape();
  Value out = t.make(a.rows(), a.cols(), false);
  t.node(out.id()).val = t.node(a.id()).val;
  return out;
}

// --------------------------------------------------------------------------
// Spatial ops. Feature maps are (channels x H*W), row-major per channel.
// --------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

inline void im2col(const double* x, int cin, int h, int w, int k, int stride,
                   int pad, Matrix& cols) {
  int ho = conv_out_dim(h, k, stride, pad);
  int wo = conv_out_dim(w, k, stride, pad);
  cols.resize(cin * k * k, ho * wo);
  for (int c = 0; c < cin; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        int row = (c * k + ki) * k + kj;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ki - pad;
          double* dst = cols.row(row).data() + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kj - pad;
            dst[ox] = (ix >= 0 && ix < w) ? xc[iy * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const Matrix& cols, int cin, int h, int w, int k,
                       int stride, int pad, double* dx) {
  int ho = conv_out_dim(h, k, stride, pad);
  int wo = conv_out_dim(w, k, stride, pad);
  for (int c = 0; c < cin; ++c) {
    double* xc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        int row = (c * k + ki) * k + kj;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          const double* src = cols.row(row).data() + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) xc[iy * w + ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: (cin x h*w), weight: (cout x cin*k*k), bias: (cout x 1) or invalid.
inline Value conv2d(Value x, Value weight, Value bias, int h, int w, int k,
                    int stride, int pad) {
  check_arg(x.cols() == h * w, "conv2d: spatial size");
  int cin = x.rows();
  check_arg(weight.cols() == cin * k * k, "conv2d: weight shape");
  int cout = weight.rows();
  Tape& t = *x.tape();
  int ho = conv_out_dim(h, k, stride, pad);
  int wo = conv_out_dim(w, k, stride, pad);
  bool needs = detail::ng(t, x.id()) || detail::ng(t, weight.id()) ||
               (bias.valid() && detail::ng(t, bias.id()));
  auto cols = std::make_shared<Matrix>();
  detail::im2col(t.node(x.id()).val.data(), cin, h, w, k, stride, pad, *cols);
  Value out = t.make(cout, ho * wo, needs);
  detail::mat(t, out.id()).noalias() = detail::mat(t, weight.id()) * (*cols);
  if (bias.valid()) {
    check_arg(bias.rows() == cout && bias.cols() == 1, "conv2d: bias shape");
    detail::mat(t, out.id()).colwise() += detail::mat(t, bias.id()).col(0);
  }
  if (needs) {
    int xi = x.id(), wi = weight.id(), oi = out.id();
    int bi = bias.valid() ? bias.id() : -1;
    t.node(oi).back = [&t, xi, wi, bi, oi, cols, cin, h, w, k, stride,
                       pad]() {
      MatMap dy = detail::gmat(t, oi);
      if (detail::ng(t, wi))
        detail::gmat(t, wi).noalias() += dy * cols->transpose();
      if (bi >= 0 && detail::ng(t, bi))
        detail::gmat(t, bi).col(0) += dy.rowwise().sum();
      if (detail::ng(t, xi)) {
        Matrix dcols = detail::mat(t, wi).transpose() * dy;
        detail::col2im_add(dcols, cin, h, w, k, stride, pad,
                           t.node(xi).grad.data());
      }
    };
  }
  return out;
}

// Bilinear upsampling by an integer factor (half-pixel centers, clamped).
inline Value upsample_bilinear(Value x, int h, int w, int factor) {
  check_arg(x.cols() == h * w, "upsample_bilinear: spatial size");
  Tape& t = *x.tape();
  int ho = h * factor, wo = w * factor;
  struct Tap {
    int i0, i1, j0, j1;
    double w00, w01, w10, w11;
  };
  auto taps = std::make_shared<std::vector<Tap>>();
  taps->resize(static_cast<std::size_t>(ho) * wo);
  for (int oy = 0; oy < ho; ++oy) {
    double sy = (oy + 0.5) / factor - 0.5;
    int i0 = static_cast<int>(std::floor(sy));
    double fy = sy - i0;
    int i1 = std::min(i0 + 1, h - 1);
    i0 = std::max(i0, 0);
    for (int ox = 0; ox < wo; ++ox) {
      double sx = (ox + 0.5) / factor - 0.5;
      int j0 = static_cast<int>(std::floor(sx));
      double fx = sx - j0;
      int j1 = std::min(j0 + 1, w - 1);
      j0 = std::max(j0, 0);
      Tap& tp = (*taps)[static_cast<std::size_t>(oy) * wo + ox];
      tp = {i0, i1, j0, j1, (1 - fy) * (1 - fx), (1 - fy) * fx,
            fy * (1 - fx), fy * fx};
    }
  }
  Value out = t.make(x.rows(), ho * wo, detail::ng(t, x.id()));
  {
    const double* src = t.node(x.id()).val.data();
    double* dst = t.node(out.id()).val.data();
    for (int c = 0; c < x.rows(); ++c) {
      const double* sc = src + static_cast<std::size_t>(c) * h * w;
      double* dc = dst + static_cast<std::size_t>(c) * ho * wo;
      for (std::size_t p = 0; p < taps->size(); ++p) {
        const Tap& tp = (*taps)[p];
        dc[p] = tp.w00 * sc[tp.i0 * w + tp.j0] + tp.w01 * sc[tp.i0 * w + tp.j1] +
                tp.w10 * sc[tp.i1 * w + tp.j0] + tp.w11 * sc[tp.i1 * w + tp.j1];
      }
    }
  }
  if (t.node(out.id()).needs_grad) {
    int xi = x.id(), oi = out.id();
    t.node(oi).back = [&t, xi, oi, taps, h, w]() {
      int channels = t.node(xi).rows;
      std::size_t n_out = taps->size();
      const double* gsrc = t.node(oi).grad.data();
      double* gdst = t.node(xi).grad.data();
      for (int c = 0; c < channels; ++c) {
        const double* gc = gsrc + static_cast<std::size_t>(c) * n_out;
        double* xc = gdst + static_cast<std::size_t>(c) * h * w;
        for (std::size_t p = 0; p < n_out; ++p) {
          const Tap& tp = (*taps)[p];
          xc[tp.i0 * w + tp.j0] += tp.w00 * gc[p];
          xc[tp.i0 * w + tp.j1] += tp.w01 * gc[p];
          xc[tp.i1 * w + tp.j0] += tp.w10 * gc[p];
          xc[tp.i1 * w + tp.j1] += tp.w11 * gc[p];
        }
      }
    };
  }
  return out;
}

// --------------------------------------------------------------------------
// Composite helpers shared by model and losses
// --------------------------------------------------------------------------

// Row-wise cosine between paired rows of a and b: (m x d, m x d) -> (m x 1).
// Norms are guarded with a small epsilon so an all-zero row yields cosine 0.
inline Value cosine_rows(Value a, Value b, double eps = 1e-12) {
  Value dot = sum_cols(mul(a, b));
  Value na = vsqrt(sum_cols(square(a)));
  Value nb = vsqrt(sum_cols(square(b)));
  Value denom = add_scalar(mul(na, nb), eps);
  return mul(dot, vinv(denom));
}

// Full cosine similarity matrix: (n x d, l x d) -> (n x l).
inline Value cosine_matrix(Value a, Value b, double eps = 1e-12) {
  Value dots = matmul(a, transpose(b));
  Value na = vinv(add_scalar(vsqrt(sum_cols(square(a))), eps));  // n x 1
  Value nb = vinv(add_scalar(vsqrt(sum_cols(square(b))), eps));  // l x 1
  return mul_colvec(mul_rowvec(dots, transpose(nb)), na);
}

// Per-row layer normalization with learned gain/bias (1 x n each).
inline Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5) {
  Value mu = mean_cols(x);                                   // m x 1
  Value centered = add_colvec(x, neg(mu));
  Value var = mean_cols(square(centered));                   // m x 1
  Value inv_std = vinv(vsqrt(add_scalar(var, eps)));         // m x 1
  Value normed = mul_colvec(centered, inv_std);
  return add_rowvec(mul_rowvec(normed, gain), bias);
}

}  // namespace cpplab::ad

#endif  // CPPLAB_TENSOR_HPP_
