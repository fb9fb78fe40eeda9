#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stemedit/common.hpp"

namespace stemedit {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

/// A named, persistent tensor. Gradients accumulate across tape replays until
/// cleared by the optimizer. A non-trainable parameter never receives a
/// gradient at all.
template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Mat<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat<T>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
};

/// Reverse-mode tape over dense matrices. Values are computed eagerly as ops
/// are recorded; backward() replays the tape once in reverse. Node ids only
/// reference earlier nodes, so reverse creation order is a valid topological
/// order.
template <typename T>
class Tape {
 public:
  using Id = int32_t;

  const Mat<T>& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Mat<T>& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }
  size_t size() const { return nodes_.size(); }

  /// In inference mode every leaf is treated as a constant; backward is a no-op.
  void set_inference(bool on) { inference_ = on; }

  Id constant(Mat<T> v) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = false;
    return push(std::move(n));
  }

  Id leaf(Parameter<T>& p) {
    Node n;
    n.value = p.value;
    n.needs_grad = p.trainable && !inference_;
    if (n.needs_grad) {
      Parameter<T>* pp = &p;
      n.back = [pp](Tape& t, Id self) { pp->grad += t.g(self); };
    }
    return push(std::move(n));
  }

  Id matmul(Id a, Id b) {
    if (value(a).cols() != value(b).rows()) throw InputError("matmul: inner dims differ");
    Node n;
    n.value = value(a) * value(b);
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      n.back = [a, b](Tape& t, Id self) {
        const Mat<T>& go = t.g(self);
        if (t.needs(a)) t.acc(a, go * t.value(b).transpose());
        if (t.needs(b)) t.acc(b, t.value(a).transpose() * go);
      };
    }
    return push(std::move(n));
  }

  Id add(Id a, Id b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw InputError("add: shape mismatch");
    Node n;
    n.value = value(a) + value(b);
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      n.back = [a, b](Tape& t, Id self) {
        if (t.needs(a)) t.acc(a, t.g(self));
        if (t.needs(b)) t.acc(b, t.g(self));
      };
    }
    return push(std::move(n));
  }

  Id sub(Id a, Id b) {
    Node n;
    n.value = value(a) - value(b);
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      n.back = [a, b](Tape& t, Id self) {
        if (t.needs(a)) t.acc(a, t.g(self));
        if (t.needs(b)) t.acc(b, -t.g(self));
      };
    }
    return push(std::move(n));
  }

  /// y = a + row (row broadcast down all rows of a).
  Id add_rowvec(Id a, Id row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols())
      throw InputError("add_rowvec: row must be 1 x cols(a)");
    Node n;
    n.value = value(a).rowwise() + value(row).row(0);
    n.needs_grad = needs(a) || needs(row);
    if (n.needs_grad) {
      n.back = [a, row](Tape& t, Id self) {
        if (t.needs(a)) t.acc(a, t.g(self));
        if (t.needs(row)) t.acc(row, t.g(self).colwise().sum());
      };
    }
    return push(std::move(n));
  }

  Id mul_elem(Id a, Id b) {
    Node n;
    n.value = value(a).cwiseProduct(value(b));
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      n.back = [a, b](Tape& t, Id self) {
        if (t.needs(a)) t.acc(a, t.g(self).cwiseProduct(t.value(b)));
        if (t.needs(b)) t.acc(b, t.g(self).cwiseProduct(t.value(a)));
      };
    }
    return push(std::move(n));
  }

  /// y = s * a where s is a 1x1 node.
  Id scale(Id a, Id s) {
    if (value(s).rows() != 1 || value(s).cols() != 1) throw InputError("scale: s must be 1x1");
    Node n;
    n.value = value(s)(0, 0) * value(a);
    n.needs_grad = needs(a) || needs(s);
    if (n.needs_grad) {
      n.back = [a, s](Tape& t, Id self) {
        if (t.needs(a)) t.acc(a, t.value(s)(0, 0) * t.g(self));
        if (t.needs(s)) {
          Mat<T> gs(1, 1);
          gs(0, 0) = (t.g(self).cwiseProduct(t.value(a))).sum();
          t.acc(s, gs);
        }
      };
    }
    return push(std::move(n));
  }

  Id scale_const(Id a, T c) {
    Node n;
    n.value = c * value(a);
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a, c](Tape& t, Id self) { t.acc(a, c * t.g(self)); };
    }
    return push(std::move(n));
  }

  Id transpose(Id a) {
    Node n;
    n.value = value(a).transpose();
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a](Tape& t, Id self) { t.acc(a, t.g(self).transpose()); };
    }
    return push(std::move(n));
  }

  Id slice_cols(Id a, Eigen::Index off, Eigen::Index count) {
    Node n;
    n.value = value(a).middleCols(off, count);
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a, off, count](Tape& t, Id self) {
        t.touch(a).middleCols(off, count) += t.g(self);
      };
    }
    return push(std::move(n));
  }

  Id slice_rows(Id a, Eigen::Index off, Eigen::Index count) {
    Node n;
    n.value = value(a).middleRows(off, count);
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a, off, count](Tape& t, Id self) {
        t.touch(a).middleRows(off, count) += t.g(self);
      };
    }
    return push(std::move(n));
  }

  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw InputError("concat_cols: empty");
    Eigen::Index rows = value(parts[0]).rows(), cols = 0;
    for (Id p : parts) cols += value(p).cols();
    Node n;
    n.value.resize(rows, cols);
    Eigen::Index at = 0;
    bool ng = false;
    for (Id p : parts) {
      n.value.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
      ng = ng || needs(p);
    }
    n.needs_grad = ng;
    if (ng) {
      std::vector<Id> ps = parts;
      n.back = [ps](Tape& t, Id self) {
        Eigen::Index at2 = 0;
        for (Id p : ps) {
          Eigen::Index c = t.value(p).cols();
          if (t.needs(p)) t.acc(p, t.g(self).middleCols(at2, c));
          at2 += c;
        }
      };
    }
    return push(std::move(n));
  }

  Id concat_rows(const std::vector<Id>& parts) {
    if (parts.empty()) throw InputError("concat_rows: empty");
    Eigen::Index cols = value(parts[0]).cols(), rows = 0;
    for (Id p : parts) rows += value(p).rows();
    Node n;
    n.value.resize(rows, cols);
    Eigen::Index at = 0;
    bool ng = false;
    for (Id p : parts) {
      n.value.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
      ng = ng || needs(p);
    }
    n.needs_grad = ng;
    if (ng) {
      std::vector<Id> ps = parts;
      n.back = [ps](Tape& t, Id self) {
        Eigen::Index at2 = 0;
        for (Id p : ps) {
          Eigen::Index r = t.value(p).rows();
          if (t.needs(p)) t.acc(p, t.g(self).middleRows(at2, r));
          at2 += r;
        }
      };
    }
    return push(std::move(n));
  }

  /// y(i, :) = a(rows[i], :). Duplicate indices accumulate on backward.
  Id gather_rows(Id a, std::vector<int32_t> rows) {
    const Mat<T>& av = value(a);
    Node n;
    n.value.resize(static_cast<Eigen::Index>(rows.size()), av.cols());
    for (size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= av.rows()) throw InputError("gather_rows: index out of range");
      n.value.row(static_cast<Eigen::Index>(i)) = av.row(rows[i]);
    }
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a, rows = std::move(rows)](Tape& t, Id self) {
        Mat<T>& ga = t.touch(a);
        for (size_t i = 0; i < rows.size(); ++i)
          ga.row(rows[i]) += t.g(self).row(static_cast<Eigen::Index>(i));
      };
    }
    return push(std::move(n));
  }

  /// Replicate a 1 x C row vector into R rows.
  Id broadcast_row(Id row, Eigen::Index r) {
    if (value(row).rows() != 1) throw InputError("broadcast_row: input must be a row vector");
    Node n;
    n.value = value(row).replicate(r, 1);
    n.needs_grad = needs(row);
    if (n.needs_grad) {
      n.back = [row](Tape& t, Id self) { t.acc(row, t.g(self).colwise().sum()); };
    }
    return push(std::move(n));
  }

  /// Row-wise softmax over all columns.
  Id softmax_rows(Id a) { return softmax_impl(a, MaskKind::None, {}); }

  /// Row-wise softmax where row i only sees columns j <= i.
  Id softmax_rows_causal(Id a) {
    if (value(a).rows() != value(a).cols())
      throw InputError("softmax_rows_causal: matrix must be square");
    return softmax_impl(a, MaskKind::Causal, {});
  }

  /// Row-wise softmax restricted to columns with keep[j] != 0.
  Id softmax_rows_colmask(Id a, std::vector<uint8_t> keep) {
    if (static_cast<Eigen::Index>(keep.size()) != value(a).cols())
      throw InputError("softmax_rows_colmask: mask length mismatch");
    bool any = false;
    for (uint8_t k : keep) any = any || (k != 0);
    if (!any) throw InputError("softmax_rows_colmask: all columns masked");
    return softmax_impl(a, MaskKind::Columns, std::move(keep));
  }

  /// tanh-approximation GELU; smooth, so finite differences stay honest.
  Id gelu(Id a) {
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T k = static_cast<T>(0.044715);
    Node n;
    n.value = value(a).unaryExpr([c, k](T x) {
      T u = c * (x + k * x * x * x);
      return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::tanh(u));
    });
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a, c, k](Tape& t, Id self) {
        const Mat<T>& x = t.value(a);
        Mat<T> d = x.unaryExpr([c, k](T v) {
          T u = c * (v + k * v * v * v);
          T th = std::tanh(u);
          T sech2 = static_cast<T>(1) - th * th;
          return static_cast<T>(0.5) * (static_cast<T>(1) + th) +
                 static_cast<T>(0.5) * v * sech2 * c * (static_cast<T>(1) + 3 * k * v * v);
        });
        t.acc(a, t.g(self).cwiseProduct(d));
      };
    }
    return push(std::move(n));
  }

  /// Row-wise layer norm with learned gain/bias (both 1 x C).
  Id layer_norm(Id x, Id gamma, Id beta, T eps = static_cast<T>(1e-5)) {
    const Mat<T>& xv = value(x);
    Eigen::Index R = xv.rows(), C = xv.cols();
    if (value(gamma).cols() != C || value(beta).cols() != C)
      throw InputError("layer_norm: gain/bias width mismatch");
    Mat<T> xhat(R, C);
    Mat<T> inv_std(R, 1);
    for (Eigen::Index i = 0; i < R; ++i) {
      T mu = xv.row(i).mean();
      T var = (xv.row(i).array() - mu).square().mean();
      T is = static_cast<T>(1) / std::sqrt(var + eps);
      inv_std(i, 0) = is;
      xhat.row(i) = (xv.row(i).array() - mu) * is;
    }
    Node n;
    n.value = ((xhat.array().rowwise() * value(gamma).row(0).array()).rowwise() +
               value(beta).row(0).array())
                  .matrix();
    n.needs_grad = needs(x) || needs(gamma) || needs(beta);
    if (n.needs_grad) {
      n.back = [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                   Tape& t, Id self) {
        const Mat<T>& go = t.g(self);
        Eigen::Index R2 = go.rows(), C2 = go.cols();
        if (t.needs(beta)) t.acc(beta, go.colwise().sum());
        if (t.needs(gamma)) t.acc(gamma, go.cwiseProduct(xhat).colwise().sum());
        if (t.needs(x)) {
          Mat<T> gx(R2, C2);
          const auto& gm = t.value(gamma);
          for (Eigen::Index i = 0; i < R2; ++i) {
            Eigen::Array<T, 1, Eigen::Dynamic> gy = go.row(i).array() * gm.row(0).array();
            T m1 = gy.mean();
            T m2 = (gy * xhat.row(i).array()).mean();
            gx.row(i) = (((gy - m1) - xhat.row(i).array() * m2) * inv_std(i, 0)).matrix();
          }
          t.acc(x, gx);
        }
      };
    }
    return push(std::move(n));
  }

  Id sum_all(Id a) {
    Node n;
    n.value = Mat<T>::Constant(1, 1, value(a).sum());
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a](Tape& t, Id self) {
        t.touch(a).array() += t.g(self)(0, 0);
      };
    }
    return push(std::move(n));
  }

  Id mean_all(Id a) {
    T inv = static_cast<T>(1) / static_cast<T>(value(a).size());
    return scale_const(sum_all(a), inv);
  }

  /// Mean squared error between two same-shape nodes, as a 1x1 node.
  Id mse(Id a, Id b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw InputError("mse: shape mismatch");
    Mat<T> diff = value(a) - value(b);
    T inv = static_cast<T>(1) / static_cast<T>(diff.size());
    Node n;
    n.value = Mat<T>::Constant(1, 1, diff.squaredNorm() * inv);
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      n.back = [a, b, diff = std::move(diff), inv](Tape& t, Id self) {
        Mat<T> d = (2 * inv * t.g(self)(0, 0)) * diff;
        if (t.needs(a)) t.acc(a, d);
        if (t.needs(b)) t.acc(b, -d);
      };
    }
    return push(std::move(n));
  }

  /// Mean negative log-likelihood over rows; targets[i] indexes row i's class.
  Id cross_entropy_rows(Id logits, const std::vector<int32_t>& targets) {
    const Mat<T>& lv = value(logits);
    Eigen::Index R = lv.rows(), C = lv.cols();
    if (static_cast<Eigen::Index>(targets.size()) != R)
      throw InputError("cross_entropy_rows: target count mismatch");
    Mat<T> probs(R, C);
    T nll = 0;
    for (Eigen::Index i = 0; i < R; ++i) {
      if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= C)
        throw InputError("cross_entropy_rows: target out of range");
      T m = lv.row(i).maxCoeff();
      Eigen::Array<T, 1, Eigen::Dynamic> e = (lv.row(i).array() - m).exp();
      T s = e.sum();
      probs.row(i) = e / s;
      nll -= (lv(i, targets[static_cast<size_t>(i)]) - m - std::log(s));
    }
    Node n;
    n.value = Mat<T>::Constant(1, 1, nll / static_cast<T>(R));
    n.needs_grad = needs(logits);
    if (n.needs_grad) {
      n.back = [logits, targets, probs = std::move(probs)](Tape& t, Id self) {
        T g0 = t.g(self)(0, 0) / static_cast<T>(probs.rows());
        Mat<T> gl = probs;
        for (Eigen::Index i = 0; i < gl.rows(); ++i)
          gl(i, targets[static_cast<size_t>(i)]) -= static_cast<T>(1);
        t.acc(logits, g0 * gl);
      };
    }
    return push(std::move(n));
  }

  /// Backpropagate from a 1x1 root node.
  void backward(Id root) {
    Node& r = nodes_[static_cast<size_t>(root)];
    if (r.value.rows() != 1 || r.value.cols() != 1) throw InputError("backward: root must be 1x1");
    if (!r.needs_grad) return;
    touch(root)(0, 0) = static_cast<T>(1);
    for (Id i = root; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.needs_grad && n.back && n.grad.size() > 0) n.back(*this, i);
    }
  }

  bool needs(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

 private:
  enum class MaskKind { None, Causal, Columns };

  struct Node {
    Mat<T> value;
    Mat<T> grad;  // allocated on first touch during backward
    std::function<void(Tape&, Id)> back;
    bool needs_grad = false;
  };

  Id softmax_impl(Id a, MaskKind kind, std::vector<uint8_t> keep) {
    const Mat<T>& av = value(a);
    Eigen::Index R = av.rows(), C = av.cols();
    Mat<T> y = Mat<T>::Zero(R, C);
    for (Eigen::Index i = 0; i < R; ++i) {
      Eigen::Index lim = (kind == MaskKind::Causal) ? i + 1 : C;
      T m = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j < lim; ++j) {
        if (kind == MaskKind::Columns && !keep[static_cast<size_t>(j)]) continue;
        m = std::max(m, av(i, j));
      }
      T s = 0;
      for (Eigen::Index j = 0; j < lim; ++j) {
        if (kind == MaskKind::Columns && !keep[static_cast<size_t>(j)]) continue;
        T e = std::exp(av(i, j) - m);
        y(i, j) = e;
        s += e;
      }
      for (Eigen::Index j = 0; j < lim; ++j) y(i, j) /= s;
    }
    Node n;
    n.value = y;
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      n.back = [a](Tape& t, Id self) {
        const Mat<T>& yv = t.value(self);
        const Mat<T>& go = t.g(self);
        Mat<T> gx(yv.rows(), yv.cols());
        for (Eigen::Index i = 0; i < yv.rows(); ++i) {
          T dot = go.row(i).dot(yv.row(i));
          gx.row(i) = (yv.row(i).array() * (go.row(i).array() - dot)).matrix();
        }
        t.acc(a, gx);
      };
    }
    return push(std::move(n));
  }

  Id push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  const Mat<T>& g(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }

  Mat<T>& touch(Id id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Expr>
  void acc(Id id, const Expr& e) {
    touch(id) += e;
  }

  std::vector<Node> nodes_;
  bool inference_ = false;
};

}  // namespace stemedit
