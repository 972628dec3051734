#pragma once

#include <algorithm>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hypertab/linalg.hpp"

namespace hypertab {

// Reverse-mode tape over dense matrices. Values are computed eagerly as ops
// are recorded; backward() replays the tape in reverse. Nodes whose inputs
// all have requires_grad == false record no backward closure, so the same
// builder code doubles as a plain evaluator for inference.
//
// Reductions that pool over rows (mean_rows, class_mean_rows) accumulate in
// ascending value order, which makes pooled outputs bit-identical under row
// permutations of their inputs.
template <class T>
class Tape {
 public:
  using VarId = int;

  VarId leaf(Mat<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {});
  }

  VarId constant(Mat<T> value) { return leaf(std::move(value), false); }

  const Mat<T>& value(VarId id) const { return nodes_[check(id)].value; }

  const Mat<T>& grad(VarId id) const {
    const Node& n = nodes_[check(id)];
    if (!n.requires_grad) throw std::logic_error("Tape::grad: node does not require grad");
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  // ---- ops -------------------------------------------------------------

  VarId matmul(VarId a, VarId b) {
    const Mat<T>&A = value(a), &B = value(b);
    if (A.cols() != B.rows()) throw std::invalid_argument("matmul: inner dims differ");
    VarId out = push(A * B, needs(a) || needs(b), {a, b});
    if (needs(out)) {
      set_back(out, [this, a, b](const Mat<T>& g) {
        if (needs(a)) nodes_[a].grad.noalias() += g * value(b).transpose();
        if (needs(b)) nodes_[b].grad.noalias() += value(a).transpose() * g;
      });
    }
    return out;
  }

  VarId add(VarId a, VarId b) {
    const Mat<T>&A = value(a), &B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw std::invalid_argument("add: shape mismatch");
    VarId out = push(A + B, needs(a) || needs(b), {a, b});
    if (needs(out)) {
      set_back(out, [this, a, b](const Mat<T>& g) {
        if (needs(a)) nodes_[a].grad += g;
        if (needs(b)) nodes_[b].grad += g;
      });
    }
    return out;
  }

  // a: n x d, row: 1 x d, broadcast-added to every row.
  VarId add_row(VarId a, VarId row) {
    const Mat<T>&A = value(a), &R = value(row);
    if (R.rows() != 1 || R.cols() != A.cols()) throw std::invalid_argument("add_row: bad row shape");
    Mat<T> v = A;
    v.rowwise() += R.row(0);
    VarId out = push(std::move(v), needs(a) || needs(row), {a, row});
    if (needs(out)) {
      set_back(out, [this, a, row](const Mat<T>& g) {
        if (needs(a)) nodes_[a].grad += g;
        if (needs(row)) nodes_[row].grad.row(0) += g.colwise().sum();
      });
    }
    return out;
  }

  VarId sub_row(VarId a, VarId row) {
    const Mat<T>&A = value(a), &R = value(row);
    if (R.rows() != 1 || R.cols() != A.cols()) throw std::invalid_argument("sub_row: bad row shape");
    Mat<T> v = A;
    v.rowwise() -= R.row(0);
    VarId out = push(std::move(v), needs(a) || needs(row), {a, row});
    if (needs(out)) {
      set_back(out, [this, a, row](const Mat<T>& g) {
        if (needs(a)) nodes_[a].grad += g;
        if (needs(row)) nodes_[row].grad.row(0) -= g.colwise().sum();
      });
    }
    return out;
  }

  VarId relu(VarId a) {
    Mat<T> v = value(a).cwiseMax(T(0));
    VarId out = push(std::move(v), needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a, out](const Mat<T>& g) {
        const Mat<T>& x = value(a);
        nodes_[a].grad.array() += g.array() * (x.array() > T(0)).template cast<T>();
      });
    }
    return out;
  }

  VarId scale(VarId a, T s) {
    VarId out = push(value(a) * s, needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a, s](const Mat<T>& g) { nodes_[a].grad += g * s; });
    }
    return out;
  }

  // Mean over rows -> 1 x d (order-invariant accumulation).
  VarId mean_rows(VarId a) {
    const Mat<T>& A = value(a);
    if (A.rows() == 0) throw std::invalid_argument("mean_rows: empty");
    VarId out = push(sorted_colwise_mean(A), needs(a), {a});
    if (needs(out)) {
      const T inv_n = T(1) / static_cast<T>(A.rows());
      set_back(out, [this, a, inv_n](const Mat<T>& g) {
        nodes_[a].grad.rowwise() += (g.row(0) * inv_n);
      });
    }
    return out;
  }

  // Per-class mean over rows -> C x d; every class in [0, n_classes) must occur.
  VarId class_mean_rows(VarId a, const std::vector<int>& y, int n_classes) {
    const Mat<T>& A = value(a);
    if (static_cast<Eigen::Index>(y.size()) != A.rows())
      throw std::invalid_argument("class_mean_rows: label count mismatch");
    std::vector<std::vector<int>> groups(static_cast<size_t>(n_classes));
    for (size_t i = 0; i < y.size(); ++i) {
      if (y[i] < 0 || y[i] >= n_classes) throw std::invalid_argument("class_mean_rows: label out of range");
      groups[static_cast<size_t>(y[i])].push_back(static_cast<int>(i));
    }
    Mat<T> v(n_classes, A.cols());
    std::vector<T> col;
    for (int c = 0; c < n_classes; ++c) {
      const auto& rows = groups[static_cast<size_t>(c)];
      if (rows.empty()) throw std::invalid_argument("class_mean_rows: class with no rows");
      col.resize(rows.size());
      for (Eigen::Index j = 0; j < A.cols(); ++j) {
        for (size_t k = 0; k < rows.size(); ++k) col[k] = A(rows[k], j);
        std::sort(col.begin(), col.end());
        T s = T(0);
        for (T x : col) s += x;
        v(c, j) = s / static_cast<T>(rows.size());
      }
    }
    VarId out = push(std::move(v), needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a, groups](const Mat<T>& g) {
        for (size_t c = 0; c < groups.size(); ++c) {
          const T inv = T(1) / static_cast<T>(groups[c].size());
          for (int r : groups[c]) nodes_[a].grad.row(r) += g.row(static_cast<Eigen::Index>(c)) * inv;
        }
      });
    }
    return out;
  }

  // Select rows by index (duplicates allowed); grad scatter-adds.
  VarId gather_rows(VarId a, std::vector<int> idx) {
    const Mat<T>& A = value(a);
    Mat<T> v(static_cast<Eigen::Index>(idx.size()), A.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= A.rows()) throw std::invalid_argument("gather_rows: index out of range");
      v.row(static_cast<Eigen::Index>(i)) = A.row(idx[i]);
    }
    VarId out = push(std::move(v), needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a, idx = std::move(idx)](const Mat<T>& g) {
        for (size_t i = 0; i < idx.size(); ++i)
          nodes_[a].grad.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
      });
    }
    return out;
  }

  // 1 x d row replicated n times.
  VarId broadcast_row(VarId row, Eigen::Index n) {
    const Mat<T>& R = value(row);
    if (R.rows() != 1) throw std::invalid_argument("broadcast_row: input must be a row");
    Mat<T> v = R.replicate(n, 1);
    VarId out = push(std::move(v), needs(row), {row});
    if (needs(out)) {
      set_back(out, [this, row](const Mat<T>& g) { nodes_[row].grad.row(0) += g.colwise().sum(); });
    }
    return out;
  }

  VarId concat_cols(const std::vector<VarId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const Eigen::Index n = value(parts[0]).rows();
    Eigen::Index total = 0;
    bool any = false;
    for (VarId p : parts) {
      if (value(p).rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
      total += value(p).cols();
      any = any || needs(p);
    }
    Mat<T> v(n, total);
    Eigen::Index at = 0;
    for (VarId p : parts) {
      v.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
    }
    VarId out = push(std::move(v), any, parts);
    if (needs(out)) {
      set_back(out, [this, parts](const Mat<T>& g) {
        Eigen::Index at2 = 0;
        for (VarId p : parts) {
          const Eigen::Index w = value(p).cols();
          if (needs(p)) nodes_[p].grad += g.middleCols(at2, w);
          at2 += w;
        }
      });
    }
    return out;
  }

  VarId slice_cols(VarId a, Eigen::Index from, Eigen::Index len) {
    const Mat<T>& A = value(a);
    if (from < 0 || len < 0 || from + len > A.cols()) throw std::invalid_argument("slice_cols: range");
    Mat<T> v = A.middleCols(from, len);
    VarId out = push(std::move(v), needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a, from, len](const Mat<T>& g) {
        nodes_[a].grad.middleCols(from, len) += g;
      });
    }
    return out;
  }

  // Row-major reshape (entries read row by row).
  VarId reshape(VarId a, Eigen::Index rows, Eigen::Index cols) {
    const Mat<T>& A = value(a);
    if (rows * cols != A.size()) throw std::invalid_argument("reshape: size mismatch");
    Mat<T> v(rows, cols);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      for (Eigen::Index j = 0; j < A.cols(); ++j, ++k) v(k / cols, k % cols) = A(i, j);
    VarId out = push(std::move(v), needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a, cols](const Mat<T>& g) {
        Mat<T>& ga = nodes_[a].grad;
        Eigen::Index k2 = 0;
        for (Eigen::Index i = 0; i < ga.rows(); ++i)
          for (Eigen::Index j = 0; j < ga.cols(); ++j, ++k2) ga(i, j) += g(k2 / cols, k2 % cols);
      });
    }
    return out;
  }

  VarId transpose(VarId a) {
    VarId out = push(value(a).transpose(), needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a](const Mat<T>& g) { nodes_[a].grad += g.transpose(); });
    }
    return out;
  }

  // Clamp column j of a to [-bounds[j], +bounds[j]]. Gradient passes where
  // |x| < bound and is zero where the clamp is active.
  VarId clamp_sym_cols(VarId a, const Mat<T>& bounds) {
    const Mat<T>& A = value(a);
    if (bounds.rows() != 1 || bounds.cols() != A.cols())
      throw std::invalid_argument("clamp_sym_cols: bounds must be 1 x cols");
    Mat<T> v = A;
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      const T b = bounds(0, j);
      for (Eigen::Index i = 0; i < v.rows(); ++i) v(i, j) = std::clamp(v(i, j), -b, b);
    }
    VarId out = push(std::move(v), needs(a), {a});
    if (needs(out)) {
      set_back(out, [this, a, bounds](const Mat<T>& g) {
        const Mat<T>& x = value(a);
        Mat<T>& ga = nodes_[a].grad;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
          const T b = bounds(0, j);
          for (Eigen::Index i = 0; i < x.rows(); ++i)
            if (x(i, j) > -b && x(i, j) < b) ga(i, j) += g(i, j);
        }
      });
    }
    return out;
  }

  // out = a with scalars(0, entry) added at each (row, col) position.
  // Used for retrieval biases: the position list is data-dependent but is
  // treated as a constant of the graph.
  VarId add_scalar_entry_at(VarId a, VarId scalars, Eigen::Index entry,
                            const std::vector<std::pair<int, int>>& positions) {
    const Mat<T>& A = value(a);
    const Mat<T>& S = value(scalars);
    if (S.rows() != 1 || entry < 0 || entry >= S.cols())
      throw std::invalid_argument("add_scalar_entry_at: bad scalar index");
    Mat<T> v = A;
    const T s = S(0, entry);
    for (auto [r, c] : positions) {
      if (r < 0 || r >= v.rows() || c < 0 || c >= v.cols())
        throw std::invalid_argument("add_scalar_entry_at: position out of range");
      v(r, c) += s;
    }
    VarId out = push(std::move(v), needs(a) || needs(scalars), {a, scalars});
    if (needs(out)) {
      set_back(out, [this, a, scalars, entry, positions](const Mat<T>& g) {
        if (needs(a)) nodes_[a].grad += g;
        if (needs(scalars)) {
          T acc = T(0);
          for (auto [r, c] : positions) acc += g(r, c);
          nodes_[scalars].grad(0, entry) += acc;
        }
      });
    }
    return out;
  }

  // Mean over rows of -log softmax(logits)[label]; returns a 1x1 node.
  // Stabilized by per-row max subtraction.
  VarId softmax_cross_entropy(VarId logits, const std::vector<int>& labels) {
    const Mat<T>& L = value(logits);
    if (static_cast<Eigen::Index>(labels.size()) != L.rows())
      throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    const Eigen::Index n = L.rows(), c = L.cols();
    Mat<T> probs(n, c);
    T loss = T(0);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
        throw std::invalid_argument("softmax_cross_entropy: label out of range");
      const T m = L.row(i).maxCoeff();
      T z = T(0);
      for (Eigen::Index j = 0; j < c; ++j) z += std::exp(L(i, j) - m);
      const T log_z = std::log(z) + m;
      loss += log_z - L(i, labels[static_cast<size_t>(i)]);
      for (Eigen::Index j = 0; j < c; ++j) probs(i, j) = std::exp(L(i, j) - log_z);
    }
    loss /= static_cast<T>(n);
    Mat<T> v(1, 1);
    v(0, 0) = loss;
    VarId out = push(std::move(v), needs(logits), {logits});
    if (needs(out)) {
      set_back(out, [this, logits, labels, probs = std::move(probs)](const Mat<T>& g) {
        const T s = g(0, 0) / static_cast<T>(probs.rows());
        Mat<T> d = probs;
        for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, labels[static_cast<size_t>(i)]) -= T(1);
        nodes_[logits].grad += d * s;
      });
    }
    return out;
  }

  // ---- backward ---------------------------------------------------------

  void backward(VarId loss) {
    const Node& ln = nodes_[check(loss)];
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw std::invalid_argument("backward: loss must be 1x1");
    for (Node& n : nodes_) {
      if (n.requires_grad) n.grad.setZero(n.value.rows(), n.value.cols());
    }
    if (!ln.requires_grad) return;  // loss independent of any leaf
    nodes_[loss].grad(0, 0) = T(1);
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad && n.back) n.back(n.grad);
    }
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    std::function<void(const Mat<T>&)> back;
    bool requires_grad = false;
  };

  bool needs(VarId id) const { return nodes_[check(id)].requires_grad; }

  VarId push(Mat<T> value, bool requires_grad, std::vector<VarId> /*parents*/) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
  }

  void set_back(VarId id, std::function<void(const Mat<T>&)> fn) {
    nodes_[static_cast<size_t>(id)].back = std::move(fn);
  }

  size_t check(VarId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw std::logic_error("Tape: bad VarId");
    return static_cast<size_t>(id);
  }

  std::vector<Node> nodes_;
};

}  // namespace hypertab
