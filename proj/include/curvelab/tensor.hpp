#pragma once

// Reverse-mode autodiff over dense double tensors. The graph is dynamic:
// every op allocates a node holding its value, its parents and a closure
// that pushes gradients backward. Nodes are shared_ptr-owned by their
// consumers, so a whole step's graph is released when the loss goes out of
// scope. All math is 64-bit.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include "curvelab/check.hpp"
#include "curvelab/parallel.hpp"

namespace curvelab {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

class Var;

struct VarNode {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(VarNode&)> backward_fn;

  std::vector<double>& grad_ref() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<VarNode> n) : n_(std::move(n)) {}

  static Var leaf(Shape shape, std::vector<double> val, bool requires_grad = false) {
    CVL_CHECK(static_cast<std::int64_t>(val.size()) == numel(shape), "leaf: value size mismatch");
    auto n = std::make_shared<VarNode>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(numel(shape), 0.0);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Var scalar(double v) { return leaf({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(n_->val.size()); }
  const std::vector<double>& val() const { return n_->val; }
  std::vector<double>& mutable_val() { return n_->val; }
  const std::vector<double>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  VarNode* node() const { return n_.get(); }

  double item() const {
    CVL_CHECK(n_->val.size() == 1, "item: not a scalar");
    return n_->val[0];
  }

  void zero_grad() { n_->grad.assign(n_->val.size(), 0.0); }

  // Backpropagate from this scalar through the graph.
  void backward() const {
    CVL_CHECK(n_ && n_->val.size() == 1, "backward: root must be scalar");
    std::vector<VarNode*> order;
    std::unordered_set<VarNode*> seen;
    // Iterative post-order DFS over grad-requiring nodes.
    std::vector<std::pair<VarNode*, std::size_t>> stack;
    if (n_->requires_grad) stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        VarNode* p = node->parents[idx++].node();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->grad_ref()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      VarNode* node = *it;
      if (node->backward_fn && node->grad.size() == node->val.size()) node->backward_fn(*node);
    }
  }

 private:
  std::shared_ptr<VarNode> n_;
};

namespace detail {

inline Var make_op(Shape shape, std::vector<double> val, std::vector<Var> parents,
                   std::function<void(VarNode&)> backward_fn) {
  auto n = std::make_shared<VarNode>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

inline void accum(VarNode* p, std::int64_t i, double g) {
  if (p->requires_grad) p->grad_ref()[i] += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  CVL_CHECK(a.size() == b.size(), "add: size mismatch");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.val()[i] + b.val()[i];
  return detail::make_op(a.shape(), std::move(v), {a, b}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    VarNode* pb = n.parents[1].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      detail::accum(pa, i, n.grad[i]);
      detail::accum(pb, i, n.grad[i]);
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  CVL_CHECK(a.size() == b.size(), "sub: size mismatch");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.val()[i] - b.val()[i];
  return detail::make_op(a.shape(), std::move(v), {a, b}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    VarNode* pb = n.parents[1].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      detail::accum(pa, i, n.grad[i]);
      detail::accum(pb, i, -n.grad[i]);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  CVL_CHECK(a.size() == b.size(), "mul: size mismatch");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.val()[i] * b.val()[i];
  return detail::make_op(a.shape(), std::move(v), {a, b}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    VarNode* pb = n.parents[1].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      detail::accum(pa, i, n.grad[i] * pb->val[i]);
      detail::accum(pb, i, n.grad[i] * pa->val[i]);
    }
  });
}

inline Var scale(const Var& a, double c) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.val()[i] * c;
  return detail::make_op(a.shape(), std::move(v), {a}, [c](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) detail::accum(pa, i, n.grad[i] * c);
  });
}

inline Var add_scalar(const Var& a, double c) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.val()[i] + c;
  return detail::make_op(a.shape(), std::move(v), {a}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) detail::accum(pa, i, n.grad[i]);
  });
}

// Elementwise multiply by a constant mask/weight vector.
inline Var mul_const(const Var& a, std::vector<double> c) {
  CVL_CHECK(a.size() == static_cast<std::int64_t>(c.size()), "mul_const: size mismatch");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.val()[i] * c[i];
  return detail::make_op(a.shape(), std::move(v), {a}, [c = std::move(c)](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) detail::accum(pa, i, n.grad[i] * c[i]);
  });
}

inline Var add_const(const Var& a, std::vector<double> c) {
  CVL_CHECK(a.size() == static_cast<std::int64_t>(c.size()), "add_const: size mismatch");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.val()[i] + c[i];
  return detail::make_op(a.shape(), std::move(v), {a}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) detail::accum(pa, i, n.grad[i]);
  });
}

// Broadcast-add a row vector over every row of a 2D tensor.
inline Var add_rowvec(const Var& x, const Var& v) {
  CVL_CHECK(x.shape().size() == 2 && x.shape()[1] == static_cast<int>(v.size()),
            "add_rowvec: shape mismatch");
  int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(x.size());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[i * cols + j] = x.val()[i * cols + j] + v.val()[j];
  return detail::make_op(x.shape(), std::move(out), {x, v}, [rows, cols](VarNode& n) {
    VarNode* px = n.parents[0].node();
    VarNode* pv = n.parents[1].node();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        detail::accum(px, i * cols + j, n.grad[i * cols + j]);
        detail::accum(pv, j, n.grad[i * cols + j]);
      }
  });
}

inline Var sigmoid(const Var& a) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-a.val()[i]));
  return detail::make_op(a.shape(), std::move(v), {a}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail::accum(pa, i, n.grad[i] * n.val[i] * (1.0 - n.val[i]));
  });
}

inline Var silu(const Var& a) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-a.val()[i]));
    v[i] = a.val()[i] * s;
  }
  return detail::make_op(a.shape(), std::move(v), {a}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      double x = pa->val[i];
      double s = 1.0 / (1.0 + std::exp(-x));
      detail::accum(pa, i, n.grad[i] * (s + x * s * (1.0 - s)));
    }
  });
}

inline Var abs_val(const Var& a) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = std::fabs(a.val()[i]);
  return detail::make_op(a.shape(), std::move(v), {a}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      double x = pa->val[i];
      double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
      detail::accum(pa, i, n.grad[i] * s);
    }
  });
}

// Gradient passes through inside [lo, hi], zero outside.
inline Var clamp(const Var& a, double lo, double hi) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = std::min(hi, std::max(lo, a.val()[i]));
  return detail::make_op(a.shape(), std::move(v), {a}, [lo, hi](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (pa->val[i] >= lo && pa->val[i] <= hi) detail::accum(pa, i, n.grad[i]);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  CVL_CHECK(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: shape mismatch");
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      double av = a.val()[i * k + l];
      const double* br = b.val().data() + static_cast<std::size_t>(l) * n;
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * br[j];
    }
  return detail::make_op({m, n}, std::move(out), {a, b}, [m, k, n](VarNode& node) {
    VarNode* pa = node.parents[0].node();
    VarNode* pb = node.parents[1].node();
    if (pa->requires_grad) {
      auto& ga = pa->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          double g = node.grad[i * n + j];
          const double* br = pb->val.data() + 0;
          for (int l = 0; l < k; ++l) ga[i * k + l] += g * br[l * n + j];
        }
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          double av = pa->val[i * k + l];
          const double* gr = node.grad.data() + static_cast<std::size_t>(i) * n;
          double* gbr = gb.data() + static_cast<std::size_t>(l) * n;
          for (int j = 0; j < n; ++j) gbr[j] += av * gr[j];
        }
    }
  });
}

// a (m,k) times b^T where b is (n,k). Row-contiguous dot products.
inline Var matmul_nt(const Var& a, const Var& b) {
  CVL_CHECK(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[1],
            "matmul_nt: shape mismatch");
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const double* ar = a.val().data() + static_cast<std::size_t>(i) * k;
      const double* br = b.val().data() + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += ar[l] * br[l];
      out[i * n + j] = acc;
    }
  return detail::make_op({m, n}, std::move(out), {a, b}, [m, k, n](VarNode& node) {
    VarNode* pa = node.parents[0].node();
    VarNode* pb = node.parents[1].node();
    if (pa->requires_grad) {
      auto& ga = pa->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          double g = node.grad[i * n + j];
          const double* br = pb->val.data() + static_cast<std::size_t>(j) * k;
          double* gar = ga.data() + static_cast<std::size_t>(i) * k;
          for (int l = 0; l < k; ++l) gar[l] += g * br[l];
        }
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          double g = node.grad[i * n + j];
          const double* ar = pa->val.data() + static_cast<std::size_t>(i) * k;
          double* gbr = gb.data() + static_cast<std::size_t>(j) * k;
          for (int l = 0; l < k; ++l) gbr[l] += g * ar[l];
        }
    }
  });
}

// x (rows, in) * W^T + b, W is (out, in).
inline Var linear(const Var& x, const Var& W, const Var& b) {
  CVL_CHECK(x.shape().size() == 2 && W.shape().size() == 2 && x.shape()[1] == W.shape()[1],
            "linear: shape mismatch");
  int rows = x.shape()[0], in = x.shape()[1], out = W.shape()[0];
  CVL_CHECK(!b.defined() || b.size() == out, "linear: bias size mismatch");
  std::vector<double> y(static_cast<std::size_t>(rows) * out);
  parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      const double* xr = x.val().data() + i * in;
      double* yr = y.data() + i * out;
      for (int o = 0; o < out; ++o) {
        const double* wr = W.val().data() + static_cast<std::size_t>(o) * in;
        double acc = b.defined() ? b.val()[o] : 0.0;
        for (int l = 0; l < in; ++l) acc += xr[l] * wr[l];
        yr[o] = acc;
      }
    }
  });
  std::vector<Var> parents = {x, W};
  if (b.defined()) parents.push_back(b);
  return detail::make_op({rows, out}, std::move(y), std::move(parents),
                         [rows, in, out](VarNode& node) {
    VarNode* px = node.parents[0].node();
    VarNode* pw = node.parents[1].node();
    VarNode* pb = node.parents.size() > 2 ? node.parents[2].node() : nullptr;
    if (px->requires_grad) {
      auto& gx = px->grad_ref();
      parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
          const double* gr = node.grad.data() + i * out;
          double* gxr = gx.data() + i * in;
          for (int o = 0; o < out; ++o) {
            double g = gr[o];
            const double* wr = pw->val.data() + static_cast<std::size_t>(o) * in;
            for (int l = 0; l < in; ++l) gxr[l] += g * wr[l];
          }
        }
      });
    }
    if (pw->requires_grad) {
      auto& gw = pw->grad_ref();
      for (int i = 0; i < rows; ++i) {
        const double* gr = node.grad.data() + static_cast<std::size_t>(i) * out;
        const double* xr = px->val.data() + static_cast<std::size_t>(i) * in;
        for (int o = 0; o < out; ++o) {
          double g = gr[o];
          double* gwr = gw.data() + static_cast<std::size_t>(o) * in;
          for (int l = 0; l < in; ++l) gwr[l] += g * xr[l];
        }
      }
    }
    if (pb && pb->requires_grad) {
      auto& gb = pb->grad_ref();
      for (int i = 0; i < rows; ++i)
        for (int o = 0; o < out; ++o) gb[o] += node.grad[i * out + o];
    }
  });
}

inline Var transpose2d(const Var& a) {
  CVL_CHECK(a.shape().size() == 2, "transpose2d: rank must be 2");
  int m = a.shape()[0], n = a.shape()[1];
  std::vector<double> v(a.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) v[j * m + i] = a.val()[i * n + j];
  return detail::make_op({n, m}, std::move(v), {a}, [m, n](VarNode& node) {
    VarNode* pa = node.parents[0].node();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) detail::accum(pa, i * n + j, node.grad[j * m + i]);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, Shape shape) {
  CVL_CHECK(numel(shape) == a.size(), "reshape: size mismatch");
  std::vector<double> v = a.val();
  return detail::make_op(std::move(shape), std::move(v), {a}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::size_t i = 0; i < n.grad.size(); ++i) detail::accum(pa, i, n.grad[i]);
  });
}

// out[i] = x[map[i]] (map[i] == -1 yields 0). Backward scatter-adds. This one
// op covers slicing, tiling, gathering and reordering.
inline Var index_map(const Var& x, Shape out_shape, std::vector<std::int64_t> map) {
  CVL_CHECK(numel(out_shape) == static_cast<std::int64_t>(map.size()), "index_map: map size mismatch");
  std::vector<double> v(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) v[i] = map[i] >= 0 ? x.val()[map[i]] : 0.0;
  return detail::make_op(std::move(out_shape), std::move(v), {x},
                         [map = std::move(map)](VarNode& n) {
    VarNode* px = n.parents[0].node();
    if (!px->requires_grad) return;
    auto& gx = px->grad_ref();
    for (std::size_t i = 0; i < map.size(); ++i)
      if (map[i] >= 0) gx[map[i]] += n.grad[i];
  });
}

inline Var slice_cols(const Var& x, int c0, int c1) {
  CVL_CHECK(x.shape().size() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.shape()[1], "slice_cols: bad range");
  int rows = x.shape()[0], cols = x.shape()[1], w = c1 - c0;
  std::vector<std::int64_t> map(static_cast<std::size_t>(rows) * w);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < w; ++j) map[i * w + j] = static_cast<std::int64_t>(i) * cols + c0 + j;
  return index_map(x, {rows, w}, std::move(map));
}

inline Var slice_rows(const Var& x, int r0, int r1) {
  CVL_CHECK(x.shape().size() == 2 && 0 <= r0 && r0 < r1 && r1 <= x.shape()[0], "slice_rows: bad range");
  int cols = x.shape()[1];
  std::vector<std::int64_t> map(static_cast<std::size_t>(r1 - r0) * cols);
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < cols; ++j) map[(i - r0) * cols + j] = static_cast<std::int64_t>(i) * cols + j;
  return index_map(x, {r1 - r0, cols}, std::move(map));
}

inline Var select_rows(const Var& x, const std::vector<int>& rows) {
  CVL_CHECK(x.shape().size() == 2, "select_rows: rank must be 2");
  int cols = x.shape()[1];
  std::vector<std::int64_t> map(rows.size() * cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CVL_CHECK(rows[i] >= 0 && rows[i] < x.shape()[0], "select_rows: index out of range");
    for (int j = 0; j < cols; ++j) map[i * cols + j] = static_cast<std::int64_t>(rows[i]) * cols + j;
  }
  return index_map(x, {static_cast<int>(rows.size()), cols}, std::move(map));
}

inline Var concat_cols(const std::vector<Var>& xs) {
  CVL_CHECK(!xs.empty(), "concat_cols: empty input");
  int rows = xs[0].shape()[0];
  int total = 0;
  for (const auto& x : xs) {
    CVL_CHECK(x.shape().size() == 2 && x.shape()[0] == rows, "concat_cols: row mismatch");
    total += x.shape()[1];
  }
  std::vector<double> v(static_cast<std::size_t>(rows) * total);
  std::vector<int> widths;
  int off = 0;
  for (const auto& x : xs) {
    int w = x.shape()[1];
    widths.push_back(w);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j) v[i * total + off + j] = x.val()[i * w + j];
    off += w;
  }
  return detail::make_op({rows, total}, std::move(v), xs,
                         [rows, total, widths = std::move(widths)](VarNode& n) {
    int off = 0;
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      int w = widths[p];
      VarNode* px = n.parents[p].node();
      if (px->requires_grad) {
        auto& gx = px->grad_ref();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < w; ++j) gx[i * w + j] += n.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& xs) {
  CVL_CHECK(!xs.empty(), "concat_rows: empty input");
  int cols = xs[0].shape()[1];
  int total = 0;
  for (const auto& x : xs) {
    CVL_CHECK(x.shape().size() == 2 && x.shape()[1] == cols, "concat_rows: col mismatch");
    total += x.shape()[0];
  }
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(total) * cols);
  for (const auto& x : xs) v.insert(v.end(), x.val().begin(), x.val().end());
  std::vector<int> heights;
  for (const auto& x : xs) heights.push_back(x.shape()[0]);
  return detail::make_op({total, cols}, std::move(v), xs,
                         [cols, heights = std::move(heights)](VarNode& n) {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      VarNode* px = n.parents[p].node();
      std::int64_t cnt = static_cast<std::int64_t>(heights[p]) * cols;
      if (px->requires_grad) {
        auto& gx = px->grad_ref();
        for (std::int64_t i = 0; i < cnt; ++i) gx[i] += n.grad[off + i];
      }
      off += cnt;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (double x : a.val()) s += x;
  return detail::make_op({1}, {s}, {a}, [](VarNode& n) {
    VarNode* pa = n.parents[0].node();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(pa->val.size()); ++i)
      detail::accum(pa, i, n.grad[0]);
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

inline Var softmax_rows(const Var& x) {
  CVL_CHECK(x.shape().size() == 2, "softmax_rows: rank must be 2");
  int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> v(x.size());
  for (int i = 0; i < rows; ++i) {
    const double* xr = x.val().data() + static_cast<std::size_t>(i) * cols;
    double* vr = v.data() + static_cast<std::size_t>(i) * cols;
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      vr[j] = std::exp(xr[j] - mx);
      s += vr[j];
    }
    for (int j = 0; j < cols; ++j) vr[j] /= s;
  }
  return detail::make_op(x.shape(), std::move(v), {x}, [rows, cols](VarNode& n) {
    VarNode* px = n.parents[0].node();
    if (!px->requires_grad) return;
    auto& gx = px->grad_ref();
    for (int i = 0; i < rows; ++i) {
      const double* y = n.val.data() + static_cast<std::size_t>(i) * cols;
      const double* g = n.grad.data() + static_cast<std::size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += g[j] * y[j];
      for (int j = 0; j < cols; ++j) gx[i * cols + j] += y[j] * (g[j] - dot);
    }
  });
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  CVL_CHECK(x.shape().size() == 2 && gamma.size() == x.shape()[1] && beta.size() == x.shape()[1],
            "layer_norm: shape mismatch");
  int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> v(x.size());
  std::vector<double> inv_std(rows), mean(rows);
  for (int i = 0; i < rows; ++i) {
    const double* xr = x.val().data() + static_cast<std::size_t>(i) * cols;
    double m = 0.0;
    for (int j = 0; j < cols; ++j) m += xr[j];
    m /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) var += (xr[j] - m) * (xr[j] - m);
    var /= cols;
    double is = 1.0 / std::sqrt(var + eps);
    mean[i] = m;
    inv_std[i] = is;
    for (int j = 0; j < cols; ++j)
      v[i * cols + j] = (xr[j] - m) * is * gamma.val()[j] + beta.val()[j];
  }
  return detail::make_op(x.shape(), std::move(v), {x, gamma, beta},
                         [rows, cols, mean = std::move(mean), inv_std = std::move(inv_std)](VarNode& n) {
    VarNode* px = n.parents[0].node();
    VarNode* pg = n.parents[1].node();
    VarNode* pb = n.parents[2].node();
    for (int i = 0; i < rows; ++i) {
      const double* xr = px->val.data() + static_cast<std::size_t>(i) * cols;
      const double* g = n.grad.data() + static_cast<std::size_t>(i) * cols;
      double is = inv_std[i], m = mean[i];
      double sum_gg = 0.0, sum_ggx = 0.0;
      for (int j = 0; j < cols; ++j) {
        double xhat = (xr[j] - m) * is;
        double gg = g[j] * pg->val[j];
        sum_gg += gg;
        sum_ggx += gg * xhat;
        detail::accum(pg, j, g[j] * xhat);
        detail::accum(pb, j, g[j]);
      }
      if (px->requires_grad) {
        auto& gx = px->grad_ref();
        for (int j = 0; j < cols; ++j) {
          double xhat = (xr[j] - m) * is;
          double gg = g[j] * pg->val[j];
          gx[i * cols + j] += is * (gg - (sum_gg + xhat * sum_ggx) / cols);
        }
      }
    }
  });
}

inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5) {
  CVL_CHECK(x.shape().size() == 4, "group_norm: expected (B,C,H,W)");
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  CVL_CHECK(C % groups == 0 && gamma.size() == C && beta.size() == C, "group_norm: bad channels");
  int cpg = C / groups;
  std::int64_t gsz = static_cast<std::int64_t>(cpg) * H * W;
  std::vector<double> v(x.size());
  std::vector<double> mean(static_cast<std::size_t>(B) * groups), inv_std(static_cast<std::size_t>(B) * groups);
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const double* base = x.val().data() + ((static_cast<std::int64_t>(b) * C + g * cpg) * H * W);
      double m = 0.0;
      for (std::int64_t i = 0; i < gsz; ++i) m += base[i];
      m /= static_cast<double>(gsz);
      double var = 0.0;
      for (std::int64_t i = 0; i < gsz; ++i) var += (base[i] - m) * (base[i] - m);
      var /= static_cast<double>(gsz);
      double is = 1.0 / std::sqrt(var + eps);
      mean[b * groups + g] = m;
      inv_std[b * groups + g] = is;
      double* out = v.data() + ((static_cast<std::int64_t>(b) * C + g * cpg) * H * W);
      for (int c = 0; c < cpg; ++c) {
        double ga = gamma.val()[g * cpg + c], be = beta.val()[g * cpg + c];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
          out[c * H * W + i] = (base[c * H * W + i] - m) * is * ga + be;
      }
    }
  return detail::make_op(x.shape(), std::move(v), {x, gamma, beta},
                         [B, C, H, W, groups, cpg, gsz, mean = std::move(mean),
                          inv_std = std::move(inv_std)](VarNode& n) {
    VarNode* px = n.parents[0].node();
    VarNode* pg = n.parents[1].node();
    VarNode* pb = n.parents[2].node();
    std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < groups; ++g) {
        std::int64_t off = (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
        const double* xr = px->val.data() + off;
        const double* gr = n.grad.data() + off;
        double m = mean[b * groups + g], is = inv_std[b * groups + g];
        double sum_gg = 0.0, sum_ggx = 0.0;
        for (int c = 0; c < cpg; ++c) {
          double ga = pg->val[g * cpg + c];
          for (std::int64_t i = 0; i < hw; ++i) {
            double xhat = (xr[c * hw + i] - m) * is;
            double gg = gr[c * hw + i] * ga;
            sum_gg += gg;
            sum_ggx += gg * xhat;
            detail::accum(pg, g * cpg + c, gr[c * hw + i] * xhat);
            detail::accum(pb, g * cpg + c, gr[c * hw + i]);
          }
        }
        if (px->requires_grad) {
          auto& gx = px->grad_ref();
          double inv_n = 1.0 / static_cast<double>(gsz);
          for (int c = 0; c < cpg; ++c) {
            double ga = pg->val[g * cpg + c];
            for (std::int64_t i = 0; i < hw; ++i) {
              double xhat = (xr[c * hw + i] - m) * is;
              double gg = gr[c * hw + i] * ga;
              gx[off + c * hw + i] += is * (gg - (sum_gg + xhat * sum_ggx) * inv_n);
            }
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  CVL_CHECK(x.shape().size() == 4 && w.shape().size() == 4, "conv2d: expects 4D tensors");
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int O = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  CVL_CHECK(w.shape()[1] == C, "conv2d: channel mismatch");
  CVL_CHECK(!b.defined() || b.size() == O, "conv2d: bias size mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  CVL_CHECK(Ho > 0 && Wo > 0, "conv2d: empty output");
  std::vector<double> y(static_cast<std::size_t>(B) * O * Ho * Wo, 0.0);

  auto ox_range = [&](int kj, int* lo, int* hi) {
    // valid ox such that 0 <= ox*stride + kj - pad < W
    int lo_v = 0;
    while (lo_v * stride + kj - pad < 0) ++lo_v;
    int hi_v = Wo - 1;
    while (hi_v >= 0 && hi_v * stride + kj - pad >= W) --hi_v;
    *lo = lo_v;
    *hi = hi_v;
  };

  parallel_for(static_cast<std::int64_t>(B) * O, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t bo = lo; bo < hi; ++bo) {
      int bi = static_cast<int>(bo / O), o = static_cast<int>(bo % O);
      double* out = y.data() + bo * Ho * Wo;
      if (b.defined()) {
        double bias = b.val()[o];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) out[i] = bias;
      }
      for (int c = 0; c < C; ++c) {
        const double* xc = x.val().data() + (static_cast<std::int64_t>(bi) * C + c) * H * W;
        const double* wc = w.val().data() + (static_cast<std::int64_t>(o) * C + c) * kh * kw;
        for (int ki = 0; ki < kh; ++ki)
          for (int kj = 0; kj < kw; ++kj) {
            double wv = wc[ki * kw + kj];
            int xlo, xhi;
            ox_range(kj, &xlo, &xhi);
            for (int oy = 0; oy < Ho; ++oy) {
              int iy = oy * stride + ki - pad;
              if (iy < 0 || iy >= H) continue;
              const double* xr = xc + static_cast<std::int64_t>(iy) * W;
              double* orow = out + static_cast<std::int64_t>(oy) * Wo;
              int base = kj - pad;
              for (int ox = xlo; ox <= xhi; ++ox) orow[ox] += wv * xr[ox * stride + base];
            }
          }
      }
    }
  });

  std::vector<Var> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return detail::make_op({B, O, Ho, Wo}, std::move(y), std::move(parents),
                         [B, C, H, W, O, kh, kw, stride, pad, Ho, Wo](VarNode& node) {
    VarNode* px = node.parents[0].node();
    VarNode* pw = node.parents[1].node();
    VarNode* pb = node.parents.size() > 2 ? node.parents[2].node() : nullptr;
    auto ox_range = [&](int kj, int* lo, int* hi) {
      int lo_v = 0;
      while (lo_v * stride + kj - pad < 0) ++lo_v;
      int hi_v = Wo - 1;
      while (hi_v >= 0 && hi_v * stride + kj - pad >= W) --hi_v;
      *lo = lo_v;
      *hi = hi_v;
    };
    if (px->requires_grad) {
      auto& gx = px->grad_ref();
      parallel_for(B, [&](std::int64_t blo, std::int64_t bhi) {
        for (std::int64_t bi = blo; bi < bhi; ++bi)
          for (int o = 0; o < O; ++o) {
            const double* g = node.grad.data() + (bi * O + o) * Ho * Wo;
            for (int c = 0; c < C; ++c) {
              double* gxc = gx.data() + (bi * C + c) * H * W;
              const double* wc = pw->val.data() + (static_cast<std::int64_t>(o) * C + c) * kh * kw;
              for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                  double wv = wc[ki * kw + kj];
                  int xlo, xhi;
                  ox_range(kj, &xlo, &xhi);
                  for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= H) continue;
                    double* gxr = gxc + static_cast<std::int64_t>(iy) * W;
                    const double* grow = g + static_cast<std::int64_t>(oy) * Wo;
                    int base = kj - pad;
                    for (int ox = xlo; ox <= xhi; ++ox) gxr[ox * stride + base] += wv * grow[ox];
                  }
                }
            }
          }
      });
    }
    if (pw->requires_grad) {
      auto& gw = pw->grad_ref();
      parallel_for(O, [&](std::int64_t olo, std::int64_t ohi) {
        for (std::int64_t o = olo; o < ohi; ++o)
          for (int bi = 0; bi < B; ++bi) {
            const double* g = node.grad.data() + (static_cast<std::int64_t>(bi) * O + o) * Ho * Wo;
            for (int c = 0; c < C; ++c) {
              const double* xc = px->val.data() + (static_cast<std::int64_t>(bi) * C + c) * H * W;
              double* gwc = gw.data() + (o * C + c) * kh * kw;
              for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                  int xlo, xhi;
                  ox_range(kj, &xlo, &xhi);
                  double acc = 0.0;
                  for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= H) continue;
                    const double* xr = xc + static_cast<std::int64_t>(iy) * W;
                    const double* grow = g + static_cast<std::int64_t>(oy) * Wo;
                    int base = kj - pad;
                    for (int ox = xlo; ox <= xhi; ++ox) acc += grow[ox] * xr[ox * stride + base];
                  }
                  gwc[ki * kw + kj] += acc;
                }
            }
          }
      });
    }
    if (pb && pb->requires_grad) {
      auto& gb = pb->grad_ref();
      for (int bi = 0; bi < B; ++bi)
        for (int o = 0; o < O; ++o) {
          const double* g = node.grad.data() + (static_cast<std::int64_t>(bi) * O + o) * Ho * Wo;
          double acc = 0.0;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) acc += g[i];
          gb[o] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Bilinear sampling (shared by deformable attention and context features)
// ---------------------------------------------------------------------------

namespace detail {

struct Taps {
  int x0, x1, y0, y1;
  double tx, ty;
};

// Continuous normalized (u, v) in [0,1] maps to the grid so that cell centers
// sit at (i + 0.5) / extent. Out-of-range taps clamp to the border.
inline Taps bilinear_taps(double u, double v, int W, int H) {
  double gx = u * W - 0.5, gy = v * H - 0.5;
  double fx = std::floor(gx), fy = std::floor(gy);
  Taps t;
  t.tx = gx - fx;
  t.ty = gy - fy;
  int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  auto cl = [](int a, int hi) { return a < 0 ? 0 : (a > hi ? hi : a); };
  t.x0 = cl(x0, W - 1);
  t.x1 = cl(x0 + 1, W - 1);
  t.y0 = cl(y0, H - 1);
  t.y1 = cl(y0 + 1, H - 1);
  return t;
}

}  // namespace detail

// Multi-scale deformable sampling.
//   values:    one Var per level, each (B, D, H_l, W_l); D = heads * head_dim
//   locs:      (R, M*L*J*2) normalized coords, layout [m][l][j][uv]
//   weights:   (R, M*L*J) attention weights (normalization is the caller's job)
//   row_batch: batch item sampled by each output row
// Output: (R, D), per head the weight-combined bilinear samples of its channel
// slice across levels and points.
inline Var ms_deform_sample(const std::vector<Var>& values, const Var& locs, const Var& weights,
                            std::vector<int> row_batch, int heads) {
  CVL_CHECK(!values.empty(), "ms_deform_sample: no levels");
  int L = static_cast<int>(values.size());
  int D = values[0].shape()[1];
  CVL_CHECK(D % heads == 0, "ms_deform_sample: heads must divide channels");
  int dh = D / heads;
  int R = locs.shape()[0];
  CVL_CHECK(static_cast<int>(row_batch.size()) == R, "ms_deform_sample: row_batch size");
  CVL_CHECK(locs.shape()[1] % (2 * heads * L) == 0, "ms_deform_sample: locs layout");
  int J = locs.shape()[1] / (2 * heads * L);
  CVL_CHECK(weights.shape()[0] == R && weights.shape()[1] == heads * L * J,
            "ms_deform_sample: weights shape");

  std::vector<int> Hs(L), Ws(L);
  for (int l = 0; l < L; ++l) {
    CVL_CHECK(values[l].shape().size() == 4 && values[l].shape()[1] == D,
              "ms_deform_sample: level shape");
    Hs[l] = values[l].shape()[2];
    Ws[l] = values[l].shape()[3];
  }

  std::vector<double> out(static_cast<std::size_t>(R) * D, 0.0);
  const int stride_m = L * J;
  parallel_for(R, [&](std::int64_t rlo, std::int64_t rhi) {
    for (std::int64_t r = rlo; r < rhi; ++r) {
      int b = row_batch[r];
      const double* loc = locs.val().data() + r * (static_cast<std::int64_t>(heads) * L * J * 2);
      const double* wt = weights.val().data() + r * (static_cast<std::int64_t>(heads) * L * J);
      double* orow = out.data() + r * D;
      for (int m = 0; m < heads; ++m)
        for (int l = 0; l < L; ++l) {
          int H = Hs[l], W = Ws[l];
          std::int64_t plane = static_cast<std::int64_t>(H) * W;
          const double* vbase = values[l].val().data() +
                                (static_cast<std::int64_t>(b) * D + m * dh) * plane;
          for (int j = 0; j < J; ++j) {
            int idx = (m * L + l) * J + j;
            double A = wt[idx];
            double u = loc[idx * 2], v = loc[idx * 2 + 1];
            auto t = detail::bilinear_taps(u, v, W, H);
            double w00 = (1 - t.tx) * (1 - t.ty), w01 = t.tx * (1 - t.ty);
            double w10 = (1 - t.tx) * t.ty, w11 = t.tx * t.ty;
            for (int c = 0; c < dh; ++c) {
              const double* pl = vbase + c * plane;
              double s = w00 * pl[t.y0 * W + t.x0] + w01 * pl[t.y0 * W + t.x1] +
                         w10 * pl[t.y1 * W + t.x0] + w11 * pl[t.y1 * W + t.x1];
              orow[m * dh + c] += A * s;
            }
          }
        }
    }
  });

  std::vector<Var> parents = values;
  parents.push_back(locs);
  parents.push_back(weights);
  return detail::make_op({R, D}, std::move(out), std::move(parents),
                         [L, D, dh, heads, J, R, Hs, Ws, row_batch = std::move(row_batch),
                          stride_m](VarNode& node) {
    (void)stride_m;
    std::vector<VarNode*> pv(L);
    for (int l = 0; l < L; ++l) pv[l] = node.parents[l].node();
    VarNode* plocs = node.parents[L].node();
    VarNode* pwts = node.parents[L + 1].node();
    const double* locv = plocs->val.data();
    const double* wtv = pwts->val.data();
    for (int l = 0; l < L; ++l)
      if (pv[l]->requires_grad) pv[l]->grad_ref();
    if (plocs->requires_grad) plocs->grad_ref();
    if (pwts->requires_grad) pwts->grad_ref();

    for (std::int64_t r = 0; r < R; ++r) {
      int b = row_batch[r];
      const double* loc = locv + r * (static_cast<std::int64_t>(heads) * L * J * 2);
      const double* wt = wtv + r * (static_cast<std::int64_t>(heads) * L * J);
      const double* grow = node.grad.data() + r * D;
      for (int m = 0; m < heads; ++m)
        for (int l = 0; l < L; ++l) {
          int H = Hs[l], W = Ws[l];
          std::int64_t plane = static_cast<std::int64_t>(H) * W;
          const double* vbase = pv[l]->val.data() + (static_cast<std::int64_t>(b) * D + m * dh) * plane;
          double* gvbase = pv[l]->requires_grad
                               ? pv[l]->grad.data() + (static_cast<std::int64_t>(b) * D + m * dh) * plane
                               : nullptr;
          for (int j = 0; j < J; ++j) {
            int idx = (m * L + l) * J + j;
            double A = wt[idx];
            double u = loc[idx * 2], v = loc[idx * 2 + 1];
            auto t = detail::bilinear_taps(u, v, W, H);
            double w00 = (1 - t.tx) * (1 - t.ty), w01 = t.tx * (1 - t.ty);
            double w10 = (1 - t.tx) * t.ty, w11 = t.tx * t.ty;
            double gw = 0.0, gu = 0.0, gv_ = 0.0;
            for (int c = 0; c < dh; ++c) {
              const double* pl = vbase + c * plane;
              double v00 = pl[t.y0 * W + t.x0], v01 = pl[t.y0 * W + t.x1];
              double v10 = pl[t.y1 * W + t.x0], v11 = pl[t.y1 * W + t.x1];
              double g = grow[m * dh + c];
              double sampled = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
              gw += g * sampled;
              double dtx = (1 - t.ty) * (v01 - v00) + t.ty * (v11 - v10);
              double dty = (1 - t.tx) * (v10 - v00) + t.tx * (v11 - v01);
              gu += g * A * dtx * W;
              gv_ += g * A * dty * H;
              if (gvbase) {
                double* gp = gvbase + c * plane;
                gp[t.y0 * W + t.x0] += g * A * w00;
                gp[t.y0 * W + t.x1] += g * A * w01;
                gp[t.y1 * W + t.x0] += g * A * w10;
                gp[t.y1 * W + t.x1] += g * A * w11;
              }
            }
            if (pwts->requires_grad) pwts->grad[r * (heads * L * J) + idx] += gw;
            if (plocs->requires_grad) {
              plocs->grad[r * (heads * L * J * 2) + idx * 2] += gu;
              plocs->grad[r * (heads * L * J * 2) + idx * 2 + 1] += gv_;
            }
          }
        }
    }
  });
}

// Visibility-masked average of multi-scale features at projected points:
//   out[q] = sum_l sum_n sigma[q,n] * X_l(uv[q,n]) / (sum_l sum_n sigma[q,n] + eps)
//   values: per level (B, D, H_l, W_l); uv: (Q*N, 2) normalized; sigma: Q*N flags
inline Var context_feature(const std::vector<Var>& values, const Var& uv,
                           std::vector<double> sigma, int queries, int pts, int batch_index,
                           double eps) {
  int L = static_cast<int>(values.size());
  int D = values[0].shape()[1];
  CVL_CHECK(uv.shape()[0] == queries * pts && uv.shape()[1] == 2, "context_feature: uv shape");
  CVL_CHECK(static_cast<int>(sigma.size()) == queries * pts, "context_feature: sigma size");

  std::vector<int> Hs(L), Ws(L);
  for (int l = 0; l < L; ++l) {
    Hs[l] = values[l].shape()[2];
    Ws[l] = values[l].shape()[3];
  }
  std::vector<double> denom(queries);
  for (int q = 0; q < queries; ++q) {
    double s = 0.0;
    for (int n = 0; n < pts; ++n) s += sigma[q * pts + n];
    denom[q] = s * L + eps;
  }
  std::vector<double> out(static_cast<std::size_t>(queries) * D, 0.0);
  for (int q = 0; q < queries; ++q) {
    double* orow = out.data() + static_cast<std::size_t>(q) * D;
    for (int l = 0; l < L; ++l) {
      int H = Hs[l], W = Ws[l];
      std::int64_t plane = static_cast<std::int64_t>(H) * W;
      const double* vbase = values[l].val().data() + static_cast<std::int64_t>(batch_index) * D * plane;
      for (int n = 0; n < pts; ++n) {
        double sg = sigma[q * pts + n];
        if (sg == 0.0) continue;
        double u = uv.val()[(q * pts + n) * 2], v = uv.val()[(q * pts + n) * 2 + 1];
        auto t = detail::bilinear_taps(u, v, W, H);
        double w00 = (1 - t.tx) * (1 - t.ty), w01 = t.tx * (1 - t.ty);
        double w10 = (1 - t.tx) * t.ty, w11 = t.tx * t.ty;
        for (int c = 0; c < D; ++c) {
          const double* pl = vbase + c * plane;
          double s = w00 * pl[t.y0 * W + t.x0] + w01 * pl[t.y0 * W + t.x1] +
                     w10 * pl[t.y1 * W + t.x0] + w11 * pl[t.y1 * W + t.x1];
          orow[c] += sg * s;
        }
      }
    }
    for (int c = 0; c < D; ++c) orow[c] /= denom[q];
  }

  std::vector<Var> parents = values;
  parents.push_back(uv);
  return detail::make_op({queries, D}, std::move(out), std::move(parents),
                         [L, D, queries, pts, batch_index, Hs, Ws, sigma = std::move(sigma),
                          denom = std::move(denom)](VarNode& node) {
    std::vector<VarNode*> pv(L);
    for (int l = 0; l < L; ++l) pv[l] = node.parents[l].node();
    VarNode* puv = node.parents[L].node();
    for (int l = 0; l < L; ++l)
      if (pv[l]->requires_grad) pv[l]->grad_ref();
    if (puv->requires_grad) puv->grad_ref();
    for (int q = 0; q < queries; ++q) {
      const double* grow = node.grad.data() + static_cast<std::size_t>(q) * D;
      double inv_d = 1.0 / denom[q];
      for (int l = 0; l < L; ++l) {
        int H = Hs[l], W = Ws[l];
        std::int64_t plane = static_cast<std::int64_t>(H) * W;
        const double* vbase = pv[l]->val.data() + static_cast<std::int64_t>(batch_index) * D * plane;
        double* gvbase = pv[l]->requires_grad
                             ? pv[l]->grad.data() + static_cast<std::int64_t>(batch_index) * D * plane
                             : nullptr;
        for (int n = 0; n < pts; ++n) {
          double sg = sigma[q * pts + n];
          if (sg == 0.0) continue;
          double u = puv->val[(q * pts + n) * 2], v = puv->val[(q * pts + n) * 2 + 1];
          auto t = detail::bilinear_taps(u, v, W, H);
          double w00 = (1 - t.tx) * (1 - t.ty), w01 = t.tx * (1 - t.ty);
          double w10 = (1 - t.tx) * t.ty, w11 = t.tx * t.ty;
          double gu = 0.0, gv = 0.0;
          for (int c = 0; c < D; ++c) {
            const double* pl = vbase + c * plane;
            double v00 = pl[t.y0 * W + t.x0], v01 = pl[t.y0 * W + t.x1];
            double v10 = pl[t.y1 * W + t.x0], v11 = pl[t.y1 * W + t.x1];
            double g = grow[c] * sg * inv_d;
            double dtx = (1 - t.ty) * (v01 - v00) + t.ty * (v11 - v10);
            double dty = (1 - t.tx) * (v10 - v00) + t.tx * (v11 - v01);
            gu += g * dtx * W;
            gv += g * dty * H;
            if (gvbase) {
              double* gp = gvbase + c * plane;
              gp[t.y0 * W + t.x0] += g * w00;
              gp[t.y0 * W + t.x1] += g * w01;
              gp[t.y1 * W + t.x0] += g * w10;
              gp[t.y1 * W + t.x1] += g * w11;
            }
          }
          if (puv->requires_grad) {
            puv->grad[(q * pts + n) * 2] += gu;
            puv->grad[(q * pts + n) * 2 + 1] += gv;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Binary cross-entropy on logits with the probability clamped to
// [clamp_p, 1 - clamp_p]. Saturated elements get zero gradient.
inline Var bce_with_logits(const Var& logits, std::vector<double> targets, bool mean_reduce,
                           double clamp_p = 1e-7) {
  CVL_CHECK(logits.size() == static_cast<std::int64_t>(targets.size()), "bce: size mismatch");
  std::int64_t n = logits.size();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double p = 1.0 / (1.0 + std::exp(-logits.val()[i]));
    p = std::min(1.0 - clamp_p, std::max(clamp_p, p));
    acc += -(targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p));
  }
  double denom = mean_reduce ? static_cast<double>(n) : 1.0;
  return detail::make_op({1}, {acc / denom}, {logits},
                         [targets = std::move(targets), denom, clamp_p](VarNode& node) {
    VarNode* pl = node.parents[0].node();
    if (!pl->requires_grad) return;
    auto& g = pl->grad_ref();
    double go = node.grad[0] / denom;
    for (std::size_t i = 0; i < pl->val.size(); ++i) {
      double p = 1.0 / (1.0 + std::exp(-pl->val[i]));
      if (p <= clamp_p || p >= 1.0 - clamp_p) continue;
      g[i] += go * (p - targets[i]);
    }
  });
}

}  // namespace curvelab
