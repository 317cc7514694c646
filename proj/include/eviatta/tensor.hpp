#pragma once

// Dense row-major tensors with a reverse-mode differentiation graph.
//
// Every op returns a fresh Tensor. When at least one input requires a
// gradient, the result keeps its parents and a backward closure; otherwise
// no graph is recorded. backward() linearises the recorded graph into a
// Tape (parents before children) and replays it in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace eviatta {

using Real = double;
using Shape = std::vector<std::size_t>;

/// Clamp applied inside every log of a probability.
inline constexpr Real kLogEpsilon = 1e-12;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Real{0});
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> d(shape_numel(shape), Real{0});
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    std::vector<Real> d(shape_numel(shape), value);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const Real> data() const { return node_->data; }
  /// Direct write access; only meaningful for leaves (parameters, buffers).
  std::span<Real> mutable_data() { return node_->data; }
  const std::vector<Real>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool is_leaf() const { return node_->parents.empty(); }
  const char* op_name() const { return node_->op; }

  Real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  Real operator[](std::size_t i) const { return node_->data[i]; }

  /// Deep copy of data only; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), node_->data, requires_grad);
  }

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

/// Topologically ordered view of a recorded graph rooted at one output.
class Tape {
 public:
  struct Entry {
    detail::Node* node;
    std::vector<std::size_t> parent_indices;
  };

  static Tape record(const Tensor& root) {
    Tape tape;
    std::unordered_map<detail::Node*, std::size_t> index;
    // iterative post-order DFS
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    std::unordered_map<detail::Node*, bool> visited;
    stack.emplace_back(root.node().get(), 0);
    visited[root.node().get()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && !visited[p]) {
          visited[p] = true;
          stack.emplace_back(p, 0);
        }
        continue;
      }
      Entry e{node, {}};
      for (const auto& p : node->parents) {
        auto it = index.find(p.get());
        if (it != index.end()) e.parent_indices.push_back(it->second);
      }
      index[node] = tape.entries_.size();
      tape.entries_.push_back(std::move(e));
      stack.pop_back();
    }
    return tape;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  bool is_topological() const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      for (auto p : entries_[i].parent_indices)
        if (p >= i) return false;
    return true;
  }

  /// Replays the tape in reverse. Returns the number of nodes visited.
  std::size_t run_backward() const {
    std::size_t visited = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      detail::Node* n = it->node;
      ++visited;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    return visited;
  }

 private:
  std::vector<Entry> entries_;
};

/// Populates gradients of every requires-grad leaf reachable from `loss`.
/// Leaf gradients accumulate across calls.
inline std::size_t backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return 0;
  Tape tape = Tape::record(loss);
  // interior grads are scratch space for this pass only
  for (const auto& e : tape.entries())
    if (!e.node->parents.empty()) e.node->grad.clear();
  loss.node()->grad_buffer()[0] += 1.0;
  return tape.run_backward();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// While alive, ops on this thread record no graph (inference forwards).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

namespace detail {

inline void check_finite(const std::vector<Real>& v, const char* op) {
  for (Real x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

inline Tensor make_result(const char* op, Shape shape, std::vector<Real> data,
                          std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
  check_finite(data, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool any = grad_mode() &&
             std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& o) {
    for (auto& p : o.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& o) {
    if (o.parents[0]->requires_grad) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.data[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return detail::make_result("div", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
    }
  });
}

inline Tensor scale(const Tensor& a, Real s) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result("scale", a.shape(), std::move(out), {a.node()}, [s](detail::Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

/// Adds a vector along the last axis: x[..., k] + b[k].
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.rank() == 0 || x.shape().back() != b.numel())
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t k = b.numel();
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % k];
  return detail::make_result("add_bias", x.shape(), std::move(out), {x.node(), b.node()}, [k](detail::Node& o) {
    if (o.parents[0]->requires_grad) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % k] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Tensor exp(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  return detail::make_result("exp", a.shape(), std::move(out), {a.node()}, [](detail::Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.data[i];
  });
}

/// Natural log with the argument clamped at kLogEpsilon.
inline Tensor log(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a[i], kLogEpsilon));
  return detail::make_result("log", a.shape(), std::move(out), {a.node()}, [](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.data[i] > kLogEpsilon) g[i] += o.grad[i] / p.data[i];
  });
}

inline Tensor softplus(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    Real x = a[i];
    out[i] = x > 30 ? x : std::log1p(std::exp(x));
  }
  return detail::make_result("softplus", a.shape(), std::move(out), {a.node()}, [](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / (1.0 + std::exp(-p.data[i]));
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0 ? a[i] : 0;
  return detail::make_result("relu", a.shape(), std::move(out), {a.node()}, [](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.data[i] > 0) g[i] += o.grad[i];
  });
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr Real c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr Real k = 0.044715;
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    Real x = a[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  return detail::make_result("gelu", a.shape(), std::move(out), {a.node()}, [](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      Real x = p.data[i];
      Real t = std::tanh(c * (x + k * x * x * x));
      Real dt = (1 - t * t) * c * (1 + 3 * k * x * x);
      g[i] += o.grad[i] * (0.5 * (1 + t) + 0.5 * x * dt);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result("reshape", std::move(shape), a.values(), {a.node()}, [](detail::Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return detail::make_result("transpose", {c, r}, std::move(out), {a.node()}, [r, c](detail::Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

/// Stop-gradient: same values, never propagates to its input.
inline Tensor detach(const Tensor& a) {
  auto n = std::make_shared<detail::Node>();
  n->shape = a.shape();
  n->data = a.values();
  n->op = "detach";
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
// c[m×n] += a[m×k] · b[k×n]
inline void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      if (av == 0) continue;
      const Real* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n, 0);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result("matmul", {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](detail::Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();  // dA = dC · Bᵀ
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Real s = 0;
          const Real* gc = o.grad.data() + i * n;
          const Real* bp = pb.data.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) s += gc[j] * bp[j];
          g[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();  // dB = Aᵀ · dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real av = pa.data[i * k + p];
          if (av == 0) continue;
          const Real* gc = o.grad.data() + i * n;
          Real* gb = g.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += av * gc[j];
        }
    }
  });
}

/// 2-D convolution on an H×W×Cin map with a kh×kw×Cin×Cout kernel, zero
/// padding of kh/2 and the given stride. Output is Ho×Wo×Cout.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1 || w.dim(2) != x.dim(2) || w.dim(3) != b.numel() ||
      stride == 0)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()) + " bias " +
                     shape_str(b.shape()));
  const std::size_t H = x.dim(0), W = x.dim(1), ci = x.dim(2);
  const std::size_t kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::size_t Ho = (H + 2 * (kh / 2) - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * (kw / 2) - kw) / stride + 1;
  std::vector<Real> out(Ho * Wo * co);
  const Real* xd = x.data().data();
  const Real* wd = w.data().data();
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      Real* o = out.data() + (oy * Wo + ox) * co;
      for (std::size_t c = 0; c < co; ++c) o[c] = b[c];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ph;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pw;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const Real* xp = xd + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * ci;
          detail::gemm_acc(xp, wd + (ky * kw + kx) * ci * co, o, 1, ci, co);
        }
      }
    }
  return detail::make_result(
      "conv2d", {Ho, Wo, co}, std::move(out), {x.node(), w.node(), b.node()},
      [=](detail::Node& o) {
        auto& px = *o.parents[0];
        auto& pw_ = *o.parents[1];
        auto& pb = *o.parents[2];
        Real* gx = px.requires_grad ? px.grad_buffer().data() : nullptr;
        Real* gw = pw_.requires_grad ? pw_.grad_buffer().data() : nullptr;
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t i = 0; i < Ho * Wo; ++i)
            for (std::size_t c = 0; c < co; ++c) gb[c] += o.grad[i * co + c];
        }
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const Real* go = o.grad.data() + (oy * Wo + ox) * co;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ph;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pw;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                const std::size_t xoff = (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * ci;
                const std::size_t woff = (ky * kw + kx) * ci * co;
                for (std::size_t c = 0; c < ci; ++c) {
                  const Real* wr = pw_.data.data() + woff + c * co;
                  if (gx) {
                    Real s = 0;
                    for (std::size_t k = 0; k < co; ++k) s += go[k] * wr[k];
                    gx[xoff + c] += s;
                  }
                  if (gw) {
                    const Real xv = px.data[xoff + c];
                    Real* gwr = gw + woff + c * co;
                    for (std::size_t k = 0; k < co; ++k) gwr[k] += xv * go[k];
                  }
                }
              }
            }
          }
      });
}

/// Nearest-neighbour upsampling of an H×W×C map by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() != 3 || factor == 0) throw ShapeError("upsample_nearest: " + shape_str(x.shape()));
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const std::size_t Ho = H * factor, Wo = W * factor;
  std::vector<Real> out(Ho * Wo * C);
  for (std::size_t y = 0; y < Ho; ++y)
    for (std::size_t xx = 0; xx < Wo; ++xx) {
      const Real* src = x.data().data() + ((y / factor) * W + xx / factor) * C;
      std::copy(src, src + C, out.data() + (y * Wo + xx) * C);
    }
  return detail::make_result("upsample_nearest", {Ho, Wo, C}, std::move(out), {x.node()},
                             [=](detail::Node& o) {
                               auto& g = o.parents[0]->grad_buffer();
                               for (std::size_t y = 0; y < Ho; ++y)
                                 for (std::size_t xx = 0; xx < Wo; ++xx) {
                                   const Real* go = o.grad.data() + (y * Wo + xx) * C;
                                   Real* gi = g.data() + ((y / factor) * W + xx / factor) * C;
                                   for (std::size_t c = 0; c < C; ++c) gi[c] += go[c];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Row-wise ops over the last axis

inline Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax on a scalar");
  const std::size_t C = x.shape().back(), rows = x.numel() / C;
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.data().data() + r * C;
    Real* o = out.data() + r * C;
    Real mx = *std::max_element(in, in + C);
    Real s = 0;
    for (std::size_t c = 0; c < C; ++c) s += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < C; ++c) o[c] /= s;
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {x.node()}, [C, rows](detail::Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* p = o.data.data() + r * C;
      const Real* go = o.grad.data() + r * C;
      Real dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += go[c] * p[c];
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += p[c] * (go[c] - dot);
    }
  });
}

/// Layer normalisation over the last axis with affine gain and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, Real eps = 1e-5) {
  const std::size_t D = x.shape().back(), rows = x.numel() / D;
  if (gain.numel() != D || shift.numel() != D) throw ShapeError("layer_norm: affine size mismatch");
  std::vector<Real> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.data().data() + r * D;
    Real mean = 0, var = 0;
    for (std::size_t i = 0; i < D; ++i) mean += in[i];
    mean /= static_cast<Real>(D);
    for (std::size_t i = 0; i < D; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<Real>(D);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < D; ++i) {
      xhat[r * D + i] = (in[i] - mean) * inv_std[r];
      out[r * D + i] = xhat[r * D + i] * gain[i] + shift[i];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x.node(), gain.node(), shift.node()},
      [D, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& o) {
        auto& px = *o.parents[0];
        auto& pg = *o.parents[1];
        auto& pb = *o.parents[2];
        if (pg.requires_grad) {
          auto& g = pg.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % D] += o.grad[i] * xhat[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % D] += o.grad[i];
        }
        if (px.requires_grad) {
          auto& g = px.grad_buffer();
          std::vector<Real> dxhat(D);
          for (std::size_t r = 0; r < rows; ++r) {
            Real s1 = 0, s2 = 0;
            for (std::size_t i = 0; i < D; ++i) {
              dxhat[i] = o.grad[r * D + i] * pg.data[i];
              s1 += dxhat[i];
              s2 += dxhat[i] * xhat[r * D + i];
            }
            for (std::size_t i = 0; i < D; ++i)
              g[r * D + i] += inv_std[r] / static_cast<Real>(D) *
                              (static_cast<Real>(D) * dxhat[i] - s1 - xhat[r * D + i] * s2);
          }
        }
      });
}

/// Per-row KL(softmax(teacher) ‖ softmax(student)) over the last axis; the
/// result drops that axis. Both log terms use the kLogEpsilon clamp.
inline Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits) {
  detail::require_same_shape(teacher_logits, student_logits, "kl_divergence");
  const std::size_t C = teacher_logits.shape().back(), rows = teacher_logits.numel() / C;
  Shape out_shape(teacher_logits.shape().begin(), teacher_logits.shape().end() - 1);
  const Real log_eps = std::log(kLogEpsilon);
  // cached per-row distributions
  std::vector<Real> pt(rows * C), lpt(rows * C), ps(rows * C), lps(rows * C), out(rows);
  auto log_softmax_row = [C](const Real* z, Real* p, Real* lp) {
    Real mx = *std::max_element(z, z + C);
    Real s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    Real lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) {
      lp[c] = z[c] - lse;
      p[c] = std::exp(lp[c]);
    }
  };
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax_row(teacher_logits.data().data() + r * C, &pt[r * C], &lpt[r * C]);
    log_softmax_row(student_logits.data().data() + r * C, &ps[r * C], &lps[r * C]);
    Real kl = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      kl += pt[i] * (std::max(lpt[i], log_eps) - std::max(lps[i], log_eps));
    }
    out[r] = kl;
  }
  return detail::make_result(
      "kl_divergence", std::move(out_shape), std::move(out), {teacher_logits.node(), student_logits.node()},
      [=](detail::Node& o) {
        auto& ptn = *o.parents[0];
        auto& psn = *o.parents[1];
        std::vector<Real> gl(C);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real go = o.grad[r];
          if (psn.requires_grad) {
            // d/dlog p_s = -p_t (unclamped entries), then through log-softmax
            Real sum = 0;
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = r * C + c;
              gl[c] = lps[i] > log_eps ? -pt[i] : 0;
              sum += gl[c];
            }
            auto& g = psn.grad_buffer();
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = r * C + c;
              g[i] += go * (gl[c] - ps[i] * sum);
            }
          }
          if (ptn.requires_grad) {
            // d/dp_t = clamped log p_t + 1[unclamped] - clamped log p_s, then through softmax
            Real dot = 0;
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = r * C + c;
              gl[c] = std::max(lpt[i], log_eps) + (lpt[i] > log_eps ? 1.0 : 0.0) - std::max(lps[i], log_eps);
              dot += gl[c] * pt[i];
            }
            auto& g = ptn.grad_buffer();
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = r * C + c;
              g[i] += go * pt[i] * (gl[c] - dot);
            }
          }
        }
      });
}

/// Mean per-row cross-entropy of logits (last axis = classes) against
/// integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t C = logits.shape().back(), rows = logits.numel() / C;
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<Real> p(rows * C);
  Real loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* z = logits.data().data() + r * C;
    Real mx = *std::max_element(z, z + C);
    Real s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    for (std::size_t c = 0; c < C; ++c) p[r * C + c] = std::exp(z[c] - mx) / s;
    loss -= z[labels[r]] - mx - std::log(s);
  }
  loss /= static_cast<Real>(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result("cross_entropy", {}, {loss}, {logits.node()},
                             [C, rows, p = std::move(p), lab = std::move(lab)](detail::Node& o) {
                               auto& g = o.parents[0]->grad_buffer();
                               const Real s = o.grad[0] / static_cast<Real>(rows);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < C; ++c)
                                   g[r * C + c] += s * (p[r * C + c] - (static_cast<int>(c) == lab[r] ? 1.0 : 0.0));
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real v : x.data()) s += v;
  return detail::make_result("sum", {}, {s}, {x.node()}, [](detail::Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<Real>(x.numel()));
}

/// Mean of x over entries where mask is set; zero (a constant) when the
/// mask is empty.
inline Tensor masked_mean(const Tensor& x, std::span<const unsigned char> mask) {
  if (mask.size() != x.numel()) throw ShapeError("masked_mean: mask size mismatch");
  std::size_t count = 0;
  Real s = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      s += x[i];
      ++count;
    }
  if (count == 0) return Tensor::scalar(0);
  std::vector<unsigned char> m(mask.begin(), mask.end());
  const Real inv = 1.0 / static_cast<Real>(count);
  return detail::make_result("masked_mean", {}, {s * inv}, {x.node()}, [inv, m = std::move(m)](detail::Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (m[i]) g[i] += o.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of `params` from their accumulated
/// gradients. Returns false (and leaves params and state untouched) when
/// any gradient is non-finite. Parameters without a gradient see zero.
inline bool adam_step(std::span<Tensor> params, AdamState& state, Real lr, const AdamConfig& cfg = {}) {
  for (auto& p : params)
    for (Real g : p.grad())
      if (!std::isfinite(g)) return false;
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0);
      state.v[i].assign(params[i].numel(), 0);
    }
    state.step = 0;
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].size() != params[i].numel()) throw ShapeError("adam_step: state shape mismatch");
  ++state.step;
  const Real bc1 = 1 - std::pow(cfg.beta1, static_cast<Real>(state.step));
  const Real bc2 = 1 - std::pow(cfg.beta2, static_cast<Real>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const Real g = grad.empty() ? 0 : grad[j];
      m[j] = cfg.beta1 * m[j] + (1 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1 - cfg.beta2) * g * g;
      const Real mh = m[j] / bc1, vh = v[j] / bc2;
      data[j] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
  return true;
}

}  // namespace eviatta
