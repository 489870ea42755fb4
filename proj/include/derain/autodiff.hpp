#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "derain/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor<T>. Ops build a tape of
// nodes; backward() walks it in reverse topological order with a fixed
// traversal order, so gradient accumulation is bitwise reproducible.
// When gradients are disabled (GradMode off) ops keep no parents, so
// intermediate values are released as soon as the last Var handle drops.

namespace derain::nn {

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  uint64_t visit = 0;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Tensor<T>(value.shape);
      grad_ready = true;
    }
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev; }
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad && grad_enabled();
    return Var(std::move(n));
  }

  bool valid() const { return n_ != nullptr; }
  const Tensor<T>& value() const { return n_->value; }
  const Shape& shape() const { return n_->value.shape; }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  // Gradient accumulated by the last backward(); zero tensor if untouched.
  const Tensor<T>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }

  NodePtr node() const { return n_; }

 private:
  NodePtr n_;
};

namespace detail {

// Shared op constructor: decides whether the result participates in the tape.
template <typename T, typename F>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, F&& backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool need = false;
  if (grad_mode_flag())
    for (const auto& v : inputs) need = need || v.requires_grad();
  if (need) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& v : inputs) n->parents.push_back(v.node());
    n->backward_fn = std::forward<F>(backward_fn);
  }
  return Var<T>(std::move(n));
}

inline uint64_t next_visit_id() {
  static uint64_t id = 0;
  return ++id;
}

}  // namespace detail

// Backpropagate from a scalar root. Overwrites the .grad of every reachable
// node with requires_grad set; stale gradients from earlier passes on the
// same leaves are cleared first.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.requires_grad())
    throw ShapeMismatch("backward: root does not require gradients");
  if (root.value().numel() != 1)
    throw ShapeMismatch("backward: root must be scalar, got " + root.shape().str());

  using NodeT = detail::Node<T>;
  const uint64_t visit = detail::next_visit_id();

  // Iterative postorder DFS (producers first); reversed it yields consumers
  // before producers, which is the order backward functions must run in.
  std::vector<NodeT*> topo;
  std::vector<std::pair<NodeT*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  root.node()->visit = visit;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT* p = node->parents[idx++].get();
      if (p->requires_grad && p->visit != visit) {
        p->visit = visit;
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* n : topo)
    if (n->grad_ready) std::fill(n->grad.data.begin(), n->grad.data.end(), T(0));

  root.node()->ensure_grad();
  root.node()->grad.data[0] = T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ----- elementwise ops -------------------------------------------------

namespace detail {
template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* where) {
  if (!(a.shape() == b.shape()))
    throw ShapeMismatch(std::string(where) + ": " + a.shape().str() + " vs " + b.shape().str());
}
}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] + bv[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](detail::Node<T>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[size_t(k)];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] - bv[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i) pa.grad.data[i] += n.grad.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i) pb.grad.data[i] -= n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] * bv[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i)
        pa.grad.data[i] += n.grad.data[i] * pb.value.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i)
        pb.grad.data[i] += n.grad.data[i] * pa.value.data[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] / bv[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i)
        pa.grad.data[i] += n.grad.data[i] / pb.value.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i) {
        const T bv_ = pb.value.data[i];
        pb.grad.data[i] -= n.grad.data[i] * pa.value.data[i] / (bv_ * bv_);
      }
    }
  });
}

// a*x + b with scalar constants.
template <typename T>
Var<T> affine(const Var<T>& x, T a, T b) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * xv[i] + b;
  return detail::make_op<T>(std::move(out), {x}, [a](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += a * n.grad.data[i];
  });
}

template <typename T>
Var<T> abs_val(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::abs(xv[i]);
  return detail::make_op<T>(std::move(out), {x}, [](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) {
      const T v = p.value.data[i];
      if (v > T(0))
        p.grad.data[i] += n.grad.data[i];
      else if (v < T(0))
        p.grad.data[i] -= n.grad.data[i];
    }
  });
}

// Hard clamp; gradient passes only strictly inside (lo, hi).
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(std::max(xv[i], lo), hi);
  return detail::make_op<T>(std::move(out), {x}, [lo, hi](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) {
      const T v = p.value.data[i];
      if (v > lo && v < hi) p.grad.data[i] += n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value().data;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
  return detail::make_op<T>(std::move(out), {x}, [slope](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i)
      p.grad.data[i] += n.grad.data[i] * (p.value.data[i] > T(0) ? T(1) : slope);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = T(1) / (T(1) + std::exp(-xv[i]));
  return detail::make_op<T>(std::move(out), {x}, [](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) {
      const T y = n.value.data[i];
      p.grad.data[i] += n.grad.data[i] * y * (T(1) - y);
    }
  });
}

// Mean over every element; returns a scalar-shaped Var.
template <typename T>
Var<T> mean_all(const Var<T>& x) {
  const T scale = T(1) / T(x.value().numel());
  T acc = T(0);
  for (const T& v : x.value().data) acc += v;
  Tensor<T> out(Shape{1, 1, 1, 1});
  out.data[0] = acc * scale;
  return detail::make_op<T>(std::move(out), {x}, [scale](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T g = n.grad.data[0] * scale;
    for (size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += g;
  });
}

// (B,1,H,W) -> (B,C,H,W) by channel replication.
template <typename T>
Var<T> expand_channels(const Var<T>& x, int channels) {
  const Shape s = x.shape();
  if (s.c != 1) throw ShapeMismatch("expand_channels: input must have 1 channel");
  Tensor<T> out(s.b, channels, s.h, s.w);
  const size_t plane = size_t(s.h) * s.w;
  for (int b = 0; b < s.b; ++b) {
    const T* src = x.value().data.data() + size_t(b) * plane;
    for (int c = 0; c < channels; ++c) {
      T* dst = out.data.data() + (size_t(b) * channels + c) * plane;
      for (size_t i = 0; i < plane; ++i) dst[i] = src[i];
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [channels, plane](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const int B = p.value.shape.b;
    for (int b = 0; b < B; ++b) {
      T* dst = p.grad.data.data() + size_t(b) * plane;
      for (int c = 0; c < channels; ++c) {
        const T* src = n.grad.data.data() + (size_t(b) * channels + c) * plane;
        for (size_t i = 0; i < plane; ++i) dst[i] += src[i];
      }
    }
  });
}

// (B,C,1,1) -> (B,C,H,W); the atmosphere-light broadcast.
template <typename T>
Var<T> broadcast_spatial(const Var<T>& x, int h, int w) {
  const Shape s = x.shape();
  if (s.h != 1 || s.w != 1)
    throw ShapeMismatch("broadcast_spatial: input must be (B,C,1,1), got " + s.str());
  Tensor<T> out(s.b, s.c, h, w);
  const size_t plane = size_t(h) * w;
  for (int i = 0; i < s.b * s.c; ++i) {
    const T v = x.value().data[size_t(i)];
    T* dst = out.data.data() + size_t(i) * plane;
    for (size_t j = 0; j < plane; ++j) dst[j] = v;
  }
  return detail::make_op<T>(std::move(out), {x}, [plane](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const size_t cells = p.grad.data.size();
    for (size_t i = 0; i < cells; ++i) {
      const T* src = n.grad.data.data() + i * plane;
      T acc = T(0);
      for (size_t j = 0; j < plane; ++j) acc += src[j];
      p.grad.data[i] += acc;
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat_channels: no inputs");
  const Shape s0 = xs[0].shape();
  int ctot = 0;
  for (const auto& x : xs) {
    const Shape s = x.shape();
    if (s.b != s0.b || s.h != s0.h || s.w != s0.w)
      throw ShapeMismatch("concat_channels: spatial/batch dims differ");
    ctot += s.c;
  }
  Tensor<T> out(s0.b, ctot, s0.h, s0.w);
  const size_t plane = size_t(s0.h) * s0.w;
  for (int b = 0; b < s0.b; ++b) {
    int coff = 0;
    for (const auto& x : xs) {
      const int c = x.shape().c;
      const T* src = x.value().data.data() + size_t(b) * c * plane;
      T* dst = out.data.data() + (size_t(b) * ctot + coff) * plane;
      std::copy(src, src + size_t(c) * plane, dst);
      coff += c;
    }
  }
  return detail::make_op<T>(std::move(out), xs, [ctot, plane](detail::Node<T>& n) {
    const int B = n.value.shape.b;
    for (int b = 0; b < B; ++b) {
      int coff = 0;
      for (auto& pp : n.parents) {
        auto& p = *pp;
        const int c = p.value.shape.c;
        if (p.requires_grad) {
          p.ensure_grad();
          const T* src = n.grad.data.data() + (size_t(b) * ctot + coff) * plane;
          T* dst = p.grad.data.data() + size_t(b) * c * plane;
          for (size_t i = 0; i < size_t(c) * plane; ++i) dst[i] += src[i];
        }
        coff += c;
      }
    }
  });
}

namespace detail {
// Forward difference along one axis; the trailing row/column is zero.
template <typename T, bool Horizontal>
Var<T> forward_diff(const Var<T>& x) {
  const Shape s = x.shape();
  if (s.h < 2 || s.w < 2) throw ShapeMismatch("image_gradient: needs H,W >= 2");
  Tensor<T> out(s);
  const auto& xv = x.value().data;
  const size_t plane = size_t(s.h) * s.w;
  for (int bc = 0; bc < s.b * s.c; ++bc) {
    const T* src = xv.data() + size_t(bc) * plane;
    T* dst = out.data.data() + size_t(bc) * plane;
    for (int y = 0; y < s.h; ++y)
      for (int x_ = 0; x_ < s.w; ++x_) {
        const size_t i = size_t(y) * s.w + x_;
        if constexpr (Horizontal)
          dst[i] = (x_ + 1 < s.w) ? src[i + 1] - src[i] : T(0);
        else
          dst[i] = (y + 1 < s.h) ? src[i + size_t(s.w)] - src[i] : T(0);
      }
  }
  return make_op<T>(std::move(out), {x}, [plane, s](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int bc = 0; bc < s.b * s.c; ++bc) {
      const T* g = n.grad.data.data() + size_t(bc) * plane;
      T* dst = p.grad.data.data() + size_t(bc) * plane;
      for (int y = 0; y < s.h; ++y)
        for (int x_ = 0; x_ < s.w; ++x_) {
          const size_t i = size_t(y) * s.w + x_;
          if constexpr (Horizontal) {
            if (x_ + 1 < s.w) {
              dst[i + 1] += g[i];
              dst[i] -= g[i];
            }
          } else {
            if (y + 1 < s.h) {
              dst[i + size_t(s.w)] += g[i];
              dst[i] -= g[i];
            }
          }
        }
    }
  });
}
}  // namespace detail

template <typename T>
Var<T> grad_x(const Var<T>& x) {
  return detail::forward_diff<T, true>(x);
}
template <typename T>
Var<T> grad_y(const Var<T>& x) {
  return detail::forward_diff<T, false>(x);
}

}  // namespace derain::nn
