#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace mafnet {

// Tape-free reverse-mode autodiff: every op result keeps its inputs alive and
// a closure that pushes its output gradient into them.

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return !grad.empty() || value.empty(); }
  Node& input(std::size_t i) { return *inputs[i]; }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  Tensor<T>& grad() { return node_->grad_buffer(); }
  const Tensor<T>& grad_or_empty() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Var detach() const { return Var(node_->value, false); }
  T item() const { return node_->value[0]; }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. The backward closure receives the result node and
// must accumulate into the grad_buffer() of inputs that require grad.
template <class T, class Backward>
Var<T> make_result(Tensor<T> out, std::vector<Var<T>> inputs, Backward&& backward) {
  bool needs = false;
  if (grad_enabled())
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<T>(std::move(node));
}

template <class T>
void backward(const Var<T>& root) {
  require(root.value().size() == 1, ErrorCode::ShapeMismatch, "backward() needs a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Free intermediate gradients; leaves keep theirs.
  for (Node<T>* n : order)
    if (n->backward) n->grad = Tensor<T>();
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (self.input(k).requires_grad) self.input(k).grad_buffer() += self.grad;
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// Weighted sum of scalars: sum_k w_k * x_k.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& ws) {
  require(xs.size() == ws.size() && !xs.empty(), ErrorCode::ShapeMismatch, "weighted_sum arity");
  T acc = T(0);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require(xs[k].value().size() == 1, ErrorCode::ShapeMismatch, "weighted_sum expects scalars");
    acc += ws[k] * xs[k].item();
  }
  return make_result<T>(Tensor<T>({1}, acc), xs, [ws](Node<T>& self) {
    for (std::size_t k = 0; k < ws.size(); ++k)
      if (self.input(k).requires_grad) self.input(k).grad_buffer()[0] += ws[k] * self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const auto n = static_cast<T>(a.value().size());
  return make_result<T>(Tensor<T>({1}, a.value().sum() / n), {a}, [n](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    const T d = self.grad[0] / n;
    for (auto& v : g.values()) v += d;
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& in = self.input(0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : slope * v;
  return make_result<T>(std::move(out), {a}, [slope](Node<T>& self) {
    auto& in = self.input(0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (in.value[i] > T(0) ? T(1) : slope) * self.grad[i];
  });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    // self.value is still alive while backward runs.
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (T(1) - self.value[i] * self.value[i]) * self.grad[i];
  });
}

// Concatenate NCHW tensors along channels.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  require(!xs.empty(), ErrorCode::ShapeMismatch, "concat of nothing");
  const Shape& s0 = xs[0].shape();
  require_rank(s0, 4, "concat_channels");
  int total_c = 0;
  for (const auto& x : xs) {
    require_rank(x.shape(), 4, "concat_channels");
    require(x.dim(0) == s0[0] && x.dim(2) == s0[2] && x.dim(3) == s0[3], ErrorCode::ShapeMismatch,
            "concat_channels: mismatched " + shape_str(x.shape()) + " vs " + shape_str(s0));
    total_c += x.dim(1);
  }
  const int n = s0[0];
  const std::size_t hw = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor<T> out({n, total_c, s0[2], s0[3]});
  std::vector<int> offsets;
  int c0 = 0;
  for (const auto& x : xs) {
    offsets.push_back(c0);
    const int c = x.dim(1);
    for (int b = 0; b < n; ++b)
      std::copy_n(x.value().data() + static_cast<std::size_t>(b) * c * hw, c * hw,
                  out.data() + (static_cast<std::size_t>(b) * total_c + c0) * hw);
    c0 += c;
  }
  return make_result<T>(std::move(out), xs, [offsets, n, total_c, hw](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& in = self.input(k);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      const int c = in.value.dim(1);
      for (int b = 0; b < n; ++b) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(b) * total_c + offsets[k]) * hw;
        T* dst = g.data() + static_cast<std::size_t>(b) * c * hw;
        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

// Channels [c0, c1) of an NCHW tensor.
template <class T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
  require_rank(x.shape(), 4, "slice_channels");
  const int n = x.dim(0), c = x.dim(1);
  require(0 <= c0 && c0 < c1 && c1 <= c, ErrorCode::ShapeMismatch, "slice_channels range");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int k = c1 - c0;
  Tensor<T> out({n, k, x.dim(2), x.dim(3)});
  for (int b = 0; b < n; ++b)
    std::copy_n(x.value().data() + (static_cast<std::size_t>(b) * c + c0) * hw, k * hw,
                out.data() + static_cast<std::size_t>(b) * k * hw);
  return make_result<T>(std::move(out), {x}, [n, c, c0, k, hw](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (int b = 0; b < n; ++b) {
      const T* src = self.grad.data() + static_cast<std::size_t>(b) * k * hw;
      T* dst = g.data() + (static_cast<std::size_t>(b) * c + c0) * hw;
      for (std::size_t i = 0; i < k * hw; ++i) dst[i] += src[i];
    }
  });
}

// Rows of an NCHW batch: samples [b0, b1).
template <class T>
Var<T> slice_batch(const Var<T>& x, int b0, int b1) {
  const int n = x.dim(0);
  require(0 <= b0 && b0 < b1 && b1 <= n, ErrorCode::ShapeMismatch, "slice_batch range");
  const std::size_t per = x.value().size() / static_cast<std::size_t>(n);
  Shape s = x.shape();
  s[0] = b1 - b0;
  Tensor<T> out(s);
  std::copy_n(x.value().data() + b0 * per, (b1 - b0) * per, out.data());
  return make_result<T>(std::move(out), {x}, [b0, per](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[b0 * per + i] += self.grad[i];
  });
}

// Repeat the single channel of (N,1,H,W) into (N,k,H,W).
template <class T>
Var<T> repeat_channels(const Var<T>& x, int k) {
  std::vector<Var<T>> xs(static_cast<std::size_t>(k), x);
  return concat_channels(xs);
}

}  // namespace mafnet
