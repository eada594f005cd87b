#pragma once

// Tape-based reverse-mode differentiation. A Graph records every kernel
// application in forward order; backward() walks the tape in exact reverse.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ivgf/kernels.hpp"
#include "ivgf/params.hpp"
#include "ivgf/tensor.hpp"

namespace ivgf {

class Graph;

/// Handle to a node in a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Accumulates into input_grads[i] (null when input i needs no gradient).
using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor*>& input_grads)>;

struct Gradients {
  std::map<std::string, Tensor> params;

  const Tensor& operator[](const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("no gradient for parameter " + name);
    return it->second;
  }
  bool empty() const noexcept { return params.empty(); }
};

class Graph {
 public:
  struct Options {
    // Fault injection for the gradient-check harness: negates the incoming
    // gradient of every node with this op name during backward.
    std::string negate_backward_of;
  };

  Graph() = default;
  explicit Graph(Options opts) : opts_(std::move(opts)) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) { return push("constant", std::move(t), {}, nullptr, false); }

  Var input(Tensor t, bool requires_grad = true) {
    t.set_requires_grad(requires_grad);
    return push("input", std::move(t), {}, nullptr, requires_grad);
  }

  /// Leaf bound to a named parameter. Repeated lookups share one node, so a
  /// parameter used in several places accumulates a single gradient.
  Var param(const ParamStore& store, const std::string& name) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var(this, it->second);
    Tensor t = store.get(name);
    t.set_requires_grad(true);
    Var v = push("param", std::move(t), {}, nullptr, true);
    nodes_[v.id()].param = name;
    param_ids_.emplace(name, v.id());
    param_order_.push_back(name);
    return v;
  }

  Var record(std::string op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool rg = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      ids.push_back(v.id());
      rg = rg || nodes_.at(v.id()).requires_grad;
    }
    return push(std::move(op), std::move(value), std::move(ids), rg ? std::move(fn) : nullptr, rg);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }

  std::size_t count_op(const std::string& op) const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.op == op;
    return n;
  }

  /// Gradient of the last backward() with respect to `v`; zeros if unreached.
  Tensor grad(Var v) const {
    const auto& node = nodes_.at(v.id());
    return node.grad ? *node.grad : Tensor::zeros(node.value.shape());
  }

  /// Description of the first node (in forward order) holding a non-finite value.
  std::optional<std::string> first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (!nodes_[i].value.all_finite()) {
        const auto& n = nodes_[i];
        return "node " + std::to_string(i) + " (" + n.op + (n.param.empty() ? "" : " " + n.param) + ") shape " +
               shape_str(n.value.shape());
      }
    return std::nullopt;
  }

  Gradients backward(Var loss) {
    const Tensor& lv = nodes_.at(loss.id()).value;
    if (lv.numel() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_str(lv.shape()));
    for (auto& n : nodes_) n.grad.reset();
    nodes_[loss.id()].grad = Tensor::ones(lv.shape());
    std::vector<Tensor*> in_grads;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      in_grads.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& in = nodes_[n.inputs[k]];
        if (!in.requires_grad) continue;
        if (!in.grad) in.grad = Tensor::zeros(in.value.shape());
        in_grads[k] = &*in.grad;
      }
      if (!opts_.negate_backward_of.empty() && n.op == opts_.negate_backward_of) {
        Tensor neg = *n.grad;
        for (auto& v : neg.data()) v = -v;
        n.backward(neg, in_grads);
      } else {
        n.backward(*n.grad, in_grads);
      }
    }
    Gradients out;
    for (const auto& name : param_order_) {
      const Node& n = nodes_[param_ids_.at(name)];
      out.params.emplace(name, n.grad ? *n.grad : Tensor::zeros(n.value.shape()));
    }
    return out;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::string param;
    std::optional<Tensor> grad;
  };

  Var push(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool rg) {
    nodes_.push_back(Node{std::move(op), std::move(value), std::move(inputs), std::move(fn), rg, {}, {}});
    return Var(this, nodes_.size() - 1);
  }

  Options opts_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_ids_;
  std::vector<std::string> param_order_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

inline Gradients backward(Graph& g, Var loss) { return g.backward(loss); }

// ---------------------------------------------------------------------------
// Differentiable ops.

namespace detail {
inline void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.numel(); ++i) (*dst)[i] += src[i];
}
inline Graph& graph_of(Var a) { return a.graph(); }
}  // namespace detail

/// a + b, with b broadcast into a's shape.
inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!kernels::broadcastable(av.shape(), bv.shape()))
    throw DimensionError("add: cannot broadcast " + shape_str(bv.shape()) + " into " + shape_str(av.shape()));
  Tensor out = av;
  kernels::for_each_broadcast(av.shape(), bv.shape(), [&](std::size_t i, std::size_t j) { out[i] += bv[j]; });
  Shape as = av.shape(), bs = bv.shape();
  return a.graph().record("add", std::move(out), {a, b}, [as, bs](const Tensor& go, std::vector<Tensor*>& gi) {
    detail::accumulate(gi[0], go);
    if (gi[1]) kernels::for_each_broadcast(as, bs, [&](std::size_t i, std::size_t j) { (*gi[1])[j] += go[i]; });
  });
}

/// a * b elementwise, with b broadcast into a's shape.
inline Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!kernels::broadcastable(av.shape(), bv.shape()))
    throw DimensionError("mul: cannot broadcast " + shape_str(bv.shape()) + " into " + shape_str(av.shape()));
  Tensor out = av;
  kernels::for_each_broadcast(av.shape(), bv.shape(), [&](std::size_t i, std::size_t j) { out[i] *= bv[j]; });
  Graph* g = &a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g->record("mul", std::move(out), {a, b}, [g, ia, ib](const Tensor& go, std::vector<Tensor*>& gi) {
    const Tensor& x = g->value(ia);
    const Tensor& y = g->value(ib);
    kernels::for_each_broadcast(x.shape(), y.shape(), [&](std::size_t i, std::size_t j) {
      if (gi[0]) (*gi[0])[i] += go[i] * y[j];
      if (gi[1]) (*gi[1])[j] += go[i] * x[i];
    });
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.graph().record("scale", std::move(out), {a}, [s](const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += s * go[i];
  });
}

inline Var relu(Var a) {
  Tensor out = kernels::map(a.value(), kernels::relu);
  Graph* g = &a.graph();
  const std::size_t ia = a.id();
  return g->record("relu", std::move(out), {a}, [g, ia](const Tensor& go, std::vector<Tensor*>& gi) {
    const Tensor& x = g->value(ia);
    for (std::size_t i = 0; i < go.numel(); ++i)
      if (x[i] > 0.0) (*gi[0])[i] += go[i];
  });
}

inline Var sigmoid(Var a) {
  Tensor out = kernels::map(a.value(), kernels::sigmoid);
  Graph* g = &a.graph();
  const std::size_t self = g->size();
  return g->record("sigmoid", std::move(out), {a}, [g, self](const Tensor& go, std::vector<Tensor*>& gi) {
    const Tensor& y = g->value(self);
    for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  Tensor out = kernels::conv2d(x.value(), w.value(), b.value(), stride, pad);
  Graph* g = &x.graph();
  const std::size_t ix = x.id(), iw = w.id();
  return g->record("conv2d", std::move(out), {x, w, b},
                   [g, ix, iw, stride, pad](const Tensor& go, std::vector<Tensor*>& gi) {
                     auto r = kernels::conv2d_backward(g->value(ix), g->value(iw), go, stride, pad);
                     detail::accumulate(gi[0], r.input);
                     detail::accumulate(gi[1], r.weight);
                     detail::accumulate(gi[2], r.bias);
                   });
}

inline Var linear(Var x, Var w, Var b) {
  Tensor out = kernels::linear(x.value(), w.value(), b.value());
  Graph* g = &x.graph();
  const std::size_t ix = x.id(), iw = w.id();
  return g->record("linear", std::move(out), {x, w, b}, [g, ix, iw](const Tensor& go, std::vector<Tensor*>& gi) {
    auto r = kernels::linear_backward(g->value(ix), g->value(iw), go);
    detail::accumulate(gi[0], r.input);
    detail::accumulate(gi[1], r.weight);
    detail::accumulate(gi[2], r.bias);
  });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tensor out = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps);
  Graph* g = &x.graph();
  const std::size_t ix = x.id(), ig = gamma.id();
  return g->record("layer_norm", std::move(out), {x, gamma, beta},
                   [g, ix, ig, eps](const Tensor& go, std::vector<Tensor*>& gi) {
                     auto r = kernels::layer_norm_backward(g->value(ix), g->value(ig), eps, go);
                     detail::accumulate(gi[0], r.input);
                     detail::accumulate(gi[1], r.gamma);
                     detail::accumulate(gi[2], r.beta);
                   });
}

inline Var softmax_rows(Var x) {
  Tensor out = kernels::softmax_rows(x.value());
  Graph* g = &x.graph();
  const std::size_t self = g->size();
  return g->record("softmax", std::move(out), {x}, [g, self](const Tensor& go, std::vector<Tensor*>& gi) {
    detail::accumulate(gi[0], kernels::softmax_rows_backward(g->value(self), go));
  });
}

inline Var adaptive_pool(Var x, kernels::PoolMode mode, std::size_t oh, std::size_t ow) {
  Tensor out = kernels::adaptive_pool(x.value(), mode, oh, ow);
  Graph* g = &x.graph();
  const std::size_t ix = x.id();
  return g->record(mode == kernels::PoolMode::avg ? "avg_pool" : "max_pool", std::move(out), {x},
                   [g, ix, mode, oh, ow](const Tensor& go, std::vector<Tensor*>& gi) {
                     detail::accumulate(gi[0], kernels::adaptive_pool_backward(g->value(ix), mode, oh, ow, go));
                   });
}

inline Var matmul(Var a, Var b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  Graph* g = &a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g->record("matmul", std::move(out), {a, b}, [g, ia, ib](const Tensor& go, std::vector<Tensor*>& gi) {
    if (gi[0]) detail::accumulate(gi[0], kernels::matmul(go, kernels::transpose2d(g->value(ib))));
    if (gi[1]) detail::accumulate(gi[1], kernels::matmul(kernels::transpose2d(g->value(ia)), go));
  });
}

inline Var transpose(Var a) {
  return a.graph().record("transpose", kernels::transpose2d(a.value()), {a},
                          [](const Tensor& go, std::vector<Tensor*>& gi) {
                            detail::accumulate(gi[0], kernels::transpose2d(go));
                          });
}

inline Var reshape(Var a, Shape s) {
  return a.graph().record("reshape", a.value().reshaped(std::move(s)), {a},
                          [](const Tensor& go, std::vector<Tensor*>& gi) { detail::accumulate(gi[0], go); });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  std::vector<const Tensor*> vals;
  std::vector<std::size_t> lens;
  for (const Var& p : parts) {
    vals.push_back(&p.value());
    lens.push_back(p.value().dim(axis));
  }
  Tensor out = kernels::concat(vals, axis);
  return parts[0].graph().record("concat", std::move(out), parts,
                                 [axis, lens](const Tensor& go, std::vector<Tensor*>& gi) {
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < lens.size(); ++k) {
                                     if (gi[k]) detail::accumulate(gi[k], kernels::slice(go, axis, off, off + lens[k]));
                                     off += lens[k];
                                   }
                                 });
}

inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tensor out = kernels::slice(a.value(), axis, begin, end);
  const Shape full = a.shape();
  return a.graph().record("slice", std::move(out), {a},
                          [axis, begin, end, full](const Tensor& go, std::vector<Tensor*>& gi) {
                            const auto [outer, inner] = kernels::outer_inner(full, axis);
                            const std::size_t len = (end - begin) * inner, stride = full[axis] * inner;
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t i = 0; i < len; ++i) (*gi[0])[o * stride + begin * inner + i] += go[o * len + i];
                          });
}

inline Var upsample_nearest(Var a, std::size_t factor) {
  if (factor == 1) return a;
  return a.graph().record("upsample", kernels::upsample_nearest(a.value(), factor), {a},
                          [factor](const Tensor& go, std::vector<Tensor*>& gi) {
                            detail::accumulate(gi[0], kernels::upsample_nearest_backward(go, factor));
                          });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph().record("sum", Tensor::scalar(s), {a}, [](const Tensor& go, std::vector<Tensor*>& gi) {
    for (auto& v : gi[0]->data()) v += go[0];
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

/// Dot product with a fixed tensor of the same shape: sum(a * w).
inline Var weighted_sum(Var a, const Tensor& w) {
  if (a.shape() != w.shape()) throw DimensionError("weighted_sum: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) s += a.value()[i] * w[i];
  return a.graph().record("weighted_sum", Tensor::scalar(s), {a}, [w](const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t i = 0; i < w.numel(); ++i) (*gi[0])[i] += go[0] * w[i];
  });
}

inline Var cross_entropy(Var logits, const Tensor& mask) {
  const double loss = kernels::cross_entropy(logits.value(), mask);
  Graph* g = &logits.graph();
  const std::size_t il = logits.id();
  return g->record("cross_entropy", Tensor::scalar(loss), {logits},
                   [g, il, mask](const Tensor& go, std::vector<Tensor*>& gi) {
                     detail::accumulate(gi[0], kernels::cross_entropy_backward(g->value(il), mask, go[0]));
                   });
}

// ---------------------------------------------------------------------------
// Central-difference gradient oracle. Independent of the tape: it only
// evaluates `f` on perturbed copies of x.

template <class F>
Tensor finite_diff_grad(F&& f, const Tensor& x, double eps = 1e-5) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(static_cast<const Tensor&>(probe));
    probe[i] = x[i] - eps;
    const double down = f(static_cast<const Tensor&>(probe));
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

}  // namespace ivgf
