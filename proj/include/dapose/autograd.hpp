#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dapose/tensor.hpp"

namespace dapose {

// Reverse-mode autodiff on a dynamically built DAG. Nodes are created per
// forward pass and freed when the last Var handle drops; parameter leaves
// persist across steps and keep their gradient buffers.

template <typename S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool grad_init = false;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<S>& grad_buf() {
        if (!grad_init) {
            grad = Tensor<S>(value.shape());
            grad_init = true;
        }
        return grad;
    }
};

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
class Var {
  public:
    Var() = default;
    explicit Var(NodePtr<S> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<S> v, bool requires_grad = false) {
        auto n = std::make_shared<Node<S>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<S>& val() const { return node_->value; }
    Tensor<S>& val() { return node_->value; }
    S item() const {
        check_arg(node_->value.numel() == 1, "item(): tensor is not scalar");
        return node_->value[0];
    }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor<S>& grad() { return node_->grad_buf(); }
    void zero_grad() { node_->grad_buf().fill(S(0)); }
    NodePtr<S> node() const { return node_; }

    /// Backpropagate from this scalar; accumulates into every reachable
    /// requires_grad node's gradient buffer.
    void backward() const {
        check_arg(node_ && node_->value.numel() == 1, "backward() root must be scalar");
        check_arg(node_->requires_grad, "backward() on a graph with no gradients");
        // Iterative DFS post-order over requires_grad subgraph.
        std::vector<Node<S>*> order;
        std::unordered_set<Node<S>*> seen;
        std::vector<std::pair<Node<S>*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            Node<S>* n = stack.back().first;
            const size_t idx = stack.back().second;
            if (idx < n->parents.size()) {
                ++stack.back().second;
                Node<S>* p = n->parents[idx].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->grad_buf().fill(S(0));
        node_->grad[0] = S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward && (*it)->grad_init) (*it)->backward(**it);
        }
    }

  private:
    NodePtr<S> node_;
};

namespace ag {

/// RAII guard: while alive on this thread, newly built ops record no graph,
/// so forward passes (teacher, evaluation) cost no backward bookkeeping.
class NoGrad {
  public:
    NoGrad() { ++depth(); }
    ~NoGrad() { --depth(); }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

    static bool active() { return depth() > 0; }

  private:
    static int& depth() {
        thread_local int d = 0;
        return d;
    }
};

template <typename S>
Var<S> constant(Tensor<S> v) {
    return Var<S>::leaf(std::move(v), false);
}

template <typename S>
Var<S> make_op(Tensor<S> value, std::vector<NodePtr<S>> parents,
               std::function<void(Node<S>&)> backward) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    if (!NoGrad::active())
        for (const auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return Var<S>(std::move(n));
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    check_arg(a.val().same_shape(b.val()), "add: shape mismatch");
    Tensor<S> out = a.val();
    axpy(S(1), b.val(), out);
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) axpy(S(1), self.grad, pa->grad_buf());
        if (pb->requires_grad) axpy(S(1), self.grad, pb->grad_buf());
    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    check_arg(a.val().same_shape(b.val()), "sub: shape mismatch");
    Tensor<S> out = a.val();
    axpy(S(-1), b.val(), out);
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) axpy(S(1), self.grad, pa->grad_buf());
        if (pb->requires_grad) axpy(S(-1), self.grad, pb->grad_buf());
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    check_arg(a.val().same_shape(b.val()), "mul: shape mismatch");
    Tensor<S> out(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

/// a*x + b with scalar coefficients.
template <typename S>
Var<S> affine(const Var<S>& x, S a, S b) {
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x.val()[i] + b;
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, a](Node<S>& self) {
        axpy(a, self.grad, px->grad_buf());
    });
}

/// Elementwise product with a gradient-free tensor.
template <typename S>
Var<S> mul_const(const Var<S>& x, Tensor<S> c) {
    check_arg(x.val().same_shape(c), "mul_const: shape mismatch");
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.val()[i] * c[i];
    auto px = x.node();
    auto cp = std::make_shared<Tensor<S>>(std::move(c));
    return make_op<S>(std::move(out), {px}, [px, cp](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * (*cp)[i];
    });
}

template <typename S>
Var<S> relu(const Var<S>& x) {
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.val()[i] > S(0) ? x.val()[i] : S(0);
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (px->value[i] > S(0)) g[i] += self.grad[i];
    });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const S v = x.val()[i];
        out[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
    }
    auto px = x.node();
    auto n = make_op<S>(std::move(out), {px}, nullptr);
    if (n.requires_grad()) {
        auto self_node = n.node().get();
        n.node()->backward = [px, self_node](Node<S>& self) {
            auto& g = px->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) {
                const S y = self_node->value[i];
                g[i] += self.grad[i] * y * (S(1) - y);
            }
        };
    }
    return n;
}

/// Clamp to [lo, hi]; zero gradient outside the interval.
template <typename S>
Var<S> clamp(const Var<S>& x, S lo, S hi) {
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, x.val()[i]));
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, lo, hi](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) {
            const S v = px->value[i];
            if (v > lo && v < hi) g[i] += self.grad[i];
        }
    });
}

template <typename S>
Var<S> log_eps(const Var<S>& x, S eps) {
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(x.val()[i] + eps);
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, eps](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / (px->value[i] + eps);
    });
}

/// log(max(x, eps)): keeps 1*log(1) == 0 and 0*log(eps) == 0 bit-exact, so
/// entropies of one-hot distributions are exactly zero.
template <typename S>
Var<S> log_floor(const Var<S>& x, S eps) {
    check_arg(eps > S(0), "log_floor: eps must be positive");
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(std::max(x.val()[i], eps));
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, eps](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (px->value[i] > eps) g[i] += self.grad[i] / px->value[i];
    });
}

template <typename S>
Var<S> sqrt_eps(const Var<S>& x, S eps) {
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(x.val()[i] + eps);
    auto px = x.node();
    auto n = make_op<S>(std::move(out), {px}, nullptr);
    if (n.requires_grad()) {
        auto self_node = n.node().get();
        n.node()->backward = [px, self_node](Node<S>& self) {
            auto& g = px->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i)
                g[i] += self.grad[i] / (S(2) * self_node->value[i]);
        };
    }
    return n;
}

template <typename S>
Var<S> reciprocal(const Var<S>& x) {
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = S(1) / x.val()[i];
    auto px = x.node();
    auto n = make_op<S>(std::move(out), {px}, nullptr);
    if (n.requires_grad()) {
        auto self_node = n.node().get();
        n.node()->backward = [px, self_node](Node<S>& self) {
            auto& g = px->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) {
                const S y = self_node->value[i];
                g[i] -= self.grad[i] * y * y;
            }
        };
    }
    return n;
}

template <typename S>
Var<S> reshape(const Var<S>& x, std::vector<int64_t> shape) {
    Tensor<S> out = x.val().reshaped(shape);
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

template <typename S>
Var<S> sum_all(const Var<S>& x) {
    S acc = 0;
    for (int64_t i = 0; i < x.val().numel(); ++i) acc += x.val()[i];
    auto px = x.node();
    return make_op<S>(Tensor<S>::scalar(acc), {px}, [px](Node<S>& self) {
        auto& g = px->grad_buf();
        const S go = self.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += go;
    });
}

template <typename S>
Var<S> mean_all(const Var<S>& x) {
    return affine(sum_all(x), S(1) / static_cast<S>(x.val().numel()), S(0));
}

/// Row sums: (R, C) -> (R).
template <typename S>
Var<S> sum_rows(const Var<S>& x) {
    check_arg(x.val().rank() == 2, "sum_rows: rank-2 input required");
    const int64_t rows = x.val().dim(0), cols = x.val().dim(1);
    Tensor<S> out({rows});
    for (int64_t r = 0; r < rows; ++r) {
        S acc = 0;
        for (int64_t c = 0; c < cols; ++c) acc += x.val().at(r, c);
        out[r] = acc;
    }
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, rows, cols](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) g.at(r, c) += self.grad[r];
    });
}

/// Sum over the middle axis of a rank-3 tensor: (A, B, C) -> (A, C).
template <typename S>
Var<S> sum_mid(const Var<S>& x) {
    check_arg(x.val().rank() == 3, "sum_mid: rank-3 input required");
    const int64_t a = x.val().dim(0), b = x.val().dim(1), c = x.val().dim(2);
    Tensor<S> out({a, c});
    for (int64_t i = 0; i < a; ++i)
        for (int64_t j = 0; j < b; ++j)
            for (int64_t k = 0; k < c; ++k) out.at(i, k) += x.val().at(i, j, k);
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, a, b, c](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < a; ++i)
            for (int64_t j = 0; j < b; ++j)
                for (int64_t k = 0; k < c; ++k) g.at(i, j, k) += self.grad.at(i, k);
    });
}

/// Dot product with a gradient-free vector; returns scalar.
template <typename S>
Var<S> dot_const(const Var<S>& x, Tensor<S> w) {
    check_arg(x.val().same_shape(w), "dot_const: shape mismatch");
    S acc = 0;
    for (int64_t i = 0; i < w.numel(); ++i) acc += x.val()[i] * w[i];
    auto px = x.node();
    auto wp = std::make_shared<Tensor<S>>(std::move(w));
    return make_op<S>(Tensor<S>::scalar(acc), {px}, [px, wp](Node<S>& self) {
        auto& g = px->grad_buf();
        const S go = self.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += go * (*wp)[i];
    });
}

/// Numerically stable softmax over the last axis of a rank-2 tensor.
template <typename S>
Var<S> softmax_rows(const Var<S>& x) {
    check_arg(x.val().rank() == 2, "softmax_rows: rank-2 input required");
    const int64_t rows = x.val().dim(0), cols = x.val().dim(1);
    Tensor<S> out(x.val().shape());
    for (int64_t r = 0; r < rows; ++r) {
        S m = x.val().at(r, 0);
        for (int64_t c = 1; c < cols; ++c) m = std::max(m, x.val().at(r, c));
        S z = 0;
        for (int64_t c = 0; c < cols; ++c) {
            const S e = std::exp(x.val().at(r, c) - m);
            out.at(r, c) = e;
            z += e;
        }
        for (int64_t c = 0; c < cols; ++c) out.at(r, c) /= z;
    }
    auto px = x.node();
    auto n = make_op<S>(std::move(out), {px}, nullptr);
    if (n.requires_grad()) {
        auto self_node = n.node().get();
        n.node()->backward = [px, self_node, rows, cols](Node<S>& self) {
            auto& g = px->grad_buf();
            for (int64_t r = 0; r < rows; ++r) {
                S dot = 0;
                for (int64_t c = 0; c < cols; ++c)
                    dot += self.grad.at(r, c) * self_node->value.at(r, c);
                for (int64_t c = 0; c < cols; ++c) {
                    const S y = self_node->value.at(r, c);
                    g.at(r, c) += y * (self.grad.at(r, c) - dot);
                }
            }
        };
    }
    return n;
}

/// Concatenate two rank-2 tensors along rows.
template <typename S>
Var<S> concat_rows(const Var<S>& a, const Var<S>& b) {
    check_arg(a.val().rank() == 2 && b.val().rank() == 2 && a.val().dim(1) == b.val().dim(1),
              "concat_rows: incompatible shapes");
    const int64_t ra = a.val().dim(0), rb = b.val().dim(0), cols = a.val().dim(1);
    Tensor<S> out({ra + rb, cols});
    for (int64_t i = 0; i < ra * cols; ++i) out[i] = a.val()[i];
    for (int64_t i = 0; i < rb * cols; ++i) out[ra * cols + i] = b.val()[i];
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {pa, pb}, [pa, pb, ra, rb, cols](Node<S>& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (int64_t i = 0; i < ra * cols; ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (int64_t i = 0; i < rb * cols; ++i) g[i] += self.grad[ra * cols + i];
        }
    });
}

/// Identity forward; backward multiplies the gradient by -lambda. Turns the
/// adversarial max-min into a single minimization.
template <typename S>
Var<S> grad_reverse(const Var<S>& x, S lambda) {
    Tensor<S> out = x.val();
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, lambda](Node<S>& self) {
        axpy(-lambda, self.grad, px->grad_buf());
    });
}

/// Value copy with no graph connection (stop-gradient).
template <typename S>
Var<S> detach(const Var<S>& x) {
    return Var<S>::leaf(x.val(), false);
}

/// Mean over the batch axis: (N, ...) -> (...).
template <typename S>
Var<S> mean_over_batch(const Var<S>& x) {
    check_arg(x.val().rank() >= 2, "mean_over_batch: need batch axis");
    const int64_t n = x.val().dim(0);
    const int64_t rest = x.val().numel() / n;
    std::vector<int64_t> shape(x.val().shape().begin() + 1, x.val().shape().end());
    Tensor<S> out(shape);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t i = 0; i < rest; ++i) out[i] += x.val()[b * rest + i];
    const S inv = S(1) / static_cast<S>(n);
    for (int64_t i = 0; i < rest; ++i) out[i] *= inv;
    auto px = x.node();
    return make_op<S>(std::move(out), {px}, [px, n, rest, inv](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t b = 0; b < n; ++b)
            for (int64_t i = 0; i < rest; ++i) g[b * rest + i] += inv * self.grad[i];
    });
}

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
    return add(a, b);
}
template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
    return sub(a, b);
}
template <typename S>
Var<S> operator*(S a, const Var<S>& x) {
    return affine(x, a, S(0));
}

} // namespace ag
} // namespace dapose
