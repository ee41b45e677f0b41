#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maskts/errors.hpp"
#include "maskts/numeric.hpp"
#include "maskts/tensor.hpp"

namespace maskts {

// Reverse-mode automatic differentiation over a static per-batch graph.
// Nodes are immutable after the forward pass; backward() walks the graph in
// reverse topological order and accumulates adjoints, summing over fan-out.

enum class Op {
    Constant,
    Param,
    Conv2d,
    Dense,
    Relu,
    Sigmoid,
    Softplus,
    Add,
    Multiply,
    GlobalAvgPool,
    ConcatChannels,
    Reshape,
    Clamp,
    MaskedBce,
};

template <class T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;  // materialized lazily, same shape as value
    Op op = Op::Constant;
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    // Scatters this node's grad into its parents' grads.
    std::function<void(NodeT<T>&)> backward_fn;
    std::string name;  // set for parameters, used in diagnostics

    // Allocates and zeroes the adjoint buffer; backward() calls this once per
    // pass for every node it will touch.
    void ensure_grad() {
        if (grad.numel() != value.numel() || grad.shape() != value.shape())
            grad = TensorT<T>(value.shape());
        else
            std::fill(grad.begin(), grad.end(), T(0));
    }

    // Allocates the adjoint buffer if missing but never clears an existing
    // one, so accumulation across fan-out consumers is preserved.
    void materialize_grad() {
        if (grad.numel() != value.numel() || grad.shape() != value.shape())
            grad = TensorT<T>(value.shape());
    }
};

template <class T>
using NodePtrT = std::shared_ptr<NodeT<T>>;

using Node = NodeT<float>;
using NodePtr = NodePtrT<float>;

template <class T>
NodePtrT<T> constant(TensorT<T> value) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(value);
    n->op = Op::Constant;
    return n;
}

template <class T>
NodePtrT<T> param(TensorT<T> value, std::string name = {}) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(value);
    n->op = Op::Param;
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

template <class T>
NodePtrT<T> make_op_node(Op op, TensorT<T> value, std::vector<NodePtrT<T>> parents,
                         std::function<void(NodeT<T>&)> backward_fn) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(value);
    n->op = op;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

// ---------------------------------------------------------------------------
// Convolution: stride 1, zero padding preserving H x W, odd square kernels.

template <class T>
NodePtrT<T> conv2d(NodePtrT<T> input, NodePtrT<T> kernel, NodePtrT<T> bias) {
    const auto& x = input->value;
    const auto& k = kernel->value;
    const auto& b = bias->value;
    require_shape(x.rank() == 4, "conv2d input must be rank 4, got " + x.shape_str());
    require_shape(k.rank() == 4, "conv2d kernel must be rank 4, got " + k.shape_str());
    require_shape(k.dim_h() == k.dim_w() && k.dim_h() % 2 == 1 && k.dim_h() <= 9,
                  "conv2d kernel must be odd, square and at most 9x9, got " + k.shape_str());
    require_shape(k.dim_c() == x.dim_c(), "conv2d kernel channels " + k.shape_str() +
                                              " do not match input " + x.shape_str());
    require_shape(b.rank() == 1 && b.shape()[0] == k.dim_n(),
                  "conv2d bias must have one entry per output channel");

    const int N = x.dim_n(), C = x.dim_c(), H = x.dim_h(), W = x.dim_w();
    const int O = k.dim_n(), K = k.dim_h(), P = K / 2;

    // Loops are blocked by output row so the accumulator row stays in cache
    // while the kernel taps sweep it.
    TensorT<T> out({N, O, H, W});
    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
            const T bv = b[o];
            for (int y = 0; y < H; ++y) {
                T* __restrict__ orow = &out.at(n, o, y, 0);
                for (int xi = 0; xi < W; ++xi) orow[xi] = bv;
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < K; ++ky) {
                        const int iy = y + ky - P;
                        if (iy < 0 || iy >= H) continue;
                        const T* xrow = &x.at(n, c, iy, 0);
                        for (int kx = 0; kx < K; ++kx) {
                            const int dx = kx - P;
                            const T kv = k.at(o, c, ky, kx);
                            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                            const T* __restrict__ xs = xrow + dx;
                            for (int xi = x0; xi < x1; ++xi) orow[xi] += kv * xs[xi];
                        }
                    }
            }
        }
    }

    auto backward = [input, kernel, bias, N, C, H, W, O, K, P](NodeT<T>& self) {
        const auto& g = self.grad;
        const auto& x = input->value;
        const auto& k = kernel->value;
        if (input->requires_grad) {
            input->materialize_grad();
            // d_in[iy][ix] += k[o][c][ky][kx] * g[iy - (ky-P)][ix - (kx-P)]
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int iy = 0; iy < H; ++iy) {
                        T* __restrict__ xrow = &input->grad.at(n, c, iy, 0);
                        for (int o = 0; o < O; ++o)
                            for (int ky = 0; ky < K; ++ky) {
                                const int y = iy - (ky - P);
                                if (y < 0 || y >= H) continue;
                                const T* grow = &g.at(n, o, y, 0);
                                for (int kx = 0; kx < K; ++kx) {
                                    const int dx = kx - P;
                                    const T kv = k.at(o, c, ky, kx);
                                    const int x0 = std::max(0, dx), x1 = std::min(W, W + dx);
                                    const T* __restrict__ gs = grow - dx;
                                    for (int xi = x0; xi < x1; ++xi) xrow[xi] += kv * gs[xi];
                                }
                            }
                    }
        }
        if (kernel->requires_grad) {
            kernel->materialize_grad();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    for (int c = 0; c < C; ++c) {
                        double acc[9 * 9] = {};  // K <= 9
                        for (int y = 0; y < H; ++y) {
                            const T* gp = &g.at(n, o, y, 0);
                            for (int ky = 0; ky < K; ++ky) {
                                const int iy = y + ky - P;
                                if (iy < 0 || iy >= H) continue;
                                const T* xp = &x.at(n, c, iy, 0);
                                for (int kx = 0; kx < K; ++kx) {
                                    const int dx = kx - P;
                                    const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                                    const T* __restrict__ grow = gp;
                                    const T* __restrict__ xs = xp + dx;
                                    double dot = 0.0;
                                    for (int xi = x0; xi < x1; ++xi)
                                        dot += double(grow[xi]) * double(xs[xi]);
                                    acc[ky * K + kx] += dot;
                                }
                            }
                        }
                        for (int ky = 0; ky < K; ++ky)
                            for (int kx = 0; kx < K; ++kx)
                                kernel->grad.at(o, c, ky, kx) += T(acc[ky * K + kx]);
                    }
        }
        if (bias->requires_grad) {
            bias->materialize_grad();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    const T* gp = &g.at(n, o, 0, 0);
                    double acc = 0.0;
                    for (int i = 0; i < H * W; ++i) acc += double(gp[i]);
                    bias->grad[o] += T(acc);
                }
        }
    };
    return make_op_node<T>(Op::Conv2d, std::move(out), {input, kernel, bias}, backward);
}

// ---------------------------------------------------------------------------
// Dense (affine) layer: input N x C, weight D x C, bias D -> N x D.

template <class T>
NodePtrT<T> dense(NodePtrT<T> input, NodePtrT<T> weight, NodePtrT<T> bias) {
    const auto& x = input->value;
    const auto& w = weight->value;
    const auto& b = bias->value;
    require_shape(x.rank() == 2, "dense input must be rank 2, got " + x.shape_str());
    require_shape(w.rank() == 2, "dense weight must be rank 2, got " + w.shape_str());
    require_shape(w.shape()[1] == x.shape()[1],
                  "dense inner dims disagree: " + x.shape_str() + " vs " + w.shape_str());
    require_shape(b.rank() == 1 && b.shape()[0] == w.shape()[0],
                  "dense bias must have one entry per output feature");

    const int N = x.shape()[0], C = x.shape()[1], D = w.shape()[0];
    TensorT<T> out({N, D});
    for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d) {
            double acc = double(b[d]);
            for (int c = 0; c < C; ++c)
                acc += double(x[int64_t(n) * C + c]) * double(w[int64_t(d) * C + c]);
            out[int64_t(n) * D + d] = T(acc);
        }

    auto backward = [input, weight, bias, N, C, D](NodeT<T>& self) {
        const auto& g = self.grad;
        if (input->requires_grad) {
            input->materialize_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int d = 0; d < D; ++d)
                        acc += double(g[int64_t(n) * D + d]) *
                               double(weight->value[int64_t(d) * C + c]);
                    input->grad[int64_t(n) * C + c] += T(acc);
                }
        }
        if (weight->requires_grad) {
            weight->materialize_grad();
            for (int d = 0; d < D; ++d)
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n)
                        acc += double(g[int64_t(n) * D + d]) *
                               double(input->value[int64_t(n) * C + c]);
                    weight->grad[int64_t(d) * C + c] += T(acc);
                }
        }
        if (bias->requires_grad) {
            bias->materialize_grad();
            for (int d = 0; d < D; ++d) {
                double acc = 0.0;
                for (int n = 0; n < N; ++n) acc += double(g[int64_t(n) * D + d]);
                bias->grad[d] += T(acc);
            }
        }
    };
    return make_op_node<T>(Op::Dense, std::move(out), {input, weight, bias}, backward);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

template <class T>
NodePtrT<T> relu(NodePtrT<T> input) {
    TensorT<T> out = input->value;
    for (auto& v : out) v = v > T(0) ? v : T(0);
    auto backward = [input](NodeT<T>& self) {
        if (!input->requires_grad) return;
        input->materialize_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            if (input->value[i] > T(0)) input->grad[i] += self.grad[i];
    };
    return make_op_node<T>(Op::Relu, std::move(out), {input}, backward);
}

template <class T>
NodePtrT<T> sigmoid(NodePtrT<T> input) {
    TensorT<T> out = input->value;
    for (auto& v : out) v = stable_sigmoid(v);
    auto backward = [input](NodeT<T>& self) {
        if (!input->requires_grad) return;
        input->materialize_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            input->grad[i] += self.grad[i] * sigmoid_derivative_from_value(self.value[i]);
    };
    return make_op_node<T>(Op::Sigmoid, std::move(out), {input}, backward);
}

template <class T>
NodePtrT<T> softplus(NodePtrT<T> input) {
    TensorT<T> out = input->value;
    for (auto& v : out) v = stable_softplus(v);
    auto backward = [input](NodeT<T>& self) {
        if (!input->requires_grad) return;
        input->materialize_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            input->grad[i] += self.grad[i] * stable_sigmoid(input->value[i]);
    };
    return make_op_node<T>(Op::Softplus, std::move(out), {input}, backward);
}

template <class T>
NodePtrT<T> clamp(NodePtrT<T> input, T lo, T hi) {
    TensorT<T> out = input->value;
    for (auto& v : out) v = std::min(std::max(v, lo), hi);
    auto backward = [input, lo, hi](NodeT<T>& self) {
        if (!input->requires_grad) return;
        input->materialize_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            const T v = input->value[i];
            if (v > lo && v < hi) input->grad[i] += self.grad[i];
        }
    };
    return make_op_node<T>(Op::Clamp, std::move(out), {input}, backward);
}

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly, or one operand may be a
// per-channel tensor (N or 1, C, 1, 1) applied across the H x W plane of the
// other.

namespace detail {

enum class BroadcastKind { None, LeftChannel, RightChannel };

template <class T>
BroadcastKind broadcast_kind(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() == b.shape()) return BroadcastKind::None;
    auto channel_of = [](const TensorT<T>& small, const TensorT<T>& big) {
        return small.rank() == 4 && big.rank() == 4 && small.dim_h() == 1 &&
               small.dim_w() == 1 && small.dim_c() == big.dim_c() &&
               (small.dim_n() == 1 || small.dim_n() == big.dim_n());
    };
    if (channel_of(b, a)) return BroadcastKind::RightChannel;
    if (channel_of(a, b)) return BroadcastKind::LeftChannel;
    throw ShapeError("shapes not broadcastable: " + a.shape_str() + " vs " + b.shape_str());
}

template <class T>
int64_t channel_index(const TensorT<T>& small, int n, int c) {
    return small.dim_n() == 1 ? c : int64_t(n) * small.dim_c() + c;
}

}  // namespace detail

template <class T, class Fwd, class BwdA, class BwdB>
NodePtrT<T> binary_elementwise(Op op, NodePtrT<T> a, NodePtrT<T> b, Fwd fwd, BwdA bwd_a,
                               BwdB bwd_b) {
    using detail::BroadcastKind;
    const BroadcastKind kind = detail::broadcast_kind(a->value, b->value);
    const auto& big = kind == BroadcastKind::LeftChannel ? b->value : a->value;
    const int N = big.dim_n(), C = big.dim_c(), HW = big.dim_h() * big.dim_w();

    TensorT<T> out(big.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const int64_t base = (int64_t(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
                const int64_t ia = kind == BroadcastKind::LeftChannel
                                       ? detail::channel_index(a->value, n, c)
                                       : base + i;
                const int64_t ib = kind == BroadcastKind::RightChannel
                                       ? detail::channel_index(b->value, n, c)
                                       : base + i;
                out[base + i] = fwd(a->value[ia], b->value[ib]);
            }
        }

    auto backward = [a, b, kind, N, C, HW, bwd_a, bwd_b](NodeT<T>& self) {
        if (a->requires_grad) a->materialize_grad();
        if (b->requires_grad) b->materialize_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const int64_t base = (int64_t(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    const int64_t ia = kind == BroadcastKind::LeftChannel
                                           ? detail::channel_index(a->value, n, c)
                                           : base + i;
                    const int64_t ib = kind == BroadcastKind::RightChannel
                                           ? detail::channel_index(b->value, n, c)
                                           : base + i;
                    const T g = self.grad[base + i];
                    if (a->requires_grad) a->grad[ia] += g * bwd_a(a->value[ia], b->value[ib]);
                    if (b->requires_grad) b->grad[ib] += g * bwd_b(a->value[ia], b->value[ib]);
                }
            }
    };
    return make_op_node<T>(op, std::move(out), {a, b}, backward);
}

template <class T>
NodePtrT<T> add(NodePtrT<T> a, NodePtrT<T> b) {
    return binary_elementwise<T>(
        Op::Add, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <class T>
NodePtrT<T> multiply(NodePtrT<T> a, NodePtrT<T> b) {
    return binary_elementwise<T>(
        Op::Multiply, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

// ---------------------------------------------------------------------------

template <class T>
NodePtrT<T> global_avg_pool(NodePtrT<T> input) {
    const auto& x = input->value;
    require_shape(x.rank() == 4, "global_avg_pool input must be rank 4");
    const int N = x.dim_n(), C = x.dim_c(), HW = x.dim_h() * x.dim_w();
    TensorT<T> out({N, C, 1, 1});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = &x.at(n, c, 0, 0);
            double acc = 0.0;
            for (int i = 0; i < HW; ++i) acc += double(p[i]);
            out[int64_t(n) * C + c] = T(acc / HW);
        }
    auto backward = [input, N, C, HW](NodeT<T>& self) {
        if (!input->requires_grad) return;
        input->materialize_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T g = self.grad[int64_t(n) * C + c] / T(HW);
                T* p = &input->grad.at(n, c, 0, 0);
                for (int i = 0; i < HW; ++i) p[i] += g;
            }
    };
    return make_op_node<T>(Op::GlobalAvgPool, std::move(out), {input}, backward);
}

template <class T>
NodePtrT<T> concat_channels(std::vector<NodePtrT<T>> inputs) {
    require(!inputs.empty(), "concat_channels requires at least one input");
    const auto& first = inputs[0]->value;
    require_shape(first.rank() == 4, "concat_channels inputs must be rank 4");
    int total_c = 0;
    for (const auto& in : inputs) {
        const auto& v = in->value;
        require_shape(v.rank() == 4 && v.dim_n() == first.dim_n() &&
                          v.dim_h() == first.dim_h() && v.dim_w() == first.dim_w(),
                      "concat_channels inputs must share N, H, W");
        total_c += v.dim_c();
    }
    const int N = first.dim_n(), H = first.dim_h(), W = first.dim_w();
    const int64_t plane = int64_t(H) * W;
    TensorT<T> out({N, total_c, H, W});
    for (int n = 0; n < N; ++n) {
        int co = 0;
        for (const auto& in : inputs) {
            const auto& v = in->value;
            for (int c = 0; c < v.dim_c(); ++c, ++co)
                std::copy_n(&v.at(n, c, 0, 0), plane, &out.at(n, co, 0, 0));
        }
    }
    auto backward = [inputs, N, plane](NodeT<T>& self) {
        for (int n = 0; n < N; ++n) {
            int co = 0;
            for (const auto& in : inputs) {
                const int ci = in->value.dim_c();
                if (in->requires_grad) {
                    in->materialize_grad();
                    for (int c = 0; c < ci; ++c) {
                        const T* g = &self.grad.at(n, co + c, 0, 0);
                        T* p = &in->grad.at(n, c, 0, 0);
                        for (int64_t i = 0; i < plane; ++i) p[i] += g[i];
                    }
                }
                co += ci;
            }
        }
    };
    std::vector<NodePtrT<T>> parents = inputs;
    return make_op_node<T>(Op::ConcatChannels, std::move(out), std::move(parents), backward);
}

template <class T>
NodePtrT<T> reshape(NodePtrT<T> input, std::vector<int> new_shape) {
    TensorT<T> out(std::move(new_shape), std::vector<T>(input->value.begin(), input->value.end()));
    require_shape(out.numel() == input->value.numel(),
                  "reshape must preserve element count: " + input->value.shape_str() + " -> " +
                      out.shape_str());
    auto backward = [input](NodeT<T>& self) {
        if (!input->requires_grad) return;
        input->materialize_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) input->grad[i] += self.grad[i];
    };
    return make_op_node<T>(Op::Reshape, std::move(out), {input}, backward);
}

// ---------------------------------------------------------------------------
// backward: reverse topological accumulation from a scalar root.

template <class T>
std::vector<NodeT<T>*> topo_order(NodeT<T>* root) {
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> seen;
    std::vector<std::pair<NodeT<T>*, size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT<T>* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // parents precede children
}

template <class T>
void backward(const NodePtrT<T>& root) {
    require(root->value.numel() == 1, "backward requires a scalar-valued root, got shape " +
                                          root->value.shape_str());
    auto order = topo_order(root.get());
    for (NodeT<T>* n : order)
        if (n->requires_grad) n->ensure_grad();
    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<T>* n = *it;
        if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace maskts
