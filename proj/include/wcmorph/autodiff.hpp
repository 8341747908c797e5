#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "wcmorph/errors.hpp"
#include "wcmorph/tensor.hpp"

namespace wcm {

// Reverse-mode autodiff over dense tensors. Graphs are built eagerly:
// every op computes its forward value on construction and registers a
// closure that propagates the upstream gradient to its inputs.
//
// Gradient buffers are accumulators: backward() adds the gradients of
// one pass into Node::grad, so running backward twice without
// zero_grad() yields exactly twice the single-pass gradients.

enum class OpKind {
    leaf,
    add,
    mul,
    scale,
    fully_connected,
    conv2d,
    upsample_nearest,
    leaky_relu,
    sigmoid,
    batch_norm,
    mse_loss,
    l2_normalize,
    mean_angle,
    concat_channels,
    reshape,
    add_bias,
    softmax_cross_entropy,
};

struct Node {
    OpKind op = OpKind::leaf;
    std::vector<std::shared_ptr<Node>> inputs;
    Tensor value;
    Tensor grad;     // persistent accumulator, shaped like value
    Tensor scratch;  // per-pass upstream gradient, managed by backward()
    bool requires_grad = false;
    // Reads this->scratch, adds contributions into inputs' scratch.
    std::function<void(Node&)> backward_fn;
};

class Var {
public:
    Var() = default;

    static Var leaf(Tensor value, bool requires_grad) {
        value.require_finite("graph leaf");
        auto n = std::make_shared<Node>();
        n->op = OpKind::leaf;
        n->value = std::move(value);
        n->grad = Tensor(n->value.shape());
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value() const { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::shared_ptr<Node>& node() const { return node_; }
    explicit operator bool() const { return node_ != nullptr; }

    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_node(OpKind op, std::vector<std::shared_ptr<Node>> inputs, Tensor value,
                     std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->inputs = std::move(inputs);
    n->value = std::move(value);
    n->grad = Tensor(n->value.shape());
    for (const auto& in : n->inputs) {
        if (in->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Var(std::move(n));
}

// Post-order DFS; reversing the result gives a topological order with
// every node before its inputs.
inline std::vector<Node*> post_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace detail

inline void backward(const Var& output) {
    if (!output.value().is_scalar()) {
        throw ArgumentError("backward: output must be scalar, got shape " +
                            shape_str(output.value().shape()));
    }
    auto order = detail::post_order(output.node().get());
    for (Node* n : order) n->scratch = Tensor(n->value.shape());
    output.node()->scratch[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
    for (Node* n : order) {
        if (!n->requires_grad) continue;
        for (std::size_t i = 0; i < n->grad.numel(); ++i) n->grad[i] += n->scratch[i];
    }
    for (Node* n : order) n->scratch = Tensor();
}

inline void zero_grad(const Var& root) {
    for (Node* n : detail::post_order(root.node().get())) n->grad.zero();
}

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out(a.value().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    return detail::make_node(OpKind::add, {a.node(), b.node()}, std::move(out), [](Node& n) {
        for (int s = 0; s < 2; ++s) {
            Node* in = n.inputs[s].get();
            if (!in->requires_grad) continue;
            for (std::size_t i = 0; i < n.scratch.numel(); ++i) in->scratch[i] += n.scratch[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out(a.value().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::make_node(OpKind::mul, {a.node(), b.node()}, std::move(out), [](Node& n) {
        Node* a = n.inputs[0].get();
        Node* b = n.inputs[1].get();
        if (a->requires_grad) {
            for (std::size_t i = 0; i < n.scratch.numel(); ++i)
                a->scratch[i] += n.scratch[i] * b->value[i];
        }
        if (b->requires_grad) {
            for (std::size_t i = 0; i < n.scratch.numel(); ++i)
                b->scratch[i] += n.scratch[i] * a->value[i];
        }
    });
}

inline Var scale(const Var& x, double c) {
    Tensor out(x.value().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * c;
    return detail::make_node(OpKind::scale, {x.node()}, std::move(out), [c](Node& n) {
        Node* in = n.inputs[0].get();
        if (!in->requires_grad) return;
        for (std::size_t i = 0; i < n.scratch.numel(); ++i) in->scratch[i] += n.scratch[i] * c;
    });
}

inline Var leaky_relu(const Var& x, double slope) {
    Tensor out(x.value().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double v = x.value()[i];
        out[i] = v > 0.0 ? v : slope * v;
    }
    // Subgradient at exactly 0 is `slope` (fixed tie-break).
    return detail::make_node(OpKind::leaky_relu, {x.node()}, std::move(out), [slope](Node& n) {
        Node* in = n.inputs[0].get();
        if (!in->requires_grad) return;
        for (std::size_t i = 0; i < n.scratch.numel(); ++i) {
            double d = in->value[i] > 0.0 ? 1.0 : slope;
            in->scratch[i] += n.scratch[i] * d;
        }
    });
}

inline Var sigmoid(const Var& x) {
    Tensor out(x.value().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double v = x.value()[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    return detail::make_node(OpKind::sigmoid, {x.node()}, std::move(out), [](Node& n) {
        Node* in = n.inputs[0].get();
        if (!in->requires_grad) return;
        for (std::size_t i = 0; i < n.scratch.numel(); ++i) {
            double y = n.value[i];
            in->scratch[i] += n.scratch[i] * y * (1.0 - y);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear layers

// y = x W^T (+ b). x is [n_in] or [batch x n_in]; W is [n_out x n_in].
inline Var fully_connected(const Var& x, const Var& W, const Var* b = nullptr) {
    const Tensor& xv = x.value();
    const Tensor& Wv = W.value();
    if (Wv.rank() != 2) {
        throw DimensionError("fully_connected: weight must be rank 2, got " +
                             shape_str(Wv.shape()));
    }
    if (xv.rank() != 1 && xv.rank() != 2) {
        throw DimensionError("fully_connected: input must be rank 1 or 2, got " +
                             shape_str(xv.shape()));
    }
    const std::size_t n_out = Wv.dim(0), n_in = Wv.dim(1);
    const bool batched = xv.rank() == 2;
    const std::size_t batch = batched ? xv.dim(0) : 1;
    const std::size_t x_in = batched ? xv.dim(1) : xv.dim(0);
    if (x_in != n_in) {
        throw DimensionError("fully_connected: input width " + std::to_string(x_in) +
                             " does not match weight " + shape_str(Wv.shape()));
    }
    if (b && (b->value().rank() != 1 || b->value().dim(0) != n_out)) {
        throw DimensionError("fully_connected: bias must be [n_out]");
    }

    Tensor out(batched ? Shape{batch, n_out} : Shape{n_out});
    for (std::size_t n = 0; n < batch; ++n) {
        const double* xr = xv.data() + n * n_in;
        double* yr = out.data() + n * n_out;
        for (std::size_t o = 0; o < n_out; ++o) {
            const double* wr = Wv.data() + o * n_in;
            double acc = b ? b->value()[o] : 0.0;
            for (std::size_t i = 0; i < n_in; ++i) acc += wr[i] * xr[i];
            yr[o] = acc;
        }
    }

    std::vector<std::shared_ptr<Node>> inputs{x.node(), W.node()};
    if (b) inputs.push_back(b->node());
    return detail::make_node(
        OpKind::fully_connected, std::move(inputs), std::move(out),
        [batch, n_in, n_out](Node& n) {
            Node* xn = n.inputs[0].get();
            Node* wn = n.inputs[1].get();
            Node* bn = n.inputs.size() > 2 ? n.inputs[2].get() : nullptr;
            for (std::size_t s = 0; s < batch; ++s) {
                const double* g = n.scratch.data() + s * n_out;
                const double* xr = xn->value.data() + s * n_in;
                if (xn->requires_grad) {
                    double* dx = xn->scratch.data() + s * n_in;
                    for (std::size_t o = 0; o < n_out; ++o) {
                        const double* wr = wn->value.data() + o * n_in;
                        for (std::size_t i = 0; i < n_in; ++i) dx[i] += g[o] * wr[i];
                    }
                }
                if (wn->requires_grad) {
                    for (std::size_t o = 0; o < n_out; ++o) {
                        double* dw = wn->scratch.data() + o * n_in;
                        for (std::size_t i = 0; i < n_in; ++i) dw[i] += g[o] * xr[i];
                    }
                }
                if (bn && bn->requires_grad) {
                    for (std::size_t o = 0; o < n_out; ++o) bn->scratch[o] += g[o];
                }
            }
        });
}

inline Var fully_connected(const Var& x, const Var& W, const Var& b) {
    return fully_connected(x, W, &b);
}

// ---------------------------------------------------------------------------
// Convolution

// x is [c_in x h x w] or [n x c_in x h x w]; k is [c_out x c_in x kh x kw].
// Zero padding, output extent floor((h + 2p - kh)/stride) + 1.
inline Var conv2d(const Var& x, const Var& k, int stride, int padding) {
    if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
    if (padding < 0) throw ArgumentError("conv2d: padding must be >= 0");
    const Tensor& xv = x.value();
    const Tensor& kv = k.value();
    if (kv.rank() != 4) {
        throw DimensionError("conv2d: kernel must be rank 4, got " + shape_str(kv.shape()));
    }
    if (xv.rank() != 3 && xv.rank() != 4) {
        throw DimensionError("conv2d: input must be rank 3 or 4, got " + shape_str(xv.shape()));
    }
    const bool batched = xv.rank() == 4;
    const std::size_t N = batched ? xv.dim(0) : 1;
    const std::size_t C = xv.dim(batched ? 1 : 0);
    const std::size_t H = xv.dim(batched ? 2 : 1);
    const std::size_t W = xv.dim(batched ? 3 : 2);
    const std::size_t Co = kv.dim(0), Ci = kv.dim(1), Kh = kv.dim(2), Kw = kv.dim(3);
    if (Ci != C) {
        throw DimensionError("conv2d: kernel channels " + std::to_string(Ci) +
                             " do not match input channels " + std::to_string(C));
    }
    if (Kh > H + 2 * static_cast<std::size_t>(padding) ||
        Kw > W + 2 * static_cast<std::size_t>(padding)) {
        throw DimensionError("conv2d: kernel larger than padded input");
    }
    const std::size_t Ho = (H + 2 * padding - Kh) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - Kw) / stride + 1;

    Tensor out(batched ? Shape{N, Co, Ho, Wo} : Shape{Co, Ho, Wo});
    const long s = stride, p = padding;
    for (std::size_t n = 0; n < N; ++n) {
        const double* xb = xv.data() + n * C * H * W;
        double* yb = out.data() + n * Co * Ho * Wo;
        for (std::size_t co = 0; co < Co; ++co) {
            const double* kc = kv.data() + co * C * Kh * Kw;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < C; ++ci) {
                        const double* xc = xb + ci * H * W;
                        const double* kk = kc + ci * Kh * Kw;
                        for (std::size_t ky = 0; ky < Kh; ++ky) {
                            const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - p;
                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                            const double* xrow = xc + iy * W;
                            const double* krow = kk + ky * Kw;
                            for (std::size_t kx = 0; kx < Kw; ++kx) {
                                const long ix =
                                    static_cast<long>(ox) * s + static_cast<long>(kx) - p;
                                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                acc += xrow[ix] * krow[kx];
                            }
                        }
                    }
                    yb[(co * Ho + oy) * Wo + ox] = acc;
                }
            }
        }
    }

    return detail::make_node(
        OpKind::conv2d, {x.node(), k.node()}, std::move(out),
        [N, C, H, W, Co, Kh, Kw, Ho, Wo, s, p](Node& n) {
            Node* xn = n.inputs[0].get();
            Node* kn = n.inputs[1].get();
            const bool need_dx = xn->requires_grad;
            const bool need_dk = kn->requires_grad;
            for (std::size_t b = 0; b < N; ++b) {
                const double* xb = xn->value.data() + b * C * H * W;
                double* dxb = need_dx ? xn->scratch.data() + b * C * H * W : nullptr;
                const double* gb = n.scratch.data() + b * Co * Ho * Wo;
                for (std::size_t co = 0; co < Co; ++co) {
                    const double* kc = kn->value.data() + co * C * Kh * Kw;
                    double* dkc = need_dk ? kn->scratch.data() + co * C * Kh * Kw : nullptr;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const double g = gb[(co * Ho + oy) * Wo + ox];
                            if (g == 0.0) continue;
                            for (std::size_t ci = 0; ci < C; ++ci) {
                                const double* xc = xb + ci * H * W;
                                double* dxc = need_dx ? dxb + ci * H * W : nullptr;
                                const double* kk = kc + ci * Kh * Kw;
                                double* dkk = need_dk ? dkc + ci * Kh * Kw : nullptr;
                                for (std::size_t ky = 0; ky < Kh; ++ky) {
                                    const long iy =
                                        static_cast<long>(oy) * s + static_cast<long>(ky) - p;
                                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                    for (std::size_t kx = 0; kx < Kw; ++kx) {
                                        const long ix =
                                            static_cast<long>(ox) * s + static_cast<long>(kx) - p;
                                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                        if (need_dx) dxc[iy * W + ix] += g * kk[ky * Kw + kx];
                                        if (need_dk) dkk[ky * Kw + kx] += g * xc[iy * W + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// Nearest-neighbour upsampling by an integer factor; gradient sums the
// replicated positions.
inline Var upsample_nearest(const Var& x, int factor) {
    if (factor < 1) throw ArgumentError("upsample_nearest: factor must be >= 1");
    const Tensor& xv = x.value();
    if (xv.rank() != 3 && xv.rank() != 4) {
        throw DimensionError("upsample_nearest: input must be rank 3 or 4, got " +
                             shape_str(xv.shape()));
    }
    const bool batched = xv.rank() == 4;
    const std::size_t N = batched ? xv.dim(0) : 1;
    const std::size_t C = xv.dim(batched ? 1 : 0);
    const std::size_t H = xv.dim(batched ? 2 : 1);
    const std::size_t W = xv.dim(batched ? 3 : 2);
    const std::size_t f = static_cast<std::size_t>(factor);
    const std::size_t Ho = H * f, Wo = W * f;

    Tensor out(batched ? Shape{N, C, Ho, Wo} : Shape{C, Ho, Wo});
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* xc = xv.data() + nc * H * W;
        double* yc = out.data() + nc * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
            const double* xrow = xc + (oy / f) * W;
            double* yrow = yc + oy * Wo;
            for (std::size_t ox = 0; ox < Wo; ++ox) yrow[ox] = xrow[ox / f];
        }
    }

    return detail::make_node(OpKind::upsample_nearest, {x.node()}, std::move(out),
                             [N, C, H, W, f, Ho, Wo](Node& n) {
                                 Node* in = n.inputs[0].get();
                                 if (!in->requires_grad) return;
                                 for (std::size_t nc = 0; nc < N * C; ++nc) {
                                     double* dx = in->scratch.data() + nc * H * W;
                                     const double* g = n.scratch.data() + nc * Ho * Wo;
                                     for (std::size_t oy = 0; oy < Ho; ++oy) {
                                         for (std::size_t ox = 0; ox < Wo; ++ox) {
                                             dx[(oy / f) * W + ox / f] += g[oy * Wo + ox];
                                         }
                                     }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class BnMode { train, eval };

// Normalizes per feature: over the batch for [batch x features] input, or
// per channel over (batch, h, w) for [batch x c x h x w] input. In train
// mode the running stats are updated in place with momentum 0.9; eval mode
// reads them. gamma/beta are the learned scale/shift.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                      Tensor& running_var, BnMode mode, double eps = 1e-5,
                      double momentum = 0.9) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 && xv.rank() != 4) {
        throw DimensionError("batch_norm: input must be rank 2 or 4, got " +
                             shape_str(xv.shape()));
    }
    const std::size_t N = xv.dim(0);
    const std::size_t F = xv.dim(1);
    const std::size_t HW = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
    const std::size_t M = N * HW;  // elements per feature
    if (gamma.value().numel() != F || beta.value().numel() != F ||
        running_mean.numel() != F || running_var.numel() != F) {
        throw DimensionError("batch_norm: scale/shift/running stats must have one entry per feature");
    }
    if (mode == BnMode::train && N < 2) {
        throw ArgumentError("batch_norm: train mode requires batch >= 2");
    }

    Tensor mean({F}), var({F});
    if (mode == BnMode::train) {
        for (std::size_t f = 0; f < F; ++f) {
            double sum = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const double* base = xv.data() + (n * F + f) * HW;
                for (std::size_t i = 0; i < HW; ++i) sum += base[i];
            }
            const double mu = sum / static_cast<double>(M);
            double sq = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const double* base = xv.data() + (n * F + f) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double d = base[i] - mu;
                    sq += d * d;
                }
            }
            mean[f] = mu;
            var[f] = sq / static_cast<double>(M);
            running_mean[f] = momentum * running_mean[f] + (1.0 - momentum) * mean[f];
            running_var[f] = momentum * running_var[f] + (1.0 - momentum) * var[f];
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    Tensor inv_std({F});
    for (std::size_t f = 0; f < F; ++f) inv_std[f] = 1.0 / std::sqrt(var[f] + eps);

    Tensor out(xv.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t f = 0; f < F; ++f) {
            const double* src = xv.data() + (n * F + f) * HW;
            double* dst = out.data() + (n * F + f) * HW;
            const double mu = mean[f], is = inv_std[f];
            const double g = gamma.value()[f], b = beta.value()[f];
            for (std::size_t i = 0; i < HW; ++i) dst[i] = g * (src[i] - mu) * is + b;
        }
    }

    const bool train = mode == BnMode::train;
    return detail::make_node(
        OpKind::batch_norm, {x.node(), gamma.node(), beta.node()}, std::move(out),
        [N, F, HW, M, mean, inv_std, train](Node& n) {
            Node* xn = n.inputs[0].get();
            Node* gn = n.inputs[1].get();
            Node* bn = n.inputs[2].get();
            for (std::size_t f = 0; f < F; ++f) {
                const double mu = mean[f], is = inv_std[f];
                const double gamma_v = gn->value[f];
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t s = 0; s < N; ++s) {
                    const double* gr = n.scratch.data() + (s * F + f) * HW;
                    const double* xr = xn->value.data() + (s * F + f) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_g += gr[i];
                        sum_gx += gr[i] * (xr[i] - mu) * is;
                    }
                }
                if (gn->requires_grad) gn->scratch[f] += sum_gx;
                if (bn->requires_grad) bn->scratch[f] += sum_g;
                if (!xn->requires_grad) continue;
                const double m = static_cast<double>(M);
                for (std::size_t s = 0; s < N; ++s) {
                    const double* gr = n.scratch.data() + (s * F + f) * HW;
                    const double* xr = xn->value.data() + (s * F + f) * HW;
                    double* dx = xn->scratch.data() + (s * F + f) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        const double xhat = (xr[i] - mu) * is;
                        if (train) {
                            dx[i] += gamma_v * is * (gr[i] - sum_g / m - xhat * sum_gx / m);
                        } else {
                            dx[i] += gamma_v * is * gr[i];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Losses and normalization

inline Var mse_loss(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mse_loss");
    const std::size_t n = a.value().numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    return detail::make_node(OpKind::mse_loss, {a.node(), b.node()}, std::move(out), [n](Node& nd) {
        Node* an = nd.inputs[0].get();
        Node* bn = nd.inputs[1].get();
        const double up = nd.scratch[0];
        const double c = 2.0 * up / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = an->value[i] - bn->value[i];
            if (an->requires_grad) an->scratch[i] += c * d;
            if (bn->requires_grad) bn->scratch[i] -= c * d;
        }
    });
}

// Unit-normalizes a vector, or each row of a [batch x dim] matrix.
inline Var l2_normalize(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 1 && xv.rank() != 2) {
        throw DimensionError("l2_normalize: input must be rank 1 or 2, got " +
                             shape_str(xv.shape()));
    }
    const std::size_t B = xv.rank() == 2 ? xv.dim(0) : 1;
    const std::size_t D = xv.rank() == 2 ? xv.dim(1) : xv.dim(0);

    Tensor out(xv.shape());
    std::vector<double> norms(B);
    for (std::size_t r = 0; r < B; ++r) {
        const double* src = xv.data() + r * D;
        double sq = 0.0;
        for (std::size_t i = 0; i < D; ++i) sq += src[i] * src[i];
        const double norm = std::sqrt(sq);
        if (norm <= 1e-12) {
            throw DegenerateInputError("l2_normalize: near-zero norm input (row " +
                                       std::to_string(r) + ")");
        }
        norms[r] = norm;
        double* dst = out.data() + r * D;
        for (std::size_t i = 0; i < D; ++i) dst[i] = src[i] / norm;
    }

    return detail::make_node(OpKind::l2_normalize, {x.node()}, std::move(out),
                             [B, D, norms](Node& n) {
                                 Node* in = n.inputs[0].get();
                                 if (!in->requires_grad) return;
                                 for (std::size_t r = 0; r < B; ++r) {
                                     const double* g = n.scratch.data() + r * D;
                                     const double* y = n.value.data() + r * D;
                                     double* dx = in->scratch.data() + r * D;
                                     double gy = 0.0;
                                     for (std::size_t i = 0; i < D; ++i) gy += g[i] * y[i];
                                     for (std::size_t i = 0; i < D; ++i) {
                                         dx[i] += (g[i] - gy * y[i]) / norms[r];
                                     }
                                 }
                             });
}

// Mean over rows of arccos(clamp(u_i . v_i)); rows are expected to be
// unit-norm already (the op differentiates the raw dot product). This is
// the latent dissimilarity term of the morph loss.
inline Var mean_angle(const Var& u, const Var& v) {
    require_same_shape(u.value(), v.value(), "mean_angle");
    const Tensor& uv = u.value();
    if (uv.rank() != 1 && uv.rank() != 2) {
        throw DimensionError("mean_angle: input must be rank 1 or 2, got " +
                             shape_str(uv.shape()));
    }
    const std::size_t B = uv.rank() == 2 ? uv.dim(0) : 1;
    const std::size_t D = uv.rank() == 2 ? uv.dim(1) : uv.dim(0);
    constexpr double kClamp = 1.0 - 1e-12;

    std::vector<double> cosines(B);
    double total = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
        const double* ur = uv.data() + r * D;
        const double* vr = v.value().data() + r * D;
        double c = 0.0;
        for (std::size_t i = 0; i < D; ++i) c += ur[i] * vr[i];
        c = std::clamp(c, -kClamp, kClamp);
        cosines[r] = c;
        total += std::acos(c);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(B));

    return detail::make_node(
        OpKind::mean_angle, {u.node(), v.node()}, std::move(out), [B, D, cosines](Node& n) {
            Node* un = n.inputs[0].get();
            Node* vn = n.inputs[1].get();
            const double up = n.scratch[0] / static_cast<double>(B);
            for (std::size_t r = 0; r < B; ++r) {
                const double c = cosines[r];
                const double d_acos = -1.0 / std::sqrt(1.0 - c * c);
                const double* ur = un->value.data() + r * D;
                const double* vr = vn->value.data() + r * D;
                if (un->requires_grad) {
                    double* du = un->scratch.data() + r * D;
                    for (std::size_t i = 0; i < D; ++i) du[i] += up * d_acos * vr[i];
                }
                if (vn->requires_grad) {
                    double* dv = vn->scratch.data() + r * D;
                    for (std::size_t i = 0; i < D; ++i) dv[i] += up * d_acos * ur[i];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Structure ops

inline Var reshape(const Var& x, Shape shape) {
    if (shape_numel(shape) != x.value().numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.value().shape()) + " as " +
                             shape_str(shape));
    }
    Tensor out(std::move(shape), x.value().vec());
    return detail::make_node(OpKind::reshape, {x.node()}, std::move(out), [](Node& n) {
        Node* in = n.inputs[0].get();
        if (!in->requires_grad) return;
        for (std::size_t i = 0; i < n.scratch.numel(); ++i) in->scratch[i] += n.scratch[i];
    });
}

// Concatenates two [n x c x h x w] maps along the channel axis.
inline Var concat_channels(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 4 || bv.rank() != 4) {
        throw DimensionError("concat_channels: inputs must be rank 4");
    }
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
        throw DimensionError("concat_channels: batch/spatial extents differ: " +
                             shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    const std::size_t N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
    const std::size_t HW = av.dim(2) * av.dim(3);
    Tensor out({N, Ca + Cb, av.dim(2), av.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        double* dst = out.data() + n * (Ca + Cb) * HW;
        std::copy_n(av.data() + n * Ca * HW, Ca * HW, dst);
        std::copy_n(bv.data() + n * Cb * HW, Cb * HW, dst + Ca * HW);
    }
    return detail::make_node(OpKind::concat_channels, {a.node(), b.node()}, std::move(out),
                             [N, Ca, Cb, HW](Node& n) {
                                 Node* an = n.inputs[0].get();
                                 Node* bn = n.inputs[1].get();
                                 for (std::size_t s = 0; s < N; ++s) {
                                     const double* g = n.scratch.data() + s * (Ca + Cb) * HW;
                                     if (an->requires_grad) {
                                         double* da = an->scratch.data() + s * Ca * HW;
                                         for (std::size_t i = 0; i < Ca * HW; ++i) da[i] += g[i];
                                     }
                                     if (bn->requires_grad) {
                                         double* db = bn->scratch.data() + s * Cb * HW;
                                         for (std::size_t i = 0; i < Cb * HW; ++i)
                                             db[i] += g[Ca * HW + i];
                                     }
                                 }
                             });
}

// Adds a bias broadcast over the batch axis: [n x c x h x w] + [c x h x w]
// (the decoder's untied output bias) or [batch x f] + [f].
inline Var add_bias(const Var& x, const Var& bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (xv.rank() < 2 || bv.rank() != xv.rank() - 1) {
        throw DimensionError("add_bias: bias must drop exactly the batch axis");
    }
    for (std::size_t i = 0; i + 1 < xv.rank(); ++i) {
        if (xv.dim(i + 1) != bv.dim(i)) {
            throw DimensionError("add_bias: trailing extents differ: " + shape_str(xv.shape()) +
                                 " vs " + shape_str(bv.shape()));
        }
    }
    const std::size_t N = xv.dim(0);
    const std::size_t S = bv.numel();
    Tensor out(xv.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const double* src = xv.data() + n * S;
        double* dst = out.data() + n * S;
        for (std::size_t i = 0; i < S; ++i) dst[i] = src[i] + bv[i];
    }
    return detail::make_node(OpKind::add_bias, {x.node(), bias.node()}, std::move(out),
                             [N, S](Node& n) {
                                 Node* xn = n.inputs[0].get();
                                 Node* bn = n.inputs[1].get();
                                 for (std::size_t s = 0; s < N; ++s) {
                                     const double* g = n.scratch.data() + s * S;
                                     if (xn->requires_grad) {
                                         double* dx = xn->scratch.data() + s * S;
                                         for (std::size_t i = 0; i < S; ++i) dx[i] += g[i];
                                     }
                                     if (bn->requires_grad) {
                                         for (std::size_t i = 0; i < S; ++i) bn->scratch[i] += g[i];
                                     }
                                 }
                             });
}

// Mean cross-entropy of softmax(logits) against integer labels.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 2) {
        throw DimensionError("softmax_cross_entropy: logits must be [batch x classes]");
    }
    const std::size_t B = lv.dim(0), C = lv.dim(1);
    if (labels.size() != B) {
        throw DimensionError("softmax_cross_entropy: label count does not match batch");
    }
    for (int lab : labels) {
        if (lab < 0 || static_cast<std::size_t>(lab) >= C) {
            throw ArgumentError("softmax_cross_entropy: label out of range");
        }
    }

    Tensor probs({B, C});
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* row = lv.data() + b * C;
        double mx = row[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        double* pr = probs.data() + b * C;
        for (std::size_t c = 0; c < C; ++c) {
            pr[c] = std::exp(row[c] - mx);
            denom += pr[c];
        }
        for (std::size_t c = 0; c < C; ++c) pr[c] /= denom;
        loss -= std::log(std::max(pr[labels[b]], 1e-300));
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(B));

    return detail::make_node(OpKind::softmax_cross_entropy, {logits.node()}, std::move(out),
                             [B, C, probs, labels](Node& n) {
                                 Node* in = n.inputs[0].get();
                                 if (!in->requires_grad) return;
                                 const double up = n.scratch[0] / static_cast<double>(B);
                                 for (std::size_t b = 0; b < B; ++b) {
                                     const double* pr = probs.data() + b * C;
                                     double* dx = in->scratch.data() + b * C;
                                     for (std::size_t c = 0; c < C; ++c) dx[c] += up * pr[c];
                                     dx[labels[b]] -= up;
                                 }
                             });
}

} // namespace wcm
