#pragma once

// Tape-based reverse-mode autograd over Tensor<T>. Each op builds a graph
// node holding the forward value and a closure that routes the node's
// gradient into its parents. Templated on the scalar so training runs in
// float while gradient checks run the identical code in double.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <vector>

#include "neuropapyri/tensor.hpp"

namespace npap::ag {

// Grad mode: when off, ops produce values only (inference / metric paths).
inline bool& grad_mode() {
    thread_local bool mode = true;
    return mode;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& ensure_grad() {
        if (grad.empty() && value.numel() > 0) grad = Tensor<T>::zeros(value.shape);
        return grad;
    }
};

template <class T>
class Var {
public:
    Var() = default;

    static Var leaf(Tensor<T> v, bool requires_grad) {
        Var out;
        out.n_ = std::make_shared<Node<T>>();
        out.n_->value = std::move(v);
        out.n_->requires_grad = requires_grad;
        return out;
    }
    static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

    bool defined() const { return static_cast<bool>(n_); }
    Tensor<T>& value() { return n_->value; }
    const Tensor<T>& value() const { return n_->value; }
    Tensor<T>& grad() { return n_->ensure_grad(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void zero_grad() {
        if (n_ && !n_->grad.empty()) n_->grad.fill(T(0));
    }
    std::shared_ptr<Node<T>> node() const { return n_; }

    static Var from_node(std::shared_ptr<Node<T>> n) {
        Var v;
        v.n_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                                   std::function<void(Node<T>&)> bw) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool req = false;
    for (auto& p : parents)
        if (p && p->requires_grad) req = true;
    n->requires_grad = req && grad_mode();
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward = std::move(bw);
    }
    return n;
}

template <class T>
void add_into(Tensor<T>& dst, const T* src, int64_t n, T scale = T(1)) {
    T* d = dst.ptr();
    for (int64_t i = 0; i < n; ++i) d[i] += scale * src[i];
}

}  // namespace detail

// Runs backward from a scalar loss. Topological order via iterative DFS.
template <class T>
void backward(const Var<T>& loss) {
    auto root = loss.node();
    if (!root) throw Error("backward: undefined variable");
    if (root->value.numel() != 1) throw ShapeMismatchError("backward: loss must be scalar");
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw ShapeMismatchError("add: shape mismatch");
    Tensor<T> out = a.value();
    detail::add_into(out, b.value().ptr(), out.numel());
    auto an = a.node(), bn = b.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {an, bn}, [an, bn](Node<T>& self) {
            if (an->requires_grad) detail::add_into(an->ensure_grad(), self.grad.ptr(), self.grad.numel());
            if (bn->requires_grad) detail::add_into(bn->ensure_grad(), self.grad.ptr(), self.grad.numel());
        }));
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= c;
    auto an = a.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {an}, [an, c](Node<T>& self) {
            if (an->requires_grad) detail::add_into(an->ensure_grad(), self.grad.ptr(), self.grad.numel(), c);
        }));
}

// w1*a + w2*b for scalars (loss combination).
template <class T>
Var<T> axpby(T w1, const Var<T>& a, T w2, const Var<T>& b) {
    return add(scale(a, w1), scale(b, w2));
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    auto xn = x.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn}, [xn](Node<T>& self) {
            if (!xn->requires_grad) return;
            Tensor<T>& g = xn->ensure_grad();
            const T* y = self.value.ptr();
            const T* dy = self.grad.ptr();
            T* dx = g.ptr();
            for (int64_t i = 0; i < self.value.numel(); ++i)
                if (y[i] > T(0)) dx[i] += dy[i];
        }));
}

template <class T>
inline T sigmoid_scalar(T z) {
    if (z >= T(0)) {
        T e = std::exp(-z);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(z);
    return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data) v = sigmoid_scalar(v);
    auto xn = x.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn}, [xn](Node<T>& self) {
            if (!xn->requires_grad) return;
            Tensor<T>& g = xn->ensure_grad();
            const T* y = self.value.ptr();
            const T* dy = self.grad.ptr();
            T* dx = g.ptr();
            for (int64_t i = 0; i < self.value.numel(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
        }));
}

// x:[B,F] w:[O,F] b:[O] -> y:[B,O]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x.value().shape;
    const auto& ws = w.value().shape;
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw ShapeMismatchError("linear: x" + shape_str(xs) + " w" + shape_str(ws));
    const int64_t B = xs[0], F = xs[1], O = ws[0];
    Tensor<T> out({B, O});
    as_matrix(out, B, O).noalias() = as_matrix(x.value(), B, F) * as_matrix(w.value(), O, F).transpose();
    if (b.defined()) {
        if (b.value().numel() != O) throw ShapeMismatchError("linear: bias size");
        for (int64_t i = 0; i < B; ++i)
            for (int64_t j = 0; j < O; ++j) out.at(i, j) += b.value()[j];
    }
    auto xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn, wn, bn}, [xn, wn, bn, B, F, O](Node<T>& self) {
            auto gy = as_matrix(self.grad, B, O);
            if (xn->requires_grad)
                as_matrix(xn->ensure_grad(), B, F).noalias() += gy * as_matrix(wn->value, O, F);
            if (wn->requires_grad)
                as_matrix(wn->ensure_grad(), O, F).noalias() += gy.transpose() * as_matrix(xn->value, B, F);
            if (bn && bn->requires_grad) {
                Tensor<T>& gb = bn->ensure_grad();
                for (int64_t i = 0; i < B; ++i)
                    for (int64_t j = 0; j < O; ++j) gb[j] += self.grad.at(i, j);
            }
        }));
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM). x:[B,C,H,W] w:[OC,C,KH,KW] b:[OC]
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void im2col(const T* img, int64_t C, int64_t H, int64_t W, int64_t K, int64_t stride, int64_t pad,
            int64_t OH, int64_t OW, T* cols) {
    // cols: [C*K*K, OH*OW]
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < K; ++ky) {
            for (int64_t kx = 0; kx < K; ++kx) {
                T* row = cols + ((c * K + ky) * K + kx) * (OH * OW);
                const T* src = img + c * H * W;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t y = oy * stride - pad + ky;
                    T* dst = row + oy * OW;
                    if (y < 0 || y >= H) {
                        std::fill(dst, dst + OW, T(0));
                        continue;
                    }
                    const T* srow = src + y * W;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        const int64_t x = ox * stride - pad + kx;
                        dst[ox] = (x >= 0 && x < W) ? srow[x] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_acc(const T* cols, int64_t C, int64_t H, int64_t W, int64_t K, int64_t stride,
                int64_t pad, int64_t OH, int64_t OW, T* img) {
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < K; ++ky) {
            for (int64_t kx = 0; kx < K; ++kx) {
                const T* row = cols + ((c * K + ky) * K + kx) * (OH * OW);
                T* dst = img + c * H * W;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t y = oy * stride - pad + ky;
                    if (y < 0 || y >= H) continue;
                    T* drow = dst + y * W;
                    const T* srow = row + oy * OW;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        const int64_t x = ox * stride - pad + kx;
                        if (x >= 0 && x < W) drow[x] += srow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride, int64_t pad) {
    const auto& xs = x.value().shape;
    const auto& ws = w.value().shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw ShapeMismatchError("conv2d: x" + shape_str(xs) + " w" + shape_str(ws));
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int64_t OC = ws[0], K = ws[2];
    if (ws[3] != K) throw ShapeMismatchError("conv2d: non-square kernel");
    const int64_t OH = (H + 2 * pad - K) / stride + 1;
    const int64_t OW = (W + 2 * pad - K) / stride + 1;
    if (OH < 1 || OW < 1) throw ShapeMismatchError("conv2d: output would be empty");

    Tensor<T> out({B, OC, OH, OW});
    const int64_t ckk = C * K * K, ohw = OH * OW;
    Tensor<T> cols({ckk, ohw});
    auto wmat = as_matrix(w.value(), OC, ckk);
    for (int64_t i = 0; i < B; ++i) {
        detail::im2col(x.value().ptr() + i * C * H * W, C, H, W, K, stride, pad, OH, OW, cols.ptr());
        MatMap<T>(out.ptr() + i * OC * ohw, OC, ohw).noalias() = wmat * as_matrix(cols, ckk, ohw);
    }
    if (b.defined()) {
        if (b.value().numel() != OC) throw ShapeMismatchError("conv2d: bias size");
        for (int64_t i = 0; i < B; ++i)
            for (int64_t oc = 0; oc < OC; ++oc) {
                T* p = out.ptr() + (i * OC + oc) * ohw;
                const T bv = b.value()[oc];
                for (int64_t j = 0; j < ohw; ++j) p[j] += bv;
            }
    }

    auto xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn, wn, bn},
        [xn, wn, bn, B, C, H, W, OC, K, stride, pad, OH, OW](Node<T>& self) {
            const int64_t ckk = C * K * K, ohw = OH * OW;
            Tensor<T> cols({ckk, ohw});
            Tensor<T> dcols;
            if (xn->requires_grad) dcols = Tensor<T>::zeros({ckk, ohw});
            auto wmat = as_matrix(wn->value, OC, ckk);
            for (int64_t i = 0; i < B; ++i) {
                ConstMatMap<T> gy(self.grad.ptr() + i * OC * ohw, OC, ohw);
                if (wn->requires_grad) {
                    detail::im2col(xn->value.ptr() + i * C * H * W, C, H, W, K, stride, pad, OH, OW,
                                   cols.ptr());
                    as_matrix(wn->ensure_grad(), OC, ckk).noalias() +=
                        gy * as_matrix(cols, ckk, ohw).transpose();
                }
                if (xn->requires_grad) {
                    as_matrix(dcols, ckk, ohw).noalias() = wmat.transpose() * gy;
                    detail::col2im_acc(dcols.ptr(), C, H, W, K, stride, pad, OH, OW,
                                       xn->ensure_grad().ptr() + i * C * H * W);
                }
            }
            if (bn && bn->requires_grad) {
                Tensor<T>& gb = bn->ensure_grad();
                for (int64_t i = 0; i < B; ++i)
                    for (int64_t oc = 0; oc < OC; ++oc) {
                        const T* p = self.grad.ptr() + (i * OC + oc) * ohw;
                        T s = T(0);
                        for (int64_t j = 0; j < ohw; ++j) s += p[j];
                        gb[oc] += s;
                    }
            }
        }));
}

// ---------------------------------------------------------------------------
// Batch norm over [B,C,H,W]. Training mode uses batch statistics (biased
// variance) and updates running stats in place; eval mode uses running stats.
// ---------------------------------------------------------------------------

template <class T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw ShapeMismatchError("batchnorm2d: expected 4-d input");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (gamma.value().numel() != C || beta.value().numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        throw ShapeMismatchError("batchnorm2d: channel mismatch");
    const int64_t HW = H * W;
    const int64_t M = B * HW;

    Tensor<T> mean({C}), invstd({C});
    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (int64_t i = 0; i < B; ++i) {
                const T* p = x.value().ptr() + (i * C + c) * HW;
                for (int64_t j = 0; j < HW; ++j) s += p[j];
            }
            mean[c] = static_cast<T>(s / M);
        }
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            const double mu = mean[c];
            for (int64_t i = 0; i < B; ++i) {
                const T* p = x.value().ptr() + (i * C + c) * HW;
                for (int64_t j = 0; j < HW; ++j) {
                    const double d = p[j] - mu;
                    s += d * d;
                }
            }
            const double var = s / M;
            invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(var);
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }

    Tensor<T> out(xs);
    for (int64_t i = 0; i < B; ++i)
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.value().ptr() + (i * C + c) * HW;
            T* q = out.ptr() + (i * C + c) * HW;
            const T mu = mean[c], is = invstd[c], g = gamma.value()[c], bta = beta.value()[c];
            for (int64_t j = 0; j < HW; ++j) q[j] = g * (p[j] - mu) * is + bta;
        }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn, gn, bn},
        [xn, gn, bn, mean, invstd, training, B, C, HW, M](Node<T>& self) {
            // Per-channel reductions first, then the input gradient.
            std::vector<double> dg(C, 0.0), db(C, 0.0);
            for (int64_t i = 0; i < B; ++i)
                for (int64_t c = 0; c < C; ++c) {
                    const T* xp = xn->value.ptr() + (i * C + c) * HW;
                    const T* gy = self.grad.ptr() + (i * C + c) * HW;
                    const double mu = mean[c], is = invstd[c];
                    double sg = 0.0, sb = 0.0;
                    for (int64_t j = 0; j < HW; ++j) {
                        sb += gy[j];
                        sg += gy[j] * (xp[j] - mu) * is;
                    }
                    dg[c] += sg;
                    db[c] += sb;
                }
            if (gn->requires_grad) {
                Tensor<T>& g = gn->ensure_grad();
                for (int64_t c = 0; c < C; ++c) g[c] += static_cast<T>(dg[c]);
            }
            if (bn->requires_grad) {
                Tensor<T>& g = bn->ensure_grad();
                for (int64_t c = 0; c < C; ++c) g[c] += static_cast<T>(db[c]);
            }
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < B; ++i)
                for (int64_t c = 0; c < C; ++c) {
                    const T* xp = xn->value.ptr() + (i * C + c) * HW;
                    const T* gy = self.grad.ptr() + (i * C + c) * HW;
                    T* dx = gx.ptr() + (i * C + c) * HW;
                    const T mu = mean[c], is = invstd[c], ga = gn->value[c];
                    if (training) {
                        const T mdg = static_cast<T>(dg[c] / M), mdb = static_cast<T>(db[c] / M);
                        for (int64_t j = 0; j < HW; ++j) {
                            const T xd = (xp[j] - mu) * is;
                            dx[j] += ga * is * (gy[j] - mdb - xd * mdg);
                        }
                    } else {
                        for (int64_t j = 0; j < HW; ++j) dx[j] += ga * is * gy[j];
                    }
                }
        }));
}

// ---------------------------------------------------------------------------
// Max pooling, square window.
// ---------------------------------------------------------------------------

template <class T>
Var<T> maxpool2d(const Var<T>& x, int64_t k, int64_t stride, int64_t pad) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw ShapeMismatchError("maxpool2d: expected 4-d input");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int64_t OH = (H + 2 * pad - k) / stride + 1;
    const int64_t OW = (W + 2 * pad - k) / stride + 1;
    Tensor<T> out({B, C, OH, OW});
    std::vector<int32_t> argmax(static_cast<size_t>(B * C * OH * OW));
    for (int64_t i = 0; i < B; ++i)
        for (int64_t c = 0; c < C; ++c) {
            const T* src = x.value().ptr() + (i * C + c) * H * W;
            T* dst = out.ptr() + (i * C + c) * OH * OW;
            int32_t* am = argmax.data() + (i * C + c) * OH * OW;
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    int32_t bidx = -1;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t y = oy * stride - pad + ky;
                        if (y < 0 || y >= H) continue;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const int64_t x2 = ox * stride - pad + kx;
                            if (x2 < 0 || x2 >= W) continue;
                            const T v = src[y * W + x2];
                            if (v > best) {
                                best = v;
                                bidx = static_cast<int32_t>(y * W + x2);
                            }
                        }
                    }
                    dst[oy * OW + ox] = best;
                    am[oy * OW + ox] = bidx;
                }
        }
    auto xn = x.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn}, [xn, argmax = std::move(argmax), B, C, H, W, OH, OW](Node<T>& self) {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < B; ++i)
                for (int64_t c = 0; c < C; ++c) {
                    const T* gy = self.grad.ptr() + (i * C + c) * OH * OW;
                    const int32_t* am = argmax.data() + (i * C + c) * OH * OW;
                    T* dx = gx.ptr() + (i * C + c) * H * W;
                    for (int64_t j = 0; j < OH * OW; ++j)
                        if (am[j] >= 0) dx[am[j]] += gy[j];
                }
        }));
}

// ---------------------------------------------------------------------------
// Attention plumbing: broadcast multiply by a single-channel map, spatial
// mean pooling, column-wise concatenation.
// ---------------------------------------------------------------------------

// fmap:[B,C,H,W] * amap:[B,1,H,W] -> [B,C,H,W]
template <class T>
Var<T> mul_map(const Var<T>& fmap, const Var<T>& amap) {
    const auto& fs = fmap.value().shape;
    const auto& ms = amap.value().shape;
    if (fs.size() != 4 || ms.size() != 4 || ms[1] != 1 || fs[0] != ms[0] || fs[2] != ms[2] ||
        fs[3] != ms[3])
        throw ShapeMismatchError("mul_map: fmap" + shape_str(fs) + " amap" + shape_str(ms));
    const int64_t B = fs[0], C = fs[1], HW = fs[2] * fs[3];
    Tensor<T> out(fs);
    for (int64_t i = 0; i < B; ++i) {
        const T* m = amap.value().ptr() + i * HW;
        for (int64_t c = 0; c < C; ++c) {
            const T* f = fmap.value().ptr() + (i * C + c) * HW;
            T* q = out.ptr() + (i * C + c) * HW;
            for (int64_t j = 0; j < HW; ++j) q[j] = f[j] * m[j];
        }
    }
    auto fn = fmap.node(), mn = amap.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {fn, mn}, [fn, mn, B, C, HW](Node<T>& self) {
            for (int64_t i = 0; i < B; ++i) {
                const T* m = mn->value.ptr() + i * HW;
                if (fn->requires_grad) {
                    Tensor<T>& gf = fn->ensure_grad();
                    for (int64_t c = 0; c < C; ++c) {
                        const T* gy = self.grad.ptr() + (i * C + c) * HW;
                        T* df = gf.ptr() + (i * C + c) * HW;
                        for (int64_t j = 0; j < HW; ++j) df[j] += gy[j] * m[j];
                    }
                }
                if (mn->requires_grad) {
                    Tensor<T>& gm = mn->ensure_grad();
                    T* dm = gm.ptr() + i * HW;
                    for (int64_t c = 0; c < C; ++c) {
                        const T* gy = self.grad.ptr() + (i * C + c) * HW;
                        const T* f = fn->value.ptr() + (i * C + c) * HW;
                        for (int64_t j = 0; j < HW; ++j) dm[j] += gy[j] * f[j];
                    }
                }
            }
        }));
}

// [B,C,H,W] -> [B,C]
template <class T>
Var<T> spatial_mean(const Var<T>& x) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw ShapeMismatchError("spatial_mean: expected 4-d input");
    const int64_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    Tensor<T> out({B, C});
    for (int64_t i = 0; i < B; ++i)
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.value().ptr() + (i * C + c) * HW;
            double s = 0.0;
            for (int64_t j = 0; j < HW; ++j) s += p[j];
            out.at(i, c) = static_cast<T>(s / HW);
        }
    auto xn = x.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn}, [xn, B, C, HW](Node<T>& self) {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < B; ++i)
                for (int64_t c = 0; c < C; ++c) {
                    const T g = self.grad.at(i, c) / static_cast<T>(HW);
                    T* dx = gx.ptr() + (i * C + c) * HW;
                    for (int64_t j = 0; j < HW; ++j) dx[j] += g;
                }
        }));
}

// Concatenate [B,Ci] tensors along dim 1.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeMismatchError("concat_cols: empty input");
    const int64_t B = xs[0].value().shape[0];
    int64_t total = 0;
    for (const auto& v : xs) {
        if (v.value().rank() != 2 || v.value().shape[0] != B)
            throw ShapeMismatchError("concat_cols: inputs must be [B,Ci]");
        total += v.value().shape[1];
    }
    Tensor<T> out({B, total});
    int64_t off = 0;
    for (const auto& v : xs) {
        const int64_t c = v.value().shape[1];
        for (int64_t i = 0; i < B; ++i)
            std::copy_n(v.value().ptr() + i * c, c, out.ptr() + i * total + off);
        off += c;
    }
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::vector<int64_t> widths;
    for (const auto& v : xs) {
        parents.push_back(v.node());
        widths.push_back(v.value().shape[1]);
    }
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), parents, [parents, widths, B, total](Node<T>& self) {
            int64_t off = 0;
            for (size_t k = 0; k < parents.size(); ++k) {
                const int64_t c = widths[k];
                if (parents[k]->requires_grad) {
                    Tensor<T>& g = parents[k]->ensure_grad();
                    for (int64_t i = 0; i < B; ++i) {
                        const T* src = self.grad.ptr() + i * total + off;
                        T* dst = g.ptr() + i * c;
                        for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                    }
                }
                off += c;
            }
        }));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Numerically stable binary cross-entropy on logits, mean over all elements.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
    if (!logits.value().same_shape(targets)) throw ShapeMismatchError("bce_with_logits: shape mismatch");
    const int64_t n = logits.value().numel();
    if (n == 0) throw ShapeMismatchError("bce_with_logits: empty input");
    double sum = 0.0;
    const T* z = logits.value().ptr();
    const T* y = targets.ptr();
    for (int64_t i = 0; i < n; ++i) {
        const double zi = z[i], yi = y[i];
        sum += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(sum / n);
    auto ln = logits.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {ln}, [ln, targets, n](Node<T>& self) {
            if (!ln->requires_grad) return;
            const T g = self.grad[0] / static_cast<T>(n);
            Tensor<T>& gz = ln->ensure_grad();
            const T* z = ln->value.ptr();
            const T* y = targets.ptr();
            for (int64_t i = 0; i < n; ++i) gz[i] += g * (sigmoid_scalar(z[i]) - y[i]);
        }));
}

// Cosine-distance triplet hinge, mean over the batch. a,p,n: [B,D].
template <class T>
Var<T> triplet_cosine_loss(const Var<T>& a, const Var<T>& p, const Var<T>& n, T margin) {
    const auto& as = a.value().shape;
    if (as.size() != 2 || !a.value().same_shape(p.value()) || !a.value().same_shape(n.value()))
        throw ShapeMismatchError("triplet_cosine_loss: embeddings must share [B,D]");
    if (margin < T(0)) throw InvalidWeightsError("triplet_cosine_loss: margin must be >= 0");
    const int64_t B = as[0], D = as[1];

    auto row_norm = [D](const Tensor<T>& t, int64_t i) {
        double s = 0.0;
        const T* r = t.ptr() + i * D;
        for (int64_t j = 0; j < D; ++j) s += static_cast<double>(r[j]) * r[j];
        return std::sqrt(s);
    };
    auto row_dot = [D](const Tensor<T>& u, const Tensor<T>& v, int64_t i) {
        double s = 0.0;
        const T* a = u.ptr() + i * D;
        const T* b = v.ptr() + i * D;
        for (int64_t j = 0; j < D; ++j) s += static_cast<double>(a[j]) * b[j];
        return s;
    };

    std::vector<double> na(B), np(B), nn(B), sap(B), san(B);
    double sum = 0.0;
    for (int64_t i = 0; i < B; ++i) {
        na[i] = row_norm(a.value(), i);
        np[i] = row_norm(p.value(), i);
        nn[i] = row_norm(n.value(), i);
        if (na[i] == 0.0 || np[i] == 0.0 || nn[i] == 0.0)
            throw ZeroVectorError("triplet_cosine_loss: zero-norm embedding");
        sap[i] = row_dot(a.value(), p.value(), i) / (na[i] * np[i]);
        san[i] = row_dot(a.value(), n.value(), i) / (na[i] * nn[i]);
        sum += std::max(0.0, static_cast<double>(margin) + san[i] - sap[i]);
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(sum / B);

    auto an = a.node(), pn = p.node(), nnode = n.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {an, pn, nnode},
        [an, pn, nnode, na, np, nn, sap, san, margin, B, D](Node<T>& self) {
            const double gscale = static_cast<double>(self.grad[0]) / B;
            for (int64_t i = 0; i < B; ++i) {
                const double h = static_cast<double>(margin) + san[i] - sap[i];
                if (h <= 0.0) continue;  // hinge inactive: zero subgradient
                const T* ai = an->value.ptr() + i * D;
                const T* pi = pn->value.ptr() + i * D;
                const T* ni = nnode->value.ptr() + i * D;
                if (an->requires_grad) {
                    T* g = an->ensure_grad().ptr() + i * D;
                    const double c1 = 1.0 / (na[i] * nn[i]), c2 = san[i] / (na[i] * na[i]);
                    const double c3 = 1.0 / (na[i] * np[i]), c4 = sap[i] / (na[i] * na[i]);
                    for (int64_t j = 0; j < D; ++j)
                        g[j] += static_cast<T>(gscale * ((ni[j] * c1 - ai[j] * c2) - (pi[j] * c3 - ai[j] * c4)));
                }
                if (pn->requires_grad) {
                    T* g = pn->ensure_grad().ptr() + i * D;
                    const double c1 = 1.0 / (na[i] * np[i]), c2 = sap[i] / (np[i] * np[i]);
                    for (int64_t j = 0; j < D; ++j)
                        g[j] += static_cast<T>(-gscale * (ai[j] * c1 - pi[j] * c2));
                }
                if (nnode->requires_grad) {
                    T* g = nnode->ensure_grad().ptr() + i * D;
                    const double c1 = 1.0 / (na[i] * nn[i]), c2 = san[i] / (nn[i] * nn[i]);
                    for (int64_t j = 0; j < D; ++j)
                        g[j] += static_cast<T>(gscale * (ai[j] * c1 - ni[j] * c2));
                }
            }
        }));
}

// Softmax cross-entropy on integer class labels, mean over batch.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const auto& zs = logits.value().shape;
    if (zs.size() != 2 || static_cast<int64_t>(labels.size()) != zs[0])
        throw ShapeMismatchError("softmax_cross_entropy: logits [B,K] with B labels");
    const int64_t B = zs[0], K = zs[1];
    double sum = 0.0;
    for (int64_t i = 0; i < B; ++i) {
        const T* z = logits.value().ptr() + i * K;
        double zmax = z[0];
        for (int64_t j = 1; j < K; ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
        double lse = 0.0;
        for (int64_t j = 0; j < K; ++j) lse += std::exp(z[j] - zmax);
        lse = zmax + std::log(lse);
        sum += lse - z[labels[static_cast<size_t>(i)]];
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(sum / B);
    auto zn = logits.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {zn}, [zn, labels, B, K](Node<T>& self) {
            if (!zn->requires_grad) return;
            const T g = self.grad[0] / static_cast<T>(B);
            Tensor<T>& gz = zn->ensure_grad();
            for (int64_t i = 0; i < B; ++i) {
                const T* z = zn->value.ptr() + i * K;
                T* dz = gz.ptr() + i * K;
                double zmax = z[0];
                for (int64_t j = 1; j < K; ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
                double denom = 0.0;
                for (int64_t j = 0; j < K; ++j) denom += std::exp(z[j] - zmax);
                for (int64_t j = 0; j < K; ++j) {
                    const double sm = std::exp(z[j] - zmax) / denom;
                    dz[j] += g * static_cast<T>(sm - (labels[static_cast<size_t>(i)] == j ? 1.0 : 0.0));
                }
            }
        }));
}

// sum of squares -> scalar (used by gradient checks on ||embedding||^2).
template <class T>
Var<T> sum_sq(const Var<T>& x) {
    double s = 0.0;
    for (const T v : x.value().data) s += static_cast<double>(v) * v;
    Tensor<T> out({1});
    out[0] = static_cast<T>(s);
    auto xn = x.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn}, [xn](Node<T>& self) {
            if (!xn->requires_grad) return;
            Tensor<T>& g = xn->ensure_grad();
            const T gs = self.grad[0];
            for (int64_t i = 0; i < xn->value.numel(); ++i) g[i] += T(2) * gs * xn->value[i];
        }));
}

// Extract one element as a scalar var (per-output gradient checks).
template <class T>
Var<T> pick(const Var<T>& x, int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.value().numel()) throw ShapeMismatchError("pick: index out of range");
    Tensor<T> out({1});
    out[0] = x.value()[flat_index];
    auto xn = x.node();
    return Var<T>::from_node(detail::make_node<T>(
        std::move(out), {xn}, [xn, flat_index](Node<T>& self) {
            if (xn->requires_grad) xn->ensure_grad()[flat_index] += self.grad[0];
        }));
}

}  // namespace npap::ag
