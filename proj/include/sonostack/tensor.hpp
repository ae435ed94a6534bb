#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <unordered_set>
#include <vector>

#include "sonostack/errors.hpp"
#include "sonostack/gemm.hpp"
#include "sonostack/rng.hpp"

namespace sonostack::nn {

enum class Mode { train, eval };

template <typename S>
struct Tensor;

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

// Thread-local switch that disables graph construction (evaluation and
// benchmarking paths). While active, ops compute values only.
bool grad_enabled();

struct NoGrad {
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    bool prev_;
};

namespace detail {
inline bool& grad_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_flag(); }
inline NoGrad::NoGrad() : prev_(detail::grad_flag()) { detail::grad_flag() = false; }
inline NoGrad::~NoGrad() { detail::grad_flag() = prev_; }

// Reverse-mode autodiff node: a flat row-major value array plus an
// optional gradient of the same length. Interior nodes keep their parents
// alive and know how to push their gradient one step back.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> v;
    std::vector<S> g;
    bool requires_grad = false;
    std::vector<TensorPtr<S>> parents;
    std::function<void(Tensor<S>&)> backprop;

    int64_t size() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), S(0));
    }

    void zero_grad() {
        if (!g.empty()) std::fill(g.begin(), g.end(), S(0));
    }

    static TensorPtr<S> make(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<Tensor<S>>();
        t->shape = std::move(shape);
        t->v.assign(static_cast<size_t>(t->size()), S(0));
        t->requires_grad = requires_grad;
        if (requires_grad) t->ensure_grad();
        return t;
    }

    static TensorPtr<S> from_values(std::vector<int> shape, std::vector<S> values,
                                    bool requires_grad = false) {
        auto t = make(std::move(shape), requires_grad);
        if (values.size() != t->v.size()) throw ShapeError("Tensor: value count does not match shape");
        t->v = std::move(values);
        return t;
    }
};

namespace detail {

template <typename S>
void check_finite(const Tensor<S>& t, const char* where) {
#ifndef NDEBUG
    for (S x : t.v) assert(std::isfinite(static_cast<double>(x)) && where);
    for (S x : t.g) assert(std::isfinite(static_cast<double>(x)) && where);
#else
    (void)t;
    (void)where;
#endif
}

template <typename S>
bool any_requires(const std::vector<TensorPtr<S>>& parents) {
    for (const auto& p : parents) {
        if (p && p->requires_grad) return true;
    }
    return false;
}

// Construct an op output; wires the backward chain only when gradients
// are both enabled and reachable. Debug builds verify the forward values
// feeding each new node, so a NaN/Inf is caught one op downstream.
template <typename S>
TensorPtr<S> make_node(std::vector<int> shape, std::vector<TensorPtr<S>> parents,
                       std::function<void(Tensor<S>&)> backprop) {
#ifndef NDEBUG
    for (const auto& p : parents) {
        if (p) check_finite(*p, "forward");
    }
#endif
    auto out = Tensor<S>::make(std::move(shape));
    if (grad_enabled() && any_requires(parents)) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backprop = std::move(backprop);
    }
    return out;
}

} // namespace detail

// Run reverse-mode accumulation from a scalar root.
template <typename S>
void backward(const TensorPtr<S>& root) {
    if (!root) throw ShapeError("backward: null root");
    if (root->size() != 1) throw ShapeError("backward: root must be scalar");
    if (!root->requires_grad) return;

    // Iterative post-order over the DAG.
    std::vector<Tensor<S>*> order;
    std::unordered_set<Tensor<S>*> seen;
    std::vector<std::pair<Tensor<S>*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor<S>* parent = node->parents[next++].get();
            if (parent && parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->g[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor<S>* node = *it;
        if (node->backprop) {
            node->backprop(*node);
            detail::check_finite(*node, "backward");
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops

template <typename S>
TensorPtr<S> add(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape != b->shape) throw ShapeError("add: shape mismatch");
    auto out = detail::make_node<S>(
        a->shape, {a, b}, [a, b](Tensor<S>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) a->g[i] += self.g[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) b->g[i] += self.g[i];
            }
        });
    for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
    return out;
}

template <typename S>
TensorPtr<S> scale(const TensorPtr<S>& x, S c) {
    auto out = detail::make_node<S>(
        x->shape, {x}, [x, c](Tensor<S>& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += c * self.g[i];
        });
    for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = c * x->v[i];
    return out;
}

template <typename S>
TensorPtr<S> relu(const TensorPtr<S>& x) {
    auto out = detail::make_node<S>(
        x->shape, {x}, [x](Tensor<S>& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) {
                if (x->v[i] > S(0)) x->g[i] += self.g[i];
            }
        });
    for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = x->v[i] > S(0) ? x->v[i] : S(0);
    return out;
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
TensorPtr<S> gelu(const TensorPtr<S>& x) {
    auto out = detail::make_node<S>(
        x->shape, {x}, [x](Tensor<S>& self) {
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            x->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) {
                const double xv = static_cast<double>(x->v[i]);
                const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
                x->g[i] += static_cast<S>(cdf + xv * pdf) * self.g[i];
            }
        });
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < out->v.size(); ++i) {
        const double xv = static_cast<double>(x->v[i]);
        out->v[i] = static_cast<S>(0.5 * xv * (1.0 + std::erf(xv * inv_sqrt2)));
    }
    return out;
}

template <typename S>
TensorPtr<S> reshape(const TensorPtr<S>& x, std::vector<int> shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    if (n != x->size()) throw ShapeError("reshape: element count mismatch");
    auto out = detail::make_node<S>(
        std::move(shape), {x}, [x](Tensor<S>& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += self.g[i];
        });
    out->v = x->v;
    return out;
}

namespace detail {

inline std::vector<int64_t> strides_of(const std::vector<int>& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        s[i] = s[i + 1] * shape[i + 1];
    }
    return s;
}

template <typename S>
void permute_copy(const std::vector<S>& src, const std::vector<int>& src_shape,
                  const std::vector<int>& perm, std::vector<S>& dst, bool accumulate_back) {
    const size_t rank = src_shape.size();
    std::vector<int> dst_shape(rank);
    for (size_t i = 0; i < rank; ++i) dst_shape[i] = src_shape[perm[i]];
    const auto src_strides = strides_of(src_shape);
    const auto dst_strides = strides_of(dst_shape);

    std::vector<int> idx(rank, 0);
    const size_t total = src.size();
    for (size_t flat = 0; flat < total; ++flat) {
        int64_t dpos = 0;
        for (size_t i = 0; i < rank; ++i) dpos += static_cast<int64_t>(idx[perm[i]]) * dst_strides[i];
        if (accumulate_back) {
            // here dst is the gradient of the source layout
            dst[flat] += src[dpos];
        } else {
            dst[dpos] = src[flat];
        }
        for (int i = static_cast<int>(rank) - 1; i >= 0; --i) {
            if (++idx[i] < src_shape[i]) break;
            idx[i] = 0;
        }
    }
}

} // namespace detail

template <typename S>
TensorPtr<S> permute(const TensorPtr<S>& x, const std::vector<int>& perm) {
    if (perm.size() != x->shape.size()) throw ShapeError("permute: rank mismatch");
    std::vector<int> out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x->shape[perm[i]];
    const auto src_shape = x->shape;
    auto out = detail::make_node<S>(
        out_shape, {x}, [x, perm, src_shape](Tensor<S>& self) {
            x->ensure_grad();
            detail::permute_copy(self.g, src_shape, perm, x->g, true);
        });
    detail::permute_copy(x->v, src_shape, perm, out->v, false);
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// out = x[*, D] . w[D, U] + b[U], applied over the last dimension.
template <typename S>
TensorPtr<S> linear_lastdim(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b) {
    if (x->shape.empty() || w->shape.size() != 2) throw ShapeError("linear: bad ranks");
    const int d = x->shape.back();
    if (d != w->shape[0]) throw ShapeError("linear: input width does not match weight");
    const int u = w->shape[1];
    if (b && (b->shape.size() != 1 || b->shape[0] != u)) throw ShapeError("linear: bad bias shape");

    const int m = static_cast<int>(x->size() / d);
    std::vector<int> out_shape(x->shape.begin(), x->shape.end() - 1);
    out_shape.push_back(u);

    std::vector<TensorPtr<S>> parents{x, w};
    if (b) parents.push_back(b);
    auto out = detail::make_node<S>(
        out_shape, std::move(parents), [x, w, b, m, d, u](Tensor<S>& self) {
            if (x->requires_grad) {
                x->ensure_grad();
                gemm_nt(m, d, u, self.g.data(), w->v.data(), x->g.data());
            }
            if (w->requires_grad) {
                w->ensure_grad();
                gemm_tn(d, u, m, x->v.data(), self.g.data(), w->g.data());
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    const S* grow = self.g.data() + static_cast<size_t>(i) * u;
                    for (int j = 0; j < u; ++j) b->g[j] += grow[j];
                }
            }
        });

    gemm_nn(m, u, d, x->v.data(), w->v.data(), out->v.data());
    if (b) {
        for (int i = 0; i < m; ++i) {
            S* row = out->v.data() + static_cast<size_t>(i) * u;
            for (int j = 0; j < u; ++j) row[j] += b->v[j];
        }
    }
    return out;
}

template <typename S>
TensorPtr<S> matmul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2) throw ShapeError("matmul: need rank-2");
    return linear_lastdim(a, b, TensorPtr<S>{});
}

// Batched matmul over leading dim B. When trans_b, b is [B, N, K] and the
// product is a . b^T.
template <typename S>
TensorPtr<S> bmm(const TensorPtr<S>& a, const TensorPtr<S>& b, bool trans_b = false) {
    if (a->shape.size() != 3 || b->shape.size() != 3) throw ShapeError("bmm: need rank-3");
    const int batch = a->shape[0];
    if (b->shape[0] != batch) throw ShapeError("bmm: batch mismatch");
    const int m = a->shape[1];
    const int k = a->shape[2];
    const int n = trans_b ? b->shape[1] : b->shape[2];
    const int bk = trans_b ? b->shape[2] : b->shape[1];
    if (bk != k) throw ShapeError("bmm: inner dimension mismatch");

    auto out = detail::make_node<S>(
        {batch, m, n}, {a, b}, [a, b, trans_b, batch, m, n, k](Tensor<S>& self) {
            const size_t sa = static_cast<size_t>(m) * k;
            const size_t sb = static_cast<size_t>(k) * n;
            const size_t sc = static_cast<size_t>(m) * n;
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (int i = 0; i < batch; ++i) {
                const S* gv = self.g.data() + sc * i;
                const S* av = a->v.data() + sa * i;
                const S* bv = b->v.data() + sb * i;
                if (!trans_b) {
                    // dA = dC . B^T ; dB = A^T . dC
                    if (a->requires_grad) gemm_nt(m, k, n, gv, bv, a->g.data() + sa * i);
                    if (b->requires_grad) gemm_tn(k, n, m, av, gv, b->g.data() + sb * i);
                } else {
                    // C = A . B^T with B [N,K]: dA = dC . B ; dB = dC^T . A
                    if (a->requires_grad) gemm_nn(m, k, n, gv, bv, a->g.data() + sa * i);
                    if (b->requires_grad) gemm_tn(n, k, m, gv, av, b->g.data() + sb * i);
                }
            }
        });

    const size_t sa = static_cast<size_t>(m) * k;
    const size_t sb = static_cast<size_t>(k) * n;
    const size_t sc = static_cast<size_t>(m) * n;
    for (int i = 0; i < batch; ++i) {
        if (!trans_b) {
            gemm_nn(m, n, k, a->v.data() + sa * i, b->v.data() + sb * i, out->v.data() + sc * i);
        } else {
            gemm_nt(m, n, k, a->v.data() + sa * i, b->v.data() + sb * i, out->v.data() + sc * i);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NHWC)

enum class Padding { same, valid };

namespace detail {

struct ConvGeom {
    int out_h, out_w;
    int pad_top, pad_left;
};

inline ConvGeom conv_geometry(int h, int w, int kh, int kw, int stride, Padding pad) {
    ConvGeom geo{};
    if (pad == Padding::same) {
        geo.out_h = (h + stride - 1) / stride;
        geo.out_w = (w + stride - 1) / stride;
        const int pad_h = std::max(0, (geo.out_h - 1) * stride + kh - h);
        const int pad_w = std::max(0, (geo.out_w - 1) * stride + kw - w);
        geo.pad_top = pad_h / 2;
        geo.pad_left = pad_w / 2;
    } else {
        if (h < kh || w < kw) throw ShapeError("conv2d: input smaller than kernel");
        geo.out_h = (h - kh) / stride + 1;
        geo.out_w = (w - kw) / stride + 1;
        geo.pad_top = 0;
        geo.pad_left = 0;
    }
    return geo;
}

// cols[(n*OH*OW + oy*OW + ox)][(ky*kw + kx)*C + c]
template <typename S>
void im2col(const S* x, int n, int h, int w, int c, int kh, int kw, int stride,
            const ConvGeom& geo, S* cols) {
    const int patch = kh * kw * c;
    for (int img = 0; img < n; ++img) {
        const S* base = x + static_cast<size_t>(img) * h * w * c;
        for (int oy = 0; oy < geo.out_h; ++oy) {
            for (int ox = 0; ox < geo.out_w; ++ox) {
                S* dst = cols +
                         (static_cast<size_t>(img) * geo.out_h * geo.out_w +
                          static_cast<size_t>(oy) * geo.out_w + ox) *
                             patch;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - geo.pad_top;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - geo.pad_left;
                        S* cell = dst + (static_cast<size_t>(ky) * kw + kx) * c;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                            for (int ch = 0; ch < c; ++ch) cell[ch] = S(0);
                        } else {
                            const S* src = base + (static_cast<size_t>(iy) * w + ix) * c;
                            for (int ch = 0; ch < c; ++ch) cell[ch] = src[ch];
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_accumulate(const S* cols, int n, int h, int w, int c, int kh, int kw, int stride,
                       const ConvGeom& geo, S* dx) {
    const int patch = kh * kw * c;
    for (int img = 0; img < n; ++img) {
        S* base = dx + static_cast<size_t>(img) * h * w * c;
        for (int oy = 0; oy < geo.out_h; ++oy) {
            for (int ox = 0; ox < geo.out_w; ++ox) {
                const S* src = cols +
                               (static_cast<size_t>(img) * geo.out_h * geo.out_w +
                                static_cast<size_t>(oy) * geo.out_w + ox) *
                                   patch;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - geo.pad_top;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - geo.pad_left;
                        if (ix < 0 || ix >= w) continue;
                        const S* cell = src + (static_cast<size_t>(ky) * kw + kx) * c;
                        S* dst = base + (static_cast<size_t>(iy) * w + ix) * c;
                        for (int ch = 0; ch < c; ++ch) dst[ch] += cell[ch];
                    }
                }
            }
        }
    }
}

} // namespace detail

// Cross-correlation of x[N,H,W,Cin] with w[kh,kw,Cin,Cout] plus bias.
template <typename S>
TensorPtr<S> conv2d(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b,
                    int stride = 1, Padding pad = Padding::same) {
    if (x->shape.size() != 4 || w->shape.size() != 4) throw ShapeError("conv2d: need rank-4");
    const int n = x->shape[0], h = x->shape[1], wi = x->shape[2], cin = x->shape[3];
    const int kh = w->shape[0], kw = w->shape[1], cout = w->shape[3];
    if (w->shape[2] != cin) throw ShapeError("conv2d: channel mismatch");
    if (b && (b->shape.size() != 1 || b->shape[0] != cout)) throw ShapeError("conv2d: bad bias");

    const auto geo = detail::conv_geometry(h, wi, kh, kw, stride, pad);
    const int rows = n * geo.out_h * geo.out_w;
    const int patch = kh * kw * cin;

    auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(rows) * patch);
    detail::im2col(x->v.data(), n, h, wi, cin, kh, kw, stride, geo, cols->data());

    std::vector<TensorPtr<S>> parents{x, w};
    if (b) parents.push_back(b);
    auto out = detail::make_node<S>(
        {n, geo.out_h, geo.out_w, cout}, std::move(parents),
        [x, w, b, cols, geo, n, h, wi, cin, kh, kw, cout, rows, patch, stride](Tensor<S>& self) {
            if (w->requires_grad) {
                w->ensure_grad();
                gemm_tn(patch, cout, rows, cols->data(), self.g.data(), w->g.data());
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < rows; ++i) {
                    const S* grow = self.g.data() + static_cast<size_t>(i) * cout;
                    for (int j = 0; j < cout; ++j) b->g[j] += grow[j];
                }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                std::vector<S> dcols(static_cast<size_t>(rows) * patch, S(0));
                gemm_nt(rows, patch, cout, self.g.data(), w->v.data(), dcols.data());
                detail::col2im_accumulate(dcols.data(), n, h, wi, cin, kh, kw, stride, geo,
                                          x->g.data());
            }
        });

    gemm_nn(rows, cout, patch, cols->data(), w->v.data(), out->v.data());
    if (b) {
        for (int i = 0; i < rows; ++i) {
            S* row = out->v.data() + static_cast<size_t>(i) * cout;
            for (int j = 0; j < cout; ++j) row[j] += b->v[j];
        }
    }
    if (!out->requires_grad) cols.reset();
    return out;
}

// 2x2 max pooling with stride 2; the gradient goes to the argmax element
// (ties: first in row-major scan order).
template <typename S>
TensorPtr<S> maxpool2x2(const TensorPtr<S>& x) {
    if (x->shape.size() != 4) throw ShapeError("maxpool2x2: need rank-4");
    const int n = x->shape[0], h = x->shape[1], w = x->shape[2], c = x->shape[3];
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2x2: H and W must be even");
    const int oh = h / 2, ow = w / 2;

    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n) * oh * ow * c);
    auto out = detail::make_node<S>(
        {n, oh, ow, c}, {x}, [x, argmax](Tensor<S>& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) x->g[(*argmax)[i]] += self.g[i];
        });

    for (int img = 0; img < n; ++img) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int ch = 0; ch < c; ++ch) {
                    S best{};
                    int64_t best_idx = -1;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const int64_t idx =
                                ((static_cast<int64_t>(img) * h + oy * 2 + dy) * w + ox * 2 + dx) *
                                    c +
                                ch;
                            if (best_idx < 0 || x->v[idx] > best) {
                                best = x->v[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    const size_t o = ((static_cast<size_t>(img) * oh + oy) * ow + ox) * c + ch;
                    out->v[o] = best;
                    (*argmax)[o] = best_idx;
                }
            }
        }
    }
    if (!out->requires_grad) argmax.reset();
    return out;
}

// Mean over the spatial dimensions: [N,H,W,C] -> [N,C].
template <typename S>
TensorPtr<S> global_avg_pool(const TensorPtr<S>& x) {
    if (x->shape.size() != 4) throw ShapeError("global_avg_pool: need rank-4");
    const int n = x->shape[0], h = x->shape[1], w = x->shape[2], c = x->shape[3];
    const S inv = S(1) / static_cast<S>(h * w);

    auto out = detail::make_node<S>(
        {n, c}, {x}, [x, n, h, w, c, inv](Tensor<S>& self) {
            x->ensure_grad();
            for (int img = 0; img < n; ++img) {
                const S* grow = self.g.data() + static_cast<size_t>(img) * c;
                S* gx = x->g.data() + static_cast<size_t>(img) * h * w * c;
                for (int p = 0; p < h * w; ++p) {
                    for (int ch = 0; ch < c; ++ch) gx[static_cast<size_t>(p) * c + ch] += grow[ch] * inv;
                }
            }
        });

    for (int img = 0; img < n; ++img) {
        const S* base = x->v.data() + static_cast<size_t>(img) * h * w * c;
        S* orow = out->v.data() + static_cast<size_t>(img) * c;
        for (int p = 0; p < h * w; ++p) {
            for (int ch = 0; ch < c; ++ch) orow[ch] += base[static_cast<size_t>(p) * c + ch];
        }
        for (int ch = 0; ch < c; ++ch) orow[ch] *= inv;
    }
    return out;
}

// Zero-pad the bottom/right of the spatial dims up to (th, tw).
template <typename S>
TensorPtr<S> pad2d_to(const TensorPtr<S>& x, int th, int tw) {
    if (x->shape.size() != 4) throw ShapeError("pad2d_to: need rank-4");
    const int n = x->shape[0], h = x->shape[1], w = x->shape[2], c = x->shape[3];
    if (th < h || tw < w) throw ShapeError("pad2d_to: target smaller than input");
    if (th == h && tw == w) return x;

    auto out = detail::make_node<S>(
        {n, th, tw, c}, {x}, [x, n, h, w, c, th, tw](Tensor<S>& self) {
            x->ensure_grad();
            for (int img = 0; img < n; ++img) {
                for (int y = 0; y < h; ++y) {
                    const S* src =
                        self.g.data() + ((static_cast<size_t>(img) * th + y) * tw) * c;
                    S* dst = x->g.data() + ((static_cast<size_t>(img) * h + y) * w) * c;
                    for (int i = 0; i < w * c; ++i) dst[i] += src[i];
                }
            }
        });

    for (int img = 0; img < n; ++img) {
        for (int y = 0; y < h; ++y) {
            const S* src = x->v.data() + ((static_cast<size_t>(img) * h + y) * w) * c;
            S* dst = out->v.data() + ((static_cast<size_t>(img) * th + y) * tw) * c;
            std::copy(src, src + static_cast<size_t>(w) * c, dst);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization, dropout, softmax

// Softmax over the last dimension.
template <typename S>
TensorPtr<S> softmax_lastdim(const TensorPtr<S>& x) {
    const int d = x->shape.back();
    const int rows = static_cast<int>(x->size() / d);

    auto out = detail::make_node<S>(
        x->shape, {x}, [x, d, rows](Tensor<S>& self) {
            x->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const S* y = self.v.data() + static_cast<size_t>(r) * d;
                const S* gy = self.g.data() + static_cast<size_t>(r) * d;
                S dot = S(0);
                for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
                S* gx = x->g.data() + static_cast<size_t>(r) * d;
                for (int j = 0; j < d; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });

    for (int r = 0; r < rows; ++r) {
        const S* xin = x->v.data() + static_cast<size_t>(r) * d;
        S* y = out->v.data() + static_cast<size_t>(r) * d;
        S mx = xin[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xin[j]);
        S sum = S(0);
        for (int j = 0; j < d; ++j) {
            y[j] = std::exp(xin[j] - mx);
            sum += y[j];
        }
        const S inv = S(1) / sum;
        for (int j = 0; j < d; ++j) y[j] *= inv;
    }
    return out;
}

// Inverted dropout: keep with probability 1-p and scale kept values by
// 1/(1-p) in train mode; identity in eval mode.
template <typename S>
TensorPtr<S> dropout(const TensorPtr<S>& x, double p, Mode mode, Rng* rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: need 0 <= p < 1");
    if (mode == Mode::eval || p == 0.0) return x;
    if (!rng) throw ConfigError("dropout: train mode needs an rng");

    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<S>>(x->v.size());
    for (auto& m : *mask) m = rng->uniform() < 1.0 - p ? keep_scale : S(0);

    auto out = detail::make_node<S>(
        x->shape, {x}, [x, mask](Tensor<S>& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += self.g[i] * (*mask)[i];
        });
    for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = x->v[i] * (*mask)[i];
    return out;
}

// Normalize over the last dimension, then scale/shift by gamma/beta.
template <typename S>
TensorPtr<S> layer_norm(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                        double eps = 1e-5) {
    const int d = x->shape.back();
    if (gamma->size() != d || beta->size() != d) throw ShapeError("layer_norm: bad gamma/beta");
    const int rows = static_cast<int>(x->size() / d);

    auto xhat = std::make_shared<std::vector<S>>(x->v.size());
    auto inv_std = std::make_shared<std::vector<S>>(rows);

    auto out = detail::make_node<S>(
        x->shape, {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, d, rows](Tensor<S>& self) {
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const S* gy = self.g.data() + static_cast<size_t>(r) * d;
                const S* xh = xhat->data() + static_cast<size_t>(r) * d;
                if (gamma->requires_grad || beta->requires_grad) {
                    for (int j = 0; j < d; ++j) {
                        if (gamma->requires_grad) gamma->g[j] += gy[j] * xh[j];
                        if (beta->requires_grad) beta->g[j] += gy[j];
                    }
                }
                if (x->requires_grad) {
                    S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
                    for (int j = 0; j < d; ++j) {
                        const S dxh = gy[j] * gamma->v[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<S>(d);
                    mean_dxhat_xhat /= static_cast<S>(d);
                    S* gx = x->g.data() + static_cast<size_t>(r) * d;
                    const S istd = (*inv_std)[r];
                    for (int j = 0; j < d; ++j) {
                        const S dxh = gy[j] * gamma->v[j];
                        gx[j] += istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });

    for (int r = 0; r < rows; ++r) {
        const S* xin = x->v.data() + static_cast<size_t>(r) * d;
        S mean = S(0);
        for (int j = 0; j < d; ++j) mean += xin[j];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (int j = 0; j < d; ++j) var += (xin[j] - mean) * (xin[j] - mean);
        var /= static_cast<S>(d);
        const S istd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var) + eps));
        (*inv_std)[r] = istd;
        S* xh = xhat->data() + static_cast<size_t>(r) * d;
        S* y = out->v.data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (xin[j] - mean) * istd;
            y[j] = gamma->v[j] * xh[j] + beta->v[j];
        }
    }
    if (!out->requires_grad) {
        xhat.reset();
        inv_std.reset();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Token helpers for the transformer

// Prepend a learnable token to every sequence: [N,T,E] -> [N,T+1,E].
template <typename S>
TensorPtr<S> prepend_token(const TensorPtr<S>& x, const TensorPtr<S>& token) {
    if (x->shape.size() != 3) throw ShapeError("prepend_token: need rank-3");
    const int n = x->shape[0], t = x->shape[1], e = x->shape[2];
    if (token->size() != e) throw ShapeError("prepend_token: token width mismatch");

    auto out = detail::make_node<S>(
        {n, t + 1, e}, {x, token}, [x, token, n, t, e](Tensor<S>& self) {
            if (token->requires_grad) token->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (int img = 0; img < n; ++img) {
                const S* gseq = self.g.data() + static_cast<size_t>(img) * (t + 1) * e;
                if (token->requires_grad) {
                    for (int j = 0; j < e; ++j) token->g[j] += gseq[j];
                }
                if (x->requires_grad) {
                    S* gx = x->g.data() + static_cast<size_t>(img) * t * e;
                    for (int i = 0; i < t * e; ++i) gx[i] += gseq[e + i];
                }
            }
        });

    for (int img = 0; img < n; ++img) {
        S* seq = out->v.data() + static_cast<size_t>(img) * (t + 1) * e;
        std::copy(token->v.begin(), token->v.end(), seq);
        const S* src = x->v.data() + static_cast<size_t>(img) * t * e;
        std::copy(src, src + static_cast<size_t>(t) * e, seq + e);
    }
    return out;
}

// Extract token 0 of every sequence: [N,T,E] -> [N,E].
template <typename S>
TensorPtr<S> take_token0(const TensorPtr<S>& x) {
    if (x->shape.size() != 3) throw ShapeError("take_token0: need rank-3");
    const int n = x->shape[0], t = x->shape[1], e = x->shape[2];

    auto out = detail::make_node<S>(
        {n, e}, {x}, [x, n, t, e](Tensor<S>& self) {
            x->ensure_grad();
            for (int img = 0; img < n; ++img) {
                const S* grow = self.g.data() + static_cast<size_t>(img) * e;
                S* gx = x->g.data() + static_cast<size_t>(img) * t * e;
                for (int j = 0; j < e; ++j) gx[j] += grow[j];
            }
        });
    for (int img = 0; img < n; ++img) {
        const S* src = x->v.data() + static_cast<size_t>(img) * t * e;
        std::copy(src, src + e, out->v.data() + static_cast<size_t>(img) * e);
    }
    return out;
}

// Add a fixed (non-learnable) [T,E] table to every sequence in the batch.
template <typename S>
TensorPtr<S> add_const_rows(const TensorPtr<S>& x, std::shared_ptr<const std::vector<S>> table) {
    if (x->shape.size() != 3) throw ShapeError("add_const_rows: need rank-3");
    const int n = x->shape[0], t = x->shape[1], e = x->shape[2];
    if (table->size() != static_cast<size_t>(t) * e) throw ShapeError("add_const_rows: table size");

    auto out = detail::make_node<S>(
        x->shape, {x}, [x](Tensor<S>& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += self.g[i];
        });
    for (int img = 0; img < n; ++img) {
        const S* src = x->v.data() + static_cast<size_t>(img) * t * e;
        S* dst = out->v.data() + static_cast<size_t>(img) * t * e;
        for (int i = 0; i < t * e; ++i) dst[i] = src[i] + (*table)[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss

// Scalar projection sum_i w_i * x_i; the generic loss head for gradient
// checks of individual ops.
template <typename S>
TensorPtr<S> weighted_sum(const TensorPtr<S>& x, std::shared_ptr<const std::vector<S>> weights) {
    if (weights->size() != x->v.size()) throw ShapeError("weighted_sum: weight count mismatch");
    auto out = detail::make_node<S>(
        {1}, {x}, [x, weights](Tensor<S>& self) {
            x->ensure_grad();
            for (size_t i = 0; i < x->g.size(); ++i) x->g[i] += self.g[0] * (*weights)[i];
        });
    double acc = 0.0;
    for (size_t i = 0; i < x->v.size(); ++i) {
        acc += static_cast<double>(x->v[i]) * static_cast<double>((*weights)[i]);
    }
    out->v[0] = static_cast<S>(acc);
    return out;
}

// Numerically stable softmax cross-entropy with one-hot labels.
// Returns the scalar batch-mean loss; the gradient w.r.t. logits is
// (softmax - labels) / N.
template <typename S>
TensorPtr<S> softmax_cross_entropy(const TensorPtr<S>& logits, const std::vector<int>& labels) {
    if (logits->shape.size() != 2) throw ShapeError("softmax_cross_entropy: need [N,K] logits");
    const int n = logits->shape[0], k = logits->shape[1];
    if (static_cast<int>(labels.size()) != n) throw ShapeError("softmax_cross_entropy: label count");
    if (k < 2) throw ShapeError("softmax_cross_entropy: need K >= 2");
    for (int lab : labels) {
        if (lab < 0 || lab >= k) throw ShapeError("softmax_cross_entropy: label out of range");
    }

    auto probs = std::make_shared<std::vector<S>>(logits->v.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const S* row = logits->v.data() + static_cast<size_t>(i) * k;
        S mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        const double log_z = std::log(sum) + static_cast<double>(mx);
        loss += log_z - static_cast<double>(row[labels[i]]);
        S* prow = probs->data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            prow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - log_z));
        }
    }
    loss /= n;

    auto out = detail::make_node<S>(
        {1}, {logits}, [logits, probs, labels, n, k](Tensor<S>& self) {
            logits->ensure_grad();
            const S seed = self.g[0];
            const S inv_n = S(1) / static_cast<S>(n);
            for (int i = 0; i < n; ++i) {
                const S* prow = probs->data() + static_cast<size_t>(i) * k;
                S* grow = logits->g.data() + static_cast<size_t>(i) * k;
                for (int j = 0; j < k; ++j) {
                    S delta = prow[j];
                    if (j == labels[i]) delta -= S(1);
                    grow[j] += seed * inv_n * delta;
                }
            }
        });
    out->v[0] = static_cast<S>(loss);
    if (!out->requires_grad) probs.reset();
    return out;
}

} // namespace sonostack::nn
