#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sonostack/tensor.hpp"

namespace sonostack::nn {

template <typename S>
struct NamedTensor {
    std::string name;
    TensorPtr<S> tensor;
};

// Non-learnable state carried by a layer (batchnorm running statistics).
template <typename S>
struct NamedBuffer {
    std::string name;
    std::vector<S>* data;
};

namespace init {

// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)); the default for layers
// feeding ReLU.
template <typename S>
void he_uniform(TensorPtr<S>& t, int fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / fan_in);
    for (auto& v : t->v) v = static_cast<S>(rng.uniform(-limit, limit));
}

// Glorot-uniform: U(-sqrt(6/(fan_in+fan_out)), ...); used for the
// transformer projections.
template <typename S>
void glorot_uniform(TensorPtr<S>& t, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t->v) v = static_cast<S>(rng.uniform(-limit, limit));
}

} // namespace init

template <typename S>
class Conv2dLayer {
public:
    Conv2dLayer(int kh, int kw, int cin, int cout, Rng& rng, int stride = 1,
                Padding pad = Padding::same)
        : stride_(stride), pad_(pad) {
        w = Tensor<S>::make({kh, kw, cin, cout}, true);
        b = Tensor<S>::make({cout}, true);
        init::he_uniform(w, kh * kw * cin, rng);
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const { return conv2d(x, w, b, stride_, pad_); }

    void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }

    TensorPtr<S> w, b;

private:
    int stride_;
    Padding pad_;
};

template <typename S>
class DenseLayer {
public:
    DenseLayer(int in, int out, Rng& rng, bool glorot = false) {
        w = Tensor<S>::make({in, out}, true);
        b = Tensor<S>::make({out}, true);
        if (glorot) {
            init::glorot_uniform(w, in, out, rng);
        } else {
            init::he_uniform(w, in, rng);
        }
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const { return linear_lastdim(x, w, b); }

    void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }

    int in_features() const { return w->shape[0]; }
    int out_features() const { return w->shape[1]; }

    TensorPtr<S> w, b;
};

// Normalizes over all leading dimensions per channel (last dim). Covers
// both the post-conv [N,H,W,C] and post-dense [N,F] placements.
template <typename S>
class BatchNormLayer {
public:
    explicit BatchNormLayer(int channels, double momentum = 0.9, double eps = 1e-5)
        : momentum_(momentum), eps_(eps) {
        gamma = Tensor<S>::make({channels}, true);
        beta = Tensor<S>::make({channels}, true);
        std::fill(gamma->v.begin(), gamma->v.end(), S(1));
        running_mean.assign(channels, S(0));
        running_var.assign(channels, S(1));
    }

    TensorPtr<S> forward(const TensorPtr<S>& x, Mode mode) {
        const int c = static_cast<int>(gamma->size());
        if (x->shape.back() != c) throw ShapeError("batchnorm: channel mismatch");
        if (mode == Mode::train && x->shape[0] < 2) {
            throw DegenerateBatch("batchnorm: train mode needs batch size >= 2");
        }
        const int rows = static_cast<int>(x->size() / c);

        std::vector<S> mean(c, S(0)), var(c, S(0));
        if (mode == Mode::train) {
            for (int r = 0; r < rows; ++r) {
                const S* row = x->v.data() + static_cast<size_t>(r) * c;
                for (int j = 0; j < c; ++j) mean[j] += row[j];
            }
            for (int j = 0; j < c; ++j) mean[j] /= static_cast<S>(rows);
            for (int r = 0; r < rows; ++r) {
                const S* row = x->v.data() + static_cast<size_t>(r) * c;
                for (int j = 0; j < c; ++j) {
                    const S d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            for (int j = 0; j < c; ++j) var[j] /= static_cast<S>(rows);
            for (int j = 0; j < c; ++j) {
                running_mean[j] = static_cast<S>(momentum_) * running_mean[j] +
                                  static_cast<S>(1.0 - momentum_) * mean[j];
                running_var[j] = static_cast<S>(momentum_) * running_var[j] +
                                 static_cast<S>(1.0 - momentum_) * var[j];
            }
        } else {
            mean.assign(running_mean.begin(), running_mean.end());
            var.assign(running_var.begin(), running_var.end());
        }

        auto xhat = std::make_shared<std::vector<S>>(x->v.size());
        auto inv_std = std::make_shared<std::vector<S>>(c);
        for (int j = 0; j < c; ++j) {
            (*inv_std)[j] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var[j]) + eps_));
        }

        auto g = gamma;
        auto bt = beta;
        const bool train = mode == Mode::train;
        auto out = detail::make_node<S>(
            x->shape, {x, gamma, beta}, [x, g, bt, xhat, inv_std, rows, c, train](Tensor<S>& self) {
                if (g->requires_grad) g->ensure_grad();
                if (bt->requires_grad) bt->ensure_grad();
                if (g->requires_grad || bt->requires_grad) {
                    for (int r = 0; r < rows; ++r) {
                        const S* gy = self.g.data() + static_cast<size_t>(r) * c;
                        const S* xh = xhat->data() + static_cast<size_t>(r) * c;
                        for (int j = 0; j < c; ++j) {
                            if (g->requires_grad) g->g[j] += gy[j] * xh[j];
                            if (bt->requires_grad) bt->g[j] += gy[j];
                        }
                    }
                }
                if (!x->requires_grad) return;
                x->ensure_grad();
                if (!train) {
                    // running stats are constants; the chain is elementwise
                    for (int r = 0; r < rows; ++r) {
                        const S* gy = self.g.data() + static_cast<size_t>(r) * c;
                        S* gx = x->g.data() + static_cast<size_t>(r) * c;
                        for (int j = 0; j < c; ++j) gx[j] += gy[j] * g->v[j] * (*inv_std)[j];
                    }
                    return;
                }
                std::vector<S> sum_dxhat(c, S(0)), sum_dxhat_xhat(c, S(0));
                for (int r = 0; r < rows; ++r) {
                    const S* gy = self.g.data() + static_cast<size_t>(r) * c;
                    const S* xh = xhat->data() + static_cast<size_t>(r) * c;
                    for (int j = 0; j < c; ++j) {
                        const S dxh = gy[j] * g->v[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xh[j];
                    }
                }
                const S inv_rows = S(1) / static_cast<S>(rows);
                for (int r = 0; r < rows; ++r) {
                    const S* gy = self.g.data() + static_cast<size_t>(r) * c;
                    const S* xh = xhat->data() + static_cast<size_t>(r) * c;
                    S* gx = x->g.data() + static_cast<size_t>(r) * c;
                    for (int j = 0; j < c; ++j) {
                        const S dxh = gy[j] * g->v[j];
                        gx[j] += (*inv_std)[j] *
                                 (dxh - inv_rows * sum_dxhat[j] - xh[j] * inv_rows * sum_dxhat_xhat[j]);
                    }
                }
            });

        for (int r = 0; r < rows; ++r) {
            const S* row = x->v.data() + static_cast<size_t>(r) * c;
            S* xh = xhat->data() + static_cast<size_t>(r) * c;
            S* y = out->v.data() + static_cast<size_t>(r) * c;
            for (int j = 0; j < c; ++j) {
                xh[j] = (row[j] - mean[j]) * (*inv_std)[j];
                y[j] = gamma->v[j] * xh[j] + beta->v[j];
            }
        }
        if (!out->requires_grad) {
            xhat.reset();
            inv_std.reset();
        }
        return out;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }

    void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<S>>& out) {
        out.push_back({prefix + ".running_mean", &running_mean});
        out.push_back({prefix + ".running_var", &running_var});
    }

    TensorPtr<S> gamma, beta;
    std::vector<S> running_mean, running_var;

private:
    double momentum_;
    double eps_;
};

template <typename S>
class LayerNormLayer {
public:
    explicit LayerNormLayer(int dim, double eps = 1e-5) : eps_(eps) {
        gamma = Tensor<S>::make({dim}, true);
        beta = Tensor<S>::make({dim}, true);
        std::fill(gamma->v.begin(), gamma->v.end(), S(1));
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const { return layer_norm(x, gamma, beta, eps_); }

    void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }

    TensorPtr<S> gamma, beta;

private:
    double eps_;
};

// Pre-norm transformer encoder block:
//   x + Drop(MHSA(LN(x))) followed by x + Drop(FFN(LN(x)))
// with GELU inside the feed-forward and scaled dot-product attention at
// 1/sqrt(head_dim).
template <typename S>
class TransformerBlock {
public:
    TransformerBlock(int embed_dim, int heads, int ffn_dim, double dropout_p, Rng& rng)
        : heads_(heads),
          dropout_p_(dropout_p),
          ln1_(embed_dim),
          ln2_(embed_dim),
          wq_(embed_dim, embed_dim, rng, true),
          wk_(embed_dim, embed_dim, rng, true),
          wv_(embed_dim, embed_dim, rng, true),
          wo_(embed_dim, embed_dim, rng, true),
          ffn1_(embed_dim, ffn_dim, rng, true),
          ffn2_(ffn_dim, embed_dim, rng, true) {
        if (embed_dim % heads != 0) {
            throw ConfigError("attention: embed_dim must be divisible by head count");
        }
    }

    TensorPtr<S> forward(const TensorPtr<S>& x, Mode mode, Rng* rng) {
        if (x->shape.size() != 3) throw ShapeError("attention: need [N,T,D] tokens");
        const int n = x->shape[0], t = x->shape[1], d = x->shape[2];
        const int hd = d / heads_;

        auto h = ln1_.forward(x);
        auto q = split_heads(wq_.forward(h), n, t, hd);
        auto k = split_heads(wk_.forward(h), n, t, hd);
        auto v = split_heads(wv_.forward(h), n, t, hd);

        auto scores = scale(bmm(q, k, /*trans_b=*/true),
                            static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
        auto attn = softmax_lastdim(scores);
        if (capture_attention) {
            last_attention = attn->v;
            last_attention_rows = attn->shape;
        }
        auto ctx = bmm(attn, v);
        auto merged = reshape(permute(reshape(ctx, {n, heads_, t, hd}), {0, 2, 1, 3}), {n, t, d});
        auto mhsa = dropout(wo_.forward(merged), dropout_p_, mode, rng);
        auto x1 = add(x, mhsa);

        auto h2 = ln2_.forward(x1);
        auto ffn = ffn2_.forward(gelu(ffn1_.forward(h2)));
        return add(x1, dropout(ffn, dropout_p_, mode, rng));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
        ln1_.collect(prefix + ".ln1", out);
        wq_.collect(prefix + ".wq", out);
        wk_.collect(prefix + ".wk", out);
        wv_.collect(prefix + ".wv", out);
        wo_.collect(prefix + ".wo", out);
        ln2_.collect(prefix + ".ln2", out);
        ffn1_.collect(prefix + ".ffn1", out);
        ffn2_.collect(prefix + ".ffn2", out);
    }

    // Debug probe: when set, forward stores the softmaxed attention
    // weights [N*heads, T, T] of this block.
    bool capture_attention = false;
    std::vector<S> last_attention;
    std::vector<int> last_attention_rows;

private:
    // [N,T,D] -> [N*heads, T, head_dim]
    TensorPtr<S> split_heads(const TensorPtr<S>& x, int n, int t, int hd) const {
        auto r = reshape(x, {n, t, heads_, hd});
        auto p = permute(r, {0, 2, 1, 3}); // [N,heads,T,hd]
        return reshape(p, {n * heads_, t, hd});
    }

    int heads_;
    double dropout_p_;
    LayerNormLayer<S> ln1_, ln2_;
    DenseLayer<S> wq_, wk_, wv_, wo_;
    DenseLayer<S> ffn1_, ffn2_;
};

} // namespace sonostack::nn
