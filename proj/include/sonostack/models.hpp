#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "sonostack/layers.hpp"
#include "sonostack/optim.hpp"
#include "sonostack/tensor.hpp"

namespace sonostack::models {

using nn::Mode;
using nn::NamedBuffer;
using nn::NamedTensor;
using nn::Rng;
using nn::TensorPtr;

enum class Architecture { CNN1, CNN2, AST };

const char* architecture_name(Architecture arch);
Architecture architecture_from_name(const std::string& name); // throws ConfigError

struct AstConfig {
    int depth = 2;
    int heads = 4;
    int embed_dim = 64;
    int ffn_dim = 128;
    int patch = 16;
    double dropout = 0.1;

    // The published configuration: 20 encoder blocks, 768-wide embedding,
    // 3072-unit feed-forward. 768 is not divisible by the published 20
    // heads, so the standard 12-head base split is used instead.
    static AstConfig paper_scale() { return {20, 12, 768, 3072, 16, 0.1}; }
};

struct ModelSpec {
    Architecture arch = Architecture::CNN1;
    int in_channels = 1;
    int n_classes = 2;
    AstConfig ast;

    void validate() const;
    std::string to_text() const;
    static ModelSpec from_text(const std::string& text); // throws CheckpointError
};

// Training provenance carried inside a checkpoint.
struct Provenance {
    std::string dataset;
    int epochs = 0;
    std::string feature_config;
};

// A built network: ordered layers with named parameters, plus the
// serializable side data (normalization statistics, label map,
// provenance) that travels with a checkpoint.
template <typename S>
class Model {
public:
    virtual ~Model() = default;

    TensorPtr<S> forward(const TensorPtr<S>& x, Mode mode, Rng* rng = nullptr) {
        return head_->forward(penultimate(x, mode, rng));
    }

    // Everything up to (excluding) the classification head; [N, F].
    virtual TensorPtr<S> penultimate(const TensorPtr<S>& x, Mode mode, Rng* rng) = 0;

    virtual std::vector<std::string> layer_summary() const = 0;

    std::vector<NamedTensor<S>> named_params() {
        std::vector<NamedTensor<S>> out;
        collect_body(out);
        head_->collect("head", out);
        return out;
    }

    std::vector<NamedBuffer<S>> named_buffers() {
        std::vector<NamedBuffer<S>> out;
        collect_buffers(out);
        return out;
    }

    std::vector<TensorPtr<S>> param_tensors() {
        std::vector<TensorPtr<S>> out;
        for (auto& p : named_params()) out.push_back(p.tensor);
        return out;
    }

    // Swap in a freshly initialized head of the new width and freeze
    // everything else; the transfer-learning entry point.
    void replace_head(int n_classes_new, Rng& rng) {
        if (n_classes_new < 2) throw ConfigError("replace_head: need at least 2 classes");
        head_ = std::make_unique<nn::DenseLayer<S>>(head_->in_features(), n_classes_new, rng,
                                                    head_glorot_);
        spec_.n_classes = n_classes_new;
        labels.clear();
        set_body_trainable(false);
    }

    void set_body_trainable(bool trainable) {
        std::vector<NamedTensor<S>> body;
        collect_body(body);
        for (auto& p : body) p.tensor->requires_grad = trainable;
        body_frozen_ = !trainable;
        head_->w->requires_grad = true;
        head_->b->requires_grad = true;
    }

    bool body_frozen() const { return body_frozen_; }

    const ModelSpec& spec() const { return spec_; }
    nn::DenseLayer<S>& head() { return *head_; }

    // Side data serialized with the model.
    std::vector<double> norm_mean, norm_std;
    std::vector<std::string> labels;
    Provenance provenance;

protected:
    virtual void collect_body(std::vector<NamedTensor<S>>& out) = 0;
    virtual void collect_buffers(std::vector<NamedBuffer<S>>&) {}

    // A frozen body runs in eval mode regardless of the requested mode,
    // so its running statistics and dropout stay untouched during
    // head-only finetuning.
    Mode body_mode(Mode requested) const { return body_frozen_ ? Mode::eval : requested; }

    ModelSpec spec_;
    std::unique_ptr<nn::DenseLayer<S>> head_;
    bool head_glorot_ = false;
    bool body_frozen_ = false;
};

namespace detail {

// CNN trunk shared by both architectures: conv32, conv32, conv64, conv64,
// each 2x2 'same', each followed by 2x2 max pooling.
inline constexpr int kConvFilters[4] = {32, 32, 64, 64};
inline constexpr int kDenseUnits = 1024;

template <typename S>
TensorPtr<S> pad_to_pool_grid(const TensorPtr<S>& x) {
    const int h = x->shape[1], w = x->shape[2];
    const int th = (h + 15) / 16 * 16;
    const int tw = (w + 15) / 16 * 16;
    return nn::pad2d_to(x, th, tw);
}

} // namespace detail

template <typename S>
class Cnn1Model : public Model<S> {
public:
    Cnn1Model(const ModelSpec& spec, Rng& rng) {
        this->spec_ = spec;
        int cin = spec.in_channels;
        for (int i = 0; i < 4; ++i) {
            convs_.emplace_back(2, 2, cin, detail::kConvFilters[i], rng);
            cin = detail::kConvFilters[i];
        }
        fc_ = std::make_unique<nn::DenseLayer<S>>(cin, detail::kDenseUnits, rng);
        this->head_ = std::make_unique<nn::DenseLayer<S>>(detail::kDenseUnits, spec.n_classes, rng);
    }

    TensorPtr<S> penultimate(const TensorPtr<S>& x, Mode mode, Rng*) override {
        if (x->shape.size() != 4 || x->shape[3] != this->spec_.in_channels) {
            throw ShapeError("cnn1: expected [N,H,W,C] input with C = in_channels");
        }
        (void)this->body_mode(mode); // stateless body; mode only matters for cnn2
        auto h = detail::pad_to_pool_grid(x);
        for (auto& conv : convs_) h = nn::maxpool2x2(nn::relu(conv.forward(h)));
        return nn::relu(fc_->forward(nn::global_avg_pool(h)));
    }

    std::vector<std::string> layer_summary() const override {
        std::vector<std::string> s;
        int cin = this->spec_.in_channels;
        for (int i = 0; i < 4; ++i) {
            s.push_back("conv2d 2x2 " + std::to_string(cin) + "->" +
                        std::to_string(detail::kConvFilters[i]));
            s.push_back("relu");
            s.push_back("maxpool 2x2");
            cin = detail::kConvFilters[i];
        }
        s.push_back("global_avg_pool");
        s.push_back("dense " + std::to_string(cin) + "->" + std::to_string(detail::kDenseUnits));
        s.push_back("relu");
        s.push_back("dense " + std::to_string(detail::kDenseUnits) + "->" +
                    std::to_string(this->spec_.n_classes));
        return s;
    }

protected:
    void collect_body(std::vector<NamedTensor<S>>& out) override {
        for (size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].collect("conv" + std::to_string(i + 1), out);
        }
        fc_->collect("fc", out);
    }

private:
    std::vector<nn::Conv2dLayer<S>> convs_;
    std::unique_ptr<nn::DenseLayer<S>> fc_;
};

template <typename S>
class Cnn2Model : public Model<S> {
public:
    Cnn2Model(const ModelSpec& spec, Rng& rng) {
        this->spec_ = spec;
        int cin = spec.in_channels;
        for (int i = 0; i < 4; ++i) {
            convs_.emplace_back(2, 2, cin, detail::kConvFilters[i], rng);
            bns_.emplace_back(detail::kConvFilters[i]);
            cin = detail::kConvFilters[i];
        }
        fc_ = std::make_unique<nn::DenseLayer<S>>(cin, detail::kDenseUnits, rng);
        bn_fc_ = std::make_unique<nn::BatchNormLayer<S>>(detail::kDenseUnits);
        this->head_ = std::make_unique<nn::DenseLayer<S>>(detail::kDenseUnits, spec.n_classes, rng);
    }

    TensorPtr<S> penultimate(const TensorPtr<S>& x, Mode mode, Rng* rng) override {
        if (x->shape.size() != 4 || x->shape[3] != this->spec_.in_channels) {
            throw ShapeError("cnn2: expected [N,H,W,C] input with C = in_channels");
        }
        const Mode m = this->body_mode(mode);
        auto h = detail::pad_to_pool_grid(x);
        for (int i = 0; i < 4; ++i) {
            h = nn::maxpool2x2(nn::relu(bns_[i].forward(convs_[i].forward(h), m)));
            if (i == 1 || i == 3) h = nn::dropout(h, kDropoutP, m, rng);
        }
        return nn::relu(bn_fc_->forward(fc_->forward(nn::global_avg_pool(h)), m));
    }

    std::vector<std::string> layer_summary() const override {
        std::vector<std::string> s;
        int cin = this->spec_.in_channels;
        for (int i = 0; i < 4; ++i) {
            s.push_back("conv2d 2x2 " + std::to_string(cin) + "->" +
                        std::to_string(detail::kConvFilters[i]));
            s.push_back("batchnorm");
            s.push_back("relu");
            s.push_back("maxpool 2x2");
            if (i == 1 || i == 3) s.push_back("dropout 0.25");
            cin = detail::kConvFilters[i];
        }
        s.push_back("global_avg_pool");
        s.push_back("dense " + std::to_string(cin) + "->" + std::to_string(detail::kDenseUnits));
        s.push_back("batchnorm");
        s.push_back("relu");
        s.push_back("dense " + std::to_string(detail::kDenseUnits) + "->" +
                    std::to_string(this->spec_.n_classes));
        return s;
    }

    static constexpr double kDropoutP = 0.25;

protected:
    void collect_body(std::vector<NamedTensor<S>>& out) override {
        for (size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].collect("conv" + std::to_string(i + 1), out);
            bns_[i].collect("bn" + std::to_string(i + 1), out);
        }
        fc_->collect("fc", out);
        bn_fc_->collect("bn_fc", out);
    }

    void collect_buffers(std::vector<NamedBuffer<S>>& out) override {
        for (size_t i = 0; i < bns_.size(); ++i) {
            bns_[i].collect_buffers("bn" + std::to_string(i + 1), out);
        }
        bn_fc_->collect_buffers("bn_fc", out);
    }

private:
    std::vector<nn::Conv2dLayer<S>> convs_;
    std::vector<nn::BatchNormLayer<S>> bns_;
    std::unique_ptr<nn::DenseLayer<S>> fc_;
    std::unique_ptr<nn::BatchNormLayer<S>> bn_fc_;
};

// Fixed 2-D sinusoidal position table for a patch grid: half the
// embedding encodes the row coordinate, half the column; each half is
// [sin(pos * w_i) .. | cos(pos * w_i) ..] with w_i = 10000^(-i/(E/4)).
template <typename S>
std::vector<S> sincos_position_table(int grid_h, int grid_w, int embed_dim) {
    if (embed_dim % 4 != 0) throw ConfigError("ast: embed_dim must be a multiple of 4");
    const int half = embed_dim / 2;
    const int quarter = embed_dim / 4;
    std::vector<S> table(static_cast<size_t>(grid_h) * grid_w * embed_dim);
    for (int r = 0; r < grid_h; ++r) {
        for (int c = 0; c < grid_w; ++c) {
            S* row = table.data() + (static_cast<size_t>(r) * grid_w + c) * embed_dim;
            for (int i = 0; i < quarter; ++i) {
                const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
                row[i] = static_cast<S>(std::sin(r * omega));
                row[quarter + i] = static_cast<S>(std::cos(r * omega));
                row[half + i] = static_cast<S>(std::sin(c * omega));
                row[half + quarter + i] = static_cast<S>(std::cos(c * omega));
            }
        }
    }
    return table;
}

// Toy-scale Audio Spectrogram Transformer over a 128-row log-mel map:
// non-overlapping 16x16 patch embedding, CLS token, fixed 2-D sinusoidal
// positions, pre-norm encoder blocks, layer norm on CLS, linear head.
template <typename S>
class AstModel : public Model<S> {
public:
    static constexpr int kMelRows = 128;

    AstModel(const ModelSpec& spec, Rng& rng)
        : patch_(spec.ast.patch, spec.ast.patch, spec.in_channels, spec.ast.embed_dim, rng,
                 spec.ast.patch, nn::Padding::valid),
          ln_final_(spec.ast.embed_dim) {
        this->spec_ = spec;
        this->head_glorot_ = true;
        nn::init::glorot_uniform(patch_.w, spec.ast.patch * spec.ast.patch * spec.in_channels,
                                 spec.ast.embed_dim, rng);
        cls_ = nn::Tensor<S>::make({spec.ast.embed_dim}, true);
        for (auto& v : cls_->v) v = static_cast<S>(0.02 * rng.normal());
        for (int i = 0; i < spec.ast.depth; ++i) {
            blocks_.push_back(std::make_unique<nn::TransformerBlock<S>>(
                spec.ast.embed_dim, spec.ast.heads, spec.ast.ffn_dim, spec.ast.dropout, rng));
        }
        this->head_ =
            std::make_unique<nn::DenseLayer<S>>(spec.ast.embed_dim, spec.n_classes, rng, true);
    }

    static int token_count(int h, int w, int patch = 16) { return (h / patch) * (w / patch) + 1; }

    // Full token sequence after the encoder blocks, before the final norm.
    TensorPtr<S> encode(const TensorPtr<S>& x, Mode mode, Rng* rng) {
        const auto& ast = this->spec_.ast;
        if (x->shape.size() != 4 || x->shape[3] != this->spec_.in_channels) {
            throw ShapeError("ast: expected [N,H,W,C] input with C = in_channels");
        }
        if (x->shape[1] != kMelRows) throw ShapeError("ast: input must have 128 mel rows");
        if (x->shape[2] % ast.patch != 0) {
            throw ShapeError("ast: input frame count must be a multiple of the patch size");
        }
        const Mode m = this->body_mode(mode);
        const int n = x->shape[0];
        const int gh = x->shape[1] / ast.patch;
        const int gw = x->shape[2] / ast.patch;

        auto tokens = nn::reshape(patch_.forward(x), {n, gh * gw, ast.embed_dim});
        auto seq = nn::prepend_token(tokens, cls_);
        seq = nn::add_const_rows(seq, position_table(gh, gw));
        seq = nn::dropout(seq, ast.dropout, m, rng);
        for (auto& block : blocks_) seq = block->forward(seq, m, rng);
        return seq;
    }

    // Classification path from an encoded sequence: the head reads the
    // CLS position only.
    TensorPtr<S> classify_tokens(const TensorPtr<S>& seq) {
        return this->head_->forward(ln_final_.forward(nn::take_token0(seq)));
    }

    TensorPtr<S> penultimate(const TensorPtr<S>& x, Mode mode, Rng* rng) override {
        return ln_final_.forward(nn::take_token0(encode(x, mode, rng)));
    }

    std::vector<std::string> layer_summary() const override {
        const auto& ast = this->spec_.ast;
        std::vector<std::string> s;
        s.push_back("patch_embed 16x16 " + std::to_string(this->spec_.in_channels) + "->" +
                    std::to_string(ast.embed_dim));
        s.push_back("cls_token");
        s.push_back("sincos_positions");
        for (int i = 0; i < ast.depth; ++i) {
            s.push_back("encoder_block heads=" + std::to_string(ast.heads) +
                        " ffn=" + std::to_string(ast.ffn_dim));
        }
        s.push_back("layernorm");
        s.push_back("dense " + std::to_string(ast.embed_dim) + "->" +
                    std::to_string(this->spec_.n_classes));
        return s;
    }

    void set_capture_attention(bool on) {
        for (auto& b : blocks_) b->capture_attention = on;
    }

    const nn::TransformerBlock<S>& block(int i) const { return *blocks_[i]; }

protected:
    void collect_body(std::vector<NamedTensor<S>>& out) override {
        patch_.collect("patch", out);
        out.push_back({"cls", cls_});
        for (size_t i = 0; i < blocks_.size(); ++i) {
            blocks_[i]->collect("block" + std::to_string(i), out);
        }
        ln_final_.collect("ln_final", out);
    }

private:
    // The table cache is the only state a frozen model mutates on
    // forward, so it is guarded for shared eval-mode use across threads.
    std::shared_ptr<const std::vector<S>> position_table(int gh, int gw) {
        const auto key = std::make_pair(gh, gw);
        std::lock_guard<std::mutex> lock(pos_mutex_);
        auto it = pos_cache_.find(key);
        if (it != pos_cache_.end()) return it->second;
        const int e = this->spec_.ast.embed_dim;
        auto grid = sincos_position_table<S>(gh, gw, e);
        auto table = std::make_shared<std::vector<S>>(static_cast<size_t>(gh * gw + 1) * e, S(0));
        std::copy(grid.begin(), grid.end(), table->begin() + e); // CLS row stays zero
        pos_cache_[key] = table;
        return table;
    }

    nn::Conv2dLayer<S> patch_;
    TensorPtr<S> cls_;
    std::vector<std::unique_ptr<nn::TransformerBlock<S>>> blocks_;
    nn::LayerNormLayer<S> ln_final_;
    std::mutex pos_mutex_;
    std::map<std::pair<int, int>, std::shared_ptr<const std::vector<S>>> pos_cache_;
};

template <typename S>
std::unique_ptr<Model<S>> build_model(const ModelSpec& spec, Rng& rng) {
    spec.validate();
    switch (spec.arch) {
        case Architecture::CNN1: return std::make_unique<Cnn1Model<S>>(spec, rng);
        case Architecture::CNN2: return std::make_unique<Cnn2Model<S>>(spec, rng);
        case Architecture::AST: return std::make_unique<AstModel<S>>(spec, rng);
    }
    throw ConfigError("build_model: unknown architecture");
}

template <typename S>
std::unique_ptr<Model<S>> build_model(const ModelSpec& spec, uint64_t seed) {
    Rng rng(seed);
    return build_model<S>(spec, rng);
}

struct ParamCount {
    int64_t learnable = 0;
    int64_t total = 0; // learnable plus running statistics
};

template <typename S>
ParamCount count_params(const std::vector<NamedTensor<S>>& params,
                        const std::vector<NamedBuffer<S>>& buffers) {
    ParamCount count;
    for (const auto& p : params) count.learnable += p.tensor->size();
    count.total = count.learnable;
    for (const auto& b : buffers) count.total += static_cast<int64_t>(b.data->size());
    return count;
}

template <typename S>
ParamCount count_params(Model<S>& model) {
    return count_params(model.named_params(), model.named_buffers());
}

} // namespace sonostack::models
