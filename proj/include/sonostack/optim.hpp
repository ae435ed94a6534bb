#pragma once

#include <cmath>
#include <vector>

#include "sonostack/layers.hpp"
#include "sonostack/tensor.hpp"

namespace sonostack::nn {

// Cosine decay from lr0 at step 0 to 0 at step == total.
inline double cosine_schedule(int step, int total, double lr0) {
    if (total < 1) throw ConfigError("cosine_schedule: total must be >= 1");
    if (step < 0 || step > total) throw ConfigError("cosine_schedule: step out of range");
    return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * step / total));
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0; // > 0 selects the decoupled AdamW update
};

// Adam / AdamW over a fixed parameter list. Frozen parameters
// (requires_grad == false) are skipped entirely: no state, no update.
template <typename S>
class Adam {
public:
    Adam(std::vector<TensorPtr<S>> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->v.size(), S(0));
            v_[i].assign(params_[i]->v.size(), S(0));
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int step_count() const { return step_; }

    // One update from the gradients currently held by the parameters;
    // clears them afterwards.
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < p.v.size(); ++j) {
                const double grad = static_cast<double>(p.g[j]);
                m[j] = static_cast<S>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad);
                v[j] = static_cast<S>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad * grad);
                const double mhat = static_cast<double>(m[j]) / bc1;
                const double vhat = static_cast<double>(v[j]) / bc2;
                double update = cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                if (cfg_.weight_decay > 0.0) {
                    update += cfg_.lr * cfg_.weight_decay * static_cast<double>(p.v[j]);
                }
                p.v[j] = static_cast<S>(static_cast<double>(p.v[j]) - update);
            }
            p.zero_grad();
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

private:
    std::vector<TensorPtr<S>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<S>> m_, v_;
    int step_ = 0;
};

} // namespace sonostack::nn
