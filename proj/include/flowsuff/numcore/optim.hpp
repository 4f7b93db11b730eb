#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/param.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace flowsuff {

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int accum_steps = 1;
};

/// AdamW with decoupled weight decay. Gradients are summed over micro-batches
/// in ParamTensor::grad; step() divides by the number of accumulated
/// micro-batches before the update and zeroes the gradients afterwards.
class AdamW {
public:
    AdamW() = default;
    AdamW(const ParamList& params, AdamWConfig cfg) : cfg_(cfg) {
        FLOWSUFF_EXPECT(cfg.accum_steps >= 1, "AdamW: accum_steps must be >= 1");
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto* p : params) {
            m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }

    const AdamWConfig& config() const noexcept { return cfg_; }
    std::int64_t step_count() const noexcept { return t_; }
    std::int64_t skipped_steps() const noexcept { return skipped_; }
    const std::vector<Matrix>& first_moments() const noexcept { return m_; }
    const std::vector<Matrix>& second_moments() const noexcept { return v_; }

    /// Returns false (and zeroes grads without updating) when any averaged
    /// gradient is non-finite.
    bool step(const ParamList& params, double lr, int micro_batches) {
        FLOWSUFF_EXPECT(params.size() == m_.size(), "AdamW::step: parameter list changed");
        FLOWSUFF_EXPECT(micro_batches >= 1, "AdamW::step: no accumulated micro-batches");
        const double inv = 1.0 / static_cast<double>(micro_batches);
        for (const auto* p : params) {
            if (!p->grad.allFinite()) {
                zero_grads(params);
                ++skipped_;
                return false;
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            FLOWSUFF_EXPECT(p.grad.rows() == m_[i].rows() && p.grad.cols() == m_[i].cols(),
                            "AdamW::step: shape mismatch for " + p.name);
            const auto g = (p.grad * inv).array();
            m_[i].array() = cfg_.beta1 * m_[i].array() + (1.0 - cfg_.beta1) * g;
            v_[i].array() = cfg_.beta2 * v_[i].array() + (1.0 - cfg_.beta2) * g * g;
            p.value.array() -= lr * cfg_.weight_decay * p.value.array();
            p.value.array() -=
                lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
            p.zero_grad();
        }
        return true;
    }

private:
    AdamWConfig cfg_;
    std::vector<Matrix> m_, v_;
    std::int64_t t_ = 0;
    std::int64_t skipped_ = 0;
};

inline bool adamw_step(AdamW& state, const ParamList& params, double lr, int micro_batches) {
    return state.step(params, lr, micro_batches);
}

/// Exponential moving average of parameter values with a fixed decay.
class EmaState {
public:
    EmaState() = default;
    EmaState(const ParamList& params, double decay) : decay_(decay), shadow_(snapshot(params)) {
        FLOWSUFF_EXPECT(decay > 0.0 && decay < 1.0, "EMA decay must lie in (0, 1)");
    }

    double decay() const noexcept { return decay_; }
    const std::vector<Matrix>& shadow() const noexcept { return shadow_; }
    std::vector<Matrix>& shadow() noexcept { return shadow_; }

    void update(const ParamList& params) {
        FLOWSUFF_EXPECT(params.size() == shadow_.size(), "EMA: parameter count mismatch");
        for (std::size_t i = 0; i < params.size(); ++i) {
            FLOWSUFF_EXPECT(params[i]->value.rows() == shadow_[i].rows() &&
                                params[i]->value.cols() == shadow_[i].cols(),
                            "EMA: shape mismatch for " + params[i]->name);
            shadow_[i] = decay_ * shadow_[i] + (1.0 - decay_) * params[i]->value;
        }
    }

private:
    double decay_ = 0.999;
    std::vector<Matrix> shadow_;
};

inline void ema_update(EmaState& ema, const ParamList& params) { ema.update(params); }

}  // namespace flowsuff
