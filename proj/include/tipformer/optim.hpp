#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tipformer/autodiff.hpp"
#include "tipformer/common.hpp"
#include "tipformer/tensor.hpp"

namespace tipformer {

// Scalar binary cross-entropy with the same clamp the tape op uses.
inline double bce_value(double p, int label) {
    if (label != 0 && label != 1) throw UsageError("bce_value: label must be 0 or 1");
    const double lo = 1e-7, hi = 1.0 - 1e-7;
    const double pc = std::min(hi, std::max(lo, p));
    return label == 1 ? -std::log(pc) : -std::log(1.0 - pc);
}

// Batch-sum form over per-example probability nodes.
template <typename S>
ValueT<S> bce_batch_sum(TapeT<S>& tape, const std::vector<ValueT<S>>& probs,
                        const std::vector<int>& labels) {
    if (probs.empty() || probs.size() != labels.size()) {
        throw UsageError("bce_batch_sum: need equally many probabilities and labels");
    }
    ValueT<S> total;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        auto term = tape.bce(probs[i], labels[i]);
        total = total ? tape.add(total, term) : term;
    }
    return total;
}

struct OptimConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("learning_rate must be non-negative");
        if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("beta1 must be in [0, 1)");
        if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("beta2 must be in [0, 1)");
        if (eps <= 0.0) throw ConfigError("eps must be positive");
    }
};

// Rectified Adam. Moment estimates live in the parameter's scalar type; the
// rectification bookkeeping runs in double so the step-1 hand trace holds at
// either precision.
template <typename S>
class RAdamT {
public:
    RAdamT(std::vector<ValueT<S>> params, OptimConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        cfg_.validate();
        for (const auto& p : params_) {
            if (!p || !p->requires_grad) {
                throw UsageError("RAdam needs trainable parameters with gradients");
            }
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    i64 step_count() const { return t_; }

    void step() {
        ++t_;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double b1t = std::pow(b1, static_cast<double>(t_));
        const double b2t = std::pow(b2, static_cast<double>(t_));
        const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
        const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
        const bool rectified = rho_t > 4.0;
        double r_t = 0.0;
        if (rectified) {
            r_t = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                            ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
        }
        const double m_corr = 1.0 / (1.0 - b1t);
        const double v_corr = 1.0 / (1.0 - b2t);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& theta = params_[i]->value;
            const auto& g = params_[i]->grad;
            auto& m = m_[i];
            auto& v = v_[i];
            for (i64 j = 0; j < theta.numel(); ++j) {
                const double gj = static_cast<double>(g[j]);
                const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
                const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
                m[j] = static_cast<S>(mj);
                v[j] = static_cast<S>(vj);
                const double m_hat = mj * m_corr;
                double update;
                if (rectified) {
                    const double v_hat = std::sqrt(vj * v_corr);
                    update = cfg_.learning_rate * r_t * m_hat / (v_hat + cfg_.eps);
                } else {
                    update = cfg_.learning_rate * m_hat;
                }
                theta[j] = static_cast<S>(static_cast<double>(theta[j]) - update);
            }
        }
    }

    const std::vector<TensorT<S>>& first_moments() const { return m_; }
    const std::vector<TensorT<S>>& second_moments() const { return v_; }

private:
    std::vector<ValueT<S>> params_;
    OptimConfig cfg_;
    std::vector<TensorT<S>> m_, v_;
    i64 t_ = 0;
};

// Slow-weight wrapper: every k-th inner step the slow weights move a fraction
// alpha toward the fast ones and the fast weights restart there.
template <typename S>
class LookAheadT {
public:
    LookAheadT(std::vector<ValueT<S>> params, i64 k, double alpha)
        : params_(std::move(params)), k_(k), alpha_(alpha) {
        if (k_ < 1) throw ConfigError("lookahead_k must be at least 1");
        if (alpha_ <= 0.0 || alpha_ > 1.0) throw ConfigError("lookahead_alpha must be in (0, 1]");
        for (const auto& p : params_) slow_.push_back(p->value);
    }

    void after_inner_step() {
        if (++counter_ % k_ != 0) return;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& theta = params_[i]->value;
            auto& phi = slow_[i];
            for (i64 j = 0; j < theta.numel(); ++j) {
                const double moved = static_cast<double>(phi[j]) +
                                     alpha_ * (static_cast<double>(theta[j]) - static_cast<double>(phi[j]));
                phi[j] = static_cast<S>(moved);
                theta[j] = phi[j];
            }
        }
    }

    i64 inner_counter() const { return counter_; }
    const std::vector<TensorT<S>>& slow_weights() const { return slow_; }

private:
    std::vector<ValueT<S>> params_;
    i64 k_;
    double alpha_;
    std::vector<TensorT<S>> slow_;
    i64 counter_ = 0;
};

}  // namespace tipformer
