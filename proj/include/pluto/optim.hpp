// First-order optimisers over a fixed, ordered list of parameter tensors.
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "pluto/tensor.hpp"

namespace pluto {

enum class OptimizerKind { adamw, sgd };

NLOHMANN_JSON_SERIALIZE_ENUM(OptimizerKind, {{OptimizerKind::adamw, "adamw"}, {OptimizerKind::sgd, "sgd"}})

struct OptimizerSpec {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-3;
    double momentum = 0.9; // sgd only
    double weight_decay = 0.0;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::size_t warmup_epochs = 1;

    bool operator==(const OptimizerSpec&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerSpec, kind, lr, momentum, weight_decay, epochs, batch_size,
                                                warmup_epochs)

/// Linear warm-up followed by cosine decay to zero, evaluated per step.
inline double cosine_lr(double base, std::size_t step, std::size_t warmup_steps, std::size_t total_steps) {
    if (step < warmup_steps) return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base;
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

class Optimizer {
public:
    Optimizer(OptimizerSpec spec, std::vector<Tensor*> params) : spec_(spec), params_(std::move(params)) {
        for (auto* p : params_) {
            m_.emplace_back(p->shape());
            if (spec_.kind == OptimizerKind::adamw) v_.emplace_back(p->shape());
        }
    }

    /// Applies one update with learning rate lr; grads align with the parameter list.
    void step(const std::vector<Tensor>& grads, double lr) {
        if (grads.size() != params_.size()) throw DimensionError("optimizer: gradient count mismatch");
        ++t_;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = *params_[i];
            const Tensor& g = grads[i];
            require_same_shape(p, g, "optimizer step");
            if (spec_.kind == OptimizerKind::adamw) {
                constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                for (std::size_t k = 0; k < p.size(); ++k) {
                    m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * g[k];
                    v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * g[k] * g[k];
                    p[k] -= lr * spec_.weight_decay * p[k];
                    p[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps);
                }
            } else {
                for (std::size_t k = 0; k < p.size(); ++k) {
                    const double gk = g[k] + spec_.weight_decay * p[k];
                    m_[i][k] = spec_.momentum * m_[i][k] + gk;
                    p[k] -= lr * m_[i][k];
                }
            }
        }
    }

    const OptimizerSpec& spec() const noexcept { return spec_; }

private:
    OptimizerSpec spec_;
    std::vector<Tensor*> params_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

} // namespace pluto
