// Sharpness-aware entropy minimisation over LayerNorm affine parameters.
//
// λ is the flat concatenation of every LayerNorm γ and β of one source model.
// A step evaluates the entropy gradient v at λ, moves to λ + ρ·v/‖v‖, and
// descends along the gradient taken there.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <json.hpp>

#include "pluto/autodiff.hpp"
#include "pluto/vit.hpp"

namespace pluto {

struct SamConfig {
    double rho = 0.05;
    double entropy_threshold_factor = 0.4; // E0 = factor · ln K
    double lr = 1e-3;

    void validate() const {
        if (!(rho > 0.0)) throw DomainError("SamConfig: rho must be positive");
        if (!(entropy_threshold_factor > 0.0 && entropy_threshold_factor <= 1.0))
            throw DomainError("SamConfig: entropy_threshold_factor must be in (0,1]");
        if (!(lr >= 0.0)) throw DomainError("SamConfig: lr must be non-negative");
    }

    double threshold(std::size_t classes) const {
        return entropy_threshold_factor * std::log(static_cast<double>(classes));
    }

    bool operator==(const SamConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamConfig, rho, entropy_threshold_factor, lr)

struct SamStepReport {
    std::vector<double> entropy; // per sample, at the λ it was screened with
    std::vector<bool> filtered;  // entropy > E0
    std::vector<double> grad_norm;
    std::vector<double> step_norm;
    double threshold = 0.0;

    std::size_t used() const {
        return static_cast<std::size_t>(std::count(filtered.begin(), filtered.end(), false));
    }
};

/// A source model: shared backbone plus one (possibly absent) module.
struct SourceModel {
    const VitParams* backbone = nullptr;
    const ModuleRecord* module = nullptr;

    const VitParams& params() const {
        if (!backbone) throw DomainError("SourceModel has no backbone");
        return *backbone;
    }
};

inline void require_batch(std::span<const Tensor> images, const char* what) {
    if (images.empty()) throw DomainError(std::string(what) + ": empty batch");
}

/// Per-sample prediction entropies under the given LayerNorm state.
inline std::vector<double> sample_entropies(const SourceModel& m, const LnState& ln, std::span<const Tensor> images) {
    require_batch(images, "sample_entropies");
    const Tensor z = forward_logits(m.params(), m.module, ln, images);
    std::vector<double> h(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        const auto p = softmax(z.row(r));
        h[r] = shannon_entropy(p);
    }
    return h;
}

/// Mean prediction entropy of a batch.
inline double source_batch_entropy(const SourceModel& m, const LnState& ln, std::span<const Tensor> images) {
    const auto h = sample_entropies(m, ln, images);
    double s = 0.0;
    for (double v : h) s += v;
    return s / static_cast<double>(h.size());
}

/// Value and flat λ-gradient of the mean entropy over the kept samples.
inline std::pair<double, Tensor> entropy_and_grad(const SourceModel& m, const LnState& ln,
                                                  std::span<const Tensor> images, std::vector<bool> keep = {}) {
    require_batch(images, "entropy_and_grad");
    const VitParams& p = m.params();
    Graph g;
    BoundVit b = bind(g, p, ln, m.module, {.ln = true});
    Var z = forward_graph(g, b, p.cfg, patchify_batch(images, p.cfg), images.size()).logits;
    Var loss = ad::softmax_entropy(z, std::move(keep));
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericError("source entropy is not finite");
    Tensor grad = ln.flatten_grads(gradient(g, loss));
    if (!grad.all_finite()) throw NumericError("source entropy gradient is not finite");
    return {value, std::move(grad)};
}

/// ε* = ρ · v / ‖v‖₂, or the zero vector when ‖v‖₂ = 0.
inline Tensor epsilon_star(const Tensor& v, double rho) {
    if (!(rho > 0.0)) throw DomainError("epsilon_star: rho must be positive");
    const double n = l2_norm(v.data());
    Tensor out(v.shape());
    if (n == 0.0) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = rho * (v[i] / n);
    return out;
}

inline LnState shifted(const LnState& ln, const Tensor& delta, double scale = 1.0) {
    Tensor flat = ln.flatten();
    require_same_shape(flat, delta, "LnState shift");
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += scale * delta[i];
    return ln.unflatten(flat);
}

struct SamGradient {
    Tensor grad;       // ∇ℒ at λ + ε*
    Tensor epsilon;    // ε*
    double first_norm; // ‖v‖₂
};

/// Gradient of the kept-sample mean entropy evaluated at λ + ε*(λ); λ is not modified.
inline SamGradient sam_gradient_detail(const SourceModel& m, const LnState& ln, std::span<const Tensor> images,
                                       double rho, const std::vector<bool>& keep = {}) {
    const auto [loss, v] = entropy_and_grad(m, ln, images, keep);
    (void)loss;
    Tensor eps = epsilon_star(v, rho);
    auto second = entropy_and_grad(m, shifted(ln, eps), images, keep);
    return {std::move(second.second), std::move(eps), l2_norm(v.data())};
}

inline Tensor sam_gradient(const SourceModel& m, const LnState& ln, std::span<const Tensor> images, double rho) {
    return sam_gradient_detail(m, ln, images, rho).grad;
}

/// Per-sample sequential variant: each sample is screened with the current λ and,
/// when its entropy is at most E0, immediately used for one SAM step.
inline std::pair<LnState, SamStepReport> filtered_sam_step(const SourceModel& m, const LnState& ln,
                                                           std::span<const Tensor> images, const SamConfig& cfg) {
    cfg.validate();
    require_batch(images, "filtered_sam_step");
    SamStepReport rep;
    rep.threshold = cfg.threshold(m.params().cfg.classes);
    LnState cur = ln;
    std::size_t nan = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto one = images.subspan(i, 1);
        const double h = sample_entropies(m, cur, one).front();
        if (!std::isfinite(h)) ++nan;
        rep.entropy.push_back(h);
        const bool skip = !(h <= rep.threshold);
        rep.filtered.push_back(skip);
        if (skip) {
            rep.grad_norm.push_back(0.0);
            rep.step_norm.push_back(0.0);
            continue;
        }
        const SamGradient sg = sam_gradient_detail(m, cur, one, cfg.rho);
        rep.grad_norm.push_back(sg.first_norm);
        rep.step_norm.push_back(cfg.lr * l2_norm(sg.grad.data()));
        if (cfg.lr != 0.0) cur = shifted(cur, sg.grad, -cfg.lr);
    }
    if (nan == images.size()) throw NumericError("filtered_sam_step: every forward pass produced NaN");
    return {std::move(cur), std::move(rep)};
}

/// One batch-level SAM step on the mean entropy of the samples with entropy ≤ E0.
inline std::pair<LnState, SamStepReport> batch_sam_step_report(const SourceModel& m, const LnState& ln,
                                                               std::span<const Tensor> images, const SamConfig& cfg) {
    cfg.validate();
    require_batch(images, "batch_sam_step");
    SamStepReport rep;
    rep.threshold = cfg.threshold(m.params().cfg.classes);
    rep.entropy = sample_entropies(m, ln, images);
    std::vector<bool> keep;
    for (double h : rep.entropy) {
        if (!std::isfinite(h)) throw NumericError("batch_sam_step: non-finite entropy");
        rep.filtered.push_back(h > rep.threshold);
        keep.push_back(h <= rep.threshold);
    }
    if (rep.used() == 0) return {ln, std::move(rep)};
    const SamGradient sg = sam_gradient_detail(m, ln, images, cfg.rho, keep);
    rep.grad_norm.push_back(sg.first_norm);
    rep.step_norm.push_back(cfg.lr * l2_norm(sg.grad.data()));
    if (cfg.lr == 0.0) return {ln, std::move(rep)};
    return {shifted(ln, sg.grad, -cfg.lr), std::move(rep)};
}

inline LnState batch_sam_step(const SourceModel& m, const LnState& ln, std::span<const Tensor> images,
                              const SamConfig& cfg) {
    return batch_sam_step_report(m, ln, images, cfg).first;
}

/// Plain (no perturbation, no filtering) entropy descent step; used by baselines.
inline LnState plain_entropy_step(const SourceModel& m, const LnState& ln, std::span<const Tensor> images, double lr) {
    if (lr == 0.0) return ln;
    auto [loss, g] = entropy_and_grad(m, ln, images);
    (void)loss;
    return shifted(ln, g, -lr);
}

} // namespace pluto
