// Self-checks run by `pluto verify`: gradient agreement with finite differences,
// the ε* norm identity, and the mixture-of-sources bound.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pluto/sam_ln.hpp"
#include "pluto/selector.hpp"
#include "pluto/synth.hpp"

namespace pluto {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline double relative_error(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "relative_error");
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(diff) / std::max(l2_norm(b.data()), 1e-12);
}

/// A deliberately tiny backbone so finite differences stay cheap.
inline VitConfig tiny_vit_config() {
    VitConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.depth = 1;
    c.heads = 2;
    c.classes = 4;
    return c;
}

inline std::vector<Tensor> random_images(const VitConfig& cfg, std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor t({cfg.image_size, cfg.image_size, cfg.channels});
        for (auto& v : t.data()) v = u(rng);
        out.push_back(std::move(t));
    }
    return out;
}

/// LayerNorm state with γ, β jittered away from (1, 0).
inline LnState jittered_ln(const LnState& ln, std::mt19937_64& rng, double scale = 0.2) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor flat = ln.flatten();
    for (auto& v : flat.data()) v += n(rng);
    return ln.unflatten(flat);
}

inline CheckResult check_selector_gradients(std::size_t seeds) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
        std::mt19937_64 rng(1000 + s);
        SelectorConfig cfg{6, 5, 4, 3, 4, 0.0, 1e-5};
        const SelectorParams sel = init_selector(cfg, 2000 + s);
        std::normal_distribution<double> n(0.0, 1.0);
        const std::size_t B = 3, N = 3;
        SelectorBatch b{Tensor({B, cfg.d}), Tensor({B * N, cfg.v}), N};
        for (auto& v : b.x_hat.data()) v = n(rng);
        for (auto& v : b.logits.data()) v = 2.0 * n(rng);
        const auto grads = batch_pseudo_label_entropy_grad(sel, b);
        // Compared as one vector: the logit-side LayerNorm bias has an exactly zero gradient.
        std::vector<double> analytic, numeric;
        sel.for_each([&](const std::string& name, const Tensor& t) {
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& th) {
                    SelectorParams p = sel;
                    p.for_each_mut([&](const std::string& nm, Tensor& x) {
                        if (nm == name) x = th;
                    });
                    return batch_pseudo_label_entropy(p, b);
                },
                t, 1e-5);
            const Tensor& g = grads.at(name);
            analytic.insert(analytic.end(), g.data().begin(), g.data().end());
            numeric.insert(numeric.end(), fd.data().begin(), fd.data().end());
        });
        worst = std::max(worst, relative_error(Tensor::vec(analytic), Tensor::vec(numeric)));
    }
    return {"selector entropy gradient vs finite differences", worst <= 1e-4,
            "max relative error " + std::to_string(worst)};
}

inline CheckResult check_ln_gradients(std::size_t seeds) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
        std::mt19937_64 rng(3000 + s);
        const VitConfig cfg = tiny_vit_config();
        const VitParams p = init_backbone(cfg, 4000 + s);
        const SourceModel m{&p, nullptr};
        const LnState ln = jittered_ln(p.ln, rng);
        const auto images = random_images(cfg, 2, rng);
        const Tensor g = entropy_and_grad(m, ln, images).second;
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& flat) { return source_batch_entropy(m, ln.unflatten(flat), images); }, ln.flatten(),
            1e-5);
        worst = std::max(worst, relative_error(g, fd));
    }
    return {"LayerNorm entropy gradient vs finite differences", worst <= 1e-4,
            "max relative error " + std::to_string(worst)};
}

inline CheckResult check_sam_gradients(std::size_t seeds) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
        std::mt19937_64 rng(5000 + s);
        const VitConfig cfg = tiny_vit_config();
        const VitParams p = init_backbone(cfg, 6000 + s);
        const SourceModel m{&p, nullptr};
        const LnState ln = jittered_ln(p.ln, rng);
        const auto images = random_images(cfg, 2, rng);
        const SamGradient sg = sam_gradient_detail(m, ln, images, 0.05);
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& flat) { return source_batch_entropy(m, shifted(ln.unflatten(flat), sg.epsilon), images); },
            ln.flatten(), 1e-5);
        worst = std::max(worst, relative_error(sg.grad, fd));
    }
    return {"sharpness-aware gradient vs finite differences", worst <= 1e-4,
            "max relative error " + std::to_string(worst)};
}

inline CheckResult check_epsilon_norm(std::size_t seeds) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
        std::mt19937_64 rng(7000 + s);
        std::normal_distribution<double> n(0.0, std::pow(10.0, static_cast<double>(s % 7) - 3.0));
        Tensor v({50});
        for (auto& x : v.data()) x = n(rng);
        for (double rho : {1e-3, 0.05, 1.0}) worst = std::max(worst, std::abs(l2_norm(epsilon_star(v, rho).data()) - rho));
    }
    return {"perturbation norm equals rho", worst <= 1e-12, "max deviation " + std::to_string(worst)};
}

inline CheckResult check_mixture_bound(std::size_t configs, std::size_t draws, std::uint64_t seed) {
    std::size_t held = 0;
    for (std::size_t c = 0; c < configs; ++c)
        if (mixture_bound_oracle(synth_detail::mix(seed, c), draws).holds) ++held;
    return {"mixture-of-sources bound (Monte Carlo)", held == configs,
            std::to_string(held) + "/" + std::to_string(configs) + " configurations hold"};
}

inline std::vector<CheckResult> run_verification(std::uint64_t seed) {
    return {check_selector_gradients(30), check_ln_gradients(30), check_sam_gradients(30), check_epsilon_norm(30),
            check_mixture_bound(20, 100000, seed)};
}

} // namespace pluto
