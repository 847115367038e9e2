// Attention-based module selector.
//
// Each sample is represented twice: by x̂, the column-wise max over its patch
// embeddings, and by the pre-softmax logits l_j of every source model. Two
// small towers project both into a shared d'-dimensional space
//
//   h_x   = LN_x(W_ux^T · relu(W_dx^T · x̂))
//   h_l,j = LN_l(W_ul^T · relu(W_dl^T · l_j))
//
// and the weight of source j is softmax_j(h_l,j · h_x).
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pluto/autodiff.hpp"
#include "pluto/container.hpp"
#include "pluto/optim.hpp"
#include "pluto/pet.hpp"
#include "pluto/synth.hpp"
#include "pluto/vit.hpp"

namespace pluto {

struct SelectorConfig {
    std::size_t d = 32;  // backbone embedding width
    std::size_t dx = 16; // input tower hidden width
    std::size_t dl = 16; // logit tower hidden width
    std::size_t dp = 16; // shared projection width
    std::size_t v = 10;  // logit width (= classes)
    double dropout_rate = 0.0;
    double ln_eps = 1e-5;

    void validate() const {
        if (!d || !dx || !dl || !dp || !v) throw DomainError("SelectorConfig: all dims must be >= 1");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw DomainError("SelectorConfig: dropout_rate must be in [0,1)");
    }
    bool operator==(const SelectorConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SelectorConfig, d, dx, dl, dp, v, dropout_rate, ln_eps)

struct SelectorParams {
    SelectorConfig cfg;
    Tensor w_dx; // [d×dx]
    Tensor w_ux; // [dx×dp]
    Tensor w_dl; // [v×dl]
    Tensor w_ul; // [dl×dp]
    LnPair ln_x; // [dp] each
    LnPair ln_l;

    template <typename F>
    void for_each(F&& f) const {
        f("selector.w_dx", w_dx);
        f("selector.w_ux", w_ux);
        f("selector.w_dl", w_dl);
        f("selector.w_ul", w_ul);
        f("selector.ln_x.gamma", ln_x.gamma);
        f("selector.ln_x.beta", ln_x.beta);
        f("selector.ln_l.gamma", ln_l.gamma);
        f("selector.ln_l.beta", ln_l.beta);
    }

    template <typename F>
    void for_each_mut(F&& f) {
        std::as_const(*this).for_each([&](const std::string& n, const Tensor& t) { f(n, const_cast<Tensor&>(t)); });
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
        return n;
    }

    bool operator==(const SelectorParams&) const = default;
};

inline std::string selector_digest(const SelectorParams& s) {
    Bytes buf;
    s.for_each([&](const std::string&, const Tensor& t) {
        const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data().data());
        buf.insert(buf.end(), raw, raw + t.size() * sizeof(double));
    });
    return to_hex(sha256(buf));
}

/// Projections uniform in ±1/√fan_in; LayerNorms start at γ = 1, β = 0.
inline SelectorParams init_selector(const SelectorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto uni = [&](std::size_t r, std::size_t c) {
        Tensor t({r, c});
        const double a = 1.0 / std::sqrt(static_cast<double>(r));
        std::uniform_real_distribution<double> u(-a, a);
        for (auto& v : t.data()) v = u(rng);
        return t;
    };
    SelectorParams s;
    s.cfg = cfg;
    s.w_dx = uni(cfg.d, cfg.dx);
    s.w_ux = uni(cfg.dx, cfg.dp);
    s.w_dl = uni(cfg.v, cfg.dl);
    s.w_ul = uni(cfg.dl, cfg.dp);
    s.ln_x = {Tensor({cfg.dp}, 1.0), Tensor({cfg.dp})};
    s.ln_l = {Tensor({cfg.dp}, 1.0), Tensor({cfg.dp})};
    return s;
}

// ---------------------------------------------------------------------------
// Single-sample value operations
// ---------------------------------------------------------------------------

inline Tensor embed_input(const SelectorParams& s, const Tensor& x_hat) {
    if (x_hat.size() != s.cfg.d)
        throw DimensionError("embed_input: x_hat " + shape_str(x_hat.shape()) + ", expected [" +
                             std::to_string(s.cfg.d) + "]");
    Tensor h = apply_linear(relu(apply_linear(x_hat.reshaped({1, s.cfg.d}), s.w_dx)), s.w_ux);
    return layer_norm(h.reshaped({s.cfg.dp}), s.ln_x.gamma, s.ln_x.beta, s.cfg.ln_eps);
}

inline Tensor embed_logits(const SelectorParams& s, const Tensor& logits) {
    if (logits.size() != s.cfg.v)
        throw DimensionError("embed_logits: logits " + shape_str(logits.shape()) + ", expected [" +
                             std::to_string(s.cfg.v) + "]");
    Tensor h = apply_linear(relu(apply_linear(logits.reshaped({1, s.cfg.v}), s.w_dl)), s.w_ul);
    return layer_norm(h.reshaped({s.cfg.dp}), s.ln_l.gamma, s.ln_l.beta, s.cfg.ln_eps);
}

/// w_j = exp(h_l,j · h_x) / Σ_k exp(h_l,k · h_x).
inline Tensor attention_weights(const Tensor& h_x, const std::vector<Tensor>& h_l) {
    if (h_l.empty()) throw DomainError("attention_weights: no sources");
    std::vector<double> scores;
    for (const auto& h : h_l) {
        require_same_shape(h, h_x, "attention_weights");
        double s = 0.0;
        for (std::size_t i = 0; i < h.size(); ++i) s += h[i] * h_x[i];
        scores.push_back(s);
    }
    return Tensor::vec(softmax(scores));
}

/// Σ_j w_j l_j.
inline Tensor ensemble_logits(const Tensor& weights, const std::vector<Tensor>& logits) {
    if (logits.empty() || weights.size() != logits.size())
        throw DimensionError("ensemble_logits: " + std::to_string(weights.size()) + " weights for " +
                             std::to_string(logits.size()) + " sources");
    Tensor out(logits.front().shape());
    for (std::size_t j = 0; j < logits.size(); ++j) {
        require_same_shape(logits[j], out, "ensemble_logits");
        for (std::size_t c = 0; c < out.size(); ++c) out[c] += weights[j] * logits[j][c];
    }
    return out;
}

/// Convex combination Σ_j w_j ŷ_j of per-source probability vectors.
inline Tensor weighted_pseudo_label(const Tensor& weights, const std::vector<Tensor>& probs) {
    check_simplex(weights.data(), "weighted_pseudo_label weights", 1e-6);
    for (const auto& p : probs) check_simplex(p.data(), "weighted_pseudo_label probabilities", 1e-6);
    return ensemble_logits(weights, probs);
}

// ---------------------------------------------------------------------------
// Batched, differentiable path
// ---------------------------------------------------------------------------

/// Selector inputs for a batch: image representations and cached source logits.
struct SelectorBatch {
    Tensor x_hat;  // [B×d]
    Tensor logits; // [(B·N)×v], row b·N + j is source j on sample b
    std::size_t sources = 0;

    std::size_t size() const { return x_hat.rows(); }

    /// The first `count` samples.
    SelectorBatch head(std::size_t count) const {
        count = std::min(count, size());
        if (count == 0) throw DomainError("SelectorBatch::head of zero samples");
        const std::size_t d = x_hat.cols(), v = logits.cols();
        std::vector<double> xs(x_hat.data().begin(), x_hat.data().begin() + count * d);
        std::vector<double> ls(logits.data().begin(), logits.data().begin() + count * sources * v);
        return {Tensor({count, d}, std::move(xs)), Tensor({count * sources, v}, std::move(ls)), sources};
    }

    /// Per-source softmax probabilities, same layout as logits.
    Tensor probs() const { return softmax_rows(logits); }
};

/// Builds a batch from per-sample x̂ vectors and per-source logit matrices [B×v].
inline SelectorBatch make_selector_batch(const std::vector<Tensor>& x_hats, const std::vector<Tensor>& source_logits) {
    if (x_hats.empty()) throw DomainError("selector batch is empty");
    if (source_logits.empty()) throw DomainError("selector batch has no sources");
    const std::size_t B = x_hats.size(), N = source_logits.size(), d = x_hats.front().size();
    const std::size_t v = source_logits.front().cols();
    SelectorBatch sb{Tensor({B, d}), Tensor({B * N, v}), N};
    for (std::size_t b = 0; b < B; ++b) {
        if (x_hats[b].size() != d) throw DimensionError("selector batch: ragged x_hat");
        std::copy(x_hats[b].data().begin(), x_hats[b].data().end(), sb.x_hat.row(b).begin());
    }
    for (std::size_t j = 0; j < N; ++j) {
        if (source_logits[j].rows() != B || source_logits[j].cols() != v)
            throw DimensionError("selector batch: source " + std::to_string(j) + " logits " +
                                 shape_str(source_logits[j].shape()));
        for (std::size_t b = 0; b < B; ++b)
            std::copy(source_logits[j].row(b).begin(), source_logits[j].row(b).end(), sb.logits.row(b * N + j).begin());
    }
    return sb;
}

struct BoundSelector {
    Var w_dx, w_ux, w_dl, w_ul, gx, bx, gl, bl;
};

inline BoundSelector bind_selector(Graph& g, const SelectorParams& s, bool trainable) {
    auto put = [&](const std::string& n, const Tensor& t) { return trainable ? g.watch(n, t) : g.constant(t); };
    return {put("selector.w_dx", s.w_dx),        put("selector.w_ux", s.w_ux),
            put("selector.w_dl", s.w_dl),        put("selector.w_ul", s.w_ul),
            put("selector.ln_x.gamma", s.ln_x.gamma), put("selector.ln_x.beta", s.ln_x.beta),
            put("selector.ln_l.gamma", s.ln_l.gamma), put("selector.ln_l.beta", s.ln_l.beta)};
}

/// One projection tower; a null rng means evaluation mode (no dropout).
inline Var tower(Var in, Var w_down, Var w_up, Var gamma, Var beta, double dropout, std::mt19937_64* rng,
                 double eps) {
    Var h = ad::relu(ad::matmul(in, w_down));
    if (rng && dropout > 0.0) {
        Tensor mask(h.value().shape());
        std::bernoulli_distribution keep(1.0 - dropout);
        for (auto& m : mask.data()) m = keep(*rng) ? 1.0 / (1.0 - dropout) : 0.0;
        h = ad::mul_const(h, mask);
    }
    return ad::layer_norm_rows(ad::matmul(h, w_up), gamma, beta, eps);
}

/// Per-sample source weights [B×N] recorded on g.
inline Var selector_weights(Graph& g, const BoundSelector& b, const SelectorParams& s, const SelectorBatch& batch,
                            std::mt19937_64* dropout_rng = nullptr) {
    if (batch.x_hat.cols() != s.cfg.d || batch.logits.cols() != s.cfg.v)
        throw DimensionError("selector batch does not match selector dims");
    Var hx = tower(g.constant(batch.x_hat), b.w_dx, b.w_ux, b.gx, b.bx, s.cfg.dropout_rate, dropout_rng, s.cfg.ln_eps);
    Var hl = tower(g.constant(batch.logits), b.w_dl, b.w_ul, b.gl, b.bl, s.cfg.dropout_rate, dropout_rng, s.cfg.ln_eps);
    return ad::softmax_rows(ad::group_dot(hl, hx, batch.sources));
}

/// Evaluation-mode weights [B×N].
inline Tensor selector_weights(const SelectorParams& s, const SelectorBatch& batch) {
    Graph g;
    return selector_weights(g, bind_selector(g, s, false), s, batch).value();
}

/// Weighted pseudo-labels [B×K] on the graph.
inline Var weighted_pseudo_labels(Graph& g, Var weights, const SelectorBatch& batch) {
    return ad::group_mix(weights, g.constant(batch.probs()));
}

/// Mean over the batch of H(Σ_j w_j softmax(l_j)).
inline double batch_pseudo_label_entropy(const SelectorParams& s, const SelectorBatch& batch) {
    Graph g;
    Var w = selector_weights(g, bind_selector(g, s, false), s, batch);
    return ad::entropy_rows_mean(weighted_pseudo_labels(g, w, batch)).value().item();
}

/// Gradient of the batch pseudo-label entropy w.r.t. every selector tensor.
inline std::map<std::string, Tensor> batch_pseudo_label_entropy_grad(const SelectorParams& s, const SelectorBatch& batch,
                                                                     double* loss = nullptr) {
    Graph g;
    Var w = selector_weights(g, bind_selector(g, s, true), s, batch);
    Var l = ad::entropy_rows_mean(weighted_pseudo_labels(g, w, batch));
    if (loss) *loss = l.value().item();
    if (!std::isfinite(l.value().item())) throw NumericError("selector entropy is not finite");
    return gradient(g, l);
}

/// One or more plain gradient steps on the batch pseudo-label entropy.
/// Returns updated parameters; the input is never modified.
inline SelectorParams tta_update(const SelectorParams& s, const SelectorBatch& batch, double lr, std::size_t steps = 1) {
    if (steps < 1) throw DomainError("tta_update: steps must be >= 1");
    if (!(lr >= 0.0)) throw DomainError("tta_update: lr must be non-negative");
    SelectorParams out = s;
    if (lr == 0.0) return out;
    for (std::size_t k = 0; k < steps; ++k) {
        const auto grads = batch_pseudo_label_entropy_grad(out, batch);
        out.for_each_mut([&](const std::string& n, Tensor& t) {
            const Tensor& g = grads.at(n);
            for (std::size_t i = 0; i < t.size(); ++i) t[i] -= lr * g[i];
        });
        bool finite = true;
        out.for_each([&](const std::string&, const Tensor& t) { finite = finite && t.all_finite(); });
        if (!finite) throw NumericError("tta_update produced non-finite selector parameters");
    }
    return out;
}

/// Supervised initialisation: cross-entropy of the weighted pseudo-label against
/// ground truth, minimised by momentum-free SGD over mini-batches.
inline SelectorParams init_supervised(const SelectorParams& init, const SelectorBatch& data,
                                      const std::vector<std::size_t>& labels, OptimizerSpec opt, std::size_t epochs,
                                      std::uint64_t seed, TrainLog* log = nullptr) {
    if (labels.size() != data.size()) throw DimensionError("init_supervised: one label per sample");
    for (auto l : labels)
        if (l >= init.cfg.v) throw DomainError("init_supervised: label out of range");
    SelectorParams s = init;
    if (epochs == 0) return s;
    opt.kind = OptimizerKind::sgd;
    opt.momentum = 0.0;
    opt.epochs = epochs;
    opt.warmup_epochs = 0;
    std::vector<std::pair<std::string, Tensor*>> params;
    s.for_each_mut([&](const std::string& n, Tensor& t) { params.emplace_back(n, &t); });
    const Tensor probs = data.probs();
    const std::size_t N = data.sources, d = data.x_hat.cols(), v = data.logits.cols();
    std::mt19937_64 drop_rng(seed ^ 0xd1b54a32d192ed03ULL);
    train_loop(
        params, opt, data.size(), seed,
        [&](Graph& g, const std::vector<std::size_t>& idx) {
            SelectorBatch mb{Tensor({idx.size(), d}), Tensor({idx.size() * N, v}), N};
            Tensor p({idx.size() * N, v});
            std::vector<std::size_t> y;
            for (std::size_t i = 0; i < idx.size(); ++i) {
                std::copy(data.x_hat.row(idx[i]).begin(), data.x_hat.row(idx[i]).end(), mb.x_hat.row(i).begin());
                for (std::size_t j = 0; j < N; ++j) {
                    std::copy(data.logits.row(idx[i] * N + j).begin(), data.logits.row(idx[i] * N + j).end(),
                              mb.logits.row(i * N + j).begin());
                    std::copy(probs.row(idx[i] * N + j).begin(), probs.row(idx[i] * N + j).end(),
                              p.row(i * N + j).begin());
                }
                y.push_back(labels[idx[i]]);
            }
            Var w = selector_weights(g, bind_selector(g, s, true), s, mb, &drop_rng);
            return ad::nll_rows_mean(ad::group_mix(w, g.constant(std::move(p))), y);
        },
        log);
    return s;
}

inline Bytes serialize_selector(const SelectorParams& s, const std::string& id = "selector") {
    Container c;
    c.id = id;
    c.kind = "selector";
    c.hyper = s.cfg;
    s.for_each([&](const std::string& n, const Tensor& t) { c.tensors.push_back({n, t, DType::f32}); });
    return encode_container(c);
}

inline SelectorParams deserialize_selector(std::span<const std::uint8_t> bytes) {
    const Container c = decode_container(bytes);
    if (c.kind != "selector") throw FormatError("container kind " + c.kind + " is not a selector");
    SelectorConfig cfg;
    try {
        cfg = c.hyper.get<SelectorConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("selector header: ") + e.what());
    }
    SelectorParams s = init_selector(cfg, 0);
    s.for_each_mut([&](const std::string& n, Tensor& t) {
        const Tensor& src = c.tensor(n);
        if (src.shape() != t.shape()) throw ShapeMismatchError("selector tensor " + n + " has wrong shape");
        t = src;
    });
    return s;
}

} // namespace pluto
