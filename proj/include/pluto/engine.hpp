// Test-time loop over a stream of unlabeled batches.
//
// Per batch: forward every source with its current LayerNorm state, weight the
// sources per sample with the selector, adapt the selector on the first U
// samples, keep the M sources with the largest batch-average weight, predict,
// and finally adapt the LayerNorms of the most relevant source. LayerNorm
// changes made on batch t are first used on batch t+1.
#pragma once

#include <algorithm>
#include <chrono>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include <json.hpp>

#include "pluto/sam_ln.hpp"
#include "pluto/selector.hpp"

namespace pluto {

struct EngineConfig {
    std::size_t top_m = 4;
    std::size_t batch_size = 32;
    std::size_t shots = 32; // U; 0 is zero-shot
    double selector_lr = 0.05;
    std::size_t selector_steps = 1;
    SamConfig sam;
    bool ln_update_all_selected = false; // false: argmax source only

    void validate(std::size_t sources) const {
        if (sources == 0) throw DomainError("engine needs at least one source");
        if (top_m < 1 || top_m > sources)
            throw DomainError("top_m must be in [1, " + std::to_string(sources) + "], got " + std::to_string(top_m));
        if (batch_size == 0) throw DomainError("batch_size must be positive");
        if (shots > batch_size) throw DomainError("shots must not exceed batch_size");
        if (selector_steps == 0) throw DomainError("selector_steps must be >= 1");
        if (!(selector_lr >= 0.0)) throw DomainError("selector_lr must be non-negative");
        sam.validate();
    }

    bool operator==(const EngineConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EngineConfig, top_m, batch_size, shots, selector_lr, selector_steps,
                                                sam, ln_update_all_selected)

struct WeightReport {
    Tensor initial_weights;           // [B×N], selector before its update
    Tensor per_sample_weights;        // [B×N], selector after its update
    Tensor batch_avg;                 // [N]
    std::vector<std::size_t> selected; // descending by batch_avg, ties to the smaller index
    Tensor rescaled;                  // [M]
    std::size_t ln_target = 0;        // argmax of batch_avg
};

/// Indices of the M largest entries and their weights renormalised to sum to one.
inline std::pair<std::vector<std::size_t>, Tensor> top_m_select(const Tensor& batch_avg, std::size_t m) {
    check_simplex(batch_avg.data(), "top_m_select", 1e-9);
    const std::size_t n = batch_avg.size();
    if (m < 1 || m > n) throw DomainError("top_m_select: M=" + std::to_string(m) + " outside [1, " +
                                          std::to_string(n) + "]");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return batch_avg[a] > batch_avg[b]; });
    idx.resize(m);
    double total = 0.0;
    for (auto i : idx) total += batch_avg[i];
    Tensor r({m});
    if (m == n) {
        for (std::size_t k = 0; k < m; ++k) r[k] = batch_avg[idx[k]];
    } else {
        for (std::size_t k = 0; k < m; ++k) r[k] = batch_avg[idx[k]] / total;
    }
    return {std::move(idx), std::move(r)};
}

/// Backbone, source modules, selector and one LayerNorm state per source.
struct EngineState {
    std::shared_ptr<const VitParams> backbone;
    std::vector<ModuleRecord> modules;
    SelectorParams selector;
    std::vector<LnState> ln;

    std::size_t sources() const noexcept { return modules.size(); }
    SourceModel model(std::size_t j) const { return {backbone.get(), &modules.at(j)}; }

    static EngineState create(std::shared_ptr<const VitParams> backbone, std::vector<ModuleRecord> modules,
                              SelectorParams selector) {
        if (!backbone) throw DomainError("engine state needs a backbone");
        if (modules.empty()) throw DomainError("engine state needs at least one module");
        if (selector.cfg.d != backbone->cfg.embed_dim || selector.cfg.v != backbone->cfg.classes)
            throw DimensionError("selector dims do not match the backbone");
        EngineState s{std::move(backbone), std::move(modules), std::move(selector), {}};
        s.ln.assign(s.modules.size(), s.backbone->ln);
        return s;
    }

    std::vector<std::string> ln_digests() const {
        std::vector<std::string> d;
        for (const auto& l : ln) d.push_back(ln_digest(l));
        return d;
    }

    /// Digest of everything the loop must never touch: backbone and module payloads.
    std::string frozen_digest_all() const {
        std::string acc = pluto::frozen_digest(*backbone);
        for (const auto& m : modules) acc += file_digest_hex(serialize(m));
        return to_hex(sha256(std::span(reinterpret_cast<const std::uint8_t*>(acc.data()), acc.size())));
    }
};

/// Column-wise max over the patch embeddings of each image, stacked [B×d].
inline std::vector<Tensor> image_representations(const VitParams& p, std::span<const Tensor> images) {
    std::vector<Tensor> out;
    out.reserve(images.size());
    for (const auto& im : images) out.push_back(max_pool_rows(patch_embeddings(p, im)).reshaped({p.cfg.embed_dim}));
    return out;
}

/// Pre-softmax logits of every source on the batch.
inline std::vector<Tensor> source_logits(const EngineState& s, std::span<const Tensor> images) {
    std::vector<Tensor> out;
    for (std::size_t j = 0; j < s.sources(); ++j)
        out.push_back(forward_logits(*s.backbone, &s.modules[j], s.ln[j], images));
    return out;
}

/// Per-sample ensemble over the index set `use` (ascending), weights renormalised
/// over that set unless it covers every source. Returns logits [B×K].
inline Tensor restricted_ensemble(const Tensor& weights, const SelectorBatch& batch, std::vector<std::size_t> use) {
    std::sort(use.begin(), use.end());
    const std::size_t B = batch.size(), N = batch.sources, K = batch.logits.cols();
    const bool all = use.size() == N;
    Tensor out({B, K});
    for (std::size_t b = 0; b < B; ++b) {
        double total = 0.0;
        for (auto j : use) total += weights.at(b, j);
        for (auto j : use) {
            double w = weights.at(b, j);
            if (!all) w = total > 0.0 ? w / total : 1.0 / static_cast<double>(use.size());
            for (std::size_t c = 0; c < K; ++c) out.at(b, c) += w * batch.logits.at(b * N + j, c);
        }
    }
    return out;
}

/// Σ_j w_j l_j for every sample, with no selection at all.
inline Tensor full_ensemble(const Tensor& weights, const SelectorBatch& batch) {
    const std::size_t B = batch.size(), N = batch.sources, K = batch.logits.cols();
    Tensor out({B, K});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < N; ++j)
            for (std::size_t c = 0; c < K; ++c) out.at(b, c) += weights.at(b, j) * batch.logits.at(b * N + j, c);
    return out;
}

struct BatchResult {
    std::vector<std::size_t> predictions;
    Tensor probs; // [B×K]
    WeightReport weights;
    double selector_entropy_before = 0.0;
    double selector_entropy_after = 0.0;
    std::vector<std::size_t> ln_updated;
    std::vector<SamStepReport> sam;
    std::vector<std::string> ln_digests_used;
};

/// One pass of the loop body. `state` is replaced only if the whole batch succeeds.
inline BatchResult process_batch(EngineState& state, std::span<const Tensor> images, const EngineConfig& cfg) {
    const std::size_t N = state.sources();
    cfg.validate(N);
    if (images.empty()) throw DomainError("process_batch: empty batch");
    const std::size_t U = std::min(cfg.shots, images.size());

    BatchResult r;
    r.ln_digests_used = state.ln_digests();
    const SelectorBatch sb = make_selector_batch(image_representations(*state.backbone, images),
                                                 source_logits(state, images));
    if (!sb.logits.all_finite() || !sb.x_hat.all_finite()) throw NumericError("process_batch: non-finite logits");

    SelectorParams sel = state.selector;
    r.weights.initial_weights = selector_weights(sel, sb);
    if (U > 0) {
        const SelectorBatch shots = sb.head(U);
        r.selector_entropy_before = batch_pseudo_label_entropy(sel, shots);
        sel = tta_update(sel, shots, cfg.selector_lr, cfg.selector_steps);
        r.selector_entropy_after = batch_pseudo_label_entropy(sel, shots);
    }
    const Tensor w = U > 0 ? selector_weights(sel, sb) : r.weights.initial_weights;
    if (!w.all_finite()) throw NumericError("process_batch: non-finite selector weights");
    r.weights.per_sample_weights = w;

    Tensor avg({N});
    for (std::size_t b = 0; b < sb.size(); ++b)
        for (std::size_t j = 0; j < N; ++j) avg[j] += w.at(b, j);
    for (auto& v : avg.data()) v /= static_cast<double>(sb.size());
    // Renormalise away rounding so the simplex check is tight.
    const double s = std::accumulate(avg.data().begin(), avg.data().end(), 0.0);
    for (auto& v : avg.data()) v /= s;
    r.weights.batch_avg = avg;
    auto [selected, rescaled] = top_m_select(avg, cfg.top_m);
    r.weights.selected = selected;
    r.weights.rescaled = rescaled;
    r.weights.ln_target = argmax(avg.data());

    const Tensor logits = restricted_ensemble(w, sb, selected);
    r.probs = softmax_rows(logits);
    for (std::size_t b = 0; b < sb.size(); ++b) r.predictions.push_back(argmax(r.probs.row(b)));

    std::vector<LnState> ln = state.ln;
    if (U > 0) {
        r.ln_updated = cfg.ln_update_all_selected ? selected : std::vector<std::size_t>{r.weights.ln_target};
        std::sort(r.ln_updated.begin(), r.ln_updated.end());
        for (auto j : r.ln_updated) {
            auto [next, rep] = batch_sam_step_report(state.model(j), ln[j], images.first(U), cfg.sam);
            if (!next.flatten().all_finite()) throw NumericError("process_batch: non-finite LayerNorm update");
            ln[j] = std::move(next);
            r.sam.push_back(std::move(rep));
        }
    }
    state.selector = std::move(sel);
    state.ln = std::move(ln);
    return r;
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

struct BatchRecord {
    std::size_t index = 0;
    std::size_t size = 0;
    std::optional<double> accuracy;
    double mean_entropy = 0.0;
    std::vector<double> batch_avg;
    std::vector<std::size_t> selected;
    std::vector<double> rescaled;
    std::size_t ln_target = 0;
    std::vector<std::size_t> ln_updated;
    std::size_t shots_used = 0;
    std::size_t shots_filtered = 0;
};

inline nlohmann::json to_json_record(const BatchRecord& r) {
    nlohmann::json j = {{"batch", r.index},           {"size", r.size},
                        {"mean_entropy", r.mean_entropy}, {"batch_avg", r.batch_avg},
                        {"selected", r.selected},     {"rescaled", r.rescaled},
                        {"ln_target", r.ln_target},   {"ln_updated", r.ln_updated},
                        {"shots_used", r.shots_used}, {"shots_filtered", r.shots_filtered}};
    j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
    return j;
}

struct StreamMetrics {
    std::vector<BatchRecord> batches;
    std::vector<double> selection_counts; // times each source was among the selected
    std::vector<double> weight_sum;       // cumulative batch-average weight per source
    std::size_t correct = 0, total = 0;
    double wall_seconds = 0.0;
    std::size_t failed_batches = 0;

    /// Sample-weighted accuracy over the stream (labels required).
    double accuracy() const {
        if (total == 0) throw DomainError("stream accuracy requested without labels");
        return static_cast<double>(correct) / static_cast<double>(total);
    }
};

/// Splits a stream into consecutive batches of at most `b` images.
inline std::vector<std::span<const Tensor>> make_batches(std::span<const Tensor> images, std::size_t b) {
    if (b == 0) throw DomainError("batch size must be positive");
    std::vector<std::span<const Tensor>> out;
    for (std::size_t s = 0; s < images.size(); s += b) out.push_back(images.subspan(s, std::min(b, images.size() - s)));
    return out;
}

inline double mean_row_entropy(const Tensor& probs) {
    double s = 0.0;
    for (std::size_t r = 0; r < probs.rows(); ++r) s += shannon_entropy(probs.row(r));
    return s / static_cast<double>(probs.rows());
}

/// Labels are read only to score predictions after each batch is processed.
inline void score_batch(StreamMetrics& m, BatchRecord& rec, const std::vector<std::size_t>& pred,
                        const std::vector<std::size_t>* labels, std::size_t offset) {
    if (!labels) return;
    std::size_t c = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) c += pred[i] == labels->at(offset + i) ? 1 : 0;
    rec.accuracy = static_cast<double>(c) / static_cast<double>(pred.size());
    m.correct += c;
    m.total += pred.size();
}

/// Processes the stream in order. A batch that fails numerically is skipped with
/// the state rolled back; `on_batch` (optional) sees each record as it completes.
template <typename OnBatch = std::nullptr_t>
StreamMetrics run_stream(EngineState& state, std::span<const Tensor> images, const EngineConfig& cfg,
                         const HiddenLabels* labels = nullptr, OnBatch&& on_batch = nullptr) {
    if (images.empty()) throw DomainError("run_stream: empty stream");
    if (labels && labels->size() != images.size()) throw DimensionError("run_stream: label count mismatch");
    const auto t0 = std::chrono::steady_clock::now();
    StreamMetrics m;
    m.selection_counts.assign(state.sources(), 0.0);
    m.weight_sum.assign(state.sources(), 0.0);
    const auto* truth = labels ? &labels->reveal_for_evaluation() : nullptr;
    std::size_t offset = 0, idx = 0;
    for (auto batch : make_batches(images, cfg.batch_size)) {
        BatchRecord rec;
        rec.index = idx++;
        rec.size = batch.size();
        try {
            const BatchResult r = process_batch(state, batch, cfg);
            rec.mean_entropy = mean_row_entropy(r.probs);
            rec.batch_avg.assign(r.weights.batch_avg.data().begin(), r.weights.batch_avg.data().end());
            rec.selected = r.weights.selected;
            rec.rescaled.assign(r.weights.rescaled.data().begin(), r.weights.rescaled.data().end());
            rec.ln_target = r.weights.ln_target;
            rec.ln_updated = r.ln_updated;
            for (const auto& s : r.sam) {
                rec.shots_used += s.used();
                rec.shots_filtered += s.filtered.size() - s.used();
            }
            for (auto j : r.weights.selected) m.selection_counts[j] += 1.0;
            for (std::size_t j = 0; j < state.sources(); ++j) m.weight_sum[j] += r.weights.batch_avg[j];
            score_batch(m, rec, r.predictions, truth, offset);
        } catch (const NumericError&) {
            ++m.failed_batches;
        }
        offset += batch.size();
        if constexpr (!std::is_same_v<std::decay_t<OnBatch>, std::nullptr_t>) on_batch(rec);
        m.batches.push_back(std::move(rec));
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

struct BaselineConfig {
    std::size_t batch_size = 32;
    std::size_t shots = 32;
    bool ln_update = false; // plain entropy step on every source's LayerNorms
    double lr = 1e-3;
};

/// Fixed 1/N weights over every source's logits; optionally adapts every source's
/// LayerNorms with an unfiltered, unperturbed entropy step on the first U samples.
inline StreamMetrics uniform_ensemble_baseline(EngineState& state, std::span<const Tensor> images,
                                               const BaselineConfig& cfg, const HiddenLabels* labels = nullptr) {
    if (images.empty()) throw DomainError("uniform_ensemble_baseline: empty stream");
    if (cfg.shots > cfg.batch_size) throw DomainError("shots must not exceed batch_size");
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t N = state.sources();
    StreamMetrics m;
    m.selection_counts.assign(N, 0.0);
    m.weight_sum.assign(N, 0.0);
    const auto* truth = labels ? &labels->reveal_for_evaluation() : nullptr;
    std::size_t offset = 0, idx = 0;
    for (auto batch : make_batches(images, cfg.batch_size)) {
        BatchRecord rec;
        rec.index = idx++;
        rec.size = batch.size();
        const auto logits = source_logits(state, batch);
        const std::size_t K = logits.front().cols();
        Tensor z({batch.size(), K});
        for (const auto& l : logits)
            for (std::size_t i = 0; i < z.size(); ++i) z[i] += l[i] / static_cast<double>(N);
        const Tensor probs = softmax_rows(z);
        std::vector<std::size_t> pred;
        for (std::size_t b = 0; b < batch.size(); ++b) pred.push_back(argmax(probs.row(b)));
        rec.mean_entropy = mean_row_entropy(probs);
        rec.batch_avg.assign(N, 1.0 / static_cast<double>(N));
        rec.selected.resize(N);
        std::iota(rec.selected.begin(), rec.selected.end(), 0);
        rec.rescaled = rec.batch_avg;
        for (std::size_t j = 0; j < N; ++j) {
            m.selection_counts[j] += 1.0;
            m.weight_sum[j] += 1.0 / static_cast<double>(N);
        }
        score_batch(m, rec, pred, truth, offset);
        const std::size_t U = std::min(cfg.shots, batch.size());
        if (cfg.ln_update && U > 0) {
            std::vector<LnState> next = state.ln;
            bool ok = true;
            for (std::size_t j = 0; j < N && ok; ++j) {
                try {
                    next[j] = plain_entropy_step(state.model(j), state.ln[j], batch.first(U), cfg.lr);
                    ok = next[j].flatten().all_finite();
                } catch (const NumericError&) {
                    ok = false;
                }
                rec.ln_updated.push_back(j);
            }
            if (ok)
                state.ln = std::move(next);
            else
                ++m.failed_batches;
        }
        offset += batch.size();
        m.batches.push_back(std::move(rec));
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

/// Accuracy of each source (its module with its current LayerNorms) on its own test set.
inline std::vector<double> forgetting_eval(const EngineState& state, const std::vector<Dataset>& source_tests) {
    if (source_tests.size() != state.sources())
        throw DomainError("forgetting_eval: expected " + std::to_string(state.sources()) + " source test sets, got " +
                          std::to_string(source_tests.size()));
    std::vector<double> acc;
    for (std::size_t j = 0; j < state.sources(); ++j) {
        if (source_tests[j].empty()) throw DomainError("forgetting_eval: missing test set for source " + std::to_string(j));
        acc.push_back(evaluate(*state.backbone, &state.modules[j], state.ln[j], source_tests[j]));
    }
    return acc;
}

} // namespace pluto
