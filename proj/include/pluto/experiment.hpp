// Desk-scale experiment: synthetic data, pretraining, adaptation runs and reports.
#pragma once

#include <cstdlib>
#include <ctime>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pluto/dataset.hpp"
#include "pluto/engine.hpp"
#include "pluto/store.hpp"
#include "pluto/synth.hpp"

namespace pluto {

struct DataSizes {
    std::size_t base_images = 2400;   // every domain corrupts the same base images
    std::size_t backbone_train = 1500; // clean images [0, backbone_train)
    std::size_t module_train = 1200;  // per-source images [0, module_train)
    std::size_t selector_train = 400; // per-source images that follow the module split
    std::size_t source_test = 400;    // per-source held-out images
    std::size_t target_pool = 400;    // target-domain images the stream draws from
    std::size_t stream_length = 320;

    std::size_t train_end() const { return module_train + selector_train; }

    void validate() const {
        if (!base_images || !backbone_train || !module_train || !selector_train || !source_test || !target_pool ||
            !stream_length)
            throw DomainError("DataSizes: every split must be non-empty");
        if (backbone_train > train_end()) throw DomainError("DataSizes: backbone split exceeds the training range");
        if (train_end() + source_test + target_pool > base_images)
            throw DomainError("DataSizes: splits exceed base_images");
    }
    bool operator==(const DataSizes&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSizes, base_images, backbone_train, module_train, selector_train,
                                                source_test, target_pool, stream_length)

struct ExperimentConfig {
    VitConfig vit;
    SelectorConfig selector;
    EngineConfig engine;
    DataSizes data;
    std::vector<DomainSpec> sources{{Corruption::gaussian_noise, 3, 11},
                                    {Corruption::blur, 3, 12},
                                    {Corruption::contrast, 3, 13},
                                    {Corruption::brightness, 3, 14}};
    std::vector<DomainSpec> target{{Corruption::pixelate, 3, 19}};
    std::vector<double> target_lambdas{1.0};
    ModuleKind module_kind = ModuleKind::vpt;
    std::size_t module_hyper = 8; // prompt length or adapter bottleneck
    OptimizerSpec backbone_opt{OptimizerKind::adamw, 3e-3, 0.9, 1e-4, 5, 32, 1};
    OptimizerSpec module_opt{OptimizerKind::sgd, 0.1, 0.9, 0.0, 5, 32, 1};
    OptimizerSpec selector_opt{OptimizerKind::sgd, 0.5, 0.0, 0.0, 10, 32, 0};
    double baseline_ln_lr = 1e-3;
    std::vector<std::size_t> shots_sweep{0, 8, 16, 32};
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string output = "results";

    void validate() const {
        vit.validate();
        selector.validate();
        data.validate();
        if (sources.empty()) throw DomainError("ExperimentConfig: at least one source domain");
        engine.validate(sources.size());
        if (selector.d != vit.embed_dim || selector.v != vit.classes)
            throw DomainError("ExperimentConfig: selector d/v must equal the backbone width/classes");
        if (target.empty() || target.size() != target_lambdas.size())
            throw DomainError("ExperimentConfig: one lambda per target component");
        check_simplex(target_lambdas, "target_lambdas", 1e-9);
        for (auto u : shots_sweep)
            if (u > engine.batch_size) throw DomainError("ExperimentConfig: shots_sweep entry exceeds batch_size");
        if (module_hyper == 0) throw DomainError("ExperimentConfig: module_hyper must be positive");
    }

    bool operator==(const ExperimentConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, vit, selector, engine, data, sources, target,
                                                target_lambdas, module_kind, module_hyper, backbone_opt, module_opt,
                                                selector_opt, baseline_ln_lr, shots_sweep, seed, seeds, output)

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    ExperimentConfig c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

inline nlohmann::json emit_config(const ExperimentConfig& c) { return c; }

/// Timestamp for artifacts: SOURCE_DATE_EPOCH if set, else the epoch, so reruns are byte-identical.
inline std::string artifact_timestamp() {
    std::time_t t = 0;
    if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(e, nullptr, 10));
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Per-seed copy of a domain spec: the configured seed mixed with the run seed.
inline DomainSpec seeded(const DomainSpec& d, std::uint64_t seed) {
    DomainSpec out = d;
    out.seed = synth_detail::mix(seed, d.seed);
    return out;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Every dataset of one run. Domain datasets cover all base images; splits are index ranges.
struct ExperimentData {
    Dataset base;
    std::vector<Dataset> sources;
    std::vector<Dataset> targets;

    Dataset backbone_train(const DataSizes& s) const { return base.slice(0, s.backbone_train); }
    Dataset module_train(std::size_t j, const DataSizes& s) const { return sources.at(j).slice(0, s.module_train); }
    Dataset selector_train(std::size_t j, const DataSizes& s) const {
        return sources.at(j).slice(s.module_train, s.train_end());
    }
    Dataset source_test(std::size_t j, const DataSizes& s) const {
        return sources.at(j).slice(s.train_end(), s.train_end() + s.source_test);
    }
    Dataset target_pool(std::size_t k, const DataSizes& s) const {
        const std::size_t b = s.train_end() + s.source_test;
        return targets.at(k).slice(b, b + s.target_pool);
    }
};

inline ExperimentData make_experiment_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.vit.image_size != kSynthImage || cfg.vit.channels != 1 || cfg.vit.classes != kSynthClasses)
        throw DomainError("synthetic data is 16x16x1 with 10 classes; VitConfig disagrees");
    ExperimentData d;
    d.base = make_base_dataset(cfg.data.base_images, seed);
    for (const auto& s : cfg.sources) d.sources.push_back(make_domain(d.base, seeded(s, seed)));
    for (const auto& t : cfg.target) d.targets.push_back(make_domain(d.base, seeded(t, seed)));
    return d;
}

inline TargetStream make_stream(const ExperimentConfig& cfg, const ExperimentData& d, std::uint64_t seed) {
    std::vector<Dataset> pools;
    for (std::size_t k = 0; k < d.targets.size(); ++k) pools.push_back(d.target_pool(k, cfg.data));
    return make_mixture_target(pools, cfg.target_lambdas, cfg.data.stream_length, synth_detail::mix(seed, 0x57));
}

inline std::vector<Dataset> source_tests(const ExperimentConfig& cfg, const ExperimentData& d) {
    std::vector<Dataset> out;
    for (std::size_t j = 0; j < d.sources.size(); ++j) out.push_back(d.source_test(j, cfg.data));
    return out;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct Pretrained {
    std::shared_ptr<const VitParams> backbone;
    std::vector<ModuleRecord> modules;
    SelectorParams selector;
};

inline std::string module_id(const ExperimentConfig& cfg, const DomainSpec& d, std::uint64_t seed) {
    return to_string(cfg.module_kind) + "." + to_string(d.corruption) + ".sev" + std::to_string(d.severity) + ".s" +
           std::to_string(seed);
}

using Progress = std::function<void(const std::string&)>;

/// Labelled selector-initialisation batch from the held-out part of every source domain.
inline std::pair<SelectorBatch, std::vector<std::size_t>> selector_training_set(const ExperimentConfig& cfg,
                                                                               const ExperimentData& d,
                                                                               const EngineState& st) {
    std::vector<Tensor> xs;
    std::vector<std::size_t> ys;
    for (std::size_t j = 0; j < d.sources.size(); ++j) {
        const Dataset s = d.selector_train(j, cfg.data);
        xs.insert(xs.end(), s.images.begin(), s.images.end());
        ys.insert(ys.end(), s.labels.begin(), s.labels.end());
    }
    return {make_selector_batch(image_representations(*st.backbone, xs), source_logits(st, xs)), std::move(ys)};
}

/// Backbone, one module per source and the initialised selector. Every artifact
/// is passed through its f32 container so in-memory state equals the stored one.
inline Pretrained pretrain_all(const ExperimentConfig& cfg, const ExperimentData& d, std::uint64_t seed,
                               const Progress& progress = {}) {
    auto say = [&](const std::string& s) {
        if (progress) progress(s);
    };
    Pretrained out;
    auto bb = deserialize_backbone(
        serialize_backbone(pretrain_backbone(d.backbone_train(cfg.data), cfg.vit, cfg.backbone_opt, seed)));
    say("backbone: clean test accuracy " +
        std::to_string(evaluate(bb, nullptr, d.base.slice(cfg.data.train_end(), cfg.data.train_end() + cfg.data.source_test))));
    out.backbone = std::make_shared<const VitParams>(std::move(bb));
    for (std::size_t j = 0; j < cfg.sources.size(); ++j) {
        ModuleRecord r = pretrain_source_module(*out.backbone, cfg.module_kind, cfg.module_hyper,
                                                d.module_train(j, cfg.data), cfg.module_opt,
                                                synth_detail::mix(seed, 100 + j));
        r.id = module_id(cfg, cfg.sources[j], seed);
        r.meta.seed = seed;
        r.meta.created_at = artifact_timestamp();
        r = deserialize(serialize(r), &cfg.vit);
        say("module " + r.id + ": source accuracy " + std::to_string(r.meta.source_accuracy));
        out.modules.push_back(std::move(r));
    }
    EngineState st = EngineState::create(out.backbone, out.modules, init_selector(cfg.selector, synth_detail::mix(seed, 7)));
    const auto [batch, labels] = selector_training_set(cfg, d, st);
    SelectorParams sel = init_supervised(st.selector, batch, labels, cfg.selector_opt, cfg.selector_opt.epochs,
                                         synth_detail::mix(seed, 8));
    out.selector = deserialize_selector(serialize_selector(sel));
    return out;
}

inline EngineState make_state(const Pretrained& p) { return EngineState::create(p.backbone, p.modules, p.selector); }

/// Mean weight the selector gives each source on that source's held-out samples.
inline std::vector<double> self_selection(const ExperimentConfig& cfg, const ExperimentData& d, const Pretrained& p) {
    const EngineState st = make_state(p);
    std::vector<double> out;
    for (std::size_t j = 0; j < d.sources.size(); ++j) {
        const Dataset t = d.source_test(j, cfg.data);
        const auto sb = make_selector_batch(image_representations(*st.backbone, t.images), source_logits(st, t.images));
        const Tensor w = selector_weights(st.selector, sb);
        double s = 0.0;
        for (std::size_t b = 0; b < w.rows(); ++b) s += w.at(b, j);
        out.push_back(s / static_cast<double>(w.rows()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct RunSummary {
    std::size_t top_m = 0;
    std::size_t shots = 0;
    double accuracy = 0.0;
    std::vector<double> weight_share; // mean batch-average weight per source
    std::size_t failed_batches = 0;
    bool state_unchanged = false; // selector and every LnState bit-equal after the run
};

inline nlohmann::json to_json(const RunSummary& r) {
    return {{"top_m", r.top_m},
            {"shots", r.shots},
            {"accuracy", r.accuracy},
            {"weight_share", r.weight_share},
            {"failed_batches", r.failed_batches},
            {"state_unchanged", r.state_unchanged}};
}

/// One PLUTO pass over the stream from a fresh copy of the pretrained state.
inline RunSummary run_pluto(const Pretrained& p, const TargetStream& stream, const EngineConfig& ecfg,
                            EngineState* final_state = nullptr,
                            const std::function<void(const BatchRecord&)>& on_batch = {}) {
    EngineState st = make_state(p);
    const std::string sel0 = selector_digest(st.selector);
    const auto ln0 = st.ln_digests();
    const StreamMetrics m = run_stream(st, stream.images, ecfg, &stream.labels, [&](const BatchRecord& r) {
        if (on_batch) on_batch(r);
    });
    RunSummary r;
    r.top_m = ecfg.top_m;
    r.shots = ecfg.shots;
    r.accuracy = m.accuracy();
    for (double w : m.weight_sum) r.weight_share.push_back(w / static_cast<double>(m.batches.size()));
    r.failed_batches = m.failed_batches;
    r.state_unchanged = selector_digest(st.selector) == sel0 && st.ln_digests() == ln0;
    if (final_state) *final_state = std::move(st);
    return r;
}

inline double run_uniform(const Pretrained& p, const TargetStream& stream, const BaselineConfig& b,
                          EngineState* final_state = nullptr) {
    EngineState st = make_state(p);
    const double acc = uniform_ensemble_baseline(st, stream.images, b, &stream.labels).accuracy();
    if (final_state) *final_state = std::move(st);
    return acc;
}

inline std::vector<double> single_source_accuracy(const Pretrained& p, const TargetStream& stream) {
    Dataset ds;
    ds.images = stream.images;
    ds.labels = stream.labels.reveal_for_evaluation();
    std::vector<double> out;
    for (const auto& m : p.modules) out.push_back(evaluate(*p.backbone, &m, p.backbone->ln, ds));
    return out;
}

struct ForgettingReport {
    std::vector<double> before;
    std::vector<double> pluto_after;
    std::vector<double> baseline_after;

    static double mean_drop(const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] - b[i];
        return s / static_cast<double>(a.size());
    }
    double pluto_drop() const { return mean_drop(before, pluto_after); }
    double baseline_drop() const { return mean_drop(before, baseline_after); }
};

/// Source-test accuracy before adaptation, after PLUTO, and after the all-source plain-LN baseline.
inline ForgettingReport forgetting(const ExperimentConfig& cfg, const ExperimentData& d, const Pretrained& p,
                                   const TargetStream& stream) {
    const auto tests = source_tests(cfg, d);
    ForgettingReport f;
    f.before = forgetting_eval(make_state(p), tests);
    EngineState after;
    run_pluto(p, stream, cfg.engine, &after);
    f.pluto_after = forgetting_eval(after, tests);
    BaselineConfig b{cfg.engine.batch_size, cfg.engine.shots, true, cfg.baseline_ln_lr};
    EngineState base_after;
    run_uniform(p, stream, b, &base_after);
    f.baseline_after = forgetting_eval(base_after, tests);
    return f;
}

inline nlohmann::json to_json(const ForgettingReport& f) {
    return {{"before", f.before},
            {"pluto_after", f.pluto_after},
            {"baseline_after", f.baseline_after},
            {"pluto_mean_drop", f.pluto_drop()},
            {"baseline_mean_drop", f.baseline_drop()}};
}

// ---------------------------------------------------------------------------
// Persistence of a whole run
// ---------------------------------------------------------------------------

inline std::string backbone_id(std::uint64_t seed) { return "backbone.s" + std::to_string(seed); }
inline std::string selector_id(std::uint64_t seed) { return "selector.s" + std::to_string(seed); }

/// Writes backbone, modules and selector into the store; existing ids are kept if their bytes match.
inline void store_pretrained(ModuleStore& store, const Pretrained& p, std::uint64_t seed) {
    auto put = [&](const Bytes& b) {
        const Container c = decode_container(b);
        try {
            store.put_bytes(b);
        } catch (const ConflictError&) {
            if (store.get_bytes(c.id) != b) throw;
        }
    };
    put(serialize_backbone(*p.backbone, backbone_id(seed)));
    for (const auto& m : p.modules) put(serialize(m));
    put(serialize_selector(p.selector, selector_id(seed)));
}

inline Pretrained load_pretrained(const ModuleStore& store, const ExperimentConfig& cfg, std::uint64_t seed) {
    Pretrained p;
    p.backbone = std::make_shared<const VitParams>(deserialize_backbone(store.get_bytes(backbone_id(seed))));
    if (!(p.backbone->cfg == cfg.vit)) throw DomainError("stored backbone config differs from the experiment config");
    for (const auto& s : cfg.sources) p.modules.push_back(store.get(module_id(cfg, s, seed), &cfg.vit));
    p.selector = deserialize_selector(store.get_bytes(selector_id(seed)));
    return p;
}

inline std::string data_file(const std::string& label) {
    std::string s = label;
    for (auto& c : s)
        if (c == ':') c = '_';
    return s + ".plut";
}

} // namespace pluto
