#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace pluto;
using Catch::Approx;

namespace {

SelectorConfig selector_cfg(const VitConfig& v) {
    SelectorConfig c;
    c.d = v.embed_dim;
    c.dx = 6;
    c.dl = 5;
    c.dp = 4;
    c.v = v.classes;
    return c;
}

EngineState make_state(std::size_t sources, std::uint64_t seed, double head_scale = 6.0) {
    const VitConfig cfg = testing::tiny_config();
    auto bb = std::make_shared<const VitParams>(testing::sharp_backbone(cfg, seed, head_scale));
    std::vector<ModuleRecord> mods;
    std::mt19937_64 rng(seed);
    for (std::size_t j = 0; j < sources; ++j) {
        ModuleRecord m = make_module(ModuleKind::vpt, 2, cfg, bb->head_w, bb->head_b, seed * 10 + j);
        m.id = "m" + std::to_string(j);
        // Give each source its own head so the ensemble is not degenerate.
        for (auto& v : m.head_weight.data()) v += std::normal_distribution<double>(0.0, 2.0)(rng);
        mods.push_back(std::move(m));
    }
    return EngineState::create(bb, std::move(mods), init_selector(selector_cfg(cfg), seed));
}

std::vector<Tensor> images(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return testing::random_images(testing::tiny_config(), n, rng);
}

EngineConfig config(std::size_t m, std::size_t b, std::size_t u) {
    EngineConfig c;
    c.top_m = m;
    c.batch_size = b;
    c.shots = u;
    c.selector_lr = 0.05;
    return c;
}

void check_simplex_tight(std::span<const double> w) {
    double s = 0.0;
    for (double v : w) {
        CHECK(v >= 0.0);
        s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
}

} // namespace

TEST_CASE("top_m_select examples") {
    const auto [idx, r] = top_m_select(Tensor::vec({0.5, 0.3, 0.15, 0.05}), 2);
    CHECK(idx == std::vector<std::size_t>{0, 1});
    CHECK(r[0] == Approx(0.625).margin(1e-15));
    CHECK(r[1] == Approx(0.375).margin(1e-15));

    const Tensor avg = Tensor::vec({0.1, 0.6, 0.3});
    const auto [all, same] = top_m_select(avg, 3);
    CHECK(all == std::vector<std::size_t>{1, 2, 0});
    for (std::size_t k = 0; k < 3; ++k) CHECK(same[k] == avg[all[k]]);

    CHECK(top_m_select(Tensor::vec({0.4, 0.4, 0.2}), 1).first == std::vector<std::size_t>{0});
    CHECK(top_m_select(Tensor::vec({0.2, 0.4, 0.4}), 2).first == std::vector<std::size_t>{1, 2});
    CHECK_THROWS_AS(top_m_select(avg, 0), DomainError);
    CHECK_THROWS_AS(top_m_select(avg, 4), DomainError);
    CHECK_THROWS_AS(top_m_select(Tensor::vec({0.5, 0.6}), 1), DomainError);
}

TEST_CASE("weight reports satisfy their invariants on random streams") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const std::size_t N = 2 + seed % 3;
        EngineState st = make_state(N, seed);
        const EngineConfig cfg = config(1 + seed % N, 5, seed % 2 ? 5 : 2);
        const auto stream = images(15, 100 + seed);
        for (auto batch : make_batches(stream, cfg.batch_size)) {
            const BatchResult r = process_batch(st, batch, cfg);
            const WeightReport& w = r.weights;
            REQUIRE(w.per_sample_weights.shape() == Shape{batch.size(), N});
            for (std::size_t b = 0; b < batch.size(); ++b) {
                check_simplex_tight(w.per_sample_weights.row(b));
                check_simplex_tight(w.initial_weights.row(b));
            }
            check_simplex_tight(w.batch_avg.data());
            REQUIRE(w.selected.size() == cfg.top_m);
            REQUIRE(w.rescaled.size() == cfg.top_m);
            check_simplex_tight(w.rescaled.data());
            for (std::size_t k = 1; k < w.selected.size(); ++k) {
                const double a = w.batch_avg[w.selected[k - 1]], c = w.batch_avg[w.selected[k]];
                CHECK((a > c || (a == c && w.selected[k - 1] < w.selected[k])));
            }
            for (std::size_t j = 0; j < N; ++j)
                if (std::find(w.selected.begin(), w.selected.end(), j) == w.selected.end())
                    CHECK(w.batch_avg[j] <= w.batch_avg[w.selected.back()]);
            CHECK(w.ln_target == argmax(w.batch_avg.data()));
            CHECK(w.ln_target == w.selected.front());

            // Batch average recomputed independently from the per-sample rows.
            for (std::size_t j = 0; j < N; ++j) {
                double s = 0.0;
                for (std::size_t b = 0; b < batch.size(); ++b) s += w.per_sample_weights.at(b, j);
                CHECK(w.batch_avg[j] == Approx(s / batch.size()).margin(1e-12));
            }
            REQUIRE(r.predictions.size() == batch.size());
            for (std::size_t b = 0; b < batch.size(); ++b) {
                check_simplex_tight(r.probs.row(b));
                CHECK(r.predictions[b] == argmax(r.probs.row(b)));
            }
        }
    }
}

TEST_CASE("with every source selected the prediction is the full weighted ensemble") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        EngineState st = make_state(4, seed);
        const auto batch = images(6, 200 + seed);
        const SelectorBatch sb =
            make_selector_batch(image_representations(*st.backbone, batch), source_logits(st, batch));
        const BatchResult r = process_batch(st, batch, config(4, 6, 3));
        CHECK(r.probs == softmax_rows(full_ensemble(r.weights.per_sample_weights, sb)));

        // Same thing, written out by hand from the per-source logits.
        for (std::size_t b = 0; b < batch.size(); ++b) {
            std::vector<Tensor> ls;
            for (std::size_t j = 0; j < 4; ++j) {
                const auto row = sb.logits.row(b * 4 + j);
                ls.push_back(Tensor::vec({row.begin(), row.end()}));
            }
            const auto w = r.weights.per_sample_weights.row(b);
            const Tensor z = ensemble_logits(Tensor::vec({w.begin(), w.end()}), ls);
            const auto p = softmax(z.data());
            for (std::size_t k = 0; k < p.size(); ++k) CHECK(std::abs(p[k] - r.probs.at(b, k)) < 1e-12);
        }
    }
}

TEST_CASE("a selected subset renormalises each sample's weights") {
    EngineState st = make_state(4, 3);
    const auto batch = images(5, 9);
    const SelectorBatch sb = make_selector_batch(image_representations(*st.backbone, batch), source_logits(st, batch));
    const BatchResult r = process_batch(st, batch, config(2, 5, 0));
    const auto& sel = r.weights.selected;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        double total = 0.0;
        for (auto j : sel) total += r.weights.per_sample_weights.at(b, j);
        std::vector<double> z(4, 0.0);
        for (auto j : sel)
            for (std::size_t k = 0; k < 4; ++k)
                z[k] += r.weights.per_sample_weights.at(b, j) / total * sb.logits.at(b * 4 + j, k);
        const auto p = softmax(z);
        for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(p[k] - r.probs.at(b, k)) < 1e-12);
    }
}

TEST_CASE("zero-shot leaves the state bit-equal") {
    EngineState st = make_state(3, 1);
    const EngineState before = st;
    const auto stream = images(12, 4);
    const StreamMetrics m = run_stream(st, stream, config(2, 4, 0));
    CHECK(st.selector == before.selector);
    CHECK(st.ln == before.ln);
    CHECK(m.batches.size() == 3);
    for (const auto& b : m.batches) {
        CHECK(b.ln_updated.empty());
        CHECK(b.selected.size() == 2);
    }
}

TEST_CASE("a single source gets all the weight") {
    EngineState st = make_state(1, 2);
    const auto batch = images(4, 5);
    const Tensor direct = forward_logits(*st.backbone, &st.modules[0], st.ln[0], batch);
    const BatchResult r = process_batch(st, batch, config(1, 4, 2));
    for (double v : r.weights.per_sample_weights.data()) CHECK(v == 1.0);
    CHECK(r.probs == softmax_rows(direct));
}

TEST_CASE("only the selector and the argmax source's LayerNorms change") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        EngineState st = make_state(4, seed);
        const std::string frozen = st.frozen_digest_all();
        const auto stream = images(16, 300 + seed);
        std::size_t updates = 0;
        for (auto batch : make_batches(stream, 8)) {
            const auto before = st.ln_digests();
            const BatchResult r = process_batch(st, batch, config(2, 8, 8));
            REQUIRE(r.ln_updated == std::vector<std::size_t>{r.weights.ln_target});
            const auto after = st.ln_digests();
            for (std::size_t j = 0; j < 4; ++j)
                if (j != r.weights.ln_target) CHECK(after[j] == before[j]);
            if (after[r.weights.ln_target] != before[r.weights.ln_target]) ++updates;
            CHECK(st.frozen_digest_all() == frozen);
        }
        CHECK(updates > 0);
    }
}

TEST_CASE("logits of batch t use the LayerNorms produced by batch t-1") {
    EngineState st = make_state(3, 6);
    const auto stream = images(20, 8);
    std::vector<std::string> expected = st.ln_digests();
    for (auto batch : make_batches(stream, 5)) {
        const BatchResult r = process_batch(st, batch, config(3, 5, 5));
        CHECK(r.ln_digests_used == expected);
        expected = st.ln_digests();
    }
}

TEST_CASE("updating every selected source") {
    EngineState one = make_state(4, 7), all = one;
    EngineConfig cfg = config(3, 8, 8);
    const auto batch = images(8, 11);
    const BatchResult a = process_batch(one, batch, cfg);
    cfg.ln_update_all_selected = true;
    const BatchResult b = process_batch(all, batch, cfg);
    auto sel = b.weights.selected;
    std::sort(sel.begin(), sel.end());
    CHECK(b.ln_updated == sel);
    CHECK(b.sam.size() == 3);
    CHECK(a.ln_updated.size() == 1);
    CHECK(a.probs == b.probs);
    CHECK(all.ln[a.weights.ln_target] == one.ln[a.weights.ln_target]);
}

TEST_CASE("a numerically failed batch rolls back") {
    EngineState st = make_state(3, 8);
    const EngineState before = st;
    EngineConfig cfg = config(2, 4, 4);
    cfg.selector_lr = 1e308;
    const auto stream = images(8, 12);
    CHECK_THROWS_AS(process_batch(st, std::span<const Tensor>(stream).first(4), cfg), NumericError);
    CHECK(st.selector == before.selector);
    CHECK(st.ln == before.ln);
    const StreamMetrics m = run_stream(st, stream, cfg);
    CHECK(m.failed_batches == 2);
    CHECK(st.selector == before.selector);
}

TEST_CASE("configuration is validated") {
    EngineState st = make_state(2, 1);
    const auto batch = images(2, 1);
    CHECK_THROWS_AS(process_batch(st, batch, config(3, 2, 0)), DomainError);
    CHECK_THROWS_AS(process_batch(st, batch, config(0, 2, 0)), DomainError);
    CHECK_THROWS_AS(process_batch(st, batch, config(1, 2, 3)), DomainError);
    CHECK_THROWS_AS(process_batch(st, {}, config(1, 2, 0)), DomainError);
}

TEST_CASE("streams are deterministic and scored only after prediction") {
    const auto stream = images(10, 21);
    std::vector<std::size_t> labels(stream.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 4;
    const HiddenLabels hidden(labels);
    EngineState a = make_state(3, 9), b = make_state(3, 9), c = make_state(3, 9);
    const EngineConfig cfg = config(2, 4, 2);
    const StreamMetrics ma = run_stream(a, stream, cfg, &hidden);
    const StreamMetrics mb = run_stream(b, stream, cfg, &hidden);
    CHECK(a.selector == b.selector);
    CHECK(a.ln == b.ln);
    CHECK(ma.correct == mb.correct);
    REQUIRE(ma.batches.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(to_json_record(ma.batches[i]) == to_json_record(mb.batches[i]));
    CHECK(ma.total == 10);
    CHECK((ma.accuracy() >= 0.0 && ma.accuracy() <= 1.0));

    // Labels never influence adaptation.
    run_stream(c, stream, cfg);
    CHECK(c.selector == a.selector);
    CHECK(c.ln == a.ln);

    EngineState d = make_state(3, 9);
    CHECK(run_stream(d, std::span<const Tensor>(stream).first(3), cfg).batches.size() == 1);
}

TEST_CASE("uniform ensemble baseline") {
    SECTION("one source equals single-source inference") {
        EngineState st = make_state(1, 3);
        const auto stream = images(6, 2);
        std::vector<std::size_t> pred;
        const Tensor z = forward_logits(*st.backbone, &st.modules[0], st.ln[0], stream);
        for (std::size_t i = 0; i < stream.size(); ++i) pred.push_back(argmax(z.row(i)));
        const HiddenLabels hidden(pred);
        const StreamMetrics m = uniform_ensemble_baseline(st, stream, {.batch_size = 3, .shots = 0}, &hidden);
        CHECK(m.accuracy() == 1.0);
    }
    SECTION("identical sources make weighting irrelevant") {
        EngineState st = make_state(1, 4);
        st.modules.push_back(st.modules[0]);
        st.modules.push_back(st.modules[0]);
        st.ln.assign(3, st.ln[0]);
        EngineState pl = st;
        const auto stream = images(8, 3);
        std::vector<std::size_t> pred;
        for (auto batch : make_batches(stream, 4)) {
            const BatchResult r = process_batch(pl, batch, config(2, 4, 0));
            pred.insert(pred.end(), r.predictions.begin(), r.predictions.end());
        }
        const HiddenLabels hidden(pred);
        CHECK(uniform_ensemble_baseline(st, stream, {.batch_size = 4, .shots = 0}, &hidden).accuracy() == 1.0);
    }
    SECTION("adapting every source changes every LayerNorm state") {
        EngineState st = make_state(3, 5);
        const auto before = st.ln_digests();
        uniform_ensemble_baseline(st, images(8, 4), {.batch_size = 4, .shots = 4, .ln_update = true, .lr = 1e-3});
        const auto after = st.ln_digests();
        for (std::size_t j = 0; j < 3; ++j) CHECK(after[j] != before[j]);
    }
}

TEST_CASE("forgetting evaluation") {
    EngineState st = make_state(3, 6);
    std::vector<Dataset> tests;
    for (std::size_t j = 0; j < 3; ++j) {
        Dataset d;
        d.images = images(10, 40 + j);
        for (std::size_t i = 0; i < 10; ++i) d.labels.push_back((i + j) % 4);
        tests.push_back(d);
    }
    const auto before = forgetting_eval(st, tests);
    run_stream(st, images(8, 1), config(2, 4, 0));
    CHECK(forgetting_eval(st, tests) == before);

    const BatchResult r = process_batch(st, images(8, 2), config(2, 8, 8));
    const auto after = forgetting_eval(st, tests);
    for (std::size_t j = 0; j < 3; ++j)
        if (j != r.weights.ln_target) CHECK(after[j] == before[j]);
    CHECK_THROWS_AS(forgetting_eval(st, {tests[0]}), DomainError);
}
