// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.
#include <chrono>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <optional>
#include <iostream>
#include <sstream>
#include <thread>

#include "pluto/pluto.hpp"
#include "support.hpp"

using namespace pluto;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double mean_entropy_value(const SourceModel& m, const LnState& ln, std::span<const Tensor> imgs) {
    const Tensor z = forward_logits(*m.backbone, m.module, ln, imgs);
    double s = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) s += shannon_entropy(softmax(z.row(r)));
    return s / static_cast<double>(z.rows());
}

// ---------------------------------------------------------------------------

void equations(Outcome& o) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 5.0);
    double simplex = 0.0, shift = 0.0;
    bool bounds = true;
    for (int t = 0; t < 500; ++t) {
        std::vector<double> z(2 + t % 15);
        for (auto& v : z) v = n(rng);
        const auto p = softmax(z);
        simplex = std::max(simplex, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
        auto zc = z;
        for (auto& v : zc) v += 123.4;
        const auto q = softmax(zc);
        for (std::size_t i = 0; i < p.size(); ++i) shift = std::max(shift, std::abs(p[i] - q[i]));
        const double h = shannon_entropy(p);
        bounds = bounds && h >= 0.0 && h <= std::log(static_cast<double>(p.size())) + 1e-12;
    }
    o.require(simplex < 1e-12 && shift < 1e-12 && bounds, "softmax simplex / shift / entropy bounds");

    const Tensor ln = layer_norm(Tensor::vec({2, 4, 6, 8}), Tensor({4}, 1.0), Tensor({4}), 1e-15);
    const double s5 = std::sqrt(5.0);
    const double want[] = {-3 / s5, -1 / s5, 1 / s5, 3 / s5};
    double lnerr = 0.0;
    for (int i = 0; i < 4; ++i) lnerr = std::max(lnerr, std::abs(ln[i] - want[i]));
    o.require(lnerr < 1e-9, "layer_norm closed form");

    double eps_dev = 0.0;
    for (int t = 0; t < 200; ++t) {
        const Tensor v = testing::random_tensor({1 + static_cast<std::size_t>(t % 40)}, rng, std::pow(10.0, t % 7 - 3));
        for (double rho : {1e-3, 0.05, 2.0}) eps_dev = std::max(eps_dev, std::abs(l2_norm(epsilon_star(v, rho).data()) - rho));
    }
    o.require(eps_dev <= 1e-12, "epsilon norm");

    double sam_err = 0.0, limit_err = 0.0;
    const VitConfig cfg = testing::tiny_config();
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        std::mt19937_64 r(100 + seed);
        const VitParams p = testing::sharp_backbone(cfg, 200 + seed, 3.0);
        const ModuleRecord m = make_module(ModuleKind::vpt, 2, cfg, p.head_w, p.head_b, seed);
        const SourceModel model{&p, &m};
        const LnState lam = testing::perturb(p.ln, r, 0.1);
        const auto imgs = testing::random_images(cfg, 3, r);
        const SamGradient sg = sam_gradient_detail(model, lam, imgs, 0.05);
        const auto fd = testing::numeric_gradient(
            [&](const std::vector<double>& x) {
                Tensor t = Tensor::vec(x);
                for (std::size_t i = 0; i < t.size(); ++i) t[i] += sg.epsilon[i];
                return mean_entropy_value(model, lam.unflatten(t), imgs);
            },
            testing::values(lam.flatten()));
        sam_err = std::max(sam_err, testing::rel_error(sg.grad.data(), fd));
        const Tensor plain = entropy_and_grad(model, lam, imgs).second;
        limit_err = std::max(limit_err, testing::rel_error(sam_gradient(model, lam, imgs, 1e-10).data(), plain.data()));
    }
    o.require(sam_err <= 1e-4, "perturbed gradient vs finite differences");
    o.require(limit_err <= 1e-6, "rho -> 0 limit");
    o.detail << "softmax dev " << simplex << ", eps dev " << eps_dev << ", sam grad rel err " << sam_err
             << ", rho->0 rel err " << limit_err;
}

// ---------------------------------------------------------------------------

EngineState random_state(std::size_t n, std::uint64_t seed) {
    const VitConfig cfg = testing::tiny_config();
    auto bb = std::make_shared<const VitParams>(testing::sharp_backbone(cfg, seed, 6.0));
    std::mt19937_64 rng(seed);
    std::vector<ModuleRecord> mods;
    for (std::size_t j = 0; j < n; ++j) {
        ModuleRecord m = make_module(ModuleKind::vpt, 2, cfg, bb->head_w, bb->head_b, seed * 17 + j);
        for (auto& v : m.head_weight.data()) v += std::normal_distribution<double>(0.0, 2.0)(rng);
        mods.push_back(std::move(m));
    }
    SelectorConfig sc;
    sc.d = cfg.embed_dim;
    sc.v = cfg.classes;
    sc.dx = 6;
    sc.dl = 5;
    sc.dp = 4;
    return EngineState::create(bb, std::move(mods), init_selector(sc, seed));
}

bool on_simplex(std::span<const double> w) {
    double s = 0.0;
    for (double v : w) {
        if (v < 0.0) return false;
        s += v;
    }
    return std::abs(s - 1.0) <= 1e-12;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

/// Selected set recomputed from the batch average: descending weight, ties to the smaller index.
std::vector<std::size_t> expected_selection(const Tensor& avg, std::size_t m) {
    std::vector<std::size_t> idx(avg.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return avg[a] > avg[b] || (avg[a] == avg[b] && a < b);
    });
    idx.resize(m);
    return idx;
}

void algorithm_structure(Outcome& o) {
    std::size_t batches = 0, report_bad = 0, exact_bad = 0, audit_bad = 0, zero_bad = 0, single_changes = 0;
    std::mt19937_64 rng(77);
    for (std::uint64_t seed = 1; batches < 200; ++seed) {
        const std::size_t N = 1 + seed % 5;
        EngineState st = random_state(N, seed);
        for (int k = 0; k < 10 && batches < 200; ++k, ++batches) {
            const std::size_t B = 1 + rng() % 12;
            const std::size_t U = rng() % (B + 1);
            EngineConfig cfg;
            cfg.top_m = 1 + rng() % N;
            cfg.batch_size = B;
            cfg.shots = U;
            cfg.sam.lr = 0.05;
            const auto imgs = testing::random_images(testing::tiny_config(), B, rng);

            EngineState full = st;
            EngineConfig all = cfg;
            all.top_m = N;
            const BatchResult rf = process_batch(full, imgs, all);

            const std::string sel0 = selector_digest(st.selector), frozen0 = st.frozen_digest_all();
            const auto ln0 = st.ln_digests();
            const EngineState before = st;
            const BatchResult r = process_batch(st, imgs, cfg);
            const WeightReport& w = r.weights;

            bool ok = w.initial_weights.rows() == B && w.per_sample_weights.rows() == B;
            for (std::size_t b = 0; ok && b < B; ++b)
                ok = on_simplex(w.initial_weights.row(b)) && on_simplex(w.per_sample_weights.row(b));
            ok = ok && on_simplex(w.batch_avg.data());
            for (std::size_t j = 0; ok && j < N; ++j) {
                double s = 0.0;
                for (std::size_t b = 0; b < B; ++b) s += w.per_sample_weights.at(b, j);
                ok = std::abs(s / static_cast<double>(B) - w.batch_avg[j]) <= 1e-12;
            }
            ok = ok && w.selected == expected_selection(w.batch_avg, cfg.top_m) && w.rescaled.size() == cfg.top_m &&
                 on_simplex(w.rescaled.data()) && w.ln_target == w.selected.front();
            double kept = 0.0;
            for (auto j : w.selected) kept += w.batch_avg[j];
            for (std::size_t i = 0; ok && i < w.selected.size(); ++i)
                ok = std::abs(w.rescaled[i] - w.batch_avg[w.selected[i]] / kept) <= 1e-12;
            for (std::size_t b = 0; ok && b < B; ++b) ok = on_simplex(r.probs.row(b));
            if (!ok) ++report_bad;

            // No selection: the full per-sample ensemble, bit for bit, and a hand-built one to 1e-12.
            const SelectorBatch sb =
                make_selector_batch(image_representations(*before.backbone, imgs), source_logits(before, imgs));
            bool exact = bit_equal(rf.probs, softmax_rows(full_ensemble(rf.weights.per_sample_weights, sb)));
            Tensor hand({B, before.backbone->cfg.classes});
            for (std::size_t j = 0; j < N; ++j) {
                const Tensor z = forward_logits(*before.backbone, &before.modules[j], before.ln[j], imgs);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < hand.cols(); ++c) hand.at(b, c) += rf.weights.per_sample_weights.at(b, j) * z.at(b, c);
            }
            const Tensor hp = softmax_rows(hand);
            for (std::size_t i = 0; exact && i < hp.size(); ++i) exact = std::abs(hp[i] - rf.probs[i]) <= 1e-12;
            if (!exact) ++exact_bad;

            const auto ln1 = st.ln_digests();
            std::vector<std::size_t> changed;
            for (std::size_t j = 0; j < N; ++j)
                if (ln1[j] != ln0[j]) changed.push_back(j);
            const bool sel_changed = selector_digest(st.selector) != sel0;
            if (U == 0) {
                if (!changed.empty() || sel_changed || !(st.selector == before.selector)) ++zero_bad;
            } else {
                const bool used = !r.sam.empty() && r.sam.front().used() > 0;
                bool audit = st.frozen_digest_all() == frozen0 && sel_changed == (N > 1);
                audit = audit && (used ? changed == std::vector<std::size_t>{w.ln_target} : changed.empty());
                if (!audit) ++audit_bad;
                if (changed.size() == 1) ++single_changes;
            }
        }
    }
    o.require(report_bad == 0, "weight report invariants");
    o.require(exact_bad == 0, "M=N equals the unselected ensemble");
    o.require(audit_bad == 0, "digest audit");
    o.require(zero_bad == 0, "zero-shot leaves state unchanged");
    o.require(single_changes > 50, "too few batches exercised an LN update");
    o.detail << batches << " batches, " << single_changes << " with one LN update; bad: report " << report_bad
             << ", M=N " << exact_bad << ", audit " << audit_bad << ", zero-shot " << zero_bad;
}

// ---------------------------------------------------------------------------

void filtering(Outcome& o) {
    VitConfig cfg = testing::tiny_config();
    cfg.classes = 10;
    SamConfig sam;
    sam.lr = 0.05;
    const double thr = sam.threshold(cfg.classes);
    o.require(std::abs(thr - 0.9210) < 5e-5, "threshold for K=10");

    std::mt19937_64 rng(5);
    std::size_t mixed_batches = 0, flag_bad = 0, subset_bad = 0, seq_bad = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const VitParams p = testing::sharp_backbone(cfg, 300 + seed, 2.0 + static_cast<double>(seed % 8));
        const ModuleRecord m = make_module(ModuleKind::vpt, 2, cfg, p.head_w, p.head_b, seed);
        const SourceModel model{&p, &m};
        const auto imgs = testing::random_images(cfg, 12, rng);
        const auto [next, rep] = batch_sam_step_report(model, p.ln, imgs, sam);

        std::vector<Tensor> kept;
        for (std::size_t i = 0; i < imgs.size(); ++i) {
            const double h = mean_entropy_value(model, p.ln, std::span(&imgs[i], 1));
            if (rep.filtered[i] != (h > thr)) ++flag_bad;
            if (h <= thr) kept.push_back(imgs[i]);
        }
        if (kept.empty() || kept.size() == imgs.size()) continue;
        ++mixed_batches;
        // Skipped samples contribute nothing: the step equals a step on the kept samples alone.
        SamConfig open = sam;
        open.entropy_threshold_factor = 1.0;
        const LnState on_kept = batch_sam_step(model, p.ln, kept, open);
        if (testing::rel_error(next.flatten().data(), on_kept.flatten().data()) > 1e-12) ++subset_bad;

        const auto [seq, srep] = filtered_sam_step(model, p.ln, imgs, sam);
        for (std::size_t i = 0; i < imgs.size(); ++i)
            if (srep.filtered[i] != (srep.entropy[i] > thr) || (srep.filtered[i] && srep.step_norm[i] != 0.0)) ++seq_bad;
        (void)seq;
    }
    o.require(flag_bad == 0, "filter flags disagree with recomputed entropies");
    o.require(subset_bad == 0, "filtered samples affected the step");
    o.require(seq_bad == 0, "per-sample variant");
    o.require(mixed_batches >= 5, "too few batches with both kept and skipped samples");

    // Uniform predictions (entropy ln 10) are above the threshold everywhere.
    VitParams flat = init_backbone(cfg, 9);
    for (auto& v : flat.head_w.data()) v = 0.0;
    for (auto& v : flat.head_b.data()) v = 0.0;
    const ModuleRecord fm = make_module(ModuleKind::vpt, 2, cfg, flat.head_w, flat.head_b, 3);
    const SourceModel fmodel{&flat, &fm};
    const LnState ln = testing::perturb(flat.ln, rng, 0.1);
    const auto imgs = testing::random_images(cfg, 16, rng);
    const auto [a, arep] = batch_sam_step_report(fmodel, ln, imgs, sam);
    const auto [b, brep] = filtered_sam_step(fmodel, ln, imgs, sam);
    const bool noop = arep.used() == 0 && brep.used() == 0 && bit_equal(a.flatten(), ln.flatten()) &&
                      bit_equal(b.flatten(), ln.flatten());
    o.require(noop, "all-filtered batch changed the LayerNorms");
    o.detail << "E0 " << thr << ", " << mixed_batches << " mixed batches, flag mismatches " << flag_bad
             << ", subset mismatches " << subset_bad << ", all-filtered no-op " << (noop ? "yes" : "no");
}

// ---------------------------------------------------------------------------

void mixture_bound(Outcome& o) {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> mu(-3.0, 3.0), sd(0.5, 2.0), pr(0.2, 0.8);
    std::gamma_distribution<double> g(1.0, 1.0);
    std::size_t held = 0;
    double worst = -1e300;
    for (int c = 0; c < 20; ++c) {
        const std::size_t N = 2 + c % 3;
        std::vector<GaussianSource> src(N);
        std::vector<double> lam(N);
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            src[j].prior1 = pr(rng);
            src[j].mu0 = mu(rng);
            src[j].mu1 = mu(rng);
            src[j].sigma = sd(rng);
            s += lam[j] = g(rng);
        }
        for (auto& l : lam) l /= s;
        const BoundReport r = mixture_bound_oracle(src, lam, 100000, rng());
        if (r.holds) ++held;
        worst = std::max(worst, (r.lhs - r.rhs) / std::max(r.se, 1e-300));
    }
    o.require(held == 20, "configurations violating the bound");
    o.detail << held << "/20 hold, largest (lhs-rhs)/SE " << worst;
}

// ---------------------------------------------------------------------------

Bytes frame_header(std::uint32_t len) {
    return {static_cast<std::uint8_t>(len >> 24), static_cast<std::uint8_t>(len >> 16),
            static_cast<std::uint8_t>(len >> 8), static_cast<std::uint8_t>(len)};
}

std::optional<Frame> raw_exchange(const Address& a, const Bytes& out, bool* closed_after = nullptr) {
    net::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    sockaddr_in sa = net::resolve(a);
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) return std::nullopt;
    if (!net::write_all(s.fd(), out.data(), out.size())) return std::nullopt;
    Frame f;
    if (net::read_frame(s.fd(), f) != net::ReadStatus::ok) return std::nullopt;
    if (closed_after) {
        Frame g;
        *closed_after = net::read_frame(s.fd(), g) == net::ReadStatus::eof;
    }
    return f;
}

void persistence(Outcome& o) {
    testing::TempDir dir("acceptance");
    ModuleStore store(dir.path());
    std::vector<Bytes> local;
    for (int i = 0; i < 4; ++i) {
        const ModuleRecord r = testing::small_module("src" + std::to_string(i), "blur:sev" + std::to_string(i + 1), i);
        local.push_back(serialize(r));
        store.put(r);
    }
    bool round = true;
    for (const auto& b : local) round = round && serialize(deserialize(b)) == b;
    o.require(round, "container round trip");

    bool digest = true;
    for (std::size_t pos : {std::size_t{10}, local[0].size() / 2, local[0].size() - 1}) {
        Bytes bad = local[0];
        bad[pos] ^= 0x20;
        try {
            (void)decode_container(bad);
            digest = false;
        } catch (const FormatError&) {
        }
    }
    o.require(digest, "tampered container accepted");

    StoreServer server(store, parse_address("127.0.0.1:0"));
    const Address a = server.address();
    bool wire = true;
    for (const auto& e : store.list()) wire = wire && client_get_bytes(a, e.id) == read_file(dir.path() / e.file);
    wire = wire && client_list(a).size() == 4;
    o.require(wire, "GET bytes differ from the stored file");

    std::atomic<int> failures{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t)
        threads.emplace_back([&, t] {
            try {
                const Bytes mine = serialize(testing::small_module("client" + std::to_string(t), "blur:sev2", 50 + t));
                client_put_bytes(a, mine);
                for (int k = 0; k < 5; ++k)
                    if (client_get_bytes(a, "src" + std::to_string(k % 4)) != local[k % 4]) ++failures;
                if (client_get_bytes(a, "client" + std::to_string(t)) != mine) ++failures;
            } catch (...) {
                ++failures;
            }
        });
    for (auto& th : threads) th.join();
    o.require(failures == 0 && client_list(a).size() == 12 && store.audit().empty(), "concurrent clients");

    bool closed = false;
    const auto bad_op = raw_exchange(a, Bytes{0, 0, 0, 1, 0x7f}, &closed);
    bool malformed = bad_op && bad_op->op == Opcode::err && body_string(bad_op->body) == "malformed:opcode 0x7f" && closed;
    const auto big = raw_exchange(a, frame_header(static_cast<std::uint32_t>(kMaxFrame + 1)));
    malformed = malformed && big && body_string(big->body) == "too_large";
    const auto empty = raw_exchange(a, frame_header(0));
    malformed = malformed && empty && empty->op == Opcode::err;
    {
        net::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
        sockaddr_in sa = net::resolve(a);
        if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0) {
            Bytes partial = frame_header(100);
            partial.push_back(0x02);
            net::write_all(s.fd(), partial.data(), partial.size());
        }
    }
    malformed = malformed && client_get_bytes(a, "src1") == local[1];
    o.require(malformed, "malformed frame handling");
    o.detail << "4 artifacts, 8 clients, " << server.requests_served() << " requests served";
}

// ---------------------------------------------------------------------------

struct SeedRun {
    std::uint64_t seed = 0;
    double pluto = 0.0, uniform = 0.0, worst_single = 0.0, zero_shot = 0.0;
    bool zero_shot_unchanged = false;
    std::size_t zero_shot_failed = 0;
    std::vector<double> sweep; // accuracy at M = 1..N
    ForgettingReport forget;
    Pretrained pretrained;
};

SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedRun r;
    r.seed = seed;
    const ExperimentData d = make_experiment_data(cfg, seed);
    r.pretrained = pretrain_all(cfg, d, seed);
    const TargetStream stream = make_stream(cfg, d, seed);
    const Pretrained& p = r.pretrained;

    r.pluto = run_pluto(p, stream, cfg.engine).accuracy;
    r.uniform = run_uniform(p, stream, BaselineConfig{cfg.engine.batch_size, cfg.engine.shots, false, cfg.baseline_ln_lr});
    const auto singles = single_source_accuracy(p, stream);
    r.worst_single = *std::min_element(singles.begin(), singles.end());

    EngineConfig zero = cfg.engine;
    zero.shots = 0;
    const RunSummary z = run_pluto(p, stream, zero);
    r.zero_shot = z.accuracy;
    r.zero_shot_unchanged = z.state_unchanged;
    r.zero_shot_failed = z.failed_batches;

    for (std::size_t m = 1; m <= cfg.sources.size(); ++m) {
        EngineConfig e = cfg.engine;
        e.top_m = m;
        r.sweep.push_back(m == cfg.engine.top_m ? r.pluto : run_pluto(p, stream, e).accuracy);
    }
    r.forget = forgetting(cfg, d, p, stream);
    return r;
}

template <typename F>
std::vector<double> collect(const std::vector<SeedRun>& runs, F&& f) {
    std::vector<double> out;
    for (const auto& r : runs) out.push_back(f(r));
    return out;
}

std::string list(const std::vector<double>& v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << "[";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
    os << "]";
    return os.str();
}

void ordering(Outcome& o, const std::vector<SeedRun>& runs) {
    const double pl = mean(collect(runs, [](const SeedRun& r) { return r.pluto; }));
    const double un = mean(collect(runs, [](const SeedRun& r) { return r.uniform; }));
    const double ws = mean(collect(runs, [](const SeedRun& r) { return r.worst_single; }));
    o.require(pl >= un - 0.01, "PLUTO below the uniform ensemble");
    o.require(pl > ws, "PLUTO not above the worst single source");
    o.detail << std::fixed << std::setprecision(4) << "PLUTO " << pl << ", uniform " << un << ", worst single " << ws
             << ", per seed PLUTO " << list(collect(runs, [](const SeedRun& r) { return r.pluto; }));
}

void few_shot(Outcome& o, const std::vector<SeedRun>& runs, std::size_t shots) {
    const double full = mean(collect(runs, [](const SeedRun& r) { return r.pluto; }));
    const double zero = mean(collect(runs, [](const SeedRun& r) { return r.zero_shot; }));
    bool completes = true;
    for (const auto& r : runs) completes = completes && r.zero_shot_unchanged && r.zero_shot_failed == 0;
    o.require(full >= zero - 0.01, "U=" + std::to_string(shots) + " below zero-shot");
    o.require(completes, "zero-shot run did not complete cleanly");
    o.detail << std::fixed << std::setprecision(4) << "U=" << shots << " " << full << ", U=0 " << zero
             << ", per seed U=0 " << list(collect(runs, [](const SeedRun& r) { return r.zero_shot; }));
}

void sweep(Outcome& o, const std::vector<SeedRun>& runs) {
    std::vector<double> by_m(runs.front().sweep.size());
    for (std::size_t m = 0; m < by_m.size(); ++m)
        by_m[m] = mean(collect(runs, [&](const SeedRun& r) { return r.sweep[m]; }));
    for (std::size_t m = 1; m < by_m.size(); ++m)
        o.require(by_m[m] >= by_m[m - 1] - 0.02, "M=" + std::to_string(m + 1) + " drops more than 0.02");
    o.detail << "mean accuracy for M=1.." << by_m.size() << " " << list(by_m);
}

void anti_forgetting(Outcome& o, const std::vector<SeedRun>& runs) {
    const auto pd = collect(runs, [](const SeedRun& r) { return r.forget.pluto_drop(); });
    const auto bd = collect(runs, [](const SeedRun& r) { return r.forget.baseline_drop(); });
    o.require(mean(pd) <= mean(bd), "PLUTO forgets more than the all-source LN baseline");
    o.detail << std::fixed << std::setprecision(5) << "mean drop PLUTO " << mean(pd) << ", baseline " << mean(bd)
             << "; per seed PLUTO " << list(pd) << ", baseline " << list(bd);
}

std::size_t stored_count(const Container& c, const std::string& kind) {
    std::size_t n = 0;
    for (const auto& t : c.tensors) {
        if (kind == "vpt" && t.name == "prompts") n += t.value.size();
        if (kind == "adapter" && t.name.starts_with("adapter.") && t.name.ends_with(".weight")) n += t.value.size();
    }
    return n;
}

void parameter_counts(Outcome& o, const ExperimentConfig& cfg, const std::vector<SeedRun>& runs) {
    std::size_t checked = 0, bad = 0;
    const std::size_t d = cfg.vit.embed_dim;
    auto check_module = [&](const ModuleRecord& m) {
        const Container c = decode_container(serialize(m));
        const std::size_t want =
            m.kind == ModuleKind::vpt ? m.prompt_len * d : 2 * cfg.vit.depth * 2 * d * m.bottleneck;
        ++checked;
        if (stored_count(c, to_string(m.kind)) != want || m.counted_params() != want) ++bad;
    };
    for (const auto& r : runs) {
        for (const auto& m : r.pretrained.modules) check_module(m);
        const Container c = decode_container(serialize_selector(r.pretrained.selector));
        std::size_t n = 0;
        for (const auto& t : c.tensors) n += t.value.size();
        const SelectorConfig& s = r.pretrained.selector.cfg;
        ++checked;
        if (n != s.d * s.dx + s.dx * s.dp + s.v * s.dl + s.dl * s.dp + 4 * s.dp) ++bad;
    }
    // The alternative module kind at several bottlenecks, on the experiment backbone.
    const VitParams& bb = *runs.front().pretrained.backbone;
    for (std::size_t k : {1, 4, 8, 16})
        check_module(deserialize(serialize(make_module(ModuleKind::adapter, k, cfg.vit, bb.head_w, bb.head_b, k)), &cfg.vit));
    for (std::size_t p : {1, 8, 50})
        check_module(deserialize(serialize(make_module(ModuleKind::vpt, p, cfg.vit, bb.head_w, bb.head_b, p)), &cfg.vit));
    o.require(bad == 0, "stored counts differ from the formulas");
    o.detail << checked << " artifacts checked, " << bad << " mismatches";
}

struct Criterion {
    int number;
    std::string name;
    std::function<void(Outcome&)> run;
};

} // namespace

int main() {
    std::cout << std::unitbuf;
    ExperimentConfig cfg;
    std::vector<SeedRun> runs;
    bool experiment_ok = true;
    std::string experiment_error;
    auto need_runs = [&]() -> const std::vector<SeedRun>& {
        if (runs.empty() && experiment_ok) {
            try {
                for (auto s : cfg.seeds) {
                    const auto t0 = std::chrono::steady_clock::now();
                    runs.push_back(run_seed(cfg, s));
                    std::cout << "  (seed " << s << " experiment: "
                              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                              << " s)\n";
                }
            } catch (const std::exception& e) {
                experiment_ok = false;
                experiment_error = e.what();
            }
        }
        if (!experiment_ok) throw std::runtime_error("experiment failed: " + experiment_error);
        return runs;
    };

    const std::vector<Criterion> criteria{
        {1, "equation-level correctness", equations},
        {2, "adaptation loop structure", algorithm_structure},
        {3, "entropy filtering", filtering},
        {4, "mixture-of-sources bound", mixture_bound},
        {10, "persistence and service", persistence},
        {5, "desk-scale ordering", [&](Outcome& o) { ordering(o, need_runs()); }},
        {6, "few-shot degradation", [&](Outcome& o) { few_shot(o, need_runs(), cfg.engine.shots); }},
        {7, "selection sweep", [&](Outcome& o) { sweep(o, need_runs()); }},
        {8, "anti-forgetting", [&](Outcome& o) { anti_forgetting(o, need_runs()); }},
        {9, "parameter counts", [&](Outcome& o) { parameter_counts(o, cfg, need_runs()); }},
    };

    bool all = true;
    std::size_t passed = 0;
    for (const auto& c : criteria) {
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            c.run(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [exception: " << e.what() << "]";
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream line;
        line << (o.pass ? "PASS" : "FAIL") << " criterion " << c.number << " (" << c.name << ", " << std::fixed
             << std::setprecision(1) << secs << " s): " << o.detail.str();
        std::cout << line.str() << "\n";
        all = all && o.pass;
        passed += o.pass ? 1 : 0;
    }
    std::cout << "acceptance report complete: " << passed << "/" << criteria.size() << " criteria passed\n";
    return all ? 0 : 1;
}
