// pluto: command-line front end.
//
//   pluto synth    --config c.json --seed 1 --out data
//   pluto pretrain --config c.json --seed 1 --data data --store store
//   pluto adapt    --config c.json --seed 1 --data data --store store --out results [--shots U] [--top-m M] [--sweep-m 1..4]
//   pluto serve    --store store --addr 127.0.0.1:7878
//   pluto list     --addr host:port
//   pluto fetch    --addr host:port --out dir id...
//   pluto verify   [--seed 1]
//
// Exit codes: 0 ok, 1 check failure, 2 usage error, 3 runtime error.
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "pluto/pluto.hpp"
#include "pluto/verify.hpp"

namespace fs = std::filesystem;
using namespace pluto;

namespace {

constexpr int kOk = 0, kCheckFailed = 1, kUsage = 2, kRuntime = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> shots;
    std::optional<std::size_t> top_m;
    std::string sweep_m;
    std::optional<double> rho;
    std::optional<double> entropy_factor;
    std::string store = "store";
    std::string data = "data";
    std::string addr;
    std::string out;
    std::vector<std::string> ids;
    bool quiet = false;
};

ExperimentConfig load_config(const Options& o) {
    ExperimentConfig c;
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) throw UsageError("cannot read config " + o.config);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config " + o.config + " is not valid JSON: " + e.what());
        }
        try {
            c = j.get<ExperimentConfig>();
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config " + o.config + ": " + e.what());
        }
    }
    if (o.seed) c.seed = *o.seed;
    if (o.shots) c.engine.shots = *o.shots;
    if (o.top_m) c.engine.top_m = *o.top_m;
    if (o.rho) c.engine.sam.rho = *o.rho;
    if (o.entropy_factor) c.engine.sam.entropy_threshold_factor = *o.entropy_factor;
    try {
        c.validate();
    } catch (const DomainError& e) {
        throw UsageError(e.what());
    }
    return c;
}

/// "1..4" or "1,2,4".
std::vector<std::size_t> parse_sweep(const std::string& s, std::size_t n) {
    std::vector<std::size_t> out;
    auto num = [&](const std::string& t) {
        try {
            std::size_t pos = 0;
            const auto v = std::stoul(t, &pos);
            if (pos != t.size()) throw std::invalid_argument(t);
            return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            throw UsageError("bad --sweep-m value '" + s + "'");
        }
    };
    if (const auto r = s.find(".."); r != std::string::npos) {
        const auto a = num(s.substr(0, r)), b = num(s.substr(r + 2));
        for (auto m = a; m <= b; ++m) out.push_back(m);
    } else {
        std::stringstream ss(s);
        for (std::string t; std::getline(ss, t, ',');) out.push_back(num(t));
    }
    if (out.empty()) throw UsageError("empty --sweep-m");
    for (auto m : out)
        if (m < 1 || m > n) throw UsageError("--sweep-m entries must be in [1, " + std::to_string(n) + "]");
    return out;
}

void write_bytes(const fs::path& p, const Bytes& b) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file_atomic(p, b);
}

void log(const Options& o, const std::string& s) {
    if (!o.quiet) std::cerr << s << "\n";
}

std::string data_path(const fs::path& dir, const std::string& label, std::uint64_t seed) {
    return (dir / ("s" + std::to_string(seed)) / data_file(label)).string();
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
    const ExperimentConfig c = load_config(o);
    const fs::path dir = o.out.empty() ? fs::path(o.data) : fs::path(o.out);
    const ExperimentData d = make_experiment_data(c, c.seed);
    auto save = [&](const Dataset& ds) {
        const auto p = data_path(dir, ds.label, c.seed);
        write_bytes(p, serialize_dataset(ds, "dataset." + ds.label + ".s" + std::to_string(c.seed)));
        std::cout << p << "\n";
    };
    Dataset base = d.base;
    base.label = "identity";
    save(base);
    for (const auto& s : d.sources) save(s);
    for (const auto& t : d.targets) save(t);
    return kOk;
}

ExperimentData load_data(const ExperimentConfig& c, const fs::path& dir) {
    auto load = [&](const std::string& label) {
        const auto p = data_path(dir, label, c.seed);
        if (!fs::exists(p)) throw Error("missing dataset " + p + " (run `pluto synth` first)");
        return deserialize_dataset(read_file(p));
    };
    ExperimentData d;
    d.base = load("identity");
    for (const auto& s : c.sources) d.sources.push_back(load(s.label()));
    for (const auto& t : c.target) d.targets.push_back(load(t.label()));
    if (d.base.size() != c.data.base_images) throw Error("dataset size differs from the config");
    return d;
}

int cmd_pretrain(const Options& o) {
    const ExperimentConfig c = load_config(o);
    const ExperimentData d = load_data(c, o.data);
    const Pretrained p = pretrain_all(c, d, c.seed, [&](const std::string& s) { log(o, s); });
    ModuleStore store(o.store);
    store_pretrained(store, p, c.seed);
    std::cout << "artifact\tkind\tstored_params\tformula\n";
    for (const auto& m : p.modules) {
        const std::size_t formula = m.kind == ModuleKind::vpt
                                        ? vpt_param_count(m.prompt_len, c.vit.embed_dim)
                                        : adapter_param_count(c.vit.depth, c.vit.embed_dim, m.bottleneck);
        std::cout << m.id << "\t" << to_string(m.kind) << "\t" << m.counted_params() << "\t" << formula << "\n";
    }
    const auto& s = c.selector;
    std::cout << selector_id(c.seed) << "\tselector\t" << p.selector.param_count() << "\t"
              << selector_param_count(s.d, s.dx, s.dl, s.dp, s.v) << "\n";
    return kOk;
}

int cmd_adapt(const Options& o) {
    const ExperimentConfig c = load_config(o);
    const ExperimentData d = load_data(c, o.data);
    const ModuleStore store(o.store);
    const Pretrained p = load_pretrained(store, c, c.seed);
    const TargetStream stream = make_stream(c, d, c.seed);
    const fs::path out = o.out.empty() ? fs::path(c.output) : fs::path(o.out);
    fs::create_directories(out);

    std::ofstream jsonl(out / "batches.jsonl", std::ios::trunc);
    const RunSummary run = run_pluto(p, stream, c.engine, nullptr, [&](const BatchRecord& r) {
        jsonl << to_json_record(r).dump() << "\n";
    });
    const BaselineConfig plain{c.engine.batch_size, c.engine.shots, false, c.baseline_ln_lr};
    const double uniform = run_uniform(p, stream, plain);
    const auto single = single_source_accuracy(p, stream);

    nlohmann::json summary;
    summary["seed"] = c.seed;
    summary["config"] = emit_config(c);
    summary["pluto"] = to_json(run);
    summary["uniform_accuracy"] = uniform;
    summary["pluto_minus_uniform"] = run.accuracy - uniform;
    summary["single_source_accuracy"] = single;
    std::ofstream csv(out / "summary.csv", std::ios::trunc);
    csv << "pipeline,top_m,shots,accuracy\n";
    csv << "pluto," << run.top_m << "," << run.shots << "," << run.accuracy << "\n";
    csv << "uniform," << p.modules.size() << "," << c.engine.shots << "," << uniform << "\n";
    for (std::size_t j = 0; j < single.size(); ++j) csv << "single:" << p.modules[j].id << ",1,0," << single[j] << "\n";

    if (!o.sweep_m.empty()) {
        summary["sweep"] = nlohmann::json::array();
        for (auto m : parse_sweep(o.sweep_m, p.modules.size())) {
            EngineConfig e = c.engine;
            e.top_m = m;
            const RunSummary r = run_pluto(p, stream, e);
            summary["sweep"].push_back(to_json(r));
            csv << "pluto_sweep," << m << "," << e.shots << "," << r.accuracy << "\n";
            log(o, "M=" + std::to_string(m) + " accuracy " + std::to_string(r.accuracy));
        }
    }
    const ForgettingReport f = forgetting(c, d, p, stream);
    summary["forgetting"] = to_json(f);
    for (std::size_t j = 0; j < f.before.size(); ++j)
        csv << "forgetting:" << p.modules[j].id << ",," << c.engine.shots << "," << f.before[j] << ";"
            << f.pluto_after[j] << ";" << f.baseline_after[j] << "\n";
    std::ofstream(out / "summary.json", std::ios::trunc) << summary.dump(2) << "\n";
    std::cout << "pluto " << run.accuracy << "  uniform " << uniform << "  difference " << run.accuracy - uniform
              << "\n";
    return kOk;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const Options& o) {
    ModuleStore store(o.store);
    const std::string a = o.addr.empty() ? default_address() : o.addr;
    StoreServer server(store, parse_address(a));
    std::cout << "serving " << o.store << " on " << server.address().str() << std::endl;
    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    return kOk;
}

int cmd_list(const Options& o) {
    const Address a = parse_address(o.addr.empty() ? default_address() : o.addr);
    for (const auto& e : client_list(a))
        std::cout << e.id << "\t" << e.kind << "\t" << e.domain_label << "\t" << e.sha256 << "\n";
    return kOk;
}

int cmd_fetch(const Options& o) {
    const Address a = parse_address(o.addr.empty() ? default_address() : o.addr);
    if (o.ids.empty()) throw UsageError("fetch needs at least one id");
    const fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
    for (const auto& id : o.ids) {
        validate_id(id);
        const Bytes b = client_get_bytes(a, id);
        const auto p = dir / (id + ".plut");
        write_bytes(p, b);
        std::cout << p.string() << "\t" << file_digest_hex(b) << "\n";
    }
    return kOk;
}

int cmd_verify(const Options& o) {
    bool ok = true;
    for (const auto& r : run_verification(o.seed.value_or(1))) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        ok = ok && r.pass;
    }
    return ok ? kOk : kCheckFailed;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-source test-time adaptation with a module store"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* s) {
        s->add_option("--config", o.config, "Experiment config (JSON)");
        s->add_option("--seed", o.seed, "Run seed");
        s->add_flag("--quiet", o.quiet, "Suppress progress output");
    };
    auto* synth = app.add_subcommand("synth", "Generate synthetic datasets");
    common(synth);
    synth->add_option("--out", o.out, "Output directory (default: data)");

    auto* pretrain = app.add_subcommand("pretrain", "Train backbone, source modules and selector into a store");
    common(pretrain);
    pretrain->add_option("--data", o.data, "Dataset directory");
    pretrain->add_option("--store", o.store, "Store directory");

    auto* adapt = app.add_subcommand("adapt", "Run test-time adaptation and baselines");
    common(adapt);
    adapt->add_option("--data", o.data, "Dataset directory");
    adapt->add_option("--store", o.store, "Store directory");
    adapt->add_option("--out", o.out, "Results directory");
    adapt->add_option("--shots", o.shots, "Samples per batch used for adaptation (0 = zero-shot)");
    adapt->add_option("--top-m", o.top_m, "Modules kept per batch");
    adapt->add_option("--sweep-m", o.sweep_m, "Also run every M in a range, e.g. 1..4");
    adapt->add_option("--rho", o.rho, "Perturbation radius");
    adapt->add_option("--entropy-factor", o.entropy_factor, "Entropy filter as a fraction of ln K");

    auto* serve = app.add_subcommand("serve", "Serve a store over TCP");
    serve->add_option("--store", o.store, "Store directory");
    serve->add_option("--addr", o.addr, "host:port (default: $PLUTO_STORE_ADDR or 127.0.0.1:7878)");

    auto* list = app.add_subcommand("list", "List modules held by a server");
    list->add_option("--addr", o.addr, "host:port");

    auto* fetch = app.add_subcommand("fetch", "Download modules from a server");
    fetch->add_option("--addr", o.addr, "host:port");
    fetch->add_option("--out", o.out, "Destination directory");
    fetch->add_option("ids", o.ids, "Module ids")->required();

    auto* verify = app.add_subcommand("verify", "Run the built-in numerical checks");
    verify->add_option("--seed", o.seed, "Seed for the Monte Carlo checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*synth) return cmd_synth(o);
        if (*pretrain) return cmd_pretrain(o);
        if (*adapt) return cmd_adapt(o);
        if (*serve) return cmd_serve(o);
        if (*list) return cmd_list(o);
        if (*fetch) return cmd_fetch(o);
        if (*verify) return cmd_verify(o);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
