// Parameter-efficient tuning modules: prompt (VPT-shallow) and bottleneck
// adapter records, their closed-form parameter counts and container codec.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pluto/container.hpp"
#include "pluto/vit_config.hpp"

namespace pluto {

enum class ModuleKind { vpt, adapter };

inline std::string to_string(ModuleKind k) { return k == ModuleKind::vpt ? "vpt" : "adapter"; }

inline ModuleKind module_kind_from_string(const std::string& s) {
    if (s == "vpt") return ModuleKind::vpt;
    if (s == "adapter") return ModuleKind::adapter;
    throw FormatError("unknown module kind: " + s);
}

/// Prompt parameters |θ| = p·d.
inline std::size_t vpt_param_count(std::size_t prompts, std::size_t dim) {
    if (prompts < 1 || dim < 1) throw DomainError("vpt_param_count: prompt length and dim must be >= 1");
    return prompts * dim;
}

/// Adapter projection parameters |θ| = 2·l·2·k·d_b (two adapters per layer, biases excluded).
inline std::size_t adapter_param_count(std::size_t layers, std::size_t input_dim, std::size_t bottleneck) {
    if (layers < 1 || input_dim < 1 || bottleneck < 1)
        throw DomainError("adapter_param_count: all sizes must be >= 1");
    return 2 * layers * 2 * input_dim * bottleneck;
}

/// Selector parameters: four projections plus two LayerNorms over d'.
inline std::size_t selector_param_count(std::size_t d, std::size_t dx, std::size_t dl, std::size_t dp,
                                        std::size_t v) {
    if (!d || !dx || !dl || !dp || !v) throw DomainError("selector_param_count: all sizes must be >= 1");
    return d * dx + dx * dp + v * dl + dl * dp + 4 * dp;
}

struct ModuleMeta {
    double source_accuracy = 0.0;
    std::uint64_t seed = 0;
    std::string created_at;
    std::size_t head_params = 0;
    std::size_t bias_params = 0;

    bool operator==(const ModuleMeta&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModuleMeta, source_accuracy, seed, created_at, head_params,
                                                bias_params)

inline const char* kAdapterSites[2] = {"attn", "mlp"};

inline std::string adapter_name(std::size_t layer, std::size_t site, const char* part) {
    return "adapter." + std::to_string(layer) + "." + kAdapterSites[site] + "." + part;
}

/// One source-domain module: payload tensors plus its own classifier head.
struct ModuleRecord {
    std::string id;
    std::string domain_label;
    ModuleKind kind = ModuleKind::vpt;
    std::size_t prompt_len = 0; // VPT p
    std::size_t bottleneck = 0; // adapter d_b
    std::vector<std::pair<std::string, Tensor>> payload;
    Tensor head_weight; // [d×K]
    Tensor head_bias;   // [K]
    ModuleMeta meta;

    const Tensor& tensor(std::string_view name) const {
        for (const auto& [n, t] : payload)
            if (n == name) return t;
        throw DomainError("module " + id + " has no tensor " + std::string(name));
    }
    Tensor& tensor(std::string_view name) {
        for (auto& [n, t] : payload)
            if (n == name) return t;
        throw DomainError("module " + id + " has no tensor " + std::string(name));
    }

    /// Number of values held in the PET payload's projection/prompt tensors.
    std::size_t counted_params() const {
        std::size_t n = 0;
        for (const auto& [name, t] : payload)
            if (name == "prompts" || name.ends_with(".weight")) n += t.size();
        return n;
    }

    bool operator==(const ModuleRecord&) const = default;
};

/// Payload manifest (name, shape) implied by kind, hyper-parameters and backbone geometry.
inline std::vector<std::pair<std::string, Shape>> expected_payload(ModuleKind kind, std::size_t hyper,
                                                                   const VitConfig& cfg) {
    const std::size_t d = cfg.embed_dim;
    std::vector<std::pair<std::string, Shape>> out;
    if (kind == ModuleKind::vpt) {
        if (hyper < 1) throw DomainError("VPT requires at least one prompt");
        out.emplace_back("prompts", Shape{hyper, d});
    } else {
        if (hyper < 1) throw DomainError("adapter bottleneck must be >= 1");
        for (std::size_t l = 0; l < cfg.depth; ++l)
            for (std::size_t s = 0; s < 2; ++s) {
                out.emplace_back(adapter_name(l, s, "down.weight"), Shape{d, hyper});
                out.emplace_back(adapter_name(l, s, "down.bias"), Shape{hyper});
                out.emplace_back(adapter_name(l, s, "up.weight"), Shape{hyper, d});
                out.emplace_back(adapter_name(l, s, "up.bias"), Shape{d});
            }
    }
    return out;
}

/// Fresh module: xavier-uniform prompts, or adapters with zero up-projections
/// (identity at initialisation). The head is copied from the given backbone head.
inline ModuleRecord make_module(ModuleKind kind, std::size_t hyper, const VitConfig& cfg, const Tensor& head_weight,
                                const Tensor& head_bias, std::uint64_t seed) {
    cfg.validate();
    ModuleRecord r;
    r.kind = kind;
    (kind == ModuleKind::vpt ? r.prompt_len : r.bottleneck) = hyper;
    std::mt19937_64 rng(seed);
    for (auto& [name, shape] : expected_payload(kind, hyper, cfg)) {
        Tensor t(shape);
        if (name == "prompts") {
            const double a = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
            std::uniform_real_distribution<double> u(-a, a);
            for (auto& v : t.data()) v = u(rng);
        } else if (name.ends_with("down.weight")) {
            const double a = 1.0 / std::sqrt(static_cast<double>(shape[0]));
            std::uniform_real_distribution<double> u(-a, a);
            for (auto& v : t.data()) v = u(rng);
        }
        r.payload.emplace_back(name, std::move(t));
    }
    r.head_weight = head_weight;
    r.head_bias = head_bias;
    r.meta.seed = seed;
    r.meta.head_params = head_weight.size() + head_bias.size();
    for (const auto& [name, t] : r.payload)
        if (name.ends_with(".bias")) r.meta.bias_params += t.size();
    return r;
}

inline Container to_container(const ModuleRecord& r) {
    Container c;
    c.id = r.id;
    c.domain_label = r.domain_label;
    c.kind = to_string(r.kind);
    if (r.kind == ModuleKind::vpt)
        c.hyper = {{"prompt_len", r.prompt_len}};
    else
        c.hyper = {{"bottleneck", r.bottleneck}};
    c.meta = r.meta;
    for (const auto& [n, t] : r.payload) c.tensors.push_back({n, t, DType::f32});
    c.tensors.push_back({"head.weight", r.head_weight, DType::f32});
    c.tensors.push_back({"head.bias", r.head_bias, DType::f32});
    return c;
}

/// Rebuilds a record, verifying every tensor shape against the declared
/// hyper-parameters (and against cfg when one is supplied).
inline ModuleRecord module_from_container(const Container& c, const VitConfig* cfg = nullptr) {
    ModuleRecord r;
    r.id = c.id;
    r.domain_label = c.domain_label;
    r.kind = module_kind_from_string(c.kind);
    try {
        if (r.kind == ModuleKind::vpt)
            r.prompt_len = c.hyper.at("prompt_len").get<std::size_t>();
        else
            r.bottleneck = c.hyper.at("bottleneck").get<std::size_t>();
        r.meta = c.meta.get<ModuleMeta>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("module header: ") + e.what());
    }
    if (c.tensors.size() < 2) throw ShapeMismatchError("module container lacks head tensors");
    const auto& hw = c.tensors[c.tensors.size() - 2];
    const auto& hb = c.tensors.back();
    if (hw.name != "head.weight" || hb.name != "head.bias" || hw.value.rank() != 2 ||
        hb.value.size() != hw.value.dim(1))
        throw ShapeMismatchError("module head tensors malformed");
    VitConfig geom;
    if (cfg) {
        geom = *cfg;
        if (hw.value.shape() != Shape{cfg->embed_dim, cfg->classes})
            throw ShapeMismatchError("module head " + shape_str(hw.value.shape()) + " does not match backbone");
    } else {
        geom.embed_dim = hw.value.dim(0);
        geom.classes = hw.value.dim(1);
        if (r.kind == ModuleKind::adapter) geom.depth = (c.tensors.size() - 2) / 8;
    }
    const std::size_t hyper = r.kind == ModuleKind::vpt ? r.prompt_len : r.bottleneck;
    const auto expected = expected_payload(r.kind, hyper, geom);
    if (expected.size() + 2 != c.tensors.size())
        throw ShapeMismatchError("module " + r.id + ": expected " + std::to_string(expected.size()) +
                                 " payload tensors, found " + std::to_string(c.tensors.size() - 2));
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& t = c.tensors[i];
        if (t.name != expected[i].first || t.value.shape() != expected[i].second)
            throw ShapeMismatchError("module " + r.id + ": tensor " + t.name + " " + shape_str(t.value.shape()) +
                                     ", expected " + expected[i].first + " " + shape_str(expected[i].second));
        r.payload.emplace_back(t.name, t.value);
    }
    r.head_weight = hw.value;
    r.head_bias = hb.value;
    return r;
}

inline Bytes serialize(const ModuleRecord& r) { return encode_container(to_container(r)); }

inline ModuleRecord deserialize(std::span<const std::uint8_t> bytes, const VitConfig* cfg = nullptr) {
    return module_from_container(decode_container(bytes), cfg);
}

/// Applies the same f32 rounding that a serialize/deserialize round trip would.
inline Tensor quantize_f32(Tensor t) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
    return t;
}

} // namespace pluto
