// A small vision transformer with pluggable prompt/adapter modules.
//
// Forward passes are expressed on the autodiff tape so the same code serves
// inference, backbone pretraining, module pretraining and LayerNorm
// adaptation; which tensors receive gradients is decided at bind time.
#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pluto/autodiff.hpp"
#include "pluto/container.hpp"
#include "pluto/dataset.hpp"
#include "pluto/optim.hpp"
#include "pluto/pet.hpp"
#include "pluto/vit_config.hpp"

namespace pluto {

struct LnPair {
    Tensor gamma;
    Tensor beta;
    bool operator==(const LnPair&) const = default;
};

/// Affine parameters of every LayerNorm, ordered block0.ln1, block0.ln2, ..., final.
struct LnState {
    std::vector<LnPair> layers;

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.gamma.size() + l.beta.size();
        return n;
    }

    /// Concatenation [γ0, β0, γ1, β1, ...] as one flat vector.
    Tensor flatten() const {
        std::vector<double> v;
        v.reserve(param_count());
        for (const auto& l : layers) {
            v.insert(v.end(), l.gamma.data().begin(), l.gamma.data().end());
            v.insert(v.end(), l.beta.data().begin(), l.beta.data().end());
        }
        return Tensor::vec(std::move(v));
    }

    /// Inverse of flatten using this state's layout.
    LnState unflatten(const Tensor& flat) const {
        if (flat.size() != param_count()) throw DimensionError("LnState::unflatten: length mismatch");
        LnState out = *this;
        std::size_t o = 0;
        for (auto& l : out.layers) {
            for (auto& v : l.gamma.data()) v = flat[o++];
            for (auto& v : l.beta.data()) v = flat[o++];
        }
        return out;
    }

    static std::string gamma_name(std::size_t k) { return "ln." + std::to_string(k) + ".gamma"; }
    static std::string beta_name(std::size_t k) { return "ln." + std::to_string(k) + ".beta"; }

    /// Gradient map (as produced by a graph) flattened in the same layout as flatten().
    Tensor flatten_grads(const std::map<std::string, Tensor>& grads) const {
        std::vector<double> v;
        v.reserve(param_count());
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto& g = grads.at(gamma_name(k));
            const auto& b = grads.at(beta_name(k));
            v.insert(v.end(), g.data().begin(), g.data().end());
            v.insert(v.end(), b.data().begin(), b.data().end());
        }
        return Tensor::vec(std::move(v));
    }

    bool operator==(const LnState&) const = default;
};

struct BlockParams {
    Tensor qkv_w, qkv_b;   // [d×3d], [3d]
    Tensor proj_w, proj_b; // [d×d], [d]
    Tensor fc1_w, fc1_b;   // [d×h], [h]
    Tensor fc2_w, fc2_b;   // [h×d], [d]
    bool operator==(const BlockParams&) const = default;
};

struct VitParams {
    VitConfig cfg;
    Tensor patch_embed; // E, [(P²·C)×d]
    Tensor cls;         // [d]
    Tensor pos;         // [(1+e)×d]
    std::vector<BlockParams> blocks;
    Tensor head_w; // [d×K]
    Tensor head_b; // [K]
    LnState ln;

    /// Visits every non-LayerNorm tensor in a fixed order.
    template <typename F>
    void for_each_frozen(F&& f) const {
        f("patch_embed", patch_embed);
        f("cls", cls);
        f("pos", pos);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto p = "blocks." + std::to_string(i) + ".";
            const auto& b = blocks[i];
            f(p + "qkv.weight", b.qkv_w);
            f(p + "qkv.bias", b.qkv_b);
            f(p + "proj.weight", b.proj_w);
            f(p + "proj.bias", b.proj_b);
            f(p + "fc1.weight", b.fc1_w);
            f(p + "fc1.bias", b.fc1_b);
            f(p + "fc2.weight", b.fc2_w);
            f(p + "fc2.bias", b.fc2_b);
        }
        f("head.weight", head_w);
        f("head.bias", head_b);
    }

    template <typename F>
    void for_each_frozen_mut(F&& f) {
        std::as_const(*this).for_each_frozen(
            [&](const std::string& n, const Tensor& t) { f(n, const_cast<Tensor&>(t)); });
    }

    bool operator==(const VitParams&) const = default;
};

/// SHA-256 over the raw f64 bytes of every non-LayerNorm backbone tensor.
inline std::string frozen_digest(const VitParams& p) {
    Bytes buf;
    p.for_each_frozen([&](const std::string& name, const Tensor& t) {
        buf.insert(buf.end(), name.begin(), name.end());
        const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data().data());
        buf.insert(buf.end(), raw, raw + t.size() * sizeof(double));
    });
    return to_hex(sha256(buf));
}

inline std::string ln_digest(const LnState& ln) {
    const Tensor f = ln.flatten();
    const auto* raw = reinterpret_cast<const std::uint8_t*>(f.data().data());
    return to_hex(sha256(raw, f.size() * sizeof(double)));
}

inline VitParams init_backbone(const VitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto uniform = [&](Shape s, std::size_t fan_in) {
        Tensor t(std::move(s));
        const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-a, a);
        for (auto& v : t.data()) v = u(rng);
        return t;
    };
    auto normal = [&](Shape s, double sd) {
        Tensor t(std::move(s));
        std::normal_distribution<double> n(0.0, sd);
        for (auto& v : t.data()) v = n(rng);
        return t;
    };
    const std::size_t d = cfg.embed_dim, h = cfg.mlp_hidden();
    VitParams p;
    p.cfg = cfg;
    p.patch_embed = uniform({cfg.patch_dim(), d}, cfg.patch_dim());
    p.cls = normal({d}, 0.02);
    p.pos = normal({1 + cfg.num_patches(), d}, 0.02);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        BlockParams b;
        b.qkv_w = uniform({d, 3 * d}, d);
        b.qkv_b = Tensor({3 * d});
        b.proj_w = uniform({d, d}, d);
        b.proj_b = Tensor({d});
        b.fc1_w = uniform({d, h}, d);
        b.fc1_b = Tensor({h});
        b.fc2_w = uniform({h, d}, h);
        b.fc2_b = Tensor({d});
        p.blocks.push_back(std::move(b));
    }
    p.head_w = uniform({d, cfg.classes}, d);
    p.head_b = Tensor({cfg.classes});
    for (std::size_t k = 0; k < cfg.num_layer_norms(); ++k) p.ln.layers.push_back({Tensor({d}, 1.0), Tensor({d})});
    return p;
}

/// Non-overlapping P×P patches in row-major grid order, each flattened (row, col, channel).
inline Tensor patchify(const Tensor& image, const VitConfig& cfg) {
    const std::size_t H = cfg.image_size, C = cfg.channels, P = cfg.patch_size;
    if (image.size() != H * H * C)
        throw DimensionError("patchify: image " + shape_str(image.shape()) + " does not match " + std::to_string(H) +
                             "x" + std::to_string(H) + "x" + std::to_string(C));
    const std::size_t g = H / P;
    Tensor out({g * g, P * P * C});
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
            auto dst = out.row(gy * g + gx);
            std::size_t o = 0;
            for (std::size_t y = 0; y < P; ++y)
                for (std::size_t x = 0; x < P; ++x)
                    for (std::size_t c = 0; c < C; ++c) dst[o++] = image[((gy * P + y) * H + gx * P + x) * C + c];
        }
    return out;
}

inline Tensor patchify_batch(std::span<const Tensor> images, const VitConfig& cfg) {
    if (images.empty()) throw DomainError("empty image batch");
    const std::size_t e = cfg.num_patches(), pd = cfg.patch_dim();
    Tensor out({images.size() * e, pd});
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Tensor p = patchify(images[b], cfg);
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + b * e * pd);
    }
    return out;
}

/// Patch embeddings X_p·E of one image, [e×d].
inline Tensor patch_embeddings(const VitParams& p, const Tensor& image) {
    return apply_linear(patchify(image, p.cfg), p.patch_embed);
}

/// Which parameter groups get watched (and so differentiated) on a graph.
struct Trainable {
    bool backbone = false; // every non-LN backbone tensor (and the base head)
    bool ln = false;
    bool module = false; // PET payload and module head
};

struct BoundVit {
    struct Block {
        Var qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    struct Adapter {
        Var down_w, down_b, up_w, up_b;
    };
    Var patch_embed, cls, pos, head_w, head_b;
    std::vector<Block> blocks;
    std::vector<std::pair<Var, Var>> ln;
    std::optional<Var> prompts;
    std::vector<std::array<Adapter, 2>> adapters; // [layer][attn|mlp]
};

/// Places parameters on the graph; module (may be null) supplies prompts/adapters and the head.
inline BoundVit bind(Graph& g, const VitParams& p, const LnState& ln, const ModuleRecord* module, Trainable tr) {
    if (ln.layers.size() != p.cfg.num_layer_norms()) throw DimensionError("LnState has wrong number of layers");
    auto put = [&](bool train, const std::string& name, const Tensor& t) {
        return train ? g.watch(name, t) : g.constant(t);
    };
    BoundVit b;
    b.patch_embed = put(tr.backbone, "patch_embed", p.patch_embed);
    b.cls = put(tr.backbone, "cls", p.cls);
    b.pos = put(tr.backbone, "pos", p.pos);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const auto pre = "blocks." + std::to_string(i) + ".";
        const auto& s = p.blocks[i];
        b.blocks.push_back({put(tr.backbone, pre + "qkv.weight", s.qkv_w), put(tr.backbone, pre + "qkv.bias", s.qkv_b),
                            put(tr.backbone, pre + "proj.weight", s.proj_w),
                            put(tr.backbone, pre + "proj.bias", s.proj_b),
                            put(tr.backbone, pre + "fc1.weight", s.fc1_w), put(tr.backbone, pre + "fc1.bias", s.fc1_b),
                            put(tr.backbone, pre + "fc2.weight", s.fc2_w),
                            put(tr.backbone, pre + "fc2.bias", s.fc2_b)});
    }
    for (std::size_t k = 0; k < ln.layers.size(); ++k) {
        if (ln.layers[k].gamma.size() != p.cfg.embed_dim || ln.layers[k].beta.size() != p.cfg.embed_dim)
            throw DimensionError("LnState layer " + std::to_string(k) + " has wrong width");
        b.ln.emplace_back(put(tr.ln, LnState::gamma_name(k), ln.layers[k].gamma),
                          put(tr.ln, LnState::beta_name(k), ln.layers[k].beta));
    }
    if (module) {
        const std::size_t d = p.cfg.embed_dim;
        if (module->head_weight.shape() != Shape{d, p.cfg.classes} || module->head_bias.size() != p.cfg.classes)
            throw DimensionError("module " + module->id + " head does not fit backbone");
        const std::size_t hyper = module->kind == ModuleKind::vpt ? module->prompt_len : module->bottleneck;
        const auto expected = expected_payload(module->kind, hyper, p.cfg);
        if (expected.size() != module->payload.size())
            throw DimensionError("module " + module->id + " payload does not fit backbone");
        for (std::size_t i = 0; i < expected.size(); ++i)
            if (module->payload[i].first != expected[i].first || module->payload[i].second.shape() != expected[i].second)
                throw DimensionError("module " + module->id + " tensor " + module->payload[i].first +
                                     " incompatible with backbone");
        b.head_w = put(tr.module, "head.weight", module->head_weight);
        b.head_b = put(tr.module, "head.bias", module->head_bias);
        if (module->kind == ModuleKind::vpt) {
            b.prompts = put(tr.module, "prompts", module->tensor("prompts"));
        } else {
            for (std::size_t l = 0; l < p.cfg.depth; ++l) {
                std::array<BoundVit::Adapter, 2> a;
                for (std::size_t s = 0; s < 2; ++s) {
                    auto nm = [&](const char* part) { return adapter_name(l, s, part); };
                    a[s] = {put(tr.module, nm("down.weight"), module->tensor(nm("down.weight"))),
                            put(tr.module, nm("down.bias"), module->tensor(nm("down.bias"))),
                            put(tr.module, nm("up.weight"), module->tensor(nm("up.weight"))),
                            put(tr.module, nm("up.bias"), module->tensor(nm("up.bias")))};
                }
                b.adapters.push_back(a);
            }
        }
    } else {
        b.head_w = put(tr.backbone, "head.weight", p.head_w);
        b.head_b = put(tr.backbone, "head.bias", p.head_b);
    }
    return b;
}

struct ForwardTrace {
    Var logits;          // [B×K]
    std::size_t seq_len; // tokens per sample entering the first block
};

/// Transformer forward over pre-patchified input [(B·e)×(P²·C)].
inline ForwardTrace forward_graph(Graph& g, const BoundVit& b, const VitConfig& cfg, const Tensor& patches,
                                  std::size_t batch) {
    using namespace ad;
    const double eps = cfg.ln_eps;
    Var x = assemble_tokens(matmul(g.constant(patches), b.patch_embed), b.cls, b.pos, b.prompts, batch);
    const std::size_t seq = x.value().rows() / batch;
    auto adapt = [&](Var h, const BoundVit::Adapter& a) {
        return add(h, linear(relu(linear(h, a.down_w, a.down_b)), a.up_w, a.up_b));
    };
    for (std::size_t i = 0; i < b.blocks.size(); ++i) {
        const auto& bl = b.blocks[i];
        Var h = layer_norm_rows(x, b.ln[2 * i].first, b.ln[2 * i].second, eps);
        Var attn = linear(self_attention(linear(h, bl.qkv_w, bl.qkv_b), batch, seq, cfg.heads), bl.proj_w, bl.proj_b);
        if (!b.adapters.empty()) attn = adapt(attn, b.adapters[i][0]);
        x = add(x, attn);
        h = layer_norm_rows(x, b.ln[2 * i + 1].first, b.ln[2 * i + 1].second, eps);
        Var mlp = linear(gelu(linear(h, bl.fc1_w, bl.fc1_b)), bl.fc2_w, bl.fc2_b);
        if (!b.adapters.empty()) mlp = adapt(mlp, b.adapters[i][1]);
        x = add(x, mlp);
    }
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t i = 0; i < batch; ++i) cls_rows[i] = i * seq;
    Var c = gather_rows(x, std::move(cls_rows));
    c = layer_norm_rows(c, b.ln.back().first, b.ln.back().second, eps);
    return {linear(c, b.head_w, b.head_b), seq};
}

/// Pre-softmax logits [B×K] for a batch, using the supplied LayerNorm state.
inline Tensor forward_logits(const VitParams& p, const ModuleRecord* module, const LnState& ln,
                             std::span<const Tensor> images) {
    Graph g;
    BoundVit b = bind(g, p, ln, module, {});
    return forward_graph(g, b, p.cfg, patchify_batch(images, p.cfg), images.size()).logits.value();
}

/// Single-image logits [K] using the backbone's own LayerNorm state.
inline Tensor forward(const VitParams& p, const ModuleRecord* module, const Tensor& image) {
    return forward_logits(p, module, p.ln, std::span<const Tensor>(&image, 1)).reshaped({p.cfg.classes});
}

/// Fraction of argmax-correct predictions; batched for speed, deterministic.
inline double evaluate(const VitParams& p, const ModuleRecord* module, const LnState& ln, const Dataset& ds,
                       std::size_t chunk = 64) {
    if (ds.empty()) throw DomainError("evaluate: empty dataset");
    std::size_t correct = 0;
    for (std::size_t s = 0; s < ds.size(); s += chunk) {
        const std::size_t e = std::min(ds.size(), s + chunk);
        const Tensor z = forward_logits(p, module, ln, std::span<const Tensor>(ds.images).subspan(s, e - s));
        for (std::size_t i = s; i < e; ++i)
            if (argmax(z.row(i - s)) == ds.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline double evaluate(const VitParams& p, const ModuleRecord* module, const Dataset& ds) {
    return evaluate(p, module, p.ln, ds);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainLog {
    std::vector<double> epoch_loss;
};

/// Mini-batch loop with per-epoch shuffling and warm-up + cosine schedule.
/// loss_fn(graph, sample indices) must watch exactly the names in `params`.
template <typename LossFn>
void train_loop(std::vector<std::pair<std::string, Tensor*>> params, const OptimizerSpec& spec, std::size_t n,
                std::uint64_t seed, LossFn&& loss_fn, TrainLog* log = nullptr) {
    if (n == 0) throw DomainError("training on an empty dataset");
    if (spec.batch_size == 0) throw DomainError("batch_size must be positive");
    std::vector<Tensor*> ptrs;
    for (auto& pr : params) ptrs.push_back(pr.second);
    Optimizer opt(spec, ptrs);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t steps_per_epoch = (n + spec.batch_size - 1) / spec.batch_size;
    const std::size_t total = steps_per_epoch * spec.epochs;
    const std::size_t warm = std::min(total, steps_per_epoch * spec.warmup_epochs);
    std::size_t step = 0;
    for (std::size_t ep = 0; ep < spec.epochs; ++ep) {
        std::shuffle(order.begin(), order.end(), rng);
        double ep_loss = 0.0;
        for (std::size_t s = 0; s < n; s += spec.batch_size) {
            std::vector<std::size_t> idx(order.begin() + s, order.begin() + std::min(n, s + spec.batch_size));
            Graph g;
            Var loss = loss_fn(g, idx);
            if (!std::isfinite(loss.value().item())) throw NumericError("training diverged (non-finite loss)");
            g.backward(loss);
            std::vector<Tensor> grads;
            for (auto& [name, t] : params) grads.push_back(g.gradient_of(name));
            opt.step(grads, cosine_lr(spec.lr, step++, warm, total));
            ep_loss += loss.value().item() * static_cast<double>(idx.size());
        }
        if (log) log->epoch_loss.push_back(ep_loss / static_cast<double>(n));
    }
    for (auto& [name, t] : params)
        if (!t->all_finite()) throw NumericError("training diverged (non-finite parameter " + name + ")");
}

inline std::vector<Tensor> gather_images(const Dataset& ds, const std::vector<std::size_t>& idx) {
    std::vector<Tensor> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(ds.images[i]);
    return out;
}

inline std::vector<std::size_t> gather_labels(const Dataset& ds, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(ds.labels[i]);
    return out;
}

inline void check_labels(const Dataset& ds, std::size_t classes) {
    if (ds.empty()) throw DomainError("dataset is empty");
    for (auto l : ds.labels)
        if (l >= classes) throw DomainError("label " + std::to_string(l) + " out of range");
}

/// Trains every backbone parameter (LayerNorms included) from scratch with cross-entropy.
inline VitParams pretrain_backbone(const Dataset& data, const VitConfig& cfg, const OptimizerSpec& opt,
                                   std::uint64_t seed, TrainLog* log = nullptr) {
    check_labels(data, cfg.classes);
    VitParams p = init_backbone(cfg, seed);
    std::vector<std::pair<std::string, Tensor*>> params;
    p.for_each_frozen_mut([&](const std::string& n, Tensor& t) { params.emplace_back(n, &t); });
    for (std::size_t k = 0; k < p.ln.layers.size(); ++k) {
        params.emplace_back(LnState::gamma_name(k), &p.ln.layers[k].gamma);
        params.emplace_back(LnState::beta_name(k), &p.ln.layers[k].beta);
    }
    train_loop(
        params, opt, data.size(), seed ^ 0x9e3779b97f4a7c15ULL,
        [&](Graph& g, const std::vector<std::size_t>& idx) {
            const auto imgs = gather_images(data, idx);
            BoundVit b = bind(g, p, p.ln, nullptr, {.backbone = true, .ln = true});
            Var z = forward_graph(g, b, cfg, patchify_batch(imgs, cfg), imgs.size()).logits;
            return ad::cross_entropy(z, gather_labels(data, idx));
        },
        log);
    return p;
}

/// Trains only the module payload and its head on one source domain; the backbone is read-only.
inline ModuleRecord pretrain_source_module(const VitParams& p, ModuleKind kind, std::size_t hyper,
                                           const Dataset& source, const OptimizerSpec& opt, std::uint64_t seed,
                                           TrainLog* log = nullptr) {
    check_labels(source, p.cfg.classes);
    ModuleRecord r = make_module(kind, hyper, p.cfg, p.head_w, p.head_b, seed);
    r.domain_label = source.label;
    std::vector<std::pair<std::string, Tensor*>> params;
    for (auto& [n, t] : r.payload) params.emplace_back(n, &t);
    params.emplace_back("head.weight", &r.head_weight);
    params.emplace_back("head.bias", &r.head_bias);
    train_loop(
        params, opt, source.size(), seed ^ 0x5851f42d4c957f2dULL,
        [&](Graph& g, const std::vector<std::size_t>& idx) {
            const auto imgs = gather_images(source, idx);
            BoundVit b = bind(g, p, p.ln, &r, {.module = true});
            Var z = forward_graph(g, b, p.cfg, patchify_batch(imgs, p.cfg), imgs.size()).logits;
            return ad::cross_entropy(z, gather_labels(source, idx));
        },
        log);
    r.meta.source_accuracy = evaluate(p, &r, source);
    return r;
}

// ---------------------------------------------------------------------------
// Backbone checkpoint (container kind "backbone")
// ---------------------------------------------------------------------------

inline Bytes serialize_backbone(const VitParams& p, const std::string& id = "backbone") {
    Container c;
    c.id = id;
    c.kind = "backbone";
    c.hyper = p.cfg;
    p.for_each_frozen([&](const std::string& n, const Tensor& t) { c.tensors.push_back({n, t, DType::f32}); });
    for (std::size_t k = 0; k < p.ln.layers.size(); ++k) {
        c.tensors.push_back({LnState::gamma_name(k), p.ln.layers[k].gamma, DType::f32});
        c.tensors.push_back({LnState::beta_name(k), p.ln.layers[k].beta, DType::f32});
    }
    return encode_container(c);
}

inline VitParams deserialize_backbone(std::span<const std::uint8_t> bytes) {
    const Container c = decode_container(bytes);
    if (c.kind != "backbone") throw FormatError("container kind " + c.kind + " is not a backbone");
    VitConfig cfg;
    try {
        cfg = c.hyper.get<VitConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("backbone header: ") + e.what());
    }
    VitParams p = init_backbone(cfg, 0);
    auto load = [&](const std::string& n, Tensor& t) {
        const Tensor& src = c.tensor(n);
        if (src.shape() != t.shape())
            throw ShapeMismatchError("backbone tensor " + n + " " + shape_str(src.shape()) + ", expected " +
                                     shape_str(t.shape()));
        t = src;
    };
    p.for_each_frozen_mut(load);
    for (std::size_t k = 0; k < p.ln.layers.size(); ++k) {
        load(LnState::gamma_name(k), p.ln.layers[k].gamma);
        load(LnState::beta_name(k), p.ln.layers[k].beta);
    }
    return p;
}

/// Rounds every backbone tensor to f32, matching a checkpoint round trip.
inline VitParams quantized(VitParams p) {
    p.for_each_frozen_mut([](const std::string&, Tensor& t) { t = quantize_f32(std::move(t)); });
    for (auto& l : p.ln.layers) {
        l.gamma = quantize_f32(std::move(l.gamma));
        l.beta = quantize_f32(std::move(l.beta));
    }
    return p;
}

} // namespace pluto
