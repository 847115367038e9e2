#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace pluto;

namespace {

Tensor ramp_image(const VitConfig& c) {
    Tensor t({c.image_size, c.image_size, c.channels});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
    return t;
}

std::size_t tokens_entering_first_block(const VitParams& p, const ModuleRecord* m, std::size_t batch) {
    std::mt19937_64 rng(1);
    const auto imgs = testing::random_images(p.cfg, batch, rng);
    Graph g;
    BoundVit b = bind(g, p, p.ln, m, {});
    return forward_graph(g, b, p.cfg, patchify_batch(imgs, p.cfg), batch).seq_len;
}

} // namespace

TEST_CASE("patchify orders patches row-major and flattens each patch row-major") {
    VitConfig c = testing::tiny_config();
    const Tensor img = ramp_image(c); // value = y*8 + x
    const Tensor p = patchify(img, c);
    REQUIRE(p.shape() == Shape{4, 16});
    for (std::size_t gy = 0; gy < 2; ++gy)
        for (std::size_t gx = 0; gx < 2; ++gx)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 4; ++x)
                    CHECK(p.at(gy * 2 + gx, y * 4 + x) == static_cast<double>((gy * 4 + y) * 8 + gx * 4 + x));
    CHECK(p.at(1, 0) == 4.0);
    CHECK(p.at(2, 0) == 32.0);
    CHECK_THROWS_AS(patchify(Tensor({4, 4, 1}), c), DimensionError);
}

TEST_CASE("sequence length: plain, with prompts, with adapters") {
    const VitConfig c = testing::tiny_config();
    const VitParams p = init_backbone(c, 3);
    const std::size_t e = c.num_patches();
    CHECK(tokens_entering_first_block(p, nullptr, 2) == 1 + e);
    for (std::size_t prompts : {1u, 3u, 8u}) {
        const ModuleRecord m = make_module(ModuleKind::vpt, prompts, c, p.head_w, p.head_b, 4);
        CHECK(tokens_entering_first_block(p, &m, 3) == 1 + prompts + e);
    }
    const ModuleRecord a = make_module(ModuleKind::adapter, 4, c, p.head_w, p.head_b, 4);
    CHECK(tokens_entering_first_block(p, &a, 2) == 1 + e);
}

TEST_CASE("zero-initialised adapters leave the backbone output unchanged") {
    const VitConfig c = testing::tiny_config();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const VitParams p = init_backbone(c, seed);
        std::mt19937_64 rng(seed);
        const auto imgs = testing::random_images(c, 4, rng);
        const ModuleRecord a = make_module(ModuleKind::adapter, 3, c, p.head_w, p.head_b, seed + 10);
        const Tensor plain = forward_logits(p, nullptr, p.ln, imgs);
        const Tensor adapted = forward_logits(p, &a, p.ln, imgs);
        for (std::size_t i = 0; i < plain.size(); ++i) CHECK(std::abs(plain[i] - adapted[i]) <= 1e-12);
    }
}

TEST_CASE("forward is deterministic and batch-independent") {
    const VitConfig c = testing::tiny_config();
    const VitParams p = init_backbone(c, 8);
    CHECK(init_backbone(c, 8) == p);
    CHECK_FALSE(init_backbone(c, 9) == p);
    std::mt19937_64 rng(2);
    const auto imgs = testing::random_images(c, 5, rng);
    const Tensor all = forward_logits(p, nullptr, p.ln, imgs);
    CHECK(forward_logits(p, nullptr, p.ln, imgs) == all);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        const Tensor one = forward(p, nullptr, imgs[i]);
        for (std::size_t k = 0; k < c.classes; ++k) CHECK(std::abs(one[k] - all.at(i, k)) < 1e-12);
    }
}

TEST_CASE("LayerNorm state determines the output") {
    const VitConfig c = testing::tiny_config();
    const VitParams p = init_backbone(c, 8);
    std::mt19937_64 rng(4);
    const auto imgs = testing::random_images(c, 3, rng);
    const LnState other = testing::perturb(p.ln, rng);
    CHECK_FALSE(forward_logits(p, nullptr, other, imgs) == forward_logits(p, nullptr, p.ln, imgs));
    CHECK(p.ln.unflatten(p.ln.flatten()) == p.ln);
    CHECK(p.ln.param_count() == c.num_layer_norms() * 2 * c.embed_dim);
    CHECK(ln_digest(other) != ln_digest(p.ln));
}

TEST_CASE("evaluate") {
    const VitConfig c = testing::tiny_config();
    const VitParams p = init_backbone(c, 5);
    std::mt19937_64 rng(6);
    Dataset ds;
    ds.images = testing::random_images(c, 40, rng);
    const Tensor z = forward_logits(p, nullptr, p.ln, ds.images);
    for (std::size_t i = 0; i < ds.size(); ++i) ds.labels.push_back(argmax(z.row(i)));
    CHECK(evaluate(p, nullptr, ds) == 1.0);
    for (auto& l : ds.labels) l = (l + 1) % c.classes;
    CHECK(evaluate(p, nullptr, ds) == 0.0);
    ds.labels[0] = argmax(z.row(0));
    CHECK(evaluate(p, nullptr, p.ln, ds, 7) == Catch::Approx(1.0 / 40.0));
    CHECK_THROWS_AS(evaluate(p, nullptr, Dataset{}), DomainError);
}

TEST_CASE("pretraining learns the synthetic task and module training freezes the backbone") {
    const VitConfig c;
    const Dataset base = make_base_dataset(600, 1);
    const Dataset train = base.slice(0, 500), test = base.slice(500, 600);

    OptimizerSpec opt;
    opt.lr = 3e-3;
    opt.weight_decay = 1e-4;
    opt.epochs = 4;
    TrainLog log;
    const VitParams p = pretrain_backbone(train, c, opt, 1, &log);
    REQUIRE(log.epoch_loss.size() == 4);
    CHECK(log.epoch_loss.back() < log.epoch_loss.front());
    const double acc = evaluate(p, nullptr, test);
    INFO("held-out accuracy " << acc);
    CHECK(acc > 0.3);

    const std::string before = frozen_digest(p);
    const std::string ln_before = ln_digest(p.ln);
    const Dataset blurred = make_domain(train.slice(0, 200), {Corruption::blur, 3, 2});
    OptimizerSpec mopt;
    mopt.kind = OptimizerKind::sgd;
    mopt.lr = 0.1;
    mopt.epochs = 2;
    const ModuleRecord m = pretrain_source_module(p, ModuleKind::vpt, 4, blurred, mopt, 3);
    CHECK(frozen_digest(p) == before);
    CHECK(ln_digest(p.ln) == ln_before);
    CHECK(m.domain_label == blurred.label);
    CHECK(m.meta.source_accuracy == evaluate(p, &m, blurred));
}

TEST_CASE("backbone checkpoint round trip") {
    const VitConfig c = testing::tiny_config();
    const VitParams p = init_backbone(c, 12);
    const Bytes b = serialize_backbone(p, "bb");
    const VitParams q = deserialize_backbone(b);
    CHECK(q == quantized(p));
    CHECK(serialize_backbone(q, "bb") == b);
    CHECK(frozen_digest(deserialize_backbone(b)) == frozen_digest(q));

    Container other = decode_container(b);
    other.kind = "vpt";
    CHECK_THROWS_AS(deserialize_backbone(encode_container(other)), FormatError);
}
