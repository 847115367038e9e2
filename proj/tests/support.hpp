// Shared helpers for the test binaries.
#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include "pluto/pluto.hpp"

namespace testing {

using pluto::Tensor;

/// Central differences written out independently of the library's helper.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double a = f(x);
        x[i] = keep - h;
        const double b = f(x);
        x[i] = keep;
        g[i] = (a - b) / (2.0 * h);
    }
    return g;
}

inline double rel_error(std::span<const double> got, std::span<const double> want) {
    double d = 0.0, n = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i) {
        d += (got[i] - want[i]) * (got[i] - want[i]);
        n += want[i] * want[i];
    }
    return std::sqrt(d) / std::max(std::sqrt(n), 1e-12);
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Tensor random_tensor(pluto::Shape s, std::mt19937_64& rng, double sd = 1.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> n(0.0, sd);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

/// Small backbone used wherever a trained model is not needed.
inline pluto::VitConfig tiny_config() {
    pluto::VitConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.depth = 1;
    c.heads = 2;
    c.classes = 4;
    return c;
}

inline std::vector<Tensor> random_images(const pluto::VitConfig& c, std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor t({c.image_size, c.image_size, c.channels});
        for (auto& v : t.data()) v = u(rng);
        out.push_back(std::move(t));
    }
    return out;
}

inline pluto::LnState perturb(const pluto::LnState& ln, std::mt19937_64& rng, double sd = 0.2) {
    std::normal_distribution<double> n(0.0, sd);
    Tensor f = ln.flatten();
    for (auto& v : f.data()) v += n(rng);
    return ln.unflatten(f);
}

/// Backbone whose head is scaled up so predictions are confident enough to pass entropy filters.
inline pluto::VitParams sharp_backbone(const pluto::VitConfig& c, std::uint64_t seed, double head_scale) {
    pluto::VitParams p = pluto::init_backbone(c, seed);
    for (auto& v : p.head_w.data()) v *= head_scale;
    return p;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("pluto-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// Small serialisable module with a given id and domain label.
inline pluto::ModuleRecord small_module(const std::string& id, const std::string& label, std::uint64_t seed) {
    const pluto::VitConfig c = tiny_config();
    const pluto::VitParams p = pluto::init_backbone(c, 1);
    pluto::ModuleRecord r = pluto::make_module(pluto::ModuleKind::vpt, 2, c, p.head_w, p.head_b, seed);
    r.id = id;
    r.domain_label = label;
    return r;
}

} // namespace testing
