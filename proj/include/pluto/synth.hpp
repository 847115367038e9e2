// Procedural glyph images, parameterised corruption shifts, mixture targets,
// and a Monte Carlo check of the source-mixture loss bound.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pluto/dataset.hpp"

namespace pluto {

inline constexpr std::size_t kSynthImage = 16;
inline constexpr std::size_t kSynthClasses = 10;

enum class Corruption { identity, gaussian_noise, shot_noise, blur, contrast, brightness, pixelate, rotation };

NLOHMANN_JSON_SERIALIZE_ENUM(Corruption, {{Corruption::identity, "identity"},
                                          {Corruption::gaussian_noise, "gaussian_noise"},
                                          {Corruption::shot_noise, "shot_noise"},
                                          {Corruption::blur, "blur"},
                                          {Corruption::contrast, "contrast"},
                                          {Corruption::brightness, "brightness"},
                                          {Corruption::pixelate, "pixelate"},
                                          {Corruption::rotation, "rotation"}})

inline std::string to_string(Corruption c) { return nlohmann::json(c).get<std::string>(); }

inline Corruption corruption_from_string(const std::string& s) {
    static const std::array<const char*, 8> names{"identity", "gaussian_noise", "shot_noise", "blur",
                                                  "contrast", "brightness",     "pixelate",   "rotation"};
    for (std::size_t i = 0; i < names.size(); ++i)
        if (s == names[i]) return static_cast<Corruption>(i);
    throw DomainError("unknown corruption: " + s);
}

struct DomainSpec {
    Corruption corruption = Corruption::identity;
    int severity = 0;
    std::uint64_t seed = 0;

    std::string label() const {
        if (severity == 0 || corruption == Corruption::identity) return "identity";
        return to_string(corruption) + ":sev" + std::to_string(severity);
    }
    bool operator==(const DomainSpec&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DomainSpec, corruption, severity, seed)

namespace synth_detail {

struct Seg {
    double x0, y0, x1, y1;
};

inline double seg_dist(double px, double py, const Seg& s) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double l2 = dx * dx + dy * dy;
    double t = l2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / l2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
    return std::sqrt(ex * ex + ey * ey);
}

/// Distance from (x, y) in glyph space [-1,1]² to the stroke skeleton of a class.
inline double glyph_dist(std::size_t cls, double x, double y) {
    static const std::vector<std::vector<Seg>> shapes = {
        {{-0.7, 0, 0.7, 0}},                                                             // horizontal bar
        {{0, -0.7, 0, 0.7}},                                                             // vertical bar
        {{-0.6, -0.6, 0.6, 0.6}},                                                        // diagonal
        {{-0.6, 0.6, 0.6, -0.6}},                                                        // anti-diagonal
        {{-0.7, 0, 0.7, 0}, {0, -0.7, 0, 0.7}},                                          // plus
        {{-0.6, -0.6, 0.6, 0.6}, {-0.6, 0.6, 0.6, -0.6}},                                // cross
        {{-0.6, -0.6, 0.6, -0.6}, {0.6, -0.6, 0.6, 0.6}, {0.6, 0.6, -0.6, 0.6}, {-0.6, 0.6, -0.6, -0.6}}, // square
        {},                                                                              // ring
        {{0, -0.7, 0.7, 0.6}, {0.7, 0.6, -0.7, 0.6}, {-0.7, 0.6, 0, -0.7}},              // triangle
        {{-0.7, -0.6, 0.7, -0.6}, {0, -0.6, 0, 0.7}},                                    // T
    };
    if (cls == 7) return std::abs(std::sqrt(x * x + y * y) - 0.6);
    double d = 1e9;
    for (const auto& s : shapes[cls]) d = std::min(d, seg_dist(x, y, s));
    return d;
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

} // namespace synth_detail

/// Renders one glyph of class cls with random pose, stroke width and intensity.
inline Tensor render_glyph(std::size_t cls, std::mt19937_64& rng) {
    using namespace synth_detail;
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const double scale = 0.75 + 0.25 * U(rng);
    const double angle = (U(rng) - 0.5) * 2.0 * 12.0 * std::numbers::pi / 180.0;
    const double tx = (U(rng) - 0.5) * 0.3, ty = (U(rng) - 0.5) * 0.3;
    const double thick = 0.10 + 0.08 * U(rng);
    const double amp = 0.75 + 0.25 * U(rng);
    std::normal_distribution<double> noise(0.0, 0.02);
    const double c = std::cos(angle), s = std::sin(angle);
    const std::size_t H = kSynthImage;
    Tensor img({H, H, 1});
    for (std::size_t py = 0; py < H; ++py)
        for (std::size_t px = 0; px < H; ++px) {
            const double u = (static_cast<double>(px) + 0.5) / H * 2.0 - 1.0 - tx;
            const double v = (static_cast<double>(py) + 0.5) / H * 2.0 - 1.0 - ty;
            const double gx = (c * u + s * v) / scale, gy = (-s * u + c * v) / scale;
            const double d = glyph_dist(cls, gx, gy) * scale;
            const double ink = clamp01(1.0 - (d - thick) / 0.1);
            img[py * H + px] = clamp01(amp * ink + noise(rng));
        }
    return img;
}

/// n images over kSynthClasses classes, labels assigned round-robin then shuffled.
inline Dataset make_base_dataset(std::size_t n, std::uint64_t seed) {
    if (n < kSynthClasses) throw DomainError("make_base_dataset: need at least one sample per class");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % kSynthClasses;
    std::shuffle(labels.begin(), labels.end(), rng);
    Dataset ds;
    ds.label = "identity";
    for (auto l : labels) {
        ds.images.push_back(render_glyph(l, rng));
        ds.labels.push_back(l);
    }
    return ds;
}

namespace synth_detail {

inline Tensor box_resample(const Tensor& img, std::size_t block) {
    const std::size_t H = img.dim(0), W = img.dim(1);
    Tensor out = img;
    for (std::size_t by = 0; by < H; by += block)
        for (std::size_t bx = 0; bx < W; bx += block) {
            double s = 0.0;
            std::size_t cnt = 0;
            for (std::size_t y = by; y < std::min(H, by + block); ++y)
                for (std::size_t x = bx; x < std::min(W, bx + block); ++x, ++cnt) s += img[y * W + x];
            for (std::size_t y = by; y < std::min(H, by + block); ++y)
                for (std::size_t x = bx; x < std::min(W, bx + block); ++x) out[y * W + x] = s / cnt;
        }
    return out;
}

inline Tensor gaussian_blur(const Tensor& img, double sigma) {
    const std::size_t H = img.dim(0), W = img.dim(1);
    const int r = static_cast<int>(std::ceil(2.0 * sigma));
    std::vector<double> k(2 * r + 1);
    double ks = 0.0;
    for (int i = -r; i <= r; ++i) ks += (k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma)));
    for (auto& v : k) v /= ks;
    auto at = [&](const Tensor& t, long y, long x) {
        y = std::clamp<long>(y, 0, static_cast<long>(H) - 1);
        x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
        return t[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
    };
    Tensor tmp = img, out = img;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[i + r] * at(img, static_cast<long>(y), static_cast<long>(x) + i);
            tmp[y * W + x] = s;
        }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[i + r] * at(tmp, static_cast<long>(y) + i, static_cast<long>(x));
            out[y * W + x] = s;
        }
    return out;
}

inline Tensor rotate(const Tensor& img, double degrees) {
    const std::size_t H = img.dim(0), W = img.dim(1);
    const double a = degrees * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
    const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
    Tensor out(img.shape());
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double u = c * (x - cx) + s * (y - cy) + cx;
            const double v = -s * (x - cx) + c * (y - cy) + cy;
            const double fx = std::floor(u), fy = std::floor(v);
            double acc = 0.0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const double sx = fx + dx, sy = fy + dy;
                    if (sx < 0 || sy < 0 || sx >= W || sy >= H) continue;
                    const double w = (1.0 - std::abs(u - sx)) * (1.0 - std::abs(v - sy));
                    acc += w * img[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
                }
            out[y * W + x] = acc;
        }
    return out;
}

} // namespace synth_detail

/// Applies a corruption at the given severity; deterministic in (image, spec).
/// Severity 0 returns the input unchanged.
inline Tensor corrupt(const Tensor& image, const DomainSpec& spec) {
    using namespace synth_detail;
    if (spec.severity < 0 || spec.severity > 5) throw DomainError("corrupt: severity must be in 0..5");
    if (spec.severity == 0 || spec.corruption == Corruption::identity) return image;
    if (image.rank() != 3 || image.dim(2) != 1) throw DimensionError("corrupt: expects H×W×1 images");
    const auto s = static_cast<std::size_t>(spec.severity - 1);
    std::mt19937_64 rng(mix(spec.seed, 0x51ed27));
    Tensor out = image;
    switch (spec.corruption) {
    case Corruption::gaussian_noise: {
        static constexpr double sd[] = {0.05, 0.10, 0.18, 0.26, 0.36};
        std::normal_distribution<double> n(0.0, sd[s]);
        for (auto& v : out.data()) v += n(rng);
        break;
    }
    case Corruption::shot_noise: {
        static constexpr double lam[] = {60, 25, 12, 6, 3};
        for (auto& v : out.data()) {
            std::poisson_distribution<int> p(std::max(v, 0.0) * lam[s]);
            v = p(rng) / lam[s];
        }
        break;
    }
    case Corruption::blur: {
        static constexpr double sigma[] = {0.6, 0.9, 1.3, 1.7, 2.2};
        out = gaussian_blur(image, sigma[s]);
        break;
    }
    case Corruption::contrast: {
        static constexpr double c[] = {0.7, 0.5, 0.35, 0.25, 0.15};
        double mu = 0.0;
        for (double v : image.data()) mu += v;
        mu /= static_cast<double>(image.size());
        for (auto& v : out.data()) v = (v - mu) * c[s] + mu;
        break;
    }
    case Corruption::brightness: {
        static constexpr double b[] = {0.1, 0.2, 0.3, 0.4, 0.5};
        for (auto& v : out.data()) v += b[s];
        break;
    }
    case Corruption::pixelate: {
        static constexpr std::size_t block[] = {2, 2, 3, 4, 4};
        static constexpr double alpha[] = {0.5, 1.0, 1.0, 0.75, 1.0};
        const Tensor px = box_resample(image, block[s]);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - alpha[s]) * image[i] + alpha[s] * px[i];
        break;
    }
    case Corruption::rotation: {
        static constexpr double deg[] = {8, 15, 22, 30, 40};
        const double sign = (rng() & 1) ? 1.0 : -1.0;
        out = rotate(image, sign * deg[s]);
        break;
    }
    case Corruption::identity:
        break;
    }
    for (auto& v : out.data()) v = clamp01(v);
    return out;
}

/// Corrupts every image of a dataset; per-image randomness derives from (spec.seed, index).
inline Dataset make_domain(const Dataset& base, const DomainSpec& spec) {
    Dataset out;
    out.label = spec.label();
    out.labels = base.labels;
    out.images.reserve(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        DomainSpec per = spec;
        per.seed = synth_detail::mix(spec.seed, i);
        out.images.push_back(corrupt(base.images[i], per));
    }
    return out;
}

/// Ground-truth labels of a target stream. Only evaluation code reads them.
class HiddenLabels {
public:
    HiddenLabels() = default;
    explicit HiddenLabels(std::vector<std::size_t> l) : labels_(std::move(l)) {}
    const std::vector<std::size_t>& reveal_for_evaluation() const noexcept { return labels_; }
    std::size_t size() const noexcept { return labels_.size(); }

private:
    std::vector<std::size_t> labels_;
};

struct TargetStream {
    std::vector<Tensor> images;
    HiddenLabels labels;
    std::vector<std::size_t> source_domain; // which mixture component each sample came from
};

inline void check_simplex(std::span<const double> w, const char* what, double tol = 1e-9) {
    if (w.empty()) throw DomainError(std::string(what) + ": empty weight vector");
    double s = 0.0;
    for (double v : w) {
        if (!(v >= 0.0)) throw DomainError(std::string(what) + ": negative or NaN weight");
        s += v;
    }
    if (std::abs(s - 1.0) > tol) throw DomainError(std::string(what) + ": weights sum to " + std::to_string(s));
}

/// Draws n samples: component k with probability λ_k, then a uniform sample of domain k.
inline TargetStream make_mixture_target(const std::vector<Dataset>& domains, const std::vector<double>& lambdas,
                                        std::size_t n, std::uint64_t seed) {
    if (domains.size() != lambdas.size()) throw DimensionError("make_mixture_target: one lambda per domain");
    check_simplex(lambdas, "make_mixture_target", 1e-9);
    for (const auto& d : domains)
        if (d.empty()) throw DomainError("make_mixture_target: empty domain");
    std::mt19937_64 rng(seed);
    std::discrete_distribution<std::size_t> pick(lambdas.begin(), lambdas.end());
    TargetStream ts;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = pick(rng);
        std::uniform_int_distribution<std::size_t> u(0, domains[k].size() - 1);
        const std::size_t j = u(rng);
        ts.images.push_back(domains[k].images[j]);
        labels.push_back(domains[k].labels[j]);
        ts.source_domain.push_back(k);
    }
    ts.labels = HiddenLabels(std::move(labels));
    return ts;
}

// ---------------------------------------------------------------------------
// Mixture-of-sources bound, checked by Monte Carlo on 1-D Gaussian problems
// ---------------------------------------------------------------------------

/// Two-class 1-D source: y ~ Bernoulli(prior1), x | y ~ N(mu_y, sigma²).
struct GaussianSource {
    double prior1 = 0.5;
    double mu0 = -1.0;
    double mu1 = 1.0;
    double sigma = 1.0;

    double density(double x) const {
        auto n = [&](double mu) {
            const double z = (x - mu) / sigma;
            return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
        };
        return prior1 * n(mu1) + (1.0 - prior1) * n(mu0);
    }

    /// Bayes-optimal P(y = 1 | x); the log-loss minimiser for this source.
    double posterior1(double x) const {
        auto n = [&](double mu) {
            const double z = (x - mu) / sigma;
            return std::exp(-0.5 * z * z);
        };
        const double a = prior1 * n(mu1), b = (1.0 - prior1) * n(mu0);
        return a + b > 0 ? a / (a + b) : prior1;
    }
};

struct BoundReport {
    double lhs = 0.0;  // loss of the density-ratio target predictor
    double rhs = 0.0;  // smallest single-source loss
    double se = 0.0;   // standard error of the paired difference lhs − rhs
    std::size_t best_source = 0;
    std::vector<double> source_losses;
    bool holds = false;
};

inline double log_loss(double p1, std::size_t y) {
    const double p = std::clamp(y ? p1 : 1.0 - p1, 1e-15, 1.0);
    return -std::log(p);
}

/// Monte Carlo estimate of L(Q_T, θ_T) against min_j L(Q_T, θ_S^j), with
/// θ_T(x) = Σ_k λ_k Q_k(x) θ_k(x) / Σ_j λ_j Q_j(x). Holds when lhs ≤ rhs + 3·SE.
inline BoundReport mixture_bound_oracle(const std::vector<GaussianSource>& sources, const std::vector<double>& lambdas,
                                        std::size_t draws, std::uint64_t seed) {
    if (sources.empty() || sources.size() != lambdas.size())
        throw DimensionError("mixture_bound_oracle: one lambda per source");
    check_simplex(lambdas, "mixture_bound_oracle");
    const std::size_t N = sources.size();
    std::mt19937_64 rng(seed);
    std::discrete_distribution<std::size_t> pick(lambdas.begin(), lambdas.end());
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<double> t_loss(draws);
    std::vector<std::vector<double>> s_loss(N, std::vector<double>(draws));
    for (std::size_t i = 0; i < draws; ++i) {
        const auto& src = sources[pick(rng)];
        const std::size_t y = U(rng) < src.prior1 ? 1 : 0;
        std::normal_distribution<double> nd(y ? src.mu1 : src.mu0, src.sigma);
        const double x = nd(rng);
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
            const double q = lambdas[k] * sources[k].density(x);
            const double th = sources[k].posterior1(x);
            num += q * th;
            den += q;
            s_loss[k][i] = log_loss(th, y);
        }
        t_loss[i] = log_loss(den > 0 ? num / den : 0.5, y);
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    BoundReport r;
    r.lhs = mean(t_loss);
    for (std::size_t k = 0; k < N; ++k) r.source_losses.push_back(mean(s_loss[k]));
    r.best_source = static_cast<std::size_t>(
        std::min_element(r.source_losses.begin(), r.source_losses.end()) - r.source_losses.begin());
    r.rhs = r.source_losses[r.best_source];
    double ss = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
        const double dlt = t_loss[i] - s_loss[r.best_source][i] - (r.lhs - r.rhs);
        ss += dlt * dlt;
    }
    r.se = draws > 1 ? std::sqrt(ss / static_cast<double>(draws - 1) / static_cast<double>(draws)) : 0.0;
    r.holds = r.lhs <= r.rhs + 3.0 * r.se;
    return r;
}

/// Random two-source configuration with λ = [0.5, 0.5] and 10⁵ draws.
inline BoundReport mixture_bound_oracle(std::uint64_t seed, std::size_t draws = 100000) {
    std::mt19937_64 rng(synth_detail::mix(seed, 0xF00D));
    std::uniform_real_distribution<double> mu(-3.0, 3.0), sd(0.5, 2.0), pr(0.2, 0.8);
    std::vector<GaussianSource> src(2);
    for (auto& s : src) {
        s.prior1 = pr(rng);
        s.mu0 = mu(rng);
        s.mu1 = mu(rng);
        s.sigma = sd(rng);
    }
    return mixture_bound_oracle(src, {0.5, 0.5}, draws, seed);
}

} // namespace pluto
