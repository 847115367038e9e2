// Dense row-major tensors and the plain (non-differentiable) kernels used
// throughout the library. All arithmetic is in double precision.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pluto {

/// Base class for every error raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not agree.
struct DimensionError : Error {
    using Error::Error;
};

/// Arguments outside an operation's domain (empty inputs, bad probabilities).
struct DomainError : Error {
    using Error::Error;
};

/// A NaN or Inf appeared where finite values were required.
struct NumericError : Error {
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    /// 1-D tensor from a list of values.
    static Tensor vec(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    static Tensor mat(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> d;
        d.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged rows in Tensor::mat");
            d.insert(d.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(d));
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    /// Rows/cols treat a rank-1 tensor as a single row.
    std::size_t rows() const { return rank() == 1 ? 1 : shape_.at(0); }
    std::size_t cols() const { return rank() == 1 ? shape_.at(0) : size() / std::max<std::size_t>(shape_.at(0), 1); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

    double item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const Tensor& o) const = default;

private:
    void check_shape() const {
        for (auto d : shape_)
            if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// x[n×a] · W[a×b] (+ b[b] broadcast over rows).
inline Tensor apply_linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
    if (w.rank() != 2 || x.cols() != w.dim(0))
        throw DimensionError("apply_linear: inner dimensions disagree, x " + shape_str(x.shape()) + " vs W " +
                             shape_str(w.shape()));
    const std::size_t n = x.rows(), a = w.dim(0), b = w.dim(1);
    if (bias && bias->size() != b)
        throw DimensionError("apply_linear: bias " + shape_str(bias->shape()) + " vs W " + shape_str(w.shape()));
    Tensor out({n, b});
    for (std::size_t i = 0; i < n; ++i) {
        double* o = out.data().data() + i * b;
        if (bias) std::copy(bias->data().begin(), bias->data().end(), o);
        const double* xi = x.data().data() + i * a;
        for (std::size_t k = 0; k < a; ++k) {
            const double xv = xi[k];
            if (xv == 0.0) continue;
            const double* wk = w.data().data() + k * b;
            for (std::size_t j = 0; j < b; ++j) o[j] += xv * wk[j];
        }
    }
    return out;
}

inline Tensor apply_linear(const Tensor& x, const Tensor& w, const Tensor& bias) { return apply_linear(x, w, &bias); }

inline Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

/// Numerically stable softmax over a flat vector.
inline std::vector<double> softmax(std::span<const double> z) {
    if (z.empty()) throw DomainError("softmax of empty input");
    const double m = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
    for (auto& v : p) v /= s;
    return p;
}

inline Tensor softmax(const Tensor& z) { return Tensor(z.shape(), softmax(z.data())); }

/// Row-wise softmax of a 2-D tensor.
inline Tensor softmax_rows(const Tensor& z) {
    Tensor out(z.shape());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto p = softmax(z.row(r));
        std::copy(p.begin(), p.end(), out.row(r).begin());
    }
    return out;
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.size() == 0) throw DomainError("layer_norm of empty input");
    if (gamma.size() != x.size() || beta.size() != x.size())
        throw DimensionError("layer_norm: x " + shape_str(x.shape()) + ", gamma " + shape_str(gamma.shape()) +
                             ", beta " + shape_str(beta.shape()));
    if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
    const double d = static_cast<double>(x.size());
    double mu = 0.0;
    for (double v : x.data()) mu += v;
    mu /= d;
    double var = 0.0;
    for (double v : x.data()) var += (v - mu) * (v - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gamma[i] * (x[i] - mu) * inv + beta[i];
    return out;
}

/// Column-wise maximum over the rows of X[e×d].
inline Tensor max_pool_rows(const Tensor& x) {
    if (x.size() == 0 || x.rows() == 0) throw DomainError("max_pool_rows of empty sequence");
    const std::size_t d = x.cols();
    Tensor out({d}, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) out[c] = std::max(out[c], x.at(r, c));
    return out;
}

/// -sum p ln p with 0 ln 0 := 0. Requires a probability vector.
inline double shannon_entropy(std::span<const double> p) {
    if (p.empty()) throw DomainError("entropy of empty distribution");
    double sum = 0.0, h = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw DomainError("entropy: negative or NaN probability");
        sum += v;
        if (v > 0.0) h -= v * std::log(v);
    }
    if (std::abs(sum - 1.0) > 1e-6) throw DomainError("entropy: probabilities sum to " + std::to_string(sum));
    return std::clamp(h, 0.0, std::log(static_cast<double>(p.size())));
}

inline double shannon_entropy(const Tensor& p) { return shannon_entropy(p.data()); }

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace pluto
