// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph records every operation in creation order, which is already a
// topological order, so the backward sweep is a single reverse pass that
// visits each node once. Leaves are either constants or watched parameters;
// only nodes that depend on a watched leaf carry gradients.
#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pluto/tensor.hpp"

namespace pluto {

class Graph;

struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
};

namespace kernel {

// out[n×m] += a[n×k] · b[k×m]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        double* o = out + i * m;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * m;
            for (std::size_t j = 0; j < m; ++j) o[j] += av * bp[j];
        }
    }
}

// out[n×k] += a[n×m] · b[k×m]^T
inline void gemm_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t m, std::size_t k) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a + i * m;
        double* o = out + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * m;
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += ai[j] * bp[j];
            o[p] += s;
        }
    }
}

// out[k×m] += a[n×k]^T · b[n×m]
inline void gemm_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* o = out + p * m;
            for (std::size_t j = 0; j < m; ++j) o[j] += av * bi[j];
        }
    }
}

} // namespace kernel

/// The recorded computation plus the set of watched parameters.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value) { return push(std::move(value), false, {}); }

    /// Registers a named parameter whose gradient will be reported.
    Var watch(const std::string& name, Tensor value) {
        if (watched_.count(name)) throw DomainError("parameter watched twice: " + name);
        Var v = push(std::move(value), true, {});
        watched_[name] = v.id;
        return v;
    }

    /// Records a derived node. needs_grad is inherited from the parents.
    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || nodes_[p.id].needs_grad;
        return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient accumulator for node id, zero-initialised on first use.
    Tensor& grad_acc(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse.
    void backward(Var loss) {
        if (loss.graph != this) throw DomainError("backward: loss belongs to another graph");
        if (nodes_[loss.id].value.size() != 1) throw DimensionError("backward: loss must be a scalar");
        if (!nodes_[loss.id].value.all_finite()) throw NumericError("backward: non-finite loss");
        for (auto& n : nodes_) n.grad = Tensor();
        grad_acc(loss.id)[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.backward || n.grad.size() == 0) continue;
            n.backward(*this, i);
        }
        done_ = true;
    }

    /// Gradient of a watched parameter; zero if the loss does not depend on it.
    Tensor gradient_of(const std::string& name) const {
        auto it = watched_.find(name);
        if (it == watched_.end()) throw DomainError("gradient requested for unwatched parameter: " + name);
        if (!done_) throw DomainError("gradient requested before backward");
        const auto& n = nodes_[it->second];
        return n.grad.size() ? n.grad : Tensor(n.value.shape());
    }

    std::map<std::string, Tensor> gradients() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, id] : watched_) out.emplace(name, gradient_of(name));
        return out;
    }

    const std::map<std::string, std::size_t>& watched() const noexcept { return watched_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        BackwardFn backward;
    };

    Var push(Tensor value, bool needs, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), Tensor(), needs, std::move(fn)});
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    std::map<std::string, std::size_t> watched_;
    bool done_ = false;
};

inline const Tensor& Var::value() const { return graph->value(id); }

/// Runs backward on loss and returns gradients for every watched parameter.
inline std::map<std::string, Tensor> gradient(Graph& g, Var loss) {
    g.backward(loss);
    return g.gradients();
}

/// Central finite differences (f(θ + h e_i) − f(θ − h e_i)) / 2h.
template <typename F>
Tensor finite_difference_gradient(F&& f, const Tensor& theta, double h = 1e-4) {
    if (!(h > 0.0)) throw DomainError("finite difference step must be positive");
    Tensor g(theta.shape());
    Tensor probe = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(static_cast<const Tensor&>(probe));
        probe[i] = orig - h;
        const double down = f(static_cast<const Tensor&>(probe));
        probe[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

namespace ad {

inline void same_graph(Var a, Var b) {
    if (a.graph != b.graph) throw DomainError("operands recorded on different graphs");
}

inline Var matmul(Var a, Var b) {
    same_graph(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (B.rank() != 2 || A.cols() != B.dim(0))
        throw DimensionError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    const std::size_t n = A.rows(), k = B.dim(0), m = B.dim(1);
    Tensor out({n, m});
    kernel::gemm_nn(A.data().data(), B.data().data(), out.data().data(), n, k, m);
    return a.graph->record(std::move(out), {a, b}, [a, b, n, k, m](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        if (g.needs_grad(a.id))
            kernel::gemm_nt(go.data().data(), g.value(b.id).data().data(), g.grad_acc(a.id).data().data(), n, m, k);
        if (g.needs_grad(b.id))
            kernel::gemm_tn(g.value(a.id).data().data(), go.data().data(), g.grad_acc(b.id).data().data(), n, k, m);
    });
}

/// x[n×m] + b[m] broadcast over rows.
inline Var add_bias(Var x, Var b) {
    same_graph(x, b);
    const Tensor& X = x.value();
    const Tensor& B = b.value();
    const std::size_t m = X.cols();
    if (B.size() != m) throw DimensionError("add_bias: " + shape_str(X.shape()) + " + " + shape_str(B.shape()));
    Tensor out = X;
    for (std::size_t r = 0; r < X.rows(); ++r)
        for (std::size_t c = 0; c < m; ++c) out.at(r, c) += B[c];
    return x.graph->record(std::move(out), {x, b}, [x, b, m](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        if (g.needs_grad(x.id)) {
            auto& gx = g.grad_acc(x.id);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        }
        if (g.needs_grad(b.id)) {
            auto& gb = g.grad_acc(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i % m] += go[i];
        }
    });
}

inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
    Var y = matmul(x, w);
    return b ? add_bias(y, *b) : y;
}

inline Var add(Var a, Var b) {
    same_graph(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        for (Var p : {a, b}) {
            if (!g.needs_grad(p.id)) continue;
            auto& gp = g.grad_acc(p.id);
            for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
        }
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    same_graph(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        if (g.needs_grad(a.id)) {
            auto& ga = g.grad_acc(a.id);
            const auto& bv = g.value(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (g.needs_grad(b.id)) {
            auto& gb = g.grad_acc(b.id);
            const auto& av = g.value(a.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

inline Var scale(Var a, double c) {
    Tensor out = a.value();
    for (auto& v : out.data()) v *= c;
    return a.graph->record(std::move(out), {a}, [a, c](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        auto& ga = g.grad_acc(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
    });
}

/// Multiplies by a constant tensor of the same shape (dropout masks).
inline Var mul_const(Var a, const Tensor& c) {
    require_same_shape(a.value(), c, "mul_const");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
    return a.graph->record(std::move(out), {a}, [a, c](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        auto& ga = g.grad_acc(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c[i] * go[i];
    });
}

inline Var relu(Var x) {
    Tensor out = pluto::relu(x.value());
    return x.graph->record(std::move(out), {x}, [x](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        const Tensor& xv = g.value(x.id);
        auto& gx = g.grad_acc(x.id);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (xv[i] > 0.0) gx[i] += go[i];
    });
}

/// tanh-approximated GELU.
inline Var gelu(Var x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
    }
    return x.graph->record(std::move(out), {x}, [x](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        const Tensor& xv = g.value(x.id);
        auto& gx = g.grad_acc(x.id);
        for (std::size_t i = 0; i < go.size(); ++i) {
            const double v = xv[i];
            const double u = c * (v + 0.044715 * v * v * v);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
            gx[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
    });
}

/// Row-wise layer normalisation of x[n×d] with affine gamma[d], beta[d].
inline Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
    same_graph(x, gamma);
    same_graph(x, beta);
    const Tensor& X = x.value();
    const std::size_t n = X.rows(), d = X.cols();
    if (gamma.value().size() != d || beta.value().size() != d)
        throw DimensionError("layer_norm_rows: x " + shape_str(X.shape()) + ", gamma " +
                             shape_str(gamma.value().shape()) + ", beta " + shape_str(beta.value().shape()));
    if (!(eps > 0.0)) throw DomainError("layer_norm_rows: eps must be positive");
    Tensor xhat(X.shape());
    std::vector<double> inv_std(n);
    Tensor out(X.shape());
    const auto& G = gamma.value();
    const auto& B = beta.value();
    for (std::size_t r = 0; r < n; ++r) {
        auto xr = X.row(r);
        double mu = 0.0;
        for (double v : xr) mu += v;
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (double v : xr) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            const double h = (xr[c] - mu) * inv_std[r];
            xhat.at(r, c) = h;
            out.at(r, c) = G[c] * h + B[c];
        }
    }
    return x.graph->record(std::move(out), {x, gamma, beta},
                           [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
                            d](Graph& g, std::size_t self) {
                               const Tensor& go = g.grad_acc(self);
                               if (g.needs_grad(gamma.id) || g.needs_grad(beta.id)) {
                                   const bool ng = g.needs_grad(gamma.id), nb = g.needs_grad(beta.id);
                                   Tensor* gg = ng ? &g.grad_acc(gamma.id) : nullptr;
                                   Tensor* gb = nb ? &g.grad_acc(beta.id) : nullptr;
                                   for (std::size_t r = 0; r < n; ++r)
                                       for (std::size_t c = 0; c < d; ++c) {
                                           const double o = go.at(r, c);
                                           if (gg) (*gg)[c] += o * xhat.at(r, c);
                                           if (gb) (*gb)[c] += o;
                                       }
                               }
                               if (!g.needs_grad(x.id)) return;
                               const Tensor& G = g.value(gamma.id);
                               auto& gx = g.grad_acc(x.id);
                               const double dd = static_cast<double>(d);
                               for (std::size_t r = 0; r < n; ++r) {
                                   double s1 = 0.0, s2 = 0.0;
                                   for (std::size_t c = 0; c < d; ++c) {
                                       const double dh = go.at(r, c) * G[c];
                                       s1 += dh;
                                       s2 += dh * xhat.at(r, c);
                                   }
                                   for (std::size_t c = 0; c < d; ++c) {
                                       const double dh = go.at(r, c) * G[c];
                                       gx.at(r, c) += inv_std[r] * (dh - s1 / dd - xhat.at(r, c) * s2 / dd);
                                   }
                               }
                           });
}

inline Var softmax_rows(Var z) {
    Tensor p = pluto::softmax_rows(z.value());
    return z.graph->record(p, {z}, [z](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        const Tensor& p = g.value(self);
        auto& gz = g.grad_acc(z.id);
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < p.cols(); ++c) dot += go.at(r, c) * p.at(r, c);
            for (std::size_t c = 0; c < p.cols(); ++c) gz.at(r, c) += p.at(r, c) * (go.at(r, c) - dot);
        }
    });
}

/// Multi-head self-attention over packed qkv[(batch·seq)×3d] -> [(batch·seq)×d].
/// Sequences are independent blocks of `seq` consecutive rows.
inline Var self_attention(Var qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
    const Tensor& X = qkv.value();
    if (X.rows() != batch * seq || X.cols() % 3 != 0 || (X.cols() / 3) % heads != 0)
        throw DimensionError("self_attention: qkv " + shape_str(X.shape()) + " with batch " +
                             std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                             std::to_string(heads));
    const std::size_t d = X.cols() / 3, dh = d / heads, w = 3 * d;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out({batch * seq, d});
    // attention probabilities, [batch][heads][seq][seq]
    std::vector<double> probs(batch * heads * seq * seq);
    std::vector<double> row(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* base = X.data().data() + b * seq * w;
        for (std::size_t h = 0; h < heads; ++h) {
            double* P = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const double* q = base + i * w + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < seq; ++j) {
                    const double* k = base + j * w + d + h * dh;
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += q[t] * k[t];
                    row[j] = s * sc;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < seq; ++j) z += (row[j] = std::exp(row[j] - mx));
                double* o = out.data().data() + (b * seq + i) * d + h * dh;
                for (std::size_t j = 0; j < seq; ++j) {
                    const double a = row[j] / z;
                    P[i * seq + j] = a;
                    const double* v = base + j * w + 2 * d + h * dh;
                    for (std::size_t t = 0; t < dh; ++t) o[t] += a * v[t];
                }
            }
        }
    }
    return qkv.graph->record(
        std::move(out), {qkv},
        [qkv, probs = std::move(probs), batch, seq, heads, d, dh, w, sc](Graph& g, std::size_t self) {
            const Tensor& go = g.grad_acc(self);
            const Tensor& X = g.value(qkv.id);
            auto& gx = g.grad_acc(qkv.id);
            std::vector<double> dA(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                const double* base = X.data().data() + b * seq * w;
                double* gbase = gx.data().data() + b * seq * w;
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* P = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* gout = go.data().data() + (b * seq + i) * d + h * dh;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const double* v = base + j * w + 2 * d + h * dh;
                            double* gv = gbase + j * w + 2 * d + h * dh;
                            const double a = P[i * seq + j];
                            double s = 0.0;
                            for (std::size_t t = 0; t < dh; ++t) {
                                s += gout[t] * v[t];
                                gv[t] += a * gout[t];
                            }
                            dA[j] = s;
                            dot += s * a;
                        }
                        const double* q = base + i * w + h * dh;
                        double* gq = gbase + i * w + h * dh;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const double ds = P[i * seq + j] * (dA[j] - dot) * sc;
                            if (ds == 0.0) continue;
                            const double* k = base + j * w + d + h * dh;
                            double* gk = gbase + j * w + d + h * dh;
                            for (std::size_t t = 0; t < dh; ++t) {
                                gq[t] += ds * k[t];
                                gk[t] += ds * q[t];
                            }
                        }
                    }
                }
            }
        });
}

/// Builds transformer input tokens per sample: [cls + pos_0, prompts..., patch_i + pos_i].
/// patches is [(batch·e)×d]; prompts, when present, are [p×d] and carry no positional term.
inline Var assemble_tokens(Var patches, Var cls, Var pos, std::optional<Var> prompts, std::size_t batch) {
    const Tensor& Pe = patches.value();
    const std::size_t d = Pe.cols();
    const std::size_t e = Pe.rows() / batch;
    const std::size_t p = prompts ? prompts->value().rows() : 0;
    if (Pe.rows() != batch * e || cls.value().size() != d || pos.value().rows() != 1 + e ||
        pos.value().cols() != d || (prompts && prompts->value().cols() != d))
        throw DimensionError("assemble_tokens: incompatible token shapes");
    const std::size_t seq = 1 + p + e;
    Tensor out({batch * seq, d});
    const Tensor& C = cls.value();
    const Tensor& Pos = pos.value();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < d; ++c) out.at(b * seq, c) = C[c] + Pos.at(0, c);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t c = 0; c < d; ++c) out.at(b * seq + 1 + i, c) = prompts->value().at(i, c);
        for (std::size_t i = 0; i < e; ++i)
            for (std::size_t c = 0; c < d; ++c) out.at(b * seq + 1 + p + i, c) = Pe.at(b * e + i, c) + Pos.at(1 + i, c);
    }
    Var pr = prompts.value_or(cls);
    auto fn = [patches, cls, pos, pr, has_p = prompts.has_value(), batch, e, p, d, seq](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        for (std::size_t b = 0; b < batch; ++b) {
            if (g.needs_grad(cls.id)) {
                auto& gc = g.grad_acc(cls.id);
                for (std::size_t c = 0; c < d; ++c) gc[c] += go.at(b * seq, c);
            }
            if (g.needs_grad(pos.id)) {
                auto& gp = g.grad_acc(pos.id);
                for (std::size_t c = 0; c < d; ++c) gp.at(0, c) += go.at(b * seq, c);
                for (std::size_t i = 0; i < e; ++i)
                    for (std::size_t c = 0; c < d; ++c) gp.at(1 + i, c) += go.at(b * seq + 1 + p + i, c);
            }
            if (has_p && g.needs_grad(pr.id)) {
                auto& gq = g.grad_acc(pr.id);
                for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t c = 0; c < d; ++c) gq.at(i, c) += go.at(b * seq + 1 + i, c);
            }
            if (g.needs_grad(patches.id)) {
                auto& gpe = g.grad_acc(patches.id);
                for (std::size_t i = 0; i < e; ++i)
                    for (std::size_t c = 0; c < d; ++c) gpe.at(b * e + i, c) += go.at(b * seq + 1 + p + i, c);
            }
        }
    };
    if (prompts) return patches.graph->record(std::move(out), {patches, cls, pos, *prompts}, fn);
    return patches.graph->record(std::move(out), {patches, cls, pos}, fn);
}

/// Selects rows of x in the given order.
inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
    const Tensor& X = x.value();
    const std::size_t d = X.cols();
    Tensor out({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= X.rows()) throw DimensionError("gather_rows: row index out of range");
        std::copy(X.row(rows[i]).begin(), X.row(rows[i]).end(), out.row(i).begin());
    }
    return x.graph->record(std::move(out), {x}, [x, rows = std::move(rows), d](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        auto& gx = g.grad_acc(x.id);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) gx.at(rows[i], c) += go.at(i, c);
    });
}

inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.graph->record(Tensor::scalar(s), {x}, [x](Graph& g, std::size_t self) {
        const double go = g.grad_acc(self)[0];
        for (auto& v : g.grad_acc(x.id).data()) v += go;
    });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
    const Tensor& Z = logits.value();
    const std::size_t n = Z.rows(), k = Z.cols();
    if (labels.size() != n) throw DimensionError("cross_entropy: label count mismatch");
    Tensor P = pluto::softmax_rows(Z);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] >= k) throw DomainError("cross_entropy: label out of range");
        loss -= std::log(std::max(P.at(r, labels[r]), 1e-300));
    }
    loss /= static_cast<double>(n);
    return logits.graph->record(Tensor::scalar(loss), {logits},
                                [logits, P = std::move(P), labels, n](Graph& g, std::size_t self) {
                                    const double go = g.grad_acc(self)[0] / static_cast<double>(n);
                                    auto& gz = g.grad_acc(logits.id);
                                    for (std::size_t r = 0; r < n; ++r)
                                        for (std::size_t c = 0; c < P.cols(); ++c)
                                            gz.at(r, c) += go * (P.at(r, c) - (c == labels[r] ? 1.0 : 0.0));
                                });
}

/// Mean over kept rows of H(softmax(row)). `keep` selects rows; empty means all.
/// dH/dz_k = -p_k (z_k - sum_i p_i z_i).
inline Var softmax_entropy(Var logits, std::vector<bool> keep = {}) {
    const Tensor& Z = logits.value();
    const std::size_t n = Z.rows(), k = Z.cols();
    if (keep.empty()) keep.assign(n, true);
    if (keep.size() != n) throw DimensionError("softmax_entropy: mask length mismatch");
    const auto kept = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
    if (kept == 0) throw DomainError("softmax_entropy: no rows kept");
    Tensor P = pluto::softmax_rows(Z);
    std::vector<double> zbar(n, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (!keep[r]) continue;
        double m = *std::max_element(Z.row(r).begin(), Z.row(r).end());
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += std::exp(Z.at(r, c) - m);
        const double lse = m + std::log(s);
        for (std::size_t c = 0; c < k; ++c) zbar[r] += P.at(r, c) * Z.at(r, c);
        total += std::max(0.0, lse - zbar[r]);
    }
    const double inv = 1.0 / static_cast<double>(kept);
    return logits.graph->record(
        Tensor::scalar(total * inv), {logits},
        [logits, P = std::move(P), zbar = std::move(zbar), keep = std::move(keep), inv, n, k](Graph& g,
                                                                                            std::size_t self) {
            const double go = g.grad_acc(self)[0] * inv;
            const Tensor& Z = g.value(logits.id);
            auto& gz = g.grad_acc(logits.id);
            for (std::size_t r = 0; r < n; ++r) {
                if (!keep[r]) continue;
                for (std::size_t c = 0; c < k; ++c) gz.at(r, c) -= go * P.at(r, c) * (Z.at(r, c) - zbar[r]);
            }
        });
}

/// scores[b, j] = h_groups[b·n + j] · h[b] for h_groups[(B·n)×m], h[B×m].
inline Var group_dot(Var h_groups, Var h, std::size_t n) {
    same_graph(h_groups, h);
    const Tensor& L = h_groups.value();
    const Tensor& X = h.value();
    const std::size_t B = X.rows(), m = X.cols();
    if (L.rows() != B * n || L.cols() != m)
        throw DimensionError("group_dot: " + shape_str(L.shape()) + " vs " + shape_str(X.shape()));
    Tensor out({B, n});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < m; ++c) s += L.at(b * n + j, c) * X.at(b, c);
            out.at(b, j) = s;
        }
    return h.graph->record(std::move(out), {h_groups, h}, [h_groups, h, n, B, m](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        const Tensor& L = g.value(h_groups.id);
        const Tensor& X = g.value(h.id);
        const bool nl = g.needs_grad(h_groups.id), nx = g.needs_grad(h.id);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < n; ++j) {
                const double o = go.at(b, j);
                for (std::size_t c = 0; c < m; ++c) {
                    if (nl) g.grad_acc(h_groups.id).at(b * n + j, c) += o * X.at(b, c);
                    if (nx) g.grad_acc(h.id).at(b, c) += o * L.at(b * n + j, c);
                }
            }
    });
}

/// out[b] = sum_j w[b, j] · P[b·n + j] for weights w[B×n] and rows P[(B·n)×K].
inline Var group_mix(Var w, Var p) {
    same_graph(w, p);
    const Tensor& W = w.value();
    const Tensor& P = p.value();
    const std::size_t B = W.rows(), n = W.cols(), k = P.cols();
    if (P.rows() != B * n) throw DimensionError("group_mix: " + shape_str(W.shape()) + " vs " + shape_str(P.shape()));
    Tensor out({B, k});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < k; ++c) out.at(b, c) += W.at(b, j) * P.at(b * n + j, c);
    return w.graph->record(std::move(out), {w, p}, [w, p, B, n, k](Graph& g, std::size_t self) {
        const Tensor& go = g.grad_acc(self);
        const Tensor& W = g.value(w.id);
        const Tensor& P = g.value(p.id);
        const bool nw = g.needs_grad(w.id), np = g.needs_grad(p.id);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t c = 0; c < k; ++c) {
                    if (nw) g.grad_acc(w.id).at(b, j) += go.at(b, c) * P.at(b * n + j, c);
                    if (np) g.grad_acc(p.id).at(b * n + j, c) += go.at(b, c) * W.at(b, j);
                }
    });
}

/// Mean over rows of -sum p ln p for probability rows p[B×K] (0 ln 0 := 0).
inline Var entropy_rows_mean(Var p) {
    const Tensor& P = p.value();
    const std::size_t B = P.rows();
    double total = 0.0;
    for (double v : P.data())
        if (v > 0.0) total -= v * std::log(v);
    const double inv = 1.0 / static_cast<double>(B);
    return p.graph->record(Tensor::scalar(total * inv), {p}, [p, inv](Graph& g, std::size_t self) {
        const double go = g.grad_acc(self)[0] * inv;
        const Tensor& P = g.value(p.id);
        auto& gp = g.grad_acc(p.id);
        for (std::size_t i = 0; i < P.size(); ++i) gp[i] -= go * (std::log(std::max(P[i], 1e-300)) + 1.0);
    });
}

/// Mean negative log-likelihood of probability rows p[B×K] at the given labels.
inline Var nll_rows_mean(Var p, const std::vector<std::size_t>& labels) {
    const Tensor& P = p.value();
    const std::size_t B = P.rows();
    if (labels.size() != B) throw DimensionError("nll_rows_mean: label count mismatch");
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] >= P.cols()) throw DomainError("nll_rows_mean: label out of range");
        total -= std::log(std::max(P.at(b, labels[b]), 1e-300));
    }
    const double inv = 1.0 / static_cast<double>(B);
    return p.graph->record(Tensor::scalar(total * inv), {p}, [p, labels, inv](Graph& g, std::size_t self) {
        const double go = g.grad_acc(self)[0] * inv;
        const Tensor& P = g.value(p.id);
        auto& gp = g.grad_acc(p.id);
        for (std::size_t b = 0; b < labels.size(); ++b)
            gp.at(b, labels[b]) -= go / std::max(P.at(b, labels[b]), 1e-300);
    });
}

} // namespace ad
} // namespace pluto
