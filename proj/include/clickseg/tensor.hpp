#ifndef CLICKSEG_TENSOR_HPP
#define CLICKSEG_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/error.hpp"

namespace clickseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

class Tape;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty means "no gradient yet"
    bool requires_grad = false;
    const Tape* producer = nullptr; // tape that recorded this node, null for leaves

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline void check_finite(std::span<const double> values, const char* where) {
    for (double v : values) {
        if (!std::isfinite(v)) throw DomainError(std::string(where) + ": non-finite value");
    }
}

} // namespace detail

/// Dense row-major array of doubles with optional participation in reverse-mode AD.
///
/// Tensor is a handle: copies share the same node. Data is treated as
/// immutable once created; only leaves may be edited through mutable_data(),
/// which the optimizer and initializers use.
class Tensor {
public:
    Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("Tensor: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
        }
        detail::check_finite(data, "Tensor");
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    /// Copy of the values.
    std::vector<double> values() const { return node_->data; }

    /// Writable view of a leaf's data. Throws for recorded (non-leaf) tensors.
    std::span<double> mutable_data() {
        if (node_->producer != nullptr) throw ContractError("mutable_data: tensor is not a leaf");
        return node_->data;
    }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " values");
        return node_->data[0];
    }

    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) {
        if (node_->producer != nullptr) throw ContractError("set_requires_grad: tensor is not a leaf");
        node_->requires_grad = on;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    bool is_leaf() const { return node_->producer == nullptr; }

    /// New leaf holding a copy of the values, outside any tape.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;

    friend Tensor make_recorded(Shape, std::vector<double>, std::vector<Tensor>,
                                std::function<void(const detail::Node&)>);
};

/// Records differentiable operations for one backward pass.
///
/// Constructing a Tape makes it the active tape of the calling thread until
/// it is destroyed; tapes nest in LIFO order. Operations whose inputs require
/// gradients append an entry while a tape is active; with no active tape
/// they run as plain computations.
class Tape {
public:
    Tape() : previous_(active_slot()) { active_slot() = this; }
    ~Tape() { active_slot() = previous_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_slot(); }

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    /// Propagates d(loss)/d(node) to every recorded node and every leaf that requires grad.
    void backward(const Tensor& loss) {
        if (consumed_) throw ContractError("backward: tape already consumed; call reset() first");
        if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (loss.node()->producer != this) throw ContractError("backward: loss was not recorded on this tape");
        loss.node()->ensure_grad()[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (!it->out->grad.empty()) it->backward(*it->out);
        }
        entries_.clear();
        consumed_ = true;
    }

    void reset() {
        entries_.clear();
        consumed_ = false;
    }

private:
    struct Entry {
        std::shared_ptr<detail::Node> out;
        std::function<void(const detail::Node&)> backward;
    };

    friend Tensor make_recorded(Shape, std::vector<double>, std::vector<Tensor>,
                                std::function<void(const detail::Node&)>);

    static Tape*& active_slot() {
        thread_local Tape* slot = nullptr;
        return slot;
    }

    Tape* previous_;
    std::vector<Entry> entries_;
    bool consumed_ = false;

    friend class NoGradGuard;
};

/// Suspends recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : saved_(Tape::active_slot()) { Tape::active_slot() = nullptr; }
    ~NoGradGuard() { Tape::active_slot() = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

/// Builds an op result and, when recording applies, appends its backward closure.
/// The closure receives the output node (with its gradient) and accumulates
/// into the input nodes it captured.
inline Tensor make_recorded(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                            std::function<void(const detail::Node&)> backward) {
    detail::check_finite(data, "op result");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    Tape* tape = Tape::active();
    const bool track = tape != nullptr && std::any_of(inputs.begin(), inputs.end(),
                                                      [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
        node->requires_grad = true;
        node->producer = tape;
        tape->entries_.push_back({node, std::move(backward)});
    }
    return Tensor(node);
}

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

/// Flat index into `b` for every flat index of `a`, where each dim of b is equal to a's or 1.
inline std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    const std::size_t rank = a.size();
    std::vector<std::size_t> bstride(rank, 0);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
        if (b[d] != a[d] && b[d] != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " to " + shape_str(a));
        }
        bstride[d] = (b[d] == 1) ? 0 : s;
        s *= b[d];
    }
    const std::size_t n = shape_numel(a);
    std::vector<std::size_t> index(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t bi = 0;
    for (std::size_t i = 0; i < n; ++i) {
        index[i] = bi;
        for (std::size_t d = rank; d-- > 0;) {
            if (++counter[d] < a[d]) {
                bi += bstride[d];
                break;
            }
            bi -= bstride[d] * (a[d] - 1);
            counter[d] = 0;
        }
    }
    return index;
}

template <typename Fwd, typename Dfdx>
Tensor unary(const Tensor& x, Fwd fwd, Dfdx dfdx) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    auto xn = x.node();
    return make_recorded(x.shape(), std::move(out), {x}, [xn, dfdx](const Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * dfdx(xn->data[i], o.data[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] · b[k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return make_recorded({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const detail::Node& o) {
        const double* G = o.grad.data();
        if (an->requires_grad) {
            // dA = G · Bᵀ
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = bn->data.data() + p * n;
                    const double* grow = G + i * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + p] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            // dB = Aᵀ · G
            auto& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = G + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = an->data[i * k + p];
                    double* gbrow = gb.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    auto an = a.node();
    return make_recorded({n, m}, std::move(out), {a}, [an, m, n](const detail::Node& o) {
        if (!an->requires_grad) return;
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise. Binary ops broadcast b over a: same rank, each dim of b equal to a's or 1.

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto idx = detail::broadcast_index(a.shape(), b.shape(), "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[idx[i]];
    auto an = a.node(), bn = b.node();
    return make_recorded(a.shape(), std::move(out), {a, b},
                         [an, bn, idx = std::move(idx)](const detail::Node& o) {
                             if (an->requires_grad) {
                                 auto& g = an->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             }
                             if (bn->requires_grad) {
                                 auto& g = bn->ensure_grad();
                                 for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += o.grad[i];
                             }
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto idx = detail::broadcast_index(a.shape(), b.shape(), "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[idx[i]];
    auto an = a.node(), bn = b.node();
    return make_recorded(a.shape(), std::move(out), {a, b},
                         [an, bn, idx = std::move(idx)](const detail::Node& o) {
                             if (an->requires_grad) {
                                 auto& g = an->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             }
                             if (bn->requires_grad) {
                                 auto& g = bn->ensure_grad();
                                 for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] -= o.grad[i];
                             }
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto idx = detail::broadcast_index(a.shape(), b.shape(), "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[idx[i]];
    auto an = a.node(), bn = b.node();
    return make_recorded(a.shape(), std::move(out), {a, b},
                         [an, bn, idx = std::move(idx)](const detail::Node& o) {
                             if (an->requires_grad) {
                                 auto& g = an->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->data[idx[i]];
                             }
                             if (bn->requires_grad) {
                                 auto& g = bn->ensure_grad();
                                 for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += o.grad[i] * an->data[i];
                             }
                         });
}

inline Tensor scale(const Tensor& x, double factor) {
    return detail::unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor add_scalar(const Tensor& x, double offset) {
    return detail::unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

/// 1 - x.
inline Tensor one_minus(const Tensor& x) {
    return detail::unary(x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x,
        [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(x, [](double v) { return v > 0 ? v : 0.0; },
                         [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// Tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    return detail::unary(
        x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
        [](double v, double) {
            const double u = c * (v + 0.044715 * v * v * v);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
}

/// Clamps to [lo, hi]; gradient passes where lo <= x <= hi.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw DomainError("clamp: lo > hi");
    return detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                         [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
inline Tensor softmax(const Tensor& z, std::size_t axis) {
    if (axis >= z.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(z.shape()));
    const auto& s = z.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t len = s[axis];
    std::vector<double> out(z.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -INFINITY;
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, z[base + j * inner]);
            double sum = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(z[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= sum;
        }
    }
    auto zn = z.node();
    return make_recorded(s, std::move(out), {z}, [zn, outer, inner, len](const detail::Node& o) {
        if (!zn->requires_grad) return;
        auto& g = zn->ensure_grad();
        for (std::size_t a = 0; a < outer; ++a) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = a * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * inner] * o.data[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t k = base + j * inner;
                    g[k] += o.data[k] * (o.grad[k] - dot);
                }
            }
        }
    });
}

/// Zero-mean, unit-variance normalization over the last axis (no affine part).
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
    if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.numel() / width;
    std::vector<double> out(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data().data() + r * width;
        double mean = 0.0;
        for (std::size_t j = 0; j < width; ++j) mean += row[j];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(width);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < width; ++j) out[r * width + j] = (row[j] - mean) * inv_std[r];
    }
    auto xn = x.node();
    return make_recorded(x.shape(), std::move(out), {x},
                         [xn, rows, width, inv_std = std::move(inv_std)](const detail::Node& o) {
                             if (!xn->requires_grad) return;
                             auto& g = xn->ensure_grad();
                             const double w = static_cast<double>(width);
                             for (std::size_t r = 0; r < rows; ++r) {
                                 const double* gy = o.grad.data() + r * width;
                                 const double* y = o.data.data() + r * width;
                                 double mg = 0.0, mgy = 0.0;
                                 for (std::size_t j = 0; j < width; ++j) {
                                     mg += gy[j];
                                     mgy += gy[j] * y[j];
                                 }
                                 mg /= w;
                                 mgy /= w;
                                 for (std::size_t j = 0; j < width; ++j)
                                     g[r * width + j] += inv_std[r] * (gy[j] - mg - y[j] * mgy);
                             }
                         });
}

/// Scales each row of a 2-D tensor to unit L2 norm. Rows with norm below `eps` are divided by eps.
inline Tensor normalize_rows(const Tensor& x, double eps = 1e-12) {
    detail::require_rank(x, 2, "normalize_rows");
    const std::size_t rows = x.dim(0), width = x.dim(1);
    std::vector<double> out(x.numel());
    std::vector<double> norms(rows);
    std::vector<char> clipped(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < width; ++j) ss += x[r * width + j] * x[r * width + j];
        double n = std::sqrt(ss);
        if (n < eps) {
            n = eps;
            clipped[r] = 1;
        }
        norms[r] = n;
        for (std::size_t j = 0; j < width; ++j) out[r * width + j] = x[r * width + j] / n;
    }
    auto xn = x.node();
    return make_recorded(x.shape(), std::move(out), {x},
                         [xn, rows, width, norms = std::move(norms), clipped = std::move(clipped)](const detail::Node& o) {
                             if (!xn->requires_grad) return;
                             auto& g = xn->ensure_grad();
                             for (std::size_t r = 0; r < rows; ++r) {
                                 const double* gy = o.grad.data() + r * width;
                                 const double* y = o.data.data() + r * width;
                                 double dot = 0.0;
                                 if (!clipped[r])
                                     for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
                                 for (std::size_t j = 0; j < width; ++j)
                                     g[r * width + j] += (gy[j] - y[j] * dot) / norms[r];
                             }
                         });
}

// ---------------------------------------------------------------------------
// Reductions and structural ops

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto xn = x.node();
    return make_recorded({}, {acc}, {x}, [xn](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (double& v : g) v += o.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Same values, new shape with equal element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    auto xn = x.node();
    return make_recorded(std::move(shape), x.values(), {x}, [xn](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

/// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_rank(x, 2, "slice_cols");
    const std::size_t rows = x.dim(0), width = x.dim(1);
    if (begin > end || end > width) throw ShapeError("slice_cols: range out of bounds");
    const std::size_t w = end - begin;
    std::vector<double> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * width + begin + j];
    auto xn = x.node();
    return make_recorded({rows, w}, std::move(out), {x}, [xn, rows, width, begin, w](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) g[r * width + begin + j] += o.grad[r * w + j];
    });
}

/// Concatenates 2-D tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts.front().dim(0);
    std::size_t width = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) throw ShapeError("concat_cols: row counts differ");
        width += p.dim(1);
    }
    std::vector<double> out(rows * width);
    std::size_t offset = 0;
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) out[r * width + offset + j] = p[r * w + j];
        offset += w;
        nodes.push_back(p.node());
    }
    return make_recorded({rows, width}, std::move(out), parts, [nodes, rows, width](const detail::Node& o) {
        std::size_t off = 0;
        for (const auto& n : nodes) {
            const std::size_t w = n->shape[1];
            if (n->requires_grad) {
                auto& g = n->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j) g[r * w + j] += o.grad[r * width + off + j];
            }
            off += w;
        }
    });
}

/// Fixed sparse linear map: out[r] = sum over entries e of row r of weight[e] * x[col[e]].
/// Covers gathers (unit weights), pooling and interpolation.
struct SparseMap {
    Shape in_shape;
    Shape out_shape;
    std::vector<std::size_t> row_begin; // size out+1
    std::vector<std::size_t> cols;
    std::vector<double> weights;

    /// out[i] = x[index[i]].
    static SparseMap gather(Shape in_shape, Shape out_shape, const std::vector<std::size_t>& index) {
        SparseMap m;
        m.in_shape = std::move(in_shape);
        m.out_shape = std::move(out_shape);
        if (shape_numel(m.out_shape) != index.size()) throw ShapeError("SparseMap::gather: index size");
        m.row_begin.resize(index.size() + 1);
        std::iota(m.row_begin.begin(), m.row_begin.end(), std::size_t{0});
        m.cols = index;
        m.weights.assign(index.size(), 1.0);
        return m;
    }
};

using SparseMapPtr = std::shared_ptr<const SparseMap>;

inline Tensor apply_map(const SparseMapPtr& map, const Tensor& x) {
    if (x.shape() != map->in_shape) {
        throw ShapeError("apply_map: expected " + shape_str(map->in_shape) + ", got " + shape_str(x.shape()));
    }
    const std::size_t n = shape_numel(map->out_shape);
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (std::size_t e = map->row_begin[r]; e < map->row_begin[r + 1]; ++e) acc += map->weights[e] * x[map->cols[e]];
        out[r] = acc;
    }
    auto xn = x.node();
    return make_recorded(map->out_shape, std::move(out), {x}, [xn, map, n](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t e = map->row_begin[r]; e < map->row_begin[r + 1]; ++e)
                g[map->cols[e]] += map->weights[e] * o.grad[r];
    });
}

// ---------------------------------------------------------------------------
// Losses (mean-reduced scalars)

inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mse");
    const double n = static_cast<double>(a.numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    auto an = a.node(), bn = b.node();
    return make_recorded({}, {acc / n}, {a, b}, [an, bn, n](const detail::Node& o) {
        const double gs = o.grad[0] * 2.0 / n;
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs * (an->data[i] - bn->data[i]);
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gs * (an->data[i] - bn->data[i]);
        }
    });
}

inline Tensor l1(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "l1");
    const double n = static_cast<double>(a.numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += std::abs(a[i] - b[i]);
    auto an = a.node(), bn = b.node();
    return make_recorded({}, {acc / n}, {a, b}, [an, bn, n](const detail::Node& o) {
        const double gs = o.grad[0] / n;
        auto sign = [](double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); };
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs * sign(an->data[i] - bn->data[i]);
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gs * sign(an->data[i] - bn->data[i]);
        }
    });
}

/// Binary cross-entropy of probabilities p in (0,1) against labels y in {0,1}.
inline Tensor bce(const Tensor& p, const Tensor& y) {
    detail::require_same_shape(p, y, "bce");
    const double n = static_cast<double>(p.numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const double pi = p[i], yi = y[i];
        if (!(pi > 0.0 && pi < 1.0)) throw DomainError("bce: probability outside (0,1)");
        if (yi != 0.0 && yi != 1.0) throw DomainError("bce: label not in {0,1}");
        acc -= yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi);
    }
    auto pn = p.node(), yn = y.node();
    return make_recorded({}, {acc / n}, {p}, [pn, yn, n](const detail::Node& o) {
        if (!pn->requires_grad) return;
        auto& g = pn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double pi = pn->data[i], yi = yn->data[i];
            g[i] += o.grad[0] * (-yi / pi + (1.0 - yi) / (1.0 - pi)) / n;
        }
    });
}

/// Binary cross-entropy of sigmoid(z) against labels y in {0,1}, evaluated as
/// max(z,0) - z y + log(1 + exp(-|z|)) so it stays finite for any logit.
inline Tensor bce_with_logits(const Tensor& z, const Tensor& y) {
    detail::require_same_shape(z, y, "bce_with_logits");
    const double n = static_cast<double>(z.numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
        const double zi = z[i], yi = y[i];
        if (yi != 0.0 && yi != 1.0) throw DomainError("bce_with_logits: label not in {0,1}");
        acc += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
    }
    auto zn = z.node(), yn = y.node();
    return make_recorded({}, {acc / n}, {z}, [zn, yn, n](const detail::Node& o) {
        if (!zn->requires_grad) return;
        auto& g = zn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-zn->data[i]));
            g[i] += o.grad[0] * (p - yn->data[i]) / n;
        }
    });
}

// ---------------------------------------------------------------------------
// Extension point

/// Gradient contributions of a custom op, one vector per input (empty to skip an input).
using CustomBackward = std::function<std::vector<std::vector<double>>(std::span<const double> grad_out)>;

/// Records an op whose forward values and backward rule are supplied by the caller.
inline Tensor custom_op(const std::vector<Tensor>& inputs, Shape shape, std::vector<double> data,
                        CustomBackward backward) {
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& t : inputs) nodes.push_back(t.node());
    return make_recorded(std::move(shape), std::move(data), inputs,
                         [nodes, backward = std::move(backward)](const detail::Node& o) {
                             auto grads = backward(o.grad);
                             for (std::size_t i = 0; i < nodes.size() && i < grads.size(); ++i) {
                                 if (!nodes[i]->requires_grad || grads[i].empty()) continue;
                                 auto& g = nodes[i]->ensure_grad();
                                 if (grads[i].size() != g.size()) throw ShapeError("custom_op: gradient size");
                                 for (std::size_t j = 0; j < g.size(); ++j) g[j] += grads[i][j];
                             }
                         });
}

// ---------------------------------------------------------------------------
// Gradient verification

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|),
/// taken over every tensor in `params`. `f` must build a scalar from the params.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
    }
    double worst = 0.0;
    NoGradGuard no_grad;
    for (auto& p : params) {
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        if (analytic.empty()) analytic.assign(p.numel(), 0.0);
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = f().item();
            values[i] = saved - h;
            const double down = f().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
        }
    }
    return worst;
}

/// Single-input form: checks d f(x) / dx.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor leaf = x.detach();
    return grad_check([&] { return f(leaf); }, std::vector<Tensor>{leaf}, h);
}

} // namespace clickseg

#endif // CLICKSEG_TENSOR_HPP
