#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a handle to a graph node. Operations record their parents and
// a closure that accumulates vector-Jacobian products into the parents'
// gradients. `backward(loss)` runs the closures in reverse topological order.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "eegscreen/common.hpp"

namespace eegscreen::ad {

class ShapeMismatch : public Error {
public:
    explicit ShapeMismatch(const std::string& msg) : Error("ShapeMismatch", msg) {}
};

using Shape = std::vector<int>;

// Aligned storage: Eigen's vectorized reductions peel up to the first
// aligned element, so unaligned buffers would make sums depend on the
// allocation address.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until needed
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Buffer& g() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

/// Thread-local switch; when off, operations build no graph.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value.assign(numel(shape), 0.0);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    template <class Alloc>
        requires(!std::same_as<std::vector<double, Alloc>, Buffer>)
    static Tensor from(Shape shape, const std::vector<double, Alloc>& values, bool requires_grad = false) {
        return from(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
    }
    static Tensor from(Shape shape, Buffer values, bool requires_grad = false) {
        if (values.size() != numel(shape)) throw ShapeMismatch("value count does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    bool defined() const { return static_cast<bool>(n_); }
    Node& node() const { return *n_; }
    const std::shared_ptr<Node>& ptr() const { return n_; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<std::size_t>(i < 0 ? static_cast<int>(n_->shape.size()) + i : i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::size_t size() const { return n_->value.size(); }
    Buffer& value() const { return n_->value; }
    Buffer& grad() const { return n_->g(); }
    bool requires_grad() const { return n_->requires_grad; }
    double item() const { return n_->value.at(0); }

    void zero_grad() const { n_->grad.clear(); }

private:
    std::shared_ptr<Node> n_;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

inline MatMap mat(Buffer& v, int rows, int cols) { return MatMap(v.data(), rows, cols); }
inline CMatMap cmat(const Buffer& v, int rows, int cols) { return CMatMap(v.data(), rows, cols); }
inline VecMap vec(Buffer& v) { return VecMap(v.data(), static_cast<Eigen::Index>(v.size())); }
inline CVecMap cvec(const Buffer& v) { return CVecMap(v.data(), static_cast<Eigen::Index>(v.size())); }

/// Creates the output node. It joins the graph only if gradients are
/// enabled and some parent requires them.
inline Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (auto& p : parents) n->parents.push_back(p.ptr());
            n->backward_fn = std::move(backward);
        }
    }
    return Tensor(n);
}

/// Accumulates d(root)/d(x) for every x reachable from the scalar `root`.
/// Interior nodes release their closures afterwards.
inline void backward(const Tensor& root) {
    if (root.size() != 1) throw ShapeMismatch("backward needs a scalar root");
    if (!root.requires_grad()) return;
    // Owning pointers: releasing a node's parents below may drop the last
    // other reference to an interior node.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{root.ptr(), 0}};
    seen.insert(&root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            auto p = n->parents[i++];
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(std::move(n));
            stack.pop_back();
        }
    }
    root.node().g()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = it->get();
        if (n->backward_fn) {
            n->g();
            n->backward_fn(*n);
            n->backward_fn = nullptr;
            n->parents.clear();
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape operations.

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeMismatch(msg);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& o) {
        if (a.requires_grad()) vec(a.grad()) += cvec(o.grad);
        if (b.requires_grad()) vec(b.grad()) += cvec(o.grad);
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch");
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& o) {
        if (a.requires_grad()) vec(a.grad()).array() += cvec(o.grad).array() * cvec(b.value()).array();
        if (b.requires_grad()) vec(b.grad()).array() += cvec(o.grad).array() * cvec(a.value()).array();
    });
}

inline Tensor scale(const Tensor& a, double s) {
    Buffer out(a.value());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [a, s](Node& o) { vec(a.grad()) += s * cvec(o.grad); });
}

/// Same data, new shape.
inline Tensor reshape(const Tensor& a, Shape shape) {
    require(numel(shape) == a.size(), "reshape: element count changes");
    return make_result(std::move(shape), a.value(), {a}, [a](Node& o) { vec(a.grad()) += cvec(o.grad); });
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i]);
    return make_result(a.shape(), std::move(out), {a}, [a, df](Node& o) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * df(a.value()[i], o.value[i]);
    });
}

inline Tensor relu(const Tensor& a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// max(x, 0) + exp(min(x, 0)) - 1; the slope is y + 1 - max(x, 0).
inline Tensor elu(const Tensor& a) {
    Buffer out(a.size());
    const auto x = cvec(a.value()).array();
    vec(out).array() = x.max(0.0) + (x.min(0.0).exp() - 1.0);
    return make_result(a.shape(), std::move(out), {a}, [a](Node& o) {
        const auto x = cvec(a.value()).array();
        vec(a.grad()).array() += cvec(o.grad).array() * (cvec(o.value).array() + 1.0 - x.max(0.0));
    });
}

inline Tensor tanh(const Tensor& a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
    return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

/// Sum of all entries as a scalar of shape [1].
inline Tensor sum(const Tensor& a) {
    double s = 0;
    for (double v : a.value()) s += v;
    return make_result({1}, {s}, {a}, [a](Node& o) { vec(a.grad()).array() += o.grad[0]; });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// 2-D transpose.
inline Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose needs a matrix");
    const int r = a.dim(0), c = a.dim(1);
    Buffer out(a.size());
    mat(out, c, r) = cmat(a.value(), r, c).transpose();
    return make_result({c, r}, std::move(out), {a}, [a, r, c](Node& o) { mat(a.grad(), r, c) += cmat(o.grad, c, r).transpose(); });
}

/// Rows [start, start + count) of a tensor viewed as [dim0, rest].
inline Tensor slice_rows(const Tensor& a, int start, int count) {
    require(start >= 0 && count >= 0 && start + count <= a.dim(0), "slice_rows out of range");
    const std::size_t row = a.size() / static_cast<std::size_t>(a.dim(0));
    Shape s = a.shape();
    s[0] = count;
    Buffer out(a.value().begin() + static_cast<std::ptrdiff_t>(start * row),
                            a.value().begin() + static_cast<std::ptrdiff_t>((start + count) * row));
    return make_result(std::move(s), std::move(out), {a}, [a, start, row](Node& o) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) ga[static_cast<std::size_t>(start) * row + i] += o.grad[i];
    });
}

/// Concatenation along dimension 0.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat of nothing");
    Shape s = parts[0].shape();
    s[0] = 0;
    Buffer out;
    for (const auto& p : parts) {
        require(p.rank() == static_cast<int>(s.size()) && std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1),
                "concat_rows: trailing shapes differ");
        s[0] += p.dim(0);
        out.insert(out.end(), p.value().begin(), p.value().end());
    }
    return make_result(std::move(s), std::move(out), parts, [parts](Node& o) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) {
                auto& gp = p.grad();
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += o.grad[off + i];
            }
            off += p.size();
        }
    });
}

// ---------------------------------------------------------------------------
// Dense layers.

/// [m,k] x [k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Buffer out(static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
    mat(out, m, n).noalias() = cmat(a.value(), m, k) * cmat(b.value(), k, n);
    return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node& o) {
        const auto go = cmat(o.grad, m, n);
        if (a.requires_grad()) mat(a.grad(), m, k).noalias() += go * cmat(b.value(), k, n).transpose();
        if (b.requires_grad()) mat(b.grad(), k, n).noalias() += cmat(a.value(), m, k).transpose() * go;
    });
}

/// x [m,in] times weight [out,in] transposed, plus optional bias [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
    require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1), "linear: " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    const int m = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    if (b.defined()) require(static_cast<int>(b.size()) == out_dim, "linear: bias size");
    Buffer out(static_cast<std::size_t>(m) * static_cast<std::size_t>(out_dim));
    auto y = mat(out, m, out_dim);
    y.noalias() = cmat(x.value(), m, in) * cmat(w.value(), out_dim, in).transpose();
    if (b.defined()) y.rowwise() += cvec(b.value()).transpose();
    std::vector<Tensor> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_result({m, out_dim}, std::move(out), parents, [x, w, b, m, in, out_dim](Node& o) {
        const auto go = cmat(o.grad, m, out_dim);
        if (x.requires_grad()) mat(x.grad(), m, in).noalias() += go * cmat(w.value(), out_dim, in);
        if (w.requires_grad()) mat(w.grad(), out_dim, in).noalias() += go.transpose() * cmat(x.value(), m, in);
        if (b.defined() && b.requires_grad()) vec(b.grad()) += go.colwise().sum().transpose();
    });
}

/// Row-wise softmax of a matrix.
inline Tensor softmax_rows(const Tensor& a) {
    require(a.rank() == 2, "softmax_rows needs a matrix");
    const int r = a.dim(0), c = a.dim(1);
    Buffer out(a.size());
    auto y = mat(out, r, c);
    const auto x = cmat(a.value(), r, c);
    for (int i = 0; i < r; ++i) {
        const double mx = x.row(i).maxCoeff();
        y.row(i) = (x.row(i).array() - mx).exp().matrix();
        y.row(i) /= y.row(i).sum();
    }
    return make_result({r, c}, std::move(out), {a}, [a, r, c](Node& o) {
        const auto y = cmat(o.value, r, c);
        const auto go = cmat(o.grad, r, c);
        auto ga = mat(a.grad(), r, c);
        for (int i = 0; i < r; ++i) {
            const double dot = y.row(i).dot(go.row(i));
            ga.row(i).array() += y.row(i).array() * (go.row(i).array() - dot);
        }
    });
}

/// Normalizes each row over its last dimension, then applies gamma, beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const int c = x.dim(-1);
    const int r = static_cast<int>(x.size()) / c;
    require(static_cast<int>(gamma.size()) == c && static_cast<int>(beta.size()) == c, "layer_norm: affine size");
    Buffer out(x.size());
    auto xhat = std::make_shared<Buffer>(x.size());
    auto inv = std::make_shared<Buffer>(static_cast<std::size_t>(r));
    const auto xm = cmat(x.value(), r, c);
    auto xh = mat(*xhat, r, c);
    for (int i = 0; i < r; ++i) {
        const double mu = xm.row(i).mean();
        const double var = (xm.row(i).array() - mu).square().mean();
        (*inv)[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(var + eps);
        xh.row(i) = (xm.row(i).array() - mu) * (*inv)[static_cast<std::size_t>(i)];
    }
    mat(out, r, c) = (xh.array().rowwise() * cvec(gamma.value()).transpose().array()).rowwise() + cvec(beta.value()).transpose().array();
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv, r, c](Node& o) {
        const auto go = cmat(o.grad, r, c);
        const auto xh = cmat(*xhat, r, c);
        if (gamma.requires_grad()) vec(gamma.grad()) += (go.array() * xh.array()).colwise().sum().matrix().transpose();
        if (beta.requires_grad()) vec(beta.grad()) += go.colwise().sum().transpose();
        if (x.requires_grad()) {
            auto gx = mat(x.grad(), r, c);
            const auto gm = cvec(gamma.value());
            for (int i = 0; i < r; ++i) {
                const Eigen::RowVectorXd d = go.row(i).array() * gm.transpose().array();
                const double m1 = d.mean();
                const double m2 = (d.array() * xh.row(i).array()).mean();
                gx.row(i).array() += (*inv)[static_cast<std::size_t>(i)] * (d.array() - m1 - xh.row(i).array() * m2);
            }
        }
    });
}

/// Inverted dropout: zeroes entries with probability p and scales the rest
/// by 1/(1-p). Identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64& rng) {
    if (!training || p <= 0) return x;
    auto mask = std::make_shared<Buffer>(x.size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 / (1.0 - p);
    Buffer out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*mask)[i] = u(rng) >= p ? keep : 0.0;
        out[i] = x.value()[i] * (*mask)[i];
    }
    return make_result(x.shape(), std::move(out), {x}, [x, mask](Node& o) {
        vec(x.grad()).array() += cvec(o.grad).array() * cvec(*mask).array();
    });
}

// ---------------------------------------------------------------------------
// Losses. Targets are 0/1 doubles.

/// Mean binary cross-entropy on logits: max(z,0) - z*y + log(1 + exp(-|z|)).
inline Tensor bce_with_logits(const Tensor& z, std::span<const double> y) {
    require(z.size() == y.size(), "bce: target count");
    const auto n = static_cast<double>(y.size());
    double loss = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double v = z.value()[i];
        loss += std::max(v, 0.0) - v * y[i] + std::log1p(std::exp(-std::abs(v)));
    }
    Buffer yy(y.begin(), y.end());
    return make_result({1}, {loss / n}, {z}, [z, yy, n](Node& o) {
        auto& gz = z.grad();
        for (std::size_t i = 0; i < yy.size(); ++i) gz[i] += o.grad[0] * (1.0 / (1.0 + std::exp(-z.value()[i])) - yy[i]) / n;
    });
}

/// log(sigmoid(z)) computed stably.
inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

/// Geometric-mean aggregation loss. Frame logits `z` are grouped by
/// `offsets` (size B + 1); recording b has probability
/// p_b = exp(mean log sigmoid(z_i)). Returns the mean over recordings of
/// the binary cross-entropy of p_b, with log terms clamped at -100.
inline Tensor geo_mean_bce(const Tensor& z, std::span<const int> offsets, std::span<const double> y) {
    require(offsets.size() == y.size() + 1 && offsets.back() == static_cast<int>(z.size()), "geo_mean_bce: grouping");
    const std::size_t b = y.size();
    Buffer lp(b);
    double loss = 0;
    for (std::size_t r = 0; r < b; ++r) {
        double s = 0;
        const int n = offsets[r + 1] - offsets[r];
        require(n > 0, "geo_mean_bce: empty recording");
        for (int i = offsets[r]; i < offsets[r + 1]; ++i) s += log_sigmoid(z.value()[static_cast<std::size_t>(i)]);
        lp[r] = s / n;
        const double log_p = std::max(lp[r], -100.0);
        const double log_q = std::max(std::log(-std::expm1(lp[r])), -100.0);
        loss -= y[r] * log_p + (1 - y[r]) * log_q;
    }
    std::vector<int> off(offsets.begin(), offsets.end());
    Buffer yy(y.begin(), y.end());
    return make_result({1}, {loss / static_cast<double>(b)}, {z}, [z, off, yy, lp](Node& o) {
        auto& gz = z.grad();
        const double scale_all = o.grad[0] / static_cast<double>(yy.size());
        for (std::size_t r = 0; r < yy.size(); ++r) {
            // d loss / d lp, respecting the clamps.
            double dl = 0;
            if (lp[r] > -100.0) dl -= yy[r];
            const double q = -std::expm1(lp[r]);
            if (std::log(q) > -100.0) dl += (1 - yy[r]) * std::exp(lp[r]) / q;
            const int n = off[r + 1] - off[r];
            for (int i = off[r]; i < off[r + 1]; ++i) {
                const double s = 1.0 / (1.0 + std::exp(z.value()[static_cast<std::size_t>(i)]));  // d log sigmoid / dz
                gz[static_cast<std::size_t>(i)] += scale_all * dl * s / n;
            }
        }
    });
}

}  // namespace eegscreen::ad
