#pragma once

// Convolution, normalization, pooling and attention operations used by the
// frame encoder and the recording-level heads.

#include "eegscreen/autodiff.hpp"

namespace eegscreen::ad {

/// Running statistics of a batch-norm layer.
struct BatchNormState {
    Buffer running_mean;
    Buffer running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(int c = 0) : running_mean(static_cast<std::size_t>(c), 0.0), running_var(static_cast<std::size_t>(c), 1.0) {}

    void update(int c, double mu, double biased_var, double count) {
        const auto i = static_cast<std::size_t>(c);
        running_mean[i] = (1 - momentum) * running_mean[i] + momentum * mu;
        running_var[i] = (1 - momentum) * running_var[i] + momentum * biased_var * count / std::max(count - 1, 1.0);
    }
};

/// Batch norm over dimension 1 of x = [B, C, ...]. Training mode normalizes
/// with batch statistics (biased variance) and updates `state`; evaluation
/// uses the running statistics.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training) {
    require(x.rank() >= 2, "batch_norm needs [B, C, ...]");
    const int b = x.dim(0), c = x.dim(1);
    const int s = static_cast<int>(x.size() / static_cast<std::size_t>(b * c));
    require(static_cast<int>(gamma.size()) == c && static_cast<int>(beta.size()) == c, "batch_norm: affine size");
    const double count = static_cast<double>(b) * s;
    auto mu = std::make_shared<Buffer>(static_cast<std::size_t>(c));
    auto inv = std::make_shared<Buffer>(static_cast<std::size_t>(c));
    const auto& xv = x.value();
    auto seg = [&](int bi, int ci) { return cvec(xv).segment(static_cast<Eigen::Index>((bi * c + ci)) * s, s); };
    for (int ci = 0; ci < c; ++ci) {
        const auto i = static_cast<std::size_t>(ci);
        if (training) {
            double m = 0;
            for (int bi = 0; bi < b; ++bi) m += seg(bi, ci).sum();
            m /= count;
            double v = 0;
            for (int bi = 0; bi < b; ++bi) v += (seg(bi, ci).array() - m).square().sum();
            v /= count;
            (*mu)[i] = m;
            (*inv)[i] = 1.0 / std::sqrt(v + state.eps);
            state.update(ci, m, v, count);
        } else {
            (*mu)[i] = state.running_mean[i];
            (*inv)[i] = 1.0 / std::sqrt(state.running_var[i] + state.eps);
        }
    }
    Buffer out(x.size());
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const auto i = static_cast<std::size_t>(ci);
            vec(out).segment(static_cast<Eigen::Index>((bi * c + ci)) * s, s) =
                ((seg(bi, ci).array() - (*mu)[i]) * ((*inv)[i] * gamma.value()[i]) + beta.value()[i]).matrix();
        }
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, [x, gamma, beta, mu, inv, b, c, s, count, training](Node& o) {
        const auto& xv = x.value();
        for (int ci = 0; ci < c; ++ci) {
            const auto i = static_cast<std::size_t>(ci);
            double sg = 0, sgx = 0;
            for (int bi = 0; bi < b; ++bi) {
                const auto off = static_cast<Eigen::Index>((bi * c + ci)) * s;
                const auto g = cvec(o.grad).segment(off, s);
                sg += g.sum();
                sgx += (g.array() * ((cvec(xv).segment(off, s).array() - (*mu)[i]) * (*inv)[i])).sum();
            }
            if (gamma.requires_grad()) gamma.grad()[i] += sgx;
            if (beta.requires_grad()) beta.grad()[i] += sg;
            if (!x.requires_grad()) continue;
            const double k = gamma.value()[i] * (*inv)[i];
            for (int bi = 0; bi < b; ++bi) {
                const auto off = static_cast<Eigen::Index>((bi * c + ci)) * s;
                auto gx = vec(x.grad()).segment(off, s);
                const auto g = cvec(o.grad).segment(off, s);
                if (training) {
                    const auto xh = (cvec(xv).segment(off, s).array() - (*mu)[i]) * (*inv)[i];
                    gx.array() += k * (g.array() - sg / count - xh * (sgx / count));
                } else {
                    gx.array() += k * g.array();
                }
            }
        }
    });
}

/// Mean over non-overlapping windows of `p` samples along the last
/// dimension; a trailing remainder is dropped.
inline Tensor avg_pool_time(const Tensor& x, int p) {
    const int t = x.dim(-1);
    const int to = t / p;
    require(to > 0, "avg_pool_time: window longer than signal");
    const int rows = static_cast<int>(x.size()) / t;
    Shape s = x.shape();
    s.back() = to;
    Buffer out(static_cast<std::size_t>(rows) * static_cast<std::size_t>(to));
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < to; ++j) {
            double acc = 0;
            for (int q = 0; q < p; ++q) acc += x.value()[static_cast<std::size_t>(r * t + j * p + q)];
            out[static_cast<std::size_t>(r * to + j)] = acc / p;
        }
    return make_result(std::move(s), std::move(out), {x}, [x, p, t, to, rows](Node& o) {
        auto& gx = x.grad();
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < to; ++j) {
                const double g = o.grad[static_cast<std::size_t>(r * to + j)] / p;
                for (int q = 0; q < p; ++q) gx[static_cast<std::size_t>(r * t + j * p + q)] += g;
            }
    });
}

namespace detail {

// y(t) += sum_k w[k] * x(t + k - pad), zero outside [0, n).
inline void correlate_add(const double* x, const double* w, int k, int pad, int n, double scale, double* y) {
    Eigen::Map<Eigen::VectorXd> ym(y, n);
    Eigen::Map<const Eigen::VectorXd> xm(x, n);
    for (int j = 0; j < k; ++j) {
        const int shift = j - pad;
        const int t0 = std::max(0, -shift), t1 = std::min(n, n - shift);
        if (t1 > t0) ym.segment(t0, t1 - t0) += (scale * w[j]) * xm.segment(t0 + shift, t1 - t0);
    }
}

// Adjoint of correlate_add with respect to x: gx(v) += sum_k w[k] * g(v - k + pad).
inline void correlate_adjoint_x(const double* g, const double* w, int k, int pad, int n, double scale, double* gx) {
    Eigen::Map<Eigen::VectorXd> gm(gx, n);
    Eigen::Map<const Eigen::VectorXd> g_(g, n);
    for (int j = 0; j < k; ++j) {
        const int shift = j - pad;
        const int t0 = std::max(0, -shift), t1 = std::min(n, n - shift);
        if (t1 > t0) gm.segment(t0 + shift, t1 - t0) += (scale * w[j]) * g_.segment(t0, t1 - t0);
    }
}

// Adjoint with respect to w: gw[k] += sum_t g(t) * x(t + k - pad).
inline void correlate_adjoint_w(const double* g, const double* x, int k, int pad, int n, double scale, double* gw) {
    Eigen::Map<const Eigen::VectorXd> g_(g, n);
    Eigen::Map<const Eigen::VectorXd> xm(x, n);
    for (int j = 0; j < k; ++j) {
        const int shift = j - pad;
        const int t0 = std::max(0, -shift), t1 = std::min(n, n - shift);
        if (t1 > t0) gw[j] += scale * g_.segment(t0, t1 - t0).dot(xm.segment(t0 + shift, t1 - t0));
    }
}

}  // namespace detail

/// Temporal convolution applied to every electrode row with each of F
/// filters (no bias): x [B, R, T], w [F, K] -> [B, F, R, T].
inline Tensor temporal_conv(const Tensor& x, const Tensor& w, int pad_left) {
    require(x.rank() == 3 && w.rank() == 2, "temporal_conv: shapes");
    const int b = x.dim(0), r = x.dim(1), t = x.dim(2), f = w.dim(0), k = w.dim(1);
    Buffer out(static_cast<std::size_t>(b) * f * r * t, 0.0);
    for (int bi = 0; bi < b; ++bi)
        for (int fi = 0; fi < f; ++fi)
            for (int ri = 0; ri < r; ++ri)
                detail::correlate_add(&x.value()[static_cast<std::size_t>((bi * r + ri) * t)], &w.value()[static_cast<std::size_t>(fi * k)], k,
                                      pad_left, t, 1.0, &out[static_cast<std::size_t>(((bi * f + fi) * r + ri) * t)]);
    return make_result({b, f, r, t}, std::move(out), {x, w}, [x, w, b, r, t, f, k, pad_left](Node& o) {
        for (int bi = 0; bi < b; ++bi)
            for (int fi = 0; fi < f; ++fi)
                for (int ri = 0; ri < r; ++ri) {
                    const double* g = &o.grad[static_cast<std::size_t>(((bi * f + fi) * r + ri) * t)];
                    const auto xo = static_cast<std::size_t>((bi * r + ri) * t);
                    if (w.requires_grad()) detail::correlate_adjoint_w(g, &x.value()[xo], k, pad_left, t, 1.0, &w.grad()[static_cast<std::size_t>(fi * k)]);
                    if (x.requires_grad()) detail::correlate_adjoint_x(g, &w.value()[static_cast<std::size_t>(fi * k)], k, pad_left, t, 1.0, &x.grad()[xo]);
                }
    });
}

/// Depthwise spatial convolution over the electrode axis, D outputs per
/// input filter (no bias): x [B, F, R, T], w [F*D, R] -> [B, F*D, T].
inline Tensor depthwise_spatial(const Tensor& x, const Tensor& w) {
    require(x.rank() == 4 && w.rank() == 2 && w.dim(1) == x.dim(2) && w.dim(0) % x.dim(1) == 0, "depthwise_spatial: shapes");
    const int b = x.dim(0), f = x.dim(1), r = x.dim(2), t = x.dim(3), o = w.dim(0), d = o / f;
    Buffer out(static_cast<std::size_t>(b) * o * t);
    for (int bi = 0; bi < b; ++bi)
        for (int fi = 0; fi < f; ++fi)
            mat(out, b * o, t).middleRows(bi * o + fi * d, d).noalias() =
                cmat(w.value(), o, r).middleRows(fi * d, d) * cmat(x.value(), b * f * r, t).middleRows((bi * f + fi) * r, r);
    return make_result({b, o, t}, std::move(out), {x, w}, [x, w, b, f, r, t, o, d](Node& n) {
        const auto g = cmat(n.grad, b * o, t);
        for (int bi = 0; bi < b; ++bi)
            for (int fi = 0; fi < f; ++fi) {
                const auto gb = g.middleRows(bi * o + fi * d, d);
                if (w.requires_grad())
                    mat(w.grad(), o, r).middleRows(fi * d, d).noalias() += gb * cmat(x.value(), b * f * r, t).middleRows((bi * f + fi) * r, r).transpose();
                if (x.requires_grad())
                    mat(x.grad(), b * f * r, t).middleRows((bi * f + fi) * r, r).noalias() += cmat(w.value(), o, r).middleRows(fi * d, d).transpose() * gb;
            }
    });
}

/// Per-channel temporal convolution (no bias): x [B, C, T], w [C, K].
inline Tensor depthwise_temporal(const Tensor& x, const Tensor& w, int pad_left) {
    require(x.rank() == 3 && w.rank() == 2 && w.dim(0) == x.dim(1), "depthwise_temporal: shapes");
    const int b = x.dim(0), c = x.dim(1), t = x.dim(2), k = w.dim(1);
    Buffer out(x.size(), 0.0);
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const auto off = static_cast<std::size_t>((bi * c + ci) * t);
            detail::correlate_add(&x.value()[off], &w.value()[static_cast<std::size_t>(ci * k)], k, pad_left, t, 1.0, &out[off]);
        }
    return make_result(x.shape(), std::move(out), {x, w}, [x, w, b, c, t, k, pad_left](Node& o) {
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) {
                const auto off = static_cast<std::size_t>((bi * c + ci) * t);
                if (w.requires_grad()) detail::correlate_adjoint_w(&o.grad[off], &x.value()[off], k, pad_left, t, 1.0, &w.grad()[static_cast<std::size_t>(ci * k)]);
                if (x.requires_grad()) detail::correlate_adjoint_x(&o.grad[off], &w.value()[static_cast<std::size_t>(ci * k)], k, pad_left, t, 1.0, &x.grad()[off]);
            }
    });
}

/// 1x1 convolution mixing channels (no bias): x [B, C, T], w [C2, C] -> [B, C2, T].
inline Tensor pointwise(const Tensor& x, const Tensor& w) {
    require(x.rank() == 3 && w.rank() == 2 && w.dim(1) == x.dim(1), "pointwise: shapes");
    const int b = x.dim(0), c = x.dim(1), t = x.dim(2), c2 = w.dim(0);
    Buffer out(static_cast<std::size_t>(b) * c2 * t);
    for (int bi = 0; bi < b; ++bi)
        mat(out, b * c2, t).middleRows(bi * c2, c2).noalias() = cmat(w.value(), c2, c) * cmat(x.value(), b * c, t).middleRows(bi * c, c);
    return make_result({b, c2, t}, std::move(out), {x, w}, [x, w, b, c, t, c2](Node& o) {
        const auto g = cmat(o.grad, b * c2, t);
        for (int bi = 0; bi < b; ++bi) {
            if (w.requires_grad()) mat(w.grad(), c2, c).noalias() += g.middleRows(bi * c2, c2) * cmat(x.value(), b * c, t).middleRows(bi * c, c).transpose();
            if (x.requires_grad()) mat(x.grad(), b * c, t).middleRows(bi * c, c).noalias() += cmat(w.value(), c2, c).transpose() * g.middleRows(bi * c2, c2);
        }
    });
}

/// temporal_conv -> batch_norm -> depthwise_spatial in one pass.
///
/// Both convolutions are linear and the normalization is affine per
/// temporal filter, so the spatial projection can be applied first and the
/// temporal filter run on F*D projected series instead of F*R electrode
/// series. Batch statistics of the (never materialized) temporal output come
/// from sums of s(u) and lagged products s(u) s(u+L) over batch and
/// electrodes. Matches the unfused composition up to rounding. The input is
/// treated as data: no gradient flows to `x`.
inline Tensor fused_temporal_spatial(const Tensor& x, const Tensor& wt, const Tensor& ws, const Tensor& gamma,
                                     const Tensor& beta, BatchNormState& state, bool training, int pad_left) {
    require(x.rank() == 3 && wt.rank() == 2 && ws.rank() == 2 && ws.dim(1) == x.dim(1) && ws.dim(0) % wt.dim(0) == 0,
            "fused_temporal_spatial: shapes");
    require(!x.requires_grad() || !grad_enabled(), "fused_temporal_spatial: input gradients are not supported");
    const int b = x.dim(0), r = x.dim(1), t = x.dim(2), f = wt.dim(0), k = wt.dim(1), o = ws.dim(0), d = o / f;
    require(static_cast<int>(gamma.size()) == f && static_cast<int>(beta.size()) == f, "fused_temporal_spatial: affine size");
    const auto& xv = x.value();
    const double count = static_cast<double>(b) * r * t;

    // Per-filter statistics.
    auto mu = std::make_shared<Buffer>(static_cast<std::size_t>(f));
    auto sigma = std::make_shared<Buffer>(static_cast<std::size_t>(f));
    auto mvec = std::make_shared<Eigen::VectorXd>(Eigen::VectorXd::Zero(k));  // m_j = sum of inputs seen by tap j
    auto gram = std::make_shared<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(k, k));
    if (training) {
        Eigen::VectorXd tot = Eigen::VectorXd::Zero(t);
        // lag[L](u) = sum over batch and electrodes of s(u) s(u + L).
        Eigen::MatrixXd lag = Eigen::MatrixXd::Zero(t, k);
        for (int row = 0; row < b * r; ++row) {
            const auto s = cvec(xv).segment(static_cast<Eigen::Index>(row) * t, t);
            tot += s;
            for (int l = 0; l < k && l < t; ++l) lag.col(l).head(t - l).array() += s.head(t - l).array() * s.tail(t - l).array();
        }
        Eigen::VectorXd ptot(t + 1);
        ptot(0) = 0;
        for (int u = 0; u < t; ++u) ptot(u + 1) = ptot(u) + tot(u);
        Eigen::MatrixXd plag = Eigen::MatrixXd::Zero(t + 1, k);
        for (int u = 0; u < t; ++u) plag.row(u + 1) = plag.row(u) + lag.row(u);
        for (int j = 0; j < k; ++j) {
            const int a = j - pad_left;
            const int u0 = std::max(0, a), u1 = std::min(t, t + a);
            (*mvec)(j) = u1 > u0 ? ptot(u1) - ptot(u0) : 0.0;
        }
        for (int j = 0; j < k; ++j)
            for (int j2 = j; j2 < k; ++j2) {
                const int a = j - pad_left, l = j2 - j;
                const int u0 = std::max(a, 0), u1 = std::min(a + t, t - l);
                const double v = u1 > u0 ? plag(u1, l) - plag(u0, l) : 0.0;
                (*gram)(j, j2) = (*gram)(j2, j) = v;
            }
        for (int fi = 0; fi < f; ++fi) {
            const auto w = cvec(wt.value()).segment(fi * k, k);
            const double m = w.dot(*mvec) / count;
            const double e2 = w.dot(*gram * w) / count;
            const double var = std::max(e2 - m * m, 0.0);
            (*mu)[static_cast<std::size_t>(fi)] = m;
            (*sigma)[static_cast<std::size_t>(fi)] = std::sqrt(var + state.eps);
            state.update(fi, m, var, count);
        }
    } else {
        for (int fi = 0; fi < f; ++fi) {
            (*mu)[static_cast<std::size_t>(fi)] = state.running_mean[static_cast<std::size_t>(fi)];
            (*sigma)[static_cast<std::size_t>(fi)] = std::sqrt(state.running_var[static_cast<std::size_t>(fi)] + state.eps);
        }
    }

    // Spatial projections u = Ws x, then temporal filtering of each projection.
    auto proj = std::make_shared<Buffer>(static_cast<std::size_t>(b) * o * t);
    for (int bi = 0; bi < b; ++bi)
        mat(*proj, b * o, t).middleRows(bi * o, o).noalias() = cmat(ws.value(), o, r) * cmat(xv, b * r, t).middleRows(bi * r, r);
    auto rconv = std::make_shared<Buffer>(proj->size(), 0.0);
    for (int bi = 0; bi < b; ++bi)
        for (int oi = 0; oi < o; ++oi) {
            const auto off = static_cast<std::size_t>((bi * o + oi) * t);
            detail::correlate_add(&(*proj)[off], &wt.value()[static_cast<std::size_t>((oi / d) * k)], k, pad_left, t, 1.0, &(*rconv)[off]);
        }
    const Eigen::VectorXd omega = cmat(ws.value(), o, r).rowwise().sum();
    Buffer out(proj->size());
    for (int bi = 0; bi < b; ++bi)
        for (int oi = 0; oi < o; ++oi) {
            const auto fi = static_cast<std::size_t>(oi / d);
            const double a = gamma.value()[fi] / (*sigma)[fi];
            const double shift = -a * (*mu)[fi] * omega(oi) + beta.value()[fi] * omega(oi);
            const auto off = static_cast<Eigen::Index>(bi * o + oi) * t;
            vec(out).segment(off, t) = (a * cvec(*rconv).segment(off, t).array() + shift).matrix();
        }
    return make_result({b, o, t}, std::move(out), {wt, ws, gamma, beta},
                       [x, wt, ws, gamma, beta, mu, sigma, mvec, gram, proj, rconv, omega, b, r, t, f, k, o, d, count, training, pad_left](Node& n) {
        const auto& g = n.grad;
        Buffer gsum(static_cast<std::size_t>(o), 0.0);  // sum over b, t of g
        Buffer grs(static_cast<std::size_t>(o), 0.0);   // sum over b, t of g * r
        for (int bi = 0; bi < b; ++bi)
            for (int oi = 0; oi < o; ++oi) {
                const auto off = static_cast<Eigen::Index>(bi * o + oi) * t;
                gsum[static_cast<std::size_t>(oi)] += cvec(g).segment(off, t).sum();
                grs[static_cast<std::size_t>(oi)] += cvec(g).segment(off, t).dot(cvec(*rconv).segment(off, t));
            }
        Buffer d_a(static_cast<std::size_t>(f), 0.0), d_mu(static_cast<std::size_t>(f), 0.0);
        Eigen::VectorXd d_omega(o);
        for (int oi = 0; oi < o; ++oi) {
            const auto fi = static_cast<std::size_t>(oi / d);
            const auto oo = static_cast<std::size_t>(oi);
            const double a = gamma.value()[fi] / (*sigma)[fi];
            d_a[fi] += grs[oo] - (*mu)[fi] * omega(oi) * gsum[oo];
            d_mu[fi] += -a * omega(oi) * gsum[oo];
            d_omega(oi) = gsum[oo] * (beta.value()[fi] - a * (*mu)[fi]);
            if (beta.requires_grad()) beta.grad()[fi] += omega(oi) * gsum[oo];
        }
        if (gamma.requires_grad())
            for (int fi = 0; fi < f; ++fi) gamma.grad()[static_cast<std::size_t>(fi)] += d_a[static_cast<std::size_t>(fi)] / (*sigma)[static_cast<std::size_t>(fi)];
        // Through the temporal filter: dr = a * g.
        Buffer du(proj->size(), 0.0);
        for (int bi = 0; bi < b; ++bi)
            for (int oi = 0; oi < o; ++oi) {
                const auto fi = static_cast<std::size_t>(oi / d);
                const double a = gamma.value()[fi] / (*sigma)[fi];
                const auto off = static_cast<std::size_t>((bi * o + oi) * t);
                const double* wf = &wt.value()[fi * static_cast<std::size_t>(k)];
                if (wt.requires_grad()) detail::correlate_adjoint_w(&g[off], &(*proj)[off], k, pad_left, t, a, &wt.grad()[fi * static_cast<std::size_t>(k)]);
                if (ws.requires_grad()) detail::correlate_adjoint_x(&g[off], wf, k, pad_left, t, a, &du[off]);
            }
        if (ws.requires_grad()) {
            auto gw = mat(ws.grad(), o, r);
            for (int bi = 0; bi < b; ++bi)
                gw.noalias() += cmat(du, b * o, t).middleRows(bi * o, o) * cmat(x.value(), b * r, t).middleRows(bi * r, r).transpose();
            gw.colwise() += d_omega;
        }
        // Batch statistics depend on the temporal weights.
        if (training && wt.requires_grad()) {
            for (int fi = 0; fi < f; ++fi) {
                const auto i = static_cast<std::size_t>(fi);
                const double s = (*sigma)[i];
                const double d_sigma = -d_a[i] * gamma.value()[i] / (s * s);
                const double d_var = d_sigma / (2 * s);
                const auto w = cvec(wt.value()).segment(fi * k, k);
                vec(wt.grad()).segment(fi * k, k) += (2 * d_var / count) * (*gram * w) + ((d_mu[i] - 2 * (*mu)[i] * d_var) / count) * *mvec;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Segment operations: rows of a [N, ...] tensor grouped by offsets (size G+1).

/// Softmax over the rows of each segment of a column vector [N, 1].
inline Tensor segment_softmax(const Tensor& s, std::span<const int> offsets) {
    require(s.dim(-1) == 1 && offsets.back() == static_cast<int>(s.size()), "segment_softmax: shapes");
    Buffer out(s.size());
    for (std::size_t gi = 0; gi + 1 < offsets.size(); ++gi) {
        const int a = offsets[gi], e = offsets[gi + 1];
        require(e > a, "segment_softmax: empty segment");
        const auto seg = cvec(s.value()).segment(a, e - a);
        const double mx = seg.maxCoeff();
        auto y = vec(out).segment(a, e - a);
        y = (seg.array() - mx).exp().matrix();
        y /= y.sum();
    }
    std::vector<int> off(offsets.begin(), offsets.end());
    return make_result(s.shape(), std::move(out), {s}, [s, off](Node& o) {
        for (std::size_t gi = 0; gi + 1 < off.size(); ++gi) {
            const int a = off[gi], e = off[gi + 1];
            const auto y = cvec(o.value).segment(a, e - a);
            const auto g = cvec(o.grad).segment(a, e - a);
            const double dot = y.dot(g);
            vec(s.grad()).segment(a, e - a).array() += y.array() * (g.array() - dot);
        }
    });
}

/// For each segment, the weighted sum of value rows: w [N, 1], v [N, C] -> [G, C].
inline Tensor segment_weighted_sum(const Tensor& w, const Tensor& v, std::span<const int> offsets) {
    require(v.rank() == 2 && w.size() == static_cast<std::size_t>(v.dim(0)) && offsets.back() == v.dim(0), "segment_weighted_sum: shapes");
    const int c = v.dim(1);
    const int groups = static_cast<int>(offsets.size()) - 1;
    Buffer out(static_cast<std::size_t>(groups) * c);
    for (int gi = 0; gi < groups; ++gi) {
        const int a = offsets[static_cast<std::size_t>(gi)], e = offsets[static_cast<std::size_t>(gi) + 1];
        mat(out, groups, c).row(gi).noalias() = cvec(w.value()).segment(a, e - a).transpose() * cmat(v.value(), v.dim(0), c).middleRows(a, e - a);
    }
    std::vector<int> off(offsets.begin(), offsets.end());
    return make_result({groups, c}, std::move(out), {w, v}, [w, v, off, c, groups](Node& o) {
        const int n = v.dim(0);
        for (int gi = 0; gi < groups; ++gi) {
            const int a = off[static_cast<std::size_t>(gi)], e = off[static_cast<std::size_t>(gi) + 1];
            const auto go = cmat(o.grad, groups, c).row(gi);
            if (w.requires_grad()) vec(w.grad()).segment(a, e - a).noalias() += cmat(v.value(), n, c).middleRows(a, e - a) * go.transpose();
            if (v.requires_grad()) mat(v.grad(), n, c).middleRows(a, e - a).noalias() += cvec(w.value()).segment(a, e - a) * go;
        }
    });
}

/// Mean of the rows of each segment: x [N, C] -> [G, C].
inline Tensor segment_mean(const Tensor& x, std::span<const int> offsets) {
    Buffer w(x.size() / static_cast<std::size_t>(x.dim(-1)));
    for (std::size_t gi = 0; gi + 1 < offsets.size(); ++gi)
        for (int i = offsets[gi]; i < offsets[gi + 1]; ++i) w[static_cast<std::size_t>(i)] = 1.0 / (offsets[gi + 1] - offsets[gi]);
    const int n = static_cast<int>(w.size());
    return segment_weighted_sum(Tensor::from({n, 1}, std::move(w)), x, offsets);
}

/// Scaled dot-product self-attention for each segment, with `heads` heads.
/// qkv [N, 3*D] holds the projected queries, keys and values side by side;
/// returns the concatenated head outputs [N, D]. Dropout `p` is applied to
/// the attention weights in training mode.
inline Tensor multi_head_attention_core(const Tensor& qkv, int heads, std::span<const int> offsets, double p, bool training,
                                        std::mt19937_64& rng) {
    require(qkv.rank() == 2 && qkv.dim(1) % (3 * heads) == 0 && offsets.back() == qkv.dim(0), "mha: shapes");
    const int n = qkv.dim(0), dm = qkv.dim(1) / 3, dh = dm / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto in = cmat(qkv.value(), n, 3 * dm);
    Buffer out(static_cast<std::size_t>(n) * dm);
    auto om = mat(out, n, dm);
    // Per segment and head: softmax weights and dropout-scaled weights.
    struct Cache {
        RowMat probs, used;
    };
    auto cache = std::make_shared<std::vector<Cache>>();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool drop = training && p > 0;
    for (std::size_t gi = 0; gi + 1 < offsets.size(); ++gi) {
        const int a = offsets[gi], len = offsets[gi + 1] - offsets[gi];
        for (int h = 0; h < heads; ++h) {
            const auto q = in.block(a, h * dh, len, dh);
            const auto kk = in.block(a, dm + h * dh, len, dh);
            const auto v = in.block(a, 2 * dm + h * dh, len, dh);
            RowMat s = sc * (q * kk.transpose());
            for (int i = 0; i < len; ++i) {
                s.row(i).array() -= s.row(i).maxCoeff();
                s.row(i) = s.row(i).array().exp().matrix();
                s.row(i) /= s.row(i).sum();
            }
            RowMat used = s;
            if (drop)
                for (Eigen::Index i = 0; i < used.size(); ++i) used.data()[i] *= u(rng) >= p ? 1.0 / (1.0 - p) : 0.0;
            om.block(a, h * dh, len, dh).noalias() = used * v;
            cache->push_back({std::move(s), std::move(used)});
        }
    }
    std::vector<int> off(offsets.begin(), offsets.end());
    return make_result({n, dm}, std::move(out), {qkv}, [qkv, off, heads, n, dm, dh, sc, cache](Node& o) {
        const auto in = cmat(qkv.value(), n, 3 * dm);
        auto gin = mat(qkv.grad(), n, 3 * dm);
        const auto go = cmat(o.grad, n, dm);
        std::size_t ci = 0;
        for (std::size_t gi = 0; gi + 1 < off.size(); ++gi) {
            const int a = off[gi], len = off[gi + 1] - off[gi];
            for (int h = 0; h < heads; ++h, ++ci) {
                const auto& [probs, used] = (*cache)[ci];
                const auto q = in.block(a, h * dh, len, dh);
                const auto kk = in.block(a, dm + h * dh, len, dh);
                const auto v = in.block(a, 2 * dm + h * dh, len, dh);
                const auto g = go.block(a, h * dh, len, dh);
                gin.block(a, 2 * dm + h * dh, len, dh).noalias() += used.transpose() * g;
                RowMat d_used = g * v.transpose();
                // Dropout mask is used / probs where probs > 0.
                RowMat d_probs(len, len);
                for (Eigen::Index i = 0; i < d_probs.size(); ++i)
                    d_probs.data()[i] = probs.data()[i] > 0 ? d_used.data()[i] * used.data()[i] / probs.data()[i] : 0.0;
                RowMat ds(len, len);
                for (int i = 0; i < len; ++i) {
                    const double dot = probs.row(i).dot(d_probs.row(i));
                    ds.row(i) = (probs.row(i).array() * (d_probs.row(i).array() - dot)).matrix();
                }
                gin.block(a, h * dh, len, dh).noalias() += sc * (ds * kk);
                gin.block(a, dm + h * dh, len, dh).noalias() += sc * (ds.transpose() * q);
            }
        }
    });
}

}  // namespace eegscreen::ad
