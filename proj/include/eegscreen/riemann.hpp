#pragma once

// Affine-invariant geometry on symmetric positive definite matrices.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "eegscreen/common.hpp"

namespace eegscreen {

using SpdMatrix = Eigen::MatrixXd;

class NotSpd : public Error {
public:
    explicit NotSpd(const std::string& msg) : Error("NotSpd", msg) {}
};

/// Applies a scalar function to the eigenvalues of a symmetric matrix.
template <class F>
SpdMatrix spd_apply(const SpdMatrix& m, F&& f) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw NotSpd("eigendecomposition failed");
    Eigen::VectorXd d = es.eigenvalues().unaryExpr(f);
    return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

inline void require_spd(const SpdMatrix& m) {
    if (m.rows() != m.cols() || m.rows() == 0) throw NotSpd("matrix is not square");
    if (!m.allFinite()) throw NotSpd("matrix has non-finite entries");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 0) throw NotSpd("matrix has a non-positive eigenvalue");
}

inline SpdMatrix spd_sqrt(const SpdMatrix& m) { return spd_apply(m, [](double v) { return std::sqrt(v); }); }
inline SpdMatrix spd_invsqrt(const SpdMatrix& m) { return spd_apply(m, [](double v) { return 1.0 / std::sqrt(v); }); }
inline SpdMatrix spd_log(const SpdMatrix& m) { return spd_apply(m, [](double v) { return std::log(v); }); }
inline SpdMatrix sym_exp(const SpdMatrix& m) { return spd_apply(m, [](double v) { return std::exp(v); }); }

inline SpdMatrix symmetrize(const SpdMatrix& m) { return 0.5 * (m + m.transpose()); }

/// Sample covariance of a channel-major frame (mean removed, divisor n),
/// plus a ridge of 1e-6 * trace / n_channels (at least 1e-12) on the diagonal.
inline SpdMatrix frame_covariance(std::span<const float> frame, int n_channels = kNumChannels) {
    const int n = static_cast<int>(frame.size()) / n_channels;
    Eigen::MatrixXd x(n_channels, n);
    for (int c = 0; c < n_channels; ++c)
        for (int t = 0; t < n; ++t) x(c, t) = frame[static_cast<std::size_t>(c * n + t)];
    x.colwise() -= x.rowwise().mean();
    SpdMatrix cov = symmetrize(x * x.transpose() / n);
    const double eps = std::max(1e-6 * cov.trace() / n_channels, 1e-12);
    cov.diagonal().array() += eps;
    return cov;
}

struct KarcherResult {
    SpdMatrix mean;
    int iterations = 0;
    bool converged = false;
};

/// Affine-invariant Karcher mean by fixed-point iteration from the
/// arithmetic mean. Stops when the Frobenius norm of the mean tangent
/// vector drops below `tol` or after `max_iter` updates.
inline KarcherResult riemannian_mean(std::span<const SpdMatrix> mats, double tol = 1e-9, int max_iter = 50) {
    if (mats.empty()) throw Error("InvalidArgument", "riemannian_mean needs at least one matrix");
    KarcherResult r;
    r.mean = SpdMatrix::Zero(mats[0].rows(), mats[0].cols());
    for (const auto& m : mats) r.mean += m;
    r.mean /= static_cast<double>(mats.size());
    for (r.iterations = 0; r.iterations <= max_iter; ++r.iterations) {
        const SpdMatrix s = spd_sqrt(r.mean);
        const SpdMatrix is = spd_invsqrt(r.mean);
        SpdMatrix t = SpdMatrix::Zero(r.mean.rows(), r.mean.cols());
        for (const auto& m : mats) t += spd_log(symmetrize(is * m * is));
        t /= static_cast<double>(mats.size());
        if (t.norm() < tol) {
            r.converged = true;
            break;
        }
        if (r.iterations == max_iter) break;
        r.mean = symmetrize(s * sym_exp(t) * s);
    }
    return r;
}

inline KarcherResult riemannian_mean(const std::vector<SpdMatrix>& mats, double tol = 1e-9, int max_iter = 50) {
    return riemannian_mean(std::span<const SpdMatrix>(mats), tol, max_iter);
}

/// Closed-form geometric mean of two SPD matrices.
inline SpdMatrix geometric_mean2(const SpdMatrix& a, const SpdMatrix& b) {
    const SpdMatrix s = spd_sqrt(a), is = spd_invsqrt(a);
    return symmetrize(s * spd_sqrt(symmetrize(is * b * is)) * s);
}

/// Log-map of `m` at `ref`, whitened, as the upper triangle in row-major
/// order with off-diagonal entries scaled by sqrt(2).
inline std::vector<double> tangent_project(const SpdMatrix& ref, const SpdMatrix& m) {
    require_spd(ref);
    const SpdMatrix is = spd_invsqrt(ref);
    const SpdMatrix s = spd_log(symmetrize(is * m * is));
    const auto n = s.rows();
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n * (n + 1) / 2));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i; j < n; ++j) out.push_back(i == j ? s(i, j) : std::numbers::sqrt2 * s(i, j));
    return out;
}

/// Upper triangle (row-major) of a symmetric matrix and its inverse.
inline std::vector<double> upper_triangle(const SpdMatrix& m) {
    std::vector<double> out;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = i; j < m.cols(); ++j) out.push_back(m(i, j));
    return out;
}

inline SpdMatrix from_upper_triangle(std::span<const double> v, int n) {
    if (static_cast<int>(v.size()) != n * (n + 1) / 2) throw Error("InvalidArgument", "triangle length mismatch");
    SpdMatrix m(n, n);
    std::size_t k = 0;
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) m(i, j) = m(j, i) = v[k++];
    return m;
}

}  // namespace eegscreen
