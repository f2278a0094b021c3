#pragma once

// Saturation power law metric(n) = asymptote - alpha * n^(-beta).

#include <Eigen/Dense>
#include <unsupported/Eigen/LevenbergMarquardt>

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "eegscreen/common.hpp"

namespace eegscreen {

struct ScalingPoint {
    double n = 0;       // recordings
    double metric = 0;  // percent
    double sigma = 0;   // optional standard error, 0 = unweighted
};

struct PowerLawFit {
    double asymptote = 0;
    double alpha = 0;
    double beta = 0;
    Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();  // (asymptote, alpha, beta)
    double r_squared = 0;
    double rss = 0;
    bool converged = false;

    double asymptote_se() const { return std::sqrt(covariance(0, 0)); }
    double operator()(double n) const { return asymptote - alpha * std::pow(n, -beta); }
};

namespace detail {

// Residuals in units scaled by n0 so that alpha stays O(1).
struct PowerLawFunctor : Eigen::DenseFunctor<double> {
    std::vector<double> x, y, w;
    PowerLawFunctor(std::vector<double> x_, std::vector<double> y_, std::vector<double> w_)
        : DenseFunctor<double>(3, static_cast<int>(x_.size())), x(std::move(x_)), y(std::move(y_)), w(std::move(w_)) {}

    int operator()(const InputType& p, ValueType& f) const {
        for (std::size_t i = 0; i < x.size(); ++i) f(static_cast<Eigen::Index>(i)) = w[i] * (p(0) - p(1) * std::pow(x[i], -p(2)) - y[i]);
        return 0;
    }
    int df(const InputType& p, JacobianType& j) const {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            const double xb = std::pow(x[i], -p(2));
            j(r, 0) = w[i];
            j(r, 1) = -w[i] * xb;
            j(r, 2) = w[i] * p(1) * xb * std::log(x[i]);
        }
        return 0;
    }
};

}  // namespace detail

/// Least-squares fit from a grid of starting exponents (0.1 to 1.5); for
/// each start, asymptote and alpha come from the linear problem at that
/// exponent. Parameter covariance is s^2 (J'J)^-1 with s^2 = RSS / (n - 3).
/// Per-point sigmas, when all positive, weight the residuals.
inline PowerLawFit fit_power_law(std::span<const ScalingPoint> pts) {
    if (pts.size() < 4) throw Error("TooFewPoints", "power-law fit needs at least 4 points");
    const bool weighted = std::all_of(pts.begin(), pts.end(), [](const ScalingPoint& p) { return p.sigma > 0; });
    const double n0 = pts[0].n;
    std::vector<double> x, y, w;
    for (const auto& p : pts) {
        if (!(p.n > 0)) throw Error("InvalidArgument", "n must be positive");
        x.push_back(p.n / n0);
        y.push_back(p.metric);
        w.push_back(weighted ? 1.0 / p.sigma : 1.0);
    }
    detail::PowerLawFunctor fn(x, y, w);
    PowerLawFit best;
    best.rss = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_p;
    for (int s = 1; s <= 15; ++s) {
        const double b0 = 0.1 * s;
        Eigen::MatrixXd a(static_cast<Eigen::Index>(x.size()), 2);
        Eigen::VectorXd rhs(static_cast<Eigen::Index>(x.size()));
        for (std::size_t i = 0; i < x.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            a(r, 0) = w[i];
            a(r, 1) = -w[i] * std::pow(x[i], -b0);
            rhs(r) = w[i] * y[i];
        }
        const Eigen::Vector2d lin = a.colPivHouseholderQr().solve(rhs);
        Eigen::VectorXd p(3);
        p << lin(0), lin(1), b0;
        Eigen::LevenbergMarquardt<detail::PowerLawFunctor> lm(fn);
        lm.setMaxfev(4000);
        lm.setXtol(1e-15);
        lm.setFtol(1e-15);
        lm.setGtol(0);
        const auto status = lm.minimize(p);
        if (!p.allFinite() || !(p(2) > 0)) continue;
        const bool ok = status != Eigen::LevenbergMarquardtSpace::ImproperInputParameters &&
                        status != Eigen::LevenbergMarquardtSpace::TooManyFunctionEvaluation;
        Eigen::VectorXd f(static_cast<Eigen::Index>(x.size()));
        fn(p, f);
        const double rss = f.squaredNorm();
        if (rss < best.rss * (1 - 1e-12) || (!best.converged && ok && rss <= best.rss * (1 + 1e-9))) {
            best.rss = rss;
            best.converged = ok;
            best_p = p;
        }
    }
    if (best_p.size() == 0) return best;  // converged == false
    const double a = best_p(0), alpha_s = best_p(1), beta = best_p(2);
    Eigen::MatrixXd j(static_cast<Eigen::Index>(x.size()), 3);
    fn.df(best_p, j);
    const double dof = static_cast<double>(x.size()) - 3;
    Eigen::Matrix3d cov_s = Eigen::Matrix3d::Zero();
    if (dof > 0) {
        const Eigen::Matrix3d jtj = j.transpose() * j;
        Eigen::FullPivLU<Eigen::Matrix3d> lu(jtj);
        if (lu.isInvertible()) cov_s = lu.inverse() * (best.rss / dof);
        else best.converged = false;
    }
    // Back to raw n: alpha = alpha_s * n0^beta.
    const double scale = std::pow(n0, beta);
    Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
    t(1, 1) = scale;
    t(1, 2) = alpha_s * scale * std::log(n0);
    best.asymptote = a;
    best.alpha = alpha_s * scale;
    best.beta = beta;
    best.covariance = t * cov_s * t.transpose();
    double mean = 0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double tss = 0, rss_u = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        tss += (y[i] - mean) * (y[i] - mean);
        const double r = y[i] - best(pts[i].n);
        rss_u += r * r;
    }
    best.r_squared = tss > 0 ? 1 - rss_u / tss : 1.0;
    best.converged = best.converged && std::isfinite(best.asymptote_se());
    return best;
}

inline PowerLawFit fit_power_law(const std::vector<ScalingPoint>& pts) {
    return fit_power_law(std::span<const ScalingPoint>(pts));
}

/// Recordings needed for the curve to come within `asymptote_se` of the
/// asymptote: (alpha / se)^(1 / beta).
inline double n_db(const PowerLawFit& fit, double asymptote_se) {
    if (!fit.converged) throw Error("NoConvergence", "power-law fit did not converge");
    if (!(asymptote_se > 0)) throw Error("InvalidArgument", "standard error must be positive");
    return std::pow(fit.alpha / asymptote_se, 1.0 / fit.beta);
}

inline double n_db(const PowerLawFit& fit) { return n_db(fit, fit.asymptote_se()); }

}  // namespace eegscreen
