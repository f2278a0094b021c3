#pragma once

// Rank tests: Kruskal-Wallis, Conover-Iman post hoc, Benjamini-Hochberg.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "eegscreen/metrics.hpp"

namespace eegscreen {

namespace special {

/// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x);

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
inline double gamma_q(double a, double x) {
    if (!(a > 0) || x < 0) throw Error("OutOfRange", "gamma_q domain");
    if (x == 0) return 1.0;
    const double lg = std::lgamma(a);
    if (x < a + 1) {
        // Series for P.
        double sum = 1.0 / a, term = sum;
        for (int n = 1; n < 10000; ++n) {
            term *= x / (a + n);
            sum += term;
            if (std::abs(term) < std::abs(sum) * 1e-16) break;
        }
        return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
    }
    // Continued fraction for Q (modified Lentz).
    constexpr double tiny = 1e-300;
    double b = x + 1 - a, c = 1 / tiny, d = 1 / b, h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -i * (i - a);
        b += 2;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1) < 1e-16) break;
    }
    return std::exp(-x + a * std::log(x) - lg) * h;
}

inline double gamma_p(double a, double x) { return 1.0 - gamma_q(a, x); }

namespace detail {

inline double beta_cf(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    const double qab = a + b, qap = a + 1, qam = a - 1;
    double c = 1, d = 1 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1 / d;
    double h = d;
    for (int m = 1; m < 10000; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1) < 1e-16) break;
    }
    return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double beta_inc(double a, double b, double x) {
    if (!(a > 0) || !(b > 0) || x < 0 || x > 1) throw Error("OutOfRange", "beta_inc domain");
    if (x == 0 || x == 1) return x;
    const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    if (x < (a + 1) / (a + b + 2)) return std::exp(lbt) * detail::beta_cf(a, b, x) / a;
    return 1 - std::exp(lbt) * detail::beta_cf(b, a, 1 - x) / b;
}

/// Survival function of the chi-square distribution.
inline double chi2_sf(double x, double dof) { return x <= 0 ? 1.0 : gamma_q(dof / 2, x / 2); }

/// Two-sided tail probability P(|T| >= |t|) of Student's t.
inline double t_two_sided(double t, double dof) {
    if (!std::isfinite(t)) return 0.0;
    return beta_inc(dof / 2, 0.5, dof / (dof + t * t));
}

}  // namespace special

struct KruskalResult {
    double h = 0;
    double p = 1;
    bool all_equal = false;  // every value tied; H undefined, reported as 0
};

namespace detail {

struct RankedGroups {
    std::vector<double> rank_mean;
    std::vector<double> size;
    double n = 0;
    double rank_sq_sum = 0;
    double tie_term = 0;  // sum over tie groups of t^3 - t
};

inline RankedGroups rank_groups(std::span<const std::vector<double>> groups) {
    if (groups.size() < 2) throw Error("InvalidArgument", "need at least two groups");
    std::vector<double> all;
    for (const auto& g : groups) {
        if (g.empty()) throw Error("InvalidArgument", "empty group");
        all.insert(all.end(), g.begin(), g.end());
    }
    const auto r = midranks(all);
    RankedGroups out;
    out.n = static_cast<double>(all.size());
    std::size_t k = 0;
    for (const auto& g : groups) {
        double s = 0;
        for (std::size_t i = 0; i < g.size(); ++i) s += r[k++];
        out.rank_mean.push_back(s / static_cast<double>(g.size()));
        out.size.push_back(static_cast<double>(g.size()));
    }
    for (double v : r) out.rank_sq_sum += v * v;
    auto sorted = all;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i);
        out.tie_term += t * t * t - t;
        i = j;
    }
    return out;
}

inline double kruskal_h(const RankedGroups& rg, bool& all_equal) {
    const double n = rg.n;
    double s = 0;
    for (std::size_t i = 0; i < rg.size.size(); ++i) s += rg.size[i] * rg.rank_mean[i] * rg.rank_mean[i];
    const double h = 12.0 / (n * (n + 1)) * s - 3 * (n + 1);
    const double corr = 1 - rg.tie_term / (n * n * n - n);
    all_equal = corr <= 0;
    return all_equal ? 0.0 : h / corr;
}

}  // namespace detail

/// Kruskal-Wallis H with tie correction; p from chi-square(k - 1).
inline KruskalResult kruskal_wallis(std::span<const std::vector<double>> groups) {
    const auto rg = detail::rank_groups(groups);
    KruskalResult r;
    r.h = detail::kruskal_h(rg, r.all_equal);
    r.p = r.all_equal ? 1.0 : special::chi2_sf(r.h, static_cast<double>(groups.size() - 1));
    return r;
}

inline KruskalResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
    return kruskal_wallis(std::span<const std::vector<double>>(groups));
}

/// Conover-Iman pairwise two-sided p-values (k x k, unit diagonal).
/// Uses the pooled rank variance scaled by (N - 1 - H) / (N - k) and a t
/// distribution with N - k degrees of freedom.
inline std::vector<std::vector<double>> conover_iman(std::span<const std::vector<double>> groups) {
    const auto rg = detail::rank_groups(groups);
    bool all_equal = false;
    const double h = detail::kruskal_h(rg, all_equal);
    const std::size_t k = groups.size();
    std::vector<std::vector<double>> p(k, std::vector<double>(k, 1.0));
    if (all_equal) return p;
    const double n = rg.n;
    const double s2 = rg.tie_term == 0 ? n * (n + 1) / 12 : (rg.rank_sq_sum - n * (n + 1) * (n + 1) / 4) / (n - 1);
    const double dof = n - static_cast<double>(k);
    const double vs = s2 * (n - 1 - h) / dof;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) {
            const double se = std::sqrt(vs * (1 / rg.size[i] + 1 / rg.size[j]));
            const double t = std::abs(rg.rank_mean[i] - rg.rank_mean[j]) / se;
            p[i][j] = p[j][i] = std::min(1.0, special::t_two_sided(t, dof));
        }
    return p;
}

inline std::vector<std::vector<double>> conover_iman(const std::vector<std::vector<double>>& groups) {
    return conover_iman(std::span<const std::vector<double>>(groups));
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
inline std::vector<double> fdr_adjust(std::span<const double> p) {
    for (double v : p)
        if (!(v >= 0 && v <= 1)) throw Error("OutOfRange", "p-value outside [0,1]");
    const std::size_t m = p.size();
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> q(m);
    double running = 1.0;
    for (std::size_t r = m; r-- > 0;) {
        running = std::min(running, p[idx[r]] * static_cast<double>(m) / static_cast<double>(r + 1));
        q[idx[r]] = std::min(running, 1.0);
    }
    return q;
}

}  // namespace eegscreen
