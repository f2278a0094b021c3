#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "eegscreen/common.hpp"

namespace eegscreen {

/// Average ranks (1-based), ties share their midrank.
inline std::vector<double> midranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mid;
        i = j + 1;
    }
    return r;
}

/// Area under the ROC curve for label 1 as the positive class,
/// via the Mann-Whitney U statistic with midranks.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw Error("InvalidArgument", "scores and labels differ in length");
    const auto r = midranks(scores);
    double n_pos = 0, rank_sum = 0;
    for (std::size_t i = 0; i < r.size(); ++i)
        if (labels[i] == 1) {
            n_pos += 1;
            rank_sum += r[i];
        }
    const double n_neg = static_cast<double>(r.size()) - n_pos;
    if (n_pos == 0 || n_neg == 0) throw Error("SingleClass", "AUC needs both classes");
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

/// Fraction of correct decisions; score >= threshold predicts class 1.
inline double acc(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5) {
    if (scores.size() != labels.size()) throw Error("InvalidArgument", "scores and labels differ in length");
    if (scores.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) ok += (scores[i] >= threshold ? 1 : 0) == labels[i];
    return static_cast<double>(ok) / static_cast<double>(scores.size());
}

struct Summary {
    double mean = 0, sd = 0, se = 0;
};

/// Mean, sample standard deviation (n-1) and standard error.
inline Summary summarize(std::span<const double> v) {
    Summary s;
    if (v.empty()) return s;
    if (std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; })) {
        s.mean = v[0];
        return s;
    }
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
        s.se = s.sd / std::sqrt(static_cast<double>(v.size()));
    }
    return s;
}

}  // namespace eegscreen
