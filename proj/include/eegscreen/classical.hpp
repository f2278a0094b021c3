#pragma once

// Gradient-boosted trees (single model and seeded ensemble) and a random
// forest over recording feature vectors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"

#include "eegscreen/common.hpp"
#include "eegscreen/metrics.hpp"

namespace eegscreen::ml {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Binary tree; an internal node sends x to `left` when x[feature] <= threshold.
struct Tree {
    struct Node {
        int feature = -1;  // -1 for a leaf
        double threshold = 0;
        int left = -1, right = -1;
        double value = 0;
    };
    std::vector<Node> nodes;

    double predict(std::span<const double> x) const {
        int i = 0;
        while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
            const auto& n = nodes[static_cast<std::size_t>(i)];
            i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(i)].value;
    }
    int depth() const {
        std::vector<int> d(nodes.size(), 0);
        int best = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].feature >= 0) {
                d[static_cast<std::size_t>(nodes[i].left)] = d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
                best = std::max(best, d[i] + 1);
            }
        return best;
    }
};

inline nlohmann::json to_json(const Tree& t) {
    nlohmann::json f = nlohmann::json::array(), th = nlohmann::json::array(), l = nlohmann::json::array(), r = nlohmann::json::array(),
                   v = nlohmann::json::array();
    for (const auto& n : t.nodes) {
        f.push_back(n.feature);
        th.push_back(n.threshold);
        l.push_back(n.left);
        r.push_back(n.right);
        v.push_back(n.value);
    }
    return {{"feature", f}, {"threshold", th}, {"left", l}, {"right", r}, {"value", v}};
}

inline Tree tree_from_json(const nlohmann::json& j) {
    Tree t;
    const auto& f = j.at("feature");
    t.nodes.resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
        auto& n = t.nodes[i];
        n.feature = f[i].get<int>();
        n.threshold = j.at("threshold")[i].get<double>();
        n.left = j.at("left")[i].get<int>();
        n.right = j.at("right")[i].get<int>();
        n.value = j.at("value")[i].get<double>();
    }
    return t;
}

namespace detail {

inline void require_two_classes(std::span<const int> y) {
    const bool has0 = std::find(y.begin(), y.end(), 0) != y.end();
    const bool has1 = std::find(y.begin(), y.end(), 1) != y.end();
    if (!has0 || !has1) throw Error("SingleClass", "training labels contain a single class");
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient boosting

struct GbtConfig {
    int iterations = 700;
    double learning_rate = 0.085195;
    int depth = 6;
    double l2_leaf_reg = 1.1030;
    double colsample_bylevel = 0.019947;
    int max_bins = 255;
    std::uint64_t seed = 0;
};

/// Per-feature quantile bins. Edges are training values; bin b holds
/// values in (edge[b-1], edge[b]].
struct Binner {
    std::vector<std::vector<double>> edges;

    static Binner fit(const FeatureMatrix& x, int max_bins) {
        Binner b;
        const auto n = x.rows();
        std::vector<double> col(static_cast<std::size_t>(n));
        for (Eigen::Index f = 0; f < x.cols(); ++f) {
            for (Eigen::Index i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = x(i, f);
            std::sort(col.begin(), col.end());
            std::vector<double> uniq;
            std::unique_copy(col.begin(), col.end(), std::back_inserter(uniq));
            std::vector<double> e;
            if (static_cast<int>(uniq.size()) <= max_bins) {
                e = uniq;
            } else {
                for (int k = 1; k <= max_bins; ++k) {
                    const auto idx = std::min<std::size_t>(col.size() - 1, static_cast<std::size_t>(static_cast<double>(k) * static_cast<double>(col.size()) / max_bins) - 1);
                    if (e.empty() || col[idx] > e.back()) e.push_back(col[idx]);
                }
                if (e.back() < col.back()) e.back() = col.back();
            }
            b.edges.push_back(std::move(e));
        }
        return b;
    }

    // Column-major bin codes.
    std::vector<std::uint8_t> transform(const FeatureMatrix& x) const {
        std::vector<std::uint8_t> out(static_cast<std::size_t>(x.rows() * x.cols()));
        for (Eigen::Index f = 0; f < x.cols(); ++f) {
            const auto& e = edges[static_cast<std::size_t>(f)];
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                const auto it = std::lower_bound(e.begin(), e.end(), x(i, f));
                out[static_cast<std::size_t>(f * x.rows() + i)] = static_cast<std::uint8_t>(std::min<std::ptrdiff_t>(it - e.begin(), static_cast<std::ptrdiff_t>(e.size()) - 1));
            }
        }
        return out;
    }
};

struct GbtModel {
    double base_score = 0;  // log-odds
    std::vector<Tree> trees;
    int n_features = 0;
    std::vector<double> train_loss;  // mean log-loss after each tree
    std::vector<double> val_auc;     // after each tree, when validation was given

    double raw(std::span<const double> x) const {
        double s = base_score;
        for (const auto& t : trees) s += t.predict(x);
        return s;
    }
    double predict_proba(std::span<const double> x) const { return detail::sigmoid(raw(x)); }
    std::vector<double> predict_proba(const FeatureMatrix& x) const {
        std::vector<double> p(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index i = 0; i < x.rows(); ++i) p[static_cast<std::size_t>(i)] = predict_proba(std::span<const double>(x.row(i).data(), static_cast<std::size_t>(x.cols())));
        return p;
    }
};

namespace detail {

inline double log_loss(std::span<const double> f, std::span<const int> y) {
    double s = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double z = f[i];
        s += std::max(z, 0.0) - z * y[i] + std::log1p(std::exp(-std::abs(z)));
    }
    return s / static_cast<double>(f.size());
}

// One level-wise regression tree on gradient statistics.
inline Tree grow_gbt_tree(const std::vector<std::uint8_t>& bins, const Binner& binner, int n, int n_features, std::span<const double> g,
                          std::span<const double> h, const GbtConfig& cfg, std::mt19937_64& rng, std::vector<int>& feature_pool) {
    Tree t;
    const double lambda = cfg.l2_leaf_reg;
    const int m = std::max(1, static_cast<int>(std::ceil(cfg.colsample_bylevel * n_features)));
    std::vector<int> node_of(static_cast<std::size_t>(n), 0);
    t.nodes.push_back({});
    std::vector<int> frontier{0};
    std::vector<std::vector<int>> members{std::vector<int>(static_cast<std::size_t>(n))};
    std::iota(members[0].begin(), members[0].end(), 0);
    std::vector<double> hg(256), hh(256);
    std::vector<int> hc(256);
    std::vector<int> touched;
    touched.reserve(256);
    auto leaf_value = [&](const std::vector<int>& rows) {
        double sg = 0, sh = 0;
        for (int r : rows) {
            sg += g[static_cast<std::size_t>(r)];
            sh += h[static_cast<std::size_t>(r)];
        }
        return -cfg.learning_rate * sg / (sh + lambda);
    };
    for (int level = 0; level < cfg.depth && !frontier.empty(); ++level) {
        // Per-level column sample (partial Fisher-Yates).
        for (int k = 0; k < m; ++k) {
            std::uniform_int_distribution<int> pick(k, n_features - 1);
            std::swap(feature_pool[static_cast<std::size_t>(k)], feature_pool[static_cast<std::size_t>(pick(rng))]);
        }
        std::vector<int> next;
        std::vector<std::vector<int>> next_members;
        for (std::size_t fi = 0; fi < frontier.size(); ++fi) {
            const int node = frontier[fi];
            auto& rows = members[fi];
            double G = 0, H = 0;
            for (int r : rows) {
                G += g[static_cast<std::size_t>(r)];
                H += h[static_cast<std::size_t>(r)];
            }
            const double parent = G * G / (H + lambda);
            double best_gain = 1e-12;
            int best_f = -1, best_b = -1;
            if (rows.size() >= 2) {
                for (int k = 0; k < m; ++k) {
                    const int f = feature_pool[static_cast<std::size_t>(k)];
                    const std::uint8_t* col = &bins[static_cast<std::size_t>(f) * static_cast<std::size_t>(n)];
                    touched.clear();
                    for (int r : rows) {
                        const int b = col[r];
                        if (hc[static_cast<std::size_t>(b)]++ == 0) touched.push_back(b);
                        hg[static_cast<std::size_t>(b)] += g[static_cast<std::size_t>(r)];
                        hh[static_cast<std::size_t>(b)] += h[static_cast<std::size_t>(r)];
                    }
                    std::sort(touched.begin(), touched.end());
                    double gl = 0, hl = 0;
                    for (std::size_t q = 0; q + 1 < touched.size(); ++q) {
                        const auto b = static_cast<std::size_t>(touched[q]);
                        gl += hg[b];
                        hl += hh[b];
                        const double gr = G - gl, hr = H - hl;
                        const double gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                        if (gain > best_gain) {
                            best_gain = gain;
                            best_f = f;
                            best_b = touched[q];
                        }
                    }
                    for (int b : touched) {
                        hg[static_cast<std::size_t>(b)] = hh[static_cast<std::size_t>(b)] = 0;
                        hc[static_cast<std::size_t>(b)] = 0;
                    }
                }
            }
            if (best_f < 0) {
                t.nodes[static_cast<std::size_t>(node)].value = leaf_value(rows);
                continue;
            }
            const std::uint8_t* col = &bins[static_cast<std::size_t>(best_f) * static_cast<std::size_t>(n)];
            std::vector<int> lr, rr;
            for (int r : rows) (col[r] <= best_b ? lr : rr).push_back(r);
            const int li = static_cast<int>(t.nodes.size());
            t.nodes.push_back({});
            t.nodes.push_back({});
            auto& nd = t.nodes[static_cast<std::size_t>(node)];
            nd.feature = best_f;
            nd.threshold = binner.edges[static_cast<std::size_t>(best_f)][static_cast<std::size_t>(best_b)];
            nd.left = li;
            nd.right = li + 1;
            next.push_back(li);
            next.push_back(li + 1);
            next_members.push_back(std::move(lr));
            next_members.push_back(std::move(rr));
        }
        frontier = std::move(next);
        members = std::move(next_members);
    }
    for (std::size_t fi = 0; fi < frontier.size(); ++fi) t.nodes[static_cast<std::size_t>(frontier[fi])].value = leaf_value(members[fi]);
    return t;
}

}  // namespace detail

/// Boosted trees on the logistic loss. With a validation set the model is
/// truncated to the tree count with the best validation AUC.
inline GbtModel train_gbt(const FeatureMatrix& x, std::span<const int> y, const GbtConfig& cfg, const FeatureMatrix* xv = nullptr,
                          std::span<const int> yv = {}) {
    if (x.rows() == 0 || x.cols() == 0) throw Error("EmptyFeatures", "no training features");
    detail::require_two_classes(y);
    if (cfg.depth < 1 || !(cfg.learning_rate > 0) || !(cfg.colsample_bylevel > 0 && cfg.colsample_bylevel <= 1) || cfg.max_bins < 2 || cfg.max_bins > 256)
        throw Error("ConfigError", "invalid boosting configuration");
    const int n = static_cast<int>(x.rows());
    const int nf = static_cast<int>(x.cols());
    GbtModel model;
    model.n_features = nf;
    const double prior = std::accumulate(y.begin(), y.end(), 0.0) / n;
    model.base_score = std::log(prior / (1 - prior));
    const auto binner = Binner::fit(x, cfg.max_bins);
    const auto bins = binner.transform(x);
    std::vector<double> f(static_cast<std::size_t>(n), model.base_score), g(f.size()), h(f.size());
    std::vector<double> fv;
    const bool use_val = xv != nullptr && xv->rows() > 0;
    if (use_val) fv.assign(static_cast<std::size_t>(xv->rows()), model.base_score);
    std::mt19937_64 rng(cfg.seed);
    std::vector<int> pool(static_cast<std::size_t>(nf));
    std::iota(pool.begin(), pool.end(), 0);
    double best_auc = -1;
    std::size_t best_len = 0;
    for (int it = 0; it < cfg.iterations; ++it) {
        for (int i = 0; i < n; ++i) {
            const double p = detail::sigmoid(f[static_cast<std::size_t>(i)]);
            g[static_cast<std::size_t>(i)] = p - y[static_cast<std::size_t>(i)];
            h[static_cast<std::size_t>(i)] = std::max(p * (1 - p), 1e-16);
        }
        auto tree = detail::grow_gbt_tree(bins, binner, n, nf, g, h, cfg, rng, pool);
        for (int i = 0; i < n; ++i) f[static_cast<std::size_t>(i)] += tree.predict(std::span<const double>(x.row(i).data(), static_cast<std::size_t>(nf)));
        model.train_loss.push_back(detail::log_loss(f, y));
        if (use_val) {
            for (Eigen::Index i = 0; i < xv->rows(); ++i)
                fv[static_cast<std::size_t>(i)] += tree.predict(std::span<const double>(xv->row(i).data(), static_cast<std::size_t>(nf)));
            double a = 0.5;
            try {
                a = auc(fv, yv);
            } catch (const Error&) {
            }
            model.val_auc.push_back(a);
            if (a > best_auc) {
                best_auc = a;
                best_len = static_cast<std::size_t>(it) + 1;
            }
        }
        model.trees.push_back(std::move(tree));
    }
    if (use_val) model.trees.resize(best_len);
    return model;
}

inline nlohmann::json to_json(const GbtModel& m) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : m.trees) trees.push_back(to_json(t));
    return {{"base_score", m.base_score}, {"n_features", m.n_features}, {"trees", trees}};
}

inline GbtModel gbt_from_json(const nlohmann::json& j) {
    GbtModel m;
    m.base_score = j.at("base_score").get<double>();
    m.n_features = j.at("n_features").get<int>();
    for (const auto& t : j.at("trees")) m.trees.push_back(tree_from_json(t));
    return m;
}

/// Ensemble of boosted models that differ only in their seed.
struct GbeModel {
    std::vector<GbtModel> members;

    std::vector<double> predict_proba(const FeatureMatrix& x) const {
        if (members.empty()) throw Error("EmptyEnsemble", "ensemble has no members");
        std::vector<double> p(static_cast<std::size_t>(x.rows()), 0.0);
        for (const auto& m : members) {
            const auto q = m.predict_proba(x);
            for (std::size_t i = 0; i < p.size(); ++i) p[i] += q[i];
        }
        for (auto& v : p) v /= static_cast<double>(members.size());
        return p;
    }
};

inline GbeModel train_gbe(const FeatureMatrix& x, std::span<const int> y, const GbtConfig& cfg, int n_members, std::uint64_t seed,
                          const FeatureMatrix* xv = nullptr, std::span<const int> yv = {}) {
    if (n_members < 1) throw Error("ConfigError", "an ensemble needs at least one member");
    GbeModel e;
    e.members.resize(static_cast<std::size_t>(n_members));
    parallel_for(n_members, [&](int k) {
        auto c = cfg;
        c.seed = mix_seed(seed, static_cast<std::uint64_t>(k));
        e.members[static_cast<std::size_t>(k)] = train_gbt(x, y, c, xv, yv);
    });
    return e;
}

inline nlohmann::json to_json(const GbeModel& e) {
    nlohmann::json m = nlohmann::json::array();
    for (const auto& g : e.members) m.push_back(to_json(g));
    return {{"members", m}};
}

inline GbeModel gbe_from_json(const nlohmann::json& j) {
    GbeModel e;
    for (const auto& m : j.at("members")) e.members.push_back(gbt_from_json(m));
    return e;
}

// ---------------------------------------------------------------------------
// Random forest

struct RfConfig {
    int n_trees = 1600;
    int max_features = 0;  // 0 = floor(sqrt(n_features))
    int min_samples_leaf = 2;
    int min_samples_split = 2;
    int max_depth = 90;
    std::uint64_t seed = 0;
};

struct RfModel {
    std::vector<Tree> trees;  // leaf value = fraction of class 1
    int n_features = 0;

    double predict_proba(std::span<const double> x) const {
        double s = 0;
        for (const auto& t : trees) s += t.predict(x);
        return s / static_cast<double>(trees.size());
    }
    std::vector<double> predict_proba(const FeatureMatrix& x) const {
        std::vector<double> p(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index i = 0; i < x.rows(); ++i) p[static_cast<std::size_t>(i)] = predict_proba(std::span<const double>(x.row(i).data(), static_cast<std::size_t>(x.cols())));
        return p;
    }
};

namespace detail {

inline double entropy(double pos, double n) {
    if (n <= 0 || pos <= 0 || pos >= n) return 0.0;
    const double p = pos / n, q = 1 - p;
    return -(p * std::log2(p) + q * std::log2(q));
}

// Depth-first tree on exact thresholds (training values), entropy criterion.
inline Tree grow_rf_tree(const FeatureMatrix& x, std::span<const int> y, const RfConfig& cfg, int max_features, std::mt19937_64& rng) {
    Tree t;
    const int n = static_cast<int>(x.rows()), nf = static_cast<int>(x.cols());
    std::vector<int> features(static_cast<std::size_t>(nf));
    std::iota(features.begin(), features.end(), 0);
    struct Task {
        int node;
        std::vector<int> rows;
        int depth;
    };
    std::vector<Task> stack;
    t.nodes.push_back({});
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    stack.push_back({0, std::move(all), 0});
    std::vector<std::pair<double, int>> vals;
    while (!stack.empty()) {
        Task task = std::move(stack.back());
        stack.pop_back();
        const auto& rows = task.rows;
        const double cnt = static_cast<double>(rows.size());
        double pos = 0;
        for (int r : rows) pos += y[static_cast<std::size_t>(r)];
        auto make_leaf = [&] { t.nodes[static_cast<std::size_t>(task.node)].value = pos / cnt; };
        if (pos == 0 || pos == cnt || static_cast<int>(rows.size()) < cfg.min_samples_split || static_cast<int>(rows.size()) < 2 * cfg.min_samples_leaf ||
            task.depth >= cfg.max_depth) {
            make_leaf();
            continue;
        }
        const double parent = entropy(pos, cnt);
        double best = 1e-12;
        int best_f = -1;
        double best_thr = 0;
        // Draw features until max_features non-constant ones were examined.
        int examined = 0;
        for (int k = 0; k < nf && examined < max_features; ++k) {
            std::uniform_int_distribution<int> pick(k, nf - 1);
            std::swap(features[static_cast<std::size_t>(k)], features[static_cast<std::size_t>(pick(rng))]);
            const int f = features[static_cast<std::size_t>(k)];
            vals.clear();
            for (int r : rows) vals.emplace_back(x(r, f), y[static_cast<std::size_t>(r)]);
            std::sort(vals.begin(), vals.end());
            if (vals.front().first == vals.back().first) continue;
            ++examined;
            double lp = 0;
            const int lo = cfg.min_samples_leaf;
            for (int i = 0; i + 1 < static_cast<int>(vals.size()); ++i) {
                lp += vals[static_cast<std::size_t>(i)].second;
                const int nl = i + 1;
                if (vals[static_cast<std::size_t>(i)].first == vals[static_cast<std::size_t>(i) + 1].first) continue;
                if (nl < lo || static_cast<int>(vals.size()) - nl < lo) continue;
                const double nr = cnt - nl;
                const double gain = parent - (nl * entropy(lp, nl) + nr * entropy(pos - lp, nr)) / cnt;
                if (gain > best) {
                    best = gain;
                    best_f = f;
                    best_thr = vals[static_cast<std::size_t>(i)].first;
                }
            }
        }
        if (best_f < 0) {
            make_leaf();
            continue;
        }
        std::vector<int> lr, rr;
        for (int r : rows) (x(r, best_f) <= best_thr ? lr : rr).push_back(r);
        const int li = static_cast<int>(t.nodes.size());
        t.nodes.push_back({});
        t.nodes.push_back({});
        auto& nd = t.nodes[static_cast<std::size_t>(task.node)];
        nd.feature = best_f;
        nd.threshold = best_thr;
        nd.left = li;
        nd.right = li + 1;
        stack.push_back({li + 1, std::move(rr), task.depth + 1});
        stack.push_back({li, std::move(lr), task.depth + 1});
    }
    return t;
}

}  // namespace detail

/// Unbagged random forest: every tree sees all rows; randomness comes from
/// the features drawn at each split.
inline RfModel train_rf(const FeatureMatrix& x, std::span<const int> y, const RfConfig& cfg) {
    if (x.rows() == 0 || x.cols() == 0) throw Error("EmptyFeatures", "no training features");
    if (cfg.n_trees < 1) throw Error("ConfigError", "n_trees must be positive");
    detail::require_two_classes(y);
    const int mf = cfg.max_features > 0 ? cfg.max_features : std::max(1, static_cast<int>(std::sqrt(static_cast<double>(x.cols()))));
    RfModel m;
    m.n_features = static_cast<int>(x.cols());
    m.trees.resize(static_cast<std::size_t>(cfg.n_trees));
    parallel_for(cfg.n_trees, [&](int k) {
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(k)));
        m.trees[static_cast<std::size_t>(k)] = detail::grow_rf_tree(x, y, cfg, mf, rng);
    });
    return m;
}

inline nlohmann::json to_json(const RfModel& m) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : m.trees) trees.push_back(to_json(t));
    return {{"n_features", m.n_features}, {"trees", trees}};
}

inline RfModel rf_from_json(const nlohmann::json& j) {
    RfModel m;
    m.n_features = j.at("n_features").get<int>();
    for (const auto& t : j.at("trees")) m.trees.push_back(tree_from_json(t));
    return m;
}

}  // namespace eegscreen::ml
