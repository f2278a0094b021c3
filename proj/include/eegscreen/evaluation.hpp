#pragma once

// Stratified folds, the 6-step cross-validation protocol with a data-access
// audit, and per-model reports.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "eegscreen/classical.hpp"
#include "eegscreen/features.hpp"
#include "eegscreen/meta.hpp"
#include "eegscreen/metrics.hpp"
#include "eegscreen/training.hpp"

namespace eegscreen::eval {

// ---------------------------------------------------------------------------
// Folds

/// Within each (label, sex, hospital) stratum, ids are shuffled by `seed`
/// and dealt round-robin. The dealing position carries over between strata
/// so the overall fold sizes also differ by at most one.
inline std::vector<int> stratified_folds(const std::vector<RecordingMeta>& metas, int k, std::uint64_t seed) {
    if (k < 2) throw Error("ConfigError", "need at least 2 folds");
    std::map<std::tuple<int, std::string, std::string>, std::vector<int>> strata;
    for (int i = 0; i < static_cast<int>(metas.size()); ++i) {
        const auto& m = metas[static_cast<std::size_t>(i)];
        strata[{label_value(m.label), m.sex, m.hospital_id}].push_back(i);
    }
    std::vector<int> fold(metas.size(), -1);
    int next = 0;
    std::uint64_t s = 0;
    for (auto& [key, ids] : strata) {
        // Order by id first so the result depends on ids, not manifest order.
        std::sort(ids.begin(), ids.end(), [&](int a, int b) { return metas[static_cast<std::size_t>(a)].recording_id < metas[static_cast<std::size_t>(b)].recording_id; });
        std::mt19937_64 rng(mix_seed(seed, s++));
        std::shuffle(ids.begin(), ids.end(), rng);
        for (int id : ids) {
            fold[static_cast<std::size_t>(id)] = next;
            next = (next + 1) % k;
        }
    }
    return fold;
}

struct StepFolds {
    int test = 0, validation = 1;
    std::vector<int> train;
};

inline StepFolds step_folds(int step, int k) {
    StepFolds f{step, (step + 1) % k, {}};
    for (int j = 0; j < k; ++j)
        if (j != f.test && j != f.validation) f.train.push_back(j);
    return f;
}

// ---------------------------------------------------------------------------
// Access audit

enum class Phase { Train, Select, Test };

inline std::string phase_name(Phase p) {
    switch (p) {
        case Phase::Train: return "train";
        case Phase::Select: return "select";
        case Phase::Test: return "test";
    }
    return "?";
}

struct Access {
    int step;
    Phase phase;
    std::string model;
    int row;
};

/// One entry per row handed to a model, tagged with the CV step and phase.
class AccessLog {
public:
    void record(int step, Phase phase, const std::string& model, int row) { entries_.push_back({step, phase, model, row}); }
    void append(const AccessLog& other) { entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end()); }
    const std::vector<Access>& entries() const { return entries_; }

    /// Accesses to a test-fold row during training or selection.
    std::vector<Access> violations(const std::vector<int>& fold, int k) const {
        std::vector<Access> bad;
        for (const auto& a : entries_) {
            const int test = step_folds(a.step, k).test;
            if (a.phase != Phase::Test && fold[static_cast<std::size_t>(a.row)] == test) bad.push_back(a);
        }
        return bad;
    }

private:
    std::vector<Access> entries_;
};

// ---------------------------------------------------------------------------
// Dataset and configuration

struct Dataset {
    std::string id = "corpus";
    std::vector<RecordingMeta> meta;
    std::vector<FrameSet> frames;               // empty when neural models are not run
    std::vector<RecordingFeatures> features;    // empty when classical models are not run
};

struct CvConfig {
    int k = 6;
    std::uint64_t seed = 0;
    std::vector<std::string> models = {"siNet", "miNetN", "miNetP", "MINetN", "MINetP", "TransNetN", "TransNetP", "GBE", "RF", "META"};
    nn::TrainConfig sinet = [] {
        nn::TrainConfig t;
        t.epochs = 50;
        t.batch_frames = 4096;
        return t;
    }();
    nn::TrainConfig bags = [] {
        nn::TrainConfig t;
        t.epochs = 150;
        return t;
    }();
    std::optional<nn::TrainConfig> transnet;  // defaults to `bags`
    nn::NetworkConfig network;
    ml::GbtConfig gbt;
    int gbe_members = 30;
    ml::RfConfig rf;
    ml::MetaConfig meta;
    unsigned parallel_steps = 1;  // CV steps trained concurrently
    std::string artifact_dir;     // when set, fitted models are saved under step<k>/
    std::function<void(const std::string&)> log;
};

struct StepResult {
    int step = 0;
    double test_auc = 0, test_acc = 0;
    int chosen = -1;  // epoch or tree count; -1 when not applicable
    double seconds = 0;
};

struct ModelReport {
    std::string model;
    std::vector<StepResult> steps;
    std::map<std::string, double> test_predictions;  // recording_id -> probability

    Summary auc_summary() const {
        std::vector<double> a;
        for (const auto& s : steps) a.push_back(s.test_auc);
        return summarize(a);
    }
    Summary acc_summary() const {
        std::vector<double> a;
        for (const auto& s : steps) a.push_back(s.test_acc);
        return summarize(a);
    }
};

struct CvReport {
    std::string dataset_id;
    std::vector<int> folds;
    std::map<std::string, ModelReport> models;
    AccessLog audit;
    std::size_t audit_violations = 0;
};

inline nlohmann::json to_json(const ModelReport& r, const std::string& dataset_id) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : r.steps)
        steps.push_back({{"step", s.step}, {"test_auc", s.test_auc}, {"test_acc", s.test_acc}, {"chosen", s.chosen}, {"seconds", s.seconds}});
    const auto a = r.auc_summary(), c = r.acc_summary();
    return {{"model_id", r.model},
            {"dataset_id", dataset_id},
            {"steps", steps},
            {"auc", {{"mean", a.mean}, {"sd", a.sd}, {"se", a.se}}},
            {"acc", {{"mean", c.mean}, {"sd", c.sd}, {"se", c.se}}},
            {"test_predictions", r.test_predictions}};
}

inline nlohmann::json to_json(const CvReport& r) {
    nlohmann::json models = nlohmann::json::object();
    for (const auto& [name, m] : r.models) models[name] = to_json(m, r.dataset_id);
    return {{"dataset_id", r.dataset_id},
            {"folds", r.folds},
            {"models", models},
            {"audit", {{"accesses", r.audit.entries().size()}, {"violations", r.audit_violations}}}};
}

// ---------------------------------------------------------------------------
// Cross-validation

namespace detail {

inline bool wants(const CvConfig& cfg, const std::string& m) { return std::find(cfg.models.begin(), cfg.models.end(), m) != cfg.models.end(); }

inline ml::FeatureMatrix feature_matrix(const std::vector<FeatureVector>& rows, bool rf_only) {
    const int d = rf_only ? kRfFeatureDim : kFeatureDim;
    ml::FeatureMatrix x(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rf_only) {
            const auto v = rf_subset(rows[i].values);
            for (int j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = v[static_cast<std::size_t>(j)];
        } else {
            for (int j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = rows[i].values[static_cast<std::size_t>(j)];
        }
    }
    return x;
}

inline nlohmann::json spd_to_json(const SpdMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
        rows.push_back(r);
    }
    return rows;
}

struct Split {
    std::vector<int> train, val, test;
};

}  // namespace detail

namespace detail {

struct StepOutput {
    std::map<std::string, StepResult> results;
    std::map<std::string, std::vector<double>> test_predictions;  // in test-row order
    std::vector<int> test_rows;
    AccessLog audit;
};

inline StepOutput run_step(const Dataset& data, const CvConfig& cfg, const std::vector<int>& folds, int step) {
    const int n = static_cast<int>(data.meta.size());
    const auto sf = step_folds(step, cfg.k);
    StepOutput out;
    auto& audit = out.audit;
    Split split;
    for (int i = 0; i < n; ++i) {
        const int f = folds[static_cast<std::size_t>(i)];
        if (f == sf.test) split.test.push_back(i);
        else if (f == sf.validation) split.val.push_back(i);
        else split.train.push_back(i);
    }
    out.test_rows = split.test;
    auto labels = [&](const std::vector<int>& rows) {
        std::vector<int> y;
        for (int r : rows) y.push_back(label_value(data.meta[static_cast<std::size_t>(r)].label));
        return y;
    };
    const auto y_train = labels(split.train), y_val = labels(split.val), y_test = labels(split.test);
    auto frames = [&](const std::vector<int>& rows, Phase ph, const std::string& model) {
        nn::RecordingList list;
        for (int r : rows) {
            audit.record(step, ph, model, r);
            list.push_back(&data.frames[static_cast<std::size_t>(r)]);
        }
        return list;
    };
    auto say = [&](const std::string& s) {
        if (cfg.log) cfg.log(s);
    };
    std::map<std::string, std::vector<double>> val_pred;
    auto finish = [&](const std::string& model, std::vector<double> p_test, int chosen, double seconds) {
        StepResult s{step, auc(p_test, y_test), acc(p_test, y_test), chosen, seconds};
        out.results[model] = s;
        out.test_predictions[model] = std::move(p_test);
        say("step " + std::to_string(step) + " " + model + " test_auc " + std::to_string(s.test_auc) + " (" +
            std::to_string(static_cast<int>(seconds)) + " s)");
    };
    const auto artifact = [&](const std::string& file) -> std::string {
        if (cfg.artifact_dir.empty()) return {};
        const auto dir = std::filesystem::path(cfg.artifact_dir) / ("step" + std::to_string(step));
        std::filesystem::create_directories(dir);
        return (dir / file).string();
    };
    const auto save_json = [&](const std::string& file, const nlohmann::json& j) {
        const auto path = artifact(file);
        if (path.empty()) return;
        std::ofstream o(path);
        o << j.dump(1) << "\n";
        if (!o) throw Error("IoError", "cannot write " + path);
    };
    const auto save_net = [&](const std::string& model, nn::Network& net) {
        const auto path = artifact(model + ".ckpt");
        if (!path.empty()) ad::save_checkpoint(path, net.describe(), net.registry().state);
    };
    using clock = std::chrono::steady_clock;
    auto since = [](clock::time_point t0) { return std::chrono::duration<double>(clock::now() - t0).count(); };
    const auto step_seed = [&](std::uint64_t model_index) { return mix_seed(cfg.seed, 1000 * model_index + static_cast<std::uint64_t>(step)); };

    // siNet is trained whenever a P variant is requested: its encoder
    // initializes them.
    std::optional<nn::Network> sinet;
    const bool any_p = wants(cfg, "miNetP") || wants(cfg, "MINetP") || wants(cfg, "TransNetP");
    if (wants(cfg, "siNet") || any_p) {
        const auto t0 = clock::now();
        auto nc = cfg.network;
        nc.kind = nn::Kind::SiNet;
        std::mt19937_64 init(step_seed(1));
        sinet.emplace(nc, init);
        auto tc = cfg.sinet;
        tc.seed = step_seed(2);
        tc.log = cfg.log;
        const auto res = nn::train(*sinet, frames(split.train, Phase::Train, "siNet"), frames(split.val, Phase::Select, "siNet"), tc);
        save_net("siNet", *sinet);
        if (wants(cfg, "siNet")) finish("siNet", nn::predict(*sinet, frames(split.test, Phase::Test, "siNet"), tc.eval_chunk), res.best_epoch, since(t0));
    }
    const std::vector<std::pair<std::string, nn::Kind>> bag_models = {{"miNetN", nn::Kind::MiNet}, {"miNetP", nn::Kind::MiNet},
                                                                      {"MINetN", nn::Kind::MINet}, {"MINetP", nn::Kind::MINet},
                                                                      {"TransNetN", nn::Kind::TransNet}, {"TransNetP", nn::Kind::TransNet}};
    for (std::size_t mi = 0; mi < bag_models.size(); ++mi) {
        const auto& [name, kind] = bag_models[mi];
        if (!wants(cfg, name)) continue;
        const auto t0 = clock::now();
        auto nc = cfg.network;
        nc.kind = kind;
        std::mt19937_64 init(step_seed(10 + 2 * mi));
        nn::Network net(nc, init);
        if (name.back() == 'P') net.encoder.copy_from(sinet->encoder);
        auto tc = kind == nn::Kind::TransNet && cfg.transnet ? *cfg.transnet : cfg.bags;
        tc.seed = step_seed(11 + 2 * mi);
        tc.log = cfg.log;
        const auto res = nn::train(net, frames(split.train, Phase::Train, name), frames(split.val, Phase::Select, name), tc);
        save_net(name, net);
        val_pred[name] = nn::predict(net, frames(split.val, Phase::Select, name), tc.eval_chunk);
        finish(name, nn::predict(net, frames(split.test, Phase::Test, name), tc.eval_chunk), res.best_epoch, since(t0));
    }

    // Classical models; the tangent reference comes from the training folds.
    if (wants(cfg, "GBE") || wants(cfg, "RF")) {
        const auto t0 = clock::now();
        std::vector<SpdMatrix> means;
        for (int r : split.train) {
            audit.record(step, Phase::Train, "reference", r);
            means.push_back(data.features[static_cast<std::size_t>(r)].mean_covariance);
        }
        const auto ref = riemannian_mean(means).mean;
        auto rows = [&](const std::vector<int>& idx, Phase ph, const std::string& model, bool rf_only) {
            std::vector<FeatureVector> fv;
            for (int r : idx) {
                audit.record(step, ph, model, r);
                fv.push_back(assemble_features(data.features[static_cast<std::size_t>(r)], ref));
            }
            return feature_matrix(fv, rf_only);
        };
        const double ref_seconds = since(t0);
        if (wants(cfg, "GBE")) {
            const auto t1 = clock::now();
            const auto xtr = rows(split.train, Phase::Train, "GBE", false);
            const auto xv = rows(split.val, Phase::Select, "GBE", false);
            const auto gbe = ml::train_gbe(xtr, y_train, cfg.gbt, cfg.gbe_members, step_seed(30), &xv, y_val);
            val_pred["GBE"] = gbe.predict_proba(xv);
            save_json("GBE.json", {{"reference", spd_to_json(ref)}, {"model", ml::to_json(gbe)}});
            std::size_t trees = 0;
            for (const auto& m : gbe.members) trees += m.trees.size();
            finish("GBE", gbe.predict_proba(rows(split.test, Phase::Test, "GBE", false)), static_cast<int>(trees / gbe.members.size()),
                   ref_seconds + since(t1));
        }
        if (wants(cfg, "RF")) {
            const auto t1 = clock::now();
            auto rc = cfg.rf;
            rc.seed = step_seed(31);
            const auto rf = ml::train_rf(rows(split.train, Phase::Train, "RF", true), y_train, rc);
            save_json("RF.json", {{"reference", spd_to_json(ref)}, {"model", ml::to_json(rf)}});
            finish("RF", rf.predict_proba(rows(split.test, Phase::Test, "RF", true)), -1, ref_seconds + since(t1));
        }
    }

    // META: fit on the components' validation-fold predictions.
    if (wants(cfg, "META")) {
        const auto t0 = clock::now();
        const auto& comps = cfg.meta.components;
        const auto nc = static_cast<Eigen::Index>(comps.size());
        Eigen::MatrixXd xv(static_cast<Eigen::Index>(split.val.size()), nc), xt(static_cast<Eigen::Index>(split.test.size()), nc);
        for (Eigen::Index c = 0; c < nc; ++c) {
            const auto& pv = val_pred.at(comps[static_cast<std::size_t>(c)]);
            const auto& pt = out.test_predictions.at(comps[static_cast<std::size_t>(c)]);
            for (Eigen::Index i = 0; i < xv.rows(); ++i) xv(i, c) = pv[static_cast<std::size_t>(i)];
            for (Eigen::Index i = 0; i < xt.rows(); ++i) xt(i, c) = pt[static_cast<std::size_t>(i)];
        }
        for (int r : split.val) audit.record(step, Phase::Select, "META", r);
        const auto meta = ml::train_meta(xv, y_val, cfg.meta);
        save_json("META.json", ml::to_json(meta, cfg.meta));
        std::vector<double> p;
        std::vector<double> row(comps.size());
        for (Eigen::Index i = 0; i < xt.rows(); ++i) {
            audit.record(step, Phase::Test, "META", split.test[static_cast<std::size_t>(i)]);
            for (Eigen::Index c = 0; c < nc; ++c) row[static_cast<std::size_t>(c)] = xt(i, c);
            p.push_back(meta.predict(row));
        }
        finish("META", std::move(p), meta.iterations, since(t0));
    }
    return out;
}

}  // namespace detail

/// Runs the protocol for every model in `cfg.models` on a given fold
/// assignment. In step i the test fold is i, the validation fold is
/// (i + 1) mod k and the rest train. META blends the validation-fold
/// predictions of its components, so they must be requested too.
inline CvReport cross_validate(const Dataset& data, const CvConfig& cfg, std::vector<int> folds) {
    using detail::wants;
    const int n = static_cast<int>(data.meta.size());
    if (static_cast<int>(folds.size()) != n) throw Error("ConfigError", "fold assignment does not match the dataset");
    for (int f : folds)
        if (f < 0 || f >= cfg.k) throw Error("ConfigError", "fold index out of range");
    const bool need_frames = std::any_of(cfg.models.begin(), cfg.models.end(), [](const std::string& m) { return m.find("Net") != std::string::npos; });
    const bool need_features = wants(cfg, "GBE") || wants(cfg, "RF");
    if (need_frames && static_cast<int>(data.frames.size()) != n) throw Error("ConfigError", "neural models need frame data for every recording");
    if (need_features && static_cast<int>(data.features.size()) != n) throw Error("ConfigError", "classical models need features for every recording");
    for (const auto& m : cfg.models)
        if (m != "siNet" && m != "miNetN" && m != "miNetP" && m != "MINetN" && m != "MINetP" && m != "TransNetN" && m != "TransNetP" && m != "GBE" &&
            m != "RF" && m != "META")
            throw Error("ConfigError", "unknown model " + m);
    if (wants(cfg, "META"))
        for (const auto& c : cfg.meta.components)
            if (!wants(cfg, c) || c == "RF") throw Error("ConfigError", "META component " + c + " must be evaluated too");

    std::vector<detail::StepOutput> steps(static_cast<std::size_t>(cfg.k));
    std::mutex log_mutex;
    CvConfig c = cfg;
    if (cfg.log) c.log = [&](const std::string& s) {
        std::lock_guard lk(log_mutex);
        cfg.log(s);
    };
    parallel_for(cfg.k, [&](int step) { steps[static_cast<std::size_t>(step)] = detail::run_step(data, c, folds, step); }, std::max(1u, cfg.parallel_steps));

    CvReport report;
    report.dataset_id = data.id;
    report.folds = std::move(folds);
    for (const auto& so : steps) {
        for (const auto& [model, r] : so.results) {
            auto& rep = report.models[model];
            rep.model = model;
            rep.steps.push_back(r);
            const auto& p = so.test_predictions.at(model);
            for (std::size_t i = 0; i < so.test_rows.size(); ++i) rep.test_predictions[data.meta[static_cast<std::size_t>(so.test_rows[i])].recording_id] = p[i];
        }
        report.audit.append(so.audit);
    }
    report.audit_violations = report.audit.violations(report.folds, cfg.k).size();
    return report;
}

inline CvReport cross_validate(const Dataset& data, const CvConfig& cfg) { return cross_validate(data, cfg, stratified_folds(data.meta, cfg.k, cfg.seed)); }

}  // namespace eegscreen::eval
