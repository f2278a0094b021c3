// Acceptance run: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when everything passes).
//
// The reference corpus (600 recordings) is generated, preprocessed and
// featurized once into the work directory and reused by later runs.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "eegscreen/dsp.hpp"
#include "eegscreen/evaluation.hpp"
#include "eegscreen/features.hpp"
#include "eegscreen/metrics.hpp"
#include "eegscreen/models.hpp"
#include "eegscreen/pipeline.hpp"
#include "eegscreen/riemann.hpp"
#include "eegscreen/scaling.hpp"
#include "eegscreen/stats.hpp"
#include "eegscreen/synth.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace eegscreen;
using nlohmann::json;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_s;
};

// ---------------------------------------------------------------------------

Outcome parameter_counts() {
    using namespace nn;
    auto count = [](auto& m) {
        Registry r;
        m.collect(r, "m");
        return ad::parameter_count(r.params);
    };
    std::mt19937_64 rng(1);
    NetworkConfig cfg;
    std::ostringstream d;
    bool ok = true;
    auto check = [&](const std::string& what, std::size_t got, std::size_t want) {
        d << what << " " << got << (got == want ? "" : " (expected " + std::to_string(want) + ")") << ", ";
        ok = ok && got == want;
    };
    cfg.kind = Kind::SiNet;
    Network si(cfg, rng);
    check("encoder", count(si.encoder), 1408);
    check("classifier", count(si.classifier), 289);
    check("siNet", si.parameter_count(), 1697);
    cfg.kind = Kind::MiNet;
    Network mi(cfg, rng);
    check("miNet", mi.parameter_count(), 1697);
    cfg.kind = Kind::MINet;
    Network big_mi(cfg, rng);
    check("attention", count(*big_mi.attention), 166176);
    check("MINet", big_mi.parameter_count(), 167873);
    cfg.kind = Kind::TransNet;
    Network trans(cfg, rng);
    check("transformer block", count(trans.blocks.front()), 1516640);
    check("TransNet", trans.parameter_count(), 4717793);
    auto s = d.str();
    return {ok, s.substr(0, s.size() - 2)};
}

Outcome feature_dimensions(const eval::Dataset& data) {
    std::size_t bad = 0;
    for (const auto& f : data.features)
        if (f.band_power.size() != 266 || f.coherence.size() != 2394 || f.mean_covariance.rows() != 19) ++bad;
    // Assemble with a fold reference as cross-validation does.
    std::vector<SpdMatrix> means;
    for (const auto& f : data.features) means.push_back(f.mean_covariance);
    const auto ref = riemannian_mean(means).mean;
    const auto full = assemble_features(data.features.front(), ref);
    const auto rf = rf_subset(full.values);
    const auto fresh = extract_recording_features(data.frames.front(), ref);
    const bool ok = bad == 0 && full.values.size() == 2850 && full.time_riemann().size() == 190 && full.band_power().size() == 266 &&
                    full.coherence().size() == 2394 && rf.size() == 2660 && fresh.values.size() == 2850;
    std::ostringstream d;
    d << full.time_riemann().size() << " + " << full.band_power().size() << " + " << full.coherence().size() << " = " << full.values.size()
      << ", RF " << rf.size() << ", " << data.features.size() - bad << "/" << data.features.size() << " recordings well-formed";
    return {ok, d.str()};
}

std::vector<ScalingPoint> read_points(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("IoError", "cannot read " + path);
    std::vector<ScalingPoint> pts;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        pts.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1)), 0.0});
    }
    return pts;
}

Outcome scaling_law(const std::string& data_dir) {
    const auto meta = fit_power_law(read_points(data_dir + "/elm_auc_meta.csv"));
    const auto gbe = fit_power_law(read_points(data_dir + "/elm_auc_gbe.csv"));
    std::ostringstream d;
    d << std::fixed << std::setprecision(2) << "META asymptote " << meta.asymptote << " +/- " << meta.asymptote_se() << " (target 91.3 +/- 1.5), GBE "
      << gbe.asymptote << " +/- " << gbe.asymptote_se() << " (target 87.1 +/- 1.5)";
    const bool ok = meta.converged && gbe.converged && std::abs(meta.asymptote - 91.3) <= 1.5 && std::abs(gbe.asymptote - 87.1) <= 1.5;
    return {ok, d.str()};
}

Outcome gradients() {
    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 7919u + 1);
        worst = std::max(worst, oracle::all_layers_grad_error(rng));
    }
    std::ostringstream d;
    d << "worst relative error " << std::scientific << std::setprecision(2) << worst << " over 20 seeds (limit 1e-4)";
    return {worst <= 1e-4, d.str()};
}

Outcome riemann_oracle() {
    std::mt19937_64 rng(17);
    double worst_mid = 0, worst_cong = 0;
    std::normal_distribution<double> g;
    for (int i = 0; i < 100; ++i) {
        const int n = 2 + i % 18;
        const auto a = oracle::random_spd(n, rng), b = oracle::random_spd(n, rng);
        const auto r = riemannian_mean(std::vector<SpdMatrix>{a, b}, 1e-12, 200);
        worst_mid = std::max(worst_mid, (r.mean - oracle::geodesic_midpoint(a, b)).cwiseAbs().maxCoeff());
        // Congruence: mean(W X W') = W mean(X) W'.
        Eigen::MatrixXd w(n, n);
        for (int p = 0; p < n; ++p)
            for (int q = 0; q < n; ++q) w(p, q) = g(rng) + (p == q ? 2.0 : 0.0);
        std::vector<SpdMatrix> xs, wx;
        for (int k = 0; k < 4; ++k) {
            xs.push_back(oracle::random_spd(n, rng));
            wx.push_back(w * xs.back() * w.transpose());
        }
        const SpdMatrix lhs = riemannian_mean(wx, 1e-12, 200).mean;
        const SpdMatrix rhs = w * riemannian_mean(xs, 1e-12, 200).mean * w.transpose();
        worst_cong = std::max(worst_cong, (lhs - rhs).norm() / rhs.norm());
    }
    std::ostringstream d;
    d << std::scientific << std::setprecision(2) << "closed-form max error " << worst_mid << " (limit 1e-8), congruence relative error " << worst_cong
      << " (limit 1e-6), 100 pairs";
    return {worst_mid <= 1e-8 && worst_cong <= 1e-6, d.str()};
}

Outcome auc_oracle() {
    std::mt19937_64 rng(23);
    int mismatches = 0;
    for (int rep = 0; rep < 1000; ++rep) {
        const int n = 2 + static_cast<int>(rng() % 49);
        std::vector<double> s(static_cast<std::size_t>(n));
        std::vector<int> y(static_cast<std::size_t>(n));
        const bool coarse = rep % 2 == 0;  // half the sets have many ties
        for (int i = 0; i < n; ++i) {
            s[static_cast<std::size_t>(i)] = coarse ? static_cast<double>(rng() % 8) / 8.0 : std::uniform_real_distribution<double>()(rng);
            y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 2);
        }
        y[0] = 0;
        y[1] = 1;
        if (auc(s, y) != oracle::brute_auc(s, y)) ++mismatches;
    }
    return {mismatches == 0, std::to_string(1000 - mismatches) + "/1000 sets exactly equal to pair counting"};
}

Outcome filter_masks() {
    double worst_stop = -1e9, worst_pass = 0, worst_notch = -1e9;
    for (double rate : {200.0, 250.0, 256.0, 400.0, 500.0}) {
        const auto lp = dsp::design_butterworth(dsp::default_lowpass(), rate);
        for (double f = 50; f < rate / 2; f += 0.25) worst_stop = std::max(worst_stop, lp.gain_db(f));
        worst_stop = std::max(worst_stop, oracle::measured_gain_db(lp, 50, rate));
        const auto hp = dsp::design_butterworth(dsp::default_highpass(), rate);
        for (double f = 0.5; f <= 40; f += 0.05) worst_pass = std::max(worst_pass, std::abs(hp.gain_db(f)));
        worst_pass = std::max(worst_pass, std::abs(oracle::measured_gain_db(hp, 0.5, rate, 120, 60)));
        for (double mains : {50.0, 60.0}) {
            const auto notch = dsp::design_notch(mains, 5, rate);
            worst_notch = std::max({worst_notch, notch.gain_db(mains), oracle::measured_gain_db(notch, mains, rate)});
        }
    }
    std::ostringstream d;
    d << std::fixed << std::setprecision(1) << "lowpass >= " << -worst_stop << " dB above 50 Hz, highpass deviation <= " << std::setprecision(3)
      << worst_pass << " dB above 0.5 Hz, notch depth >= " << std::setprecision(1) << -worst_notch << " dB";
    return {worst_stop <= -20 && worst_pass < 1 && worst_notch <= -30, d.str()};
}

Outcome statistics_oracle() {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    const int n_perm = 100000;
    const double shifts[4][3] = {{0, 0.3, 0.5}, {0, 0, 0}, {0, 0.2, -0.2}, {0, 0.4, 0.4}};
    const int sizes[3] = {30, 35, 40};
    double worst_z = 0;
    for (int cs = 0; cs < 4; ++cs) {
        std::vector<std::vector<double>> groups(3);
        for (int k = 0; k < 3; ++k)
            for (int i = 0; i < sizes[k]; ++i) {
                double v = g(rng) + shifts[cs][k];
                if (cs == 3) v = std::round(v * 2) / 2;  // heavy ties
                groups[static_cast<std::size_t>(k)].push_back(v);
            }
        const auto perm = oracle::permutation_p(groups, oracle::rank_statistics, n_perm, 11 + static_cast<std::uint64_t>(cs));
        const auto kw = kruskal_wallis(groups);
        const auto ci = conover_iman(groups);
        const double lib[4] = {kw.p, ci[0][1], ci[0][2], ci[1][2]};
        for (int i = 0; i < 4; ++i) {
            const double se = std::sqrt(std::max(perm[static_cast<std::size_t>(i)] * (1 - perm[static_cast<std::size_t>(i)]), 1.0 / n_perm) / n_perm);
            worst_z = std::max(worst_z, std::abs(lib[i] - perm[static_cast<std::size_t>(i)]) / se);
        }
    }
    // Step-up adjustment against the formula applied by hand.
    std::vector<double> p(40);
    std::uniform_real_distribution<double> u(0, 0.2);
    for (auto& v : p) v = u(rng);
    const auto q = fdr_adjust(p);
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    bool fdr_exact = true;
    const double m = static_cast<double>(p.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        double best = 1.0;
        for (std::size_t s = r; s < order.size(); ++s) best = std::min(best, p[order[s]] * m / static_cast<double>(s + 1));
        fdr_exact = fdr_exact && q[order[r]] == best;
    }
    std::ostringstream d;
    d << std::fixed << std::setprecision(2) << "max |p - p_perm| = " << worst_z << " sigma over 16 p-values (limit 3), FDR "
      << (fdr_exact ? "exact" : "mismatch");
    return {worst_z <= 3 && fdr_exact, d.str()};
}

// ---------------------------------------------------------------------------
// Reference corpus and the end-to-end run

struct Reference {
    eval::Dataset data;
    double setup_seconds = 0;
};

Reference prepare_reference(const fs::path& work, unsigned threads) {
    const auto t0 = clock_type::now();
    const synth::CorpusSpec spec;  // 600 recordings, delta x3, 2 bursts/min
    const PreprocessConfig pre;
    const auto edf = work / "edf", frames = work / "frames", features = work / "features.tsv", done = work / "ready";
    const std::string tag = "n=" + std::to_string(spec.n_recordings) + " seed=" + std::to_string(spec.seed) + " v1";
    Reference ref;
    double recorded = 0;
    if (!fs::exists(done) || [&] {
            std::ifstream in(done);
            std::string t;
            std::getline(in, t);
            in >> recorded;
            return t != tag;
        }()) {
        fs::remove_all(work);
        auto log = [](const std::string& what) { return [what](int d, int n) { if (d % 100 == 0 || d == n) std::cerr << what << " " << d << "/" << n << std::endl; }; };
        synth::generate_corpus(spec, edf.string(), log("synth"), threads);
        pipeline::preprocess_corpus(edf.string(), frames.string(), pre, threads, log("preprocess"));
        const auto sets = pipeline::load_frames(frames.string(), threads);
        write_feature_table(features.string(), pipeline::featurize(sets, threads, log("featurize")));
        recorded = seconds_since(t0);
        std::ofstream(done) << tag << "\n" << recorded << "\n";
    }
    ref.data = pipeline::make_dataset("reference", pipeline::load_frames(frames.string(), threads), read_feature_table(features.string()));
    ref.setup_seconds = recorded;
    return ref;
}

/// Desk-scale training settings for the 600-recording run (single core).
eval::CvConfig desk_config(unsigned parallel_steps) {
    eval::CvConfig cv;
    cv.seed = 7;
    cv.models = {"siNet", "miNetN", "miNetP", "MINetP", "TransNetP", "GBE", "RF", "META"};
    cv.sinet.epochs = 10;
    cv.sinet.frames_per_epoch = 16;
    cv.sinet.batch_frames = 256;
    cv.bags.epochs = 10;
    cv.bags.batch_recordings = 32;
    cv.bags.frames_per_recording = 16;
    cv.gbe_members = 5;
    cv.rf.n_trees = 400;
    cv.parallel_steps = parallel_steps;
    cv.log = [](const std::string& s) {
        if (s.rfind("step", 0) == 0) std::cerr << s << std::endl;
    };
    return cv;
}

struct EndToEnd {
    Outcome ordering, audit;
    double seconds = 0;
};

EndToEnd end_to_end(const Reference& ref, unsigned parallel_steps, const fs::path& report_path) {
    EndToEnd e;
    const auto t0 = clock_type::now();
    const auto cv = desk_config(parallel_steps);
    const auto rep = eval::cross_validate(ref.data, cv);
    e.seconds = seconds_since(t0) + ref.setup_seconds;
    std::ofstream(report_path) << eval::to_json(rep).dump(1) << "\n";

    auto mean_auc = [&](const std::string& m) { return rep.models.at(m).auc_summary().mean; };
    std::ostringstream d;
    d << std::fixed << std::setprecision(4);
    bool ok = true;
    const double meta = mean_auc("META");
    d << "META " << meta;
    for (const auto& c : cv.meta.components) {
        d << ", " << c << " " << mean_auc(c);
        ok = ok && meta >= mean_auc(c) - 0.01;
    }
    const double si = mean_auc("siNet");
    d << ", siNet " << si;
    // The pretrained bag model is compared; the naive one is reported only.
    d << ", miNetP " << mean_auc("miNetP");
    ok = ok && mean_auc("miNetP") >= si;
    for (const auto& m : {"miNetN", "RF"})
        if (rep.models.count(m)) d << ", " << m << " " << mean_auc(m);
    d << std::setprecision(0) << "; " << e.seconds << " s including " << ref.setup_seconds << " s corpus preparation";
    e.ordering = {ok && e.seconds < 7200, d.str()};

    // Every model kind is instrumented in every step, and no test-fold row
    // is touched outside the Test phase.
    std::set<std::pair<int, std::string>> trained, tested;
    for (const auto& a : rep.audit.entries()) {
        if (a.phase == eval::Phase::Test) tested.insert({a.step, a.model});
        else trained.insert({a.step, a.model});
    }
    bool covered = true;
    for (int s = 0; s < cv.k; ++s)
        for (const auto& m : cv.models) covered = covered && trained.count({s, m}) && tested.count({s, m});
    std::ostringstream a;
    a << rep.audit_violations << " test-fold accesses outside testing among " << rep.audit.entries().size() << " logged accesses; "
      << cv.models.size() << " models instrumented in all " << cv.k << " steps" << (covered ? "" : " (INCOMPLETE)");
    e.audit = {rep.audit_violations == 0 && covered, a.str()};
    return e;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"acceptance criteria"};
    std::string work = "acceptance_work", data_dir = EEGSCREEN_DATA;
    std::vector<int> only;
    unsigned threads = 1;
    app.add_option("--work", work, "directory for the reference corpus and reports");
    app.add_option("--data", data_dir, "directory with the scaling tables");
    app.add_option("--only", only, "run only these criteria");
    app.add_option("-j,--threads", threads, "worker threads");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria = {
        {1, "parameter counts", 1},    {2, "feature dimensions", 60},       {3, "scaling law from tabulated means", 1},
        {4, "gradient checks", 120},   {5, "Riemannian mean oracle", 30},   {6, "AUC oracle", 10},
        {7, "filter masks", 10},       {8, "end-to-end ordering", 7200},    {9, "statistics oracle", 120},
        {10, "leakage audit", 7200},
    };
    auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

    fs::create_directories(work);
    std::optional<Reference> ref;
    auto reference = [&]() -> const Reference& {
        if (!ref) ref = prepare_reference(fs::path(work) / "reference", threads);
        return *ref;
    };
    std::optional<EndToEnd> e2e;
    auto run_e2e = [&]() -> const EndToEnd& {
        if (!e2e) e2e = end_to_end(reference(), threads, fs::path(work) / "cv_report.json");
        return *e2e;
    };

    int failed = 0;
    json summary = json::array();
    for (const auto& c : criteria) {
        if (!wanted(c.id)) continue;
        const auto t0 = clock_type::now();
        Outcome o;
        double elapsed = 0;
        try {
            switch (c.id) {
                case 1: o = parameter_counts(); break;
                case 2: {
                    const auto& r = reference();
                    const auto t1 = clock_type::now();
                    o = feature_dimensions(r.data);
                    elapsed = seconds_since(t1);
                    break;
                }
                case 3: o = scaling_law(data_dir); break;
                case 4: o = gradients(); break;
                case 5: o = riemann_oracle(); break;
                case 6: o = auc_oracle(); break;
                case 7: o = filter_masks(); break;
                case 8: o = run_e2e().ordering; break;
                case 9: o = statistics_oracle(); break;
                case 10: o = run_e2e().audit; break;
            }
            if (c.id == 8 || c.id == 10) elapsed = run_e2e().seconds;
            else if (c.id != 2) elapsed = seconds_since(t0);
        } catch (const std::exception& ex) {
            o = {false, std::string("error: ") + ex.what()};
            elapsed = seconds_since(t0);
        }
        const bool in_budget = elapsed <= c.budget_s;
        const bool pass = o.pass && in_budget;
        failed += pass ? 0 : 1;
        std::cout << "criterion " << std::setw(2) << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << " ["
                  << std::fixed << std::setprecision(2) << elapsed << " s" << (in_budget ? "" : ", over budget") << "]" << std::endl;
        summary.push_back({{"criterion", c.id}, {"name", c.name}, {"pass", pass}, {"detail", o.detail}, {"seconds", elapsed}});
    }
    std::ofstream(fs::path(work) / "acceptance.json") << summary.dump(1) << "\n";
    return failed;
}
