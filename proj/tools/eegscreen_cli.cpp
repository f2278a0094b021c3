// eegscreen command-line driver.
//
// Exit status: 0 success, 1 runtime failure, 2 usage error, 3 configuration
// error. Failures print one line `error: {"kind": ..., "message": ...}` on
// stderr.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "eegscreen/evaluation.hpp"
#include "eegscreen/features.hpp"
#include "eegscreen/pipeline.hpp"
#include "eegscreen/run_config.hpp"
#include "eegscreen/scaling.hpp"
#include "eegscreen/stats.hpp"
#include "eegscreen/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eegscreen;

namespace {

const std::vector<std::string> kModelOrder = {"RF", "siNet", "miNetN", "MINetN", "TransNetN", "miNetP", "MINetP", "TransNetP", "GBE", "META"};

std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("IoError", "digest failed");
    std::ostringstream o;
    for (unsigned i = 0; i < len; ++i) o << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return o.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read " + p.string());
    std::ostringstream o;
    o << in.rdbuf();
    return o.str();
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream o(p, std::ios::binary);
    o << text;
    if (!o) throw Error("IoError", "cannot write " + p.string());
}

// Marker recording which configuration produced a stage output. A matching
// marker means the output is current; a different one is never overwritten.
struct StageMarker {
    fs::path path;
    std::string digest;

    bool current() const {
        if (!fs::exists(path)) return false;
        const auto j = json::parse(slurp(path));
        if (j.value("digest", "") == digest) return true;
        throw ConfigError(path.parent_path().string() + " holds output of a different configuration (" + j.value("digest", "?").substr(0, 12) +
                          "); choose another output path");
    }
    void write(const std::string& stage, const std::string& canonical) const {
        write_text(path, json{{"stage", stage}, {"digest", digest}, {"config", canonical}}.dump(1) + "\n");
    }
};

// Identity of an input produced by an earlier stage: its marker digest if
// present, otherwise a hash of the file.
std::string input_digest(const fs::path& p) {
    const auto marker = fs::is_directory(p) ? p / "stage.json" : fs::path(p.string() + ".stage.json");
    if (fs::exists(marker)) return json::parse(slurp(marker)).value("digest", "");
    return sha256_hex(slurp(fs::is_directory(p) ? p / "manifest.jsonl" : p));
}

std::string canonical_model(const std::string& name) {
    auto lower = [](std::string s) {
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        return s;
    };
    for (const auto& m : kModelOrder)
        if (lower(m) == lower(name)) return m;
    throw ConfigError("unknown model " + name);
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

pipeline::Progress progress(const std::string& what) {
    return [what](int done, int total) {
        if (done == total || done % 50 == 0) log_line(what + " " + std::to_string(done) + "/" + std::to_string(total));
    };
}

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    unsigned threads = 0;
    std::string work_dir;

    RunConfig load() const {
        RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        apply_overrides(c, overrides);
        if (const char* w = std::getenv("EEGSCREEN_WORK_DIR")) c.work_dir = w;
        if (!work_dir.empty()) c.work_dir = work_dir;
        if (threads) c.threads = threads;
        validate(c);
        return c;
    }
};

// ---------------------------------------------------------------------------

int cmd_synth(const Common& common, const std::string& spec_name, std::string out, int n) {
    auto c = common.load();
    if (spec_name == "null") {
        c.corpus.pathology.delta_factor = 1.0;
        c.corpus.pathology.burst_rate = 0;
    } else if (spec_name != "default") {
        throw ConfigError("unknown corpus spec " + spec_name);
    }
    if (n > 0) c.corpus.n_recordings = n;
    c.corpus.seed = c.seed;
    validate(c);
    const auto canon = canonical(c, {Stage::Synth}) + "spec=" + spec_name + "\nn=" + std::to_string(c.corpus.n_recordings) + "\nseed=" +
                       std::to_string(c.seed) + "\n";
    const auto digest = sha256_hex(canon);
    if (out.empty()) out = (fs::path(c.work_dir) / ("corpus-" + digest.substr(0, 12))).string();
    const StageMarker marker{fs::path(out) / "stage.json", digest};
    if (!marker.current()) {
        synth::generate_corpus(c.corpus, out, progress("synth"), c.threads);
        marker.write("synth", canon);
    } else {
        log_line("up to date: " + out);
    }
    std::cout << out << "\n";
    return 0;
}

int cmd_preprocess(const Common& common, const std::string& corpus, std::string out) {
    const auto c = common.load();
    const auto canon = canonical(c, {Stage::Preprocess}) + "input=" + input_digest(corpus) + "\n";
    const auto digest = sha256_hex(canon);
    if (out.empty()) out = (fs::path(c.work_dir) / ("frames-" + digest.substr(0, 12))).string();
    const StageMarker marker{fs::path(out) / "stage.json", digest};
    if (!marker.current()) {
        const auto s = pipeline::preprocess_corpus(corpus, out, c.preprocess, c.threads, progress("preprocess"));
        log_line("kept " + std::to_string(s.kept.size()) + ", excluded " + std::to_string(s.excluded.size()));
        marker.write("preprocess", canon);
    } else {
        log_line("up to date: " + out);
    }
    std::cout << out << "\n";
    return 0;
}

int cmd_featurize(const Common& common, const std::string& frames, std::string out) {
    const auto c = common.load();
    const auto canon = "input=" + input_digest(frames) + "\n";
    const auto digest = sha256_hex(canon);
    if (out.empty()) out = (fs::path(c.work_dir) / ("features-" + digest.substr(0, 12) + ".tsv")).string();
    const StageMarker marker{out + ".stage.json", digest};
    if (!marker.current() || !fs::exists(out)) {
        const auto sets = pipeline::load_frames(frames, c.threads);
        const auto rows = pipeline::featurize(sets, c.threads, progress("featurize"));
        if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
        write_feature_table(out, rows);
        marker.write("featurize", canon);
    } else {
        log_line("up to date: " + out);
    }
    std::cout << out << "\n";
    return 0;
}

// Resolves the requested models; META pulls in its components.
std::vector<std::string> resolve_models(const RunConfig& c, const std::vector<std::string>& requested) {
    std::vector<std::string> names;
    for (const auto& r : requested)
        for (const auto& m : detail::parse_list(r)) names.push_back(m == "all" ? m : canonical_model(m));
    if (names.empty()) names = c.cv.models;
    if (std::find(names.begin(), names.end(), "all") != names.end()) names = kModelOrder;
    if (std::find(names.begin(), names.end(), "META") != names.end())
        for (const auto& comp : c.cv.meta.components) names.push_back(canonical_model(comp));
    std::vector<std::string> out;
    for (const auto& m : kModelOrder)
        if (std::find(names.begin(), names.end(), m) != names.end()) out.push_back(m);
    return out;
}

eval::Dataset load_dataset(const RunConfig& c, const std::vector<std::string>& models, const std::string& frames, const std::string& features,
                           std::string& inputs) {
    const bool need_frames = std::any_of(models.begin(), models.end(), [](const std::string& m) { return m.find("Net") != std::string::npos; });
    const bool need_features = std::any_of(models.begin(), models.end(), [](const std::string& m) { return m == "GBE" || m == "RF"; });
    if (need_frames && frames.empty()) throw ConfigError("neural models need --frames");
    if (need_features && features.empty()) throw ConfigError("GBE and RF need --features");
    std::vector<FrameSet> sets;
    std::vector<RecordingFeatures> rows;
    std::string id;
    if (need_frames) {
        inputs += "frames=" + input_digest(frames) + "\n";
        sets = pipeline::load_frames(frames, c.threads);
        id = fs::path(frames).filename().string();
    }
    if (need_features) {
        inputs += "features=" + input_digest(features) + "\n";
        rows = read_feature_table(features);
        if (id.empty()) id = fs::path(features).stem().string();
    }
    return pipeline::make_dataset(id, std::move(sets), std::move(rows));
}

eval::CvConfig cv_config(const RunConfig& c, const std::vector<std::string>& models) {
    auto cv = c.cv;
    cv.models = models;
    cv.seed = c.seed;
    cv.log = log_line;
    return cv;
}

int cmd_train(const Common& common, const std::vector<std::string>& model_args, const std::string& frames, const std::string& features, int step,
              std::string out) {
    const auto c = common.load();
    const auto models = resolve_models(c, model_args);
    if (step < 0 || step >= c.cv.k) throw ConfigError("step must be in [0, folds)");
    std::string inputs;
    const auto data = load_dataset(c, models, frames, features, inputs);
    auto cv = cv_config(c, models);
    const auto canon = canonical(c, {Stage::Global, Stage::Model}) + inputs + "train.models=" + detail::join(models) + "\nstep=" + std::to_string(step) + "\n";
    const auto digest = sha256_hex(canon);
    if (out.empty()) out = (fs::path(c.work_dir) / ("models-" + digest.substr(0, 12))).string();
    const StageMarker marker{fs::path(out) / "stage.json", digest};
    if (marker.current()) {
        log_line("up to date: " + out);
        std::cout << out << "\n";
        return 0;
    }
    cv.artifact_dir = out;
    const auto folds = eval::stratified_folds(data.meta, cv.k, cv.seed);
    const auto so = eval::detail::run_step(data, cv, folds, step);
    json summary{{"dataset_id", data.id}, {"step", step}, {"models", json::object()}};
    for (const auto& [m, r] : so.results) summary["models"][m] = {{"test_auc", r.test_auc}, {"test_acc", r.test_acc}, {"chosen", r.chosen}};
    summary["audit_violations"] = so.audit.violations(folds, cv.k).size();
    write_text(fs::path(out) / "summary.json", summary.dump(1) + "\n");
    marker.write("train", canon);
    std::cout << out << "\n";
    return 0;
}

// Report JSON without wall-clock fields so that reruns are byte-identical.
json stable_report(const eval::CvReport& r) {
    auto j = eval::to_json(r);
    for (auto& [name, m] : j["models"].items())
        for (auto& s : m["steps"]) s.erase("seconds");
    return j;
}

int cmd_evaluate(const Common& common, const std::vector<std::string>& model_args, const std::string& frames, const std::string& features, int folds,
                 std::optional<std::uint64_t> seed, std::string out) {
    auto c = common.load();
    if (folds > 0) set_key(c, "folds", std::to_string(folds));
    if (seed) c.seed = *seed;
    const auto models = resolve_models(c, model_args);
    std::string inputs;
    const auto data = load_dataset(c, models, frames, features, inputs);
    const auto cv = cv_config(c, models);
    const auto canon = canonical(c, {Stage::Global, Stage::Model}) + inputs + "evaluate.models=" + detail::join(models) + "\n";
    const auto digest = sha256_hex(canon);
    if (out.empty()) out = (fs::path(c.work_dir) / ("cv-" + digest.substr(0, 12) + ".json")).string();
    const StageMarker marker{out + ".stage.json", digest};
    if (marker.current() && fs::exists(out)) {
        log_line("up to date: " + out);
        std::cout << out << "\n";
        return 0;
    }
    const auto report = eval::cross_validate(data, cv);
    write_text(out, stable_report(report).dump(1) + "\n");
    json timing = json::object();
    for (const auto& [m, r] : report.models)
        for (const auto& s : r.steps) timing[m].push_back(s.seconds);
    write_text(out + ".timing.json", timing.dump(1) + "\n");
    marker.write("evaluate", canon);
    for (const auto& m : models) {
        const auto a = report.models.at(m).auc_summary();
        std::cerr << std::left << std::setw(10) << m << " AUC " << std::fixed << std::setprecision(4) << a.mean << " +/- " << a.se << "\n";
    }
    if (report.audit_violations) throw Error("LeakageDetected", std::to_string(report.audit_violations) + " test-fold accesses during training");
    std::cout << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// stats, fit-scaling, report

struct LoadedReport {
    std::string dataset_id;
    std::size_t n = 0;
    std::map<std::string, std::vector<double>> step_auc;
    std::map<std::string, Summary> auc;
};

LoadedReport load_report(const std::string& path) {
    const auto j = json::parse(slurp(path));
    LoadedReport r;
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.n = j.at("folds").size();
    for (const auto& [name, m] : j.at("models").items()) {
        for (const auto& s : m.at("steps")) r.step_auc[name].push_back(s.at("test_auc").get<double>());
        r.auc[name] = summarize(r.step_auc[name]);
    }
    return r;
}

json group_test(const std::vector<std::string>& names, const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw ConfigError("need at least two groups to compare");
    const auto kw = kruskal_wallis(groups);
    const auto p = conover_iman(groups);
    std::vector<double> upper;
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = i + 1; j < p.size(); ++j) upper.push_back(p[i][j]);
    const auto q = fdr_adjust(upper);
    auto adj = p;
    std::size_t t = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = i + 1; j < p.size(); ++j) adj[i][j] = adj[j][i] = q[t++];
    return {{"groups", names}, {"kruskal_wallis", {{"h", kw.h}, {"p", kw.p}}}, {"conover_iman_p", p}, {"conover_iman_p_fdr", adj}};
}

int cmd_stats(const std::vector<std::string>& reports, const std::string& model, const std::string& out) {
    std::vector<LoadedReport> loaded;
    for (const auto& p : reports) loaded.push_back(load_report(p));
    json result = json::array();
    if (!model.empty()) {
        // One model across datasets.
        const auto m = canonical_model(model);
        std::vector<std::string> names;
        std::vector<std::vector<double>> groups;
        for (const auto& r : loaded) {
            if (!r.step_auc.count(m)) throw ConfigError(r.dataset_id + " has no results for " + m);
            names.push_back(r.dataset_id);
            groups.push_back(r.step_auc.at(m));
        }
        auto t = group_test(names, groups);
        t["model"] = m;
        result.push_back(t);
    } else {
        // Models within each dataset.
        for (const auto& r : loaded) {
            std::vector<std::string> names;
            std::vector<std::vector<double>> groups;
            for (const auto& m : kModelOrder)
                if (r.step_auc.count(m)) {
                    names.push_back(m);
                    groups.push_back(r.step_auc.at(m));
                }
            auto t = group_test(names, groups);
            t["dataset_id"] = r.dataset_id;
            result.push_back(t);
        }
    }
    const auto text = result.dump(1) + "\n";
    if (out.empty()) std::cout << text;
    else write_text(out, text);
    return 0;
}

// CSV rows `n,metric[,sigma]`; a non-numeric first line is a header.
std::vector<ScalingPoint> read_scaling_csv(const std::string& path) {
    std::istringstream in(slurp(path));
    std::vector<ScalingPoint> pts;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto cells = detail::parse_list(line);
        if (cells.size() < 2 || cells.size() > 3) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected n,metric[,sigma]");
        if (lineno == 1 && !std::isdigit(static_cast<unsigned char>(cells[0][0]))) continue;
        ScalingPoint p;
        p.n = detail::parse_number<double>("n", cells[0]);
        p.metric = detail::parse_number<double>("metric", cells[1]);
        if (cells.size() == 3) p.sigma = detail::parse_number<double>("sigma", cells[2]);
        pts.push_back(p);
    }
    return pts;
}

json fit_json(const PowerLawFit& f) {
    json j{{"asymptote", f.asymptote}, {"asymptote_se", f.asymptote_se()}, {"alpha", f.alpha}, {"beta", f.beta},
           {"r_squared", f.r_squared}, {"converged", f.converged}};
    try {
        j["n_db"] = n_db(f);
    } catch (const Error&) {
        j["n_db"] = nullptr;
    }
    return j;
}

int cmd_fit_scaling(const std::string& input, const std::string& out) {
    const auto f = fit_power_law(read_scaling_csv(input));
    const auto j = fit_json(f);
    std::cout << std::fixed << std::setprecision(2) << "asymptote " << f.asymptote << " +/- " << f.asymptote_se() << "  alpha " << f.alpha << "  beta "
              << std::setprecision(4) << f.beta << "  R2 " << f.r_squared << "\n";
    if (!out.empty()) write_text(out, j.dump(1) + "\n");
    return 0;
}

int cmd_report(const std::vector<std::string>& reports, const std::string& out_dir) {
    std::vector<LoadedReport> loaded;
    for (const auto& p : reports) loaded.push_back(load_report(p));
    std::vector<std::string> models;
    for (const auto& m : kModelOrder)
        if (std::any_of(loaded.begin(), loaded.end(), [&](const LoadedReport& r) { return r.auc.count(m) > 0; })) models.push_back(m);

    // AUC table in percent, mean +/- standard error.
    std::ostringstream md, tsv;
    md << std::fixed << std::setprecision(1) << "| model |";
    tsv << std::fixed << std::setprecision(3) << "model";
    for (const auto& r : loaded) {
        md << " " << r.dataset_id << " |";
        tsv << "\t" << r.dataset_id << "_auc\t" << r.dataset_id << "_se";
    }
    md << "\n|---|";
    for (std::size_t i = 0; i < loaded.size(); ++i) md << "---|";
    md << "\n";
    tsv << "\n";
    for (const auto& m : models) {
        md << "| " << m << " |";
        tsv << m;
        for (const auto& r : loaded) {
            if (const auto it = r.auc.find(m); it != r.auc.end()) {
                md << " " << 100 * it->second.mean << " ± " << 100 * it->second.se << " |";
                tsv << "\t" << 100 * it->second.mean << "\t" << 100 * it->second.se;
            } else {
                md << " - |";
                tsv << "\t\t";
            }
        }
        md << "\n";
        tsv << "\n";
    }
    write_text(fs::path(out_dir) / "auc_table.md", md.str());
    write_text(fs::path(out_dir) / "auc_table.tsv", tsv.str());

    // Scaling data: one point per dataset size, plus a fitted curve when
    // enough distinct sizes are available.
    std::ostringstream points, curves, fits;
    points << "model\tn\tauc\tse\n";
    curves << "model\tn\tauc_fit\n";
    fits << "model\tasymptote\tasymptote_se\talpha\tbeta\tr_squared\tn_db\n";
    for (const auto& m : models) {
        std::vector<ScalingPoint> pts;
        for (const auto& r : loaded)
            if (const auto it = r.auc.find(m); it != r.auc.end()) {
                pts.push_back({static_cast<double>(r.n), 100 * it->second.mean, 0.0});
                points << m << "\t" << r.n << "\t" << 100 * it->second.mean << "\t" << 100 * it->second.se << "\n";
            }
        std::set<double> sizes;
        for (const auto& p : pts) sizes.insert(p.n);
        if (sizes.size() < 4) continue;
        std::sort(pts.begin(), pts.end(), [](const ScalingPoint& a, const ScalingPoint& b) { return a.n < b.n; });
        const auto f = fit_power_law(pts);
        const auto j = fit_json(f);
        fits << m << "\t" << f.asymptote << "\t" << f.asymptote_se() << "\t" << f.alpha << "\t" << f.beta << "\t" << f.r_squared << "\t"
             << (j["n_db"].is_null() ? std::string("") : std::to_string(j["n_db"].get<double>())) << "\n";
        const double lo = std::log10(pts.front().n), hi = std::log10(pts.back().n) + 2;
        for (int i = 0; i <= 60; ++i) {
            const double n = std::pow(10.0, lo + (hi - lo) * i / 60);
            curves << m << "\t" << n << "\t" << f(n) << "\n";
        }
    }
    write_text(fs::path(out_dir) / "scaling_points.tsv", points.str());
    write_text(fs::path(out_dir) / "scaling_fits.tsv", fits.str());
    write_text(fs::path(out_dir) / "scaling_curves.tsv", curves.str());
    std::cout << md.str();
    return 0;
}

void print_error(const std::string& kind, const std::string& message) {
    std::cerr << "error: " << json{{"kind", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Training allocates and frees large tensors every step; keep them on the heap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"EEG pathology screening toolkit"};
    app.require_subcommand(1);
    Common common;
    app.add_option("-c,--config", common.config_path, "key=value config file")->check(CLI::ExistingFile);
    app.add_option("--set", common.overrides, "override a config key (key=value)");
    app.add_option("-j,--threads", common.threads, "worker threads");
    app.add_option("--work-dir", common.work_dir, "work directory (env EEGSCREEN_WORK_DIR)");

    std::string spec = "default", out, input, frames, features, model;
    int n = 0, step = 0, folds = 0;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> models, reports;

    auto* synth = app.add_subcommand("synth", "generate a synthetic EDF corpus");
    synth->add_option("--spec", spec, "default or null")->check(CLI::IsMember({"default", "null"}));
    synth->add_option("--n", n, "number of recordings");
    synth->add_option("-o,--out", out, "output directory");

    auto* prep = app.add_subcommand("preprocess", "filter, resample and frame a corpus");
    prep->add_option("corpus", input, "corpus directory with manifest.jsonl")->required()->check(CLI::ExistingDirectory);
    prep->add_option("-o,--out", out, "output directory");

    auto* feat = app.add_subcommand("featurize", "compute handcrafted features for preprocessed frames");
    feat->add_option("frames", input, "frame directory")->required()->check(CLI::ExistingDirectory);
    feat->add_option("-o,--out", out, "feature table (.tsv)");

    auto add_data = [&](CLI::App* sub) {
        sub->add_option("-m,--model", models, "models (comma separated, or all)");
        sub->add_option("--frames", frames, "frame directory")->check(CLI::ExistingDirectory);
        sub->add_option("--features", features, "feature table")->check(CLI::ExistingFile);
        sub->add_option("-o,--out", out, "output path");
    };
    auto* train = app.add_subcommand("train", "fit models on one cross-validation split and save them");
    add_data(train);
    train->add_option("--step", step, "cross-validation step");
    auto* evaluate = app.add_subcommand("evaluate", "cross-validate models and write a report");
    add_data(evaluate);
    evaluate->add_option("--folds", folds, "number of folds");
    evaluate->add_option("--seed", seed, "seed");

    auto* stats = app.add_subcommand("stats", "Kruskal-Wallis and Conover-Iman tests on step AUCs");
    stats->add_option("reports", reports, "report files")->required()->check(CLI::ExistingFile);
    stats->add_option("--model", model, "compare one model across reports instead of models within each report");
    stats->add_option("-o,--out", out, "output file");

    auto* fit = app.add_subcommand("fit-scaling", "fit the saturation power law to metric-vs-size data");
    fit->add_option("-i,--input", input, "CSV n,metric[,sigma]")->required()->check(CLI::ExistingFile);
    fit->add_option("-o,--out", out, "output JSON");

    auto* report = app.add_subcommand("report", "AUC table and scaling-curve data from reports");
    report->add_option("reports", reports, "report files")->required()->check(CLI::ExistingFile);
    report->add_option("-o,--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("UsageError", e.what());
        return 2;
    }

    try {
        common.load();  // validate the configuration for every subcommand
        if (*synth) return cmd_synth(common, spec, out, n);
        if (*prep) return cmd_preprocess(common, input, out);
        if (*feat) return cmd_featurize(common, input, out);
        if (*train) return cmd_train(common, models, frames, features, step, out);
        if (*evaluate) return cmd_evaluate(common, models, frames, features, folds, seed, out);
        if (*stats) return cmd_stats(reports, model, out);
        if (*fit) return cmd_fit_scaling(input, out);
        if (*report) return cmd_report(reports, out);
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
        return e.kind() == "ConfigError" ? 3 : 1;
    } catch (const json::exception& e) {
        print_error("FormatError", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("RuntimeError", e.what());
        return 1;
    }
    return 2;
}
