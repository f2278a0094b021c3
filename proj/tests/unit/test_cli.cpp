#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "eegscreen/preprocess.hpp"
#include "eegscreen/run_config.hpp"

using namespace eegscreen;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int status = -1;
    std::string out, err;
};

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream o;
    o << in.rdbuf();
    return o.str();
}

class Cli : public ::testing::Test {
protected:
    static fs::path dir() {
        static const fs::path d = [] {
            auto p = fs::temp_directory_path() / "eegscreen_cli_test";
            fs::remove_all(p);
            fs::create_directories(p);
            return p;
        }();
        return d;
    }

    static CliResult run(const std::string& args) {
        const auto out = dir() / "stdout.txt", err = dir() / "stderr.txt";
        const std::string cmd = std::string(EEGSCREEN_CLI) + " --work-dir " + (dir() / "work").string() + " " + args + " >" + out.string() + " 2>" +
                                err.string();
        CliResult r;
        const int s = std::system(cmd.c_str());
        r.status = WIFEXITED(s) ? WEXITSTATUS(s) : -1;
        r.out = read_all(out);
        r.err = read_all(err);
        return r;
    }

    static std::string trimmed(std::string s) {
        while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
        return s;
    }

    // Small corpus shared by the pipeline tests: generated, preprocessed
    // and featurized once.
    struct Corpus {
        std::string edf, frames, features;
    };
    static const Corpus& corpus() {
        static const Corpus c = [] {
            Corpus k;
            k.edf = (dir() / "corpus").string();
            auto r = run("--set synth.min_seconds=310 --set synth.max_seconds=320 synth --n 24 --out " + k.edf);
            EXPECT_EQ(r.status, 0) << r.err;
            r = run("preprocess " + k.edf);
            EXPECT_EQ(r.status, 0) << r.err;
            k.frames = trimmed(r.out);
            r = run("featurize " + k.frames);
            EXPECT_EQ(r.status, 0) << r.err;
            k.features = trimmed(r.out);
            return k;
        }();
        return c;
    }
};

}  // namespace

TEST(RunConfigFile, ParsesTypedKeys) {
    std::istringstream in("schema_version = 1\n# comment\nseed = 42\nregion = US-60Hz  # trailing\nmodels = GBE, RF\nmeta.c=2.5\n");
    const auto c = parse_run_config(in);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.preprocess.mains_freq, 60.0);
    EXPECT_EQ(c.cv.models, (std::vector<std::string>{"GBE", "RF"}));
    EXPECT_EQ(c.cv.meta.c, 2.5);
}

TEST(RunConfigFile, Errors) {
    auto parse = [](const std::string& s) {
        std::istringstream in(s);
        return parse_run_config(in);
    };
    EXPECT_THROW(parse("seed = 1\n"), ConfigError);                        // no schema_version
    EXPECT_THROW(parse("schema_version = 2\n"), ConfigError);
    EXPECT_THROW(parse("schema_version = 1\nbogus = 3\n"), ConfigError);
    EXPECT_THROW(parse("schema_version = 1\nregion = EU-60Hz\n"), ConfigError);
    EXPECT_THROW(parse("schema_version = 1\nseed = x\n"), ConfigError);
    EXPECT_THROW(parse("schema_version = 1\nfolds = 1\n"), ConfigError);
    EXPECT_THROW(parse("schema_version = 1\nseed\n"), ConfigError);
}

TEST(RunConfigFile, CanonicalFormTracksStageKeys) {
    RunConfig a;
    RunConfig b = a;
    apply_overrides(b, {"threads=4", "work_dir=/elsewhere"});
    EXPECT_EQ(canonical(a, {Stage::Preprocess, Stage::Model, Stage::Global}), canonical(b, {Stage::Preprocess, Stage::Model, Stage::Global}));
    apply_overrides(b, {"region=US-60Hz"});
    EXPECT_NE(canonical(a, {Stage::Preprocess}), canonical(b, {Stage::Preprocess}));
    EXPECT_EQ(canonical(a, {Stage::Model}), canonical(b, {Stage::Model}));
    // Equivalent spellings normalize to the same text.
    RunConfig c = a, d = a;
    apply_overrides(c, {"meta.c=2.50"});
    apply_overrides(d, {"meta.c=2.5"});
    EXPECT_EQ(canonical(c, {Stage::Model}), canonical(d, {Stage::Model}));
}

TEST_F(Cli, UnknownFlagIsUsageError) {
    const auto r = run("evaluate --no-such-flag");
    EXPECT_EQ(r.status, 2);
    EXPECT_EQ(r.err.rfind("error: {", 0), 0u) << r.err;
    const auto j = nlohmann::json::parse(r.err.substr(7));
    EXPECT_EQ(j["kind"], "UsageError");
}

TEST_F(Cli, BadConfigValueIsConfigError) {
    const auto r = run("--set region=Mars fit-scaling --input " + std::string(EEGSCREEN_DATA) + "/elm_auc_meta.csv");
    EXPECT_EQ(r.status, 3);
    EXPECT_EQ(nlohmann::json::parse(r.err.substr(7))["kind"], "ConfigError");
}

TEST_F(Cli, SynthThenPreprocessGivesFiftyFramesPerRecording) {
    const auto& c = corpus();
    const auto rows = read_manifest((fs::path(c.frames) / "manifest.jsonl").string());
    ASSERT_EQ(rows.size(), 24u);
    for (const auto& r : rows) EXPECT_GE(r.n_frames, 50);
}

TEST_F(Cli, RerunReusesStageOutput) {
    const auto& c = corpus();
    const auto before = read_all(fs::path(c.frames) / "manifest.jsonl");
    const auto r = run("preprocess " + c.edf);
    EXPECT_EQ(r.status, 0);
    EXPECT_EQ(trimmed(r.out), c.frames);
    EXPECT_NE(r.err.find("up to date"), std::string::npos);
    EXPECT_EQ(read_all(fs::path(c.frames) / "manifest.jsonl"), before);
    // Other preprocessing settings land in a different directory.
    const auto us = run("--set region=US-60Hz preprocess " + c.edf);
    EXPECT_EQ(us.status, 0) << us.err;
    EXPECT_NE(trimmed(us.out), c.frames);
    // An explicit output holding another configuration's results is refused.
    const auto clash = run("--set region=US-60Hz preprocess " + c.edf + " --out " + c.frames);
    EXPECT_EQ(clash.status, 3);
}

TEST_F(Cli, EvaluateTwiceGivesIdenticalReports) {
    const auto& c = corpus();
    const auto a = (dir() / "cv_a.json").string(), b = (dir() / "cv_b.json").string();
    const std::string common = "--set gbe.members=3 --set gbt.iterations=50 evaluate --model gbe --folds 6 --seed 7 --features " + c.features;
    auto r = run(common + " --out " + a);
    ASSERT_EQ(r.status, 0) << r.err;
    r = run(common + " --out " + b);
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(read_all(a), read_all(b));
    const auto j = nlohmann::json::parse(read_all(a));
    EXPECT_EQ(j["models"]["GBE"]["steps"].size(), 6u);
    EXPECT_EQ(j["audit"]["violations"], 0);

    r = run("stats " + a);
    ASSERT_NE(r.status, 0);  // a single model cannot be compared with anything
    r = run("report " + a + " --out " + (dir() / "report").string());
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir() / "report" / "auc_table.md"));
    EXPECT_NE(r.out.find("| GBE |"), std::string::npos);
}

TEST_F(Cli, TrainSavesStepModels) {
    const auto& c = corpus();
    const auto out = dir() / "trained";
    const auto r = run("--set gbe.members=2 --set gbt.iterations=20 --set rf.n_trees=10 train --model gbe,rf --step 1 --features " + c.features +
                       " --out " + out.string());
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_TRUE(fs::exists(out / "step1" / "GBE.json"));
    EXPECT_TRUE(fs::exists(out / "step1" / "RF.json"));
    const auto s = nlohmann::json::parse(read_all(out / "summary.json"));
    EXPECT_EQ(s["audit_violations"], 0);
    EXPECT_EQ(s["step"], 1);
}

TEST_F(Cli, FitScalingOnTabulatedMeans) {
    const auto out = dir() / "fit.json";
    const auto r = run("fit-scaling --input " + std::string(EEGSCREEN_DATA) + "/elm_auc_meta.csv --out " + out.string());
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.out.rfind("asymptote ", 0), 0u) << r.out;
    const auto j = nlohmann::json::parse(read_all(out));
    EXPECT_NEAR(j["asymptote"].get<double>(), 91.3, 1.5);
    EXPECT_TRUE(j["converged"].get<bool>());
}
