#include <gtest/gtest.h>

#include <complex>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "eegscreen/synth.hpp"

using namespace eegscreen;
using namespace eegscreen::synth;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("eegscreen_synth_" + name);
    std::filesystem::remove_all(p);
    return p;
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

CorpusSpec small_spec(int n) {
    CorpusSpec s;
    s.n_recordings = n;
    s.min_seconds = 300;
    s.max_seconds = 305;
    s.seed = 11;
    return s;
}

// Mean power of x in [lo, hi] Hz from a plain periodogram.
double band_power(const std::vector<double>& x, double rate, double lo, double hi) {
    const auto n = x.size();
    double acc = 0;
    int bins = 0;
    for (std::size_t k = 1; k < n / 2; k += 3) {
        const double f = static_cast<double>(k) * rate / static_cast<double>(n);
        if (f < lo || f > hi) continue;
        std::complex<double> s = 0;
        for (std::size_t i = 0; i < n; ++i) s += x[i] * std::polar(1.0, -2 * M_PI * static_cast<double>(k * i) / static_cast<double>(n));
        acc += std::norm(s);
        ++bins;
    }
    return acc / bins;
}

}  // namespace

TEST(Synth, ValidatesSpec) {
    auto s = small_spec(4);
    s.pathology_fraction = 1.0;
    EXPECT_THROW(validate(s), Error);
    s = small_spec(4);
    s.min_seconds = 200;
    EXPECT_THROW(validate(s), Error);
    s = small_spec(0);
    EXPECT_THROW(validate(s), Error);
}

TEST(Synth, LabelBalanceMatchesFraction) {
    for (double frac : {0.5, 0.3, 0.77}) {
        auto s = small_spec(601);
        s.pathology_fraction = frac;
        const auto plans = plan_corpus(s);
        int path = 0;
        std::set<std::string> ids;
        for (const auto& p : plans) {
            path += p.meta.label == Label::Pathological;
            ids.insert(p.meta.recording_id);
            EXPECT_GE(p.seconds, s.min_seconds);
            EXPECT_LE(p.seconds, s.max_seconds);
        }
        EXPECT_LE(std::abs(path / 601.0 - frac), 1.0 / 601);
        EXPECT_EQ(ids.size(), plans.size());
    }
}

TEST(Synth, SameSeedGivesByteIdenticalFiles) {
    const auto a = temp_dir("a"), b = temp_dir("b");
    const auto spec = small_spec(3);
    generate_corpus(spec, a.string());
    generate_corpus(spec, b.string(), {}, 3);
    for (const auto& e : std::filesystem::directory_iterator(a)) {
        const auto other = b / e.path().filename();
        ASSERT_TRUE(std::filesystem::exists(other));
        EXPECT_EQ(slurp(e.path()), slurp(other)) << e.path().filename();
    }
    auto spec2 = spec;
    spec2.seed = 12;
    const auto c = temp_dir("c");
    generate_corpus(spec2, c.string());
    EXPECT_NE(slurp(a / "rec_00000.edf"), slurp(c / "rec_00000.edf"));
    for (const auto& d : {a, b, c}) std::filesystem::remove_all(d);
}

TEST(Synth, FilesParseAndSurvivePreprocessing) {
    const auto dir = temp_dir("pp");
    auto spec = small_spec(4);
    const auto rows = generate_corpus(spec, dir.string());
    const auto manifest = read_manifest((dir / "manifest.jsonl").string());
    ASSERT_EQ(manifest.size(), 4u);
    const auto plans = plan_corpus(spec);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto parsed = edf::read_edf((dir / manifest[i].file).string());
        EXPECT_EQ(manifest[i].meta.recording_id, rows[i].meta.recording_id);
        EXPECT_EQ(manifest[i].meta.label, rows[i].meta.label);
        EXPECT_EQ(parsed.recording.channels.size(), static_cast<std::size_t>(kNumChannels));
        PreprocessConfig pc;
        const auto r = preprocess_recording(parsed.recording, manifest[i].meta, pc);
        ASSERT_TRUE(std::holds_alternative<FrameSet>(r)) << manifest[i].meta.recording_id;
        EXPECT_GE(std::get<FrameSet>(r).frames.size(), 50u);
        const auto& h = spec.hospitals[static_cast<std::size_t>(plans[i].hospital)];
        EXPECT_DOUBLE_EQ(parsed.recording.channels[0].rate, h.rate);
    }
    std::filesystem::remove_all(dir);
}

TEST(Synth, PathologyRaisesDeltaPowerOnSelectedChannels) {
    auto spec = small_spec(2);
    spec.hospitals = {{1.0, 0.0, 100.0, 0.0}};
    spec.pathology.burst_rate = 0;
    RecordingPlan normal{{"n", Label::Normal, "F", "H0"}, 0, 300, 5};
    RecordingPlan path = normal;
    path.meta.label = Label::Pathological;
    const auto rn = render(spec, normal), rp = render(spec, path);
    const int slowed = spec.pathology.channels[0];
    auto seg = [](const edf::Channel& c) { return std::vector<double>(c.samples.begin(), c.samples.begin() + 6000); };
    const double ratio_delta = band_power(seg(rp.channels[static_cast<std::size_t>(slowed)]), 100, 1.5, 3.5) /
                               band_power(seg(rn.channels[static_cast<std::size_t>(slowed)]), 100, 1.5, 3.5);
    EXPECT_GT(ratio_delta, 1.6);
    // Outside the band and on untouched channels the spectra stay comparable.
    const double ratio_beta = band_power(seg(rp.channels[static_cast<std::size_t>(slowed)]), 100, 15, 25) /
                              band_power(seg(rn.channels[static_cast<std::size_t>(slowed)]), 100, 15, 25);
    EXPECT_NEAR(ratio_beta, 1.0, 0.35);
    const double ratio_other = band_power(seg(rp.channels[0]), 100, 1.5, 3.5) / band_power(seg(rn.channels[0]), 100, 1.5, 3.5);
    EXPECT_LT(ratio_other, 1.6);
}

TEST(Synth, NullEffectMakesClassesIdenticalInDistribution) {
    auto spec = small_spec(2);
    spec.pathology.delta_factor = 1.0;
    spec.pathology.burst_rate = 0;
    RecordingPlan a{{"a", Label::Normal, "F", "H0"}, 0, 300, 9};
    RecordingPlan b = a;
    b.meta.label = Label::Pathological;
    const auto ra = render(spec, a), rb = render(spec, b);
    for (std::size_t c = 0; c < ra.channels.size(); ++c) EXPECT_EQ(ra.channels[c].samples, rb.channels[c].samples);
}
