#pragma once

// Synthetic labeled EEG corpora.
//
// Background: per-channel pink noise mixed with a shared source, plus an
// alpha rhythm strongest over posterior channels. Pathological recordings
// get extra delta power on selected channels and 3 Hz spike-wave bursts on
// frontal channels. Each hospital has its own gain, noise floor, sampling
// rate and mains interference.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <functional>
#include <mutex>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "eegscreen/common.hpp"
#include "eegscreen/edf.hpp"
#include "eegscreen/preprocess.hpp"

namespace eegscreen::synth {

struct HospitalEffect {
    double gain = 1.0;
    double noise_uv = 2.0;   // white noise standard deviation
    double rate = 250.0;     // Hz
    double mains_uv = 10.0;  // 50 Hz amplitude
};

struct PathologySignature {
    double delta_lo = 1.0, delta_hi = 4.0;
    double delta_factor = 3.0;  // power multiplier inside the band
    std::vector<int> channels = {2, 6, 7, 11, 12, 16};  // F7 F8 T3 T4 T5 T6
    double burst_rate = 2.0;    // events per minute
    double burst_uv = 60.0;
};

struct CorpusSpec {
    int n_recordings = 600;
    double pathology_fraction = 0.5;
    std::vector<HospitalEffect> hospitals = {{1.0, 2.0, 250.0, 10.0}, {1.3, 4.0, 256.0, 20.0}, {0.8, 3.0, 200.0, 5.0}};
    PathologySignature pathology;
    double min_seconds = 310;
    double max_seconds = 360;
    double background_uv = 12.0;  // pink-noise standard deviation per channel
    double alpha_uv = 8.0;
    double shared_fraction = 0.35;
    std::uint64_t seed = 1;
};

inline void validate(const CorpusSpec& s) {
    if (s.n_recordings < 1) throw Error("ConfigError", "n_recordings must be positive");
    if (!(s.pathology_fraction > 0 && s.pathology_fraction < 1)) throw Error("ConfigError", "pathology_fraction must be in (0, 1)");
    if (s.hospitals.empty()) throw Error("ConfigError", "at least one hospital is needed");
    if (s.min_seconds < 300 || s.max_seconds < s.min_seconds) throw Error("ConfigError", "durations must be at least 300 s");
    for (int c : s.pathology.channels)
        if (c < 0 || c >= kNumChannels) throw Error("ConfigError", "pathology channel out of range");
}

struct RecordingPlan {
    RecordingMeta meta;
    int hospital = 0;
    double seconds = 0;
    std::uint64_t seed = 0;
};

/// Labels, sexes, hospitals and durations for every recording. Exactly
/// round(n * pathology_fraction) recordings are pathological.
inline std::vector<RecordingPlan> plan_corpus(const CorpusSpec& spec) {
    validate(spec);
    std::mt19937_64 rng(mix_seed(spec.seed, 0xC0FFEE));
    const int n = spec.n_recordings;
    const int n_path = static_cast<int>(std::lround(n * spec.pathology_fraction));
    std::vector<int> labels(static_cast<std::size_t>(n), 1);
    std::fill(labels.begin(), labels.begin() + n_path, 0);
    std::shuffle(labels.begin(), labels.end(), rng);
    std::vector<RecordingPlan> plans;
    std::uniform_real_distribution<double> dur(spec.min_seconds, spec.max_seconds);
    std::bernoulli_distribution male(0.5);
    const int nh = static_cast<int>(spec.hospitals.size());
    std::uniform_int_distribution<int> hosp(0, nh - 1);
    for (int i = 0; i < n; ++i) {
        RecordingPlan p;
        char id[32];
        std::snprintf(id, sizeof id, "rec_%05d", i);
        p.meta.recording_id = id;
        p.meta.label = static_cast<Label>(labels[static_cast<std::size_t>(i)]);
        p.meta.sex = male(rng) ? "M" : "F";
        p.hospital = hosp(rng);
        p.meta.hospital_id = "H" + std::to_string(p.hospital);
        p.seconds = std::floor(dur(rng));
        p.seed = mix_seed(spec.seed, static_cast<std::uint64_t>(i) + 1);
        plans.push_back(p);
    }
    return plans;
}

namespace detail {

// Gaussian noise shaped to amplitude spectrum gain(f) / sqrt(f), scaled to
// unit standard deviation for gain == 1.
template <class Gain>
std::vector<double> shaped_noise(std::size_t n, double rate, std::mt19937_64& rng, Gain&& gain) {
    std::size_t m = 1;
    while (m < n) m <<= 1;
    std::normal_distribution<double> g;
    std::vector<std::complex<double>> spec(m / 2 + 1);
    double norm = 0;
    for (std::size_t k = 1; k < spec.size(); ++k) {
        const double f = std::max(static_cast<double>(k) * rate / static_cast<double>(m), 0.5);
        const double a = 1.0 / std::sqrt(f);
        norm += a * a;
        spec[k] = std::complex<double>(g(rng), g(rng)) * (a * gain(f));
    }
    Eigen::FFT<double> fft;
    std::vector<double> out;
    fft.inv(out, spec, static_cast<Eigen::Index>(m));
    // inv() divides by m; rescale so the gain == 1 case has unit variance.
    const double s = static_cast<double>(m) / std::sqrt(2.0 * norm);
    out.resize(n);
    for (auto& v : out) v *= s;
    return out;
}

// One 3 Hz spike-wave cycle, t in seconds from the cycle start.
inline double spike_wave(double t) {
    const double spike = std::exp(-0.5 * std::pow((t - 0.03) / 0.012, 2));
    const double wave = t > 0.08 && t < 0.33 ? -0.45 * std::sin(M_PI * (t - 0.08) / 0.25) : 0.0;
    return spike + wave;
}

}  // namespace detail

inline constexpr std::array<double, kNumChannels> kAlphaWeight = {0.3, 0.3, 0.3, 0.35, 0.35, 0.35, 0.3, 0.3, 0.45, 0.45,
                                                                   0.45, 0.3, 0.6, 0.8, 0.85, 0.8, 0.6, 1.0, 1.0};
inline constexpr std::array<double, kNumChannels> kBurstWeight = {1.0, 1.0, 0.7, 0.9, 1.0, 0.9, 0.7, 0.3, 0.5, 0.6,
                                                                   0.5, 0.3, 0.15, 0.3, 0.35, 0.3, 0.15, 0.1, 0.1};

/// Renders one recording in microvolts.
inline edf::RawRecording render(const CorpusSpec& spec, const RecordingPlan& plan) {
    std::mt19937_64 rng(plan.seed);
    const auto& h = spec.hospitals[static_cast<std::size_t>(plan.hospital)];
    const double rate = h.rate;
    const auto n = static_cast<std::size_t>(std::llround(plan.seconds * rate));
    const bool path = plan.meta.label == Label::Pathological;
    const auto& ps = spec.pathology;
    auto flat = [](double) { return 1.0; };
    const double dgain = std::sqrt(ps.delta_factor);
    auto delta = [&](double f) {
        // Smooth 0.5 Hz ramps at the band edges.
        const double lo = std::clamp((f - ps.delta_lo + 0.25) / 0.5, 0.0, 1.0);
        const double hi = std::clamp((ps.delta_hi + 0.25 - f) / 0.5, 0.0, 1.0);
        return 1.0 + (dgain - 1.0) * std::min(lo, hi);
    };
    std::vector<bool> slowed(kNumChannels, false);
    if (path)
        for (int c : ps.channels) slowed[static_cast<std::size_t>(c)] = true;

    const auto shared = detail::shaped_noise(n, rate, rng, flat);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double alpha_f = 9.0 + 2.0 * u01(rng);
    const double ws = std::sqrt(spec.shared_fraction), wo = std::sqrt(1 - spec.shared_fraction);

    // Burst onsets: Poisson process.
    std::vector<std::pair<double, double>> bursts;  // (onset, length) seconds
    if (path && ps.burst_rate > 0) {
        std::exponential_distribution<double> gap(ps.burst_rate / 60.0);
        for (double t = gap(rng); t < plan.seconds - 3; t += gap(rng)) bursts.emplace_back(t, 1.0 + 1.5 * u01(rng));
    }
    const double mains_phase = 2 * M_PI * u01(rng);

    edf::RawRecording rec;
    rec.duration = plan.seconds;
    for (int c = 0; c < kNumChannels; ++c) {
        const auto cu = static_cast<std::size_t>(c);
        auto own = slowed[cu] ? detail::shaped_noise(n, rate, rng, delta) : detail::shaped_noise(n, rate, rng, flat);
        const double phase = 2 * M_PI * u01(rng);
        const double mod_f = 0.1 + 0.2 * u01(rng);
        edf::Channel ch;
        ch.label = "EEG " + std::string(kChannelNames[cu]) + "-REF";
        ch.rate = rate;
        ch.samples.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double t = static_cast<double>(k) / rate;
            double v = spec.background_uv * (ws * shared[k] + wo * own[k]);
            v += spec.alpha_uv * kAlphaWeight[cu] * (0.7 + 0.3 * std::sin(2 * M_PI * mod_f * t)) * std::sin(2 * M_PI * alpha_f * t + phase);
            ch.samples[k] = v;
        }
        for (const auto& [t0, len] : bursts) {
            const auto k0 = static_cast<std::size_t>(t0 * rate);
            const auto k1 = std::min(n, static_cast<std::size_t>((t0 + len) * rate));
            for (std::size_t k = k0; k < k1; ++k) {
                const double t = static_cast<double>(k) / rate - t0;
                ch.samples[k] += ps.burst_uv * kBurstWeight[cu] * detail::spike_wave(std::fmod(t, 1.0 / 3.0));
            }
        }
        for (std::size_t k = 0; k < n; ++k) {
            const double t = static_cast<double>(k) / rate;
            ch.samples[k] = h.gain * ch.samples[k] + h.noise_uv * g(rng) + h.mains_uv * std::sin(2 * M_PI * 50.0 * t + mains_phase);
        }
        rec.channels.push_back(std::move(ch));
    }
    return rec;
}

/// Writes `rec_XXXXX.edf` files and `manifest.jsonl` into `dir`. Each
/// recording has its own derived seed, so the output does not depend on
/// `threads`.
inline std::vector<ManifestRow> generate_corpus(const CorpusSpec& spec, const std::string& dir,
                                                const std::function<void(int, int)>& progress = {}, unsigned threads = 1) {
    std::filesystem::create_directories(dir);
    const auto plans = plan_corpus(spec);
    std::vector<ManifestRow> rows(plans.size());
    std::mutex m;
    int done = 0;
    parallel_for(static_cast<int>(plans.size()), [&](int i) {
        const auto& p = plans[static_cast<std::size_t>(i)];
        const auto file = p.meta.recording_id + ".edf";
        edf::WriteOptions opt;
        opt.patient_id = p.meta.recording_id + " " + p.meta.sex + " X X";
        const auto bytes = edf::write_edf(render(spec, p), opt);
        write_bytes((std::filesystem::path(dir) / file).string(), bytes);
        rows[static_cast<std::size_t>(i)] = {p.meta, -1, file};
        std::lock_guard lk(m);
        if (progress) progress(++done, static_cast<int>(plans.size()));
    }, threads);
    write_manifest((std::filesystem::path(dir) / "manifest.jsonl").string(), rows);
    return rows;
}

}  // namespace eegscreen::synth
