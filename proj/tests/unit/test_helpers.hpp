#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eegscreen/common.hpp"
#include "eegscreen/edf.hpp"
#include "eegscreen/preprocess.hpp"
#include "oracles.hpp"

namespace testutil {

using oracle::dft_amplitude;
using oracle::sine;

/// Recording with the 19 canonical channels, each a distinct sinusoid mix.
inline eegscreen::edf::RawRecording canonical_recording(double rate, double seconds, unsigned seed = 1) {
    eegscreen::edf::RawRecording rec;
    std::mt19937 rng(seed);
    std::normal_distribution<double> noise(0.0, 5.0);
    const auto n = static_cast<std::size_t>(rate * seconds);
    for (int c = 0; c < eegscreen::kNumChannels; ++c) {
        eegscreen::edf::Channel ch;
        ch.label = std::string(eegscreen::kChannelNames[static_cast<std::size_t>(c)]);
        ch.rate = rate;
        ch.samples = sine(3.0 + c, rate, n, 20.0);
        for (auto& v : ch.samples) v += noise(rng);
        rec.channels.push_back(std::move(ch));
    }
    rec.duration = seconds;
    return rec;
}

/// Random frames; pathological recordings carry an extra 2 Hz rhythm of
/// amplitude `effect` on every channel.
inline eegscreen::FrameSet synthetic_frames(const std::string& id, eegscreen::Label label, int n_frames, std::uint64_t seed,
                                            double effect = 2.0, std::string sex = "F", std::string hospital = "H0") {
    eegscreen::FrameSet fs;
    fs.meta = {id, label, std::move(sex), std::move(hospital)};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0, 2 * std::numbers::pi);
    for (int f = 0; f < n_frames; ++f) {
        eegscreen::Frame fr;
        fr.index = f;
        fr.samples.resize(static_cast<std::size_t>(eegscreen::kNumChannels * eegscreen::kFrameSamples));
        const double ph = u(rng);
        for (int c = 0; c < eegscreen::kNumChannels; ++c)
            for (int t = 0; t < eegscreen::kFrameSamples; ++t) {
                double v = g(rng);
                if (label == eegscreen::Label::Pathological) v += effect * std::sin(2 * std::numbers::pi * 2.0 * t / 100.0 + ph);
                fr.samples[static_cast<std::size_t>(c * eegscreen::kFrameSamples + t)] = static_cast<float>(v);
            }
        fs.frames.push_back(std::move(fr));
    }
    return fs;
}

}  // namespace testutil
