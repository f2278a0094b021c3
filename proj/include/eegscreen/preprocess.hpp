#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "eegscreen/common.hpp"
#include "eegscreen/dsp.hpp"
#include "eegscreen/edf.hpp"

namespace eegscreen {

struct RecordingMeta {
    std::string recording_id;
    Label label = Label::Normal;
    std::string sex = "U";  // "F", "M" or "U"
    std::string hospital_id;
};

/// One 19-channel frame at 100 Hz, stored channel-major (channel * n + t).
struct Frame {
    std::vector<float> samples;
    int n_samples = kFrameSamples;
    bool valid = true;
    int index = 0;  // ordinal within the recording

    float at(int channel, int t) const { return samples[static_cast<std::size_t>(channel * n_samples + t)]; }
};

struct FrameSet {
    std::vector<Frame> frames;
    RecordingMeta meta;

    Label label() const { return meta.label; }
};

struct Excluded {
    RecordingMeta meta;
    int valid_frames = 0;
};

using SliceResult = std::variant<FrameSet, Excluded>;

struct PreprocessConfig {
    double mains_freq = 50.0;  // 60 for US recordings
    double notch_q = 5.0;
    dsp::FilterSpec highpass = dsp::default_highpass();
    dsp::FilterSpec lowpass = dsp::default_lowpass();
    bool zero_phase = false;
    double frame_seconds = 6.0;
    double max_abs_uv = 800.0;
    double flat_variance = 1e-12;
    int min_valid_frames = 50;
    bool reject_after_reference = true;

    int frame_samples() const { return static_cast<int>(std::lround(frame_seconds * kTargetRate)); }
};

/// Multichannel signal, channel-major, all channels share `rate`.
struct Signal {
    std::vector<std::vector<double>> channels;
    double rate = 0.0;

    std::size_t n_samples() const { return channels.empty() ? 0 : channels.front().size(); }
};

/// Subtracts the instantaneous cross-channel mean from every channel.
inline void common_average_reference(std::vector<std::vector<double>>& channels) {
    if (channels.empty()) return;
    const std::size_t n = channels.front().size();
    const double inv = 1.0 / static_cast<double>(channels.size());
    for (std::size_t t = 0; t < n; ++t) {
        double mean = 0;
        for (const auto& c : channels) mean += c[t];
        mean *= inv;
        for (auto& c : channels) c[t] -= mean;
    }
}

/// Validity predicate for one frame: no flat channel and no |v| above the limit.
inline bool frame_is_valid(std::span<const float> samples, int n_samples, const PreprocessConfig& cfg) {
    const int n_ch = static_cast<int>(samples.size()) / n_samples;
    for (int c = 0; c < n_ch; ++c) {
        const auto ch = samples.subspan(static_cast<std::size_t>(c * n_samples), static_cast<std::size_t>(n_samples));
        double mean = 0;
        for (float v : ch) {
            if (std::abs(v) > cfg.max_abs_uv) return false;
            mean += v;
        }
        mean /= n_samples;
        double var = 0;
        for (float v : ch) var += (v - mean) * (v - mean);
        var /= n_samples;
        if (var < cfg.flat_variance) return false;
    }
    return true;
}

/// notch -> highpass -> lowpass -> resample to 100 Hz (no re-referencing).
inline Signal filter_and_resample(const edf::RawRecording& raw, const PreprocessConfig& cfg) {
    Signal out;
    out.rate = kTargetRate;
    if (raw.channels.empty()) return out;
    const double rate = raw.channels.front().rate;
    const auto notch = dsp::design_notch(cfg.mains_freq, cfg.notch_q, rate);
    const auto hp = dsp::design_butterworth(cfg.highpass, rate);
    const auto lp = dsp::design_butterworth(cfg.lowpass, rate);
    out.channels.reserve(raw.channels.size());
    for (const auto& ch : raw.channels) {
        if (ch.rate != rate) throw edf::EdfError("InconsistentRate", "channels disagree on sampling rate");
        std::vector<double> y = ch.samples;
        for (const auto* f : {&notch, &hp, &lp}) {
            if (cfg.zero_phase) f->apply_zero_phase_inplace(y);
            else f->apply_inplace(y);
        }
        out.channels.push_back(dsp::resample(y, rate, kTargetRate));
    }
    return out;
}

/// Non-overlapping frames of `frame_samples`; the trailing remainder is dropped.
inline std::vector<Frame> cut_frames(const Signal& sig, int frame_samples) {
    const int n_ch = static_cast<int>(sig.channels.size());
    const int n_frames = static_cast<int>(sig.n_samples() / static_cast<std::size_t>(frame_samples));
    std::vector<Frame> frames(static_cast<std::size_t>(n_frames));
    for (int f = 0; f < n_frames; ++f) {
        auto& fr = frames[static_cast<std::size_t>(f)];
        fr.n_samples = frame_samples;
        fr.index = f;
        fr.samples.resize(static_cast<std::size_t>(n_ch * frame_samples));
        for (int c = 0; c < n_ch; ++c) {
            const auto& src = sig.channels[static_cast<std::size_t>(c)];
            for (int t = 0; t < frame_samples; ++t)
                fr.samples[static_cast<std::size_t>(c * frame_samples + t)] = static_cast<float>(src[static_cast<std::size_t>(f * frame_samples + t)]);
        }
    }
    return frames;
}

/// Cuts frames, drops invalid ones and excludes recordings that keep fewer
/// than `min_valid_frames`.
inline SliceResult slice_and_reject(const Signal& sig, const RecordingMeta& meta, const PreprocessConfig& cfg) {
    const int fs = cfg.frame_samples();
    FrameSet set;
    set.meta = meta;
    for (auto& fr : cut_frames(sig, fs)) {
        fr.valid = frame_is_valid(fr.samples, fs, cfg);
        if (fr.valid) set.frames.push_back(std::move(fr));
    }
    if (static_cast<int>(set.frames.size()) < cfg.min_valid_frames)
        return Excluded{meta, static_cast<int>(set.frames.size())};
    return set;
}

/// Full pipeline for one recording: filter, resample, re-reference, slice, reject.
/// With `reject_after_reference == false` the validity test runs on the
/// signal before re-referencing; the emitted frames are still re-referenced.
inline SliceResult preprocess_recording(const edf::RawRecording& raw, const RecordingMeta& meta, const PreprocessConfig& cfg) {
    Signal sig = filter_and_resample(raw, cfg);
    if (cfg.reject_after_reference) {
        common_average_reference(sig.channels);
        return slice_and_reject(sig, meta, cfg);
    }
    const int fs = cfg.frame_samples();
    std::vector<bool> ok;
    for (const auto& fr : cut_frames(sig, fs)) ok.push_back(frame_is_valid(fr.samples, fs, cfg));
    common_average_reference(sig.channels);
    FrameSet set;
    set.meta = meta;
    for (auto& fr : cut_frames(sig, fs)) {
        fr.valid = ok[static_cast<std::size_t>(fr.index)] && frame_is_valid(fr.samples, fs, cfg);
        if (fr.valid) set.frames.push_back(std::move(fr));
    }
    if (static_cast<int>(set.frames.size()) < cfg.min_valid_frames)
        return Excluded{meta, static_cast<int>(set.frames.size())};
    return set;
}

// ---------------------------------------------------------------------------
// Frame archive: little-endian binary, see docs/formats.md.
//
//   "EEGFRAME"            8 bytes magic
//   u32 version = 1
//   u32 len, bytes        recording_id
//   i32 label             1 normal, 0 pathological
//   u32 len, bytes        sex
//   u32 len, bytes        hospital_id
//   u32 n_channels, u32 n_samples, u32 n_frames
//   u32 index[n_frames]
//   f32 data[n_frames][n_channels][n_samples]

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_str(std::vector<std::uint8_t>& b, const std::string& s) {
    put_u32(b, static_cast<std::uint32_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
}

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    void expect(std::string_view magic) {
        need(magic.size());
        if (std::memcmp(b_.data() + pos_, magic.data(), magic.size()) != 0) throw Error("MalformedArchive", "bad magic");
        pos_ += magic.size();
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw Error("MalformedArchive", "archive truncated");
    }
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_frame_archive(const FrameSet& set) {
    std::vector<std::uint8_t> b;
    const std::string magic = "EEGFRAME";
    b.insert(b.end(), magic.begin(), magic.end());
    detail::put_u32(b, 1);
    detail::put_str(b, set.meta.recording_id);
    detail::put_u32(b, static_cast<std::uint32_t>(label_value(set.meta.label)));
    detail::put_str(b, set.meta.sex);
    detail::put_str(b, set.meta.hospital_id);
    const int n_samples = set.frames.empty() ? kFrameSamples : set.frames.front().n_samples;
    detail::put_u32(b, kNumChannels);
    detail::put_u32(b, static_cast<std::uint32_t>(n_samples));
    detail::put_u32(b, static_cast<std::uint32_t>(set.frames.size()));
    for (const auto& f : set.frames) detail::put_u32(b, static_cast<std::uint32_t>(f.index));
    for (const auto& f : set.frames)
        for (float v : f.samples) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_u32(b, bits);
        }
    return b;
}

inline FrameSet decode_frame_archive(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    r.expect("EEGFRAME");
    if (r.u32() != 1) throw Error("MalformedArchive", "unsupported archive version");
    FrameSet set;
    set.meta.recording_id = r.str();
    set.meta.label = r.u32() == 1 ? Label::Normal : Label::Pathological;
    set.meta.sex = r.str();
    set.meta.hospital_id = r.str();
    const auto n_ch = r.u32();
    const auto n_samples = r.u32();
    const auto n_frames = r.u32();
    if (n_ch != kNumChannels) throw Error("MalformedArchive", "archive must hold 19 channels");
    set.frames.resize(n_frames);
    for (auto& f : set.frames) {
        f.index = static_cast<int>(r.u32());
        f.n_samples = static_cast<int>(n_samples);
    }
    for (auto& f : set.frames) {
        f.samples.resize(static_cast<std::size_t>(n_ch) * n_samples);
        for (auto& v : f.samples) v = r.f32();
    }
    return set;
}

inline void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("IoError", "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// JSON-lines manifest.

struct ManifestRow {
    RecordingMeta meta;
    int n_frames = -1;   // -1 when not yet preprocessed
    std::string file;    // relative path of the EDF or frame archive
};

inline nlohmann::json to_json(const ManifestRow& r) {
    nlohmann::json j{{"recording_id", r.meta.recording_id},
                     {"label", label_value(r.meta.label)},
                     {"sex", r.meta.sex},
                     {"hospital_id", r.meta.hospital_id}};
    if (r.n_frames >= 0) j["n_frames"] = r.n_frames;
    if (!r.file.empty()) j["file"] = r.file;
    return j;
}

inline ManifestRow manifest_row_from_json(const nlohmann::json& j) {
    ManifestRow r;
    r.meta.recording_id = j.at("recording_id").get<std::string>();
    const int label = j.at("label").get<int>();
    if (label != 0 && label != 1) throw Error("ConfigError", "manifest label must be 0 or 1");
    r.meta.label = static_cast<Label>(label);
    r.meta.sex = j.value("sex", std::string("U"));
    r.meta.hospital_id = j.value("hospital_id", std::string());
    r.n_frames = j.value("n_frames", -1);
    r.file = j.value("file", std::string());
    return r;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ofstream out(path);
    if (!out) throw Error("IoError", "cannot write " + path);
    for (const auto& r : rows) out << to_json(r).dump() << '\n';
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("IoError", "cannot open " + path);
    std::vector<ManifestRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        rows.push_back(manifest_row_from_json(nlohmann::json::parse(line)));
    }
    return rows;
}

}  // namespace eegscreen
