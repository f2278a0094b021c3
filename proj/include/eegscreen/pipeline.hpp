#pragma once

// Directory-level stages: corpus -> frame archives -> feature table ->
// evaluation dataset.

#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "eegscreen/edf.hpp"
#include "eegscreen/evaluation.hpp"
#include "eegscreen/features.hpp"
#include "eegscreen/preprocess.hpp"

namespace eegscreen::pipeline {

namespace fs = std::filesystem;

using Progress = std::function<void(int done, int total)>;

struct PreprocessSummary {
    std::vector<ManifestRow> kept;
    std::vector<Excluded> excluded;
};

inline std::string frame_file(const std::string& recording_id) { return recording_id + ".frames"; }

/// Preprocesses every recording listed in `corpus_dir/manifest.jsonl`.
/// Writes one frame archive per kept recording, `manifest.jsonl` with frame
/// counts and `excluded.jsonl` into `out_dir`.
inline PreprocessSummary preprocess_corpus(const std::string& corpus_dir, const std::string& out_dir, const PreprocessConfig& cfg,
                                           unsigned threads = 1, const Progress& progress = {}) {
    const auto rows = read_manifest((fs::path(corpus_dir) / "manifest.jsonl").string());
    fs::create_directories(out_dir);
    std::vector<std::optional<ManifestRow>> kept(rows.size());
    std::vector<std::optional<Excluded>> excluded(rows.size());
    std::mutex m;
    int done = 0;
    parallel_for(static_cast<int>(rows.size()), [&](int i) {
        const auto& row = rows[static_cast<std::size_t>(i)];
        const auto parsed = edf::read_edf((fs::path(corpus_dir) / row.file).string());
        auto result = preprocess_recording(parsed.recording, row.meta, cfg);
        if (auto* set = std::get_if<FrameSet>(&result)) {
            const auto file = frame_file(row.meta.recording_id);
            write_bytes((fs::path(out_dir) / file).string(), encode_frame_archive(*set));
            kept[static_cast<std::size_t>(i)] = ManifestRow{row.meta, static_cast<int>(set->frames.size()), file};
        } else {
            excluded[static_cast<std::size_t>(i)] = std::get<Excluded>(result);
        }
        std::lock_guard lk(m);
        if (progress) progress(++done, static_cast<int>(rows.size()));
    }, threads);
    PreprocessSummary s;
    for (auto& k : kept)
        if (k) s.kept.push_back(std::move(*k));
    for (auto& e : excluded)
        if (e) s.excluded.push_back(std::move(*e));
    write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), s.kept);
    std::ofstream ex(fs::path(out_dir) / "excluded.jsonl");
    for (const auto& e : s.excluded)
        ex << nlohmann::json{{"recording_id", e.meta.recording_id}, {"label", label_value(e.meta.label)}, {"valid_frames", e.valid_frames}}.dump() << "\n";
    return s;
}

inline FrameSet load_frame_set(const std::string& path) {
    const auto bytes = edf::read_file(path);
    return decode_frame_archive(bytes);
}

/// Loads every frame archive listed in `frames_dir/manifest.jsonl`.
inline std::vector<FrameSet> load_frames(const std::string& frames_dir, unsigned threads = 1) {
    const auto rows = read_manifest((fs::path(frames_dir) / "manifest.jsonl").string());
    std::vector<FrameSet> sets(rows.size());
    parallel_for(static_cast<int>(rows.size()), [&](int i) {
        sets[static_cast<std::size_t>(i)] = load_frame_set((fs::path(frames_dir) / rows[static_cast<std::size_t>(i)].file).string());
    }, threads);
    return sets;
}

inline std::vector<RecordingFeatures> featurize(const std::vector<FrameSet>& sets, unsigned threads = 1, const Progress& progress = {}) {
    std::vector<RecordingFeatures> out(sets.size());
    std::mutex m;
    int done = 0;
    parallel_for(static_cast<int>(sets.size()), [&](int i) {
        out[static_cast<std::size_t>(i)] = compute_recording_features(sets[static_cast<std::size_t>(i)]);
        std::lock_guard lk(m);
        if (progress) progress(++done, static_cast<int>(sets.size()));
    }, threads);
    return out;
}

/// Joins frames and features by recording id. Either may be empty.
inline eval::Dataset make_dataset(std::string id, std::vector<FrameSet> frames, std::vector<RecordingFeatures> features) {
    eval::Dataset d;
    d.id = std::move(id);
    if (!frames.empty()) {
        for (const auto& f : frames) d.meta.push_back(f.meta);
        if (!features.empty()) {
            std::map<std::string, std::size_t> pos;
            for (std::size_t i = 0; i < features.size(); ++i) pos[features[i].meta.recording_id] = i;
            for (const auto& m : d.meta) {
                const auto it = pos.find(m.recording_id);
                if (it == pos.end()) throw Error("ConfigError", "no features for " + m.recording_id);
                d.features.push_back(std::move(features[it->second]));
            }
        }
        d.frames = std::move(frames);
    } else {
        for (const auto& f : features) d.meta.push_back(f.meta);
        d.features = std::move(features);
    }
    return d;
}

}  // namespace eegscreen::pipeline
