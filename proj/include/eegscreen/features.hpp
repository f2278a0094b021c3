#pragma once

// Per-recording handcrafted features: 190 tangent-space covariance values,
// 266 normalized band powers and 2,394 band coherences, in that order.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eegscreen/preprocess.hpp"
#include "eegscreen/riemann.hpp"
#include "eegscreen/spectral.hpp"

namespace eegscreen {

inline constexpr int kBandPowerOffset = kTangentDim;
inline constexpr int kCoherenceOffset = kTangentDim + kBandPowerDim;

/// Frame-level quantities aggregated over one recording. The tangent part
/// needs a reference point and is produced by `assemble_features`.
struct RecordingFeatures {
    RecordingMeta meta;
    std::vector<double> band_power;  // 266, index ch * 14 + band
    std::vector<double> coherence;   // 2394, index pair * 14 + band
    SpdMatrix mean_covariance;       // Karcher mean of frame covariances
    bool mean_converged = true;
};

/// Full feature vector of one recording (length kFeatureDim).
struct FeatureVector {
    std::vector<double> values;

    std::span<const double> time_riemann() const { return {values.data(), kTangentDim}; }
    std::span<const double> band_power() const { return {values.data() + kBandPowerOffset, kBandPowerDim}; }
    std::span<const double> coherence() const { return {values.data() + kCoherenceOffset, kCoherenceDim}; }
};

/// Median of the values; the mean of the middle two for an even count.
inline double median(std::vector<double> v) {
    if (v.empty()) throw Error("InvalidArgument", "median of empty set");
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

/// Per-frame spectra and covariances, then medians and the Karcher mean.
/// Frames whose spectra degenerate are skipped; if all do, the error
/// propagates.
inline RecordingFeatures compute_recording_features(const FrameSet& set,
                                                    const MultitaperEstimator& est = default_estimator()) {
    if (set.frames.empty()) throw Error("InvalidArgument", "no frames to featurize");
    RecordingFeatures rf;
    rf.meta = set.meta;
    std::vector<std::vector<double>> bp(kBandPowerDim), coh(kCoherenceDim);
    std::vector<SpdMatrix> covs;
    std::optional<DegenerateFrame> last_error;
    for (const auto& fr : set.frames) {
        FrameSpectra s;
        try {
            s = est.compute(fr.samples);
        } catch (const DegenerateFrame& e) {
            last_error = e;
            continue;
        }
        for (int c = 0; c < kNumChannels; ++c)
            for (int b = 0; b < kNumBands; ++b) bp[static_cast<std::size_t>(c * kNumBands + b)].push_back(s.band_power(c, b));
        for (int p = 0; p < kNumPairs; ++p)
            for (int b = 0; b < kNumBands; ++b) coh[static_cast<std::size_t>(p * kNumBands + b)].push_back(s.coherence(p, b));
        covs.push_back(frame_covariance(fr.samples));
    }
    if (covs.empty()) throw *last_error;
    rf.band_power.reserve(kBandPowerDim);
    rf.coherence.reserve(kCoherenceDim);
    for (auto& v : bp) rf.band_power.push_back(median(std::move(v)));
    for (auto& v : coh) rf.coherence.push_back(median(std::move(v)));
    auto km = riemannian_mean(covs);
    rf.mean_covariance = std::move(km.mean);
    rf.mean_converged = km.converged;
    return rf;
}

/// Concatenates tangent features (at `reference`, or at the identity when
/// none is given), band powers and coherences.
inline FeatureVector assemble_features(const RecordingFeatures& rf, const std::optional<SpdMatrix>& reference) {
    FeatureVector fv;
    fv.values.reserve(kFeatureDim);
    const SpdMatrix ref = reference ? *reference : SpdMatrix::Identity(kNumChannels, kNumChannels);
    const auto t = tangent_project(ref, rf.mean_covariance);
    fv.values.insert(fv.values.end(), t.begin(), t.end());
    fv.values.insert(fv.values.end(), rf.band_power.begin(), rf.band_power.end());
    fv.values.insert(fv.values.end(), rf.coherence.begin(), rf.coherence.end());
    return fv;
}

inline FeatureVector extract_recording_features(const FrameSet& set, const std::optional<SpdMatrix>& reference = std::nullopt) {
    return assemble_features(compute_recording_features(set), reference);
}

/// Karcher mean of the recording means of the selected rows.
inline SpdMatrix reference_mean(std::span<const RecordingFeatures> rows, std::span<const int> selected) {
    std::vector<SpdMatrix> m;
    m.reserve(selected.size());
    for (int i : selected) m.push_back(rows[static_cast<std::size_t>(i)].mean_covariance);
    return riemannian_mean(m).mean;
}

/// Restriction to the 2,660 band power and coherence values.
inline std::vector<double> rf_subset(std::span<const double> full) {
    return {full.begin() + kBandPowerOffset, full.end()};
}

// ---------------------------------------------------------------------------
// Feature table on disk: tab-separated, one header line, one row per recording.
// Columns: recording_id, label, sex, hospital_id, then band powers and
// coherences named as in `feature_column_names`, then the upper triangle of
// the recording's mean covariance (cov_<i>_<j>). Tangent features are not
// stored; they depend on the reference chosen at training time.

inline std::string band_name(int b) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g-%g", default_bands()[b].lo, default_bands()[b].hi);
    return buf;
}

/// Names of the kFeatureDim columns of a FeatureVector.
inline std::vector<std::string> feature_column_names() {
    std::vector<std::string> n;
    n.reserve(kFeatureDim);
    for (int i = 0; i < kNumChannels; ++i)
        for (int j = i; j < kNumChannels; ++j)
            n.push_back("tan_" + std::string(kChannelNames[i]) + "_" + std::string(kChannelNames[j]));
    for (int c = 0; c < kNumChannels; ++c)
        for (int b = 0; b < kNumBands; ++b) n.push_back("pow_" + std::string(kChannelNames[c]) + "_" + band_name(b));
    for (int x = 0; x < kNumChannels; ++x)
        for (int y = x + 1; y < kNumChannels; ++y)
            for (int b = 0; b < kNumBands; ++b)
                n.push_back("coh_" + std::string(kChannelNames[x]) + "_" + std::string(kChannelNames[y]) + "_" + band_name(b));
    return n;
}

namespace detail {

inline void put_double(std::string& out, double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, p);
}

inline double parse_double(std::string_view s) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw Error("MalformedFeatureFile", "bad number '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> f;
    std::size_t start = 0;
    while (true) {
        auto tab = line.find('\t', start);
        f.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) break;
        start = tab + 1;
    }
    return f;
}

}  // namespace detail

inline void write_feature_table(const std::string& path, std::span<const RecordingFeatures> rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("IoError", "cannot write " + path);
    std::string line = "recording_id\tlabel\tsex\thospital_id";
    const auto names = feature_column_names();
    for (std::size_t i = kTangentDim; i < names.size(); ++i) line += "\t" + names[i];
    for (int i = 0; i < kNumChannels; ++i)
        for (int j = i; j < kNumChannels; ++j) line += "\tcov_" + std::to_string(i) + "_" + std::to_string(j);
    f << line << '\n';
    for (const auto& r : rows) {
        line = r.meta.recording_id + "\t" + std::to_string(label_value(r.meta.label)) + "\t" + r.meta.sex + "\t" + r.meta.hospital_id;
        for (double v : r.band_power) line += '\t', detail::put_double(line, v);
        for (double v : r.coherence) line += '\t', detail::put_double(line, v);
        for (double v : upper_triangle(r.mean_covariance)) line += '\t', detail::put_double(line, v);
        f << line << '\n';
    }
    if (!f) throw Error("IoError", "write failed for " + path);
}

inline std::vector<RecordingFeatures> read_feature_table(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("IoError", "cannot read " + path);
    std::string line;
    if (!std::getline(f, line)) throw Error("MalformedFeatureFile", "missing header in " + path);
    constexpr std::size_t kCols = 4 + kRfFeatureDim + kTangentDim;
    if (detail::split_tabs(line).size() != kCols) throw Error("MalformedFeatureFile", "unexpected column count in " + path);
    std::vector<RecordingFeatures> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto fields = detail::split_tabs(line);
        if (fields.size() != kCols) throw Error("MalformedFeatureFile", "row with wrong column count in " + path);
        RecordingFeatures r;
        r.meta.recording_id = std::string(fields[0]);
        const double lab = detail::parse_double(fields[1]);
        if (lab != 0 && lab != 1) throw Error("MalformedFeatureFile", "label must be 0 or 1");
        r.meta.label = lab == 1 ? Label::Normal : Label::Pathological;
        r.meta.sex = std::string(fields[2]);
        r.meta.hospital_id = std::string(fields[3]);
        std::size_t k = 4;
        for (int i = 0; i < kBandPowerDim; ++i) r.band_power.push_back(detail::parse_double(fields[k++]));
        for (int i = 0; i < kCoherenceDim; ++i) r.coherence.push_back(detail::parse_double(fields[k++]));
        std::vector<double> tri;
        for (int i = 0; i < kTangentDim; ++i) tri.push_back(detail::parse_double(fields[k++]));
        r.mean_covariance = from_upper_triangle(tri, kNumChannels);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace eegscreen
