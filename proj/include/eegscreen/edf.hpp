#pragma once

// EDF (European Data Format) reading and writing.
//
// Layout: 256-byte fixed ASCII header, 256 bytes of per-signal header fields
// per signal, then n_records data records, each holding samples_per_record
// 16-bit little-endian two's-complement integers for every signal in turn.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eegscreen/common.hpp"

namespace eegscreen::edf {

class EdfError : public Error {
public:
    using Error::Error;
};

struct SignalHeader {
    std::string label;
    std::string transducer;
    std::string physical_dimension;
    double physical_min = 0.0;
    double physical_max = 0.0;
    int digital_min = 0;
    int digital_max = 0;
    std::string prefiltering;
    int samples_per_record = 0;
};

struct EdfHeader {
    std::string version;
    std::string patient_id;
    std::string recording_id;
    std::string start_date;
    std::string start_time;
    int header_bytes = 0;
    std::string reserved;
    int n_records = 0;
    double record_duration = 0.0;
    int n_signals = 0;
    std::vector<SignalHeader> signals;
};

struct Channel {
    std::string label;
    std::vector<double> samples;  // physical units (uV)
    double rate = 0.0;            // Hz
};

struct RawRecording {
    std::vector<Channel> channels;
    double duration = 0.0;  // seconds
    std::string source_path;
};

struct ParsedEdf {
    EdfHeader header;
    RawRecording recording;
};

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(' ');
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(' ');
    return std::string(s.substr(b, e - b + 1));
}

inline std::string upper(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

class FieldReader {
public:
    explicit FieldReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::string text(std::size_t width) {
        if (pos_ + width > bytes_.size()) throw EdfError("MalformedHeader", "header truncated");
        std::string out(reinterpret_cast<const char*>(bytes_.data() + pos_), width);
        for (unsigned char c : out)
            if (c < 32 || c > 126) throw EdfError("MalformedHeader", "non-ASCII byte in header");
        pos_ += width;
        return trim(out);
    }

    long integer(std::size_t width, const char* what) {
        auto s = text(width);
        long v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc() || p != s.data() + s.size())
            throw EdfError("MalformedHeader", std::string("bad integer field: ") + what + " '" + s + "'");
        return v;
    }

    double decimal(std::size_t width, const char* what) {
        auto s = text(width);
        double v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
            throw EdfError("MalformedHeader", std::string("bad decimal field: ") + what + " '" + s + "'");
        return v;
    }

    std::size_t position() const { return pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Maps an EDF signal label onto a canonical 10-20 index, or nullopt.
/// Matching ignores case, a leading "EEG " and any reference suffix after
/// '-' (so "EEG FP1-REF" -> Fp1). T7/T8/P7/P8 are accepted as T3/T4/T5/T6.
inline std::optional<int> canonical_channel(std::string_view label) {
    std::string s = detail::upper(detail::trim(label));
    if (s.rfind("EEG", 0) == 0) s = detail::trim(std::string_view(s).substr(3));
    if (auto dash = s.find('-'); dash != std::string::npos) s = detail::trim(std::string_view(s).substr(0, dash));
    if (s == "T7") s = "T3";
    else if (s == "T8") s = "T4";
    else if (s == "P7") s = "T5";
    else if (s == "P8") s = "T6";
    for (int i = 0; i < kNumChannels; ++i)
        if (detail::upper(std::string(kChannelNames[i])) == s) return i;
    return std::nullopt;
}

inline EdfHeader parse_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 256) throw EdfError("MalformedHeader", "file shorter than 256 bytes");
    detail::FieldReader r(bytes);
    EdfHeader h;
    h.version = r.text(8);
    h.patient_id = r.text(80);
    h.recording_id = r.text(80);
    h.start_date = r.text(8);
    h.start_time = r.text(8);
    h.header_bytes = static_cast<int>(r.integer(8, "header bytes"));
    h.reserved = r.text(44);
    h.n_records = static_cast<int>(r.integer(8, "number of records"));
    h.record_duration = r.decimal(8, "record duration");
    h.n_signals = static_cast<int>(r.integer(4, "number of signals"));

    if (h.n_signals < 1 || h.n_signals > 4096) throw EdfError("MalformedHeader", "signal count out of range");
    if (h.header_bytes != 256 + 256 * h.n_signals)
        throw EdfError("MalformedHeader", "header byte count does not match 256 + 256*n_signals");
    if (h.n_records < 1 && h.n_records != -1) throw EdfError("MalformedHeader", "record count out of range");
    if (!(h.record_duration > 0.0)) throw EdfError("MalformedHeader", "record duration must be positive");
    if (bytes.size() < static_cast<std::size_t>(h.header_bytes)) throw EdfError("MalformedHeader", "signal headers truncated");

    const auto ns = static_cast<std::size_t>(h.n_signals);
    h.signals.resize(ns);
    for (auto& s : h.signals) s.label = r.text(16);
    for (auto& s : h.signals) s.transducer = r.text(80);
    for (auto& s : h.signals) s.physical_dimension = r.text(8);
    for (auto& s : h.signals) s.physical_min = r.decimal(8, "physical minimum");
    for (auto& s : h.signals) s.physical_max = r.decimal(8, "physical maximum");
    for (auto& s : h.signals) s.digital_min = static_cast<int>(r.integer(8, "digital minimum"));
    for (auto& s : h.signals) s.digital_max = static_cast<int>(r.integer(8, "digital maximum"));
    for (auto& s : h.signals) s.prefiltering = r.text(80);
    for (auto& s : h.signals) s.samples_per_record = static_cast<int>(r.integer(8, "samples per record"));
    for (std::size_t i = 0; i < ns; ++i) r.text(32);

    for (const auto& s : h.signals) {
        if (s.digital_min >= s.digital_max) throw EdfError("MalformedHeader", "digital_min >= digital_max for " + s.label);
        if (s.digital_min < -32768 || s.digital_max > 32767) throw EdfError("MalformedHeader", "digital range exceeds 16 bits");
        if (s.physical_min == s.physical_max) throw EdfError("MalformedHeader", "physical_min == physical_max for " + s.label);
        if (s.samples_per_record < 1) throw EdfError("MalformedHeader", "samples per record must be positive");
    }

    std::size_t record_bytes = 0;
    for (const auto& s : h.signals) record_bytes += 2 * static_cast<std::size_t>(s.samples_per_record);
    const std::size_t data_bytes = bytes.size() - static_cast<std::size_t>(h.header_bytes);
    if (h.n_records == -1) {
        h.n_records = static_cast<int>(data_bytes / record_bytes);
        if (h.n_records < 1) throw EdfError("MalformedHeader", "no complete data record present");
    } else if (data_bytes < record_bytes * static_cast<std::size_t>(h.n_records)) {
        throw EdfError("MalformedHeader", "data section shorter than declared record count");
    }
    return h;
}

/// Parses an EDF byte image, keeping only the 19 canonical channels in
/// canonical order with calibrated physical values.
inline ParsedEdf parse_edf(std::span<const std::uint8_t> bytes, std::string source_path = {}) {
    ParsedEdf out;
    out.header = parse_header(bytes);
    const auto& h = out.header;

    std::vector<int> signal_for_channel(kNumChannels, -1);
    for (int i = 0; i < h.n_signals; ++i) {
        const auto& label = h.signals[static_cast<std::size_t>(i)].label;
        if (detail::upper(label).find("ANNOTATION") != std::string::npos) continue;
        if (auto c = canonical_channel(label); c && signal_for_channel[static_cast<std::size_t>(*c)] < 0)
            signal_for_channel[static_cast<std::size_t>(*c)] = i;
    }
    std::string missing;
    for (int c = 0; c < kNumChannels; ++c)
        if (signal_for_channel[static_cast<std::size_t>(c)] < 0) missing += std::string(missing.empty() ? "" : ",") + std::string(kChannelNames[static_cast<std::size_t>(c)]);
    if (!missing.empty()) throw EdfError("MissingChannels", "missing canonical channels: " + missing);

    const int spr0 = h.signals[static_cast<std::size_t>(signal_for_channel[0])].samples_per_record;
    for (int idx : signal_for_channel)
        if (h.signals[static_cast<std::size_t>(idx)].samples_per_record != spr0)
            throw EdfError("InconsistentRate", "canonical channels disagree on sampling rate");

    std::vector<std::size_t> offset(static_cast<std::size_t>(h.n_signals));
    std::size_t record_bytes = 0;
    for (int i = 0; i < h.n_signals; ++i) {
        offset[static_cast<std::size_t>(i)] = record_bytes;
        record_bytes += 2 * static_cast<std::size_t>(h.signals[static_cast<std::size_t>(i)].samples_per_record);
    }

    auto& rec = out.recording;
    rec.source_path = std::move(source_path);
    rec.duration = h.n_records * h.record_duration;
    rec.channels.resize(kNumChannels);
    for (int c = 0; c < kNumChannels; ++c) {
        const int si = signal_for_channel[static_cast<std::size_t>(c)];
        const auto& sh = h.signals[static_cast<std::size_t>(si)];
        auto& ch = rec.channels[static_cast<std::size_t>(c)];
        ch.label = std::string(kChannelNames[static_cast<std::size_t>(c)]);
        ch.rate = sh.samples_per_record / h.record_duration;
        const double span = static_cast<double>(sh.digital_max - sh.digital_min);
        ch.samples.resize(static_cast<std::size_t>(h.n_records) * static_cast<std::size_t>(sh.samples_per_record));
        std::size_t k = 0;
        for (int rix = 0; rix < h.n_records; ++rix) {
            const std::uint8_t* p = bytes.data() + h.header_bytes + static_cast<std::size_t>(rix) * record_bytes + offset[static_cast<std::size_t>(si)];
            for (int s = 0; s < sh.samples_per_record; ++s, p += 2) {
                const auto raw = static_cast<std::int16_t>(static_cast<std::uint16_t>(p[0] | (p[1] << 8)));
                // lerp is exact at both ends and monotone in between.
                ch.samples[k++] = std::lerp(sh.physical_min, sh.physical_max, (raw - sh.digital_min) / span);
            }
        }
    }
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ParsedEdf read_edf(const std::string& path) {
    auto bytes = read_file(path);
    return parse_edf(bytes, path);
}

// ---------------------------------------------------------------------------
// Writer (round-trip tests and synthetic corpus emission).

struct WriteOptions {
    double record_duration = 1.0;
    std::string patient_id = "X X X X";
    std::string recording_id = "Startdate X X X X";
    bool unknown_record_count = false;  // write -1 in the record-count field
};

namespace detail {

inline void put_field(std::string& out, const std::string& value, std::size_t width) {
    std::string v = value.substr(0, width);
    v.resize(width, ' ');
    out += v;
}

// Shortest "%.*g" rendering that fits the 8-character EDF field.
inline std::string format_decimal8(double x) {
    char buf[64];
    for (int prec = 8; prec >= 1; --prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, x);
        if (std::string_view(buf).size() <= 8) return buf;
    }
    throw EdfError("MalformedHeader", "value does not fit an 8-character field");
}

inline double parse_decimal(const std::string& s) {
    double v = 0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
}

}  // namespace detail

/// Serializes channels as 16-bit EDF. Each channel's rate times
/// `record_duration` must be an integer, and all channels must cover the same
/// duration. Physical range is taken from the data so that re-parsing
/// reproduces each sample within one digital quantum.
inline std::vector<std::uint8_t> write_edf(const RawRecording& rec, const WriteOptions& opt = {}) {
    using detail::put_field;
    const std::size_t ns = rec.channels.size();
    if (ns == 0) throw EdfError("MalformedHeader", "no channels to write");

    struct Prepared {
        SignalHeader header;
        std::vector<std::int16_t> digital;
    };
    std::vector<Prepared> sig(ns);
    int n_records = -1;
    for (std::size_t i = 0; i < ns; ++i) {
        const auto& ch = rec.channels[i];
        const double spr_real = ch.rate * opt.record_duration;
        const int spr = static_cast<int>(std::lround(spr_real));
        if (spr < 1 || std::abs(spr_real - spr) > 1e-9) throw EdfError("MalformedHeader", "rate * record duration must be integral");
        const int nrec = static_cast<int>(ch.samples.size() / static_cast<std::size_t>(spr));
        if (n_records < 0) n_records = nrec;
        else if (nrec != n_records) throw EdfError("MalformedHeader", "channels cover different durations");

        double lo = 0, hi = 0;
        if (!ch.samples.empty()) {
            auto [mn, mx] = std::minmax_element(ch.samples.begin(), ch.samples.end());
            lo = *mn;
            hi = *mx;
        }
        // Widen slightly so the printed (rounded) limits still contain the data.
        const double pad = std::max(1e-3, 1e-4 * (hi - lo));
        lo -= pad;
        hi += pad;
        auto& sh = sig[i].header;
        sh.label = ch.label;
        sh.physical_dimension = "uV";
        sh.physical_min = detail::parse_decimal(detail::format_decimal8(lo));
        sh.physical_max = detail::parse_decimal(detail::format_decimal8(hi));
        if (sh.physical_min > lo) sh.physical_min = detail::parse_decimal(detail::format_decimal8(lo - pad));
        if (sh.physical_max < hi) sh.physical_max = detail::parse_decimal(detail::format_decimal8(hi + pad));
        sh.digital_min = -32768;
        sh.digital_max = 32767;
        sh.samples_per_record = spr;
        const double inv = (sh.digital_max - sh.digital_min) / (sh.physical_max - sh.physical_min);
        const std::size_t n = static_cast<std::size_t>(nrec) * static_cast<std::size_t>(spr);
        sig[i].digital.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double d = std::round((ch.samples[k] - sh.physical_min) * inv + sh.digital_min);
            sig[i].digital[k] = static_cast<std::int16_t>(std::clamp(d, -32768.0, 32767.0));
        }
    }
    if (n_records < 1) throw EdfError("MalformedHeader", "recording shorter than one data record");

    std::string head;
    head.reserve(256 + 256 * ns);
    put_field(head, "0", 8);
    put_field(head, opt.patient_id, 80);
    put_field(head, opt.recording_id, 80);
    put_field(head, "01.01.00", 8);
    put_field(head, "00.00.00", 8);
    put_field(head, std::to_string(256 + 256 * ns), 8);
    put_field(head, "", 44);
    put_field(head, opt.unknown_record_count ? "-1" : std::to_string(n_records), 8);
    put_field(head, detail::format_decimal8(opt.record_duration), 8);
    put_field(head, std::to_string(ns), 4);
    for (auto& s : sig) put_field(head, s.header.label, 16);
    for (std::size_t i = 0; i < ns; ++i) put_field(head, "AgAgCl electrode", 80);
    for (auto& s : sig) put_field(head, s.header.physical_dimension, 8);
    for (auto& s : sig) put_field(head, detail::format_decimal8(s.header.physical_min), 8);
    for (auto& s : sig) put_field(head, detail::format_decimal8(s.header.physical_max), 8);
    for (auto& s : sig) put_field(head, std::to_string(s.header.digital_min), 8);
    for (auto& s : sig) put_field(head, std::to_string(s.header.digital_max), 8);
    for (std::size_t i = 0; i < ns; ++i) put_field(head, "", 80);
    for (auto& s : sig) put_field(head, std::to_string(s.header.samples_per_record), 8);
    for (std::size_t i = 0; i < ns; ++i) put_field(head, "", 32);

    std::vector<std::uint8_t> out(head.begin(), head.end());
    std::size_t total = 0;
    for (auto& s : sig) total += s.digital.size();
    out.reserve(out.size() + 2 * total);
    for (int r = 0; r < n_records; ++r) {
        for (auto& s : sig) {
            const auto spr = static_cast<std::size_t>(s.header.samples_per_record);
            for (std::size_t k = 0; k < spr; ++k) {
                const auto v = static_cast<std::uint16_t>(s.digital[static_cast<std::size_t>(r) * spr + k]);
                out.push_back(static_cast<std::uint8_t>(v & 0xFF));
                out.push_back(static_cast<std::uint8_t>(v >> 8));
            }
        }
    }
    return out;
}

}  // namespace eegscreen::edf
