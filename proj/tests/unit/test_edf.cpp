#include <gtest/gtest.h>

#include <cstring>

#include "eegscreen/edf.hpp"
#include "test_helpers.hpp"

using namespace eegscreen;
using namespace eegscreen::edf;

namespace {

// Writes a 3-field ASCII number into a raw header at a fixed offset.
void poke(std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& text, std::size_t width) {
    std::string v = text;
    v.resize(width, ' ');
    std::memcpy(bytes.data() + offset, v.data(), width);
}

}  // namespace

TEST(Edf, CalibrationEndpointMapsToPhysicalMax) {
    auto rec = testutil::canonical_recording(200, 5);
    auto bytes = write_edf(rec);
    auto parsed = parse_edf(bytes);
    // Overwrite the first sample of Fp1 with digital_max.
    const auto& h = parsed.header;
    const std::size_t data = static_cast<std::size_t>(h.header_bytes);
    bytes[data] = 0xFF;
    bytes[data + 1] = 0x7F;
    auto again = parse_edf(bytes);
    EXPECT_EQ(again.recording.channels[0].samples[0], again.header.signals[0].physical_max);
    bytes[data] = 0x00;
    bytes[data + 1] = 0x80;
    again = parse_edf(bytes);
    EXPECT_EQ(again.recording.channels[0].samples[0], again.header.signals[0].physical_min);
}

TEST(Edf, UnknownRecordCountResolvedFromFileSize) {
    auto rec = testutil::canonical_recording(200, 30);
    WriteOptions opt;
    opt.unknown_record_count = true;
    auto bytes = write_edf(rec, opt);
    auto parsed = parse_edf(bytes);
    const std::size_t record_bytes = 19 * 200 * 2;
    EXPECT_EQ(parsed.header.n_records, static_cast<int>((bytes.size() - parsed.header.header_bytes) / record_bytes));
    EXPECT_EQ(parsed.header.n_records, 30);
    EXPECT_DOUBLE_EQ(parsed.recording.duration, 30.0);
}

TEST(Edf, ExtraChannelsDroppedAndCanonicalOrderRestored) {
    auto rec = testutil::canonical_recording(250, 4);
    // Reverse order, add reference suffixes and two non-EEG channels.
    std::reverse(rec.channels.begin(), rec.channels.end());
    for (auto& ch : rec.channels) ch.label = "EEG " + ch.label + "-REF";
    rec.channels.push_back({"ECG", std::vector<double>(1000, 1.0), 250});
    rec.channels.push_back({"Photic", std::vector<double>(1000, 2.0), 250});
    auto parsed = parse_edf(write_edf(rec));
    ASSERT_EQ(parsed.recording.channels.size(), 19u);
    for (int c = 0; c < 19; ++c) EXPECT_EQ(parsed.recording.channels[static_cast<std::size_t>(c)].label, kChannelNames[static_cast<std::size_t>(c)]);
    EXPECT_EQ(parsed.header.n_signals, 21);
}

TEST(Edf, ModernAliasesAccepted) {
    auto rec = testutil::canonical_recording(200, 2);
    for (auto& ch : rec.channels) {
        if (ch.label == "T3") ch.label = "T7";
        if (ch.label == "T4") ch.label = "T8";
        if (ch.label == "T5") ch.label = "P7";
        if (ch.label == "T6") ch.label = "P8";
        if (ch.label == "Fp1") ch.label = "fp1";
    }
    auto parsed = parse_edf(write_edf(rec));
    EXPECT_EQ(parsed.recording.channels[7].label, "T3");
    EXPECT_EQ(parsed.recording.channels[16].label, "T6");
}

TEST(Edf, AnnotationChannelSkipped) {
    auto rec = testutil::canonical_recording(200, 2);
    rec.channels.push_back({"EDF Annotations", std::vector<double>(400, 0.0), 200});
    EXPECT_EQ(parse_edf(write_edf(rec)).recording.channels.size(), 19u);
}

TEST(Edf, RoundTripWithinOneQuantum) {
    auto rec = testutil::canonical_recording(256, 3, 7);
    auto parsed = parse_edf(write_edf(rec));
    for (int c = 0; c < 19; ++c) {
        const auto& sh = parsed.header.signals[static_cast<std::size_t>(c)];
        const double quantum = (sh.physical_max - sh.physical_min) / (sh.digital_max - sh.digital_min);
        const auto& a = rec.channels[static_cast<std::size_t>(c)].samples;
        const auto& b = parsed.recording.channels[static_cast<std::size_t>(c)].samples;
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) ASSERT_LE(std::abs(a[i] - b[i]), quantum);
        EXPECT_DOUBLE_EQ(parsed.recording.channels[static_cast<std::size_t>(c)].rate, 256.0);
    }
}

TEST(Edf, CalibrationIsAffineAndMonotone) {
    auto rec = testutil::canonical_recording(200, 1);
    auto bytes = write_edf(rec);
    auto parsed = parse_edf(bytes);
    const auto& sh = parsed.header.signals[3];
    const std::size_t off = static_cast<std::size_t>(parsed.header.header_bytes) + 3 * 200 * 2;
    double prev = -1e300;
    for (int d : {-32768, -1000, 0, 1, 5000, 32767}) {
        auto u = static_cast<std::uint16_t>(static_cast<std::int16_t>(d));
        bytes[off] = static_cast<std::uint8_t>(u & 0xFF);
        bytes[off + 1] = static_cast<std::uint8_t>(u >> 8);
        const double v = parse_edf(bytes).recording.channels[3].samples[0];
        const double expect = (d - sh.digital_min) * (sh.physical_max - sh.physical_min) / (sh.digital_max - sh.digital_min) + sh.physical_min;
        EXPECT_NEAR(v, expect, 1e-9);
        EXPECT_GT(v, prev);
        prev = v;
    }
}

TEST(Edf, MissingChannelsReported) {
    auto rec = testutil::canonical_recording(200, 2);
    rec.channels.erase(rec.channels.begin() + 4);
    try {
        parse_edf(write_edf(rec));
        FAIL();
    } catch (const EdfError& e) {
        EXPECT_EQ(e.kind(), "MissingChannels");
    }
}

TEST(Edf, InconsistentRateReported) {
    auto rec = testutil::canonical_recording(200, 2);
    rec.channels[5].rate = 250;
    rec.channels[5].samples.resize(500);
    try {
        parse_edf(write_edf(rec));
        FAIL();
    } catch (const EdfError& e) {
        EXPECT_EQ(e.kind(), "InconsistentRate");
    }
}

TEST(Edf, MalformedHeaders) {
    auto rec = testutil::canonical_recording(200, 2);
    const auto good = write_edf(rec);
    auto expect_malformed = [](const std::vector<std::uint8_t>& b) {
        try {
            parse_edf(b);
            ADD_FAILURE() << "accepted malformed header";
        } catch (const EdfError& e) {
            EXPECT_EQ(e.kind(), "MalformedHeader");
        }
    };
    expect_malformed(std::vector<std::uint8_t>(good.begin(), good.begin() + 100));
    auto b = good;
    b[10] = 0xC3;  // non-ASCII in patient field
    expect_malformed(b);
    b = good;
    poke(b, 184, "999", 8);  // header byte count
    expect_malformed(b);
    b = good;
    poke(b, 236, "-5", 8);  // record count
    expect_malformed(b);
    b = good;
    poke(b, 236, "abc", 8);
    expect_malformed(b);
    b = good;
    // digital_min of signal 0 := digital_max
    poke(b, 256 + 19 * (16 + 80 + 8 + 8 + 8), "32767", 8);
    expect_malformed(b);
    b = good;
    b.resize(b.size() - 10);  // truncated data
    expect_malformed(b);
}

TEST(Edf, ParsingIsDeterministic) {
    auto bytes = write_edf(testutil::canonical_recording(200, 3, 11));
    auto a = parse_edf(bytes), b = parse_edf(bytes);
    for (int c = 0; c < 19; ++c) EXPECT_EQ(a.recording.channels[static_cast<std::size_t>(c)].samples, b.recording.channels[static_cast<std::size_t>(c)].samples);
}
