#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace eegscreen {

/// Base of every exception thrown by the library. `kind()` is a stable,
/// machine-readable identifier (e.g. "MalformedHeader") used by the CLI
/// when it reports failures.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

inline constexpr int kNumChannels = 19;
inline constexpr int kNumPairs = kNumChannels * (kNumChannels - 1) / 2;  // 171
inline constexpr int kNumBands = 14;
inline constexpr int kTangentDim = kNumChannels * (kNumChannels + 1) / 2;  // 190
inline constexpr int kBandPowerDim = kNumChannels * kNumBands;           // 266
inline constexpr int kCoherenceDim = kNumPairs * kNumBands;              // 2394
inline constexpr int kFeatureDim = kTangentDim + kBandPowerDim + kCoherenceDim;
inline constexpr int kRfFeatureDim = kBandPowerDim + kCoherenceDim;      // 2660
inline constexpr double kTargetRate = 100.0;
inline constexpr int kFrameSamples = 600;

/// Canonical 10-20 channel order used everywhere downstream of EDF parsing.
inline constexpr std::array<std::string_view, kNumChannels> kChannelNames = {
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
    "C4",  "T4",  "T5", "P3", "Pz", "P4", "T6", "O1", "O2"};

/// Normality label convention: 1 = normal, 0 = pathological.
enum class Label : int { Pathological = 0, Normal = 1 };

inline int label_value(Label l) { return static_cast<int>(l); }

/// splitmix64 step; used to derive independent seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Runs fn(0..n-1) on up to `threads` workers (0 = hardware concurrency).
/// Each index is handled exactly once; the first exception is rethrown.
inline void parallel_for(int n, const std::function<void(int)>& fn, unsigned threads = 0) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max(n, 1)));
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex m;
    auto work = [&] {
        for (int i; (i = next++) < n;) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lk(m);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// Index of the unordered channel pair (x, y), x < y, in the fixed order
/// (0,1), (0,2), ..., (0,18), (1,2), ... used by the coherence features.
inline int pair_index(int x, int y) {
    return x * (2 * kNumChannels - x - 1) / 2 + (y - x - 1);
}

}  // namespace eegscreen
