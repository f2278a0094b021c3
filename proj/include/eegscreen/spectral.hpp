#pragma once

// Multitaper spectral estimates on fixed-length frames: DPSS tapers,
// normalized band powers and band-wise coherence.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include "eegscreen/common.hpp"

namespace eegscreen {

class DegenerateFrame : public Error {
public:
    explicit DegenerateFrame(const std::string& msg) : Error("DegenerateFrame", msg) {}
};

struct Band {
    double lo;
    double hi;
};

using BandTable = std::array<Band, kNumBands>;

inline const BandTable& default_bands() {
    static const BandTable bands = {{{0.5, 2},  {1, 3},   {2, 4},   {3, 6},   {4, 8},   {6, 10},  {8, 13},
                                     {10, 15},  {13, 18}, {15, 21}, {18, 24}, {21, 27}, {24, 30}, {27, 40}}};
    return bands;
}

struct MultitaperConfig {
    double nw = 4.0;  // time-bandwidth product
    int n_tapers = 7;
};

/// Discrete prolate spheroidal sequences, unit L2 norm, with their
/// concentration ratios (fraction of energy inside [-W, W]).
struct Dpss {
    Eigen::MatrixXd tapers;        // n x k
    Eigen::VectorXd concentration;  // k
};

inline Dpss dpss(int n, double nw, int k) {
    if (n < 2 || k < 1 || k > n || !(nw > 0)) throw Error("InvalidArgument", "bad DPSS parameters");
    const double w = nw / n;
    // Tridiagonal matrix commuting with the time-frequency concentration operator.
    Eigen::VectorXd diag(n), sub(n - 1);
    const double c = std::cos(2.0 * std::numbers::pi * w);
    for (int i = 0; i < n; ++i) {
        const double t = (n - 1 - 2.0 * i) / 2.0;
        diag(i) = t * t * c;
    }
    for (int i = 1; i < n; ++i) sub(i - 1) = i * (n - i) / 2.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
    Dpss out;
    out.tapers.resize(n, k);
    out.concentration.resize(k);
    for (int j = 0; j < k; ++j) {
        Eigen::VectorXd v = es.eigenvectors().col(n - 1 - j);
        // Symmetric tapers start positive in sum, antisymmetric ones with a positive lobe.
        if (j % 2 == 0 ? v.sum() < 0 : v(1) < 0) v = -v;
        out.tapers.col(j) = v;
    }
    // Concentration ratio v' A v with A(i,l) = sin(2 pi w (i-l)) / (pi (i-l)).
    Eigen::VectorXd kernel(n);
    kernel(0) = 2.0 * w;
    for (int m = 1; m < n; ++m) kernel(m) = std::sin(2.0 * std::numbers::pi * w * m) / (std::numbers::pi * m);
    for (int j = 0; j < k; ++j) {
        const auto v = out.tapers.col(j);
        double acc = 0;
        for (int i = 0; i < n; ++i) {
            double row = 0;
            for (int l = 0; l < n; ++l) row += kernel(std::abs(i - l)) * v(l);
            acc += v(i) * row;
        }
        out.concentration(j) = acc;
    }
    return out;
}

/// Band power and coherence of one frame.
struct FrameSpectra {
    Eigen::Matrix<double, kNumChannels, kNumBands> band_power;  // normalized, sums to 1
    Eigen::Matrix<double, kNumPairs, kNumBands> coherence;
};

/// Reusable estimator for frames of a fixed length and rate. Cross-spectra
/// are eigenvalue-weighted taper averages, summed over the bins of each band;
/// band power is the band mean of the auto-spectrum.
class MultitaperEstimator {
public:
    explicit MultitaperEstimator(int n_samples = kFrameSamples, double rate = kTargetRate,
                                 const BandTable& bands = default_bands(), MultitaperConfig cfg = {})
        : n_(n_samples), rate_(rate), bands_(bands), tapers_(dpss(n_samples, cfg.nw, cfg.n_tapers)) {
        for (int b = 0; b < kNumBands; ++b) {
            const int k0 = static_cast<int>(std::ceil(bands_[b].lo * n_ / rate_ - 1e-9));
            const int k1 = static_cast<int>(std::floor(bands_[b].hi * n_ / rate_ + 1e-9));
            if (k0 < 0 || k1 > n_ / 2 || k1 < k0) throw Error("InvalidArgument", "band outside the frame's frequency grid");
            bins_[b] = {k0, k1};
        }
        weights_ = tapers_.concentration.cwiseSqrt();
    }

    int n_samples() const { return n_; }
    const Dpss& tapers() const { return tapers_; }

    /// Channel-major frame, `n_channels` x n_samples.
    FrameSpectra compute(std::span<const float> frame) const {
        const int k = static_cast<int>(tapers_.tapers.cols());
        const int kmax = bins_.back()[1];
        // spec[c][t] holds the tapered spectrum of channel c, taper t, bins 0..kmax.
        std::vector<std::complex<double>> spec(static_cast<std::size_t>(kNumChannels * k * (kmax + 1)));
        std::vector<double> buf(static_cast<std::size_t>(n_));
        std::vector<std::complex<double>> out;
        for (int c = 0; c < kNumChannels; ++c) {
            const float* x = frame.data() + static_cast<std::ptrdiff_t>(c) * n_;
            for (int t = 0; t < k; ++t) {
                for (int i = 0; i < n_; ++i) buf[static_cast<std::size_t>(i)] = x[i] * tapers_.tapers(i, t);
                fft_.fwd(out, buf);
                auto* dst = &spec[static_cast<std::size_t>((c * k + t) * (kmax + 1))];
                for (int f = 0; f <= kmax; ++f) dst[f] = out[static_cast<std::size_t>(f)] * weights_(t);
            }
        }
        FrameSpectra res;
        double total = 0;
        for (int b = 0; b < kNumBands; ++b) {
            const int k0 = bins_[b][0], k1 = bins_[b][1];
            const int width = k1 - k0 + 1;
            Eigen::MatrixXcd z(kNumChannels, width * k);
            for (int c = 0; c < kNumChannels; ++c)
                for (int t = 0; t < k; ++t)
                    for (int f = 0; f < width; ++f)
                        z(c, t * width + f) = spec[static_cast<std::size_t>((c * k + t) * (kmax + 1) + k0 + f)];
            Eigen::MatrixXcd s = z * z.adjoint();
            for (int c = 0; c < kNumChannels; ++c) {
                const double p = s(c, c).real();
                if (!(p > 0)) throw DegenerateFrame("zero auto-spectrum in a band");
                res.band_power(c, b) = p / width;
                total += res.band_power(c, b);
            }
            for (int x = 0; x < kNumChannels; ++x)
                for (int y = x + 1; y < kNumChannels; ++y)
                    res.coherence(pair_index(x, y), b) =
                        std::min(1.0, std::abs(s(x, y)) / std::sqrt(s(x, x).real() * s(y, y).real()));
        }
        res.band_power /= total;
        return res;
    }

private:
    int n_;
    double rate_;
    BandTable bands_;
    Dpss tapers_;
    Eigen::VectorXd weights_;
    std::array<std::array<int, 2>, kNumBands> bins_{};
    mutable Eigen::FFT<double> fft_;
};

inline const MultitaperEstimator& default_estimator() {
    static const MultitaperEstimator est;
    return est;
}

/// 19 x 14 band powers normalized to unit sum.
inline Eigen::Matrix<double, kNumChannels, kNumBands> multitaper_psd(std::span<const float> frame) {
    return default_estimator().compute(frame).band_power;
}

/// 171 x 14 band-wise coherences, pair rows ordered by pair_index.
inline Eigen::Matrix<double, kNumPairs, kNumBands> coherence(std::span<const float> frame) {
    return default_estimator().compute(frame).coherence;
}

}  // namespace eegscreen
