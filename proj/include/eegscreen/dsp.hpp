#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "eegscreen/common.hpp"

namespace eegscreen::dsp {

class FilterError : public Error {
public:
    using Error::Error;
};

/// One second-order section, a0 normalized to 1.
struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

    std::complex<double> response(double omega) const {
        const std::complex<double> z1 = std::polar(1.0, -omega);
        const std::complex<double> z2 = z1 * z1;
        return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
    }
};

/// Cascade of biquads applied in order (direct form II transposed).
struct SosFilter {
    std::vector<Biquad> sections;
    double rate = 0.0;

    std::complex<double> response_at(double freq_hz) const {
        const double omega = 2.0 * std::numbers::pi * freq_hz / rate;
        std::complex<double> h = 1.0;
        for (const auto& s : sections) h *= s.response(omega);
        return h;
    }

    double gain_db(double freq_hz) const { return 20.0 * std::log10(std::abs(response_at(freq_hz))); }

    int order() const {
        int n = 0;
        for (const auto& s : sections) n += (s.a2 != 0.0 || s.b2 != 0.0) ? 2 : 1;
        return n;
    }

    /// Filters in place. Section states start at the steady state for a
    /// constant input equal to x[0], so a constant signal passes unchanged.
    void apply_inplace(std::span<double> x) const {
        if (x.empty()) return;
        double u = x[0];
        for (const auto& s : sections) {
            const double dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
            const double y = dc * u;
            double z2 = s.b2 * u - s.a2 * y;
            double z1 = s.b1 * u - s.a1 * y + z2;
            for (double& v : x) {
                const double in = v;
                const double out = s.b0 * in + z1;
                z1 = s.b1 * in - s.a1 * out + z2;
                z2 = s.b2 * in - s.a2 * out;
                v = out;
            }
            u = y;
        }
    }

    std::vector<double> apply(std::span<const double> x) const {
        std::vector<double> y(x.begin(), x.end());
        apply_inplace(y);
        return y;
    }

    /// Forward then backward pass (zero phase, squared magnitude).
    void apply_zero_phase_inplace(std::span<double> x) const {
        apply_inplace(x);
        std::reverse(x.begin(), x.end());
        apply_inplace(x);
        std::reverse(x.begin(), x.end());
    }
};

/// Second-order IIR notch with unit gain at DC and Nyquist. Same design as
/// scipy.signal.iirnotch: bandwidth = freq / q.
inline SosFilter design_notch(double freq, double q, double rate) {
    if (!(q > 0)) throw FilterError("SpecInfeasible", "notch quality factor must be positive");
    if (!(freq > 0) || freq >= rate / 2) throw FilterError("FreqAboveNyquist", "notch frequency must lie below Nyquist");
    const double w0 = 2.0 * std::numbers::pi * freq / rate;
    const double bw = w0 / q;
    const double gain = 1.0 / (1.0 + std::tan(bw / 2.0));
    Biquad s;
    s.b0 = gain;
    s.b1 = -2.0 * gain * std::cos(w0);
    s.b2 = gain;
    s.a1 = -2.0 * gain * std::cos(w0);
    s.a2 = 2.0 * gain - 1.0;
    return {{s}, rate};
}

inline std::vector<double> notch(std::span<const double> x, double freq, double q, double rate) {
    return design_notch(freq, q, rate).apply(x);
}

enum class FilterKind { Notch, Highpass, Lowpass };

/// Filter request. For Butterworth kinds `order` is the smallest order tried;
/// the designer raises it until the amplitude mask holds.
struct FilterSpec {
    FilterKind kind = FilterKind::Lowpass;
    double notch_freq = 50.0;
    double notch_q = 5.0;
    double cutoff = 40.0;
    int order = 1;
    // Mask: passband deviation below `passband_ripple_db` from `passband_edge`
    // (towards the passband), stopband attenuation of at least
    // `stopband_atten_db` beyond `stopband_edge` (lowpass only; <= 0 disables).
    double passband_edge = 0.0;
    double passband_ripple_db = 1.0;
    double stopband_edge = 0.0;
    double stopband_atten_db = 0.0;
};

/// Highpass used by the pipeline: 0.1 Hz cutoff, < 1 dB deviation above 0.5 Hz.
inline FilterSpec default_highpass() {
    FilterSpec s;
    s.kind = FilterKind::Highpass;
    s.cutoff = 0.1;
    s.order = 2;
    s.passband_edge = 0.5;
    return s;
}

/// Lowpass used by the pipeline: 40 Hz cutoff, >= 20 dB above 50 Hz, < 1 dB
/// deviation up to 30 Hz.
inline FilterSpec default_lowpass() {
    FilterSpec s;
    s.kind = FilterKind::Lowpass;
    s.cutoff = 40.0;
    s.order = 6;
    s.passband_edge = 30.0;
    s.stopband_edge = 50.0;
    s.stopband_atten_db = 20.0;
    return s;
}

namespace detail {

// Digital Butterworth via bilinear transform with prewarping; conjugate
// pole pairs become biquads, an odd order adds one first-order section.
inline SosFilter butterworth_sos(FilterKind kind, double cutoff, int order, double rate) {
    using cd = std::complex<double>;
    const double fs2 = 2.0 * rate;
    const double wc = fs2 * std::tan(std::numbers::pi * cutoff / rate);
    const bool high = kind == FilterKind::Highpass;
    SosFilter f;
    f.rate = rate;
    auto bilinear = [&](cd s) { return (fs2 + s) / (fs2 - s); };
    for (int k = 0; k < order / 2; ++k) {
        const double theta = std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order);
        cd p = std::polar(1.0, theta);  // unit-cutoff analog prototype pole
        p = high ? wc / p : wc * p;
        const cd z = bilinear(p);
        Biquad s;
        s.a1 = -2.0 * z.real();
        s.a2 = std::norm(z);
        const double zero = high ? 1.0 : -1.0;  // double zero at z = +-1
        s.b0 = 1.0;
        s.b1 = -2.0 * zero;
        s.b2 = 1.0;
        // Normalize to unit gain at DC (lowpass) or Nyquist (highpass).
        const double omega = high ? std::numbers::pi : 0.0;
        const double g = std::abs(s.response(omega));
        s.b0 /= g;
        s.b1 /= g;
        s.b2 /= g;
        f.sections.push_back(s);
    }
    if (order % 2 == 1) {
        const double p = high ? -wc : -wc;  // real pole at -wc in both cases
        const double z = (fs2 + p) / (fs2 - p);
        Biquad s;
        s.a1 = -z;
        s.a2 = 0.0;
        s.b0 = 1.0;
        s.b1 = high ? -1.0 : 1.0;
        s.b2 = 0.0;
        const double omega = high ? std::numbers::pi : 0.0;
        const double g = std::abs(s.response(omega));
        s.b0 /= g;
        s.b1 /= g;
        f.sections.push_back(s);
    }
    return f;
}

}  // namespace detail

/// Checks the amplitude mask of `spec` on a dense frequency grid.
inline bool satisfies_mask(const SosFilter& f, const FilterSpec& spec) {
    const double nyq = f.rate / 2.0;
    constexpr int kGrid = 2000;
    if (spec.passband_edge > 0) {
        const double lo = spec.kind == FilterKind::Highpass ? spec.passband_edge : 0.0;
        const double hi = spec.kind == FilterKind::Highpass ? nyq : spec.passband_edge;
        for (int i = 0; i <= kGrid; ++i) {
            const double fr = lo + (hi - lo) * i / kGrid;
            if (std::abs(f.gain_db(std::min(fr, nyq * (1 - 1e-12)))) >= spec.passband_ripple_db) return false;
        }
    }
    if (spec.kind == FilterKind::Lowpass && spec.stopband_atten_db > 0 && spec.stopband_edge < nyq) {
        for (int i = 0; i <= kGrid; ++i) {
            const double fr = spec.stopband_edge + (nyq - spec.stopband_edge) * i / kGrid;
            if (-f.gain_db(fr) < spec.stopband_atten_db) return false;
        }
    }
    return true;
}

/// Butterworth design of the minimum order >= spec.order that meets the mask.
inline SosFilter design_butterworth(const FilterSpec& spec, double rate) {
    if (spec.kind == FilterKind::Notch) return design_notch(spec.notch_freq, spec.notch_q, rate);
    if (spec.order < 1 || !(spec.cutoff > 0)) throw FilterError("SpecInfeasible", "order must be >= 1 and cutoff > 0");
    if (spec.cutoff >= rate / 2) throw FilterError("SpecInfeasible", "cutoff at or above Nyquist");
    constexpr int kMaxOrder = 32;
    for (int n = spec.order; n <= kMaxOrder; ++n) {
        auto f = detail::butterworth_sos(spec.kind, spec.cutoff, n, rate);
        if (satisfies_mask(f, spec)) return f;
    }
    throw FilterError("SpecInfeasible", "no Butterworth order up to 32 meets the mask at this rate");
}

inline std::vector<double> butterworth(std::span<const double> x, const FilterSpec& spec, double rate) {
    return design_butterworth(spec, rate).apply(x);
}

// ---------------------------------------------------------------------------
// Polyphase rational resampling with a Kaiser-windowed sinc kernel.

namespace detail {

inline double bessel_i0(double x) {
    double sum = 1.0, term = 1.0;
    const double q = x * x / 4.0;
    for (int k = 1; k < 200; ++k) {
        term *= q / (static_cast<double>(k) * k);
        sum += term;
        if (term < sum * 1e-17) break;
    }
    return sum;
}

}  // namespace detail

/// Low-pass kernel at the upsampled rate; matches the scipy resample_poly
/// defaults (half length 10 * max(up, down), Kaiser beta 5).
inline std::vector<double> resample_kernel(int up, int down) {
    const int max_rate = std::max(up, down);
    const double cutoff = 1.0 / max_rate;  // relative to upsampled Nyquist
    const int half = 10 * max_rate;
    const int n = 2 * half + 1;
    constexpr double kBeta = 5.0;
    std::vector<double> h(static_cast<std::size_t>(n));
    const double i0b = detail::bessel_i0(kBeta);
    for (int i = 0; i < n; ++i) {
        const double t = i - half;
        const double x = cutoff * t;
        const double sinc = t == 0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
        const double r = 2.0 * i / (n - 1) - 1.0;
        const double w = detail::bessel_i0(kBeta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0b;
        h[static_cast<std::size_t>(i)] = cutoff * sinc * w;
    }
    return h;
}

/// Resamples to `to_rate`; output length is floor(n * to_rate / from_rate).
/// Rates must be integral ratios expressible as up/down with up, down <= 1000.
inline std::vector<double> resample(std::span<const double> x, double from_rate, double to_rate = kTargetRate) {
    if (!(from_rate > 0) || !(to_rate > 0)) throw FilterError("UnsupportedRate", "sampling rates must be positive");
    if (from_rate == to_rate) return {x.begin(), x.end()};
    // Rational approximation from the rates (EDF rates are integral or simple decimals).
    const auto num = static_cast<long>(std::llround(to_rate * 1000));
    const auto den = static_cast<long>(std::llround(from_rate * 1000));
    const long g = std::gcd(num, den);
    const long up = num / g, down = den / g;
    if (up > 100000 || down > 100000) throw FilterError("UnsupportedRate", "rate ratio too complex");
    const auto h = resample_kernel(static_cast<int>(up), static_cast<int>(down));
    const long half = static_cast<long>(h.size() / 2);
    const auto n_in = static_cast<long>(x.size());
    const long n_out = n_in * up / down;
    std::vector<double> y(static_cast<std::size_t>(n_out));
    for (long m = 0; m < n_out; ++m) {
        // y[m] = up * sum_n x[n] h[m*down - n*up + half]
        const long center = m * down + half;
        long n_lo = (center - static_cast<long>(h.size()) + 1 + up - 1) / up;
        if (center - static_cast<long>(h.size()) + 1 < 0) n_lo = 0;
        n_lo = std::max(0L, n_lo);
        const long n_hi = std::min(n_in - 1, center / up);
        double acc = 0;
        for (long n = n_lo; n <= n_hi; ++n) acc += x[static_cast<std::size_t>(n)] * h[static_cast<std::size_t>(center - n * up)];
        y[static_cast<std::size_t>(m)] = acc * static_cast<double>(up);
    }
    return y;
}

}  // namespace eegscreen::dsp
