#pragma once

// Named parameters, the RAdam optimizer and binary checkpoints.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eegscreen/autodiff.hpp"

namespace eegscreen::ad {

class NonFiniteGradient : public Error {
public:
    explicit NonFiniteGradient(const std::string& msg) : Error("NonFiniteGradient", msg) {}
};

struct Parameter {
    std::string name;
    Tensor tensor;
};

/// A named array saved in checkpoints: trainable tensors plus buffers such
/// as batch-norm running statistics.
struct StateEntry {
    std::string name;
    Shape shape;
    Buffer* data;
};

inline std::size_t parameter_count(const std::vector<Parameter>& ps) {
    std::size_t n = 0;
    for (const auto& p : ps) n += p.tensor.size();
    return n;
}

struct RAdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Rectified Adam. The adaptive step is taken once the length of the
/// approximated simple moving average exceeds 4; before that the update is
/// the bias-corrected momentum alone.
class RAdam {
public:
    RAdam(std::vector<Parameter> params, RAdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.size(), 0.0);
            v_.emplace_back(p.tensor.size(), 0.0);
        }
    }

    double rho_inf() const { return 2.0 / (1.0 - cfg_.beta2) - 1.0; }

    double rho(long t) const {
        const double b2t = std::pow(cfg_.beta2, static_cast<double>(t));
        return rho_inf() - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
    }

    /// True when step t uses the variance-rectified adaptive update.
    bool adaptive(long t) const { return rho(t) > 4.0; }

    long step_count() const { return t_; }
    RAdamConfig& config() { return cfg_; }
    const std::vector<Parameter>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    /// Applies one update from the accumulated gradients. Parameters with
    /// no gradient are treated as having a zero gradient.
    void step() {
        for (const auto& p : params_) {
            const auto& g = p.tensor.node().grad;
            for (double x : g)
                if (!std::isfinite(x)) throw NonFiniteGradient("non-finite gradient in " + p.name);
        }
        ++t_;
        const double t = static_cast<double>(t_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
        const double r = rho(t_);
        const bool adapt = r > 4.0;
        const double ri = rho_inf();
        const double rect = adapt ? std::sqrt((r - 4) * (r - 2) * ri / ((ri - 4) * (ri - 2) * r)) : 0.0;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& w = params_[i].tensor.value();
            const auto& g = params_[i].tensor.node().grad;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g.empty() ? 0.0 : g[j];
                m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                if (adapt) w[j] -= cfg_.lr * rect * mhat / (std::sqrt(v[j] / bc2) + cfg_.eps);
                else w[j] -= cfg_.lr * mhat;
            }
        }
    }

private:
    std::vector<Parameter> params_;
    RAdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "EEGCKPT1", u64 descriptor length, JSON descriptor, then the
// arrays in descriptor order as little-endian doubles.

inline constexpr char kCheckpointMagic[8] = {'E', 'E', 'G', 'C', 'K', 'P', 'T', '1'};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw Error("MalformedCheckpoint", "truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const nlohmann::json& architecture, const std::vector<StateEntry>& entries) {
    nlohmann::json desc;
    desc["architecture"] = architecture;
    desc["arrays"] = nlohmann::json::array();
    for (const auto& e : entries) {
        if (e.data->size() != numel(e.shape)) throw ShapeMismatch("checkpoint entry " + e.name + " has wrong size");
        desc["arrays"].push_back({{"name", e.name}, {"shape", e.shape}});
    }
    const std::string text = desc.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("IoError", "cannot write " + path);
    os.write(kCheckpointMagic, 8);
    detail::put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : entries)
        for (double v : *e.data) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw Error("IoError", "write failed for " + path);
}

/// Reads the architecture descriptor without loading arrays.
inline nlohmann::json read_checkpoint_descriptor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("IoError", "cannot open " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("MalformedCheckpoint", path + " is not a checkpoint");
    const auto len = detail::get_u64(is);
    if (len > (1u << 26)) throw Error("MalformedCheckpoint", "descriptor too large");
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw Error("MalformedCheckpoint", "truncated descriptor");
    return nlohmann::json::parse(text);
}

/// Loads arrays into `entries`; names and shapes must match exactly.
inline nlohmann::json load_checkpoint(const std::string& path, const std::vector<StateEntry>& entries) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("IoError", "cannot open " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("MalformedCheckpoint", path + " is not a checkpoint");
    const auto len = detail::get_u64(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw Error("MalformedCheckpoint", "truncated descriptor");
    const auto desc = nlohmann::json::parse(text);
    const auto& arrays = desc.at("arrays");
    if (arrays.size() != entries.size()) throw Error("MalformedCheckpoint", "array count differs from model");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (arrays[i].at("name").get<std::string>() != e.name || arrays[i].at("shape").get<Shape>() != e.shape)
            throw Error("MalformedCheckpoint", "array " + std::to_string(i) + " does not match " + e.name);
    }
    for (const auto& e : entries)
        for (auto& v : *e.data) v = std::bit_cast<double>(detail::get_u64(is));
    return desc.at("architecture");
}

}  // namespace eegscreen::ad
