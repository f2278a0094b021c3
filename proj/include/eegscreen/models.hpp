#pragma once

// Frame encoder, recording-level heads and the network variants built from
// them: siNet / miNet (encoder + classifier, geometric-mean aggregation),
// MINet (encoder + attention pool + classifier) and TransNet (encoder +
// transformer blocks + attention pool + classifier).

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eegscreen/ad_ops.hpp"
#include "eegscreen/common.hpp"
#include "eegscreen/optim.hpp"

namespace eegscreen::nn {

using ad::Parameter;
using ad::Shape;
using ad::StateEntry;
using ad::Tensor;

class IncompatibleEncoder : public Error {
public:
    explicit IncompatibleEncoder(const std::string& msg) : Error("IncompatibleEncoder", msg) {}
};

inline constexpr std::size_t kEncoderParams = 1408;
inline constexpr std::size_t kClassifierParams = 289;
inline constexpr std::size_t kAttentionParams = 166176;
inline constexpr std::size_t kTransformerBlockParams = 1516640;
inline constexpr std::size_t kSiNetParams = 1697;
inline constexpr std::size_t kMINetParams = 167873;
inline constexpr std::size_t kTransNetParams = 4717793;

/// Collects trainable tensors and saved buffers under dotted names.
struct Registry {
    std::vector<Parameter> params;
    std::vector<StateEntry> state;

    Tensor add(const std::string& name, Tensor t) {
        params.push_back({name, t});
        state.push_back({name, t.shape(), &t.value()});
        return t;
    }
    void buffer(const std::string& name, ad::Buffer& v) { state.push_back({name, {static_cast<int>(v.size())}, &v}); }
};

/// Uniform Glorot initialization.
inline Tensor glorot(Shape shape, double fan_in, double fan_out, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    ad::Buffer v(ad::numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

inline Tensor constant(Shape shape, double c) {
    ad::Buffer v(ad::numel(shape), c);
    return Tensor::from(std::move(shape), std::move(v), true);
}

struct BatchNorm {
    Tensor gamma, beta;
    ad::BatchNormState state;

    explicit BatchNorm(int c = 0) : gamma(constant({c}, 1.0)), beta(constant({c}, 0.0)), state(c) {}
    void collect(Registry& r, const std::string& p) {
        r.add(p + ".weight", gamma);
        r.add(p + ".bias", beta);
        r.buffer(p + ".running_mean", state.running_mean);
        r.buffer(p + ".running_var", state.running_var);
    }
    Tensor operator()(const Tensor& x, bool training) { return ad::batch_norm(x, gamma, beta, state, training); }
};

struct LayerNorm {
    Tensor gamma, beta;
    explicit LayerNorm(int c = 0) : gamma(constant({c}, 1.0)), beta(constant({c}, 0.0)) {}
    void collect(Registry& r, const std::string& p) {
        r.add(p + ".weight", gamma);
        r.add(p + ".bias", beta);
    }
    Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }
};

struct Linear {
    Tensor w, b;
    Linear() = default;
    Linear(int in, int out, bool bias, std::mt19937_64& rng) : w(glorot({out, in}, in, out, rng)) {
        if (bias) b = constant({out}, 0.0);
    }
    void collect(Registry& r, const std::string& p) {
        r.add(p + ".weight", w);
        if (b.defined()) r.add(p + ".bias", b);
    }
    Tensor operator()(const Tensor& x) const { return ad::linear(x, w, b); }
};

// ---------------------------------------------------------------------------

struct EncoderConfig {
    int channels = kNumChannels;
    int samples = kFrameSamples;
    int f1 = 8;
    int kernel = 64;
    int depth = 2;
    int f2 = 16;
    int separable_kernel = 16;
    int pool1 = 8;
    int pool2 = 4;
    double dropout = 0.25;
    bool fused = true;

    int encoding_dim() const { return f2 * ((samples / pool1) / pool2); }
    bool is_default() const {
        const EncoderConfig d;
        return channels == d.channels && samples == d.samples && f1 == d.f1 && kernel == d.kernel && depth == d.depth && f2 == d.f2 &&
               separable_kernel == d.separable_kernel && pool1 == d.pool1 && pool2 == d.pool2;
    }
};

/// EEGNet frame encoder: [B, channels, samples] -> [B, encoding_dim].
class Encoder {
public:
    EncoderConfig cfg;
    Tensor temporal, spatial, separable_depthwise, separable_pointwise;
    BatchNorm bn1, bn2, bn3;

    Encoder(const EncoderConfig& c, std::mt19937_64& rng)
        : cfg(c),
          temporal(glorot({c.f1, c.kernel}, c.kernel, c.f1 * c.kernel, rng)),
          spatial(glorot({c.f1 * c.depth, c.channels}, c.channels, c.f1 * c.depth * c.channels, rng)),
          separable_depthwise(glorot({c.f1 * c.depth, c.separable_kernel}, c.separable_kernel, c.f1 * c.depth * c.separable_kernel, rng)),
          separable_pointwise(glorot({c.f2, c.f1 * c.depth}, c.f1 * c.depth, c.f2, rng)),
          bn1(c.f1), bn2(c.f1 * c.depth), bn3(c.f2) {
        if (c.f2 != c.f1 * c.depth) throw IncompatibleEncoder("pointwise input must equal f1 * depth");
    }

    void collect(Registry& r, const std::string& p) {
        r.add(p + ".temporal.weight", temporal);
        bn1.collect(r, p + ".bn1");
        r.add(p + ".spatial.weight", spatial);
        bn2.collect(r, p + ".bn2");
        r.add(p + ".separable.depthwise.weight", separable_depthwise);
        r.add(p + ".separable.pointwise.weight", separable_pointwise);
        bn3.collect(r, p + ".bn3");
    }

    Tensor operator()(const Tensor& x, bool training, std::mt19937_64& rng) {
        if (x.rank() != 3 || x.dim(1) != cfg.channels || x.dim(2) != cfg.samples)
            throw ad::ShapeMismatch("encoder input " + ad::shape_str(x.shape()));
        const int b = x.dim(0);
        const int pad = (cfg.kernel - 1) / 2;
        Tensor z = cfg.fused ? ad::fused_temporal_spatial(x, temporal, spatial, bn1.gamma, bn1.beta, bn1.state, training, pad)
                             : ad::depthwise_spatial(bn1(ad::temporal_conv(x, temporal, pad), training), spatial);
        z = ad::elu(bn2(z, training));
        z = ad::dropout(ad::avg_pool_time(z, cfg.pool1), cfg.dropout, training, rng);
        z = ad::pointwise(ad::depthwise_temporal(z, separable_depthwise, (cfg.separable_kernel - 1) / 2), separable_pointwise);
        z = ad::elu(bn3(z, training));
        z = ad::dropout(ad::avg_pool_time(z, cfg.pool2), cfg.dropout, training, rng);
        return ad::reshape(z, {b, cfg.encoding_dim()});
    }

    /// Copies weights and batch-norm statistics from another encoder.
    void copy_from(Encoder& other) {
        Registry mine, theirs;
        collect(mine, "e");
        other.collect(theirs, "e");
        if (mine.state.size() != theirs.state.size()) throw IncompatibleEncoder("encoder layouts differ");
        for (std::size_t i = 0; i < mine.state.size(); ++i) {
            if (mine.state[i].shape != theirs.state[i].shape) throw IncompatibleEncoder("encoder shapes differ at " + mine.state[i].name);
            *mine.state[i].data = *theirs.state[i].data;
        }
    }
};

/// Non-gated attention pooling over the frames of each recording.
class AttentionPool {
public:
    Linear key, value;
    Tensor query;

    AttentionPool(int d, std::mt19937_64& rng) : key(d, d, false, rng), value(d, d, false, rng), query(glorot({1, d}, d, 1, rng)) {}

    void collect(Registry& r, const std::string& p) {
        key.collect(r, p + ".key");
        value.collect(r, p + ".value");
        r.add(p + ".query", query);
    }

    struct Output {
        Tensor pooled;   // [G, d]
        Tensor weights;  // [N, 1]
    };

    Output operator()(const Tensor& h, std::span<const int> offsets) const {
        const auto scores = ad::linear(ad::tanh(key(h)), query);
        const auto w = ad::segment_softmax(scores, offsets);
        return {ad::segment_weighted_sum(w, value(h), offsets), w};
    }
};

/// Post-norm transformer encoder layer wrapped as x + layer(LN(x)).
class TransformerBlock {
public:
    int d, heads;
    double dropout;
    LayerNorm wrap_norm, norm1, norm2;
    Linear in_proj, out_proj, ff1, ff2;

    TransformerBlock(int d_, int heads_, int ff, double p, std::mt19937_64& rng)
        : d(d_), heads(heads_), dropout(p), wrap_norm(d_), norm1(d_), norm2(d_),
          in_proj(d_, 3 * d_, true, rng), out_proj(d_, d_, true, rng), ff1(d_, ff, true, rng), ff2(ff, d_, true, rng) {}

    void collect(Registry& r, const std::string& p) {
        wrap_norm.collect(r, p + ".wrap_norm");
        in_proj.collect(r, p + ".self_attn.in_proj");
        out_proj.collect(r, p + ".self_attn.out_proj");
        ff1.collect(r, p + ".linear1");
        ff2.collect(r, p + ".linear2");
        norm1.collect(r, p + ".norm1");
        norm2.collect(r, p + ".norm2");
    }

    Tensor operator()(const Tensor& x, std::span<const int> offsets, bool training, std::mt19937_64& rng) const {
        const auto y = wrap_norm(x);
        auto att = ad::multi_head_attention_core(in_proj(y), heads, offsets, dropout, training, rng);
        auto a = norm1(ad::add(y, ad::dropout(out_proj(att), dropout, training, rng)));
        auto f = ff2(ad::dropout(ad::relu(ff1(a)), dropout, training, rng));
        auto b = norm2(ad::add(a, ad::dropout(f, dropout, training, rng)));
        return ad::add(x, b);
    }
};

// ---------------------------------------------------------------------------

enum class Kind { SiNet, MiNet, MINet, TransNet };

inline std::string kind_name(Kind k) {
    switch (k) {
        case Kind::SiNet: return "siNet";
        case Kind::MiNet: return "miNet";
        case Kind::MINet: return "MINet";
        case Kind::TransNet: return "TransNet";
    }
    return "?";
}

inline Kind parse_kind(const std::string& s) {
    if (s == "siNet") return Kind::SiNet;
    if (s == "miNet") return Kind::MiNet;
    if (s == "MINet") return Kind::MINet;
    if (s == "TransNet") return Kind::TransNet;
    throw Error("ConfigError", "unknown model kind " + s);
}

/// True when the recording probability is the geometric mean of per-frame
/// probabilities rather than a single pooled output.
inline bool frame_level(Kind k) { return k == Kind::SiNet || k == Kind::MiNet; }

struct NetworkConfig {
    Kind kind = Kind::SiNet;
    EncoderConfig encoder;
    int transformer_blocks = 3;
    int heads = 8;
    int feedforward = 2048;
    double transformer_dropout = 0.1;
};

class Network {
public:
    NetworkConfig cfg;
    Encoder encoder;
    std::optional<AttentionPool> attention;
    std::vector<TransformerBlock> blocks;
    Linear classifier;

    Network(const NetworkConfig& c, std::mt19937_64& rng) : cfg(c), encoder(c.encoder, rng) {
        const int d = c.encoder.encoding_dim();
        if (c.kind == Kind::TransNet)
            for (int i = 0; i < c.transformer_blocks; ++i) blocks.emplace_back(d, c.heads, c.feedforward, c.transformer_dropout, rng);
        if (!frame_level(c.kind)) attention.emplace(d, rng);
        classifier = Linear(d, 1, true, rng);
        check_counts();
    }

    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    Registry registry() {
        Registry r;
        encoder.collect(r, "encoder");
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(r, "transformer." + std::to_string(i));
        if (attention) attention->collect(r, "attention");
        classifier.collect(r, "classifier");
        return r;
    }

    std::size_t parameter_count() { return ad::parameter_count(registry().params); }

    /// Logits. Frame-level kinds return one logit per frame [N, 1]; pooled
    /// kinds one per recording [G, 1]. `offsets` groups frames by recording.
    Tensor forward(const Tensor& frames, std::span<const int> offsets, bool training, std::mt19937_64& rng) {
        auto h = encoder(frames, training, rng);
        return head(h, offsets, training, rng);
    }

    /// Recording-level part applied to encodings [N, d].
    Tensor head(Tensor h, std::span<const int> offsets, bool training, std::mt19937_64& rng) {
        if (frame_level(cfg.kind)) return classifier(h);
        for (const auto& b : blocks) h = b(h, offsets, training, rng);
        return classifier(attention->operator()(h, offsets).pooled);
    }

    nlohmann::json describe() const {
        const auto& e = cfg.encoder;
        return {{"kind", kind_name(cfg.kind)},
                {"encoder",
                 {{"channels", e.channels}, {"samples", e.samples}, {"f1", e.f1}, {"kernel", e.kernel}, {"depth", e.depth}, {"f2", e.f2},
                  {"separable_kernel", e.separable_kernel}, {"pool1", e.pool1}, {"pool2", e.pool2}, {"dropout", e.dropout}}},
                {"transformer_blocks", cfg.transformer_blocks},
                {"heads", cfg.heads},
                {"feedforward", cfg.feedforward},
                {"transformer_dropout", cfg.transformer_dropout}};
    }

private:
    void check_counts() {
        if (!cfg.encoder.is_default()) return;
        auto count = [](auto& m) {
            Registry r;
            m.collect(r, "m");
            return ad::parameter_count(r.params);
        };
        auto fail = [](const std::string& what, std::size_t got, std::size_t want) {
            throw Error("ParameterCount", what + " has " + std::to_string(got) + " parameters, expected " + std::to_string(want));
        };
        if (auto n = count(encoder); n != kEncoderParams) fail("encoder", n, kEncoderParams);
        if (auto n = count(classifier); n != kClassifierParams) fail("classifier", n, kClassifierParams);
        if (attention)
            if (auto n = count(*attention); n != kAttentionParams) fail("attention", n, kAttentionParams);
        const bool std_block = cfg.heads == 8 && cfg.feedforward == 2048;
        for (auto& b : blocks)
            if (auto n = count(b); std_block && n != kTransformerBlockParams) fail("transformer block", n, kTransformerBlockParams);
        const auto total = parameter_count();
        if (cfg.kind == Kind::SiNet || cfg.kind == Kind::MiNet) {
            if (total != kSiNetParams) fail(kind_name(cfg.kind), total, kSiNetParams);
        } else if (cfg.kind == Kind::MINet) {
            if (total != kMINetParams) fail("MINet", total, kMINetParams);
        } else if (std_block && cfg.transformer_blocks == 3 && total != kTransNetParams) {
            fail("TransNet", total, kTransNetParams);
        }
    }
};

}  // namespace eegscreen::nn
