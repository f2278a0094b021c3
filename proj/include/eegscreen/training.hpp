#pragma once

// Training and prediction protocols for the neural models.
//
// siNet trains on single frames that inherit their recording's label.
// miNet, MINet and TransNet train on bags of frames sampled from each
// recording, one loss per recording. All models are evaluated on every
// frame of a recording, and the epoch with the best validation AUC is kept.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "eegscreen/metrics.hpp"
#include "eegscreen/models.hpp"
#include "eegscreen/preprocess.hpp"

namespace eegscreen::nn {

struct TrainConfig {
    int epochs = 50;
    int batch_frames = 4096;           // siNet
    int frames_per_epoch = 0;          // siNet: frames drawn per recording each epoch, 0 = all
    int batch_recordings = 64;         // bag models
    int frames_per_recording = 64;     // bag models: sampled without replacement
    double lr = 1e-3;
    int eval_chunk = 256;              // frames per encoder call at prediction time
    std::uint64_t seed = 0;
    std::function<void(const std::string&)> log;  // optional progress sink
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0;
    double train_auc = 0;  // on the frames used for training that epoch
    double val_auc = 0;
    double seconds = 0;
};

struct TrainResult {
    int best_epoch = -1;
    double best_val_auc = -1;
    std::vector<EpochRecord> history;
};

using RecordingList = std::vector<const FrameSet*>;

class NoValidationFold : public Error {
public:
    explicit NoValidationFold(const std::string& m) : Error("NoValidationFold", m) {}
};

namespace detail {

// Copies the selected frames into a [n, 19, samples] tensor.
inline Tensor stack_frames(const std::vector<std::pair<const FrameSet*, int>>& picks) {
    const int s = picks.empty() ? kFrameSamples : picks.front().first->frames[static_cast<std::size_t>(picks.front().second)].n_samples;
    const std::size_t per = static_cast<std::size_t>(kNumChannels) * static_cast<std::size_t>(s);
    ad::Buffer x(picks.size() * per);
    for (std::size_t i = 0; i < picks.size(); ++i) {
        const auto& src = picks[i].first->frames[static_cast<std::size_t>(picks[i].second)].samples;
        std::copy(src.begin(), src.end(), x.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return Tensor::from({static_cast<int>(picks.size()), kNumChannels, s}, std::move(x));
}

inline std::vector<int> labels_of(const RecordingList& recs) {
    std::vector<int> y;
    for (const auto* r : recs) y.push_back(label_value(r->meta.label));
    return y;
}

inline double safe_auc(std::span<const double> p, std::span<const int> y) {
    try {
        return auc(p, y);
    } catch (const Error&) {
        return 0.5;
    }
}

// Geometric mean of per-frame sigmoid(z) for each segment.
inline std::vector<double> geo_mean_probs(std::span<const double> z, std::span<const int> offsets) {
    std::vector<double> p;
    for (std::size_t g = 0; g + 1 < offsets.size(); ++g) {
        double s = 0;
        for (int i = offsets[g]; i < offsets[g + 1]; ++i) s += ad::log_sigmoid(z[static_cast<std::size_t>(i)]);
        p.push_back(std::exp(s / (offsets[g + 1] - offsets[g])));
    }
    return p;
}

inline std::vector<ad::Buffer> snapshot(Registry& r) {
    std::vector<ad::Buffer> s;
    for (const auto& e : r.state) s.push_back(*e.data);
    return s;
}

inline void restore(Registry& r, const std::vector<ad::Buffer>& s) {
    for (std::size_t i = 0; i < s.size(); ++i) *r.state[i].data = s[i];
}

}  // namespace detail

/// Normality probability per recording, using every frame.
inline std::vector<double> predict(Network& net, const RecordingList& recs, int chunk = 256) {
    ad::NoGradGuard ng;
    std::mt19937_64 unused(0);
    std::vector<double> out;
    out.reserve(recs.size());
    const int d = net.cfg.encoder.encoding_dim();
    // Encode frames in chunks that may span recordings.
    ad::Buffer enc;
    std::vector<std::pair<const FrameSet*, int>> picks;
    auto flush = [&] {
        if (picks.empty()) return;
        const auto h = net.encoder(detail::stack_frames(picks), false, unused);
        enc.insert(enc.end(), h.value().begin(), h.value().end());
        picks.clear();
    };
    for (const auto* r : recs) {
        if (r->frames.empty()) throw Error("EmptyRecording", r->meta.recording_id + " has no frames");
        for (int f = 0; f < static_cast<int>(r->frames.size()); ++f) {
            picks.emplace_back(r, f);
            if (static_cast<int>(picks.size()) == chunk) flush();
        }
    }
    flush();
    std::size_t row = 0;
    for (const auto* r : recs) {
        const int n = static_cast<int>(r->frames.size());
        ad::Buffer h(enc.begin() + static_cast<std::ptrdiff_t>(row * static_cast<std::size_t>(d)),
                              enc.begin() + static_cast<std::ptrdiff_t>((row + static_cast<std::size_t>(n)) * static_cast<std::size_t>(d)));
        row += static_cast<std::size_t>(n);
        const std::vector<int> off{0, n};
        const auto z = net.head(Tensor::from({n, d}, std::move(h)), off, false, unused);
        if (frame_level(net.cfg.kind)) out.push_back(detail::geo_mean_probs(z.value(), off)[0]);
        else out.push_back(1.0 / (1.0 + std::exp(-z.item())));
    }
    return out;
}

namespace detail {

template <class EpochFn>
TrainResult run_epochs(Network& net, const RecordingList& val, const TrainConfig& cfg, EpochFn&& one_epoch) {
    if (val.empty()) throw NoValidationFold("training needs a validation fold");
    auto reg = net.registry();
    ad::RAdam opt(reg.params, {.lr = cfg.lr});
    const auto yv = labels_of(val);
    TrainResult res;
    std::vector<ad::Buffer> best;
    for (int e = 1; e <= cfg.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec{.epoch = e};
        one_epoch(opt, rec);
        rec.val_auc = safe_auc(predict(net, val, cfg.eval_chunk), yv);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.history.push_back(rec);
        if (cfg.log)
            cfg.log(kind_name(net.cfg.kind) + " epoch " + std::to_string(e) + " loss " + std::to_string(rec.train_loss) + " train_auc " +
                    std::to_string(rec.train_auc) + " val_auc " + std::to_string(rec.val_auc));
        if (rec.val_auc > res.best_val_auc) {
            res.best_val_auc = rec.val_auc;
            res.best_epoch = e;
            best = snapshot(reg);
        }
    }
    restore(reg, best);
    return res;
}

}  // namespace detail

/// Frame-level training: every frame carries its recording's label.
inline TrainResult train_frames(Network& net, const RecordingList& train, const RecordingList& val, const TrainConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    return detail::run_epochs(net, val, cfg, [&](ad::RAdam& opt, EpochRecord& rec) {
        std::vector<std::pair<const FrameSet*, int>> pool;
        for (const auto* r : train) {
            std::vector<int> idx(r->frames.size());
            std::iota(idx.begin(), idx.end(), 0);
            if (cfg.frames_per_epoch > 0 && static_cast<int>(idx.size()) > cfg.frames_per_epoch) {
                std::shuffle(idx.begin(), idx.end(), rng);
                idx.resize(static_cast<std::size_t>(cfg.frames_per_epoch));
            }
            for (int i : idx) pool.emplace_back(r, i);
        }
        std::shuffle(pool.begin(), pool.end(), rng);
        double loss = 0;
        std::vector<double> scores;
        std::vector<int> labels;
        for (std::size_t a = 0; a < pool.size(); a += static_cast<std::size_t>(cfg.batch_frames)) {
            const std::vector<std::pair<const FrameSet*, int>> batch(
                pool.begin() + static_cast<std::ptrdiff_t>(a), pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), a + static_cast<std::size_t>(cfg.batch_frames))));
            std::vector<double> y;
            for (const auto& [r, f] : batch) y.push_back(label_value(r->meta.label));
            const std::vector<int> off{0, static_cast<int>(batch.size())};
            opt.zero_grad();
            const auto z = net.forward(detail::stack_frames(batch), off, true, rng);
            const auto l = ad::bce_with_logits(z, y);
            ad::backward(l);
            opt.step();
            loss += l.item() * static_cast<double>(batch.size());
            scores.insert(scores.end(), z.value().begin(), z.value().end());
            for (double v : y) labels.push_back(static_cast<int>(v));
        }
        rec.train_loss = loss / static_cast<double>(std::max<std::size_t>(pool.size(), 1));
        rec.train_auc = detail::safe_auc(scores, labels);
    });
}

/// Bag training: one loss per recording over up to `frames_per_recording`
/// frames sampled without replacement each time the recording is visited.
inline TrainResult train_bags(Network& net, const RecordingList& train, const RecordingList& val, const TrainConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    return detail::run_epochs(net, val, cfg, [&](ad::RAdam& opt, EpochRecord& rec) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double loss = 0;
        std::vector<double> scores;
        std::vector<int> labels;
        for (std::size_t a = 0; a < order.size(); a += static_cast<std::size_t>(cfg.batch_recordings)) {
            const std::size_t e = std::min(order.size(), a + static_cast<std::size_t>(cfg.batch_recordings));
            std::vector<std::pair<const FrameSet*, int>> picks;
            std::vector<int> off{0};
            std::vector<double> y;
            for (std::size_t k = a; k < e; ++k) {
                const auto* r = train[order[k]];
                std::vector<int> idx(r->frames.size());
                std::iota(idx.begin(), idx.end(), 0);
                std::shuffle(idx.begin(), idx.end(), rng);
                idx.resize(std::min(idx.size(), static_cast<std::size_t>(cfg.frames_per_recording)));
                for (int i : idx) picks.emplace_back(r, i);
                off.push_back(static_cast<int>(picks.size()));
                y.push_back(label_value(r->meta.label));
            }
            opt.zero_grad();
            const auto z = net.forward(detail::stack_frames(picks), off, true, rng);
            std::vector<double> p;
            Tensor l;
            if (frame_level(net.cfg.kind)) {
                l = ad::geo_mean_bce(z, off, y);
                p = detail::geo_mean_probs(z.value(), off);
            } else {
                l = ad::bce_with_logits(z, y);
                p.assign(z.value().begin(), z.value().end());
            }
            ad::backward(l);
            opt.step();
            loss += l.item() * static_cast<double>(e - a);
            scores.insert(scores.end(), p.begin(), p.end());
            for (double v : y) labels.push_back(static_cast<int>(v));
        }
        rec.train_loss = loss / static_cast<double>(std::max<std::size_t>(train.size(), 1));
        rec.train_auc = detail::safe_auc(scores, labels);
    });
}

/// Dispatches on the network kind.
inline TrainResult train(Network& net, const RecordingList& train_set, const RecordingList& val, const TrainConfig& cfg) {
    return net.cfg.kind == Kind::SiNet ? train_frames(net, train_set, val, cfg) : train_bags(net, train_set, val, cfg);
}

}  // namespace eegscreen::nn
