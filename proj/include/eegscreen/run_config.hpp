#pragma once

// Flat key=value run configuration. Every key is typed and has a default;
// each belongs to a stage so that stage outputs can be keyed by the values
// that actually affect them.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "eegscreen/common.hpp"
#include "eegscreen/evaluation.hpp"
#include "eegscreen/preprocess.hpp"
#include "eegscreen/synth.hpp"

namespace eegscreen {

inline constexpr int kSchemaVersion = 1;

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& m) : Error("ConfigError", m) {}
};

enum class Stage { Global, Synth, Preprocess, Model };

struct RunConfig {
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::string work_dir = "work";
    std::string region = "EU-50Hz";
    synth::CorpusSpec corpus;
    PreprocessConfig preprocess;
    eval::CvConfig cv;

    RunConfig() {
        // Transformer training falls back to the bag settings.
        cv.transnet.reset();
    }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": cannot parse '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
}

inline std::string fmt(double v) {
    char buf[32];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s;
}

struct Key {
    Stage stage;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
std::string fmt_value(T v) {
    if constexpr (std::is_integral_v<T>) return std::to_string(v);
    else return fmt(v);
}

template <class T>
Key number(Stage st, const std::string& name, T lo, std::function<T&(RunConfig&)> ref, std::function<T(const RunConfig&)> get) {
    return {st,
            [ref, name, lo](RunConfig& c, const std::string& v) {
                const T x = parse_number<T>(name, v);
                if (x < lo) throw ConfigError(name + " must be at least " + fmt_value(lo));
                ref(c) = x;
            },
            [get](const RunConfig& c) { return fmt_value(get(c)); }};
}

#define EEG_NUM(stage, type, name, field, lo) \
    {name, number<type>(stage, name, lo, [](RunConfig& c) -> type& { return field; }, [](const RunConfig& c) -> type { return field; })}

inline const std::map<std::string, Key>& keys() {
    static const std::map<std::string, Key> k = {
        {"schema_version",
         {Stage::Global,
          [](RunConfig&, const std::string& v) {
              if (parse_number<int>("schema_version", v) != kSchemaVersion)
                  throw ConfigError("unsupported schema_version " + v + " (expected " + std::to_string(kSchemaVersion) + ")");
          },
          [](const RunConfig&) { return std::to_string(kSchemaVersion); }}},
        EEG_NUM(Stage::Global, std::uint64_t, "seed", c.seed, 0),
        EEG_NUM(Stage::Global, unsigned, "threads", c.threads, 1),
        {"work_dir", {Stage::Global, [](RunConfig& c, const std::string& v) { c.work_dir = v; }, [](const RunConfig& c) { return c.work_dir; }}},

        EEG_NUM(Stage::Synth, int, "synth.n_recordings", c.corpus.n_recordings, 1),
        EEG_NUM(Stage::Synth, double, "synth.pathology_fraction", c.corpus.pathology_fraction, 0.0),
        EEG_NUM(Stage::Synth, double, "synth.delta_factor", c.corpus.pathology.delta_factor, 0.0),
        EEG_NUM(Stage::Synth, double, "synth.burst_rate", c.corpus.pathology.burst_rate, 0.0),
        EEG_NUM(Stage::Synth, double, "synth.min_seconds", c.corpus.min_seconds, 300.0),
        EEG_NUM(Stage::Synth, double, "synth.max_seconds", c.corpus.max_seconds, 300.0),

        {"region",
         {Stage::Preprocess,
          [](RunConfig& c, const std::string& v) {
              if (v == "EU-50Hz") c.preprocess.mains_freq = 50;
              else if (v == "US-60Hz") c.preprocess.mains_freq = 60;
              else throw ConfigError("region must be EU-50Hz or US-60Hz, got '" + v + "'");
              c.region = v;
          },
          [](const RunConfig& c) { return c.region; }}},
        EEG_NUM(Stage::Preprocess, double, "frame_seconds", c.preprocess.frame_seconds, 1.0),
        EEG_NUM(Stage::Preprocess, double, "max_abs_uv", c.preprocess.max_abs_uv, 0.0),
        EEG_NUM(Stage::Preprocess, double, "flat_variance", c.preprocess.flat_variance, 0.0),
        EEG_NUM(Stage::Preprocess, int, "min_valid_frames", c.preprocess.min_valid_frames, 1),
        {"zero_phase",
         {Stage::Preprocess, [](RunConfig& c, const std::string& v) { c.preprocess.zero_phase = parse_bool("zero_phase", v); },
          [](const RunConfig& c) { return std::string(c.preprocess.zero_phase ? "true" : "false"); }}},

        EEG_NUM(Stage::Model, int, "folds", c.cv.k, 3),
        EEG_NUM(Stage::Model, unsigned, "parallel_steps", c.cv.parallel_steps, 1),
        {"models",
         {Stage::Model, [](RunConfig& c, const std::string& v) { c.cv.models = parse_list(v); }, [](const RunConfig& c) { return join(c.cv.models); }}},
        EEG_NUM(Stage::Model, int, "sinet.epochs", c.cv.sinet.epochs, 1),
        EEG_NUM(Stage::Model, int, "sinet.batch_frames", c.cv.sinet.batch_frames, 1),
        EEG_NUM(Stage::Model, int, "sinet.frames_per_epoch", c.cv.sinet.frames_per_epoch, 0),
        EEG_NUM(Stage::Model, double, "sinet.lr", c.cv.sinet.lr, 0.0),
        EEG_NUM(Stage::Model, int, "bags.epochs", c.cv.bags.epochs, 1),
        EEG_NUM(Stage::Model, int, "bags.batch_recordings", c.cv.bags.batch_recordings, 1),
        EEG_NUM(Stage::Model, int, "bags.frames_per_recording", c.cv.bags.frames_per_recording, 1),
        EEG_NUM(Stage::Model, double, "bags.lr", c.cv.bags.lr, 0.0),
        EEG_NUM(Stage::Model, int, "network.transformer_blocks", c.cv.network.transformer_blocks, 1),
        EEG_NUM(Stage::Model, int, "network.feedforward", c.cv.network.feedforward, 1),
        EEG_NUM(Stage::Model, int, "gbt.iterations", c.cv.gbt.iterations, 0),
        EEG_NUM(Stage::Model, double, "gbt.learning_rate", c.cv.gbt.learning_rate, 0.0),
        EEG_NUM(Stage::Model, int, "gbt.depth", c.cv.gbt.depth, 1),
        EEG_NUM(Stage::Model, double, "gbt.l2_leaf_reg", c.cv.gbt.l2_leaf_reg, 0.0),
        EEG_NUM(Stage::Model, double, "gbt.colsample_bylevel", c.cv.gbt.colsample_bylevel, 0.0),
        EEG_NUM(Stage::Model, int, "gbe.members", c.cv.gbe_members, 1),
        EEG_NUM(Stage::Model, int, "rf.n_trees", c.cv.rf.n_trees, 1),
        EEG_NUM(Stage::Model, int, "rf.min_samples_leaf", c.cv.rf.min_samples_leaf, 1),
        EEG_NUM(Stage::Model, int, "rf.max_depth", c.cv.rf.max_depth, 1),
        EEG_NUM(Stage::Model, double, "meta.c", c.cv.meta.c, 0.0),
        {"meta.components",
         {Stage::Model, [](RunConfig& c, const std::string& v) { c.cv.meta.components = parse_list(v); },
          [](const RunConfig& c) { return join(c.cv.meta.components); }}},
    };
    return k;
}

#undef EEG_NUM

}  // namespace detail

inline void set_key(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& k = detail::keys();
    const auto it = k.find(key);
    if (it == k.end()) throw ConfigError("unknown key " + key);
    it->second.set(c, value);
}

/// Parses `key = value` lines; `#` starts a comment. The document must
/// declare schema_version.
inline RunConfig parse_run_config(std::istream& in, RunConfig c = {}) {
    std::string line;
    int lineno = 0;
    bool versioned = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const auto key = detail::trim(line.substr(0, eq));
        set_key(c, key, detail::trim(line.substr(eq + 1)));
        versioned |= key == "schema_version";
    }
    if (!versioned) throw ConfigError("config does not declare schema_version");
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    return parse_run_config(in);
}

/// Applies `key=value` overrides.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
        set_key(c, detail::trim(o.substr(0, eq)), detail::trim(o.substr(eq + 1)));
    }
}

/// Cross-key invariants.
inline void validate(const RunConfig& c) {
    synth::validate(c.corpus);
    if (c.cv.meta.components.empty()) throw ConfigError("meta.components is empty");
}

/// Normalized `key=value` lines for the given stages, sorted by key.
inline std::string canonical(const RunConfig& c, std::initializer_list<Stage> stages) {
    std::string out;
    for (const auto& [name, key] : detail::keys()) {
        if (std::find(stages.begin(), stages.end(), key.stage) == stages.end()) continue;
        if (name == "threads" || name == "work_dir" || name == "parallel_steps") continue;  // do not change results
        out += name + "=" + key.get(c) + "\n";
    }
    return out;
}

}  // namespace eegscreen
