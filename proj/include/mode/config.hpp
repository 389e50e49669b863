#pragma once

// Run configuration: line-oriented key=value text with dotted keys.
// '#' starts a comment; blank lines are ignored; unknown keys are errors.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mode/data.hpp"
#include "mode/gate.hpp"

namespace mode::config {

enum class Preset { desk, paper };

inline Preset parse_preset(std::string_view s) {
    if (s == "desk") return Preset::desk;
    if (s == "paper") return Preset::paper;
    throw ValueError("unknown preset '" + std::string(s) + "' (expected desk or paper)");
}

struct TrainParams {
    std::size_t epochs = 1;
    std::size_t batch = 32;
    double lr = 1e-3;
};

struct RunConfig {
    std::uint64_t seed = 1;

    std::size_t identities = 40;
    std::size_t images_per_identity = 20;
    std::size_t height = 32;
    std::size_t width = 32;
    double variation = 1.0;
    double gallery_fraction = 0.5;

    std::size_t T = 50;
    double beta_start = 0.002;
    double beta_end = 0.4;

    std::size_t r = 3;
    std::size_t j = 5;

    std::size_t n_experts = 3;
    gate::GateKind gate_kind = gate::GateKind::softmax;
    std::size_t gate_k = 2;
    double logit_scale = 16.0;
    bool gate_shuffle_repaints = true;

    TrainParams denoiser{60, 32, 1e-3};
    TrainParams embedder{30, 32, 1e-3};
    TrainParams gate{200, 32, 1e-3};

    data::OcclusionKind occlusion = data::OcclusionKind::rect_mask;
    double severity = 0.5;

    std::size_t probes_per_identity = 4;
    double gate_train_fraction = 0.5;
    std::size_t verification_pairs = 400;

    std::vector<std::size_t> sweep_n_values{0, 1, 2, 3, 4, 5};
    std::vector<std::uint64_t> sweep_seeds{1, 2, 3, 4, 5};
    std::vector<data::OcclusionKind> sweep_kinds{data::OcclusionKind::rect_mask, data::OcclusionKind::random_loss,
                                                 data::OcclusionKind::lines, data::OcclusionKind::leaves};
    double sweep_severity = 0.4;
};

/// Desk preset: short horizon for quick runs. Paper preset: T=200, r=10, j=10,
/// gate lr 1e-6. Beta bounds scale with 1000 / T so x_T is close to pure noise.
inline RunConfig preset(Preset p) {
    RunConfig c;
    if (p == Preset::paper) {
        c.T = 200;
        c.beta_start = 5e-4;
        c.beta_end = 0.1;
        c.r = 10;
        c.j = 10;
        c.gate = {200, 32, 1e-6};
    }
    return c;
}

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw ValueError("config: '" + key + "' expects a number, got '" + v + "'");
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F item) {
    std::vector<T> out;
    std::stringstream ss(v);
    for (std::string cell; std::getline(ss, cell, ',');) {
        cell = trim(cell);
        if (cell.empty()) throw ValueError("config: '" + key + "' has an empty list entry");
        out.push_back(item(cell));
    }
    return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F fmt) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
    return s;
}

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field number(T RunConfig::*m, const std::string& key) {
    if constexpr (std::is_floating_point_v<T>)
        return {[m](const RunConfig& c) { return format_double(c.*m); },
                [m, key](RunConfig& c, const std::string& v) { c.*m = parse_number<T>(key, v); }};
    else
        return {[m](const RunConfig& c) { return std::to_string(c.*m); },
                [m, key](RunConfig& c, const std::string& v) { c.*m = parse_number<T>(key, v); }};
}

inline Field train_field(TrainParams RunConfig::*m, const std::string& key, int which) {
    return {[m, which](const RunConfig& c) {
                const auto& t = c.*m;
                return which == 0 ? std::to_string(t.epochs) : which == 1 ? std::to_string(t.batch) : format_double(t.lr);
            },
            [m, which, key](RunConfig& c, const std::string& v) {
                auto& t = c.*m;
                if (which == 0) t.epochs = parse_number<std::size_t>(key, v);
                else if (which == 1) t.batch = parse_number<std::size_t>(key, v);
                else t.lr = parse_number<double>(key, v);
            }};
}

inline const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> f;
        f["seed"] = number(&RunConfig::seed, "seed");
        f["data.identities"] = number(&RunConfig::identities, "data.identities");
        f["data.images_per_identity"] = number(&RunConfig::images_per_identity, "data.images_per_identity");
        f["data.height"] = number(&RunConfig::height, "data.height");
        f["data.width"] = number(&RunConfig::width, "data.width");
        f["data.variation"] = number(&RunConfig::variation, "data.variation");
        f["data.gallery_fraction"] = number(&RunConfig::gallery_fraction, "data.gallery_fraction");
        f["schedule.T"] = number(&RunConfig::T, "schedule.T");
        f["schedule.beta_start"] = number(&RunConfig::beta_start, "schedule.beta_start");
        f["schedule.beta_end"] = number(&RunConfig::beta_end, "schedule.beta_end");
        f["repaint.r"] = number(&RunConfig::r, "repaint.r");
        f["repaint.j"] = number(&RunConfig::j, "repaint.j");
        f["experts.n"] = number(&RunConfig::n_experts, "experts.n");
        f["gate.kind"] = {[](const RunConfig& c) { return gate::to_string(c.gate_kind); },
                          [](RunConfig& c, const std::string& v) { c.gate_kind = gate::parse_gate_kind(v); }};
        f["gate.k"] = number(&RunConfig::gate_k, "gate.k");
        f["gate.logit_scale"] = number(&RunConfig::logit_scale, "gate.logit_scale");
        f["train.gate.shuffle_repaints"] = {
            [](const RunConfig& c) { return std::string(c.gate_shuffle_repaints ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) {
                if (v == "true" || v == "1") c.gate_shuffle_repaints = true;
                else if (v == "false" || v == "0") c.gate_shuffle_repaints = false;
                else throw ValueError("config: 'train.gate.shuffle_repaints' expects true or false, got '" + v + "'");
            }};
        const std::pair<const char*, TrainParams RunConfig::*> trainables[] = {
            {"denoiser", &RunConfig::denoiser}, {"embedder", &RunConfig::embedder}, {"gate", &RunConfig::gate}};
        for (const auto& [name, m] : trainables) {
            const std::string p = std::string("train.") + name + ".";
            f[p + "epochs"] = train_field(m, p + "epochs", 0);
            f[p + "batch"] = train_field(m, p + "batch", 1);
            f[p + "lr"] = train_field(m, p + "lr", 2);
        }
        f["occlusion.kind"] = {[](const RunConfig& c) { return std::string(data::to_string(c.occlusion)); },
                               [](RunConfig& c, const std::string& v) { c.occlusion = data::parse_occlusion_kind(v); }};
        f["occlusion.severity"] = number(&RunConfig::severity, "occlusion.severity");
        f["eval.probes_per_identity"] = number(&RunConfig::probes_per_identity, "eval.probes_per_identity");
        f["eval.gate_train_fraction"] = number(&RunConfig::gate_train_fraction, "eval.gate_train_fraction");
        f["eval.verification_pairs"] = number(&RunConfig::verification_pairs, "eval.verification_pairs");
        f["sweep.n_values"] = {
            [](const RunConfig& c) { return join(c.sweep_n_values, [](std::size_t v) { return std::to_string(v); }); },
            [](RunConfig& c, const std::string& v) {
                c.sweep_n_values = parse_list<std::size_t>(
                    "sweep.n_values", v, [](const std::string& s) { return parse_number<std::size_t>("sweep.n_values", s); });
            }};
        f["sweep.seeds"] = {
            [](const RunConfig& c) { return join(c.sweep_seeds, [](std::uint64_t v) { return std::to_string(v); }); },
            [](RunConfig& c, const std::string& v) {
                c.sweep_seeds = parse_list<std::uint64_t>(
                    "sweep.seeds", v, [](const std::string& s) { return parse_number<std::uint64_t>("sweep.seeds", s); });
            }};
        f["sweep.kinds"] = {
            [](const RunConfig& c) {
                return join(c.sweep_kinds, [](data::OcclusionKind k) { return std::string(data::to_string(k)); });
            },
            [](RunConfig& c, const std::string& v) {
                c.sweep_kinds = parse_list<data::OcclusionKind>(
                    "sweep.kinds", v, [](const std::string& s) { return data::parse_occlusion_kind(s); });
            }};
        f["sweep.severity"] = number(&RunConfig::sweep_severity, "sweep.severity");
        return f;
    }();
    return table;
}

}  // namespace detail

inline std::vector<std::string> keys() {
    std::vector<std::string> out;
    for (const auto& [k, _] : detail::fields()) out.push_back(k);
    return out;
}

inline void set(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& f = detail::fields();
    auto it = f.find(key);
    if (it == f.end()) throw ValueError("config: unknown key '" + key + "'");
    it->second.set(c, detail::trim(value));
}

inline std::string get(const RunConfig& c, const std::string& key) {
    const auto& f = detail::fields();
    auto it = f.find(key);
    if (it == f.end()) throw ValueError("config: unknown key '" + key + "'");
    return it->second.get(c);
}

/// Applies one "key=value" assignment.
inline void assign(RunConfig& c, std::string_view line) {
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ValueError("config: expected key=value, got '" + std::string(line) + "'");
    set(c, detail::trim(line.substr(0, eq)), std::string(line.substr(eq + 1)));
}

inline void apply_text(RunConfig& c, std::string_view text, const std::string& origin = "config") {
    std::size_t lineno = 0;
    std::stringstream ss{std::string(text)};
    for (std::string line; std::getline(ss, line);) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        if (detail::trim(line).empty()) continue;
        try {
            assign(c, line);
        } catch (const ValueError& e) {
            throw ValueError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline void apply_file(RunConfig& c, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValueError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    apply_text(c, buf.str(), path);
}

/// Canonical text form: every key, sorted, one per line.
inline std::string snapshot(const RunConfig& c) {
    std::string out;
    for (const auto& [k, f] : detail::fields()) out += k + "=" + f.get(c) + "\n";
    return out;
}

/// Rejects inconsistent combinations; runs before any work touches disk.
inline void validate(const RunConfig& c) {
    auto fail = [](const std::string& m) { throw ValueError("config: " + m); };
    if (c.identities < 2) fail("data.identities must be >= 2");
    if (c.images_per_identity < 2) fail("data.images_per_identity must be >= 2");
    if (c.height < 4 || c.width < 4 || c.height % 4 || c.width % 4)
        fail("data.height and data.width must be multiples of 4 and at least 4");
    if (!(c.variation >= 0)) fail("data.variation must be >= 0");
    if (!(c.gallery_fraction > 0 && c.gallery_fraction < 1)) fail("data.gallery_fraction must lie in (0, 1)");
    if (c.T < 1) fail("schedule.T must be >= 1");
    if (!(c.beta_start > 0 && c.beta_start <= c.beta_end && c.beta_end < 1))
        fail("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    if (c.r < 1) fail("repaint.r must be >= 1");
    if (c.j < 1 || c.j > c.T || c.T % c.j != 0) fail("repaint.j must divide schedule.T");
    if (c.gate_kind == gate::GateKind::noisy_topk && (c.gate_k < 1 || c.gate_k > c.n_experts + 1))
        fail("gate.k must lie in [1, experts.n + 1]");
    if (!(c.logit_scale > 0)) fail("gate.logit_scale must be positive");
    for (const auto* t : {&c.denoiser, &c.embedder, &c.gate})
        if (t->epochs < 1 || t->batch < 1 || !(t->lr > 0)) fail("training epochs, batch and lr must be positive");
    if (!(c.severity > 0 && c.severity <= 1)) fail("occlusion.severity must lie in (0, 1]");
    if (!(c.sweep_severity > 0 && c.sweep_severity <= 1)) fail("sweep.severity must lie in (0, 1]");
    if (c.probes_per_identity < 2) fail("eval.probes_per_identity must be >= 2");
    const auto gallery = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(c.gallery_fraction * static_cast<double>(c.images_per_identity))), 1,
        c.images_per_identity - 1);
    if (c.probes_per_identity > c.images_per_identity - gallery)
        fail("eval.probes_per_identity exceeds the probe images per identity");
    if (!(c.gate_train_fraction > 0 && c.gate_train_fraction < 1)) fail("eval.gate_train_fraction must lie in (0, 1)");
    const auto train = static_cast<std::size_t>(
        std::lround(c.gate_train_fraction * static_cast<double>(c.probes_per_identity)));
    if (train < 1 || train >= c.probes_per_identity)
        fail("eval.gate_train_fraction leaves no gate-training or no evaluation probes");
    if (c.verification_pairs < 2) fail("eval.verification_pairs must be >= 2");
    if (c.sweep_n_values.empty()) fail("sweep.n_values must be nonempty");
    if (c.sweep_seeds.empty()) fail("sweep.seeds must be nonempty");
    if (c.sweep_kinds.empty()) fail("sweep.kinds must be nonempty");
}

/// Extra checks for the expert-count sweep: every n must admit gate.k.
inline void validate_sweep(const RunConfig& c) {
    validate(c);
    if (c.gate_kind == gate::GateKind::noisy_topk)
        for (auto n : c.sweep_n_values)
            if (c.gate_k > n + 1)
                throw ValueError("config: gate.k exceeds n + 1 for sweep value n = " + std::to_string(n));
}

}  // namespace mode::config
