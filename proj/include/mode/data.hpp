#pragma once

// Procedural identity corpus, occlusion masks and the "MODE" image container.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "mode/checkpoint.hpp"
#include "mode/repaint.hpp"
#include "mode/rng.hpp"

namespace mode::data {

using repaint::OcclusionMask;
using mode::to_string;

struct Dataset {
    std::size_t height = 0, width = 0, channels = 1;
    std::vector<std::uint32_t> labels;
    std::vector<Tensor<float>> images;  // each [C, H, W], values in [-1, 1]

    std::size_t size() const noexcept { return images.size(); }
    Shape image_shape() const { return {channels, height, width}; }

    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset out{height, width, channels, {}, {}};
        for (auto i : indices) {
            out.labels.push_back(labels.at(i));
            out.images.push_back(images.at(i));
        }
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// Container: magic "MODE", version u16, count u32, H/W/C u16, then per image
// {label u32, pixels f32 row-major}. All little-endian.

inline constexpr std::uint16_t kContainerVersion = 1;

inline void validate(const Dataset& ds, const std::string& what) {
    if (ds.labels.size() != ds.images.size()) throw FormatError(what + ": label/image count mismatch");
    if (ds.height == 0 || ds.width == 0 || ds.channels == 0) throw FormatError(what + ": degenerate dimensions");
    if (ds.height > 0xFFFF || ds.width > 0xFFFF || ds.channels > 0xFFFF)
        throw FormatError(what + ": dimensions exceed 16 bits");
    for (const auto& im : ds.images) {
        if (im.shape() != ds.image_shape()) throw FormatError(what + ": image shape mismatch");
        for (float v : im)
            if (!(v >= -1.0f && v <= 1.0f)) throw FormatError(what + ": pixel outside [-1, 1]");
    }
}

inline void write_container(std::ostream& os, const Dataset& ds) {
    validate(ds, "container");
    os.write("MODE", 4);
    io::put_u16(os, kContainerVersion);
    io::put_u32(os, static_cast<std::uint32_t>(ds.size()));
    io::put_u16(os, static_cast<std::uint16_t>(ds.height));
    io::put_u16(os, static_cast<std::uint16_t>(ds.width));
    io::put_u16(os, static_cast<std::uint16_t>(ds.channels));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        io::put_u32(os, ds.labels[i]);
        for (float v : ds.images[i]) io::put_f32(os, v);
    }
    if (!os) throw FormatError("container: write failed");
}

inline Dataset read_container(std::istream& is) {
    io::expect_magic(is, "MODE", "container");
    const auto version = io::get_u16(is);
    if (version != kContainerVersion) throw FormatError("container: unsupported version " + std::to_string(version));
    const std::uint32_t count = io::get_u32(is);
    Dataset ds;
    ds.height = io::get_u16(is);
    ds.width = io::get_u16(is);
    ds.channels = io::get_u16(is);
    const std::size_t per = ds.height * ds.width * ds.channels;
    for (std::uint32_t i = 0; i < count; ++i) {
        ds.labels.push_back(io::get_u32(is));
        std::vector<float> px(per);
        for (auto& v : px) v = io::get_f32(is);
        ds.images.emplace_back(ds.image_shape(), std::move(px));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("container: trailing bytes after payload");
    validate(ds, "container");
    return ds;
}

inline void save_container(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    write_container(os, ds);
}

inline Dataset load_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    try {
        return read_container(is);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

/// Masks travel as C = 1 containers holding 0/1 pixels.
inline Dataset masks_to_container(const std::vector<OcclusionMask>& masks, const std::vector<std::uint32_t>& labels) {
    if (masks.empty()) throw ValueError("masks_to_container: no masks");
    Dataset ds{masks[0].height(), masks[0].width(), 1, labels, {}};
    for (const auto& m : masks) {
        std::vector<float> px(m.values().begin(), m.values().end());
        ds.images.emplace_back(ds.image_shape(), std::move(px));
    }
    return ds;
}

inline std::vector<OcclusionMask> masks_from_container(const Dataset& ds) {
    if (ds.channels != 1) throw FormatError("mask container must have C = 1");
    std::vector<OcclusionMask> out;
    for (const auto& im : ds.images) {
        std::vector<std::uint8_t> v;
        for (float p : im) {
            if (p != 0.0f && p != 1.0f) throw FormatError("mask container holds a non-binary value");
            v.push_back(p == 1.0f ? 1 : 0);
        }
        out.emplace_back(ds.height, ds.width, std::move(v));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Identities

struct CosineComponent {
    double fx, fy, phase, amplitude;  // frequencies in cycles per image
};

struct Blob {
    double cx, cy, radius, amplitude;  // centre in [0,1)^2, radius in image units
};

struct IdentitySpec {
    std::uint32_t label = 0;
    std::vector<CosineComponent> components;
    std::vector<Blob> blobs;
    double variation = 1.0;
};

struct GeneratorConfig {
    std::size_t identities = 40;
    std::size_t images_per_identity = 20;
    std::size_t height = 32;
    std::size_t width = 32;
    double variation = 1.0;
    std::uint64_t seed = 0;
};

/// Noise-free intensity of an identity at continuous image coordinates.
inline double signature_value(const IdentitySpec& id, double u, double v) {
    double s = 0;
    for (const auto& c : id.components)
        s += c.amplitude * std::cos(2.0 * std::numbers::pi * (c.fx * u + c.fy * v) + c.phase);
    for (const auto& b : id.blobs) {
        const double dx = u - b.cx, dy = v - b.cy;
        s += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius));
    }
    return s;
}

inline Tensor<float> render_prototype(const IdentitySpec& id, std::size_t h, std::size_t w) {
    Tensor<float> img({1, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            img[y * w + x] = static_cast<float>(
                std::clamp(signature_value(id, (x + 0.5) / static_cast<double>(w), (y + 0.5) / static_cast<double>(h)),
                           -1.0, 1.0));
    return img;
}

inline IdentitySpec sample_identity(std::uint32_t label, Rng& rng, double variation) {
    IdentitySpec id{label, {}, {}, variation};
    const std::size_t nc = 2 + rng.below(3);
    for (std::size_t k = 0; k < nc; ++k) {
        const double f = rng.uniform(0.5, 2.5), th = rng.uniform(0.0, 2.0 * std::numbers::pi);
        id.components.push_back({f * std::cos(th), f * std::sin(th), rng.uniform(0.0, 2.0 * std::numbers::pi),
                                 rng.uniform(0.15, 0.35)});
    }
    for (std::size_t k = 0; k < 3; ++k)
        id.blobs.push_back({rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.06, 0.14),
                            (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.4, 0.7)});
    return id;
}

/// Distinct, collision-checked identity signatures.
inline std::vector<IdentitySpec> make_identities(const GeneratorConfig& cfg) {
    Rng rng = Rng(cfg.seed).fork("identities");
    std::vector<IdentitySpec> ids;
    std::vector<Tensor<float>> protos;
    constexpr double kMinRms = 0.15;
    while (ids.size() < cfg.identities) {
        auto cand = sample_identity(static_cast<std::uint32_t>(ids.size()), rng, cfg.variation);
        auto proto = render_prototype(cand, cfg.height, cfg.width);
        const bool collides = std::any_of(protos.begin(), protos.end(), [&](const Tensor<float>& p) {
            double s = 0;
            for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - proto[i]) * (p[i] - proto[i]);
            return std::sqrt(s / static_cast<double>(p.size())) < kMinRms;
        });
        if (collides) continue;
        ids.push_back(std::move(cand));
        protos.push_back(std::move(proto));
    }
    return ids;
}

/// One sample: jittered rendering (sub-pixel shift, contrast) plus pixel noise.
inline Tensor<float> render_sample(const IdentitySpec& id, std::size_t h, std::size_t w, Rng& rng) {
    const double var = id.variation;
    const double sx = var * rng.uniform(-1.5, 1.5) / static_cast<double>(w);
    const double sy = var * rng.uniform(-1.5, 1.5) / static_cast<double>(h);
    const double gain = 1.0 + var * 0.1 * rng.normal();
    const double sigma = var * 0.06;
    Tensor<float> img({1, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double u = (x + 0.5) / static_cast<double>(w) - sx, v = (y + 0.5) / static_cast<double>(h) - sy;
            const double val = gain * signature_value(id, u, v) + (sigma > 0 ? sigma * rng.normal() : 0.0);
            img[y * w + x] = static_cast<float>(std::clamp(val, -1.0, 1.0));
        }
    return img;
}

inline Dataset generate_dataset(const GeneratorConfig& cfg) {
    if (cfg.identities < 2) throw ValueError("generate_dataset: need at least 2 identities");
    if (cfg.images_per_identity < 1 || cfg.height < 4 || cfg.width < 4)
        throw ValueError("generate_dataset: degenerate dimensions");
    if (!(cfg.variation >= 0)) throw ValueError("generate_dataset: variation must be >= 0");
    const auto ids = make_identities(cfg);
    const Rng root = Rng(cfg.seed).fork("samples");
    Dataset ds{cfg.height, cfg.width, 1, {}, {}};
    for (const auto& id : ids)
        for (std::size_t k = 0; k < cfg.images_per_identity; ++k) {
            Rng rng = root.fork(static_cast<std::uint64_t>(id.label) * cfg.images_per_identity + k);
            ds.labels.push_back(id.label);
            ds.images.push_back(render_sample(id, cfg.height, cfg.width, rng));
        }
    return ds;
}

// ---------------------------------------------------------------------------
// Occlusion

enum class OcclusionKind { rect_mask, random_loss, lines, leaves };

inline std::string_view to_string(OcclusionKind k) {
    switch (k) {
        case OcclusionKind::rect_mask: return "rect_mask";
        case OcclusionKind::random_loss: return "random_loss";
        case OcclusionKind::lines: return "lines";
        case OcclusionKind::leaves: return "leaves";
    }
    return "?";
}

inline OcclusionKind parse_occlusion_kind(std::string_view s) {
    for (auto k : {OcclusionKind::rect_mask, OcclusionKind::random_loss, OcclusionKind::lines, OcclusionKind::leaves})
        if (s == to_string(k)) return k;
    throw ValueError("unknown occlusion kind '" + std::string(s) + "'");
}

struct OcclusionSpec {
    OcclusionKind kind = OcclusionKind::rect_mask;
    double severity = 0.5;
    std::uint64_t seed = 0;
};

namespace detail {

inline OcclusionMask leaves_mask(double severity, std::size_t h, std::size_t w, Rng& rng) {
    OcclusionMask m(h, w, 1);
    const double total = static_cast<double>(h * w);
    const double lo = severity * 0.97, hi = severity * 1.08;
    std::size_t occluded = 0;
    double max_r = std::max(2.0, 0.18 * static_cast<double>(std::min(h, w)));
    std::size_t rejects = 0;
    while (static_cast<double>(occluded) / total < lo) {
        const double cx = rng.uniform(0.0, static_cast<double>(w)), cy = rng.uniform(0.0, static_cast<double>(h));
        const double rx = rng.uniform(1.0, max_r), ry = rng.uniform(1.0, max_r);
        const double th = rng.uniform(0.0, std::numbers::pi);
        const double c = std::cos(th), s = std::sin(th);
        std::vector<std::size_t> hit;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                if (!m.known(y, x)) continue;
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double a = (c * dx + s * dy) / rx, b = (-s * dx + c * dy) / ry;
                if (a * a + b * b <= 1.0) hit.push_back(y * w + x);
            }
        if (static_cast<double>(occluded + hit.size()) / total > hi) {
            if (++rejects % 8 == 0) max_r = std::max(1.0, max_r * 0.7);
            continue;
        }
        for (auto i : hit) m.set(i / w, i % w, false);
        occluded += hit.size();
    }
    return m;
}

}  // namespace detail

inline OcclusionMask make_mask(const OcclusionSpec& spec, std::size_t h, std::size_t w) {
    if (!(spec.severity > 0.0 && spec.severity <= 1.0))
        throw ValueError("occlusion severity must lie in (0, 1], got " + std::to_string(spec.severity));
    if (h == 0 || w == 0) throw ValueError("make_mask: empty image");
    Rng rng(spec.seed);
    OcclusionMask m(h, w, 1);
    switch (spec.kind) {
        case OcclusionKind::rect_mask: {
            const auto rows = static_cast<std::size_t>(std::lround(spec.severity * static_cast<double>(h)));
            for (std::size_t y = h - std::min(rows, h); y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) m.set(y, x, false);
            break;
        }
        case OcclusionKind::random_loss:
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    if (rng.uniform() < spec.severity) m.set(y, x, false);
            break;
        case OcclusionKind::lines: {
            // Evenly spaced stripes: row i is occluded when floor((i + 1) s + o) > floor(i s + o).
            const bool vertical = rng.uniform() < 0.5;
            const double offset = rng.uniform();
            const std::size_t n = vertical ? w : h;
            for (std::size_t i = 0; i < n; ++i) {
                const bool hit = std::floor((i + 1) * spec.severity + offset) > std::floor(i * spec.severity + offset);
                if (!hit) continue;
                for (std::size_t k = 0; k < (vertical ? h : w); ++k)
                    vertical ? m.set(k, i, false) : m.set(i, k, false);
            }
            break;
        }
        case OcclusionKind::leaves:
            m = detail::leaves_mask(spec.severity, h, w, rng);
            break;
    }
    return m;
}

/// Known pixels unchanged, occluded pixels set to `fill`.
inline Tensor<float> occlude(const Tensor<float>& image, const OcclusionMask& mask, float fill = 0.0f) {
    mask.check_image(image.shape());
    Tensor<float> out = image;
    const std::size_t plane = mask.size();
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!mask.known(i % plane)) out[i] = fill;
    return out;
}

// ---------------------------------------------------------------------------
// Split

struct Split {
    std::vector<std::size_t> gallery;  // dataset indices
    std::vector<std::size_t> probe;
};

/// Per identity, a seeded shuffle sends round(fraction * count) images to the
/// gallery (at least one, at most count - 1) and the rest to the probe side.
inline Split split(const Dataset& ds, double gallery_fraction, std::uint64_t seed) {
    if (!(gallery_fraction > 0.0 && gallery_fraction < 1.0))
        throw ValueError("split: gallery fraction must lie in (0, 1)");
    std::map<std::uint32_t, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < ds.size(); ++i) by_label[ds.labels[i]].push_back(i);
    Rng rng = Rng(seed).fork("split");
    Split out;
    for (auto& [label, idx] : by_label) {
        if (idx.size() < 2)
            throw ValueError("split: identity " + std::to_string(label) + " has fewer than 2 images");
        rng.shuffle(idx.begin(), idx.end());
        auto g = static_cast<std::size_t>(std::lround(gallery_fraction * static_cast<double>(idx.size())));
        g = std::clamp<std::size_t>(g, 1, idx.size() - 1);
        out.gallery.insert(out.gallery.end(), idx.begin(), idx.begin() + static_cast<long>(g));
        out.probe.insert(out.probe.end(), idx.begin() + static_cast<long>(g), idx.end());
    }
    return out;
}

}  // namespace mode::data
