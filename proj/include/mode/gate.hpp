#pragma once

// ID-Gate: per-probe expert weights from concatenated features, and the
// decision-space mixture of per-expert similarity rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mode/adam.hpp"
#include "mode/checkpoint.hpp"
#include "mode/recognition.hpp"

namespace mode::gate {

enum class GateKind { softmax, noisy_topk };

inline std::string to_string(GateKind k) { return k == GateKind::softmax ? "softmax" : "noisy_topk"; }

inline GateKind parse_gate_kind(const std::string& s) {
    if (s == "softmax") return GateKind::softmax;
    if (s == "noisy_topk") return GateKind::noisy_topk;
    throw ValueError("unknown gate kind '" + s + "' (expected softmax or noisy_topk)");
}

/// Gate over E = n + 1 experts with feature dimension d.
/// W_g and W_noise are [E, E*d]; b_g is [E]. b_g is unused by noisy top-k.
template <typename Real = float>
struct GateParams {
    GateKind kind = GateKind::softmax;
    std::size_t experts = 1;
    std::size_t dim = 1;
    std::size_t k = 1;
    nn::Param<Real> W_g, b_g, W_noise;

    GateParams() = default;
    GateParams(std::size_t experts_, std::size_t dim_, GateKind kind_ = GateKind::softmax, std::size_t k_ = 0)
        : kind(kind_), experts(experts_), dim(dim_), k(k_ == 0 ? experts_ : k_),
          W_g("gate.W_g", Tensor<Real>({experts_, experts_ * dim_})),
          b_g("gate.b_g", Tensor<Real>({experts_})),
          W_noise("gate.W_noise", Tensor<Real>({experts_, experts_ * dim_})) {
        if (experts_ == 0 || dim_ == 0) throw ValueError("gate: need at least one expert and a positive feature dim");
        if (k < 1 || k > experts_)
            throw ValueError("gate: k = " + std::to_string(k) + " outside [1, " + std::to_string(experts_) + "]");
    }

    std::size_t input_size() const noexcept { return experts * dim; }

    std::vector<nn::Param<Real>*> params() { return {&W_g, &b_g, &W_noise}; }
    std::vector<WeightRecord> records() { return to_records(params()); }
    void load(const std::vector<WeightRecord>& r) { assign_records(r, params()); }
};

/// Per-probe inputs: X = [x_0 .. x_n] with x_0 the occluded original, their
/// features and similarity rows, all in expert order.
struct ExpertBundle {
    std::vector<Tensor<float>> images;  // optional
    std::vector<recognition::FeatureVector> features;
    std::vector<recognition::SimilarityRow> rows;

    std::size_t experts() const noexcept { return rows.size(); }

    void check() const {
        if (rows.empty() || features.size() != rows.size())
            throw ShapeError("expert bundle: need one feature and one row per expert");
        if (!images.empty() && images.size() != rows.size()) throw ShapeError("expert bundle: image count mismatch");
        for (const auto& r : rows)
            if (r.size() != rows.front().size()) throw ShapeError("expert bundle: rows differ in length");
        for (const auto& f : features)
            if (f.size() != features.front().size()) throw ShapeError("expert bundle: features differ in length");
    }

    /// The first `e` experts (x_0 and the first e - 1 repaints).
    ExpertBundle prefix(std::size_t e) const {
        if (e == 0 || e > experts()) throw ValueError("expert bundle: prefix length out of range");
        ExpertBundle b;
        if (!images.empty()) b.images.assign(images.begin(), images.begin() + e);
        b.features.assign(features.begin(), features.begin() + e);
        b.rows.assign(rows.begin(), rows.begin() + e);
        return b;
    }
};

template <typename Real>
std::vector<Real> concat_features(const std::vector<recognition::FeatureVector>& features) {
    std::vector<Real> x;
    for (const auto& f : features)
        for (float v : f) x.push_back(static_cast<Real>(v));
    return x;
}

namespace detail {

template <typename Real>
std::vector<Real> affine(const Tensor<Real>& W, const Real* b, std::span<const Real> x) {
    const std::size_t rows = W.dim(0), cols = W.dim(1);
    std::vector<Real> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        Real acc = b ? b[i] : Real(0);
        for (std::size_t j = 0; j < cols; ++j) acc += W[i * cols + j] * x[j];
        out[i] = acc;
    }
    return out;
}

template <typename Real>
Real softplus(Real v) {
    return v > Real(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename Real>
Real sigmoid(Real v) {
    return Real(1) / (Real(1) + std::exp(-v));
}

}  // namespace detail

/// Softmax with -inf entries mapped to exactly zero weight.
template <typename Real>
std::vector<Real> softmax(std::span<const Real> z) {
    const Real mx = *std::max_element(z.begin(), z.end());
    std::vector<Real> w(z.size());
    Real s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (w[i] = std::isinf(z[i]) && z[i] < 0 ? Real(0) : std::exp(z[i] - mx));
    for (auto& v : w) v /= s;
    return w;
}

/// Indices of the k largest entries; ties go to the lower index.
template <typename Real>
std::vector<std::size_t> top_k_indices(std::span<const Real> h, std::size_t k) {
    auto order = recognition::rank_indices(h);
    order.resize(k);
    return order;
}

template <typename Real>
void check_input(const GateParams<Real>& p, std::span<const Real> x) {
    if (x.size() != p.input_size())
        throw ShapeError("gate: input has " + std::to_string(x.size()) + " values, expected " +
                         std::to_string(p.experts) + " experts x " + std::to_string(p.dim));
}

/// w = softmax(W_g x + b_g).
template <typename Real>
std::vector<Real> gate_softmax(const GateParams<Real>& p, std::span<const Real> x) {
    check_input(p, x);
    auto z = detail::affine(p.W_g.value, p.b_g.value.data(), x);
    return softmax<Real>(z);
}

/// H = W_g x + N * softplus(W_noise x); all but the top k of H set to -inf,
/// then softmax. An empty noise span means zero noise.
template <typename Real>
std::vector<Real> gate_noisy_topk(const GateParams<Real>& p, std::span<const Real> x, std::span<const Real> noise = {}) {
    check_input(p, x);
    if (p.k < 1 || p.k > p.experts) throw ValueError("gate: k out of range");
    if (!noise.empty() && noise.size() != p.experts) throw ShapeError("gate: one noise value per expert required");
    auto h = detail::affine(p.W_g.value, static_cast<const Real*>(nullptr), x);
    if (!noise.empty()) {
        auto hn = detail::affine(p.W_noise.value, static_cast<const Real*>(nullptr), x);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += noise[i] * detail::softplus(hn[i]);
    }
    std::vector<Real> kept(h.size(), -std::numeric_limits<Real>::infinity());
    for (auto i : top_k_indices<Real>(h, p.k)) kept[i] = h[i];
    return softmax<Real>(kept);
}

template <typename Real>
std::vector<Real> gate_weights(const GateParams<Real>& p, std::span<const Real> x, std::span<const Real> noise = {}) {
    return p.kind == GateKind::softmax ? gate_softmax(p, x) : gate_noisy_topk(p, x, noise);
}

/// S_X = sum_i w_i s(x_i).
template <typename Real, typename Row>
std::vector<Real> mixture(const std::vector<Row>& rows, std::span<const Real> w) {
    if (rows.empty()) throw ValueError("mixture: no rows");
    if (w.size() != rows.size())
        throw ShapeError("mixture: " + std::to_string(w.size()) + " weights for " + std::to_string(rows.size()) + " rows");
    std::vector<Real> s(rows.front().size(), Real(0));
    for (std::size_t e = 0; e < rows.size(); ++e) {
        if (rows[e].size() != s.size()) throw ShapeError("mixture: rows differ in length");
        for (std::size_t m = 0; m < s.size(); ++m) s[m] += w[e] * static_cast<Real>(rows[e][m]);
    }
    return s;
}

/// Unweighted mean of all rows.
template <typename Real, typename Row>
std::vector<Real> baseline_rf_average(const std::vector<Row>& rows) {
    if (rows.empty()) throw ValueError("baseline_rf_average: no rows");
    const std::vector<Real> w(rows.size(), Real(1) / static_cast<Real>(rows.size()));
    return mixture<Real>(rows, std::span<const Real>(w));
}

/// Gallery indices ranked by S_X (descending, ties to the lower index).
template <typename Real>
std::vector<std::size_t> identify(const ExpertBundle& b, const GateParams<Real>& p) {
    b.check();
    if (b.experts() != p.experts) throw ShapeError("identify: bundle expert count does not match the gate");
    const auto x = concat_features<Real>(b.features);
    const auto w = gate_weights(p, std::span<const Real>(x));
    const auto s = mixture<Real>(b.rows, std::span<const Real>(w));
    return recognition::rank_indices(std::span<const Real>(s));
}

/// Mean cross-entropy with S_X entries (times `scale`) used as logits.
template <typename Real>
double gate_loss(const std::vector<std::vector<Real>>& s_batch, std::span<const std::size_t> labels, double scale = 1.0) {
    if (s_batch.empty() || s_batch.size() != labels.size()) throw ShapeError("gate_loss: batch/label count mismatch");
    double total = 0;
    for (std::size_t i = 0; i < s_batch.size(); ++i) {
        const auto& s = s_batch[i];
        if (labels[i] >= s.size()) throw ValueError("gate_loss: label out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (auto v : s) mx = std::max(mx, scale * static_cast<double>(v));
        double acc = 0;
        for (auto v : s) acc += std::exp(scale * static_cast<double>(v) - mx);
        total += mx + std::log(acc) - scale * static_cast<double>(s[labels[i]]);
    }
    return total / static_cast<double>(s_batch.size());
}

/// Loss over a batch of bundles; overwrites the parameter gradients.
/// `noise` holds one value per expert per item (empty for zero noise).
template <typename Real>
double gate_loss_and_grad(GateParams<Real>& p, std::span<const ExpertBundle* const> batch,
                          std::span<const std::size_t> labels, double scale, std::span<const Real> noise = {}) {
    if (batch.empty() || batch.size() != labels.size()) throw ShapeError("gate: batch/label count mismatch");
    if (!noise.empty() && noise.size() != batch.size() * p.experts) throw ShapeError("gate: noise size mismatch");
    for (auto* q : p.params()) q->zero_grad();
    const std::size_t E = p.experts, D = p.input_size();
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    double total = 0;

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& b = *batch[i];
        b.check();
        if (b.experts() != E) throw ShapeError("gate: bundle expert count does not match the gate");
        const auto x = concat_features<Real>(b.features);
        std::span<const Real> nz = noise.empty() ? std::span<const Real>{} : noise.subspan(i * E, E);

        std::vector<Real> hn;
        std::vector<Real> z;
        if (p.kind == GateKind::softmax) {
            z = detail::affine(p.W_g.value, p.b_g.value.data(), std::span<const Real>(x));
        } else {
            auto h = detail::affine(p.W_g.value, static_cast<const Real*>(nullptr), std::span<const Real>(x));
            if (!nz.empty()) {
                hn = detail::affine(p.W_noise.value, static_cast<const Real*>(nullptr), std::span<const Real>(x));
                for (std::size_t e = 0; e < E; ++e) h[e] += nz[e] * detail::softplus(hn[e]);
            }
            z.assign(E, -std::numeric_limits<Real>::infinity());
            for (auto e : top_k_indices<Real>(h, p.k)) z[e] = h[e];
        }
        const auto w = softmax<Real>(z);
        const auto s = mixture<Real>(b.rows, std::span<const Real>(w));
        const std::size_t M = s.size();
        if (labels[i] >= M) throw ValueError("gate: label out of range");

        // cross-entropy on scale * S
        double mx = -std::numeric_limits<double>::infinity();
        for (auto v : s) mx = std::max(mx, scale * static_cast<double>(v));
        double acc = 0;
        for (auto v : s) acc += std::exp(scale * static_cast<double>(v) - mx);
        const double lse = mx + std::log(acc);
        total += lse - scale * static_cast<double>(s[labels[i]]);

        std::vector<double> ds(M);
        for (std::size_t m = 0; m < M; ++m)
            ds[m] = scale * (std::exp(scale * static_cast<double>(s[m]) - lse) - (m == labels[i] ? 1.0 : 0.0)) * inv_n;
        std::vector<double> dw(E, 0.0);
        for (std::size_t e = 0; e < E; ++e)
            for (std::size_t m = 0; m < M; ++m) dw[e] += static_cast<double>(b.rows[e][m]) * ds[m];
        double wdw = 0;
        for (std::size_t e = 0; e < E; ++e) wdw += static_cast<double>(w[e]) * dw[e];

        for (std::size_t e = 0; e < E; ++e) {
            if (w[e] == Real(0)) continue;  // dropped by top-k
            const double dz = static_cast<double>(w[e]) * (dw[e] - wdw);
            Real* gW = p.W_g.grad.data() + e * D;
            for (std::size_t j = 0; j < D; ++j) gW[j] += static_cast<Real>(dz * static_cast<double>(x[j]));
            if (p.kind == GateKind::softmax) {
                p.b_g.grad[e] += static_cast<Real>(dz);
            } else if (!nz.empty()) {
                const double dhn = dz * static_cast<double>(nz[e]) * static_cast<double>(detail::sigmoid(hn[e]));
                Real* gN = p.W_noise.grad.data() + e * D;
                for (std::size_t j = 0; j < D; ++j) gN[j] += static_cast<Real>(dhn * static_cast<double>(x[j]));
            }
        }
    }
    return total * inv_n;
}

struct GateTrainConfig {
    std::size_t epochs = 200;
    std::size_t batch = 32;
    double lr = 1e-6;
    std::uint64_t seed = 0;
    double logit_scale = 16.0;
    GateKind kind = GateKind::softmax;
    std::size_t k = 0;  // 0 means all experts
    bool shuffle_repaints = true;  // augmentation: reorder experts 1..n per item
};

template <typename Real>
struct TrainedGate {
    GateParams<Real> params;
    std::vector<double> epoch_loss;
};

/// Adam on the gate parameters only, starting from zero weights (uniform
/// gating). Noisy top-k draws fresh noise per item during training. The
/// repaints are exchangeable draws, so their order is shuffled per item while
/// x_0 keeps slot 0.
template <typename Real>
TrainedGate<Real> train_gate(const std::vector<ExpertBundle>& bundles, const std::vector<std::size_t>& labels,
                             const GateTrainConfig& cfg) {
    if (bundles.empty() || bundles.size() != labels.size()) throw ValueError("train_gate: bad probe set");
    if (cfg.epochs == 0 || cfg.batch == 0) throw ValueError("train_gate: epochs and batch must be positive");
    bundles.front().check();
    const std::size_t E = bundles.front().experts(), d = bundles.front().features.front().size();
    TrainedGate<Real> out{GateParams<Real>(E, d, cfg.kind, cfg.k), {}};
    nn::Adam<Real> adam({cfg.lr});
    Rng rng = Rng(cfg.seed).fork("batches");
    Rng noise_rng = Rng(cfg.seed).fork("noise");
    Rng aug_rng = Rng(cfg.seed).fork("augment");
    std::vector<std::size_t> order(bundles.size());
    std::vector<ExpertBundle> shuffled;
    std::vector<std::size_t> slots(E);
    std::size_t batch_index = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order.begin(), order.end());
        double total = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++batch_index) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            std::vector<const ExpertBundle*> items;
            std::vector<std::size_t> ys;
            shuffled.assign(cfg.shuffle_repaints && E > 2 ? n : 0, ExpertBundle{});
            for (std::size_t i = 0; i < n; ++i) {
                const ExpertBundle& b = bundles[order[start + i]];
                if (shuffled.empty()) {
                    items.push_back(&b);
                } else {
                    std::iota(slots.begin(), slots.end(), std::size_t{0});
                    aug_rng.shuffle(slots.begin() + 1, slots.end());
                    for (auto e : slots) {
                        shuffled[i].features.push_back(b.features[e]);
                        shuffled[i].rows.push_back(b.rows[e]);
                    }
                    items.push_back(&shuffled[i]);
                }
                ys.push_back(labels[order[start + i]]);
            }
            std::vector<Real> noise;
            if (cfg.kind == GateKind::noisy_topk)
                for (std::size_t i = 0; i < n * E; ++i) noise.push_back(static_cast<Real>(noise_rng.normal()));
            const double loss = gate_loss_and_grad(out.params, std::span<const ExpertBundle* const>(items),
                                                   std::span<const std::size_t>(ys), cfg.logit_scale,
                                                   std::span<const Real>(noise));
            if (!std::isfinite(loss))
                throw NumericError("train_gate: non-finite loss at batch " + std::to_string(batch_index));
            adam.step(out.params.params());
            total += loss * static_cast<double>(n);
        }
        out.epoch_loss.push_back(total / static_cast<double>(bundles.size()));
    }
    return out;
}

}  // namespace mode::gate
