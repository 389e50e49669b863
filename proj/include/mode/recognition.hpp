#pragma once

// Embedding, gallery scoring and identification / verification metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mode/adam.hpp"
#include "mode/checkpoint.hpp"
#include "mode/nn.hpp"
#include "mode/rng.hpp"

namespace mode::recognition {

using FeatureVector = std::vector<float>;
using SimilarityRow = std::vector<float>;

struct EmbedderArch {
    std::size_t channels = 1;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t base = 8;
    std::size_t wide = 16;
    std::size_t dim = 64;
};

/// conv -> pool -> conv -> pool -> dense. One instance serves every expert branch.
template <typename Real = float>
class Embedder {
  public:
    Embedder() : Embedder(EmbedderArch{}) {}

    explicit Embedder(EmbedderArch arch) : arch_(arch), net_("embedder") {
        if (arch.height % 4 || arch.width % 4 || arch.height == 0 || arch.width == 0)
            throw ValueError("embedder: image height and width must be positive multiples of 4");
        if (arch.dim == 0) throw ValueError("embedder: feature dimension must be positive");
        const std::size_t flat = arch.wide * (arch.height / 4) * (arch.width / 4);
        net_.add(nn::Conv2d<Real>("embedder.conv1", arch.channels, arch.base, 3));
        net_.add(nn::Act<Real>("embedder.act1", nn::Activation::silu));
        net_.add(nn::AvgPool2<Real>("embedder.pool1"));
        net_.add(nn::Conv2d<Real>("embedder.conv2", arch.base, arch.wide, 3));
        net_.add(nn::Act<Real>("embedder.act2", nn::Activation::silu));
        net_.add(nn::AvgPool2<Real>("embedder.pool2"));
        net_.add(nn::Reshape<Real>("embedder.flat", {flat}));
        net_.add(nn::Dense<Real>("embedder.fc", flat, arch.dim));
    }

    const EmbedderArch& arch() const noexcept { return arch_; }
    std::size_t dim() const noexcept { return arch_.dim; }
    Shape image_shape() const { return {arch_.channels, arch_.height, arch_.width}; }

    void init(Rng& rng) {
        static_cast<nn::Conv2d<Real>&>(net_.at(0)).init(rng);
        static_cast<nn::Conv2d<Real>&>(net_.at(3)).init(rng);
        static_cast<nn::Dense<Real>&>(net_.at(7)).init(rng);
    }

    std::vector<nn::Param<Real>*> params() { return net_.params(); }
    nn::Sequential<Real>& network() noexcept { return net_; }

    /// Raw (unnormalised) features for a batch [N, C, H, W].
    Tensor<Real> forward(const Tensor<Real>& x) { return net_.forward(checked(x)); }
    Tensor<Real> infer(const Tensor<Real>& x) const { return net_.infer(checked(x)); }
    Tensor<Real> backward(const Tensor<Real>& g) { return net_.backward(g); }

    std::vector<WeightRecord> records() { return to_records(params()); }
    void load(const std::vector<WeightRecord>& r) { assign_records(r, params()); }

  private:
    const Tensor<Real>& checked(const Tensor<Real>& x) const {
        if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != image_shape())
            throw ShapeError("embedder: expected [N," + std::to_string(arch_.channels) + "," +
                             std::to_string(arch_.height) + "," + std::to_string(arch_.width) + "], got " +
                             to_string(x.shape()));
        return x;
    }

    EmbedderArch arch_;
    nn::Sequential<Real> net_;
};

template <typename Real>
FeatureVector l2_normalized(std::span<const Real> raw) {
    double s = 0;
    for (auto v : raw) s += static_cast<double>(v) * v;
    const double n = std::sqrt(s);
    if (!(n > 0)) throw NumericError("cannot normalise a zero-norm feature");
    FeatureVector out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>(raw[i] / n);
    return out;
}

/// L2-normalised features for a batch of images; any model with infer().
template <typename Model, typename Real>
std::vector<FeatureVector> embed_batch(const Model& e, const Tensor<Real>& images) {
    auto raw = e.infer(images);
    std::vector<FeatureVector> out;
    for (std::size_t i = 0; i < raw.dim(0); ++i) out.push_back(l2_normalized<Real>(std::as_const(raw).slice(i)));
    return out;
}

template <typename Model, typename Real>
FeatureVector embed(const Model& e, const Tensor<Real>& image) {
    Shape b{1};
    b.insert(b.end(), image.shape().begin(), image.shape().end());
    return embed_batch(e, image.reshaped(b)).front();
}

/// One entry per identity, in a fixed order that similarity indices refer to.
struct Gallery {
    std::vector<std::uint32_t> labels;
    std::vector<FeatureVector> features;

    std::size_t size() const noexcept { return labels.size(); }

    std::size_t index_of(std::uint32_t label) const {
        auto it = std::find(labels.begin(), labels.end(), label);
        if (it == labels.end()) throw ValueError("identity " + std::to_string(label) + " is not in the gallery");
        return static_cast<std::size_t>(it - labels.begin());
    }

    void add(std::uint32_t label, FeatureVector f) {
        if (std::find(labels.begin(), labels.end(), label) != labels.end())
            throw ValueError("gallery: duplicate identity " + std::to_string(label));
        if (!features.empty() && f.size() != features.front().size())
            throw ShapeError("gallery: feature dimension mismatch");
        labels.push_back(label);
        features.push_back(std::move(f));
    }
};

/// Gallery entry per identity: normalised mean of that identity's features,
/// ordered by ascending label.
inline Gallery build_gallery(const std::vector<FeatureVector>& features, const std::vector<std::uint32_t>& labels) {
    if (features.size() != labels.size() || features.empty()) throw ValueError("build_gallery: bad inputs");
    std::map<std::uint32_t, std::vector<double>> sums;
    for (std::size_t i = 0; i < features.size(); ++i) {
        auto& s = sums[labels[i]];
        s.resize(features[i].size(), 0.0);
        for (std::size_t j = 0; j < s.size(); ++j) s[j] += features[i][j];
    }
    Gallery g;
    for (const auto& [label, s] : sums) g.add(label, l2_normalized(std::span<const double>(s)));
    return g;
}

inline double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (!(na > 0) || !(nb > 0)) throw ValueError("cosine: zero-norm vector");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

/// Cosine similarity against every gallery entry, in gallery order.
inline SimilarityRow similarity(const FeatureVector& f, const Gallery& g) {
    SimilarityRow row;
    row.reserve(g.size());
    for (const auto& e : g.features) row.push_back(static_cast<float>(cosine(f, e)));
    return row;
}

/// Gallery indices by descending score; ties go to the lower index.
template <typename Real>
std::vector<std::size_t> rank_indices(std::span<const Real> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

/// Whether `truth` is among the k best entries of `row` under the ranking rule.
template <typename Real>
bool in_top_k(std::span<const Real> row, std::size_t truth, std::size_t k) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < row.size(); ++j)
        if (row[j] > row[truth] || (row[j] == row[truth] && j < truth)) ++ahead;
    return ahead < k;
}

/// Percentage of rows whose true gallery index ranks within the top k.
template <typename Row>
double topk_accuracy(const std::vector<Row>& rows, const std::vector<std::size_t>& truth, std::size_t k) {
    if (rows.size() != truth.size()) throw ShapeError("topk_accuracy: rows/labels count mismatch");
    if (rows.empty()) throw ValueError("topk_accuracy: no probes");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto m = rows[i].size();
        if (k == 0 || k > m) throw ValueError("topk_accuracy: k must lie in [1, M]");
        if (truth[i] >= m) throw ValueError("topk_accuracy: label outside the gallery");
        using Real = typename Row::value_type;
        if (in_top_k(std::span<const Real>(rows[i]), truth[i], k)) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(rows.size());
}

struct EerResult {
    double eer = 0;
    double acc = 0;  // percent
    double threshold = 0;
};

/// Equal error rate from a threshold sweep over -inf, the midpoints of the
/// sorted unique scores, and +inf. Accept when score >= threshold. The chosen
/// threshold minimises |FAR - FRR| (lowest threshold on ties); EER is reported
/// as (FAR + FRR) / 2 there.
inline EerResult eer_and_acc(std::span<const double> genuine, std::span<const double> impostor) {
    if (genuine.empty() || impostor.empty()) throw ValueError("eer_and_acc: score lists must be nonempty");
    std::vector<double> g(genuine.begin(), genuine.end()), im(impostor.begin(), impostor.end());
    std::sort(g.begin(), g.end());
    std::sort(im.begin(), im.end());
    std::vector<double> all(g);
    all.insert(all.end(), im.begin(), im.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());

    std::vector<double> taus{-std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i + 1 < all.size(); ++i) taus.push_back(all[i] + (all[i + 1] - all[i]) / 2);
    taus.push_back(std::numeric_limits<double>::infinity());

    const auto G = static_cast<long long>(g.size()), I = static_cast<long long>(im.size());
    long long best_gap = std::numeric_limits<long long>::max();
    EerResult best;
    for (double tau : taus) {
        // false accepts: impostors >= tau; false rejects: genuine < tau
        const long long fa = I - (std::lower_bound(im.begin(), im.end(), tau) - im.begin());
        const long long fr = std::lower_bound(g.begin(), g.end(), tau) - g.begin();
        const long long gap = std::llabs(fa * G - fr * I);  // |FAR - FRR| * G * I
        if (gap < best_gap) {
            best_gap = gap;
            const double far = static_cast<double>(fa) / static_cast<double>(I);
            const double frr = static_cast<double>(fr) / static_cast<double>(G);
            best.eer = (far + frr) / 2;
            best.acc = 100.0 * (1.0 - static_cast<double>(fa + fr) / static_cast<double>(G + I));
            best.threshold = tau;
        }
    }
    return best;
}

struct VerificationPair {
    std::size_t a, b;  // indices into the two label lists
    bool same;
    friend bool operator==(const VerificationPair&, const VerificationPair&) = default;
};

/// Balanced genuine / impostor pairs between side A and side B; count / 2
/// rounded up are genuine. When `distinct` is set (A and B are the same
/// split), a pair never uses one image twice.
inline std::vector<VerificationPair> build_verification_pairs(const std::vector<std::uint32_t>& labels_a,
                                                              const std::vector<std::uint32_t>& labels_b, Rng& rng,
                                                              std::size_t count, bool distinct = false) {
    std::map<std::uint32_t, std::vector<std::size_t>> by_label_b;
    for (std::size_t j = 0; j < labels_b.size(); ++j) by_label_b[labels_b[j]].push_back(j);
    if (by_label_b.size() < 2) throw ValueError("build_verification_pairs: need at least 2 identities");
    std::vector<std::size_t> genuine_ok;
    for (std::size_t i = 0; i < labels_a.size(); ++i) {
        auto it = by_label_b.find(labels_a[i]);
        if (it == by_label_b.end()) continue;
        if (it->second.size() > (distinct ? 1u : 0u)) genuine_ok.push_back(i);
    }
    if (genuine_ok.empty() || labels_a.empty())
        throw ValueError("build_verification_pairs: no genuine pair can be formed");

    std::vector<VerificationPair> out;
    const std::size_t n_genuine = (count + 1) / 2;
    for (std::size_t k = 0; k < count; ++k) {
        if (k < n_genuine) {
            const std::size_t a = genuine_ok[rng.below(genuine_ok.size())];
            const auto& cands = by_label_b[labels_a[a]];
            std::size_t b;
            do b = cands[rng.below(cands.size())];
            while (distinct && b == a);
            out.push_back({a, b, true});
        } else {
            const std::size_t a = rng.below(labels_a.size());
            std::size_t b;
            do b = rng.below(labels_b.size());
            while (labels_b[b] == labels_a[a]);
            out.push_back({a, b, false});
        }
    }
    return out;
}

struct EvalReport {
    std::string method;
    std::size_t n_experts = 0;
    std::string occlusion;
    double top1 = 0, top5 = 0;  // percent
    double eer = 0;             // rate
    double acc = 0;             // percent
    std::size_t probes = 0, gallery_size = 0;
};

inline constexpr const char* kReportHeader = "method,n_experts,occlusion,top1,top5,eer,acc,probes,gallery_size";

inline std::string to_csv_row(const EvalReport& r) {
    std::ostringstream os;
    os << r.method << ',' << r.n_experts << ',' << r.occlusion << ',' << std::fixed << std::setprecision(4) << r.top1
       << ',' << r.top5 << ',' << std::setprecision(6) << r.eer << ',' << std::setprecision(4) << r.acc << ','
       << r.probes << ',' << r.gallery_size;
    return os.str();
}

inline EvalReport parse_csv_row(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 9) throw FormatError("report row must have 9 fields: '" + line + "'");
    EvalReport r;
    r.method = f[0];
    r.n_experts = std::stoul(f[1]);
    r.occlusion = f[2];
    r.top1 = std::stod(f[3]);
    r.top5 = std::stod(f[4]);
    r.eer = std::stod(f[5]);
    r.acc = std::stod(f[6]);
    r.probes = std::stoul(f[7]);
    r.gallery_size = std::stoul(f[8]);
    return r;
}

struct EmbedderTrainConfig {
    std::size_t epochs = 30;
    std::size_t batch = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

template <typename Real>
struct TrainedEmbedder {
    Embedder<Real> model;
    std::vector<double> epoch_loss;
};

/// Classification head used only while training the embedder.
template <typename Real>
class ClassifierHead {
  public:
    ClassifierHead(std::size_t dim, std::size_t classes)
        : norm_("head.norm"), fc_("head.fc", dim, classes) {}
    void init(Rng& rng) { fc_.init(rng); }
    Tensor<Real> forward(const Tensor<Real>& f) { return fc_.forward(norm_.forward(f)); }
    Tensor<Real> backward(const Tensor<Real>& g) { return norm_.backward(fc_.backward(g)); }
    std::vector<nn::Param<Real>*> params() { return fc_.params(); }

  private:
    nn::L2Normalize<Real> norm_;
    nn::Dense<Real> fc_;
};

/// Softmax classification over training identities; the head is discarded.
/// Labels are class indices in [0, classes).
template <typename Real>
TrainedEmbedder<Real> train_embedder(const std::vector<Tensor<Real>>& images, const std::vector<std::size_t>& classes,
                                     std::size_t n_classes, const EmbedderTrainConfig& cfg, EmbedderArch arch) {
    if (images.empty() || images.size() != classes.size()) throw ValueError("train_embedder: bad dataset");
    if (cfg.epochs == 0 || cfg.batch == 0) throw ValueError("train_embedder: epochs and batch must be positive");
    Rng root(cfg.seed);
    Rng init_rng = root.fork("init");
    Rng rng = root.fork("batches");
    TrainedEmbedder<Real> out{Embedder<Real>(arch), {}};
    out.model.init(init_rng);
    ClassifierHead<Real> head(arch.dim, n_classes);
    head.init(init_rng);
    nn::Adam<Real> adam({cfg.lr});
    std::vector<std::size_t> order(images.size());
    std::size_t batch_index = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order.begin(), order.end());
        double total = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++batch_index) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            std::vector<Tensor<Real>> xs;
            std::vector<std::size_t> ys;
            for (std::size_t i = 0; i < n; ++i) {
                xs.push_back(images[order[start + i]]);
                ys.push_back(classes[order[start + i]]);
            }
            auto logits = head.forward(out.model.forward(stack(xs)));
            auto loss = nn::softmax_cross_entropy(logits, std::span<const std::size_t>(ys));
            if (!std::isfinite(static_cast<double>(loss.value)))
                throw NumericError("train_embedder: non-finite loss at batch " + std::to_string(batch_index));
            out.model.backward(head.backward(loss.grad));
            auto ps = out.model.params();
            for (auto* p : head.params()) ps.push_back(p);
            adam.step(ps);
            total += static_cast<double>(loss.value) * static_cast<double>(n);
        }
        out.epoch_loss.push_back(total / static_cast<double>(images.size()));
    }
    return out;
}

}  // namespace mode::recognition
