#pragma once

// Independent oracles and helpers shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mode/diffusion.hpp"
#include "mode/gate.hpp"
#include "mode/nn.hpp"
#include "mode/recognition.hpp"

namespace mode::testing {

inline double rel_error(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of `loss` in the scalar `x`; restores x.
template <typename F>
double central_difference(double& x, F&& loss, double h = 1e-6) {
    const double x0 = x;
    x = x0 + h;
    const double up = loss();
    x = x0 - h;
    const double down = loss();
    x = x0;
    return (up - down) / (2 * h);
}

/// Fourth-order five-point stencil; restores x.
template <typename F>
double five_point_difference(double& x, F&& loss, double h = 1e-4) {
    const double x0 = x;
    double f[4];
    const double off[4] = {2 * h, h, -h, -2 * h};
    for (int i = 0; i < 4; ++i) {
        x = x0 + off[i];
        f[i] = loss();
    }
    x = x0;
    return (8 * (f[1] - f[2]) - (f[0] - f[3])) / (12 * h);
}

inline Tensor<double> random_tensor(Rng& rng, const Shape& s, double scale = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t) v = scale * rng.normal();
    return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

struct GradCheck {
    double worst = 0;
    std::size_t checked = 0;
};

/// Checks d<c, model(x)>/d(param) and d/dx against central differences for
/// `samples` random coordinates of each parameter and of the input.
/// `fwd(record)` runs the model at the current values; `bwd(c)` back-propagates c
/// and returns the input gradient.
inline GradCheck check_gradients(const std::vector<nn::Param<double>*>& params, Tensor<double>& x,
                                 const std::function<Tensor<double>(bool)>& fwd,
                                 const std::function<Tensor<double>(const Tensor<double>&)>& bwd, Rng& rng,
                                 std::size_t samples = 6) {
    const auto y = fwd(true);
    const auto c = random_tensor(rng, y.shape());
    const auto dx = bwd(c);
    auto loss = [&] { return dot(c, fwd(false)); };
    GradCheck out;
    auto probe = [&](Tensor<double>& value, const Tensor<double>& grad) {
        for (std::size_t s = 0; s < std::min(samples, value.size()); ++s) {
            const std::size_t i = rng.below(value.size());
            const double num = central_difference(value[i], loss);
            out.worst = std::max(out.worst, rel_error(grad[i], num));
            ++out.checked;
        }
    };
    for (auto* p : params) {
        const Tensor<double> g = p->grad;
        probe(p->value, g);
    }
    probe(x, dx);
    return out;
}

// ---- metric oracles ---------------------------------------------------

struct BruteEer {
    double eer, acc, lo, hi;  // chosen threshold interval (lo, hi]
};

/// Exhaustive sweep: FAR/FRR only change at score values, so every real
/// threshold is represented by one of the distinct scores or +inf; a threshold
/// equal to score s stands for the whole interval (previous score, s].
inline BruteEer brute_force_eer(const std::vector<double>& genuine, const std::vector<double>& impostor) {
    std::vector<double> cands(genuine);
    cands.insert(cands.end(), impostor.begin(), impostor.end());
    std::sort(cands.begin(), cands.end());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
    cands.push_back(std::numeric_limits<double>::infinity());
    const double G = static_cast<double>(genuine.size()), I = static_cast<double>(impostor.size());
    BruteEer best{0, 0, 0, 0};
    double best_gap = std::numeric_limits<double>::infinity();
    double prev = -std::numeric_limits<double>::infinity();
    for (double tau : cands) {
        long long fa = 0, fr = 0;
        for (double s : impostor) fa += s >= tau;
        for (double s : genuine) fr += s < tau;
        const double gap = std::abs(static_cast<double>(fa) * G - static_cast<double>(fr) * I);
        if (gap < best_gap) {
            best_gap = gap;
            best = {(fa / I + fr / G) / 2, 100.0 * (1.0 - static_cast<double>(fa + fr) / (G + I)), prev, tau};
        }
        prev = tau;
    }
    return best;
}

/// Top-k by explicit sort of (score desc, index asc).
inline double brute_topk(const std::vector<std::vector<float>>& rows, const std::vector<std::size_t>& truth,
                         std::size_t k) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::vector<std::pair<float, std::size_t>> v;
        for (std::size_t j = 0; j < rows[i].size(); ++j) v.push_back({rows[i][j], j});
        std::sort(v.begin(), v.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        for (std::size_t r = 0; r < k; ++r)
            if (v[r].second == truth[i]) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(rows.size());
}

/// log(sum exp) evaluated term by term in long double.
inline double lse_cross_entropy(const std::vector<double>& logits, std::size_t label) {
    long double s = 0;
    for (double z : logits) s += std::exp(static_cast<long double>(z) - logits[label]);
    return static_cast<double>(std::log(s));
}

/// Product oracle for alpha-bar: an independent loop over the betas.
inline double alpha_bar_oracle(std::size_t T, double b0, double b1, std::size_t t) {
    double p = 1;
    for (std::size_t s = 1; s <= t; ++s) {
        const double beta = T == 1 ? b0 : b0 + (b1 - b0) * static_cast<double>(s - 1) / static_cast<double>(T - 1);
        p *= 1.0 - beta;
    }
    return p;
}

inline diffusion::DenoiserArch tiny_denoiser_arch(std::size_t T = 5) {
    diffusion::DenoiserArch a;
    a.channels = 1;
    a.height = 8;
    a.width = 8;
    a.base = 2;
    a.wide = 3;
    a.hidden = 4;
    a.T = T;
    return a;
}

inline recognition::EmbedderArch tiny_embedder_arch() {
    recognition::EmbedderArch a;
    a.height = 8;
    a.width = 8;
    a.base = 2;
    a.wide = 3;
    a.dim = 5;
    return a;
}

/// A fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("mode_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace mode::testing
