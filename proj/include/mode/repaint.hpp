#pragma once

// Mask-conditioned inpainting: known pixels are re-noised from the occluded
// original, unknown pixels come from the reverse diffusion step, and blocks of
// j steps are traversed r times with forward re-noising in between.

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "mode/diffusion.hpp"

namespace mode::repaint {

/// H x W binary field, 1 = known pixel, 0 = occluded.
class OcclusionMask {
  public:
    OcclusionMask() = default;
    OcclusionMask(std::size_t height, std::size_t width, std::uint8_t fill = 1)
        : h_(height), w_(width), known_(height * width, fill) {
        if (fill > 1) throw ValueError("mask values must be 0 or 1");
    }
    OcclusionMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> known)
        : h_(height), w_(width), known_(std::move(known)) {
        if (known_.size() != h_ * w_) throw ShapeError("mask: value count does not match H x W");
        for (auto v : known_)
            if (v > 1) throw ValueError("mask values must be 0 or 1");
    }

    std::size_t height() const noexcept { return h_; }
    std::size_t width() const noexcept { return w_; }
    std::size_t size() const noexcept { return known_.size(); }
    bool known(std::size_t y, std::size_t x) const { return known_[y * w_ + x] != 0; }
    bool known(std::size_t i) const { return known_[i] != 0; }
    void set(std::size_t y, std::size_t x, bool k) { known_[y * w_ + x] = k ? 1 : 0; }
    const std::vector<std::uint8_t>& values() const noexcept { return known_; }

    double occluded_fraction() const {
        return known_.empty() ? 0.0
                              : static_cast<double>(std::count(known_.begin(), known_.end(), 0)) /
                                    static_cast<double>(known_.size());
    }

    /// Throws unless the image is [C, H, W] with matching H and W.
    void check_image(const Shape& image) const {
        if (image.size() != 3 || image[1] != h_ || image[2] != w_)
            throw ShapeError("mask " + std::to_string(h_) + "x" + std::to_string(w_) +
                             " does not match image " + to_string(image));
    }

    friend bool operator==(const OcclusionMask&, const OcclusionMask&) = default;

  private:
    std::size_t h_ = 0, w_ = 0;
    std::vector<std::uint8_t> known_;
};

enum class Direction { denoise, renoise };

/// denoise: x_t -> x_{t-1} with t = from.  renoise: x_{to-1} -> x_to with to = from + 1.
struct PlanStep {
    std::size_t from;
    std::size_t to;
    Direction direction;

    friend bool operator==(const PlanStep&, const PlanStep&) = default;
};

struct RepaintPlan {
    std::size_t T = 0, r = 0, j = 0;
    std::vector<PlanStep> steps;

    std::size_t count(Direction d) const {
        return static_cast<std::size_t>(
            std::count_if(steps.begin(), steps.end(), [d](const PlanStep& s) { return s.direction == d; }));
    }
};

/// Block-wise schedule: for each block of j timesteps from T down, j denoise
/// steps then j renoise steps, (r - 1) times, then j final denoise steps.
inline RepaintPlan build_plan(std::size_t T, std::size_t r, std::size_t j) {
    if (T < 1 || r < 1 || j < 1 || j > T) throw ValueError("build_plan: need T >= 1, r >= 1, 1 <= j <= T");
    if (T % j != 0)
        throw ValueError("build_plan: jump size " + std::to_string(j) + " does not divide T = " + std::to_string(T));
    RepaintPlan plan{T, r, j, {}};
    for (std::size_t top = T; top > 0; top -= j) {
        for (std::size_t pass = 0; pass < r; ++pass) {
            for (std::size_t t = top; t > top - j; --t) plan.steps.push_back({t, t - 1, Direction::denoise});
            if (pass + 1 < r)
                for (std::size_t t = top - j; t < top; ++t) plan.steps.push_back({t, t + 1, Direction::renoise});
        }
    }
    return plan;
}

/// One forward step x_{t-1} -> x_t with explicit noise.
template <typename Real>
Tensor<Real> renoise_with_noise(const Tensor<Real>& x_prev, std::size_t t, const Tensor<Real>& eps,
                                const diffusion::NoiseSchedule& s) {
    const double b = s.beta_at(t);
    return lincomb(static_cast<Real>(std::sqrt(1.0 - b)), x_prev, static_cast<Real>(std::sqrt(b)), eps);
}

template <typename Real>
Tensor<Real> renoise(const Tensor<Real>& x_prev, std::size_t t, Rng& rng, const diffusion::NoiseSchedule& s) {
    s.check(t);
    return renoise_with_noise(x_prev, t, sample_standard_normal<Real>(rng, x_prev.shape()), s);
}

/// m * known + (1 - m) * unknown on a single [C, H, W] image.
template <typename Real>
Tensor<Real> composite(const Tensor<Real>& known, const Tensor<Real>& unknown, const OcclusionMask& mask) {
    require_same_shape(known.shape(), unknown.shape(), "composite");
    mask.check_image(known.shape());
    Tensor<Real> out(known.shape());
    const std::size_t plane = mask.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.known(i % plane) ? known[i] : unknown[i];
    return out;
}

/// Single composite step with explicit noise for both branches: known pixels
/// ~ N(sqrt(abar_t) x0, (1 - abar_t) I), unknown pixels from the reverse step.
template <typename Real>
Tensor<Real> composite_step_with_noise(const Tensor<Real>& x_known_src, const OcclusionMask& mask,
                                       const Tensor<Real>& x_t, std::size_t t, const Tensor<Real>& eps_hat,
                                       const Tensor<Real>& z_unknown, const Tensor<Real>& eps_known,
                                       const diffusion::NoiseSchedule& s) {
    require_same_shape(x_known_src.shape(), x_t.shape(), "composite_step");
    mask.check_image(x_t.shape());
    auto unknown = diffusion::p_sample_with_noise(x_t, t, eps_hat, z_unknown, s);
    auto known = diffusion::q_sample(x_known_src, t, eps_known, s);
    return composite(known, unknown, mask);
}

namespace detail {

template <typename Real>
void check_batch(const Tensor<Real>& xs, std::span<const OcclusionMask> masks, std::size_t rngs) {
    if (xs.rank() != 4) throw ShapeError("repaint: expected [N, C, H, W], got " + to_string(xs.shape()));
    if (masks.size() != xs.dim(0) || rngs != xs.dim(0))
        throw ShapeError("repaint: need one mask and one rng per image");
    const Shape img(xs.shape().begin() + 1, xs.shape().end());
    for (const auto& m : masks) m.check_image(img);
}

}  // namespace detail

/// Batched composite step. Per sample, the reverse-step noise is drawn before
/// the known-branch noise, so an all-zero mask reproduces p_sample exactly.
template <typename Real>
Tensor<Real> composite_step_batch(const Tensor<Real>& x_known_src, std::span<const OcclusionMask> masks,
                                  const Tensor<Real>& x_t, std::size_t t, const diffusion::Denoiser<Real>& model,
                                  std::span<Rng> rngs, const diffusion::NoiseSchedule& s) {
    detail::check_batch(x_t, masks, rngs.size());
    require_same_shape(x_known_src.shape(), x_t.shape(), "composite_step");
    s.check(t);
    auto eps_hat = model.infer(x_t, t);
    const std::size_t n = x_t.dim(0), per = x_t.size() / n, plane = masks[0].size();
    const auto sigma = static_cast<Real>(std::sqrt(s.beta_at(t)));
    const double ab = s.alpha_bar_at(t);
    const auto ka = static_cast<Real>(std::sqrt(ab)), kb = static_cast<Real>(std::sqrt(1.0 - ab));
    auto mu = diffusion::posterior_mean(x_t, t, eps_hat, s);
    Tensor<Real> out(x_t.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < per; ++k) {
            Real u = mu[i * per + k];
            if (t > 1) u += sigma * static_cast<Real>(rngs[i].normal());
            out[i * per + k] = u;
        }
        for (std::size_t k = 0; k < per; ++k) {
            const Real known = ka * x_known_src[i * per + k] + kb * static_cast<Real>(rngs[i].normal());
            if (masks[i].known(k % plane)) out[i * per + k] = known;
        }
    }
    return out;
}

template <typename Real>
Tensor<Real> composite_step(const Tensor<Real>& x_known_src, const OcclusionMask& mask, const Tensor<Real>& x_t,
                            std::size_t t, const diffusion::Denoiser<Real>& model, Rng& rng,
                            const diffusion::NoiseSchedule& s) {
    mask.check_image(x_t.shape());
    Shape b{1};
    b.insert(b.end(), x_t.shape().begin(), x_t.shape().end());
    return composite_step_batch(x_known_src.reshaped(b), std::span<const OcclusionMask>(&mask, 1),
                                x_t.reshaped(b), t, model, std::span<Rng>(&rng, 1), s)
        .reshaped(x_t.shape());
}

/// Zero-fills occluded pixels: the known-branch source x0^d.
template <typename Real>
Tensor<Real> known_source(const Tensor<Real>& image, const OcclusionMask& mask) {
    mask.check_image(image.shape());
    Tensor<Real> out = image;
    const std::size_t plane = mask.size();
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!mask.known(i % plane)) out[i] = Real(0);
    return out;
}

/// Repaints a batch of occluded images [N, C, H, W]; image i uses masks[i]
/// and draws all of its randomness from rngs[i].
template <typename Real>
Tensor<Real> repaint_batch(const Tensor<Real>& x_occluded, std::span<const OcclusionMask> masks,
                           const diffusion::Denoiser<Real>& model, const RepaintPlan& plan, std::span<Rng> rngs,
                           const diffusion::NoiseSchedule& s) {
    detail::check_batch(x_occluded, masks, rngs.size());
    if (plan.T != s.T()) throw ValueError("repaint: plan horizon does not match the schedule");
    const std::size_t n = x_occluded.dim(0), per = x_occluded.size() / n, plane = masks[0].size();

    Tensor<Real> src(x_occluded.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < per; ++k)
            src[i * per + k] = masks[i].known(k % plane) ? x_occluded[i * per + k] : Real(0);

    Tensor<Real> x(x_occluded.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (auto& v : x.slice(i)) v = static_cast<Real>(rngs[i].normal());

    for (const auto& step : plan.steps) {
        if (step.direction == Direction::denoise) {
            x = composite_step_batch(src, masks, x, step.from, model, rngs, s);
        } else {
            const double b = s.beta_at(step.to);
            const auto a = static_cast<Real>(std::sqrt(1.0 - b)), c = static_cast<Real>(std::sqrt(b));
            for (std::size_t i = 0; i < n; ++i)
                for (auto& v : x.slice(i)) v = a * v + c * static_cast<Real>(rngs[i].normal());
        }
    }

    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < per; ++k) {
            Real& v = x[i * per + k];
            v = masks[i].known(k % plane) ? x_occluded[i * per + k] : std::clamp(v, Real(-1), Real(1));
        }
    return x;
}

template <typename Real>
Tensor<Real> repaint(const Tensor<Real>& x_occluded, const OcclusionMask& mask, const diffusion::Denoiser<Real>& model,
                     const RepaintPlan& plan, Rng& rng, const diffusion::NoiseSchedule& s) {
    mask.check_image(x_occluded.shape());
    Shape b{1};
    b.insert(b.end(), x_occluded.shape().begin(), x_occluded.shape().end());
    return repaint_batch(x_occluded.reshaped(b), std::span<const OcclusionMask>(&mask, 1), model, plan,
                         std::span<Rng>(&rng, 1), s)
        .reshaped(x_occluded.shape());
}

}  // namespace mode::repaint
