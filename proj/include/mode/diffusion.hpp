#pragma once

// DDPM core: linear noise schedule, forward noising, the epsilon-parameterised
// reverse step and the denoiser trained on the simple epsilon loss.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mode/adam.hpp"
#include "mode/checkpoint.hpp"
#include "mode/nn.hpp"
#include "mode/rng.hpp"

namespace mode::diffusion {

/// Per-timestep tables, indexed by t in [1, T] through the accessors.
struct NoiseSchedule {
    std::vector<double> beta, alpha, alpha_bar;

    std::size_t T() const noexcept { return beta.size(); }

    void check(std::size_t t) const {
        if (t < 1 || t > T())
            throw ValueError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T()) + "]");
    }
    double beta_at(std::size_t t) const { return check(t), beta[t - 1]; }
    double alpha_at(std::size_t t) const { return check(t), alpha[t - 1]; }
    double alpha_bar_at(std::size_t t) const { return check(t), alpha_bar[t - 1]; }
};

inline NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
    if (T < 1) throw ValueError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ValueError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.beta.resize(T);
    for (std::size_t i = 0; i < T; ++i)
        s.beta[i] = T == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                              static_cast<double>(T - 1);
    s.beta.back() = T == 1 ? beta_start : beta_end;
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    return s;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename Real>
Tensor<Real> q_sample(const Tensor<Real>& x0, std::size_t t, const Tensor<Real>& eps, const NoiseSchedule& s) {
    require_same_shape(x0.shape(), eps.shape(), "q_sample");
    const double ab = s.alpha_bar_at(t);
    return lincomb(static_cast<Real>(std::sqrt(ab)), x0, static_cast<Real>(std::sqrt(1.0 - ab)), eps);
}

/// mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
template <typename Real>
Tensor<Real> posterior_mean(const Tensor<Real>& x_t, std::size_t t, const Tensor<Real>& eps_hat,
                            const NoiseSchedule& s) {
    require_same_shape(x_t.shape(), eps_hat.shape(), "posterior_mean");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
    const double eps_coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
    return lincomb(static_cast<Real>(inv_sqrt_alpha), x_t, static_cast<Real>(-inv_sqrt_alpha * eps_coef), eps_hat);
}

struct DenoiserArch {
    std::size_t channels = 1;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t base = 8;     // channels at full resolution
    std::size_t wide = 16;    // channels at half resolution
    std::size_t hidden = 128; // bottleneck width
    std::size_t T = 50;       // rows of the timestep embedding
};

/// Small convolutional encoder-decoder predicting the noise of x_t.
///
///   full res:  conv(C->base) -> pool -> conv(base->wide) -> pool
///   bottleneck: dense(wide*h*w/16 -> hidden) + embed[t] -> dense(hidden -> wide*h*w/16)
///   decoder:   up + skip -> conv(wide->base) -> up + skip -> conv(base->base) -> conv1x1(base->C)
template <typename Real = float>
class Denoiser {
  public:
    Denoiser() : Denoiser(DenoiserArch{}) {}

    explicit Denoiser(DenoiserArch arch)
        : arch_(validated(arch)),
          conv1_("denoiser.conv1", arch.channels, arch.base, 3),
          act1_("denoiser.act1", nn::Activation::silu),
          pool1_("denoiser.pool1"),
          conv2_("denoiser.conv2", arch.base, arch.wide, 3),
          act2_("denoiser.act2", nn::Activation::silu),
          pool2_("denoiser.pool2"),
          flat_("denoiser.flat", {bottleneck_size(arch)}),
          dense1_("denoiser.dense1", bottleneck_size(arch), arch.hidden),
          act3_("denoiser.act3", nn::Activation::silu),
          dense2_("denoiser.dense2", arch.hidden, bottleneck_size(arch)),
          unflat_("denoiser.unflat", {arch.wide, arch.height / 4, arch.width / 4}),
          up2_("denoiser.up2"),
          conv3_("denoiser.conv3", arch.wide, arch.base, 3),
          act4_("denoiser.act4", nn::Activation::silu),
          up1_("denoiser.up1"),
          conv4_("denoiser.conv4", arch.base, arch.base, 3),
          act5_("denoiser.act5", nn::Activation::silu),
          conv5_("denoiser.conv5", arch.base, arch.channels, 1),
          temb_("denoiser.temb", Tensor<Real>({arch.T, arch.hidden})) {}

    const DenoiserArch& arch() const noexcept { return arch_; }
    Shape image_shape() const { return {arch_.channels, arch_.height, arch_.width}; }

    void init(Rng& rng) {
        conv1_.init(rng);
        conv2_.init(rng);
        dense1_.init(rng);
        dense2_.init(rng);
        conv3_.init(rng);
        conv4_.init(rng);
        conv5_.init(rng);
        nn::init_uniform(temb_, rng, 1.0);
    }

    std::vector<nn::Param<Real>*> params() {
        std::vector<nn::Param<Real>*> out;
        for (nn::Block<Real>* b : std::initializer_list<nn::Block<Real>*>{&conv1_, &conv2_, &dense1_, &dense2_,
                                                                          &conv3_, &conv4_, &conv5_})
            for (auto* p : b->params()) out.push_back(p);
        out.push_back(&temb_);
        return out;
    }

    /// x: [N, C, H, W], one timestep per sample.
    Tensor<Real> forward(const Tensor<Real>& x, std::span<const std::size_t> ts) {
        auto y = run(x, ts, true);
        pending_ = true;
        return y;
    }

    Tensor<Real> infer(const Tensor<Real>& x, std::span<const std::size_t> ts) const {
        return const_cast<Denoiser*>(this)->run(x, ts, false);
    }

    Tensor<Real> infer(const Tensor<Real>& x, std::size_t t) const {
        const std::vector<std::size_t> ts(x.rank() == 4 ? x.dim(0) : 1, t);
        if (x.rank() == 3) {
            Shape s{1};
            s.insert(s.end(), x.shape().begin(), x.shape().end());
            return infer(x.reshaped(s), ts).reshaped(x.shape());
        }
        return infer(x, ts);
    }

    /// Populates parameter gradients; returns d loss / d x.
    Tensor<Real> backward(const Tensor<Real>& grad_out) {
        if (!pending_) throw StateError("denoiser: backward without a pending forward");
        pending_ = false;
        auto g = conv5_.backward(grad_out);
        g = act5_.backward(g);
        g = conv4_.backward(g);            // d u1
        Tensor<Real> g_h1 = g;             // skip branch
        g = up1_.backward(g);
        g = act4_.backward(g);
        g = conv3_.backward(g);            // d u2
        Tensor<Real> g_h2 = g;
        g = up2_.backward(g);
        g = unflat_.backward(g);
        g = dense2_.backward(g);
        g = act3_.backward(g);             // d (dense1 + temb)
        temb_.zero_grad();
        const std::size_t hid = arch_.hidden;
        for (std::size_t i = 0; i < ts_.size(); ++i)
            for (std::size_t j = 0; j < hid; ++j) temb_.grad[(ts_[i] - 1) * hid + j] += g[i * hid + j];
        g = dense1_.backward(g);
        g = flat_.backward(g);
        g = pool2_.backward(g);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g_h2[i];
        g = act2_.backward(g);
        g = conv2_.backward(g);
        g = pool1_.backward(g);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g_h1[i];
        g = act1_.backward(g);
        return conv1_.backward(g);
    }

    std::vector<WeightRecord> records() { return to_records(params()); }
    void load(const std::vector<WeightRecord>& r) { assign_records(r, params()); }

  private:
    static DenoiserArch validated(const DenoiserArch& a) {
        if (a.channels == 0 || a.height == 0 || a.width == 0 || a.height % 4 || a.width % 4)
            throw ValueError("denoiser: image height and width must be positive multiples of 4");
        if (a.base == 0 || a.wide == 0 || a.hidden == 0 || a.T == 0)
            throw ValueError("denoiser: widths and T must be positive");
        return a;
    }
    static std::size_t bottleneck_size(const DenoiserArch& a) { return a.wide * (a.height / 4) * (a.width / 4); }

    template <typename B>
    static Tensor<Real> call(B& block, const Tensor<Real>& x, bool record) {
        return record ? block.forward(x) : block.infer(x);
    }

    Tensor<Real> run(const Tensor<Real>& x, std::span<const std::size_t> ts, bool record) {
        const Shape want{x.rank() ? x.dim(0) : 0, arch_.channels, arch_.height, arch_.width};
        if (x.shape() != want)
            throw ShapeError("denoiser: expected input " + to_string(want) + ", got " + to_string(x.shape()));
        if (ts.size() != x.dim(0)) throw ShapeError("denoiser: one timestep per sample required");
        for (auto t : ts)
            if (t < 1 || t > arch_.T) throw ValueError("denoiser: timestep " + std::to_string(t) + " out of range");

        auto h1 = call(act1_, call(conv1_, x, record), record);
        auto h2 = call(act2_, call(conv2_, call(pool1_, h1, record), record), record);
        auto z = call(dense1_, call(flat_, call(pool2_, h2, record), record), record);
        const std::size_t hid = arch_.hidden;
        for (std::size_t i = 0; i < ts.size(); ++i)
            for (std::size_t j = 0; j < hid; ++j) z[i * hid + j] += temb_.value[(ts[i] - 1) * hid + j];
        z = call(act3_, z, record);
        auto u2 = call(up2_, call(unflat_, call(dense2_, z, record), record), record);
        for (std::size_t i = 0; i < u2.size(); ++i) u2[i] += h2[i];
        auto u1 = call(up1_, call(act4_, call(conv3_, u2, record), record), record);
        for (std::size_t i = 0; i < u1.size(); ++i) u1[i] += h1[i];
        auto out = call(conv5_, call(act5_, call(conv4_, u1, record), record), record);
        if (record) ts_.assign(ts.begin(), ts.end());
        return out;
    }

    DenoiserArch arch_;
    nn::Conv2d<Real> conv1_;
    nn::Act<Real> act1_;
    nn::AvgPool2<Real> pool1_;
    nn::Conv2d<Real> conv2_;
    nn::Act<Real> act2_;
    nn::AvgPool2<Real> pool2_;
    nn::Reshape<Real> flat_;
    nn::Dense<Real> dense1_;
    nn::Act<Real> act3_;
    nn::Dense<Real> dense2_;
    nn::Reshape<Real> unflat_;
    nn::Upsample2<Real> up2_;
    nn::Conv2d<Real> conv3_;
    nn::Act<Real> act4_;
    nn::Upsample2<Real> up1_;
    nn::Conv2d<Real> conv4_;
    nn::Act<Real> act5_;
    nn::Conv2d<Real> conv5_;
    nn::Param<Real> temb_;
    std::vector<std::size_t> ts_;
    bool pending_ = false;
};

/// Reverse step with explicit noise z: mu + sqrt(beta_t) z, with z ignored at t = 1.
template <typename Real>
Tensor<Real> p_sample_with_noise(const Tensor<Real>& x_t, std::size_t t, const Tensor<Real>& eps_hat,
                                 const Tensor<Real>& z, const NoiseSchedule& s) {
    auto mu = posterior_mean(x_t, t, eps_hat, s);
    if (t == 1) return mu;
    require_same_shape(z.shape(), x_t.shape(), "p_sample noise");
    const auto sigma = static_cast<Real>(std::sqrt(s.beta_at(t)));
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += sigma * z[i];
    return mu;
}

/// Draws x_{t-1} for a batch [N, C, H, W]; sample i takes its noise from rngs[i].
template <typename Real>
Tensor<Real> p_sample_batch(const Denoiser<Real>& model, const Tensor<Real>& x_t, std::size_t t,
                            std::span<Rng> rngs, const NoiseSchedule& s) {
    s.check(t);
    if (rngs.size() != x_t.dim(0)) throw ShapeError("p_sample: one rng per sample required");
    auto eps_hat = model.infer(x_t, t);
    Tensor<Real> z(x_t.shape());
    if (t > 1)
        for (std::size_t i = 0; i < rngs.size(); ++i)
            for (auto& v : z.slice(i)) v = static_cast<Real>(rngs[i].normal());
    return p_sample_with_noise(x_t, t, eps_hat, z, s);
}

/// Single-image reverse step on [C, H, W].
template <typename Real>
Tensor<Real> p_sample(const Denoiser<Real>& model, const Tensor<Real>& x_t, std::size_t t, Rng& rng,
                      const NoiseSchedule& s) {
    Shape batched{1};
    batched.insert(batched.end(), x_t.shape().begin(), x_t.shape().end());
    return p_sample_batch(model, x_t.reshaped(batched), t, std::span<Rng>(&rng, 1), s).reshaped(x_t.shape());
}

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

template <typename Real>
struct TrainedDenoiser {
    Denoiser<Real> model;
    std::vector<double> epoch_loss;
};

/// The simple epsilon loss on one batch; used by training and by tests.
template <typename Real>
nn::LossGrad<Real> denoising_loss(Denoiser<Real>& model, const Tensor<Real>& x0, std::span<const std::size_t> ts,
                                  const Tensor<Real>& eps, const NoiseSchedule& s, bool record) {
    require_same_shape(x0.shape(), eps.shape(), "denoising_loss");
    Tensor<Real> xt(x0.shape());
    for (std::size_t i = 0; i < x0.dim(0); ++i) {
        const double ab = s.alpha_bar_at(ts[i]);
        const auto a = static_cast<Real>(std::sqrt(ab)), b = static_cast<Real>(std::sqrt(1.0 - ab));
        auto xs = x0.slice(i);
        auto es = eps.slice(i);
        auto out = xt.slice(i);
        for (std::size_t k = 0; k < xs.size(); ++k) out[k] = a * xs[k] + b * es[k];
    }
    auto pred = record ? model.forward(xt, ts) : model.infer(xt, ts);
    return nn::mean_squared_norm(pred, eps);
}

/// Minimises the mean squared epsilon error over uniform timesteps with Adam.
template <typename Real>
TrainedDenoiser<Real> train_denoiser(const std::vector<Tensor<Real>>& images, const NoiseSchedule& s,
                                     const TrainConfig& cfg, DenoiserArch arch) {
    if (images.empty()) throw ValueError("train_denoiser: empty dataset");
    if (cfg.epochs == 0 || cfg.batch == 0) throw ValueError("train_denoiser: epochs and batch must be positive");
    arch.T = s.T();
    Rng root(cfg.seed);
    Rng init_rng = root.fork("init");
    Rng rng = root.fork("batches");
    TrainedDenoiser<Real> out{Denoiser<Real>(arch), {}};
    out.model.init(init_rng);
    const Shape img = out.model.image_shape();
    for (const auto& im : images) require_same_shape(im.shape(), img, "train_denoiser image");

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
            for (std::size_t i = 0; i < n; ++i) xs.push_back(images[order[start + i]]);
            auto x0 = stack(xs);
            std::vector<std::size_t> ts(n);
            for (auto& t : ts) t = 1 + rng.below(s.T());
            auto eps = sample_standard_normal<Real>(rng, x0.shape());
            auto loss = denoising_loss(out.model, x0, ts, eps, s, true);
            if (!std::isfinite(static_cast<double>(loss.value)))
                throw NumericError("train_denoiser: non-finite loss at batch " + std::to_string(batch_index));
            out.model.backward(loss.grad);
            adam.step(out.model.params());
            total += static_cast<double>(loss.value) * static_cast<double>(n);
        }
        out.epoch_loss.push_back(total / static_cast<double>(images.size()));
    }
    return out;
}

}  // namespace mode::diffusion
