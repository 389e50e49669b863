#pragma once

// Differentiable building blocks with hand-written backward passes.
//
// Activations are batched along the leading axis. Every per-sample kernel runs
// with the same matrix extents regardless of batch size, so a sample produces
// bit-identical output whether it is evaluated alone or inside a batch.

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "mode/rng.hpp"
#include "mode/tensor.hpp"

namespace mode::nn {

template <typename Real>
using MatrixMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Real>
using ConstMatrixMap =
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Real>
using VectorMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
template <typename Real>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;

template <typename Real>
struct Param {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;

    Param() = default;
    Param(std::string n, Tensor<Real> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(Real(0)); }
};

template <typename Real>
void init_uniform(Param<Real>& p, Rng& rng, double bound) {
    for (auto& v : p.value) v = static_cast<Real>(rng.uniform(-bound, bound));
}

template <typename Real>
class Block {
  public:
    explicit Block(std::string name) : name_(std::move(name)) {}
    virtual ~Block() = default;
    Block(const Block&) = default;
    Block& operator=(const Block&) = default;

    const std::string& name() const noexcept { return name_; }

    /// Forward pass that records what backward needs.
    Tensor<Real> forward(const Tensor<Real>& x) {
        auto y = run(x, true);
        pending_ = true;
        return y;
    }

    /// Forward pass without recording; safe to call concurrently.
    Tensor<Real> infer(const Tensor<Real>& x) const { return const_cast<Block*>(this)->run(x, false); }

    /// Consumes the recorded forward. Parameter gradients are overwritten, not
    /// accumulated; a second backward without a new forward is rejected.
    Tensor<Real> backward(const Tensor<Real>& grad_out) {
        if (!pending_) throw StateError("block '" + name_ + "': backward without a pending forward");
        pending_ = false;
        return run_backward(grad_out);
    }

    bool pending() const noexcept { return pending_; }

    virtual std::vector<Param<Real>*> params() { return {}; }
    virtual std::unique_ptr<Block> clone() const = 0;

  protected:
    // `record` is false for infer(); implementations must not touch caches then.
    virtual Tensor<Real> run(const Tensor<Real>& x, bool record) = 0;
    virtual Tensor<Real> run_backward(const Tensor<Real>& grad_out) = 0;

    [[noreturn]] void shape_error(const std::string& what, const Shape& got) const {
        throw ShapeError("block '" + name_ + "': " + what + ", got " + to_string(got));
    }

  private:
    std::string name_;
    bool pending_ = false;
};

template <typename Real>
class Identity final : public Block<Real> {
  public:
    explicit Identity(std::string name = "identity") : Block<Real>(std::move(name)) {}
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<Identity>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool) override { return x; }
    Tensor<Real> run_backward(const Tensor<Real>& g) override { return g; }
};

/// y = W x + b on inputs of shape [N, in].
template <typename Real>
class Dense final : public Block<Real> {
  public:
    Dense(std::string name, std::size_t in, std::size_t out)
        : Block<Real>(name), in_(in), out_(out),
          weight_(name + ".W", Tensor<Real>({out, in})), bias_(name + ".b", Tensor<Real>({out})) {}

    void init(Rng& rng) {
        init_uniform(weight_, rng, std::sqrt(3.0 / static_cast<double>(in_)));
        bias_.value.fill(Real(0));
    }

    std::size_t in_features() const noexcept { return in_; }
    std::size_t out_features() const noexcept { return out_; }
    Param<Real>& weight() noexcept { return weight_; }
    Param<Real>& bias() noexcept { return bias_; }

    std::vector<Param<Real>*> params() override { return {&weight_, &bias_}; }
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<Dense>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        if (x.rank() != 2 || x.dim(1) != in_)
            this->shape_error("expected [N," + std::to_string(in_) + "]", x.shape());
        const std::size_t n = x.dim(0);
        Tensor<Real> y({n, out_});
        ConstMatrixMap<Real> w(weight_.value.data(), out_, in_);
        ConstVectorMap<Real> b(bias_.value.data(), out_);
        for (std::size_t i = 0; i < n; ++i) {
            VectorMap<Real> yi(y.data() + i * out_, out_);
            yi.noalias() = w * ConstVectorMap<Real>(x.data() + i * in_, in_);
            yi += b;
        }
        if (record) input_ = x;
        return y;
    }

    Tensor<Real> run_backward(const Tensor<Real>& g) override {
        const std::size_t n = input_.dim(0);
        require_same_shape(g.shape(), Shape{n, out_}, this->name() + " backward");
        weight_.zero_grad();
        bias_.zero_grad();
        MatrixMap<Real> dw(weight_.grad.data(), out_, in_);
        VectorMap<Real> db(bias_.grad.data(), out_);
        ConstMatrixMap<Real> w(weight_.value.data(), out_, in_);
        Tensor<Real> dx({n, in_});
        for (std::size_t i = 0; i < n; ++i) {
            ConstVectorMap<Real> gi(g.data() + i * out_, out_);
            ConstVectorMap<Real> xi(input_.data() + i * in_, in_);
            dw.noalias() += gi * xi.transpose();
            db += gi;
            VectorMap<Real>(dx.data() + i * in_, in_).noalias() = w.transpose() * gi;
        }
        input_ = {};
        return dx;
    }

  private:
    std::size_t in_, out_;
    Param<Real> weight_, bias_;
    Tensor<Real> input_;
};

/// Square-kernel 2-D convolution, stride 1, zero "same" padding, on [N,C,H,W].
template <typename Real>
class Conv2d final : public Block<Real> {
  public:
    Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
        : Block<Real>(name), cin_(in_channels), cout_(out_channels), k_(kernel),
          weight_(name + ".W", Tensor<Real>({out_channels, in_channels, kernel, kernel})),
          bias_(name + ".b", Tensor<Real>({out_channels})) {
        if (kernel % 2 == 0) throw ValueError("block '" + name + "': kernel size must be odd");
    }

    void init(Rng& rng) {
        init_uniform(weight_, rng, std::sqrt(3.0 / static_cast<double>(cin_ * k_ * k_)));
        bias_.value.fill(Real(0));
    }

    Param<Real>& weight() noexcept { return weight_; }
    Param<Real>& bias() noexcept { return bias_; }
    std::vector<Param<Real>*> params() override { return {&weight_, &bias_}; }
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<Conv2d>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        if (x.rank() != 4 || x.dim(1) != cin_)
            this->shape_error("expected [N," + std::to_string(cin_) + ",H,W]", x.shape());
        const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
        const std::size_t rows = cin_ * k_ * k_;
        Tensor<Real> y({n, cout_, h, w});
        AlignedVector<Real> cols(rows * hw);
        ConstMatrixMap<Real> wm(weight_.value.data(), cout_, rows);
        ConstVectorMap<Real> b(bias_.value.data(), cout_);
        if (record) cols_cache_.assign(n * rows * hw, Real(0));
        for (std::size_t i = 0; i < n; ++i) {
            im2col(x.slice(i), h, w, cols);
            MatrixMap<Real> yi(y.data() + i * cout_ * hw, cout_, hw);
            yi.noalias() = wm * ConstMatrixMap<Real>(cols.data(), rows, hw);
            yi.colwise() += b;
            if (record) std::copy(cols.begin(), cols.end(), cols_cache_.begin() + i * rows * hw);
        }
        if (record) in_shape_ = x.shape();
        return y;
    }

    Tensor<Real> run_backward(const Tensor<Real>& g) override {
        const std::size_t n = in_shape_[0], h = in_shape_[2], w = in_shape_[3], hw = h * w;
        const std::size_t rows = cin_ * k_ * k_;
        require_same_shape(g.shape(), Shape{n, cout_, h, w}, this->name() + " backward");
        weight_.zero_grad();
        bias_.zero_grad();
        MatrixMap<Real> dw(weight_.grad.data(), cout_, rows);
        VectorMap<Real> db(bias_.grad.data(), cout_);
        ConstMatrixMap<Real> wm(weight_.value.data(), cout_, rows);
        Tensor<Real> dx(in_shape_);
        AlignedVector<Real> dcols(rows * hw);
        for (std::size_t i = 0; i < n; ++i) {
            ConstMatrixMap<Real> gi(g.data() + i * cout_ * hw, cout_, hw);
            ConstMatrixMap<Real> ci(cols_cache_.data() + i * rows * hw, rows, hw);
            dw.noalias() += gi * ci.transpose();
            db += gi.rowwise().sum();
            MatrixMap<Real>(dcols.data(), rows, hw).noalias() = wm.transpose() * gi;
            col2im(dcols, h, w, dx.slice(i));
        }
        cols_cache_.clear();
        cols_cache_.shrink_to_fit();
        return dx;
    }

  private:
    void im2col(std::span<const Real> img, std::size_t h, std::size_t w, AlignedVector<Real>& cols) const {
        const long pad = static_cast<long>(k_ / 2);
        std::size_t r = 0;
        for (std::size_t c = 0; c < cin_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx, ++r) {
                    Real* dst = cols.data() + r * h * w;
                    for (std::size_t y = 0; y < h; ++y) {
                        const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                        for (std::size_t x = 0; x < w; ++x) {
                            const long sx = static_cast<long>(x) + static_cast<long>(kx) - pad;
                            dst[y * w + x] = (sy < 0 || sx < 0 || sy >= static_cast<long>(h) ||
                                              sx >= static_cast<long>(w))
                                                 ? Real(0)
                                                 : img[(c * h + sy) * w + sx];
                        }
                    }
                }
    }

    void col2im(const AlignedVector<Real>& cols, std::size_t h, std::size_t w, std::span<Real> img) const {
        const long pad = static_cast<long>(k_ / 2);
        std::size_t r = 0;
        for (std::size_t c = 0; c < cin_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx, ++r) {
                    const Real* src = cols.data() + r * h * w;
                    for (std::size_t y = 0; y < h; ++y) {
                        const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                        if (sy < 0 || sy >= static_cast<long>(h)) continue;
                        for (std::size_t x = 0; x < w; ++x) {
                            const long sx = static_cast<long>(x) + static_cast<long>(kx) - pad;
                            if (sx < 0 || sx >= static_cast<long>(w)) continue;
                            img[(c * h + sy) * w + sx] += src[y * w + x];
                        }
                    }
                }
    }

    std::size_t cin_, cout_, k_;
    Param<Real> weight_, bias_;
    AlignedVector<Real> cols_cache_;
    Shape in_shape_;
};

enum class Activation { silu, tanh };

template <typename Real>
class Act final : public Block<Real> {
  public:
    Act(std::string name, Activation kind) : Block<Real>(std::move(name)), kind_(kind) {}
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<Act>(*this); }

    static Real apply(Activation kind, Real v) {
        if (kind == Activation::tanh) return std::tanh(v);
        return v / (Real(1) + std::exp(-v));
    }
    static Real derivative(Activation kind, Real v) {
        if (kind == Activation::tanh) {
            const Real t = std::tanh(v);
            return Real(1) - t * t;
        }
        const Real s = Real(1) / (Real(1) + std::exp(-v));
        return s * (Real(1) + v * (Real(1) - s));
    }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        Tensor<Real> y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = apply(kind_, x[i]);
        if (record) input_ = x;
        return y;
    }
    Tensor<Real> run_backward(const Tensor<Real>& g) override {
        require_same_shape(g.shape(), input_.shape(), this->name() + " backward");
        Tensor<Real> dx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * derivative(kind_, input_[i]);
        input_ = {};
        return dx;
    }

  private:
    Activation kind_;
    Tensor<Real> input_;
};

/// 2x2 average pooling on [N,C,H,W] with even H, W.
template <typename Real>
class AvgPool2 final : public Block<Real> {
  public:
    explicit AvgPool2(std::string name) : Block<Real>(std::move(name)) {}
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<AvgPool2>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
            this->shape_error("expected [N,C,H,W] with even H and W", x.shape());
        const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
        Tensor<Real> y({x.dim(0), x.dim(1), h / 2, w / 2});
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t yy = 0; yy < h / 2; ++yy)
                for (std::size_t xx = 0; xx < w / 2; ++xx) {
                    const Real* s = x.data() + p * h * w + 2 * yy * w + 2 * xx;
                    y[(p * (h / 2) + yy) * (w / 2) + xx] = Real(0.25) * (s[0] + s[1] + s[w] + s[w + 1]);
                }
        if (record) in_shape_ = x.shape();
        return y;
    }
    Tensor<Real> run_backward(const Tensor<Real>& g) override {
        const std::size_t planes = in_shape_[0] * in_shape_[1], h = in_shape_[2], w = in_shape_[3];
        require_same_shape(g.shape(), Shape{in_shape_[0], in_shape_[1], h / 2, w / 2},
                           this->name() + " backward");
        Tensor<Real> dx(in_shape_);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t yy = 0; yy < h / 2; ++yy)
                for (std::size_t xx = 0; xx < w / 2; ++xx) {
                    const Real v = Real(0.25) * g[(p * (h / 2) + yy) * (w / 2) + xx];
                    Real* d = dx.data() + p * h * w + 2 * yy * w + 2 * xx;
                    d[0] = v;
                    d[1] = v;
                    d[w] = v;
                    d[w + 1] = v;
                }
        return dx;
    }

  private:
    Shape in_shape_;
};

/// Nearest-neighbour 2x upsampling on [N,C,H,W].
template <typename Real>
class Upsample2 final : public Block<Real> {
  public:
    explicit Upsample2(std::string name) : Block<Real>(std::move(name)) {}
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<Upsample2>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        if (x.rank() != 4) this->shape_error("expected [N,C,H,W]", x.shape());
        const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
        Tensor<Real> y({x.dim(0), x.dim(1), 2 * h, 2 * w});
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t yy = 0; yy < 2 * h; ++yy)
                for (std::size_t xx = 0; xx < 2 * w; ++xx)
                    y[(p * 2 * h + yy) * 2 * w + xx] = x[(p * h + yy / 2) * w + xx / 2];
        if (record) in_shape_ = x.shape();
        return y;
    }
    Tensor<Real> run_backward(const Tensor<Real>& g) override {
        const std::size_t planes = in_shape_[0] * in_shape_[1], h = in_shape_[2], w = in_shape_[3];
        require_same_shape(g.shape(), Shape{in_shape_[0], in_shape_[1], 2 * h, 2 * w},
                           this->name() + " backward");
        Tensor<Real> dx(in_shape_);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t yy = 0; yy < 2 * h; ++yy)
                for (std::size_t xx = 0; xx < 2 * w; ++xx)
                    dx[(p * h + yy / 2) * w + xx / 2] += g[(p * 2 * h + yy) * 2 * w + xx];
        return dx;
    }

  private:
    Shape in_shape_;
};

/// Reshapes the per-sample part of [N, ...] to `target` (leading N kept).
template <typename Real>
class Reshape final : public Block<Real> {
  public:
    Reshape(std::string name, Shape target) : Block<Real>(std::move(name)), target_(std::move(target)) {}
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<Reshape>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        if (x.rank() < 1 || x.size() != x.dim(0) * volume(target_))
            this->shape_error("expected " + std::to_string(volume(target_)) + " values per sample",
                              x.shape());
        Shape s{x.dim(0)};
        s.insert(s.end(), target_.begin(), target_.end());
        if (record) in_shape_ = x.shape();
        return x.reshaped(std::move(s));
    }
    Tensor<Real> run_backward(const Tensor<Real>& g) override { return g.reshaped(in_shape_); }

  private:
    Shape target_;
    Shape in_shape_;
};

/// Row-wise L2 normalisation of [N, d].
template <typename Real>
class L2Normalize final : public Block<Real> {
  public:
    explicit L2Normalize(std::string name) : Block<Real>(std::move(name)) {}
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<L2Normalize>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        if (x.rank() != 2) this->shape_error("expected [N,d]", x.shape());
        const std::size_t n = x.dim(0), d = x.dim(1);
        Tensor<Real> y(x.shape());
        std::vector<Real> norms(n);
        for (std::size_t i = 0; i < n; ++i) {
            Real s = 0;
            for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
            const Real nrm = std::sqrt(s);
            if (!(nrm > Real(0))) throw NumericError("block '" + this->name() + "': zero-norm row");
            norms[i] = nrm;
            for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] / nrm;
        }
        if (record) {
            output_ = y;
            norms_ = std::move(norms);
        }
        return y;
    }
    Tensor<Real> run_backward(const Tensor<Real>& g) override {
        require_same_shape(g.shape(), output_.shape(), this->name() + " backward");
        const std::size_t n = g.dim(0), d = g.dim(1);
        Tensor<Real> dx(g.shape());
        for (std::size_t i = 0; i < n; ++i) {
            Real dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += output_[i * d + j] * g[i * d + j];
            for (std::size_t j = 0; j < d; ++j)
                dx[i * d + j] = (g[i * d + j] - output_[i * d + j] * dot) / norms_[i];
        }
        output_ = {};
        return dx;
    }

  private:
    Tensor<Real> output_;
    std::vector<Real> norms_;
};

/// Chain of blocks; owns deep copies so models have value semantics.
template <typename Real>
class Sequential final : public Block<Real> {
  public:
    explicit Sequential(std::string name = "seq") : Block<Real>(std::move(name)) {}
    Sequential(const Sequential& other) : Block<Real>(other) {
        for (const auto& b : other.blocks_) blocks_.push_back(b->clone());
    }
    Sequential& operator=(const Sequential& other) {
        if (this != &other) {
            Block<Real>::operator=(other);
            blocks_.clear();
            for (const auto& b : other.blocks_) blocks_.push_back(b->clone());
        }
        return *this;
    }
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    template <typename B>
    B& add(B block) {
        auto p = std::make_unique<B>(std::move(block));
        B& ref = *p;
        blocks_.push_back(std::move(p));
        return ref;
    }

    std::size_t size() const noexcept { return blocks_.size(); }
    Block<Real>& at(std::size_t i) { return *blocks_.at(i); }

    std::vector<Param<Real>*> params() override {
        std::vector<Param<Real>*> out;
        for (auto& b : blocks_)
            for (auto* p : b->params()) out.push_back(p);
        return out;
    }
    std::unique_ptr<Block<Real>> clone() const override { return std::make_unique<Sequential>(*this); }

  protected:
    Tensor<Real> run(const Tensor<Real>& x, bool record) override {
        Tensor<Real> h = x;
        for (auto& b : blocks_) h = record ? b->forward(h) : b->infer(h);
        return h;
    }
    Tensor<Real> run_backward(const Tensor<Real>& g) override {
        Tensor<Real> d = g;
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) d = (*it)->backward(d);
        return d;
    }

  private:
    std::vector<std::unique_ptr<Block<Real>>> blocks_;
};

template <typename Real>
void check_unique_names(const std::vector<Param<Real>*>& params) {
    std::set<std::string> seen;
    for (const auto* p : params)
        if (!seen.insert(p->name).second) throw ValueError("duplicate parameter name '" + p->name + "'");
}

/// Copies parameter values between two models of identical structure,
/// converting precision on the way.
template <typename To, typename From>
void copy_params(const std::vector<Param<From>*>& src, const std::vector<Param<To>*>& dst) {
    if (src.size() != dst.size()) throw ShapeError("copy_params: parameter count mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
        require_same_shape(src[i]->value.shape(), dst[i]->value.shape(), "copy_params " + src[i]->name);
        dst[i]->value = src[i]->value.template cast<To>();
        dst[i]->grad = Tensor<To>(dst[i]->value.shape());
    }
}

// Losses return the scalar and its gradient with respect to the prediction.

template <typename Real>
struct LossGrad {
    Real value;
    Tensor<Real> grad;
};

/// Mean over the batch of the per-sample squared L2 norm of (pred - target).
template <typename Real>
LossGrad<Real> mean_squared_norm(const Tensor<Real>& pred, const Tensor<Real>& target) {
    require_same_shape(pred.shape(), target.shape(), "mean_squared_norm");
    const std::size_t n = pred.dim(0);
    LossGrad<Real> out{Real(0), Tensor<Real>(pred.shape())};
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const Real d = pred[i] - target[i];
        acc += static_cast<double>(d) * d;
        out.grad[i] = Real(2) * d / static_cast<Real>(n);
    }
    out.value = static_cast<Real>(acc / static_cast<double>(n));
    return out;
}

/// Mean softmax cross-entropy of logits [N, K] against integer labels.
template <typename Real>
LossGrad<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ShapeError("softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    LossGrad<Real> out{Real(0), Tensor<Real>(logits.shape())};
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) throw ValueError("softmax_cross_entropy: label out of range");
        const Real* z = logits.data() + i * k;
        const Real mx = *std::max_element(z, z + k);
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j] - mx));
        const double lse = static_cast<double>(mx) + std::log(s);
        acc += lse - static_cast<double>(z[labels[i]]);
        for (std::size_t j = 0; j < k; ++j) {
            const double p = std::exp(static_cast<double>(z[j]) - lse);
            out.grad[i * k + j] = static_cast<Real>((p - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n));
        }
    }
    out.value = static_cast<Real>(acc / static_cast<double>(n));
    return out;
}

}  // namespace mode::nn
