#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mode/nn.hpp"

namespace mode::nn {

struct AdamConfig {
    double lr = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created on the first step
/// and bound to parameters by position.
template <typename Real>
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg.lr > 0) || !(cfg.beta1 >= 0 && cfg.beta1 < 1) || !(cfg.beta2 >= 0 && cfg.beta2 < 1) ||
            !(cfg.eps > 0))
            throw ValueError("Adam: invalid hyper-parameters");
    }

    std::uint64_t step_count() const noexcept { return step_; }
    const AdamConfig& config() const noexcept { return cfg_; }
    const std::vector<Tensor<Real>>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor<Real>>& second_moments() const noexcept { return v_; }

    void step(const std::vector<Param<Real>*>& params) {
        for (const auto* p : params) {
            require_same_shape(p->value.shape(), p->grad.shape(), "Adam " + p->name);
            if (!p->grad.all_finite()) throw NumericError("Adam: non-finite gradient in '" + p->name + "'");
        }
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.emplace_back(p->value.shape());
                v_.emplace_back(p->value.shape());
            }
        } else if (m_.size() != params.size()) {
            throw ShapeError("Adam: parameter list changed between steps");
        }
        ++step_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = *params[k];
            require_same_shape(p.value.shape(), m_[k].shape(), "Adam " + p.name);
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                const double m = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
                const double v = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
                m_[k][i] = static_cast<Real>(m);
                v_[k][i] = static_cast<Real>(v);
                const double update = cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
                p.value[i] = static_cast<Real>(p.value[i] - update);
            }
        }
    }

  private:
    AdamConfig cfg_;
    std::uint64_t step_ = 0;
    std::vector<Tensor<Real>> m_, v_;
};

}  // namespace mode::nn
