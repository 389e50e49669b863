#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mode {

// Error hierarchy. ValueError covers rejected arguments and configuration,
// everything else is a runtime failure.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class ValueError : public Error {
  public:
    using Error::Error;
};
class ShapeError : public ValueError {
  public:
    using ValueError::ValueError;
};
class StateError : public Error {
  public:
    using Error::Error;
};
class NumericError : public Error {
  public:
    using Error::Error;
};
class FormatError : public Error {
  public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorised reductions peel a head that depends on
/// the pointer's alignment, so a fixed base alignment keeps results bit-stable
/// from run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
        return true;
    }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t volume(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major array. `Real` is float for production runs and double for
/// gradient checks.
template <typename Real = float>
class Tensor {
  public:
    using value_type = Real;

    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = Real(0))
        : shape_(std::move(shape)), data_(volume(shape_), fill) {}

    Tensor(Shape shape, const std::vector<Real>& data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (volume(shape_) != data_.size())
            throw ShapeError("tensor shape " + to_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    Real* data() noexcept { return data_.data(); }
    const Real* data() const noexcept { return data_.data(); }
    std::span<Real> values() noexcept { return data_; }
    std::span<const Real> values() const noexcept { return data_; }

    Real& operator[](std::size_t i) noexcept { return data_[i]; }
    const Real& operator[](std::size_t i) const noexcept { return data_[i]; }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    /// Contiguous view of the i-th slice along the leading axis.
    std::span<Real> slice(std::size_t i) {
        const std::size_t n = data_.size() / shape_.at(0);
        return std::span<Real>(data_).subspan(i * n, n);
    }
    std::span<const Real> slice(std::size_t i) const {
        const std::size_t n = data_.size() / shape_.at(0);
        return std::span<const Real>(data_).subspan(i * n, n);
    }

    Tensor reshaped(Shape shape) const {
        if (volume(shape) != data_.size())
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        Tensor out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

    template <typename To>
    Tensor<To> cast() const {
        std::vector<To> out(data_.begin(), data_.end());
        return Tensor<To>(shape_, std::move(out));
    }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

  private:
    Shape shape_;
    AlignedVector<Real> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
    if (a != b) throw ShapeError(what + ": shape " + to_string(a) + " vs " + to_string(b));
}

/// a*x + b*y elementwise.
template <typename Real>
Tensor<Real> lincomb(Real a, const Tensor<Real>& x, Real b, const Tensor<Real>& y) {
    require_same_shape(x.shape(), y.shape(), "lincomb");
    Tensor<Real> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

template <typename Real>
Tensor<Real> scaled(const Tensor<Real>& x, Real a) {
    Tensor<Real> out = x;
    for (auto& v : out) v *= a;
    return out;
}

template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    require_same_shape(a.shape(), b.shape(), "max_abs_diff");
    Real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Stack equally-shaped tensors along a new leading axis.
template <typename Real>
Tensor<Real> stack(std::span<const Tensor<Real>> items) {
    if (items.empty()) throw ValueError("stack: no items");
    Shape shape{items.size()};
    shape.insert(shape.end(), items[0].shape().begin(), items[0].shape().end());
    std::vector<Real> data;
    data.reserve(volume(shape));
    for (const auto& t : items) {
        require_same_shape(t.shape(), items[0].shape(), "stack");
        data.insert(data.end(), t.begin(), t.end());
    }
    return Tensor<Real>(std::move(shape), std::move(data));
}

template <typename Real>
Tensor<Real> stack(const std::vector<Tensor<Real>>& items) {
    return stack(std::span<const Tensor<Real>>(items));
}

/// Inverse of stack: the i-th leading slice as its own tensor.
template <typename Real>
Tensor<Real> unstack(const Tensor<Real>& batch, std::size_t i) {
    Shape shape(batch.shape().begin() + 1, batch.shape().end());
    auto s = batch.slice(i);
    return Tensor<Real>(std::move(shape), std::vector<Real>(s.begin(), s.end()));
}

}  // namespace mode
