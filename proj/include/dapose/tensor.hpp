#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "dapose/common.hpp"

namespace dapose {

/// Dense row-major tensor, rank 0..4. Value type: copies are deep.
template <typename S>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), S(0));
    }

    Tensor(std::initializer_list<int64_t> shape) : Tensor(std::vector<int64_t>(shape)) {}

    static Tensor full(std::vector<int64_t> shape, S v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(S v) {
        Tensor t{std::vector<int64_t>{}};
        t.data_.assign(1, v);
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    S& at(int64_t a, int64_t b) { return data_[static_cast<size_t>(a * shape_[1] + b)]; }
    const S& at(int64_t a, int64_t b) const { return data_[static_cast<size_t>(a * shape_[1] + b)]; }

    S& at(int64_t a, int64_t b, int64_t c) {
        return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
    }
    const S& at(int64_t a, int64_t b, int64_t c) const {
        return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
    }

    S& at(int64_t a, int64_t b, int64_t c, int64_t d) {
        return data_[static_cast<size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
    }
    const S& at(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return data_[static_cast<size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
    }

    Tensor reshaped(std::vector<int64_t> shape) const {
        check_arg(count(shape) == numel(), "reshape: element count mismatch");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const S& v : data_)
            if (!is_finite(v)) return false;
        return true;
    }

    S max_value() const {
        S m = data_.empty() ? S(0) : data_[0];
        for (const S& v : data_) m = std::max(m, v);
        return m;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> t(shape_);
        for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<T>(data_[static_cast<size_t>(i)]);
        return t;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  private:
    static int64_t count(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            check_arg(d >= 0, "tensor dims must be nonnegative");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<S> data_;
};

template <typename S>
void axpy(S a, const Tensor<S>& x, Tensor<S>& y) {
    check_arg(x.same_shape(y), "axpy: shape mismatch");
    for (int64_t i = 0; i < x.numel(); ++i) y[i] += a * x[i];
}

/// y = a*y + (1-a)*x, elementwise. The EMA primitive.
template <typename S>
void lerp_into(Tensor<S>& y, const Tensor<S>& x, S a) {
    check_arg(x.same_shape(y), "lerp_into: shape mismatch");
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = a * y[i] + (S(1) - a) * x[i];
}

} // namespace dapose
