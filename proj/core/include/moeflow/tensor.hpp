#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "moeflow/error.hpp"

namespace moeflow {

/// Dense row-major tensor over a single scalar type. All storage in the
/// library is contiguous row-major; the rank-2 case (rows x cols) is the
/// workhorse.
template <typename T>
class TensorT {
  public:
    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), T(0)) {}

    TensorT(std::initializer_list<std::size_t> shape)
        : TensorT(std::vector<std::size_t>(shape)) {}

    static TensorT full(std::vector<std::size_t> shape, T value) {
        TensorT t(std::move(shape));
        for (auto& x : t.data_) x = value;
        return t;
    }

    static TensorT from(std::vector<std::size_t> shape, std::vector<T> values) {
        if (count(shape) != values.size())
            throw ShapeError("tensor data length does not match shape volume");
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(values);
        return t;
    }

    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    /// Rows/cols of a rank-2 tensor; a rank-1 tensor counts as one row.
    std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : fail_dims()); }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : fail_dims()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    T* row(std::size_t r) { return data_.data() + r * cols(); }
    const T* row(std::size_t r) const { return data_.data() + r * cols(); }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& x : data_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>::from(shape_, std::move(out));
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

  private:
    [[noreturn]] std::size_t fail_dims() const {
        throw ShapeError("rank-2 accessor used on tensor of rank " + std::to_string(rank()));
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<double>;
using Tensor32 = TensorT<float>;

std::string shape_str(const std::vector<std::size_t>& shape);

/// Largest elementwise absolute difference; tensors must have equal shape.
double max_abs_diff(const Tensor& a, const Tensor& b);

double l2_norm(const Tensor& a);

}  // namespace moeflow
