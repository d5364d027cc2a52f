#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tipformer/common.hpp"

namespace tipformer {

// Dense row-major tensor. Training uses the float instantiation; gradient
// checks run the same code instantiated with double (shadow mode).
template <typename S>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<i64> shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<std::size_t>(numel()), S(0));
    }

    TensorT(std::vector<i64> shape, std::vector<S> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (static_cast<i64>(data_.size()) != numel()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str());
        }
    }

    static TensorT scalar(S v) { return TensorT({1}, {v}); }

    static TensorT matrix(i64 rows, i64 cols, std::vector<S> data) {
        return TensorT({rows, cols}, std::move(data));
    }

    const std::vector<i64>& shape() const { return shape_; }
    i64 rank() const { return static_cast<i64>(shape_.size()); }

    i64 numel() const {
        return std::accumulate(shape_.begin(), shape_.end(), i64{1}, std::multiplies<i64>());
    }

    i64 rows() const { return dim(0); }
    i64 cols() const { return dim(1); }

    i64 dim(i64 axis) const {
        if (axis < 0 || axis >= rank()) {
            throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str());
        }
        return shape_[static_cast<std::size_t>(axis)];
    }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](i64 i) { return data_[static_cast<std::size_t>(i)]; }
    const S& operator[](i64 i) const { return data_[static_cast<std::size_t>(i)]; }

    // 2-D accessors
    S& at(i64 r, i64 c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
    const S& at(i64 r, i64 c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const S v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::ostringstream ss;
        ss << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) ss << 'x';
            ss << shape_[i];
        }
        ss << ']';
        return ss.str();
    }

    template <typename T>
    TensorT<T> cast() const {
        std::vector<T> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
        return TensorT<T>(shape_, std::move(out));
    }

    std::vector<S>& raw() { return data_; }
    const std::vector<S>& raw() const { return data_; }

private:
    void validate_shape() const {
        if (shape_.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (const i64 d : shape_) {
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str());
        }
    }

    std::vector<i64> shape_;
    std::vector<S> data_;
};

using Tensor = TensorT<float>;

template <typename S>
bool bitwise_equal(const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b)) return false;
    for (i64 i = 0; i < a.numel(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(S)) != 0) return false;
    }
    return true;
}

// Uniform(-bound, bound) fill used by parameter initialization.
template <typename S>
void fill_uniform(TensorT<S>& t, double bound, RngStream& rng) {
    for (i64 i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace tipformer
