#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vlq/error.hpp"

namespace vlq {

// Dense row-major matrix. Vectors are stored as 1 x n matrices so that every
// parameter tensor shares one representation.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix value count does not match shape");
        }
    }

    static Matrix row_vector(std::span<const T> values) {
        return Matrix(1, values.size(), std::vector<T>(values.begin(), values.end()));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() { return data_; }
    std::span<const T> flat() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <typename U, typename T>
Matrix<U> matrix_cast(const Matrix<T>& m) {
    std::vector<U> out(m.size());
    std::transform(m.flat().begin(), m.flat().end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Matrix<U>(m.rows(), m.cols(), std::move(out));
}

template <typename T>
Matrix<T> zeros_like(const Matrix<T>& m) {
    return Matrix<T>(m.rows(), m.cols());
}

// Rows of `top` followed by rows of `bottom`.
template <typename T>
Matrix<T> vstack(const Matrix<T>& top, const Matrix<T>& bottom) {
    if (top.empty()) {
        return bottom;
    }
    if (bottom.empty()) {
        return top;
    }
    if (top.cols() != bottom.cols()) {
        throw DimensionError("vstack: column count " + std::to_string(top.cols()) + " vs " +
                             std::to_string(bottom.cols()));
    }
    Matrix<T> out(top.rows() + bottom.rows(), top.cols());
    std::copy(top.flat().begin(), top.flat().end(), out.flat().begin());
    std::copy(bottom.flat().begin(), bottom.flat().end(), out.flat().begin() + top.size());
    return out;
}

template <typename T>
Matrix<T> slice_rows(const Matrix<T>& m, std::size_t begin, std::size_t end) {
    if (begin > end || end > m.rows()) {
        throw DimensionError("slice_rows: range out of bounds");
    }
    Matrix<T> out(end - begin, m.cols());
    std::copy(m.flat().begin() + begin * m.cols(), m.flat().begin() + end * m.cols(), out.flat().begin());
    return out;
}

// a += b, shapes must match.
template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError("add_inplace: shape mismatch");
    }
    auto av = a.flat();
    auto bv = b.flat();
    for (std::size_t i = 0; i < av.size(); ++i) {
        av[i] += bv[i];
    }
}

template <typename T>
bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

template <typename T>
T l2_norm(std::span<const T> a) {
    return std::sqrt(dot(a, a));
}

} // namespace vlq
