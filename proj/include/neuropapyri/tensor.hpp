#pragma once

// Dense row-major N-d tensor. Deliberately minimal: shape + flat storage +
// the indexing helpers the NN kernels need. Heavy math goes through Eigen
// maps over the flat buffer.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "neuropapyri/common.hpp"

namespace npap {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

    static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    static Tensor from_vector(Shape s, std::vector<T> v) {
        if (static_cast<int64_t>(v.size()) != shape_numel(s))
            throw ShapeMismatchError("from_vector: size does not match shape " + shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(v);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool empty() const { return data.empty(); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Row-major offsets for the common ranks.
    T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
    T& at(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    const T& at(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeMismatchError("reshape " + shape_str(shape) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<U>(data[i]);
        return t;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

// Eigen views over the flat buffer (row-major matrices).
template <class T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<EigenRowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const EigenRowMat<T>>;

template <class T>
MatMap<T> as_matrix(Tensor<T>& t, int64_t rows, int64_t cols) {
    return MatMap<T>(t.ptr(), rows, cols);
}
template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, int64_t rows, int64_t cols) {
    return ConstMatMap<T>(t.ptr(), rows, cols);
}

}  // namespace npap
