// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cptpm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

/// Dense N-way array of doubles in row-major order.
///
/// The shape is fixed at construction. Element access through at() is
/// bounds-checked; data() exposes the flat buffer for kernels that walk
/// it with precomputed strides.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {
        check_extents();
        compute_strides();
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (shape_volume(shape_) != data_.size())
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
        compute_strides();
    }

    static Tensor from_vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor from_matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t m = rows.size();
        const std::size_t n = m ? rows.begin()->size() : 0;
        std::vector<double> flat;
        flat.reserve(m * n);
        for (const auto& row : rows) {
            if (row.size() != n) throw std::invalid_argument("ragged matrix literal");
            flat.insert(flat.end(), row.begin(), row.end());
        }
        return Tensor({m, n}, std::move(flat));
    }

    const Shape& shape() const noexcept { return shape_; }
    const Shape& strides() const noexcept { return strides_; }
    std::size_t order() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t extent(std::size_t mode) const {
        if (mode >= shape_.size())
            throw std::invalid_argument("mode " + std::to_string(mode) + " out of range for " +
                                        shape_string(shape_));
        return shape_[mode];
    }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }
    double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
    double at(std::span<const std::size_t> idx) const { return data_[offset(idx)]; }
    double& at(std::span<const std::size_t> idx) { return data_[offset(idx)]; }

    /// Same data viewed with a different shape of equal volume.
    Tensor reshaped(Shape shape) const {
        return Tensor(std::move(shape), data_);
    }

    bool operator==(const Tensor& other) const = default;

private:
    void check_extents() const {
        for (std::size_t e : shape_)
            if (e == 0) throw std::invalid_argument("tensor extents must be positive: " +
                                                    shape_string(shape_));
    }

    void compute_strides() {
        strides_.assign(shape_.size(), 1);
        for (std::size_t m = shape_.size(); m-- > 1;) strides_[m - 1] = strides_[m] * shape_[m];
    }

    template <typename Range>
    std::size_t offset(const Range& idx) const {
        if (idx.size() != shape_.size())
            throw std::out_of_range("index arity " + std::to_string(idx.size()) +
                                    " does not match tensor order " + std::to_string(shape_.size()));
        std::size_t off = 0;
        std::size_t m = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[m])
                throw std::out_of_range("index " + std::to_string(i) + " out of range on mode " +
                                        std::to_string(m) + " of " + shape_string(shape_));
            off += i * strides_[m++];
        }
        return off;
    }

    Shape shape_;
    Shape strides_;
    std::vector<double> data_;
};

/// One summand of a CP expansion: scale times the outer product of unit vectors.
struct Rank1Term {
    std::vector<std::vector<double>> vectors;
    double scale = 0.0;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline Tensor outer_product(const std::vector<std::vector<double>>& vectors) {
    if (vectors.empty()) throw std::invalid_argument("outer_product: empty vector list");
    Shape shape;
    for (const auto& v : vectors) {
        if (v.empty()) throw std::invalid_argument("outer_product: empty vector");
        shape.push_back(v.size());
    }
    // Grow the product one mode at a time so the result stays row-major.
    std::vector<double> acc(vectors.front());
    for (std::size_t m = 1; m < vectors.size(); ++m) {
        const auto& v = vectors[m];
        std::vector<double> next(acc.size() * v.size());
        for (std::size_t i = 0; i < acc.size(); ++i)
            for (std::size_t j = 0; j < v.size(); ++j) next[i * v.size() + j] = acc[i] * v[j];
        acc = std::move(next);
    }
    return Tensor(std::move(shape), std::move(acc));
}

inline Tensor materialize(const Rank1Term& term) {
    Tensor t = outer_product(term.vectors);
    for (double& x : t.data()) x *= term.scale;
    return t;
}

/// Contracts `mode` of `t` against `v`; the result drops that mode.
/// Contracting the only mode of a vector yields a one-element tensor.
inline Tensor mode_contract(const Tensor& t, std::size_t mode, std::span<const double> v) {
    if (mode >= t.order())
        throw std::invalid_argument("mode_contract: mode " + std::to_string(mode) +
                                    " out of range for " + shape_string(t.shape()));
    const std::size_t n = t.shape()[mode];
    if (v.size() != n)
        throw std::invalid_argument("mode_contract: vector length " + std::to_string(v.size()) +
                                    " != extent " + std::to_string(n));
    std::size_t outer = 1, inner = 1;
    for (std::size_t m = 0; m < mode; ++m) outer *= t.shape()[m];
    for (std::size_t m = mode + 1; m < t.order(); ++m) inner *= t.shape()[m];

    Shape out_shape;
    for (std::size_t m = 0; m < t.order(); ++m)
        if (m != mode) out_shape.push_back(t.shape()[m]);
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<double> out(outer * inner, 0.0);
    const double* src = t.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        double* dst = out.data() + o * inner;
        for (std::size_t k = 0; k < n; ++k) {
            const double w = v[k];
            const double* row = src + (o * n + k) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i] * w;
        }
    }
    return Tensor(std::move(out_shape), std::move(out));
}

inline double frobenius_norm(const Tensor& t) {
    double s = 0.0;
    for (double x : t.data()) s += x * x;
    return std::sqrt(s);
}

inline Tensor add_scaled(const Tensor& a, const Tensor& b, double alpha) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add_scaled: shape mismatch " + shape_string(a.shape()) +
                                    " vs " + shape_string(b.shape()));
    Tensor out = a;
    auto dst = out.data();
    auto src = b.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
    return out;
}

inline bool all_finite(const Tensor& t) {
    for (double x : t.data())
        if (!std::isfinite(x)) return false;
    return true;
}

inline double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double x : t.data()) m = std::max(m, std::abs(x));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace cptpm
