#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "feddp/errors.hpp"

namespace feddp {

/// Dense n-dimensional array of scalars, flat row-major storage.
///
/// Shapes follow the (batch, channel, height, width) convention for image
/// tensors, (rows, cols) for matrices and (n) for vectors; the class itself
/// is rank-agnostic. Scalar is float for experiment throughput or double
/// for verification runs.
template <typename Scalar>
class Tensor {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_ = Array::Zero(count(shape_));
    }

    Tensor(std::vector<int> shape, std::initializer_list<Scalar> values)
        : shape_(std::move(shape)) {
        if (static_cast<std::int64_t>(values.size()) != count(shape_))
            throw StructureError("tensor literal does not match shape");
        data_.resize(count(shape_));
        std::int64_t i = 0;
        for (Scalar v : values) data_[i++] = v;
    }

    static Tensor full(std::vector<int> shape, Scalar v) {
        Tensor t(std::move(shape));
        t.data_.setConstant(v);
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int extent(int dim) const { return shape_[static_cast<std::size_t>(dim)]; }
    std::int64_t size() const { return data_.size(); }

    Array& array() { return data_; }
    const Array& array() const { return data_; }
    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar operator[](std::int64_t i) const { return data_[i]; }
    Scalar& operator[](std::int64_t i) { return data_[i]; }

    // Flat offsets for the common ranks.
    std::int64_t offset2(int i, int j) const {
        return static_cast<std::int64_t>(i) * shape_[1] + j;
    }
    std::int64_t offset4(int b, int c, int h, int w) const {
        return ((static_cast<std::int64_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    Scalar& at2(int i, int j) { return data_[offset2(i, j)]; }
    Scalar at2(int i, int j) const { return data_[offset2(i, j)]; }
    Scalar& at4(int b, int c, int h, int w) { return data_[offset4(b, c, h, w)]; }
    Scalar at4(int b, int c, int h, int w) const { return data_[offset4(b, c, h, w)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const { return data_.isFinite().all(); }

    void set_zero() { data_.setZero(); }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int e : shape) {
            if (e <= 0) throw StructureError("tensor extents must be positive");
            n *= e;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    Array data_;
};

template <typename Scalar>
std::string shape_string(const Tensor<Scalar>& t) {
    std::ostringstream os;
    os << "(";
    for (int i = 0; i < t.rank(); ++i) os << (i ? "," : "") << t.extent(i);
    os << ")";
    return os.str();
}

/// Map a rank-2 tensor (or a flat view of higher rank) as a row-major Eigen matrix.
template <typename Scalar>
Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
as_matrix(Tensor<Scalar>& t, int rows, int cols) {
    return {t.data(), rows, cols};
}

template <typename Scalar>
Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
as_matrix(const Tensor<Scalar>& t, int rows, int cols) {
    return {t.data(), rows, cols};
}

} // namespace feddp
