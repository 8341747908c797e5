#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "wcmorph/errors.hpp"

namespace wcm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major array of 64-bit floats. Carrier of all autodiff
// computation; images and embeddings are views into this type.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_numel(shape_), 0.0);
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (data_.size() != shape_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t numel() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(double v) {
        for (auto& x : data_) x = v;
    }
    void zero() { fill(0.0); }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    void require_finite(const char* what) const {
        if (!all_finite()) {
            throw InvariantError(std::string(what) + ": tensor contains NaN/Inf");
        }
    }

private:
    void validate_shape() const {
        if (shape_.empty()) {
            throw DimensionError("tensor shape must have at least one extent");
        }
        for (auto d : shape_) {
            if (d == 0) {
                throw DimensionError("tensor shape has zero extent: " + shape_str(shape_));
            }
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

} // namespace wcm
