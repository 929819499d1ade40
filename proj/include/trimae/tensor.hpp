#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "trimae/common.hpp"

namespace trimae {

// Dense row-major tensor of doubles. Most of the pipeline works on rank-2
// views (token sequences, patch grids); rank is kept only for bookkeeping.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), v_(count(shape_), 0.0) {}
    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), v_(std::move(data)) {
        if (v_.size() != count(shape_))
            throw ShapeError("tensor", "data size does not match shape");
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t(std::move(shape));
        for (double& x : t.v_) x = value;
        return t;
    }
    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return v_.size(); }
    std::size_t rank() const { return shape_.size(); }

    // rank-2 accessors
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const {
        if (shape_.size() < 2) return shape_.size() == 1 ? 1 : 0;
        std::size_t c = 1;
        for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
        return c;
    }

    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }
    double& operator()(std::size_t i, std::size_t j) { return v_[i * cols() + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v_[i * cols() + j]; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    auto begin() { return v_.begin(); }
    auto end() { return v_.end(); }
    auto begin() const { return v_.begin(); }
    auto end() const { return v_.end(); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape_.size(); ++i)
            os << (i ? "," : "") << shape_[i];
        os << ")";
        return os.str();
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, std::size_t b) { return a * b; });
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> v_;
};

}  // namespace trimae
