#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ems {

// All computation is 64-bit; trace files carry 32-bit reals and are widened
// at I/O time.
using Vector = std::vector<double>;

// Dense row-major matrix of 64-bit reals.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    Vector row_vec(std::size_t r) const {
        return Vector(data.begin() + static_cast<std::ptrdiff_t>(r * cols),
                      data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    }

    bool operator==(const Matrix& other) const = default;
};

}  // namespace ems
