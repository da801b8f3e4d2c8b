#include "ems/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ems/errors.hpp"

namespace ems {

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double norm2(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

void softmax_in_place(std::span<double> x) {
    if (x.empty()) {
        throw std::invalid_argument("softmax: empty row");
    }
    double m = x[0];
    for (double v : x) {
        m = std::max(m, v);
    }
    double z = 0.0;
    for (double& v : x) {
        v = std::exp(v - m);
        z += v;
    }
    for (double& v : x) {
        v /= z;
    }
}

Vector stable_softmax_row(std::span<const double> row) {
    if (row.empty()) {
        throw std::invalid_argument("stable_softmax_row: empty row");
    }
    Vector out(row.begin(), row.end());
    softmax_in_place(out);
    return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch");
    }
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) {
        throw DegenerateInputError("cosine_similarity: zero-norm input");
    }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector mean_pool_1d(std::span<const double> s, std::size_t kernel_size) {
    if (kernel_size % 2 == 0 || kernel_size == 0) {
        throw std::invalid_argument("mean_pool_1d: kernel_size must be odd");
    }
    if (kernel_size > s.size()) {
        throw std::invalid_argument("mean_pool_1d: kernel_size exceeds input length");
    }
    const std::size_t n = s.size();
    const std::size_t half = kernel_size / 2;
    Vector out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n - 1, i + half);
        double acc = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) {
            acc += s[j];
        }
        out[i] = acc / static_cast<double>(hi - lo + 1);
    }
    return out;
}

}  // namespace ems
