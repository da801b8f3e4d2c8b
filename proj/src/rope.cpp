#include "ems/rope.hpp"

#include <cmath>
#include <stdexcept>

namespace ems {

namespace detail {

Vector rotate(const Vector& v, double position, const RopeParams& params) {
    if (params.head_dim % 2 != 0 || params.head_dim == 0) {
        throw std::invalid_argument("apply_rope: head_dim must be even and positive");
    }
    if (v.size() != params.head_dim) {
        throw std::invalid_argument("apply_rope: vector length does not match head_dim");
    }
    const std::size_t d = params.head_dim;
    Vector out(d);
    for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(params.base, -static_cast<double>(i) / static_cast<double>(d));
        const double angle = position * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        out[i] = v[i] * c - v[i + 1] * s;
        out[i + 1] = v[i] * s + v[i + 1] * c;
    }
    return out;
}

}  // namespace detail

Vector apply_rope(const Vector& v, double position, const RopeParams& params) {
    if (position < 0.0) {
        throw std::invalid_argument("apply_rope: position must be nonnegative");
    }
    return detail::rotate(v, position, params);
}

}  // namespace ems
