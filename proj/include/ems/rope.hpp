#pragma once

#include <cstddef>

#include "ems/types.hpp"

namespace ems {

struct RopeParams {
    std::size_t head_dim = 0;  // must be even
    double base = 10000.0;
};

// Rotary position embedding on consecutive element pairs: pair i is rotated
// by angle position * base^(-2i/head_dim). Norm-preserving; inner products of
// rotated vectors depend only on the relative position.
Vector apply_rope(const Vector& v, double position, const RopeParams& params);

namespace detail {
// Rotation without the nonnegative-position check; negative positions undo a
// rotation (used by the synthetic needle generator).
Vector rotate(const Vector& v, double position, const RopeParams& params);
}  // namespace detail

}  // namespace ems
