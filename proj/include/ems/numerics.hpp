#pragma once

#include <span>

#include "ems/types.hpp"

namespace ems {

// Softmax with max-subtraction. Output entries are in (0,1] and sum to 1
// within 1e-12 regardless of the input magnitude.
Vector stable_softmax_row(std::span<const double> row);

// In-place variant; every attention path in the project funnels through this
// one routine so identical logits always produce identical probabilities.
void softmax_in_place(std::span<double> x);

// dot(a,b) / (|a||b|), clamped to [-1,1] so threshold comparisons are safe.
// Throws DegenerateInputError if either vector has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Centered mean pooling with truncated windows at the boundaries (entries
// near the edges are averaged over their actual window width).
// kernel_size must be odd and no larger than the input length.
Vector mean_pool_1d(std::span<const double> s, std::size_t kernel_size);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

}  // namespace ems
