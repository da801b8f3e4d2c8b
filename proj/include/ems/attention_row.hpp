#pragma once

#include <span>

#include "ems/types.hpp"

namespace ems {

// One causal attention row: logits q.k_j * scale over the first n_keys rows
// of keys, softmaxed into probs_out (size n_keys). The summation order is
// fixed (keys in storage order, dims sequentially) so that every caller of
// this kernel produces bit-identical probabilities for identical inputs.
void attention_row_probs(std::span<const double> q,
                         const Matrix& keys,
                         std::size_t n_keys,
                         double scale,
                         std::span<double> probs_out);

// out += is not performed; out is overwritten with sum_j probs[j] * values[j].
void weighted_value_sum(std::span<const double> probs,
                        const Matrix& values,
                        std::size_t n_rows,
                        std::span<double> out);

}  // namespace ems
