#include "ems/attention_row.hpp"

#include <cassert>

#include "ems/numerics.hpp"

namespace ems {

void attention_row_probs(std::span<const double> q,
                         const Matrix& keys,
                         std::size_t n_keys,
                         double scale,
                         std::span<double> probs_out) {
    assert(probs_out.size() == n_keys);
    for (std::size_t j = 0; j < n_keys; ++j) {
        probs_out[j] = dot(q, keys.row(j)) * scale;
    }
    softmax_in_place(probs_out.subspan(0, n_keys));
}

void weighted_value_sum(std::span<const double> probs,
                        const Matrix& values,
                        std::size_t n_rows,
                        std::span<double> out) {
    for (double& x : out) {
        x = 0.0;
    }
    for (std::size_t j = 0; j < n_rows; ++j) {
        const auto v = values.row(j);
        const double p = probs[j];
        for (std::size_t d = 0; d < out.size(); ++d) {
            out[d] += p * v[d];
        }
    }
}

}  // namespace ems
