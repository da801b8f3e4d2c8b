#include "ems/reference.hpp"

#include <cmath>
#include <stdexcept>

#include "ems/attention_row.hpp"

namespace ems::reference {

AttentionOutput dense_causal_attention(const Matrix& q_rot, const Matrix& k_rot, const Matrix& v,
                                       bool materialize_weights) {
    const std::size_t n = q_rot.rows;
    if (n == 0 || k_rot.rows != n || v.rows != n) {
        throw std::invalid_argument("dense_causal_attention: token count mismatch");
    }
    AttentionOutput out;
    out.outputs = Matrix(n, v.cols);
    if (materialize_weights) {
        out.weights = Matrix(n, n);
        out.weights_available = true;
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(q_rot.cols));
    Vector probs(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::span<double> p(probs.data(), i + 1);
        attention_row_probs(q_rot.row(i), k_rot, i + 1, scale, p);
        weighted_value_sum(p, v, i + 1, out.outputs.row(i));
        if (materialize_weights) {
            std::copy(p.begin(), p.end(), out.weights.row(i).begin());
        }
    }
    return out;
}

Vector dense_decode_row(const Vector& q_rot, const Matrix& k_rot, const Matrix& v,
                        std::size_t n_keys, Vector* probs_out) {
    if (n_keys == 0 || n_keys > k_rot.rows) {
        throw std::invalid_argument("dense_decode_row: bad key count");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(k_rot.cols));
    Vector probs(n_keys);
    attention_row_probs(q_rot, k_rot, n_keys, scale, probs);
    Vector out(v.cols);
    weighted_value_sum(probs, v, n_keys, out);
    if (probs_out != nullptr) {
        *probs_out = std::move(probs);
    }
    return out;
}

PrefillScores three_step_scores(const Matrix& q_rot, const Matrix& k_rot, std::size_t l_win) {
    const std::size_t n = q_rot.rows;
    if (n == 0 || k_rot.rows != n) {
        throw std::invalid_argument("three_step_scores: token count mismatch");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(q_rot.cols));

    // Step one: the full causal logit matrix.
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (std::size_t d = 0; d < q_rot.cols; ++d) {
                acc += q_rot.at(i, d) * k_rot.at(j, d);
            }
            a.at(i, j) = acc * scale;
        }
    }
    // Step two: softmax each causal row in place.
    for (std::size_t i = 0; i < n; ++i) {
        double m = a.at(i, 0);
        for (std::size_t j = 1; j <= i; ++j) {
            m = std::max(m, a.at(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            a.at(i, j) = std::exp(a.at(i, j) - m);
            z += a.at(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
            a.at(i, j) /= z;
        }
    }
    // Step three: reduce-sum down the columns.
    PrefillScores s;
    s.glo.assign(n, 0.0);
    s.loc.assign(n, 0.0);
    const std::size_t loc_start = n - std::min(l_win, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            s.glo[j] += a.at(i, j);
            if (i >= loc_start) {
                s.loc[j] += a.at(i, j);
            }
        }
    }
    return s;
}

}  // namespace ems::reference
