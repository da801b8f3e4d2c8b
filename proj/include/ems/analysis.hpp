#pragma once

#include <cstddef>

#include "ems/types.hpp"

namespace ems {

// R[i][j] = cos(k_i, k_j) * cos(v_i, v_j) on raw (pre-RoPE) tokens. Entries
// involving a zero-norm token are defined as 0 (that token never merges).
struct RedundancyMatrix {
    Matrix values;
    bool had_zero_norm_token = false;
};

RedundancyMatrix redundancy_matrix(const Matrix& k_raw, const Matrix& v_raw);

// Cross redundancy between two token groups (rows x cols), same definition.
Matrix redundancy_cross(const Matrix& k_rows, const Matrix& v_rows,
                        const Matrix& k_cols, const Matrix& v_cols);

// Fraction of tokens NOT needed to capture zeta of the head's total score
// mass: 1 - N_k/N where N_k is the smallest prefix of the descending-sorted,
// sum-normalized score with cumulative mass >= zeta.
double sparsity_rate(const Vector& score, double zeta);

// Fraction of tokens whose best predecessor redundancy meets tau; the first
// token has no predecessors and contributes 0.
double redundancy_rate(const RedundancyMatrix& r, double tau);

// Same rate computed directly from raw tokens without materializing the
// N x N matrix; memory stays linear in N.
double redundancy_rate_direct(const Matrix& k_raw, const Matrix& v_raw, double tau);

struct HeadDiagnostics {
    double sparsity = 0.0;    // p_m
    double redundancy = 0.0;  // r_m
};

}  // namespace ems
