#include "ems/analysis.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "ems/errors.hpp"
#include "ems/numerics.hpp"

namespace ems {

namespace {

// Cosine with the zero-norm-token fallback of this module: a token with no
// direction has similarity 0 to everything.
double cos_or_zero(std::span<const double> a, std::span<const double> b, bool& saw_zero) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) {
        saw_zero = true;
        return 0.0;
    }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace

RedundancyMatrix redundancy_matrix(const Matrix& k_raw, const Matrix& v_raw) {
    if (k_raw.rows != v_raw.rows) {
        throw std::invalid_argument("redundancy_matrix: K/V token count mismatch");
    }
    const std::size_t n = k_raw.rows;
    RedundancyMatrix r;
    r.values = Matrix(n, n);
    bool saw_zero = false;
#pragma omp parallel for schedule(static) reduction(|| : saw_zero)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(n); ++ri) {
        const std::size_t i = static_cast<std::size_t>(ri);
        for (std::size_t j = 0; j <= i; ++j) {
            const double ck = cos_or_zero(k_raw.row(i), k_raw.row(j), saw_zero);
            const double cv = cos_or_zero(v_raw.row(i), v_raw.row(j), saw_zero);
            const double val = ck * cv;
            r.values.at(i, j) = val;
            r.values.at(j, i) = val;
        }
    }
    r.had_zero_norm_token = saw_zero;
    return r;
}

Matrix redundancy_cross(const Matrix& k_rows, const Matrix& v_rows,
                        const Matrix& k_cols, const Matrix& v_cols) {
    if (k_rows.rows != v_rows.rows || k_cols.rows != v_cols.rows) {
        throw std::invalid_argument("redundancy_cross: K/V token count mismatch");
    }
    Matrix out(k_rows.rows, k_cols.rows);
    bool saw_zero = false;
#pragma omp parallel for schedule(static) reduction(|| : saw_zero)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(k_rows.rows); ++ri) {
        const std::size_t i = static_cast<std::size_t>(ri);
        for (std::size_t j = 0; j < k_cols.rows; ++j) {
            const double ck = cos_or_zero(k_rows.row(i), k_cols.row(j), saw_zero);
            const double cv = cos_or_zero(v_rows.row(i), v_cols.row(j), saw_zero);
            out.at(i, j) = ck * cv;
        }
    }
    (void)saw_zero;
    return out;
}

double sparsity_rate(const Vector& score, double zeta) {
    if (zeta <= 0.0 || zeta > 1.0) {
        throw std::invalid_argument("sparsity_rate: zeta must be in (0, 1]");
    }
    const double total = std::accumulate(score.begin(), score.end(), 0.0);
    if (total <= 0.0) {
        throw DegenerateInputError("sparsity_rate: score has no mass");
    }
    Vector sorted = score;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    double cum = 0.0;
    std::size_t needed = sorted.size();
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        cum += sorted[i] / total;
        if (cum >= zeta) {
            needed = i + 1;
            break;
        }
    }
    return 1.0 - static_cast<double>(needed) / static_cast<double>(sorted.size());
}

double redundancy_rate_direct(const Matrix& k_raw, const Matrix& v_raw, double tau) {
    if (k_raw.rows != v_raw.rows || k_raw.rows == 0) {
        throw std::invalid_argument("redundancy_rate_direct: bad token count");
    }
    const std::size_t n = k_raw.rows;
    std::size_t redundant = 0;
#pragma omp parallel for schedule(static) reduction(+ : redundant)
    for (std::ptrdiff_t rk = 1; rk < static_cast<std::ptrdiff_t>(n); ++rk) {
        const std::size_t k = static_cast<std::size_t>(rk);
        bool dummy = false;
        double best = 0.0;
        bool first = true;
        for (std::size_t j = 0; j < k; ++j) {
            const double r = cos_or_zero(k_raw.row(k), k_raw.row(j), dummy) *
                             cos_or_zero(v_raw.row(k), v_raw.row(j), dummy);
            if (first || r > best) {
                best = r;
                first = false;
            }
        }
        if (best >= tau) {
            ++redundant;
        }
    }
    return static_cast<double>(redundant) / static_cast<double>(n);
}

double redundancy_rate(const RedundancyMatrix& r, double tau) {
    const std::size_t n = r.values.rows;
    if (n == 0) {
        throw std::invalid_argument("redundancy_rate: empty matrix");
    }
    std::size_t redundant = 0;
    for (std::size_t k = 1; k < n; ++k) {
        double best = r.values.at(k, 0);
        for (std::size_t j = 1; j < k; ++j) {
            best = std::max(best, r.values.at(k, j));
        }
        if (best >= tau) {
            ++redundant;
        }
    }
    return static_cast<double>(redundant) / static_cast<double>(n);
}

}  // namespace ems
