#include "ems/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ems/attention_row.hpp"
#include "ems/errors.hpp"
#include "ems/numerics.hpp"

namespace ems {

namespace {

// Core streaming pass. Query rows are processed tile by tile; rows within a
// tile are independent and run in parallel, each writing its probabilities
// (and output row, when values are given) into its own slice of the tile
// buffer. The scatter into the column sums is serial and strictly row-ordered,
// which keeps the result independent of both tile size and thread count.
void streaming_pass(const Matrix& q, const Matrix& k, const Matrix* v, std::size_t l_win,
                    std::size_t tile_rows, Vector& glo, Vector& loc, Matrix* outputs) {
    if (q.rows != k.rows || q.cols != k.cols) {
        throw std::invalid_argument("prefill scores: Q/K shape mismatch");
    }
    if (q.rows == 0) {
        throw std::invalid_argument("prefill scores: empty block");
    }
    if (tile_rows == 0) {
        throw std::invalid_argument("prefill scores: tile_rows must be positive");
    }
    const std::size_t n = q.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    const std::size_t loc_start = n - std::min(l_win, n);

    glo.assign(n, 0.0);
    loc.assign(n, 0.0);

    std::vector<double> probs(std::min(tile_rows, n) * n);
    for (std::size_t tile0 = 0; tile0 < n; tile0 += tile_rows) {
        const std::size_t tile_end = std::min(n, tile0 + tile_rows);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ri = static_cast<std::ptrdiff_t>(tile0);
             ri < static_cast<std::ptrdiff_t>(tile_end); ++ri) {
            const std::size_t i = static_cast<std::size_t>(ri);
            const std::size_t n_keys = i + 1;  // causal
            std::span<double> p(probs.data() + (i - tile0) * n, n_keys);
            attention_row_probs(q.row(i), k, n_keys, scale, p);
            if (outputs != nullptr) {
                weighted_value_sum(p, *v, n_keys, outputs->row(i));
            }
        }
        for (std::size_t i = tile0; i < tile_end; ++i) {
            const double* p = probs.data() + (i - tile0) * n;
            for (std::size_t j = 0; j <= i; ++j) {
                glo[j] += p[j];
            }
            if (i >= loc_start) {
                for (std::size_t j = 0; j <= i; ++j) {
                    loc[j] += p[j];
                }
            }
        }
    }
}

}  // namespace

Vector global_score_prefill(const Matrix& q_block, const Matrix& k_block, std::size_t tile_rows) {
    Vector glo;
    Vector loc;
    streaming_pass(q_block, k_block, nullptr, 0, tile_rows, glo, loc, nullptr);
    return glo;
}

Vector local_score_prefill(const Matrix& q_block, const Matrix& k_block, std::size_t l_win,
                           std::size_t tile_rows) {
    if (l_win == 0 || l_win > q_block.rows) {
        throw std::invalid_argument("local_score_prefill: l_win must be in [1, N]");
    }
    Vector glo;
    Vector loc;
    streaming_pass(q_block, k_block, nullptr, l_win, tile_rows, glo, loc, nullptr);
    return loc;
}

PrefillScores prefill_scores(const Matrix& q_block, const Matrix& k_block, std::size_t l_win,
                             std::size_t tile_rows) {
    PrefillScores out;
    streaming_pass(q_block, k_block, nullptr, l_win, tile_rows, out.glo, out.loc, nullptr);
    return out;
}

PrefillAttention prefill_attention(const Matrix& q_block, const Matrix& k_block,
                                   const Matrix& v_block, std::size_t l_win,
                                   std::size_t tile_rows) {
    if (v_block.rows != k_block.rows) {
        throw std::invalid_argument("prefill_attention: V token count mismatch");
    }
    PrefillAttention out;
    out.outputs = Matrix(q_block.rows, v_block.cols);
    streaming_pass(q_block, k_block, &v_block, l_win, tile_rows, out.glo, out.loc, &out.outputs);
    return out;
}

Vector combine_glo_loc(const Vector& s_glo, const Vector& s_loc) {
    if (s_glo.size() != s_loc.size()) {
        throw std::invalid_argument("combine_glo_loc: length mismatch");
    }
    double sum_glo = 0.0;
    double sum_loc = 0.0;
    for (std::size_t i = 0; i < s_glo.size(); ++i) {
        sum_glo += s_glo[i];
        sum_loc += s_loc[i];
    }
    if (sum_glo <= 0.0) {
        throw DegenerateInputError("combine_glo_loc: global score has no mass");
    }
    const double align = sum_loc / sum_glo;
    Vector out(s_glo.size());
    for (std::size_t i = 0; i < s_glo.size(); ++i) {
        out[i] = std::max(s_glo[i] * align, s_loc[i]);
    }
    return out;
}

void update_scores_decode(const Vector& attn_row, ScoreState& state) {
    if (attn_row.size() == state.size() + 1) {
        state.glo.push_back(0.0);
        state.loc_past.push_back(0.0);
        state.loc_cur.push_back(0.0);
    } else if (attn_row.size() != state.size()) {
        throw std::invalid_argument("update_scores_decode: row length mismatch");
    }
    for (std::size_t i = 0; i < attn_row.size(); ++i) {
        state.glo[i] += attn_row[i];
        state.loc_cur[i] += attn_row[i];
    }
    state.window_fill += 1;
    if (state.window_fill >= state.l_win) {
        state.loc_past = state.loc_cur;
        std::fill(state.loc_cur.begin(), state.loc_cur.end(), 0.0);
        state.window_fill = 0;
    }
}

Vector effective_score(const ScoreState& state, std::size_t kernel_size) {
    Vector loc(state.size());
    for (std::size_t i = 0; i < loc.size(); ++i) {
        loc[i] = state.loc_past[i] + state.loc_cur[i];
    }
    return mean_pool_1d(combine_glo_loc(state.glo, loc), kernel_size);
}

ScoreState init_score_state(Vector glo, Vector loc, std::size_t l_win) {
    ScoreState state;
    state.glo = std::move(glo);
    state.loc_past = std::move(loc);
    state.loc_cur.assign(state.glo.size(), 0.0);
    state.window_fill = 0;
    state.l_win = l_win;
    return state;
}

}  // namespace ems
