#pragma once

#include <cstddef>

#include "ems/types.hpp"

namespace ems {

inline constexpr std::size_t kDefaultTileRows = 128;

// Per-token importance accumulators. During the prompt phase the vectors are
// indexed by logical token; after compression the compressor compacts them in
// lockstep with the cache so indices track stored entries instead.
struct ScoreState {
    Vector glo;       // accumulated attention mass from all query rows
    Vector loc_past;  // mass from the previous (full) local window
    Vector loc_cur;   // mass from the window currently filling
    std::size_t window_fill = 0;  // in [0, l_win)
    std::size_t l_win = 0;

    std::size_t size() const { return glo.size(); }
};

struct PrefillScores {
    Vector glo;
    Vector loc;
};

// Fused result of one streaming pass over the prompt.
struct PrefillAttention {
    Matrix outputs;  // tokens x head_dim
    Vector glo;
    Vector loc;
};

// Column sums of the causal attention matrix, computed by a tiled streaming
// pass that never materializes the full N x N matrix. Results are
// bit-identical for any tile size: each row's probabilities are produced by
// the shared attention kernel and scattered in ascending row order.
Vector global_score_prefill(const Matrix& q_block, const Matrix& k_block,
                            std::size_t tile_rows = kDefaultTileRows);

// Column sums restricted to the last l_win query rows.
Vector local_score_prefill(const Matrix& q_block, const Matrix& k_block, std::size_t l_win,
                           std::size_t tile_rows = kDefaultTileRows);

// Both scores from a single pass.
PrefillScores prefill_scores(const Matrix& q_block, const Matrix& k_block, std::size_t l_win,
                             std::size_t tile_rows = kDefaultTileRows);

// Both scores plus the attention outputs, for the engine's prefill.
PrefillAttention prefill_attention(const Matrix& q_block, const Matrix& k_block,
                                   const Matrix& v_block, std::size_t l_win,
                                   std::size_t tile_rows = kDefaultTileRows);

// s = max(s_glo * (sum(s_loc)/sum(s_glo)), s_loc), element-wise. The rescale
// aligns the two accumulators to the same mean before taking the max.
Vector combine_glo_loc(const Vector& s_glo, const Vector& s_loc);

// Accumulates one decode attention row. The row may be one entry longer than
// the state (the freshly appended token); the state grows to match. When the
// current window reaches l_win it rotates: loc_past <- loc_cur, loc_cur <- 0.
void update_scores_decode(const Vector& attn_row, ScoreState& state);

// mean_pool_1d(combine_glo_loc(glo, loc_past + loc_cur), kernel_size).
Vector effective_score(const ScoreState& state, std::size_t kernel_size);

// Prefill initialization: loc_past holds the whole prompt-window sum and the
// decode window starts empty.
ScoreState init_score_state(Vector glo, Vector loc, std::size_t l_win);

}  // namespace ems
