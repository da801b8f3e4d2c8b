#include "ems/engine.hpp"

#include <cmath>
#include <stdexcept>

#include "ems/attention_row.hpp"
#include "ems/errors.hpp"
#include "ems/numerics.hpp"

namespace ems {

namespace {

Matrix rotate_block(const Matrix& block, std::int64_t first_position, const RopeParams& rope) {
    Matrix out(block.rows, block.cols);
    for (std::size_t i = 0; i < block.rows; ++i) {
        const Vector r = apply_rope(block.row_vec(i),
                                    static_cast<double>(first_position + static_cast<std::int64_t>(i)), rope);
        std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace

EngineState make_engine(std::size_t num_heads, std::size_t head_dim, PolicyHandle policy,
                        CompressionConfig config, double rope_base) {
    if (num_heads == 0 || head_dim == 0 || head_dim % 2 != 0) {
        throw std::invalid_argument("make_engine: need heads >= 1 and even head_dim");
    }
    policy.validate(config);
    EngineState s;
    s.num_heads = num_heads;
    s.head_dim = head_dim;
    s.config = config;
    s.policy = policy;
    s.rope = RopeParams{head_dim, rope_base};
    s.heads.resize(num_heads);
    return s;
}

PrefillResult prefill(EngineState& state, const std::vector<Matrix>& q_blocks,
                      const std::vector<Matrix>& k_blocks, const std::vector<Matrix>& v_blocks) {
    if (q_blocks.size() != state.num_heads || k_blocks.size() != state.num_heads ||
        v_blocks.size() != state.num_heads) {
        throw std::invalid_argument("prefill: head count mismatch");
    }
    const std::size_t n = q_blocks[0].rows;
    if (n == 0) {
        throw std::invalid_argument("prefill: empty prompt");
    }
    for (std::size_t h = 0; h < state.num_heads; ++h) {
        if (q_blocks[h].rows != n || k_blocks[h].rows != n || v_blocks[h].rows != n) {
            throw std::invalid_argument("prefill: token count mismatch across blocks");
        }
    }
    if (state.prefilled) {
        throw StateError("prefill: engine already prefilled");
    }

    PrefillResult result;
    result.per_head.resize(state.num_heads);
    const std::size_t l_win_eff = std::min(state.config.l_win, n);

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t hh = 0; hh < static_cast<std::ptrdiff_t>(state.num_heads); ++hh) {
        const std::size_t h = static_cast<std::size_t>(hh);
        const Matrix q_rot = rotate_block(q_blocks[h], 0, state.rope);
        const Matrix k_rot = rotate_block(k_blocks[h], 0, state.rope);
        PrefillAttention pa = prefill_attention(q_rot, k_rot, v_blocks[h], l_win_eff);
        ScoreState scores = init_score_state(std::move(pa.glo), std::move(pa.loc), state.config.l_win);
        state.heads[h] =
            policy_prefill_compress(state.policy, k_blocks[h], v_blocks[h], scores, state.config);
        state.heads[h].window_fill = 0;
        result.per_head[h].outputs = std::move(pa.outputs);
    }

    state.next_position = static_cast<std::int64_t>(n);
    state.prefilled = true;
    result.compression_applied = state.heads[0].compressed;
    return result;
}

ExpandedCache expand_cache(const HeadCacheState& cache, const CompressionConfig& config,
                           const RopeParams& rope) {
    std::size_t n_expanded = cache.locals.size();
    for (const LutEntry& e : cache.lut) {
        if (e.slot != kZeroClass) {
            ++n_expanded;
        }
    }
    ExpandedCache ex;
    ex.keys = Matrix(n_expanded, cache.head_dim);
    ex.values = Matrix(n_expanded, cache.head_dim);
    ex.positions.resize(n_expanded);
    ex.owner.resize(n_expanded);
    ex.local_base = static_cast<std::int32_t>(cache.slots.size());

    std::size_t row = 0;
    for (const LutEntry& e : cache.lut) {
        if (e.slot == kZeroClass) {
            continue;
        }
        if (e.slot < 0 || static_cast<std::size_t>(e.slot) >= cache.slots.size() ||
            !cache.slots[static_cast<std::size_t>(e.slot)].has_value()) {
            throw CorruptionError("expand_cache: lut entry references a nonexistent slot");
        }
        const CenterEntry& c = *cache.slots[static_cast<std::size_t>(e.slot)];
        Vector key(cache.head_dim);
        for (std::size_t d = 0; d < cache.head_dim; ++d) {
            key[d] = c.unit_key[d] * c.key_norm;
        }
        const std::int64_t rope_position =
            config.position_mode == PositionMode::with_pos ? e.position : c.position;
        key = apply_rope(key, static_cast<double>(rope_position), rope);
        std::copy(key.begin(), key.end(), ex.keys.row(row).begin());
        std::copy(c.value.begin(), c.value.end(), ex.values.row(row).begin());
        ex.positions[row] = e.position;
        ex.owner[row] = e.slot;
        ++row;
    }
    for (std::size_t li = 0; li < cache.locals.size(); ++li) {
        const LocalEntry& l = cache.locals[li];
        const Vector key = apply_rope(l.key, static_cast<double>(l.position), rope);
        std::copy(key.begin(), key.end(), ex.keys.row(row).begin());
        std::copy(l.value.begin(), l.value.end(), ex.values.row(row).begin());
        ex.positions[row] = l.position;
        ex.owner[row] = ex.local_base + static_cast<std::int32_t>(li);
        ++row;
    }
    return ex;
}

Vector attend_expanded(const Vector& q, const HeadCacheState& cache,
                       const CompressionConfig& config, const RopeParams& rope,
                       std::int64_t q_position) {
    const ExpandedCache ex = expand_cache(cache, config, rope);
    if (ex.keys.rows == 0) {
        throw StateError("attend_expanded: cache is empty");
    }
    const Vector q_rot = apply_rope(q, static_cast<double>(q_position), rope);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cache.head_dim));
    Vector probs(ex.keys.rows);
    attention_row_probs(q_rot, ex.keys, ex.keys.rows, scale, probs);
    Vector out(cache.head_dim);
    weighted_value_sum(probs, ex.values, ex.keys.rows, out);
    return out;
}

DecodeResult decode_step(EngineState& state, const std::vector<Vector>& q,
                         const std::vector<Vector>& k, const std::vector<Vector>& v) {
    if (!state.prefilled) {
        throw StateError("decode_step: engine not prefilled");
    }
    if (q.size() != state.num_heads || k.size() != state.num_heads || v.size() != state.num_heads) {
        throw std::invalid_argument("decode_step: head count mismatch");
    }
    const std::int64_t position = state.next_position;
    DecodeResult result;
    result.per_head.resize(state.num_heads);
    result.argmax_position.resize(state.num_heads);

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t hh = 0; hh < static_cast<std::ptrdiff_t>(state.num_heads); ++hh) {
        const std::size_t h = static_cast<std::size_t>(hh);
        HeadCacheState& cache = state.heads[h];

        LocalEntry incoming;
        incoming.key = k[h];
        incoming.value = v[h];
        incoming.position = position;
        cache.locals.push_back(std::move(incoming));

        const ExpandedCache ex = expand_cache(cache, state.config, state.rope);
        const Vector q_rot = apply_rope(q[h], static_cast<double>(position), state.rope);
        const double scale = 1.0 / std::sqrt(static_cast<double>(state.head_dim));
        Vector probs(ex.keys.rows);
        attention_row_probs(q_rot, ex.keys, ex.keys.rows, scale, probs);
        Vector out(state.head_dim);
        weighted_value_sum(probs, ex.values, ex.keys.rows, out);

        // Attention mass flows back into the owning entries' accumulators;
        // entries sharing a center accumulate onto that center.
        std::size_t best = 0;
        for (std::size_t e = 0; e < probs.size(); ++e) {
            ScoreTriple& t =
                ex.owner[e] < ex.local_base
                    ? cache.slots[static_cast<std::size_t>(ex.owner[e])]->score
                    : cache.locals[static_cast<std::size_t>(ex.owner[e] - ex.local_base)].score;
            t.glo += probs[e];
            t.loc_cur += probs[e];
            if (probs[e] > probs[best]) {
                best = e;
            }
        }
        cache.window_fill += 1;
        if (cache.window_fill >= state.config.l_win) {
            cache.rotate_score_windows();
            cache.window_fill = 0;
        }

        policy_decode_compress(state.policy, cache, state.config);

        result.per_head[h] = std::move(out);
        result.argmax_position[h] = ex.positions[best];
    }

    state.next_position += 1;
    return result;
}

}  // namespace ems
