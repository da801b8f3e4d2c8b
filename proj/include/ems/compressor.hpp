#pragma once

#include <cstdint>
#include <vector>

#include "ems/cache.hpp"
#include "ems/scoring.hpp"
#include "ems/types.hpp"

namespace ems {

// Index sets of the four-way token split. All sets are sorted ascending;
// local is always the last l_win positions.
struct TokenPartition {
    std::vector<std::size_t> irrelevant;
    std::vector<std::size_t> tbm;
    std::vector<std::size_t> important;
    std::vector<std::size_t> local;
};

// Ranks the non-local tokens by pooled score: top (n_budget - l_win) become
// important, the next floor((gamma-1) * n_budget) to-be-merged, the remainder
// irrelevant. Ties break toward the earlier token. When the budget does not
// bind, irrelevant and tbm come out empty.
TokenPartition partition_tokens(const Vector& pooled_score, const CompressionConfig& config);

// Per TBM row: the argmax center column when that maximum meets tau,
// kZeroClass otherwise. Ties break toward the lower column.
std::vector<std::int32_t> assign_merge_destinations(const Matrix& r_tbm_to_centers, double tau);

// TBM tokens headed into the merge stage, parallel arrays.
struct TbmTokens {
    Matrix k_raw;
    Matrix v_raw;
    std::vector<std::int64_t> positions;
    Vector weights;  // merge weights (pooled scores at prefill)
    std::vector<ScoreTriple> score_triples;
};

// Merges TBM tokens into their destination centers: the merged normalized key
// is the renormalized score-weighted mean of member unit keys, the merged
// value the score-weighted mean of member values; the center keeps its own
// norm scalar and position and absorbs the members' score accumulators.
// Look-up-table entries are appended (zero-class entries only in zero_class
// mode); the caller re-sorts the table by position.
void weighted_merge(HeadCacheState& cache,
                    const std::vector<std::int32_t>& center_slot_by_column,
                    const Vector& center_weights,
                    const TbmTokens& tbm,
                    const std::vector<std::int32_t>& destinations,
                    const CompressionConfig& config);

// Full prefill pipeline: effective score -> partition -> first-level eviction
// of irrelevant tokens -> redundancy of TBM against centers -> destination
// assignment -> weighted merge. Token i has logical position first_position+i.
// When the prompt fits the budget, everything is kept exactly (uncompressed)
// in the local region and `compressed` stays false.
HeadCacheState compress_prefill(const Matrix& k_raw, const Matrix& v_raw,
                                const ScoreState& scores, const CompressionConfig& config,
                                std::int64_t first_position = 0);

// Decode-time update: graduates local tokens that exceed the window into the
// center region; once the center region is full, the least important center
// is re-selected as the step's TBM token and either merged into its most
// redundant peer (>= tau) or evicted. Pre-steady-state calls just insert.
void decode_update(HeadCacheState& cache, const CompressionConfig& config);

// Eq.-2 combination applied to per-entry accumulators, used to pick the least
// important center at decode time and to weight decode merges. The alignment
// ratio is computed over all live stored entries.
double alignment_ratio(const HeadCacheState& cache);
double combined_entry_score(const ScoreTriple& score, double align);

}  // namespace ems
