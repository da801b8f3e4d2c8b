#pragma once

#include <cstdint>
#include <vector>

#include "ems/cache.hpp"
#include "ems/policies.hpp"
#include "ems/rope.hpp"
#include "ems/scoring.hpp"
#include "ems/types.hpp"

namespace ems {

struct AttentionOutput {
    Matrix outputs;  // tokens x head_dim
    bool weights_available = false;
    Matrix weights;  // row-stochastic when materialized
};

// Single attention layer with one compressed KV cache per head. Multi-layer
// runs are driven by the harness iterating independent engines.
struct EngineState {
    std::size_t num_heads = 0;
    std::size_t head_dim = 0;
    CompressionConfig config;
    PolicyHandle policy;
    RopeParams rope;
    std::vector<HeadCacheState> heads;
    std::int64_t next_position = 0;
    bool prefilled = false;
};

EngineState make_engine(std::size_t num_heads, std::size_t head_dim, PolicyHandle policy,
                        CompressionConfig config, double rope_base = 10000.0);

struct PrefillResult {
    std::vector<AttentionOutput> per_head;
    bool compression_applied = false;  // false on the no-compression path
};

// Causal attention over the whole prompt (streaming, per head in parallel),
// score-state initialization from the prompt's attention mass, and exactly
// one policy compression at the end.
PrefillResult prefill(EngineState& state, const std::vector<Matrix>& q_blocks,
                      const std::vector<Matrix>& k_blocks, const std::vector<Matrix>& v_blocks);

struct DecodeResult {
    std::vector<Vector> per_head;
    // Logical position holding the largest attention weight, per head.
    std::vector<std::int64_t> argmax_position;
};

// Appends (k, v) to the local region, attends q over the expanded cache plus
// locals, updates the score accumulators, and runs the policy's decode-time
// compression.
DecodeResult decode_step(EngineState& state, const std::vector<Vector>& q,
                         const std::vector<Vector>& k, const std::vector<Vector>& v);

// The LUT-expanded view of one head's cache: per expanded entry the RoPE'd
// key, the value, the logical position, and the owning stored entry (center
// slot, or local index offset by local_base).
struct ExpandedCache {
    Matrix keys;
    Matrix values;
    std::vector<std::int64_t> positions;
    std::vector<std::int32_t> owner;  // < local_base: center slot; >= local_base: local index + local_base
    std::int32_t local_base = 0;
};

ExpandedCache expand_cache(const HeadCacheState& cache, const CompressionConfig& config,
                           const RopeParams& rope);

// Attention of q (raw, rotated here at q_position) over the expanded cache.
// Zero-class entries never materialize. Throws CorruptionError on dangling
// LUT references.
Vector attend_expanded(const Vector& q, const HeadCacheState& cache,
                       const CompressionConfig& config, const RopeParams& rope,
                       std::int64_t q_position);

}  // namespace ems
