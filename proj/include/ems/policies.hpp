#pragma once

#include <string>

#include "ems/cache.hpp"
#include "ems/scoring.hpp"
#include "ems/types.hpp"

namespace ems {

enum class PolicyKind { full, streaming_llm, h2o, snapkv, ems };

struct PolicyHandle {
    PolicyKind kind = PolicyKind::full;
    std::size_t sink_count = 4;  // streaming_llm

    // Throws invalid_argument when the policy cannot operate under config
    // (e.g. streaming_llm needs n_budget >= sink_count + l_win).
    void validate(const CompressionConfig& config) const;
};

PolicyKind policy_kind_from_name(const std::string& name);
std::string policy_name(PolicyKind kind);

// Prefill-time compression for one head. Raw (pre-RoPE) K/V in, per-token
// prefill scores in, initial cache out. Every policy keeps the prompt exactly
// (uncompressed, in the local region) when it fits the budget.
HeadCacheState policy_prefill_compress(const PolicyHandle& policy, const Matrix& k_raw,
                                       const Matrix& v_raw, const ScoreState& scores,
                                       const CompressionConfig& config);

// Decode-time compression for one head; called after the new token has been
// appended to the local region and scores updated.
void policy_decode_compress(const PolicyHandle& policy, HeadCacheState& cache,
                            const CompressionConfig& config);

}  // namespace ems
