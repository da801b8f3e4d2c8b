#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ems/types.hpp"

namespace ems {

// One recorded attention step: either the whole prompt or a single decode
// token, with raw (pre-RoPE) Q/K/V per head.
struct TraceStep {
    enum class Kind : std::uint8_t { prefill = 0, decode = 1 };
    Kind kind = Kind::prefill;
    std::vector<Matrix> q;  // per head, tokens x head_dim
    std::vector<Matrix> k;
    std::vector<Matrix> v;

    std::size_t token_count() const { return q.empty() ? 0 : q[0].rows; }
};

struct Trace {
    std::size_t num_heads = 0;
    std::size_t head_dim = 0;
    std::vector<TraceStep> steps;

    std::size_t prefill_tokens() const { return steps.empty() ? 0 : steps[0].token_count(); }
    std::size_t decode_steps() const { return steps.empty() ? 0 : steps.size() - 1; }

    // Exactly one prefill step, first; decode steps carry one token each.
    void validate() const;
};

// KVTR format: magic "KVTR"; little-endian u32 version (=1), num_heads,
// head_dim, step_count; per step: u8 kind (0 prefill, 1 decode), u32
// token_count, then Q, K, V blocks as token_count x num_heads x head_dim
// 32-bit IEEE-754 little-endian reals, row-major, in that order.
Trace load_trace(const std::string& path);
void save_trace(const Trace& trace, const std::string& path);

enum class SynthKind { random, redundant, needle };

SynthKind synth_kind_from_name(const std::string& name);

struct SynthParams {
    std::size_t tokens = 256;
    std::size_t heads = 2;
    std::size_t dim = 16;
    std::size_t decode_steps = 16;
    double depth = 0.5;        // needle: fractional position in the prompt
    double level = 0.8;        // redundant: target redundancy rate at tau = 0.6
    double needle_gain = 13.0; // needle: rotated-key magnitude
    double anchor_gain = 0.5;  // needle: query alignment strength (units of sqrt(dim));
                               // the needle logit is needle_gain * anchor_gain, exact
    double value_gain = 4.0;   // needle: value magnitude
    std::size_t anchor_rows = 16;  // needle: aligned rows at the end of the prompt
    double perturb = 0.05;     // redundant: relative noise on replicated tokens
};

// Deterministic synthetic workloads. random: i.i.d. Gaussian. redundant:
// tokens replicated with small perturbation so the measured redundancy rate
// at tau = 0.6 is at least `level`. needle: one high-signal token planted at
// `depth`, with the trailing prompt rows and every decode query aligned to it
// through the inverse rotary map. All values are exactly representable in
// 32-bit floats.
Trace gen_synthetic(SynthKind kind, std::uint64_t seed, const SynthParams& params);

// Logical position at which the needle generator plants the needle.
std::int64_t needle_position(std::size_t tokens, double depth);

}  // namespace ems
