#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ems/analysis.hpp"
#include "ems/cache.hpp"
#include "ems/policies.hpp"
#include "ems/trace.hpp"

namespace ems {

// Per-decode-step comparison against the dense full-cache reference.
// Step 0 is the prefill; its error covers the whole prompt output block.
struct StepMetrics {
    std::size_t step = 0;
    double l2_error = 0.0;
    double cos_error = 0.0;  // 1 - cosine similarity, clamped to >= 0
    std::size_t entries = 0; // stored entries, summed over heads, post-compression
    std::size_t bytes = 0;   // accounting identity, summed over heads
    bool argmax_match = true;
};

struct PolicyReport {
    std::string policy;
    bool compression_applied = false;
    std::vector<StepMetrics> steps;
    double mean_l2 = 0.0;
    double max_l2 = 0.0;
    double mean_cos_error = 0.0;
    double argmax_match_rate = 1.0;
    // Needle fields are filled when RunOptions names a needle position.
    bool has_needle = false;
    std::int64_t needle_position = -1;
    bool needle_in_lut_final = false;
    bool needle_retained = false;  // argmax matched the reference at every decode step
    std::vector<HeadDiagnostics> diagnostics;  // per head; empty when skipped
};

struct MetricsReport {
    std::string trace_label;
    std::size_t num_heads = 0;
    std::size_t head_dim = 0;
    std::size_t prefill_tokens = 0;
    std::size_t decode_steps = 0;
    CompressionConfig config;
    std::vector<PolicyReport> policies;
};

struct RunOptions {
    bool compute_diagnostics = true;
    std::int64_t needle_pos = -1;  // -1 when the trace has no planted needle
    std::string trace_label;
};

// Runs the dense full-cache reference once and each policy over the trace in
// lockstep. Deterministic: identical inputs give byte-identical reports.
MetricsReport run_experiment_multi(const Trace& trace, const std::vector<PolicyHandle>& policies,
                                   const CompressionConfig& config, const RunOptions& options = {});

MetricsReport run_experiment(const Trace& trace, const PolicyHandle& policy,
                             const CompressionConfig& config, const RunOptions& options = {});

std::string report_json(const MetricsReport& report);
std::string report_csv(const MetricsReport& report);

// format is "json" or "csv".
void emit_report(const MetricsReport& report, const std::string& format, const std::string& path);

// Per-head (sparsity, redundancy) table for the prompt of a trace; zeta and
// tau taken from config.
std::vector<HeadDiagnostics> analyze_trace(const Trace& trace, const CompressionConfig& config);
std::string diagnostics_csv(const std::vector<HeadDiagnostics>& diags);

}  // namespace ems
