#include "ems/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ems/engine.hpp"
#include "ems/numerics.hpp"
#include "ems/reference.hpp"
#include "ems/rope.hpp"
#include "ems/scoring.hpp"

namespace ems {

namespace {

void append_row(Matrix& m, const Vector& row) {
    m.data.insert(m.data.end(), row.begin(), row.end());
    m.rows += 1;
}

Matrix rotate_block(const Matrix& block, const RopeParams& rope) {
    Matrix out(block.rows, block.cols);
    for (std::size_t i = 0; i < block.rows; ++i) {
        const Vector r = apply_rope(block.row_vec(i), static_cast<double>(i), rope);
        std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
}

// Dense full-cache run over the whole trace, per head.
struct ReferenceRun {
    std::vector<Matrix> prefill_outputs;               // [head]
    std::vector<std::vector<Vector>> decode_outputs;   // [head][step]
    std::vector<std::vector<std::int64_t>> decode_argmax;  // [head][step]
};

ReferenceRun run_reference(const Trace& trace, const RopeParams& rope) {
    const std::size_t h_count = trace.num_heads;
    const std::size_t s_count = trace.decode_steps();
    ReferenceRun ref;
    ref.prefill_outputs.resize(h_count);
    ref.decode_outputs.assign(h_count, {});
    ref.decode_argmax.assign(h_count, {});

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t hh = 0; hh < static_cast<std::ptrdiff_t>(h_count); ++hh) {
        const std::size_t h = static_cast<std::size_t>(hh);
        const TraceStep& p = trace.steps[0];
        Matrix k_rot = rotate_block(p.k[h], rope);
        Matrix v_all = p.v[h];
        const Matrix q_rot = rotate_block(p.q[h], rope);
        ref.prefill_outputs[h] = reference::dense_causal_attention(q_rot, k_rot, v_all).outputs;

        ref.decode_outputs[h].resize(s_count);
        ref.decode_argmax[h].resize(s_count);
        for (std::size_t s = 0; s < s_count; ++s) {
            const TraceStep& step = trace.steps[s + 1];
            const std::int64_t pos = static_cast<std::int64_t>(trace.prefill_tokens() + s);
            append_row(k_rot, apply_rope(step.k[h].row_vec(0), static_cast<double>(pos), rope));
            append_row(v_all, step.v[h].row_vec(0));
            const Vector q = apply_rope(step.q[h].row_vec(0), static_cast<double>(pos), rope);
            Vector probs;
            ref.decode_outputs[h][s] =
                reference::dense_decode_row(q, k_rot, v_all, k_rot.rows, &probs);
            std::size_t best = 0;
            for (std::size_t j = 1; j < probs.size(); ++j) {
                if (probs[j] > probs[best]) {
                    best = j;
                }
            }
            ref.decode_argmax[h][s] = static_cast<std::int64_t>(best);
        }
    }
    return ref;
}

bool bitwise_equal(const Vector& a, const Vector& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

double concat_l2(const std::vector<Vector>& a, const std::vector<Vector>& b) {
    double acc = 0.0;
    for (std::size_t h = 0; h < a.size(); ++h) {
        for (std::size_t i = 0; i < a[h].size(); ++i) {
            const double d = a[h][i] - b[h][i];
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

double concat_cos_error(const std::vector<Vector>& a, const std::vector<Vector>& b) {
    bool identical = true;
    for (std::size_t h = 0; h < a.size() && identical; ++h) {
        identical = bitwise_equal(a[h], b[h]);
    }
    if (identical) {
        return 0.0;
    }
    double num = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t h = 0; h < a.size(); ++h) {
        for (std::size_t i = 0; i < a[h].size(); ++i) {
            num += a[h][i] * b[h][i];
            na += a[h][i] * a[h][i];
            nb += b[h][i] * b[h][i];
        }
    }
    if (na == 0.0 || nb == 0.0) {
        return 1.0;
    }
    return std::max(0.0, 1.0 - std::clamp(num / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0));
}

const char* position_mode_name(PositionMode m) {
    return m == PositionMode::with_pos ? "with_pos" : "without_pos";
}

std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

}  // namespace

std::vector<HeadDiagnostics> analyze_trace(const Trace& trace, const CompressionConfig& config) {
    trace.validate();
    const RopeParams rope{trace.head_dim, 10000.0};
    std::vector<HeadDiagnostics> out(trace.num_heads);
    const TraceStep& p = trace.steps[0];
    const std::size_t l_win_eff = std::min(config.l_win, trace.prefill_tokens());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t hh = 0; hh < static_cast<std::ptrdiff_t>(trace.num_heads); ++hh) {
        const std::size_t h = static_cast<std::size_t>(hh);
        const Matrix q_rot = rotate_block(p.q[h], rope);
        const Matrix k_rot = rotate_block(p.k[h], rope);
        const PrefillScores scores = prefill_scores(q_rot, k_rot, l_win_eff);
        const Vector combined = combine_glo_loc(scores.glo, scores.loc);
        out[h].sparsity = sparsity_rate(combined, config.zeta);
        out[h].redundancy = redundancy_rate_direct(p.k[h], p.v[h], config.tau);
    }
    return out;
}

MetricsReport run_experiment_multi(const Trace& trace, const std::vector<PolicyHandle>& policies,
                                   const CompressionConfig& config, const RunOptions& options) {
    trace.validate();
    config.validate();
    MetricsReport report;
    report.trace_label = options.trace_label;
    report.num_heads = trace.num_heads;
    report.head_dim = trace.head_dim;
    report.prefill_tokens = trace.prefill_tokens();
    report.decode_steps = trace.decode_steps();
    report.config = config;
    if (policies.empty()) {
        return report;
    }

    const RopeParams rope{trace.head_dim, 10000.0};
    const ReferenceRun ref = run_reference(trace, rope);
    std::vector<HeadDiagnostics> diags;
    if (options.compute_diagnostics) {
        diags = analyze_trace(trace, config);
    }

    const std::size_t h_count = trace.num_heads;
    const std::size_t s_count = trace.decode_steps();
    const TraceStep& pstep = trace.steps[0];

    for (const PolicyHandle& policy : policies) {
        PolicyReport pr;
        pr.policy = policy_name(policy.kind);
        pr.diagnostics = diags;

        EngineState engine = make_engine(h_count, trace.head_dim, policy, config, rope.base);
        const PrefillResult pf = prefill(engine, pstep.q, pstep.k, pstep.v);
        pr.compression_applied = pf.compression_applied;

        StepMetrics prefill_metrics;
        prefill_metrics.step = 0;
        {
            std::vector<Vector> a_flat(h_count);
            std::vector<Vector> b_flat(h_count);
            for (std::size_t h = 0; h < h_count; ++h) {
                a_flat[h] = pf.per_head[h].outputs.data;
                b_flat[h] = ref.prefill_outputs[h].data;
            }
            prefill_metrics.l2_error = concat_l2(a_flat, b_flat);
            prefill_metrics.cos_error = concat_cos_error(a_flat, b_flat);
        }
        for (const HeadCacheState& head : engine.heads) {
            prefill_metrics.entries += head.stored_entries();
            prefill_metrics.bytes += head.bytes_stored();
        }
        pr.steps.push_back(prefill_metrics);

        std::size_t argmax_matches = 0;
        bool retained_every_step = true;
        double sum_l2 = 0.0;
        double max_l2 = 0.0;
        double sum_cos = 0.0;
        for (std::size_t s = 0; s < s_count; ++s) {
            const TraceStep& step = trace.steps[s + 1];
            std::vector<Vector> q(h_count), k(h_count), v(h_count);
            for (std::size_t h = 0; h < h_count; ++h) {
                q[h] = step.q[h].row_vec(0);
                k[h] = step.k[h].row_vec(0);
                v[h] = step.v[h].row_vec(0);
            }
            const DecodeResult dec = decode_step(engine, q, k, v);

            std::vector<Vector> ref_out(h_count);
            bool match = true;
            for (std::size_t h = 0; h < h_count; ++h) {
                ref_out[h] = ref.decode_outputs[h][s];
                match = match && dec.argmax_position[h] == ref.decode_argmax[h][s];
            }
            StepMetrics m;
            m.step = s + 1;
            m.l2_error = concat_l2(dec.per_head, ref_out);
            m.cos_error = concat_cos_error(dec.per_head, ref_out);
            m.argmax_match = match;
            for (const HeadCacheState& head : engine.heads) {
                m.entries += head.stored_entries();
                m.bytes += head.bytes_stored();
            }
            pr.steps.push_back(m);
            sum_l2 += m.l2_error;
            max_l2 = std::max(max_l2, m.l2_error);
            sum_cos += m.cos_error;
            if (match) {
                ++argmax_matches;
            } else {
                retained_every_step = false;
            }
        }
        pr.mean_l2 = s_count > 0 ? sum_l2 / static_cast<double>(s_count) : 0.0;
        pr.max_l2 = max_l2;
        pr.mean_cos_error = s_count > 0 ? sum_cos / static_cast<double>(s_count) : 0.0;
        pr.argmax_match_rate =
            s_count > 0 ? static_cast<double>(argmax_matches) / static_cast<double>(s_count) : 1.0;

        if (options.needle_pos >= 0) {
            pr.has_needle = true;
            pr.needle_position = options.needle_pos;
            pr.needle_retained = retained_every_step && s_count > 0;
            pr.needle_in_lut_final = true;
            for (const HeadCacheState& head : engine.heads) {
                pr.needle_in_lut_final =
                    pr.needle_in_lut_final && head.position_represented(options.needle_pos);
            }
        }
        report.policies.push_back(std::move(pr));
    }
    return report;
}

MetricsReport run_experiment(const Trace& trace, const PolicyHandle& policy,
                             const CompressionConfig& config, const RunOptions& options) {
    return run_experiment_multi(trace, {policy}, config, options);
}

std::string report_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["trace"] = {{"label", report.trace_label},
                  {"num_heads", report.num_heads},
                  {"head_dim", report.head_dim},
                  {"prefill_tokens", report.prefill_tokens},
                  {"decode_steps", report.decode_steps}};
    j["config"] = {{"n_budget", report.config.n_budget},
                   {"l_win", report.config.l_win},
                   {"tau", report.config.tau},
                   {"gamma", report.config.gamma},
                   {"zeta", report.config.zeta},
                   {"kernel_size", report.config.kernel_size},
                   {"position_mode", position_mode_name(report.config.position_mode)},
                   {"eviction", report.config.eviction == EvictionRealization::zero_class
                                    ? "zero_class"
                                    : "explicit_removal"}};
    auto policies = nlohmann::ordered_json::array();
    for (const PolicyReport& pr : report.policies) {
        nlohmann::ordered_json jp;
        jp["policy"] = pr.policy;
        jp["compression_applied"] = pr.compression_applied;
        auto steps = nlohmann::ordered_json::array();
        for (const StepMetrics& m : pr.steps) {
            steps.push_back({{"step", m.step},
                             {"l2_error", m.l2_error},
                             {"cos_error", m.cos_error},
                             {"entries", m.entries},
                             {"bytes", m.bytes},
                             {"argmax_match", m.argmax_match}});
        }
        jp["steps"] = std::move(steps);
        jp["aggregate"] = {{"mean_l2", pr.mean_l2},
                           {"max_l2", pr.max_l2},
                           {"mean_cos_error", pr.mean_cos_error},
                           {"argmax_match_rate", pr.argmax_match_rate}};
        if (pr.has_needle) {
            jp["needle"] = {{"position", pr.needle_position},
                            {"retained", pr.needle_retained},
                            {"in_lut_final", pr.needle_in_lut_final}};
        } else {
            jp["needle"] = nullptr;
        }
        auto diag = nlohmann::ordered_json::array();
        for (std::size_t h = 0; h < pr.diagnostics.size(); ++h) {
            diag.push_back({{"head", h},
                            {"sparsity", pr.diagnostics[h].sparsity},
                            {"redundancy", pr.diagnostics[h].redundancy}});
        }
        jp["diagnostics"] = std::move(diag);
        policies.push_back(std::move(jp));
    }
    j["policies"] = std::move(policies);
    return j.dump(2) + "\n";
}

std::string report_csv(const MetricsReport& report) {
    std::string out = "policy,step,l2_error,cos_error,entries,bytes,argmax_match\n";
    for (const PolicyReport& pr : report.policies) {
        for (const StepMetrics& m : pr.steps) {
            out += pr.policy;
            out += ',' + std::to_string(m.step);
            out += ',' + fmt_double(m.l2_error);
            out += ',' + fmt_double(m.cos_error);
            out += ',' + std::to_string(m.entries);
            out += ',' + std::to_string(m.bytes);
            out += ',';
            out += m.argmax_match ? '1' : '0';
            out += '\n';
        }
    }
    return out;
}

void emit_report(const MetricsReport& report, const std::string& format, const std::string& path) {
    std::string payload;
    if (format == "json") {
        payload = report_json(report);
    } else if (format == "csv") {
        payload = report_csv(report);
    } else {
        throw std::invalid_argument("emit_report: format must be json or csv");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("emit_report: cannot open " + path);
    }
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) {
        throw std::runtime_error("emit_report: write failed for " + path);
    }
}

std::string diagnostics_csv(const std::vector<HeadDiagnostics>& diags) {
    std::string out = "head,sparsity,redundancy\n";
    for (std::size_t h = 0; h < diags.size(); ++h) {
        out += std::to_string(h);
        out += ',' + fmt_double(diags[h].sparsity);
        out += ',' + fmt_double(diags[h].redundancy);
        out += '\n';
    }
    return out;
}

}  // namespace ems
