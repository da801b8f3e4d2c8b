#include "ems/policies.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "ems/compressor.hpp"
#include "ems/errors.hpp"
#include "ems/numerics.hpp"

namespace ems {

namespace {

CenterEntry center_from_raw(std::span<const double> key, Vector value, std::int64_t position,
                            const ScoreTriple& score) {
    CenterEntry c;
    c.key_norm = norm2(key);
    c.unit_key.assign(key.begin(), key.end());
    if (c.key_norm > 0.0) {
        for (double& x : c.unit_key) {
            x /= c.key_norm;
        }
    }
    c.value = std::move(value);
    c.position = position;
    c.score = score;
    return c;
}

HeadCacheState keep_all(const Matrix& k_raw, const Matrix& v_raw, const ScoreState& scores) {
    HeadCacheState cache;
    cache.head_dim = k_raw.cols;
    for (std::size_t i = 0; i < k_raw.rows; ++i) {
        LocalEntry l;
        l.key = k_raw.row_vec(i);
        l.value = v_raw.row_vec(i);
        l.position = static_cast<std::int64_t>(i);
        l.score = ScoreTriple{scores.glo[i], scores.loc_past[i], scores.loc_cur[i]};
        cache.locals.push_back(std::move(l));
    }
    return cache;
}

// Builds a cache that keeps exactly the given non-local token indices as
// centers (self-mapped in the LUT) plus the last l_win tokens as locals.
HeadCacheState keep_selection(const Matrix& k_raw, const Matrix& v_raw, const ScoreState& scores,
                              const std::vector<std::size_t>& kept_sorted,
                              const CompressionConfig& config) {
    const std::size_t n = k_raw.rows;
    HeadCacheState cache;
    cache.head_dim = k_raw.cols;
    for (std::size_t idx : kept_sorted) {
        const ScoreTriple t{scores.glo[idx], scores.loc_past[idx], scores.loc_cur[idx]};
        const std::int32_t slot = cache.insert_center(
            center_from_raw(k_raw.row(idx), v_raw.row_vec(idx), static_cast<std::int64_t>(idx), t));
        cache.lut.push_back({static_cast<std::int64_t>(idx), slot});
    }
    for (std::size_t idx = n - config.l_win; idx < n; ++idx) {
        LocalEntry l;
        l.key = k_raw.row_vec(idx);
        l.value = v_raw.row_vec(idx);
        l.position = static_cast<std::int64_t>(idx);
        l.score = ScoreTriple{scores.glo[idx], scores.loc_past[idx], scores.loc_cur[idx]};
        cache.locals.push_back(std::move(l));
    }
    cache.compressed = true;
    cache.check_integrity();
    return cache;
}

std::vector<std::size_t> top_k_by(const Vector& score, std::size_t n_candidates, std::size_t k) {
    std::vector<std::size_t> order(n_candidates);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    order.resize(std::min(k, n_candidates));
    std::sort(order.begin(), order.end());
    return order;
}

// Moves locals beyond the window into the center region, exactly (evict-only
// policies do not merge, so the reconstruction k_unit * |k| is the only
// rounding they see).
void graduate_locals(HeadCacheState& cache, const CompressionConfig& config) {
    while (cache.locals.size() > config.l_win) {
        LocalEntry g = std::move(cache.locals.front());
        cache.locals.pop_front();
        const std::int32_t slot =
            cache.insert_center(center_from_raw(g.key, std::move(g.value), g.position, g.score));
        cache.lut.push_back({g.position, slot});
    }
}

void drop_center(HeadCacheState& cache, std::int32_t slot) {
    cache.lut.erase(std::remove_if(cache.lut.begin(), cache.lut.end(),
                                   [&](const LutEntry& e) { return e.slot == slot; }),
                    cache.lut.end());
    cache.free_center(slot);
}

}  // namespace

void PolicyHandle::validate(const CompressionConfig& config) const {
    config.validate();
    if (kind == PolicyKind::streaming_llm && config.n_budget < sink_count + config.l_win) {
        throw std::invalid_argument("streaming_llm: n_budget must cover sinks plus the local window");
    }
}

PolicyKind policy_kind_from_name(const std::string& name) {
    if (name == "full") return PolicyKind::full;
    if (name == "streaming") return PolicyKind::streaming_llm;
    if (name == "h2o") return PolicyKind::h2o;
    if (name == "snapkv") return PolicyKind::snapkv;
    if (name == "ems") return PolicyKind::ems;
    throw std::invalid_argument("unknown policy: " + name);
}

std::string policy_name(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::full: return "full";
        case PolicyKind::streaming_llm: return "streaming";
        case PolicyKind::h2o: return "h2o";
        case PolicyKind::snapkv: return "snapkv";
        case PolicyKind::ems: return "ems";
    }
    return "unknown";
}

HeadCacheState policy_prefill_compress(const PolicyHandle& policy, const Matrix& k_raw,
                                       const Matrix& v_raw, const ScoreState& scores,
                                       const CompressionConfig& config) {
    policy.validate(config);
    const std::size_t n = k_raw.rows;
    if (policy.kind == PolicyKind::full || n <= config.n_budget) {
        return keep_all(k_raw, v_raw, scores);
    }

    switch (policy.kind) {
        case PolicyKind::ems:
            return compress_prefill(k_raw, v_raw, scores, config);
        case PolicyKind::streaming_llm: {
            // First sink_count tokens plus the most recent n_budget - sink_count.
            std::vector<std::size_t> kept;
            for (std::size_t i = 0; i < policy.sink_count && i < n; ++i) {
                kept.push_back(i);
            }
            const std::size_t recent = config.n_budget - policy.sink_count;
            for (std::size_t i = n - recent; i < n - config.l_win; ++i) {
                if (i >= policy.sink_count) {
                    kept.push_back(i);
                }
            }
            return keep_selection(k_raw, v_raw, scores, kept, config);
        }
        case PolicyKind::h2o: {
            const std::vector<std::size_t> kept =
                top_k_by(scores.glo, n - config.l_win, config.center_capacity());
            return keep_selection(k_raw, v_raw, scores, kept, config);
        }
        case PolicyKind::snapkv: {
            Vector loc(n);
            for (std::size_t i = 0; i < n; ++i) {
                loc[i] = scores.loc_past[i] + scores.loc_cur[i];
            }
            std::size_t kernel = config.kernel_size;
            if (kernel > n) {
                kernel = (n % 2 == 1) ? n : n - 1;
            }
            const Vector pooled = mean_pool_1d(loc, kernel);
            const std::vector<std::size_t> kept =
                top_k_by(pooled, n - config.l_win, config.center_capacity());
            return keep_selection(k_raw, v_raw, scores, kept, config);
        }
        case PolicyKind::full:
            break;
    }
    return keep_all(k_raw, v_raw, scores);
}

void policy_decode_compress(const PolicyHandle& policy, HeadCacheState& cache,
                            const CompressionConfig& config) {
    switch (policy.kind) {
        case PolicyKind::full:
            return;  // identity: the cache just grows
        case PolicyKind::snapkv:
            // Compresses only the prompt; decode tokens accumulate.
            graduate_locals(cache, config);
            return;
        case PolicyKind::ems:
            decode_update(cache, config);
            return;
        case PolicyKind::h2o: {
            graduate_locals(cache, config);
            while (cache.alive_centers() > config.center_capacity()) {
                std::int32_t worst = -1;
                double worst_glo = 0.0;
                for (std::size_t i = 0; i < cache.slots.size(); ++i) {
                    if (!cache.slots[i].has_value()) {
                        continue;
                    }
                    const double g = cache.slots[i]->score.glo;
                    if (worst < 0 || g < worst_glo ||
                        (g == worst_glo &&
                         cache.slots[i]->position < cache.slots[static_cast<std::size_t>(worst)]->position)) {
                        worst = static_cast<std::int32_t>(i);
                        worst_glo = g;
                    }
                }
                drop_center(cache, worst);
                cache.compressed = true;
            }
            return;
        }
        case PolicyKind::streaming_llm: {
            graduate_locals(cache, config);
            while (cache.stored_entries() > config.n_budget) {
                // Oldest non-sink center leaves.
                std::int32_t oldest = -1;
                for (std::size_t i = 0; i < cache.slots.size(); ++i) {
                    if (!cache.slots[i].has_value()) {
                        continue;
                    }
                    if (cache.slots[i]->position < static_cast<std::int64_t>(policy.sink_count)) {
                        continue;
                    }
                    if (oldest < 0 ||
                        cache.slots[i]->position < cache.slots[static_cast<std::size_t>(oldest)]->position) {
                        oldest = static_cast<std::int32_t>(i);
                    }
                }
                if (oldest < 0) {
                    return;  // nothing evictable
                }
                drop_center(cache, oldest);
                cache.compressed = true;
            }
            return;
        }
    }
}

}  // namespace ems
