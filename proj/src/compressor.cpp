#include "ems/compressor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ems/analysis.hpp"
#include "ems/errors.hpp"
#include "ems/numerics.hpp"

namespace ems {

namespace {

Vector normalized_or_zero(std::span<const double> v, double& out_norm) {
    out_norm = norm2(v);
    Vector u(v.begin(), v.end());
    if (out_norm > 0.0) {
        for (double& x : u) {
            x /= out_norm;
        }
    }
    return u;
}

// Largest odd kernel that fits the score vector; keeps the configured size
// whenever possible.
std::size_t clamp_kernel(std::size_t kernel, std::size_t n) {
    if (kernel <= n) {
        return kernel;
    }
    return (n % 2 == 1) ? n : n - 1;
}

LocalEntry make_local(const Matrix& k_raw, const Matrix& v_raw, std::size_t idx,
                      std::int64_t position, const ScoreState& scores) {
    LocalEntry l;
    l.key = k_raw.row_vec(idx);
    l.value = v_raw.row_vec(idx);
    l.position = position;
    l.score = ScoreTriple{scores.glo[idx], scores.loc_past[idx], scores.loc_cur[idx]};
    return l;
}

}  // namespace

TokenPartition partition_tokens(const Vector& pooled_score, const CompressionConfig& config) {
    const std::size_t n = pooled_score.size();
    if (n < config.l_win + 1) {
        throw std::invalid_argument("partition_tokens: need more tokens than the local window");
    }
    TokenPartition part;
    const std::size_t n_candidates = n - config.l_win;
    part.local.resize(config.l_win);
    std::iota(part.local.begin(), part.local.end(), n_candidates);

    std::vector<std::size_t> order(n_candidates);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return pooled_score[a] > pooled_score[b];
    });

    const std::size_t n_imp = std::min(config.center_capacity(), n_candidates);
    const std::size_t n_tbm = std::min(config.tbm_target(), n_candidates - n_imp);
    part.important.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_imp));
    part.tbm.assign(order.begin() + static_cast<std::ptrdiff_t>(n_imp),
                    order.begin() + static_cast<std::ptrdiff_t>(n_imp + n_tbm));
    part.irrelevant.assign(order.begin() + static_cast<std::ptrdiff_t>(n_imp + n_tbm), order.end());
    std::sort(part.important.begin(), part.important.end());
    std::sort(part.tbm.begin(), part.tbm.end());
    std::sort(part.irrelevant.begin(), part.irrelevant.end());
    return part;
}

std::vector<std::int32_t> assign_merge_destinations(const Matrix& r_tbm_to_centers, double tau) {
    std::vector<std::int32_t> dest(r_tbm_to_centers.rows, kZeroClass);
    for (std::size_t i = 0; i < r_tbm_to_centers.rows; ++i) {
        if (r_tbm_to_centers.cols == 0) {
            continue;
        }
        std::size_t best = 0;
        double best_val = r_tbm_to_centers.at(i, 0);
        for (std::size_t c = 1; c < r_tbm_to_centers.cols; ++c) {
            if (r_tbm_to_centers.at(i, c) > best_val) {
                best_val = r_tbm_to_centers.at(i, c);
                best = c;
            }
        }
        if (best_val >= tau) {
            dest[i] = static_cast<std::int32_t>(best);
        }
    }
    return dest;
}

void weighted_merge(HeadCacheState& cache,
                    const std::vector<std::int32_t>& center_slot_by_column,
                    const Vector& center_weights,
                    const TbmTokens& tbm,
                    const std::vector<std::int32_t>& destinations,
                    const CompressionConfig& config) {
    if (destinations.size() != tbm.positions.size()) {
        throw std::invalid_argument("weighted_merge: destination count mismatch");
    }
    const std::size_t n_cols = center_slot_by_column.size();
    std::vector<std::vector<std::size_t>> members(n_cols);
    for (std::size_t i = 0; i < destinations.size(); ++i) {
        if (destinations[i] == kZeroClass) {
            if (config.eviction == EvictionRealization::zero_class) {
                cache.lut.push_back({tbm.positions[i], kZeroClass});
            }
            continue;
        }
        members[static_cast<std::size_t>(destinations[i])].push_back(i);
    }

    for (std::size_t c = 0; c < n_cols; ++c) {
        if (members[c].empty()) {
            continue;
        }
        const std::int32_t slot = center_slot_by_column[c];
        CenterEntry& center = *cache.slots[static_cast<std::size_t>(slot)];

        double weight_sum = center_weights[c];
        for (std::size_t i : members[c]) {
            weight_sum += tbm.weights[i];
        }

        const std::size_t d = cache.head_dim;
        Vector merged_key(d, 0.0);
        Vector merged_value(d, 0.0);
        auto accumulate = [&](std::span<const double> unit_key, std::span<const double> value,
                              double w) {
            for (std::size_t x = 0; x < d; ++x) {
                merged_key[x] += w * unit_key[x];
                merged_value[x] += w * value[x];
            }
        };

        const double uniform = 1.0 / static_cast<double>(members[c].size() + 1);
        accumulate(center.unit_key, center.value,
                   weight_sum > 0.0 ? center_weights[c] / weight_sum : uniform);
        for (std::size_t i : members[c]) {
            double dummy = 0.0;
            const Vector unit = normalized_or_zero(tbm.k_raw.row(i), dummy);
            accumulate(unit, tbm.v_raw.row(i), weight_sum > 0.0 ? tbm.weights[i] / weight_sum : uniform);
            center.score.add(tbm.score_triples[i]);
            cache.lut.push_back({tbm.positions[i], slot});
        }

        const double merged_norm = norm2(merged_key);
        if (merged_norm > 0.0) {
            for (double& x : merged_key) {
                x /= merged_norm;
            }
            center.unit_key = std::move(merged_key);
        }
        center.value = std::move(merged_value);
    }
}

HeadCacheState compress_prefill(const Matrix& k_raw, const Matrix& v_raw,
                                const ScoreState& scores, const CompressionConfig& config,
                                std::int64_t first_position) {
    config.validate();
    const std::size_t n = k_raw.rows;
    if (n == 0 || v_raw.rows != n || scores.size() != n) {
        throw std::invalid_argument("compress_prefill: inconsistent token counts");
    }
    HeadCacheState cache;
    cache.head_dim = k_raw.cols;

    if (n <= config.n_budget) {
        // Budget does not bind: keep every token exactly; decode graduates
        // them into centers as the window moves on.
        for (std::size_t i = 0; i < n; ++i) {
            cache.locals.push_back(make_local(k_raw, v_raw, i, first_position + static_cast<std::int64_t>(i), scores));
        }
        cache.compressed = false;
        return cache;
    }

    const std::size_t kernel = clamp_kernel(config.kernel_size, n);
    const Vector pooled = effective_score(scores, kernel);
    const TokenPartition part = partition_tokens(pooled, config);

    // Irrelevant tokens are dropped here (first-level eviction, no LUT trace).
    for (std::size_t idx : part.important) {
        CenterEntry c;
        double key_norm = 0.0;
        c.unit_key = normalized_or_zero(k_raw.row(idx), key_norm);
        c.key_norm = key_norm;
        c.value = v_raw.row_vec(idx);
        c.position = first_position + static_cast<std::int64_t>(idx);
        c.score = ScoreTriple{scores.glo[idx], scores.loc_past[idx], scores.loc_cur[idx]};
        const std::int32_t slot = cache.insert_center(std::move(c));
        cache.lut.push_back({cache.slots[static_cast<std::size_t>(slot)]->position, slot});
    }

    if (!part.tbm.empty()) {
        const std::size_t d = k_raw.cols;
        Matrix k_imp(part.important.size(), d);
        Matrix v_imp(part.important.size(), d);
        Vector imp_weights(part.important.size());
        std::vector<std::int32_t> slot_by_col(part.important.size());
        for (std::size_t c = 0; c < part.important.size(); ++c) {
            const std::size_t idx = part.important[c];
            std::copy_n(k_raw.row(idx).data(), d, k_imp.row(c).data());
            std::copy_n(v_raw.row(idx).data(), d, v_imp.row(c).data());
            imp_weights[c] = pooled[idx];
            slot_by_col[c] = static_cast<std::int32_t>(c);  // insertion order above
        }
        TbmTokens tbm;
        tbm.k_raw = Matrix(part.tbm.size(), d);
        tbm.v_raw = Matrix(part.tbm.size(), d);
        tbm.positions.resize(part.tbm.size());
        tbm.weights.resize(part.tbm.size());
        tbm.score_triples.resize(part.tbm.size());
        for (std::size_t i = 0; i < part.tbm.size(); ++i) {
            const std::size_t idx = part.tbm[i];
            std::copy_n(k_raw.row(idx).data(), d, tbm.k_raw.row(i).data());
            std::copy_n(v_raw.row(idx).data(), d, tbm.v_raw.row(i).data());
            tbm.positions[i] = first_position + static_cast<std::int64_t>(idx);
            tbm.weights[i] = pooled[idx];
            tbm.score_triples[i] = ScoreTriple{scores.glo[idx], scores.loc_past[idx], scores.loc_cur[idx]};
        }
        const Matrix r = redundancy_cross(tbm.k_raw, tbm.v_raw, k_imp, v_imp);
        const std::vector<std::int32_t> dest = assign_merge_destinations(r, config.tau);
        weighted_merge(cache, slot_by_col, imp_weights, tbm, dest, config);
    }

    for (std::size_t idx : part.local) {
        cache.locals.push_back(make_local(k_raw, v_raw, idx, first_position + static_cast<std::int64_t>(idx), scores));
    }

    std::sort(cache.lut.begin(), cache.lut.end(),
              [](const LutEntry& a, const LutEntry& b) { return a.position < b.position; });
    cache.compressed = true;
    cache.check_integrity();
    return cache;
}

double alignment_ratio(const HeadCacheState& cache) {
    double sum_glo = 0.0;
    double sum_loc = 0.0;
    for (const auto& s : cache.slots) {
        if (s.has_value()) {
            sum_glo += s->score.glo;
            sum_loc += s->score.loc();
        }
    }
    for (const auto& l : cache.locals) {
        sum_glo += l.score.glo;
        sum_loc += l.score.loc();
    }
    return sum_glo > 0.0 ? sum_loc / sum_glo : 0.0;
}

double combined_entry_score(const ScoreTriple& score, double align) {
    // With no local mass anywhere the alignment degenerates; rank by the
    // global accumulator alone.
    if (align <= 0.0) {
        return score.glo;
    }
    return std::max(score.glo * align, score.loc());
}

namespace {

void remove_one_lut_entry_at_capacity(HeadCacheState& cache, const CompressionConfig& config) {
    if (cache.lut.size() < config.lut_capacity()) {
        return;
    }
    // Oldest zero-mapped entry goes first; otherwise the oldest entry overall.
    auto it = std::find_if(cache.lut.begin(), cache.lut.end(),
                           [](const LutEntry& e) { return e.slot == kZeroClass; });
    if (it == cache.lut.end()) {
        it = cache.lut.begin();
    }
    cache.lut.erase(it);
}

// One least-important center becomes this step's TBM token and is merged or
// evicted; its slot is freed for the next graduation.
void retire_least_important_center(HeadCacheState& cache, const CompressionConfig& config) {
    const double align = alignment_ratio(cache);
    std::int32_t tbm_slot = -1;
    double tbm_score = 0.0;
    for (std::size_t i = 0; i < cache.slots.size(); ++i) {
        if (!cache.slots[i].has_value()) {
            continue;
        }
        const double s = combined_entry_score(cache.slots[i]->score, align);
        if (tbm_slot < 0 || s < tbm_score ||
            (s == tbm_score && cache.slots[i]->position < cache.slots[static_cast<std::size_t>(tbm_slot)]->position)) {
            tbm_slot = static_cast<std::int32_t>(i);
            tbm_score = s;
        }
    }
    const CenterEntry tbm = *cache.slots[static_cast<std::size_t>(tbm_slot)];

    std::int32_t best_slot = -1;
    double best_r = 0.0;
    for (std::size_t i = 0; i < cache.slots.size(); ++i) {
        if (!cache.slots[i].has_value() || static_cast<std::int32_t>(i) == tbm_slot) {
            continue;
        }
        const CenterEntry& c = *cache.slots[i];
        double r = 0.0;
        if (tbm.key_norm > 0.0 && c.key_norm > 0.0) {
            const double ck = std::clamp(dot(tbm.unit_key, c.unit_key), -1.0, 1.0);
            const double nv1 = norm2(tbm.value);
            const double nv2 = norm2(c.value);
            const double cv = (nv1 > 0.0 && nv2 > 0.0)
                                  ? std::clamp(dot(tbm.value, c.value) / (nv1 * nv2), -1.0, 1.0)
                                  : 0.0;
            r = ck * cv;
        }
        if (best_slot < 0 || r > best_r ||
            (r == best_r && cache.slots[i]->position < cache.slots[static_cast<std::size_t>(best_slot)]->position)) {
            best_slot = static_cast<std::int32_t>(i);
            best_r = r;
        }
    }

    if (best_slot >= 0 && best_r >= config.tau) {
        CenterEntry& dst = *cache.slots[static_cast<std::size_t>(best_slot)];
        const double align_now = align;
        double w_dst = combined_entry_score(dst.score, align_now);
        double w_tbm = combined_entry_score(tbm.score, align_now);
        double wsum = w_dst + w_tbm;
        if (wsum <= 0.0) {
            w_dst = 0.5;
            w_tbm = 0.5;
            wsum = 1.0;
        }
        Vector merged_key(cache.head_dim, 0.0);
        Vector merged_value(cache.head_dim, 0.0);
        for (std::size_t x = 0; x < cache.head_dim; ++x) {
            merged_key[x] = (w_dst / wsum) * dst.unit_key[x] + (w_tbm / wsum) * tbm.unit_key[x];
            merged_value[x] = (w_dst / wsum) * dst.value[x] + (w_tbm / wsum) * tbm.value[x];
        }
        const double mn = norm2(merged_key);
        if (mn > 0.0) {
            for (double& x : merged_key) {
                x /= mn;
            }
            dst.unit_key = std::move(merged_key);
        }
        dst.value = std::move(merged_value);
        dst.score.add(tbm.score);
        for (LutEntry& e : cache.lut) {
            if (e.slot == tbm_slot) {
                e.slot = best_slot;
            }
        }
    } else {
        if (config.eviction == EvictionRealization::zero_class) {
            for (LutEntry& e : cache.lut) {
                if (e.slot == tbm_slot) {
                    e.slot = kZeroClass;
                }
            }
        } else {
            cache.lut.erase(std::remove_if(cache.lut.begin(), cache.lut.end(),
                                           [&](const LutEntry& e) { return e.slot == tbm_slot; }),
                            cache.lut.end());
        }
    }
    cache.free_center(tbm_slot);
}

}  // namespace

void decode_update(HeadCacheState& cache, const CompressionConfig& config) {
    while (cache.locals.size() > config.l_win) {
        LocalEntry graduating = std::move(cache.locals.front());
        cache.locals.pop_front();

        CenterEntry c;
        double key_norm = 0.0;
        c.unit_key = normalized_or_zero(graduating.key, key_norm);
        c.key_norm = key_norm;
        c.value = std::move(graduating.value);
        c.position = graduating.position;
        c.score = graduating.score;

        remove_one_lut_entry_at_capacity(cache, config);
        const std::int32_t slot = cache.insert_center(std::move(c));
        cache.lut.push_back({graduating.position, slot});

        if (cache.alive_centers() > config.center_capacity()) {
            retire_least_important_center(cache, config);
            cache.compressed = true;
        }
    }
}

}  // namespace ems
