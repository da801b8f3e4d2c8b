#include "ems/cache.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ems/errors.hpp"

namespace ems {

void CompressionConfig::validate() const {
    if (n_budget == 0 || l_win == 0 || n_budget <= l_win) {
        throw std::invalid_argument("CompressionConfig: require n_budget > l_win > 0");
    }
    if (tau < 0.0 || tau > 1.0) {
        throw std::invalid_argument("CompressionConfig: tau must be in [0, 1]");
    }
    if (gamma < 1.0) {
        throw std::invalid_argument("CompressionConfig: gamma must be >= 1");
    }
    if (zeta <= 0.0 || zeta > 1.0) {
        throw std::invalid_argument("CompressionConfig: zeta must be in (0, 1]");
    }
    if (kernel_size % 2 == 0 || kernel_size == 0) {
        throw std::invalid_argument("CompressionConfig: kernel_size must be odd");
    }
}

std::size_t HeadCacheState::alive_centers() const {
    std::size_t n = 0;
    for (const auto& s : slots) {
        if (s.has_value()) {
            ++n;
        }
    }
    return n;
}

std::size_t HeadCacheState::bytes_stored() const {
    const std::size_t entries = stored_entries();
    const std::size_t scalar = sizeof(double);
    return entries * head_dim * scalar * 2  // K and V
           + entries * 4 * scalar           // |K|, s_Glo, s_Loc_past, s_Loc_cur
           + lut.size() * scalar;
}

std::int32_t HeadCacheState::insert_center(CenterEntry entry) {
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (!slots[i].has_value()) {
            slots[i] = std::move(entry);
            return static_cast<std::int32_t>(i);
        }
    }
    slots.push_back(std::move(entry));
    return static_cast<std::int32_t>(slots.size() - 1);
}

void HeadCacheState::free_center(std::int32_t slot) {
    if (slot < 0 || static_cast<std::size_t>(slot) >= slots.size() || !slots[slot].has_value()) {
        throw CorruptionError("free_center: slot is not alive");
    }
    slots[static_cast<std::size_t>(slot)].reset();
}

void HeadCacheState::check_integrity() const {
    std::int64_t prev = INT64_MIN;
    for (const auto& e : lut) {
        if (e.slot != kZeroClass) {
            if (e.slot < 0 || static_cast<std::size_t>(e.slot) >= slots.size() ||
                !slots[static_cast<std::size_t>(e.slot)].has_value()) {
                throw CorruptionError("lut entry references a nonexistent slot");
            }
        }
        if (e.position <= prev) {
            throw CorruptionError("lut positions are not strictly increasing");
        }
        prev = e.position;
    }
}

bool HeadCacheState::position_represented(std::int64_t position) const {
    for (const auto& e : lut) {
        if (e.position == position) {
            return e.slot != kZeroClass;
        }
    }
    for (const auto& l : locals) {
        if (l.position == position) {
            return true;
        }
    }
    for (const auto& s : slots) {
        if (s.has_value() && s->position == position) {
            return true;
        }
    }
    return false;
}

void HeadCacheState::rotate_score_windows() {
    for (auto& s : slots) {
        if (s.has_value()) {
            s->score.loc_past = s->score.loc_cur;
            s->score.loc_cur = 0.0;
        }
    }
    for (auto& l : locals) {
        l.score.loc_past = l.score.loc_cur;
        l.score.loc_cur = 0.0;
    }
}

std::string cache_dump_json(const HeadCacheState& cache) {
    nlohmann::ordered_json j;
    j["head_dim"] = cache.head_dim;
    j["compressed"] = cache.compressed;
    auto centers = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < cache.slots.size(); ++i) {
        if (!cache.slots[i].has_value()) {
            continue;
        }
        const CenterEntry& c = *cache.slots[i];
        nlohmann::ordered_json jc;
        jc["slot"] = i;
        jc["position"] = c.position;
        jc["key_norm"] = c.key_norm;
        jc["unit_key"] = c.unit_key;
        jc["value"] = c.value;
        jc["score"] = {{"glo", c.score.glo}, {"loc_past", c.score.loc_past}, {"loc_cur", c.score.loc_cur}};
        centers.push_back(std::move(jc));
    }
    j["centers"] = std::move(centers);
    auto locals = nlohmann::ordered_json::array();
    for (const LocalEntry& l : cache.locals) {
        nlohmann::ordered_json jl;
        jl["position"] = l.position;
        jl["key"] = l.key;
        jl["value"] = l.value;
        jl["score"] = {{"glo", l.score.glo}, {"loc_past", l.score.loc_past}, {"loc_cur", l.score.loc_cur}};
        locals.push_back(std::move(jl));
    }
    j["locals"] = std::move(locals);
    auto lut = nlohmann::ordered_json::array();
    for (const LutEntry& e : cache.lut) {
        lut.push_back({{"position", e.position}, {"slot", e.slot}});
    }
    j["lut"] = std::move(lut);
    return j.dump(2);
}

}  // namespace ems
