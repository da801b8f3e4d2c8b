#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "ems/types.hpp"

namespace ems {

enum class PositionMode { with_pos, without_pos };

// The two mathematically equivalent realizations of second-level eviction:
// map the token to the zero class (uniform merge machinery) or drop its
// look-up-table entries outright.
enum class EvictionRealization { zero_class, explicit_removal };

struct CompressionConfig {
    std::size_t n_budget = 256;  // stored entries per head: class centers + locals
    std::size_t l_win = 32;
    double tau = 0.6;    // merge threshold, [0,1]
    double gamma = 4.0;  // merge magnification factor, >= 1
    double zeta = 0.95;  // sparsity mass fraction, (0,1]
    std::size_t kernel_size = 7;  // odd
    PositionMode position_mode = PositionMode::with_pos;
    EvictionRealization eviction = EvictionRealization::zero_class;

    void validate() const;

    std::size_t center_capacity() const { return n_budget - l_win; }
    std::size_t tbm_target() const {
        return static_cast<std::size_t>((gamma - 1.0) * static_cast<double>(n_budget));
    }
    std::size_t lut_capacity() const {
        return static_cast<std::size_t>(gamma * static_cast<double>(n_budget));
    }
};

struct ScoreTriple {
    double glo = 0.0;
    double loc_past = 0.0;
    double loc_cur = 0.0;

    double loc() const { return loc_past + loc_cur; }
    void add(const ScoreTriple& o) {
        glo += o.glo;
        loc_past += o.loc_past;
        loc_cur += o.loc_cur;
    }
};

// A class center: unit-norm raw (pre-RoPE) key plus its preserved norm
// scalar. Values are merged unnormalized.
struct CenterEntry {
    Vector unit_key;
    double key_norm = 0.0;
    Vector value;
    std::int64_t position = 0;
    ScoreTriple score;
};

// Local-window tokens are stored exactly as they arrived.
struct LocalEntry {
    Vector key;
    Vector value;
    std::int64_t position = 0;
    ScoreTriple score;
};

inline constexpr std::int32_t kZeroClass = -1;

struct LutEntry {
    std::int64_t position = 0;
    std::int32_t slot = kZeroClass;
};

// Per-head compressed KV store. Slots are stable so look-up-table references
// survive merges; a freed slot is reused by the next graduating token.
struct HeadCacheState {
    std::size_t head_dim = 0;
    std::vector<std::optional<CenterEntry>> slots;
    std::deque<LocalEntry> locals;
    std::vector<LutEntry> lut;
    bool compressed = false;      // a budget-binding compression has happened
    std::size_t window_fill = 0;  // decode-window counter, in [0, l_win)

    std::size_t alive_centers() const;
    std::size_t stored_entries() const { return alive_centers() + locals.size(); }

    // Storage accounting: K and V at head_dim doubles per stored entry, plus
    // one scalar per entry for each of |K|, s_Glo, s_Loc_past, s_Loc_cur,
    // plus one scalar per look-up-table entry.
    std::size_t bytes_stored() const;

    // Lowest free slot, appending when none is free. Returns the slot index.
    std::int32_t insert_center(CenterEntry entry);
    void free_center(std::int32_t slot);

    // Throws CorruptionError on dangling slot references or a non-increasing
    // position sequence in the look-up-table.
    void check_integrity() const;

    // True if the logical position is still represented (as a live LUT entry
    // or a local token).
    bool position_represented(std::int64_t position) const;

    // loc_past <- loc_cur for every stored entry; called on window rotation.
    void rotate_score_windows();
};

// Diagnostic dump used by golden-file tests.
std::string cache_dump_json(const HeadCacheState& cache);

}  // namespace ems
