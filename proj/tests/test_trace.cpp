#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

#include "doctest.h"
#include "ems/analysis.hpp"
#include "ems/errors.hpp"
#include "ems/reference.hpp"
#include "ems/rope.hpp"
#include "ems/trace.hpp"

using namespace ems;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("trace") {

TEST_CASE("save and load round-trip byte-identically") {
    SynthParams p;
    p.tokens = 24;
    p.heads = 3;
    p.dim = 6;
    p.decode_steps = 5;
    const Trace t = gen_synthetic(SynthKind::random, 99, p);
    const std::string path_a = temp_path("ems_roundtrip_a.kvtr");
    const std::string path_b = temp_path("ems_roundtrip_b.kvtr");
    save_trace(t, path_a);
    const Trace loaded = load_trace(path_a);
    save_trace(loaded, path_b);
    CHECK(slurp(path_a) == slurp(path_b));
    CHECK(loaded.num_heads == 3);
    CHECK(loaded.head_dim == 6);
    CHECK(loaded.prefill_tokens() == 24);
    CHECK(loaded.decode_steps() == 5);
    for (std::size_t h = 0; h < 3; ++h) {
        CHECK(loaded.steps[0].q[h].data == t.steps[0].q[h].data);
        CHECK(loaded.steps[0].k[h].data == t.steps[0].k[h].data);
        CHECK(loaded.steps[0].v[h].data == t.steps[0].v[h].data);
    }
    std::remove(path_a.c_str());
    std::remove(path_b.c_str());
}

TEST_CASE("malformed files raise format errors with offsets") {
    const std::string path = temp_path("ems_bad.kvtr");
    {
        std::ofstream out(path, std::ios::binary);
    }
    CHECK_THROWS_AS(load_trace(path), FormatError);

    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE";
    }
    CHECK_THROWS_AS(load_trace(path), FormatError);

    {
        std::ofstream out(path, std::ios::binary);
        out << "KVTR";
        const std::uint32_t version = 9;
        out.write(reinterpret_cast<const char*>(&version), 4);
    }
    try {
        load_trace(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.offset == 4);
    }

    // Truncated mid-block.
    SynthParams p;
    p.tokens = 8;
    p.heads = 1;
    p.dim = 4;
    p.decode_steps = 0;
    save_trace(gen_synthetic(SynthKind::random, 1, p), path);
    const std::string full = slurp(path);
    {
        std::ofstream out(path, std::ios::binary);
        out.write(full.data(), static_cast<std::streamsize>(full.size() / 2));
    }
    CHECK_THROWS_AS(load_trace(path), FormatError);

    // Non-finite payload values violate the finiteness invariant.
    {
        std::string bad = full;
        const float inf = std::numeric_limits<float>::infinity();
        std::memcpy(bad.data() + 25, &inf, sizeof(inf));  // first Q value
        std::ofstream out(path, std::ios::binary);
        out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(load_trace(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("the golden trace parses to its known shape") {
    const Trace t = load_trace(std::string(EMS_FIXTURE_DIR) + "/golden.kvtr");
    CHECK(t.num_heads == 2);
    CHECK(t.head_dim == 8);
    CHECK(t.prefill_tokens() == 16);
    CHECK(t.decode_steps() == 4);
}

TEST_CASE("generation is deterministic in the seed") {
    SynthParams p;
    p.tokens = 16;
    p.heads = 2;
    p.dim = 4;
    p.decode_steps = 2;
    const Trace a = gen_synthetic(SynthKind::redundant, 7, p);
    const Trace b = gen_synthetic(SynthKind::redundant, 7, p);
    const Trace c = gen_synthetic(SynthKind::redundant, 8, p);
    REQUIRE(a.steps.size() == b.steps.size());
    bool all_equal = true;
    bool any_differs_from_c = false;
    for (std::size_t s = 0; s < a.steps.size(); ++s) {
        for (std::size_t h = 0; h < a.num_heads; ++h) {
            all_equal = all_equal && a.steps[s].q[h].data == b.steps[s].q[h].data &&
                        a.steps[s].k[h].data == b.steps[s].k[h].data &&
                        a.steps[s].v[h].data == b.steps[s].v[h].data;
            any_differs_from_c = any_differs_from_c || a.steps[s].k[h].data != c.steps[s].k[h].data;
        }
    }
    CHECK(all_equal);
    CHECK(any_differs_from_c);
}

TEST_CASE("redundant traces meet the requested redundancy level") {
    for (double level : {0.5, 0.8}) {
        SynthParams p;
        p.tokens = 128;
        p.heads = 2;
        p.dim = 8;
        p.decode_steps = 0;
        p.level = level;
        const Trace t = gen_synthetic(SynthKind::redundant, 31, p);
        for (std::size_t h = 0; h < p.heads; ++h) {
            const double rate = redundancy_rate_direct(t.steps[0].k[h], t.steps[0].v[h], 0.6);
            CHECK(rate >= level);
        }
    }
}

TEST_CASE("the needle draws the reference argmax at every decode query") {
    SynthParams p;
    p.tokens = 256;
    p.heads = 2;
    p.dim = 16;
    p.decode_steps = 4;
    p.depth = 0.5;
    p.anchor_rows = 16;
    const Trace t = gen_synthetic(SynthKind::needle, 5, p);
    const std::int64_t pos = needle_position(p.tokens, p.depth);
    const RopeParams rope{p.dim, 10000.0};

    for (std::size_t h = 0; h < p.heads; ++h) {
        Matrix k_rot(p.tokens, p.dim);
        Matrix v_all = t.steps[0].v[h];
        for (std::size_t i = 0; i < p.tokens; ++i) {
            const Vector kr = apply_rope(t.steps[0].k[h].row_vec(i), static_cast<double>(i), rope);
            std::copy(kr.begin(), kr.end(), k_rot.row(i).begin());
        }
        for (std::size_t s = 0; s < p.decode_steps; ++s) {
            const std::int64_t qpos = static_cast<std::int64_t>(p.tokens + s);
            const Vector kr =
                apply_rope(t.steps[s + 1].k[h].row_vec(0), static_cast<double>(qpos), rope);
            k_rot.data.insert(k_rot.data.end(), kr.begin(), kr.end());
            k_rot.rows += 1;
            v_all.data.insert(v_all.data.end(), t.steps[s + 1].v[h].row(0).begin(),
                              t.steps[s + 1].v[h].row(0).end());
            v_all.rows += 1;
            Vector probs;
            reference::dense_decode_row(
                apply_rope(t.steps[s + 1].q[h].row_vec(0), static_cast<double>(qpos), rope), k_rot,
                v_all, k_rot.rows, &probs);
            std::size_t best = 0;
            for (std::size_t j = 1; j < probs.size(); ++j) {
                if (probs[j] > probs[best]) {
                    best = j;
                }
            }
            CHECK(static_cast<std::int64_t>(best) == pos);
        }
    }
}

TEST_CASE("invalid synthetic parameters are rejected") {
    SynthParams p;
    p.tokens = 16;
    p.dim = 4;
    p.depth = 1.5;
    CHECK_THROWS_AS(gen_synthetic(SynthKind::needle, 1, p), std::invalid_argument);
    p.depth = 0.5;
    p.level = 1.0;
    CHECK_THROWS_AS(gen_synthetic(SynthKind::redundant, 1, p), std::invalid_argument);
    p.level = 0.5;
    p.dim = 5;
    CHECK_THROWS_AS(gen_synthetic(SynthKind::random, 1, p), std::invalid_argument);
}

}  // TEST_SUITE
