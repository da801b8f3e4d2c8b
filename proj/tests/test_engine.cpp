#include <cmath>
#include <random>

#include "doctest.h"
#include "ems/engine.hpp"
#include "ems/errors.hpp"
#include "ems/numerics.hpp"
#include "ems/reference.hpp"

using namespace ems;

namespace {

Matrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (double& x : m.data) {
        x = normal(gen);
    }
    return m;
}

Vector random_vector(std::mt19937_64& gen, std::size_t n) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(n);
    for (double& x : v) {
        x = normal(gen);
    }
    return v;
}

// Test-local causal attention oracle in extended precision, including the
// rotary map, deliberately written apart from the engine.
Vector naive_attention_row(const Vector& q_raw, const std::vector<Vector>& k_raw,
                           const std::vector<Vector>& v_raw, std::int64_t q_pos,
                           const RopeParams& rope) {
    const std::size_t n = k_raw.size();
    const std::size_t d = q_raw.size();
    const Vector q = apply_rope(q_raw, static_cast<double>(q_pos), rope);
    std::vector<long double> logits(n);
    long double m = -1e30L;
    for (std::size_t j = 0; j < n; ++j) {
        const Vector kj = apply_rope(k_raw[j], static_cast<double>(j), rope);
        long double acc = 0.0L;
        for (std::size_t x = 0; x < d; ++x) {
            acc += static_cast<long double>(q[x]) * kj[x];
        }
        logits[j] = acc / sqrtl(static_cast<long double>(d));
        m = std::max(m, logits[j]);
    }
    long double z = 0.0L;
    for (std::size_t j = 0; j < n; ++j) {
        logits[j] = expl(logits[j] - m);
        z += logits[j];
    }
    Vector out(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const double p = static_cast<double>(logits[j] / z);
        for (std::size_t x = 0; x < d; ++x) {
            out[x] += p * v_raw[j][x];
        }
    }
    return out;
}

CompressionConfig default_config(std::size_t budget, std::size_t l_win) {
    CompressionConfig c;
    c.n_budget = budget;
    c.l_win = l_win;
    c.tau = 0.6;
    c.gamma = 2.0;
    c.kernel_size = 5;
    return c;
}

}  // namespace

TEST_SUITE("engine") {

TEST_CASE("one-token prefill returns the value row exactly") {
    std::mt19937_64 gen(1);
    EngineState engine = make_engine(2, 8, PolicyHandle{PolicyKind::full}, default_config(16, 4));
    std::vector<Matrix> q(2), k(2), v(2);
    for (int h = 0; h < 2; ++h) {
        q[h] = random_matrix(gen, 1, 8);
        k[h] = random_matrix(gen, 1, 8);
        v[h] = random_matrix(gen, 1, 8);
    }
    const PrefillResult pf = prefill(engine, q, k, v);
    for (int h = 0; h < 2; ++h) {
        CHECK(pf.per_head[static_cast<std::size_t>(h)].outputs.data == v[static_cast<std::size_t>(h)].data);
    }
    CHECK_FALSE(pf.compression_applied);
}

TEST_CASE("identity policy reproduces dense attention bit for bit") {
    std::mt19937_64 gen(2);
    const std::size_t n = 24;
    const std::size_t d = 8;
    const std::size_t steps = 32;
    EngineState engine = make_engine(1, d, PolicyHandle{PolicyKind::full}, default_config(16, 4));

    const Matrix q = random_matrix(gen, n, d);
    const Matrix k = random_matrix(gen, n, d);
    const Matrix v = random_matrix(gen, n, d);
    const PrefillResult pf = prefill(engine, {q}, {k}, {v});

    const RopeParams rope{d, 10000.0};
    Matrix k_rot(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const Vector r = apply_rope(k.row_vec(i), static_cast<double>(i), rope);
        std::copy(r.begin(), r.end(), k_rot.row(i).begin());
    }
    Matrix q_rot(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const Vector r = apply_rope(q.row_vec(i), static_cast<double>(i), rope);
        std::copy(r.begin(), r.end(), q_rot.row(i).begin());
    }
    const AttentionOutput ref = reference::dense_causal_attention(q_rot, k_rot, v, true);
    CHECK(pf.per_head[0].outputs.data == ref.outputs.data);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            sum += ref.weights.at(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }

    Matrix k_all = k_rot;
    Matrix v_all = v;
    for (std::size_t s = 0; s < steps; ++s) {
        const std::int64_t pos = static_cast<std::int64_t>(n + s);
        const Vector qt = random_vector(gen, d);
        const Vector kt = random_vector(gen, d);
        const Vector vt = random_vector(gen, d);
        const DecodeResult dec = decode_step(engine, {qt}, {kt}, {vt});

        const Vector kt_rot = apply_rope(kt, static_cast<double>(pos), rope);
        k_all.data.insert(k_all.data.end(), kt_rot.begin(), kt_rot.end());
        k_all.rows += 1;
        v_all.data.insert(v_all.data.end(), vt.begin(), vt.end());
        v_all.rows += 1;
        const Vector ref_out = reference::dense_decode_row(
            apply_rope(qt, static_cast<double>(pos), rope), k_all, v_all, k_all.rows);
        CHECK(dec.per_head[0] == ref_out);
    }
}

TEST_CASE("decode after a single-token prefill matches the naive oracle") {
    std::mt19937_64 gen(3);
    const std::size_t d = 8;
    EngineState engine = make_engine(1, d, PolicyHandle{PolicyKind::full}, default_config(16, 4));
    const Matrix q0 = random_matrix(gen, 1, d);
    const Matrix k0 = random_matrix(gen, 1, d);
    const Matrix v0 = random_matrix(gen, 1, d);
    prefill(engine, {q0}, {k0}, {v0});
    const Vector q1 = random_vector(gen, d);
    const Vector k1 = random_vector(gen, d);
    const Vector v1 = random_vector(gen, d);
    const DecodeResult dec = decode_step(engine, {q1}, {k1}, {v1});
    const Vector oracle = naive_attention_row(q1, {k0.row_vec(0), k1}, {v0.row_vec(0), v1}, 1,
                                              RopeParams{d, 10000.0});
    for (std::size_t x = 0; x < d; ++x) {
        CHECK(std::abs(dec.per_head[0][x] - oracle[x]) < 1e-10);
    }
}

TEST_CASE("decode before prefill is a state error") {
    EngineState engine = make_engine(1, 4, PolicyHandle{PolicyKind::full}, default_config(8, 2));
    CHECK_THROWS_AS(decode_step(engine, {Vector(4)}, {Vector(4)}, {Vector(4)}), StateError);
}

TEST_CASE("expanded attention with self-mapped entries equals dense attention") {
    // gamma = 1 EMS: every kept token maps to itself, no merging.
    std::mt19937_64 gen(5);
    const std::size_t n = 40;
    const std::size_t d = 6;
    CompressionConfig c = default_config(12, 4);
    c.gamma = 1.0;
    EngineState engine = make_engine(1, d, PolicyHandle{PolicyKind::ems}, c);
    prefill(engine, {random_matrix(gen, n, d)}, {random_matrix(gen, n, d)},
            {random_matrix(gen, n, d)});
    const HeadCacheState& cache = engine.heads[0];
    REQUIRE(cache.compressed);

    const Vector q = random_vector(gen, d);
    const Vector got = attend_expanded(q, cache, c, engine.rope, static_cast<std::int64_t>(n));

    // Dense attention over the reconstructed stored tokens, in order.
    std::vector<Vector> keys;
    std::vector<Vector> values;
    std::vector<std::int64_t> positions;
    for (const LutEntry& e : cache.lut) {
        REQUIRE(e.slot != kZeroClass);
        const CenterEntry& center = *cache.slots[static_cast<std::size_t>(e.slot)];
        Vector key(d);
        for (std::size_t x = 0; x < d; ++x) {
            key[x] = center.unit_key[x] * center.key_norm;
        }
        keys.push_back(std::move(key));
        values.push_back(center.value);
        positions.push_back(e.position);
    }
    for (const LocalEntry& l : cache.locals) {
        keys.push_back(l.key);
        values.push_back(l.value);
        positions.push_back(l.position);
    }
    const RopeParams rope{d, 10000.0};
    Matrix k_rot(keys.size(), d);
    Matrix v_all(keys.size(), d);
    for (std::size_t j = 0; j < keys.size(); ++j) {
        const Vector kr = apply_rope(keys[j], static_cast<double>(positions[j]), rope);
        std::copy(kr.begin(), kr.end(), k_rot.row(j).begin());
        std::copy(values[j].begin(), values[j].end(), v_all.row(j).begin());
    }
    const Vector ref = reference::dense_decode_row(
        apply_rope(q, static_cast<double>(n), rope), k_rot, v_all, k_rot.rows);
    for (std::size_t x = 0; x < d; ++x) {
        CHECK(std::abs(got[x] - ref[x]) < 1e-12);
    }
}

TEST_CASE("zero-class entries are equivalent to explicit eviction") {
    std::mt19937_64 gen(6);
    const std::size_t n = 48;
    const std::size_t d = 6;
    CompressionConfig zero_cfg = default_config(12, 4);
    zero_cfg.tau = 1.0;  // duplicate-free input: every TBM token is evicted
    CompressionConfig explicit_cfg = zero_cfg;
    explicit_cfg.eviction = EvictionRealization::explicit_removal;

    const Matrix q = random_matrix(gen, n, d);
    const Matrix k = random_matrix(gen, n, d);
    const Matrix v = random_matrix(gen, n, d);

    EngineState a = make_engine(1, d, PolicyHandle{PolicyKind::ems}, zero_cfg);
    EngineState b = make_engine(1, d, PolicyHandle{PolicyKind::ems}, explicit_cfg);
    prefill(a, {q}, {k}, {v});
    prefill(b, {q}, {k}, {v});

    bool saw_zero_entry = false;
    for (const LutEntry& e : a.heads[0].lut) {
        saw_zero_entry = saw_zero_entry || e.slot == kZeroClass;
    }
    CHECK(saw_zero_entry);

    for (int s = 0; s < 40; ++s) {
        const Vector qt = random_vector(gen, d);
        const Vector kt = random_vector(gen, d);
        const Vector vt = random_vector(gen, d);
        const DecodeResult da = decode_step(a, {qt}, {kt}, {vt});
        const DecodeResult db = decode_step(b, {qt}, {kt}, {vt});
        for (std::size_t x = 0; x < d; ++x) {
            CHECK(std::abs(da.per_head[0][x] - db.per_head[0][x]) <= 1e-12);
        }
    }
}

TEST_CASE("two identical tokens merged into one center preserve attention") {
    // Build the merged cache by hand: one center with two LUT entries against
    // the dense computation over the two duplicate tokens.
    std::mt19937_64 gen(7);
    const std::size_t d = 8;
    const RopeParams rope{d, 10000.0};
    const Vector key = random_vector(gen, d);
    const Vector value = random_vector(gen, d);

    CompressionConfig c = default_config(8, 2);
    HeadCacheState merged;
    merged.head_dim = d;
    merged.compressed = true;
    CenterEntry center;
    center.key_norm = norm2(key);
    center.unit_key = key;
    for (double& x : center.unit_key) {
        x /= center.key_norm;
    }
    center.value = value;
    center.position = 0;
    merged.insert_center(center);
    merged.lut.push_back({0, 0});
    merged.lut.push_back({1, 0});
    LocalEntry local;
    local.key = random_vector(gen, d);
    local.value = random_vector(gen, d);
    local.position = 2;
    merged.locals.push_back(local);

    const Vector q = random_vector(gen, d);
    const Vector got = attend_expanded(q, merged, c, rope, 3);

    const Vector oracle = naive_attention_row(q, {key, key, local.key},
                                              {value, value, local.value}, 3, rope);
    for (std::size_t x = 0; x < d; ++x) {
        CHECK(std::abs(got[x] - oracle[x]) < 1e-10);
    }
}

TEST_CASE("corrupt LUT references are detected") {
    CompressionConfig c = default_config(8, 2);
    HeadCacheState cache;
    cache.head_dim = 4;
    cache.lut.push_back({0, 3});  // no such slot
    CHECK_THROWS_AS(attend_expanded(Vector(4, 1.0), cache, c, RopeParams{4, 10000.0}, 1),
                    CorruptionError);
}

TEST_CASE("budget invariant holds across a long decode") {
    std::mt19937_64 gen(8);
    const std::size_t n = 128;
    const std::size_t d = 8;
    CompressionConfig c = default_config(64, 8);
    EngineState engine = make_engine(2, d, PolicyHandle{PolicyKind::ems}, c);
    std::vector<Matrix> q(2), k(2), v(2);
    for (int h = 0; h < 2; ++h) {
        q[h] = random_matrix(gen, n, d);
        k[h] = random_matrix(gen, n, d);
        v[h] = random_matrix(gen, n, d);
    }
    prefill(engine, q, k, v);
    for (int s = 0; s < 512; ++s) {
        std::vector<Vector> qt(2), kt(2), vt(2);
        for (int h = 0; h < 2; ++h) {
            qt[h] = random_vector(gen, d);
            kt[h] = random_vector(gen, d);
            vt[h] = random_vector(gen, d);
        }
        decode_step(engine, qt, kt, vt);
        for (const HeadCacheState& head : engine.heads) {
            CHECK(head.stored_entries() == c.n_budget);
            CHECK(head.alive_centers() == c.center_capacity());
            CHECK(head.locals.size() == c.l_win);
            head.check_integrity();
        }
    }
}

TEST_CASE("short prompts skip compression and stay bit-identical to full") {
    std::mt19937_64 gen(9);
    const std::size_t d = 6;
    CompressionConfig c = default_config(16, 4);
    const Matrix q = random_matrix(gen, 10, d);
    const Matrix k = random_matrix(gen, 10, d);
    const Matrix v = random_matrix(gen, 10, d);
    EngineState ems_engine = make_engine(1, d, PolicyHandle{PolicyKind::ems}, c);
    EngineState full_engine = make_engine(1, d, PolicyHandle{PolicyKind::full}, c);
    const PrefillResult a = prefill(ems_engine, {q}, {k}, {v});
    prefill(full_engine, {q}, {k}, {v});
    CHECK_FALSE(a.compression_applied);
    REQUIRE(ems_engine.heads[0].locals.size() == full_engine.heads[0].locals.size());
    for (std::size_t i = 0; i < ems_engine.heads[0].locals.size(); ++i) {
        CHECK(ems_engine.heads[0].locals[i].key == full_engine.heads[0].locals[i].key);
        CHECK(ems_engine.heads[0].locals[i].value == full_engine.heads[0].locals[i].value);
    }
    CHECK(ems_engine.heads[0].alive_centers() == 0);
}

}  // TEST_SUITE
