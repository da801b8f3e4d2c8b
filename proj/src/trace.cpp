#include "ems/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include "ems/errors.hpp"
#include "ems/numerics.hpp"
#include "ems/rope.hpp"

namespace ems {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'T', 'R'};
constexpr std::uint32_t kVersion = 1;

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) {
            throw FormatError("cannot open trace file: " + path, 0);
        }
        in_.seekg(0, std::ios::end);
        file_size_ = static_cast<std::size_t>(in_.tellg());
        in_.seekg(0, std::ios::beg);
    }

    void require(std::size_t n, const char* what) const {
        if (n > file_size_ - offset_) {
            throw FormatError(std::string("trace too short for ") + what, offset_);
        }
    }

    void bytes(void* dst, std::size_t n, const char* what) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError(std::string("truncated trace while reading ") + what, offset_);
        }
        offset_ += n;
    }

    std::uint32_t u32(const char* what) {
        std::uint32_t v = 0;
        bytes(&v, sizeof(v), what);
        return v;
    }

    std::uint8_t u8(const char* what) {
        std::uint8_t v = 0;
        bytes(&v, sizeof(v), what);
        return v;
    }

    std::size_t offset() const { return offset_; }

private:
    std::ifstream in_;
    std::size_t offset_ = 0;
    std::size_t file_size_ = 0;
};

void read_block(Reader& r, std::vector<Matrix>& per_head, std::size_t tokens,
                std::size_t num_heads, std::size_t head_dim, const char* what) {
    r.require(tokens * num_heads * head_dim * sizeof(float), what);
    per_head.assign(num_heads, Matrix(tokens, head_dim));
    std::vector<float> buf(num_heads * head_dim);
    for (std::size_t t = 0; t < tokens; ++t) {
        const std::size_t row_offset = r.offset();
        r.bytes(buf.data(), buf.size() * sizeof(float), what);
        for (std::size_t h = 0; h < num_heads; ++h) {
            for (std::size_t d = 0; d < head_dim; ++d) {
                const float x = buf[h * head_dim + d];
                if (!std::isfinite(x)) {
                    throw FormatError(std::string("non-finite value in ") + what, row_offset);
                }
                per_head[h].at(t, d) = static_cast<double>(x);
            }
        }
    }
}

void write_block(std::ofstream& out, const std::vector<Matrix>& per_head, std::size_t tokens,
                 std::size_t num_heads, std::size_t head_dim) {
    std::vector<float> buf(num_heads * head_dim);
    for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t h = 0; h < num_heads; ++h) {
            for (std::size_t d = 0; d < head_dim; ++d) {
                buf[h * head_dim + d] = static_cast<float>(per_head[h].at(t, d));
            }
        }
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
}

double snap_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

void Trace::validate() const {
    if (steps.empty() || steps[0].kind != TraceStep::Kind::prefill) {
        throw FormatError("trace must start with a prefill step", 0);
    }
    for (std::size_t s = 1; s < steps.size(); ++s) {
        if (steps[s].kind != TraceStep::Kind::decode) {
            throw FormatError("trace has more than one prefill step", 0);
        }
        if (steps[s].token_count() != 1) {
            throw FormatError("decode steps must carry exactly one token", 0);
        }
    }
}

Trace load_trace(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad magic, expected KVTR", 0);
    }
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError("unsupported KVTR version " + std::to_string(version), 4);
    }
    Trace trace;
    trace.num_heads = r.u32("num_heads");
    trace.head_dim = r.u32("head_dim");
    const std::uint32_t step_count = r.u32("step_count");
    if (trace.num_heads == 0 || trace.head_dim == 0) {
        throw FormatError("num_heads and head_dim must be positive", 8);
    }
    trace.steps.resize(step_count);
    for (std::uint32_t s = 0; s < step_count; ++s) {
        const std::uint8_t kind = r.u8("step kind");
        if (kind > 1) {
            throw FormatError("bad step kind " + std::to_string(kind), r.offset() - 1);
        }
        TraceStep& step = trace.steps[s];
        step.kind = static_cast<TraceStep::Kind>(kind);
        const std::uint32_t tokens = r.u32("token_count");
        if (tokens == 0) {
            throw FormatError("step with zero tokens", r.offset() - 4);
        }
        read_block(r, step.q, tokens, trace.num_heads, trace.head_dim, "Q block");
        read_block(r, step.k, tokens, trace.num_heads, trace.head_dim, "K block");
        read_block(r, step.v, tokens, trace.num_heads, trace.head_dim, "V block");
    }
    trace.validate();
    return trace;
}

void save_trace(const Trace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    out.write(kMagic, 4);
    const std::uint32_t header[4] = {kVersion, static_cast<std::uint32_t>(trace.num_heads),
                                     static_cast<std::uint32_t>(trace.head_dim),
                                     static_cast<std::uint32_t>(trace.steps.size())};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    for (const TraceStep& step : trace.steps) {
        const std::uint8_t kind = static_cast<std::uint8_t>(step.kind);
        out.write(reinterpret_cast<const char*>(&kind), 1);
        const std::uint32_t tokens = static_cast<std::uint32_t>(step.token_count());
        out.write(reinterpret_cast<const char*>(&tokens), sizeof(tokens));
        write_block(out, step.q, tokens, trace.num_heads, trace.head_dim);
        write_block(out, step.k, tokens, trace.num_heads, trace.head_dim);
        write_block(out, step.v, tokens, trace.num_heads, trace.head_dim);
    }
    if (!out) {
        throw std::runtime_error("write failed: " + path);
    }
}

SynthKind synth_kind_from_name(const std::string& name) {
    if (name == "random") return SynthKind::random;
    if (name == "redundant") return SynthKind::redundant;
    if (name == "needle") return SynthKind::needle;
    throw std::invalid_argument("unknown synthetic kind: " + name);
}

std::int64_t needle_position(std::size_t tokens, double depth) {
    const double clamped = std::clamp(depth, 0.0, 1.0);
    return static_cast<std::int64_t>(clamped * static_cast<double>(tokens - 1));
}

namespace {

struct Rng {
    std::mt19937_64 gen;
    std::normal_distribution<double> normal{0.0, 1.0};

    explicit Rng(std::uint64_t seed) : gen(seed) {}
    double gauss() { return normal(gen); }

    Vector gauss_vec(std::size_t n) {
        Vector v(n);
        for (double& x : v) {
            x = gauss();
        }
        return v;
    }

    Vector unit_vec(std::size_t n) {
        Vector v = gauss_vec(n);
        const double nn = norm2(v);
        for (double& x : v) {
            x /= nn;
        }
        return v;
    }
};

void snap_step(TraceStep& step) {
    for (auto* blocks : {&step.q, &step.k, &step.v}) {
        for (Matrix& m : *blocks) {
            for (double& x : m.data) {
                x = snap_f32(x);
            }
        }
    }
}

TraceStep blank_step(TraceStep::Kind kind, std::size_t tokens, std::size_t heads, std::size_t dim) {
    TraceStep s;
    s.kind = kind;
    s.q.assign(heads, Matrix(tokens, dim));
    s.k.assign(heads, Matrix(tokens, dim));
    s.v.assign(heads, Matrix(tokens, dim));
    return s;
}

Trace gen_random(std::uint64_t seed, const SynthParams& p) {
    Rng rng(seed);
    Trace t;
    t.num_heads = p.heads;
    t.head_dim = p.dim;
    TraceStep prefill = blank_step(TraceStep::Kind::prefill, p.tokens, p.heads, p.dim);
    for (std::size_t h = 0; h < p.heads; ++h) {
        for (double& x : prefill.q[h].data) x = rng.gauss();
        for (double& x : prefill.k[h].data) x = rng.gauss();
        for (double& x : prefill.v[h].data) x = rng.gauss();
    }
    snap_step(prefill);
    t.steps.push_back(std::move(prefill));
    for (std::size_t s = 0; s < p.decode_steps; ++s) {
        TraceStep step = blank_step(TraceStep::Kind::decode, 1, p.heads, p.dim);
        for (std::size_t h = 0; h < p.heads; ++h) {
            for (double& x : step.q[h].data) x = rng.gauss();
            for (double& x : step.k[h].data) x = rng.gauss();
            for (double& x : step.v[h].data) x = rng.gauss();
        }
        snap_step(step);
        t.steps.push_back(std::move(step));
    }
    return t;
}

Trace gen_redundant(std::uint64_t seed, const SynthParams& p) {
    if (p.level < 0.0 || p.level >= 1.0) {
        throw std::invalid_argument("redundant: level must be in [0, 1)");
    }
    Rng rng(seed);
    Trace t;
    t.num_heads = p.heads;
    t.head_dim = p.dim;
    const std::size_t n = p.tokens;
    // Enough replicas that the measured redundancy rate clears the target even
    // though the first token can never count as redundant.
    const std::size_t copies = std::min(n - 1, static_cast<std::size_t>(std::ceil(p.level * static_cast<double>(n))) + 1);

    std::vector<bool> is_copy(n, false);
    {
        std::vector<std::size_t> idx(n - 1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i + 1;
        }
        std::shuffle(idx.begin(), idx.end(), rng.gen);
        for (std::size_t i = 0; i < copies; ++i) {
            is_copy[idx[i]] = true;
        }
    }

    TraceStep prefill = blank_step(TraceStep::Kind::prefill, n, p.heads, p.dim);
    for (std::size_t h = 0; h < p.heads; ++h) {
        std::vector<std::size_t> bases;
        for (std::size_t tok = 0; tok < n; ++tok) {
            Vector key;
            Vector value;
            if (is_copy[tok] && !bases.empty()) {
                std::uniform_int_distribution<std::size_t> pick(0, bases.size() - 1);
                const std::size_t base = bases[pick(rng.gen)];
                key = prefill.k[h].row_vec(base);
                value = prefill.v[h].row_vec(base);
                for (double& x : key) {
                    x += p.perturb * rng.gauss();
                }
                for (double& x : value) {
                    x += p.perturb * rng.gauss();
                }
            } else {
                key = rng.gauss_vec(p.dim);
                value = rng.gauss_vec(p.dim);
                bases.push_back(tok);
            }
            std::copy(key.begin(), key.end(), prefill.k[h].row(tok).begin());
            std::copy(value.begin(), value.end(), prefill.v[h].row(tok).begin());
            const Vector q = rng.gauss_vec(p.dim);
            std::copy(q.begin(), q.end(), prefill.q[h].row(tok).begin());
        }
    }
    snap_step(prefill);
    t.steps.push_back(std::move(prefill));
    for (std::size_t s = 0; s < p.decode_steps; ++s) {
        TraceStep step = blank_step(TraceStep::Kind::decode, 1, p.heads, p.dim);
        for (std::size_t h = 0; h < p.heads; ++h) {
            for (double& x : step.q[h].data) x = rng.gauss();
            for (double& x : step.k[h].data) x = rng.gauss();
            for (double& x : step.v[h].data) x = rng.gauss();
        }
        snap_step(step);
        t.steps.push_back(std::move(step));
    }
    return t;
}

Trace gen_needle(std::uint64_t seed, const SynthParams& p) {
    if (p.depth < 0.0 || p.depth > 1.0) {
        throw std::invalid_argument("needle: depth must be in [0, 1]");
    }
    if (p.tokens < 2) {
        throw std::invalid_argument("needle: need at least 2 tokens");
    }
    Rng rng(seed);
    Trace t;
    t.num_heads = p.heads;
    t.head_dim = p.dim;
    const std::size_t n = p.tokens;
    const std::int64_t pos = needle_position(n, p.depth);
    const RopeParams rope{p.dim, 10000.0};
    const double anchor = p.anchor_gain * std::sqrt(static_cast<double>(p.dim));

    std::vector<Vector> needle_dir(p.heads);
    std::vector<Vector> value_dir(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        needle_dir[h] = rng.unit_vec(p.dim);
        value_dir[h] = rng.unit_vec(p.dim);
    }

    auto aligned_query = [&](std::size_t h, std::int64_t qpos) {
        // The random part is projected off the needle direction so the needle
        // logit is exactly needle_gain * anchor_gain, noise-free.
        Vector target = rng.gauss_vec(p.dim);
        const double along = dot(target, needle_dir[h]);
        for (std::size_t d = 0; d < p.dim; ++d) {
            target[d] += (anchor - along) * needle_dir[h][d];
        }
        return detail::rotate(target, -static_cast<double>(qpos), rope);
    };

    TraceStep prefill = blank_step(TraceStep::Kind::prefill, n, p.heads, p.dim);
    const std::size_t anchor_start = n - std::min(p.anchor_rows, n);
    for (std::size_t h = 0; h < p.heads; ++h) {
        for (std::size_t tok = 0; tok < n; ++tok) {
            Vector key;
            Vector value;
            if (static_cast<std::int64_t>(tok) == pos) {
                Vector target(p.dim);
                for (std::size_t d = 0; d < p.dim; ++d) {
                    target[d] = p.needle_gain * needle_dir[h][d];
                }
                key = detail::rotate(target, -static_cast<double>(pos), rope);
                value.assign(p.dim, 0.0);
                for (std::size_t d = 0; d < p.dim; ++d) {
                    value[d] = p.value_gain * value_dir[h][d];
                }
            } else {
                key = rng.gauss_vec(p.dim);
                value = rng.gauss_vec(p.dim);
            }
            std::copy(key.begin(), key.end(), prefill.k[h].row(tok).begin());
            std::copy(value.begin(), value.end(), prefill.v[h].row(tok).begin());
            const Vector q = tok >= anchor_start
                                 ? aligned_query(h, static_cast<std::int64_t>(tok))
                                 : rng.gauss_vec(p.dim);
            std::copy(q.begin(), q.end(), prefill.q[h].row(tok).begin());
        }
    }
    snap_step(prefill);
    t.steps.push_back(std::move(prefill));
    for (std::size_t s = 0; s < p.decode_steps; ++s) {
        TraceStep step = blank_step(TraceStep::Kind::decode, 1, p.heads, p.dim);
        const std::int64_t qpos = static_cast<std::int64_t>(n + s);
        for (std::size_t h = 0; h < p.heads; ++h) {
            const Vector q = aligned_query(h, qpos);
            std::copy(q.begin(), q.end(), step.q[h].row(0).begin());
            for (double& x : step.k[h].data) x = rng.gauss();
            for (double& x : step.v[h].data) x = rng.gauss();
        }
        snap_step(step);
        t.steps.push_back(std::move(step));
    }
    return t;
}

}  // namespace

Trace gen_synthetic(SynthKind kind, std::uint64_t seed, const SynthParams& params) {
    if (params.tokens == 0 || params.heads == 0 || params.dim == 0 || params.dim % 2 != 0) {
        throw std::invalid_argument("gen_synthetic: need tokens, heads >= 1 and even dim");
    }
    switch (kind) {
        case SynthKind::random:
            return gen_random(seed, params);
        case SynthKind::redundant:
            return gen_redundant(seed, params);
        case SynthKind::needle:
            return gen_needle(seed, params);
    }
    throw std::invalid_argument("gen_synthetic: bad kind");
}

}  // namespace ems
