// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "laserkv/core.hpp"
#include "laserkv/error.hpp"
#include "laserkv/rng.hpp"

namespace laserkv {

struct NeedleAnnotation {
    std::size_t position = 0;
    /// Designed cosine between the needle key and the probe query, per (layer, head).
    float target_cosine = 1.0F;
    std::string label;

    friend bool operator==(const NeedleAnnotation&, const NeedleAnnotation&) = default;
};

/**
 * @brief Keys, values and queries for a token sequence over every (layer, head) slot.
 *
 * Tensors are flat float arrays in (token, layer, head, dim) order. The probe query used
 * for needle planting and retrieval metrics is the final token's query.
 */
class KvTrace {
public:
    KvTrace() = default;
    KvTrace(ModelShape shape, std::size_t num_tokens, std::uint64_t seed = 0)
        : m_shape(shape), m_num_tokens(num_tokens), m_seed(seed) {
        LASERKV_CHECK(shape.valid(), ErrorCode::ShapeMismatch, "invalid model shape");
        const std::size_t n = num_tokens * shape.slots() * shape.head_dim;
        m_keys.assign(n, 0.0F);
        m_values.assign(n, 0.0F);
        m_queries.assign(n, 0.0F);
    }

    const ModelShape& shape() const noexcept {
        return m_shape;
    }
    std::size_t num_tokens() const noexcept {
        return m_num_tokens;
    }
    std::uint64_t seed() const noexcept {
        return m_seed;
    }
    const std::vector<NeedleAnnotation>& needles() const noexcept {
        return m_needles;
    }

    /// Replaces the needle list; positions must be strictly increasing and in range.
    void set_needles(std::vector<NeedleAnnotation> needles) {
        for (std::size_t i = 0; i < needles.size(); ++i) {
            LASERKV_CHECK(needles[i].position < m_num_tokens, ErrorCode::OutOfRange, "needle position out of range");
            LASERKV_CHECK(i == 0 || needles[i - 1].position < needles[i].position, ErrorCode::InvalidArgument,
                          "needle positions must be strictly increasing");
        }
        m_needles = std::move(needles);
    }

    std::size_t row_offset(std::size_t token, std::size_t layer, std::size_t head) const noexcept {
        return ((token * m_shape.num_layers + layer) * m_shape.num_heads + head) * m_shape.head_dim;
    }
    std::size_t token_stride() const noexcept {
        return m_shape.slots() * m_shape.head_dim;
    }

    std::span<const float> key(std::size_t t, std::size_t l, std::size_t h) const noexcept {
        return {m_keys.data() + row_offset(t, l, h), m_shape.head_dim};
    }
    std::span<const float> value(std::size_t t, std::size_t l, std::size_t h) const noexcept {
        return {m_values.data() + row_offset(t, l, h), m_shape.head_dim};
    }
    std::span<const float> query(std::size_t t, std::size_t l, std::size_t h) const noexcept {
        return {m_queries.data() + row_offset(t, l, h), m_shape.head_dim};
    }
    std::span<float> key(std::size_t t, std::size_t l, std::size_t h) noexcept {
        return {m_keys.data() + row_offset(t, l, h), m_shape.head_dim};
    }
    std::span<float> value(std::size_t t, std::size_t l, std::size_t h) noexcept {
        return {m_values.data() + row_offset(t, l, h), m_shape.head_dim};
    }
    std::span<float> query(std::size_t t, std::size_t l, std::size_t h) noexcept {
        return {m_queries.data() + row_offset(t, l, h), m_shape.head_dim};
    }

    /// All (layer, head, dim) key values of one token.
    std::span<const float> token_keys(std::size_t t) const noexcept {
        return {m_keys.data() + t * token_stride(), token_stride()};
    }
    std::span<const float> token_values(std::size_t t) const noexcept {
        return {m_values.data() + t * token_stride(), token_stride()};
    }

    std::vector<float>& keys() noexcept {
        return m_keys;
    }
    std::vector<float>& values() noexcept {
        return m_values;
    }
    std::vector<float>& queries() noexcept {
        return m_queries;
    }
    const std::vector<float>& keys() const noexcept {
        return m_keys;
    }
    const std::vector<float>& values() const noexcept {
        return m_values;
    }
    const std::vector<float>& queries() const noexcept {
        return m_queries;
    }

private:
    ModelShape m_shape;
    std::size_t m_num_tokens = 0;
    std::uint64_t m_seed = 0;
    std::vector<float> m_keys;
    std::vector<float> m_values;
    std::vector<float> m_queries;
    std::vector<NeedleAnnotation> m_needles;
};

/// True when shape, seed, needles and all three tensors match bit for bit.
inline bool bitwise_equal(const KvTrace& a, const KvTrace& b) {
    auto same = [](const std::vector<float>& x, const std::vector<float>& y) {
        return x.size() == y.size() && (x.empty() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0);
    };
    if (!(a.shape() == b.shape()) || a.num_tokens() != b.num_tokens() || a.seed() != b.seed() ||
        a.needles().size() != b.needles().size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.needles().size(); ++i) {
        const auto& x = a.needles()[i];
        const auto& y = b.needles()[i];
        if (x.position != y.position || x.label != y.label ||
            std::bit_cast<std::uint32_t>(x.target_cosine) != std::bit_cast<std::uint32_t>(y.target_cosine)) {
            return false;
        }
    }
    return same(a.keys(), b.keys()) && same(a.values(), b.values()) && same(a.queries(), b.queries());
}

struct NeedleSpec {
    std::size_t position = 0;
    double target_cosine = 1.0;
    std::string label;
};

namespace detail {

inline void fill_unit_sphere(CounterRng& rng, std::span<float> out) {
    double norm2 = 0.0;
    std::vector<double> tmp(out.size());
    for (auto& x : tmp) {
        x = rng.next_normal();
        norm2 += x * x;
    }
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) {
        std::fill(out.begin(), out.end(), 0.0F);
        out[0] = 1.0F;
        return;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(tmp[i] / norm);
    }
}

}  // namespace detail

/**
 * @brief Synthesizes a trace of unit-norm Gaussian-direction vectors with planted needles.
 *
 * Each needle key is c * q + sqrt(1 - c^2) * u where q is the probe query of the same slot and
 * u a random unit vector orthogonal to q, so cos(needle key, probe query) = c per slot.
 */
inline KvTrace generate_trace(const ModelShape& shape, std::size_t num_tokens, std::vector<NeedleSpec> needle_spec,
                              std::uint64_t seed) {
    LASERKV_CHECK(num_tokens >= 1, ErrorCode::InvalidArgument, "trace needs at least one token");
    std::sort(needle_spec.begin(), needle_spec.end(),
              [](const NeedleSpec& a, const NeedleSpec& b) { return a.position < b.position; });
    for (std::size_t i = 0; i < needle_spec.size(); ++i) {
        const auto& n = needle_spec[i];
        LASERKV_CHECK(n.position < num_tokens, ErrorCode::OutOfRange, "needle position out of range");
        LASERKV_CHECK(i == 0 || needle_spec[i - 1].position != n.position, ErrorCode::InvalidArgument,
                      "duplicate needle position");
        LASERKV_CHECK(n.target_cosine >= -1.0 && n.target_cosine <= 1.0, ErrorCode::InvalidArgument,
                      "needle cosine must lie in [-1, 1]");
    }

    KvTrace trace(shape, num_tokens, seed);
    CounterRng key_rng(seed, 1);
    CounterRng value_rng(seed, 2);
    CounterRng query_rng(seed, 3);
    CounterRng needle_rng(seed, 4);
    for (std::size_t t = 0; t < num_tokens; ++t) {
        for (std::size_t l = 0; l < shape.num_layers; ++l) {
            for (std::size_t h = 0; h < shape.num_heads; ++h) {
                detail::fill_unit_sphere(key_rng, trace.key(t, l, h));
                detail::fill_unit_sphere(value_rng, trace.value(t, l, h));
                detail::fill_unit_sphere(query_rng, trace.query(t, l, h));
            }
        }
    }

    const std::size_t d = shape.head_dim;
    const std::size_t probe = num_tokens - 1;
    std::vector<NeedleAnnotation> annotations;
    std::vector<double> q(d);
    std::vector<double> u(d);
    for (std::size_t i = 0; i < needle_spec.size(); ++i) {
        const auto& spec = needle_spec[i];
        const double c = spec.target_cosine;
        const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
        for (std::size_t l = 0; l < shape.num_layers; ++l) {
            for (std::size_t h = 0; h < shape.num_heads; ++h) {
                const auto probe_query = trace.query(probe, l, h);
                double qn = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    q[j] = probe_query[j];
                    qn += q[j] * q[j];
                }
                qn = std::sqrt(qn);
                for (auto& x : q) {
                    x /= qn;
                }
                // Gram-Schmidt a random direction against q; retry on the (measure-zero) parallel case.
                double un = 0.0;
                do {
                    double proj = 0.0;
                    for (auto& x : u) {
                        x = needle_rng.next_normal();
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        proj += u[j] * q[j];
                    }
                    un = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        u[j] -= proj * q[j];
                        un += u[j] * u[j];
                    }
                    un = std::sqrt(un);
                } while (un < 1e-12 && d > 1 && s > 0.0);
                auto key = trace.key(spec.position, l, h);
                for (std::size_t j = 0; j < d; ++j) {
                    const double orth = un > 0.0 ? u[j] / un : 0.0;
                    key[j] = static_cast<float>(c * q[j] + s * orth);
                }
            }
        }
        annotations.push_back(NeedleAnnotation{spec.position, static_cast<float>(spec.target_cosine),
                                               spec.label.empty() ? "needle-" + std::to_string(i) : spec.label});
    }
    trace.set_needles(std::move(annotations));
    return trace;
}

// On-disk format, all little-endian:
//   "LKVT" | version u32 | L u32 | H u32 | d u32 | T u32 | needle count u32 | seed u64
//   needles: position u32 | target_cosine f32 | label length u16 | label bytes
//   payload: keys, values, queries as f32 in (token, layer, head, dim) order
//   CRC32 (zlib polynomial) of the payload bytes, u32
inline constexpr std::uint32_t kTraceFormatVersion = 1;
inline constexpr char kTraceMagic[4] = {'L', 'K', 'V', 'T'};

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bits.begin(), bits.end());
        }
        bytes.insert(bytes.end(), bits.begin(), bits.end());
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }
    void put_floats(const std::vector<float>& v) {
        if constexpr (std::endian::native == std::endian::little) {
            put_bytes(v.data(), v.size() * sizeof(float));
        } else {
            for (float x : v) {
                put(x);
            }
        }
    }
    std::vector<unsigned char> bytes;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const unsigned char> data) : m_data(data) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        std::array<unsigned char, sizeof(T)> bits;
        std::memcpy(bits.data(), m_data.data() + m_pos, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bits.begin(), bits.end());
        }
        m_pos += sizeof(T);
        return std::bit_cast<T>(bits);
    }
    std::span<const unsigned char> get_bytes(std::size_t n) {
        need(n);
        auto out = m_data.subspan(m_pos, n);
        m_pos += n;
        return out;
    }
    void get_floats(std::vector<float>& out) {
        auto raw = get_bytes(out.size() * sizeof(float));
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(out.data(), raw.data(), raw.size());
        } else {
            ByteReader sub(raw);
            for (auto& x : out) {
                x = sub.get<float>();
            }
        }
    }
    std::size_t remaining() const noexcept {
        return m_data.size() - m_pos;
    }
    std::size_t position() const noexcept {
        return m_pos;
    }

private:
    void need(std::size_t n) const {
        LASERKV_CHECK(n <= remaining(), ErrorCode::TraceCorrupt, "trace file truncated");
    }
    std::span<const unsigned char> m_data;
    std::size_t m_pos = 0;
};

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1U << 30));
        crc = crc32(crc, bytes.data() + off, chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<unsigned char> encode_trace(const KvTrace& trace) {
    const auto& shape = trace.shape();
    auto narrow = [](std::size_t v, const char* what) {
        LASERKV_CHECK(v <= 0xFFFFFFFFULL, ErrorCode::InvalidArgument, std::string(what) + " exceeds u32");
        return static_cast<std::uint32_t>(v);
    };
    detail::ByteWriter w;
    w.put_bytes(kTraceMagic, 4);
    w.put(kTraceFormatVersion);
    w.put(narrow(shape.num_layers, "num_layers"));
    w.put(narrow(shape.num_heads, "num_heads"));
    w.put(narrow(shape.head_dim, "head_dim"));
    w.put(narrow(trace.num_tokens(), "num_tokens"));
    w.put(narrow(trace.needles().size(), "needle count"));
    w.put(static_cast<std::uint64_t>(trace.seed()));
    for (const auto& n : trace.needles()) {
        LASERKV_CHECK(n.label.size() <= 0xFFFF, ErrorCode::InvalidArgument, "needle label too long");
        w.put(narrow(n.position, "needle position"));
        w.put(n.target_cosine);
        w.put(static_cast<std::uint16_t>(n.label.size()));
        w.put_bytes(n.label.data(), n.label.size());
    }
    const std::size_t payload_begin = w.bytes.size();
    w.put_floats(trace.keys());
    w.put_floats(trace.values());
    w.put_floats(trace.queries());
    const auto crc = detail::crc32_of(std::span<const unsigned char>(w.bytes).subspan(payload_begin));
    w.put(crc);
    return std::move(w.bytes);
}

inline KvTrace decode_trace(std::span<const unsigned char> bytes) {
    detail::ByteReader r(bytes);
    auto magic = r.get_bytes(4);
    LASERKV_CHECK(std::memcmp(magic.data(), kTraceMagic, 4) == 0, ErrorCode::TraceCorrupt, "bad magic");
    const auto version = r.get<std::uint32_t>();
    LASERKV_CHECK(version == kTraceFormatVersion, ErrorCode::UnsupportedVersion,
                  "trace format version " + std::to_string(version));
    ModelShape shape;
    shape.num_layers = r.get<std::uint32_t>();
    shape.num_heads = r.get<std::uint32_t>();
    shape.head_dim = r.get<std::uint32_t>();
    const std::size_t num_tokens = r.get<std::uint32_t>();
    const std::size_t needle_count = r.get<std::uint32_t>();
    const auto seed = r.get<std::uint64_t>();
    LASERKV_CHECK(shape.valid(), ErrorCode::TraceCorrupt, "zero dimension in header");

    std::vector<NeedleAnnotation> needles;
    for (std::size_t i = 0; i < needle_count; ++i) {
        NeedleAnnotation n;
        n.position = r.get<std::uint32_t>();
        n.target_cosine = r.get<float>();
        const auto len = r.get<std::uint16_t>();
        auto label = r.get_bytes(len);
        n.label.assign(reinterpret_cast<const char*>(label.data()), label.size());
        needles.push_back(std::move(n));
    }

    const unsigned __int128 elems =
        static_cast<unsigned __int128>(num_tokens) * shape.num_layers * shape.num_heads * shape.head_dim;
    const unsigned __int128 payload_bytes = elems * 3 * sizeof(float);
    LASERKV_CHECK(payload_bytes + 4 == r.remaining(), ErrorCode::TraceCorrupt,
                  r.remaining() < payload_bytes + 4 ? "trace file truncated" : "trailing bytes after checksum");

    const auto payload = bytes.subspan(r.position(), static_cast<std::size_t>(payload_bytes));
    KvTrace trace(shape, num_tokens, seed);
    r.get_floats(trace.keys());
    r.get_floats(trace.values());
    r.get_floats(trace.queries());
    const auto stored_crc = r.get<std::uint32_t>();
    LASERKV_CHECK(stored_crc == detail::crc32_of(payload), ErrorCode::ChecksumMismatch, "payload CRC32 mismatch");
    try {
        trace.set_needles(std::move(needles));
    } catch (const Error& e) {
        throw Error(ErrorCode::TraceCorrupt, e.what());
    }
    return trace;
}

inline void save_trace(const KvTrace& trace, const std::filesystem::path& path) {
    const auto bytes = encode_trace(trace);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    LASERKV_CHECK(out.good(), ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    LASERKV_CHECK(out.good(), ErrorCode::Io, "write failed for " + path.string());
}

inline KvTrace load_trace(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    LASERKV_CHECK(in.good(), ErrorCode::Io, "cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    LASERKV_CHECK(!in.bad(), ErrorCode::Io, "read failed for " + path.string());
    return decode_trace(bytes);
}

}  // namespace laserkv
