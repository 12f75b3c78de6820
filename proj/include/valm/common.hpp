#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace valm {

using u8 = std::uint8_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i64 = std::int64_t;

// One embedding in the shared text/image space. Stored as f32 (the on-disk
// width); every dot product accumulates in double.
using EmbeddingVector = std::vector<float>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ErrorCode {
    ChunkTooLong,
    InsufficientSamples,
    DimMismatch,
    DuplicateId,
    NotTrained,
    IoFailure,
    CorruptIndex,
    ShapeMismatch,
    NonFiniteInput,
    CorruptCheckpoint,
    ConfigMismatch,
    NonFiniteLoss,
    EmptyCorpus,
    IndexUnavailable,
    EncoderMismatch,
    BindingMismatch,
    SpecInfeasible,
    PositionOutOfRange,
    EmptyLabelSet,
    GoldLabelMissing,
    EmptySolution,
    MissingEmbedding,
    ConfigError,
};

inline const char* error_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::ChunkTooLong: return "ChunkTooLong";
        case ErrorCode::InsufficientSamples: return "InsufficientSamples";
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::DuplicateId: return "DuplicateId";
        case ErrorCode::NotTrained: return "NotTrained";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::CorruptIndex: return "CorruptIndex";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NonFiniteInput: return "NonFiniteInput";
        case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
        case ErrorCode::ConfigMismatch: return "ConfigMismatch";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::EmptyCorpus: return "EmptyCorpus";
        case ErrorCode::IndexUnavailable: return "IndexUnavailable";
        case ErrorCode::EncoderMismatch: return "EncoderMismatch";
        case ErrorCode::BindingMismatch: return "BindingMismatch";
        case ErrorCode::SpecInfeasible: return "SpecInfeasible";
        case ErrorCode::PositionOutOfRange: return "PositionOutOfRange";
        case ErrorCode::EmptyLabelSet: return "EmptyLabelSet";
        case ErrorCode::GoldLabelMissing: return "GoldLabelMissing";
        case ErrorCode::EmptySolution: return "EmptySolution";
        case ErrorCode::MissingEmbedding: return "MissingEmbedding";
        case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

class ValmError : public std::runtime_error {
public:
    ValmError(ErrorCode code, const std::string& msg)
        : std::runtime_error(std::string(error_name(code)) + ": " + msg), code_(code) {}
    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& msg) {
    throw ValmError(code, msg);
}

inline void require(bool ok, ErrorCode code, const std::string& msg) {
    if (!ok) raise(code, msg);
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64) and seed derivation
// ---------------------------------------------------------------------------

inline u64 fnv1a64(const void* data, std::size_t n, u64 h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline u64 fnv1a64(std::string_view s, u64 h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline u64 fnv1a64(std::span<const int> ids, u64 h = 0xcbf29ce484222325ull) {
    for (int v : ids) {
        u32 w = static_cast<u32>(v);
        unsigned char b[4] = {static_cast<unsigned char>(w & 0xff),
                              static_cast<unsigned char>((w >> 8) & 0xff),
                              static_cast<unsigned char>((w >> 16) & 0xff),
                              static_cast<unsigned char>((w >> 24) & 0xff)};
        h = fnv1a64(b, 4, h);
    }
    return h;
}

inline u64 splitmix64(u64 x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline u64 mix_seed(u64 a, u64 b) { return splitmix64(a ^ splitmix64(b)); }
inline u64 mix_seed(u64 a, std::string_view tag) { return mix_seed(a, fnv1a64(tag)); }

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// transforms below avoid std distributions, whose streams are not.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(u64 seed) : eng_(seed) {}

    u64 next_u64() { return eng_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    i64 uniform_int(i64 n) {
        return static_cast<i64>(uniform() * static_cast<double>(n));
    }

    // Box-Muller
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * M_PI * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(static_cast<i64>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Small vector math, double accumulation throughout
// ---------------------------------------------------------------------------

inline double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline void scale_to_unit(EmbeddingVector& v) {
    const double n = norm(v);
    if (n == 0.0) return;
    for (float& x : v) x = static_cast<float>(static_cast<double>(x) / n);
}

inline bool all_finite(std::span<const float> v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace valm
