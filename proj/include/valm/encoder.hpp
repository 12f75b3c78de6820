#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "valm/common.hpp"
#include "valm/io.hpp"
#include "valm/tokenizer.hpp"

namespace valm {

// An image surrogate: identified by (object, attribute, variant). The
// synthetic encoder maps it to a reproducible point on the unit sphere.
struct ImageRecord {
    u64 id = 0;
    std::string object;
    int attribute = 0;
    int variant = 0;
};

// Truncated left context used as the retrieval query for one position.
// source_range is half-open [start, end) into the original sequence with
// end == query position (the last included token is i-1).
struct ContextChunk {
    std::vector<int> tokens;
    std::size_t start = 0;
    std::size_t end = 0;

    bool empty() const { return tokens.empty(); }
};

// y_i = x[t, i-1] if i-t < cap else x[i-cap, i-1], where t is the index just
// after the closest stop token strictly before i. Total function; i == 0
// yields the empty chunk.
inline ContextChunk build_context_chunk(std::span<const int> seq, std::size_t i,
                                        std::size_t chunk_cap,
                                        std::span<const int> stop_set) {
    require(i <= seq.size(), ErrorCode::PositionOutOfRange,
            "chunk position beyond sequence end");
    require(chunk_cap >= 1, ErrorCode::ConfigError, "chunk_cap must be >= 1");
    ContextChunk chunk;
    if (i == 0) return chunk;
    std::size_t t = 0;
    for (std::size_t j = i; j-- > 0;) {
        if (std::find(stop_set.begin(), stop_set.end(), seq[j]) != stop_set.end()) {
            t = j + 1;
            break;
        }
    }
    const std::size_t start = (i - t < chunk_cap) ? t : i - chunk_cap;
    chunk.start = start;
    chunk.end = i;
    chunk.tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(start),
                        seq.begin() + static_cast<std::ptrdiff_t>(i));
    return chunk;
}

// Frozen dual encoder: text chunk -> embedding, image record -> embedding.
// Implementations are immutable after construction and safe to share across
// threads.
class JointEncoder {
public:
    virtual ~JointEncoder() = default;

    virtual int dim() const = 0;
    virtual std::string id() const = 0;
    virtual std::size_t max_chunk_len() const { return 75; }

    virtual EmbeddingVector encode_text(std::span<const int> chunk_tokens) const = 0;
    virtual EmbeddingVector encode_image(const ImageRecord& img) const = 0;

    // Digest of the (frozen) encoder state; byte-identical before and after
    // any training run.
    virtual u64 fingerprint() const { return fnv1a64(id()); }
};

inline EmbeddingVector encode_text_query(const JointEncoder& enc, const ContextChunk& chunk) {
    require(chunk.tokens.size() <= enc.max_chunk_len(), ErrorCode::ChunkTooLong,
            "chunk of " + std::to_string(chunk.tokens.size()) + " tokens exceeds encoder limit of " +
                std::to_string(enc.max_chunk_len()));
    return enc.encode_text(chunk.tokens);
}

inline EmbeddingVector encode_image_key(const JointEncoder& enc, const ImageRecord& img) {
    return enc.encode_image(img);
}

namespace detail {

inline EmbeddingVector seeded_gaussian_unit(u64 seed, int dim) {
    Rng rng(seed);
    EmbeddingVector v(static_cast<std::size_t>(dim));
    for (float& x : v) x = static_cast<float>(rng.gaussian());
    scale_to_unit(v);
    return v;
}

// v -= (v.b) b for each basis row, then renormalize
inline void project_out_and_normalize(EmbeddingVector& v, const std::vector<EmbeddingVector>& basis) {
    for (const auto& b : basis) {
        const double c = dot(v, b);
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = static_cast<float>(static_cast<double>(v[i]) - c * static_cast<double>(b[i]));
    }
    scale_to_unit(v);
}

} // namespace detail

// Deterministic stand-in for the frozen CLIP pair with a documented geometric
// contract:
//   - image key (o, a, t)   = sqrt(1/2) * w_a + sqrt(1/2) * r(o, a, t), with
//     {w_a} an orthonormal attribute basis and r(...) unit vectors in its
//     orthogonal complement (variants jitter around a per-(o,a) direction);
//   - a text chunk whose last object token is o maps to
//     0.98 * anchor(o, attr_table[o]) + sqrt(1-0.98^2) * chunk noise
//     orthogonal to the anchor, so dot(query, key(o, attr_table[o], *)) is
//     >= 0.94 by construction, while keys of other attributes stay near 0.
class SyntheticEncoder final : public JointEncoder {
public:
    SyntheticEncoder(int dim, u64 seed, int n_attributes,
                     std::map<std::string, int> attribute_table,
                     const Tokenizer* tok, double variant_jitter = 0.15)
        : dim_(dim),
          seed_(seed),
          n_attributes_(n_attributes),
          attribute_table_(std::move(attribute_table)),
          tok_(tok),
          variant_jitter_(variant_jitter) {
        require(n_attributes_ >= 1, ErrorCode::SpecInfeasible, "need at least one attribute");
        require(dim_ >= n_attributes_ + 8, ErrorCode::SpecInfeasible,
                "dim too small for an orthonormal attribute basis plus noise");
        attr_basis_.reserve(static_cast<std::size_t>(n_attributes_));
        for (int a = 0; a < n_attributes_; ++a) {
            EmbeddingVector w = detail::seeded_gaussian_unit(mix_seed(mix_seed(seed_, "attr"), static_cast<u64>(a)), dim_);
            detail::project_out_and_normalize(w, attr_basis_); // Gram-Schmidt
            attr_basis_.push_back(std::move(w));
        }
        null_query_ = detail::seeded_gaussian_unit(mix_seed(seed_, "null-query"), dim_);
    }

    int dim() const override { return dim_; }

    std::string id() const override {
        char buf[96];
        std::snprintf(buf, sizeof buf, "synthetic:v1:dim=%d:seed=%llu:attrs=%d", dim_,
                      static_cast<unsigned long long>(seed_), n_attributes_);
        return buf;
    }

    EmbeddingVector encode_image(const ImageRecord& img) const override {
        require(img.attribute >= 0 && img.attribute < n_attributes_, ErrorCode::EncoderMismatch,
                "attribute id out of range");
        return compose_key(anchor_complement(img.object, img.attribute, img.variant), img.attribute);
    }

    EmbeddingVector encode_text(std::span<const int> chunk_tokens) const override {
        if (chunk_tokens.empty()) return null_query_;
        // Anchor on the last object token present in the chunk, if any.
        std::string obj;
        int attr = -1;
        for (std::size_t j = chunk_tokens.size(); j-- > 0;) {
            const std::string w = tok_ ? tok_->token_text(chunk_tokens[j]) : std::string();
            auto it = attribute_table_.find(w);
            if (it != attribute_table_.end()) {
                obj = it->first;
                attr = it->second;
                break;
            }
        }
        const u64 chash = fnv1a64(chunk_tokens, mix_seed(seed_, "chunk"));
        if (attr < 0) return detail::seeded_gaussian_unit(chash, dim_);

        EmbeddingVector q = compose_key(anchor_complement(obj, attr, /*variant=*/-1), attr);
        EmbeddingVector noise = detail::seeded_gaussian_unit(chash, dim_);
        // orthogonalize the noise against the anchor so the related-pair dot
        // product has a hard lower bound
        std::vector<EmbeddingVector> anchor_basis{q};
        detail::project_out_and_normalize(noise, anchor_basis);
        const double cw = 0.98, sw = std::sqrt(1.0 - cw * cw);
        for (std::size_t i = 0; i < q.size(); ++i)
            q[i] = static_cast<float>(cw * static_cast<double>(q[i]) + sw * static_cast<double>(noise[i]));
        return q;
    }

    u64 fingerprint() const override {
        u64 h = fnv1a64(id());
        for (const auto& [o, a] : attribute_table_) {
            h = fnv1a64(o, h);
            h = splitmix64(h ^ static_cast<u64>(a));
        }
        for (const auto& w : attr_basis_) h = fnv1a64(w.data(), w.size() * sizeof(float), h);
        return h;
    }

    const EmbeddingVector& null_query() const { return null_query_; }
    const std::map<std::string, int>& attribute_table() const { return attribute_table_; }

private:
    // unit direction in the orthogonal complement of the attribute basis;
    // variant < 0 means the jitter-free canonical direction
    EmbeddingVector anchor_complement(const std::string& object, int attr, int variant) const {
        const u64 base = mix_seed(mix_seed(mix_seed(seed_, "obj"), fnv1a64(object)), static_cast<u64>(attr));
        EmbeddingVector r = detail::seeded_gaussian_unit(base, dim_);
        detail::project_out_and_normalize(r, attr_basis_);
        if (variant >= 0 && variant_jitter_ > 0.0) {
            EmbeddingVector j = detail::seeded_gaussian_unit(mix_seed(base, static_cast<u64>(variant) + 1), dim_);
            detail::project_out_and_normalize(j, attr_basis_);
            for (std::size_t i = 0; i < r.size(); ++i)
                r[i] = static_cast<float>(static_cast<double>(r[i]) +
                                          variant_jitter_ * static_cast<double>(j[i]));
            scale_to_unit(r);
        }
        return r;
    }

    EmbeddingVector compose_key(const EmbeddingVector& complement, int attr) const {
        const double c = std::sqrt(0.5);
        EmbeddingVector v(static_cast<std::size_t>(dim_));
        const auto& w = attr_basis_[static_cast<std::size_t>(attr)];
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = static_cast<float>(c * static_cast<double>(w[i]) + c * static_cast<double>(complement[i]));
        return v;
    }

    int dim_;
    u64 seed_;
    int n_attributes_;
    std::map<std::string, int> attribute_table_;
    const Tokenizer* tok_;
    double variant_jitter_;
    std::vector<EmbeddingVector> attr_basis_;
    EmbeddingVector null_query_;
};

// ---------------------------------------------------------------------------
// Precomputed-embedding file ("VALMEMB"): header {magic, version u32, dim u32,
// count u64}, then count records of (id u64, dim f32), little-endian.
// ---------------------------------------------------------------------------

inline constexpr const char* kEmbMagic = "VALMEMB";
inline constexpr u32 kEmbVersion = 1;

struct EmbeddingTable {
    int dim = 0;
    std::vector<std::pair<u64, EmbeddingVector>> entries;

    const EmbeddingVector* find(u64 id) const {
        auto it = lookup_.find(id);
        return it == lookup_.end() ? nullptr : &entries[it->second].second;
    }
    void rebuild_lookup() {
        lookup_.clear();
        for (std::size_t i = 0; i < entries.size(); ++i) lookup_[entries[i].first] = i;
    }

private:
    std::unordered_map<u64, std::size_t> lookup_;
};

inline void save_embeddings(const EmbeddingTable& table, const std::string& path) {
    ByteWriter w;
    w.put_magic(kEmbMagic);
    w.put_u32(kEmbVersion);
    w.put_u32(static_cast<u32>(table.dim));
    w.put_u64(static_cast<u64>(table.entries.size()));
    for (const auto& [id, v] : table.entries) {
        require(static_cast<int>(v.size()) == table.dim, ErrorCode::DimMismatch,
                "embedding dim mismatch in table");
        w.put_u64(id);
        w.put_f32_span(v);
    }
    write_file_atomic(path, w.bytes());
}

inline EmbeddingTable load_embeddings(const std::string& path) {
    const std::string data = read_file(path);
    ByteReader r(data, ErrorCode::IoFailure);
    r.expect_magic(kEmbMagic);
    const u32 version = r.get_u32();
    require(version == kEmbVersion, ErrorCode::IoFailure, "unsupported VALMEMB version");
    EmbeddingTable table;
    table.dim = static_cast<int>(r.get_u32());
    const u64 count = r.get_u64();
    table.entries.reserve(count);
    for (u64 i = 0; i < count; ++i) {
        const u64 id = r.get_u64();
        EmbeddingVector v(static_cast<std::size_t>(table.dim));
        r.get_f32_span(v);
        table.entries.emplace_back(id, std::move(v));
    }
    table.rebuild_lookup();
    return table;
}

// File-backed encoder for embeddings exported from elsewhere. Text chunks are
// looked up by the FNV-1a hash of their token ids; images by record id.
class PrecomputedEncoder final : public JointEncoder {
public:
    PrecomputedEncoder(EmbeddingTable text, EmbeddingTable images)
        : text_(std::move(text)), images_(std::move(images)) {
        require(text_.dim == images_.dim || text_.entries.empty() || images_.entries.empty(),
                ErrorCode::DimMismatch, "text/image embedding dims differ");
        dim_ = text_.entries.empty() ? images_.dim : text_.dim;
        null_query_ = detail::seeded_gaussian_unit(fnv1a64("precomputed-null"), dim_);
    }

    static u64 chunk_key(std::span<const int> chunk_tokens) {
        return fnv1a64(chunk_tokens, fnv1a64("chunk"));
    }

    int dim() const override { return dim_; }
    std::string id() const override {
        char buf[64];
        std::snprintf(buf, sizeof buf, "precomputed:v1:dim=%d:n=%zu", dim_, images_.entries.size());
        return buf;
    }

    EmbeddingVector encode_text(std::span<const int> chunk_tokens) const override {
        if (chunk_tokens.empty()) return null_query_;
        const auto* v = text_.find(chunk_key(chunk_tokens));
        if (!v) raise(ErrorCode::MissingEmbedding, "no precomputed embedding for chunk");
        return *v;
    }

    EmbeddingVector encode_image(const ImageRecord& img) const override {
        const auto* v = images_.find(img.id);
        if (!v) raise(ErrorCode::MissingEmbedding, "no precomputed embedding for image id " + std::to_string(img.id));
        return *v;
    }

private:
    EmbeddingTable text_;
    EmbeddingTable images_;
    int dim_ = 0;
    EmbeddingVector null_query_;
};

} // namespace valm
