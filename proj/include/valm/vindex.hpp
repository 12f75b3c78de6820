#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "valm/common.hpp"
#include "valm/io.hpp"

namespace valm {

// Ordered approximate-search hits: scores non-increasing, ids unique, ties
// broken by ascending id.
struct SearchResult {
    std::vector<u64> ids;
    std::vector<double> scores;

    std::size_t size() const { return ids.size(); }
};

namespace detail {

inline void top_k_sorted(std::vector<std::pair<double, u64>>& cand, std::size_t k,
                         SearchResult& out) {
    const auto cmp = [](const std::pair<double, u64>& a, const std::pair<double, u64>& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    };
    if (cand.size() > k) {
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), cmp);
        cand.resize(k);
    } else {
        std::sort(cand.begin(), cand.end(), cmp);
    }
    out.ids.reserve(cand.size());
    out.scores.reserve(cand.size());
    for (const auto& [s, id] : cand) {
        out.ids.push_back(id);
        out.scores.push_back(s);
    }
}

} // namespace detail

// Exact top-k by true dot product; the oracle every recall figure in the test
// suite is measured against. O(N*E) scan.
inline SearchResult brute_force_search(std::span<const std::pair<u64, EmbeddingVector>> store,
                                       std::span<const float> query, std::size_t k) {
    require(k >= 1, ErrorCode::ConfigError, "k must be >= 1");
    std::vector<std::pair<double, u64>> cand;
    cand.reserve(store.size());
    for (const auto& [id, v] : store) cand.emplace_back(dot(v, query), id);
    SearchResult out;
    detail::top_k_sorted(cand, k, out);
    return out;
}

// Seeded Lloyd k-means (Euclidean). Init is a seeded draw of k distinct input
// points; empty clusters keep their previous centroid. With exactly k distinct
// points the result is a permutation of the input (fixed point).
inline std::vector<float> kmeans(std::span<const float> data, std::size_t n, std::size_t dim,
                                 std::size_t k, int iters, u64 seed) {
    require(n >= k, ErrorCode::InsufficientSamples,
            "k-means needs at least k points (" + std::to_string(n) + " < " + std::to_string(k) + ")");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(perm);

    std::vector<float> centers(k * dim);
    for (std::size_t c = 0; c < k; ++c)
        std::copy_n(data.data() + perm[c] * dim, dim, centers.data() + c * dim);

    std::vector<std::size_t> assign(n, 0);
    std::vector<double> sums(k * dim);
    std::vector<std::size_t> counts(k);
    std::vector<double> cnorm(k);
    for (int it = 0; it < iters; ++it) {
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0.0;
            const float* cc = centers.data() + c * dim;
            for (std::size_t d = 0; d < dim; ++d) s += static_cast<double>(cc[d]) * cc[d];
            cnorm[c] = s;
        }
        // assignment: argmin ||x-c||^2 = ||c||^2 - 2 x.c (+ ||x||^2, constant)
        for (std::size_t i = 0; i < n; ++i) {
            const float* x = data.data() + i * dim;
            double best = 0.0;
            std::size_t best_c = 0;
            bool first = true;
            for (std::size_t c = 0; c < k; ++c) {
                const float* cc = centers.data() + c * dim;
                double d2 = 0.0;
                for (std::size_t d = 0; d < dim; ++d) d2 += static_cast<double>(x[d]) * cc[d];
                d2 = cnorm[c] - 2.0 * d2;
                if (first || d2 < best) {
                    best = d2;
                    best_c = c;
                    first = false;
                }
            }
            assign[i] = best_c;
        }
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), std::size_t{0});
        for (std::size_t i = 0; i < n; ++i) {
            const float* x = data.data() + i * dim;
            double* s = sums.data() + assign[i] * dim;
            for (std::size_t d = 0; d < dim; ++d) s[d] += x[d];
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue; // keep previous centroid
            float* cc = centers.data() + c * dim;
            for (std::size_t d = 0; d < dim; ++d)
                cc[d] = static_cast<float>(sums[c * dim + d] / static_cast<double>(counts[c]));
        }
    }
    return centers;
}

// ---------------------------------------------------------------------------
// IVF index with product-quantized codes over inner product.
//
// Coarse assignment and probing both use max inner product so the metric is
// consistent end to end; codes are non-residual, so ADC is a pure per-subspace
// lookup-table sum. Exact codec stores raw vectors (one codeword per stored
// vector) and is the oracle-equivalence configuration.
// ---------------------------------------------------------------------------

enum class PqCodec : u8 { Pq = 0, Exact = 1 };

inline constexpr const char* kIndexMagic = "VALMIVF";
inline constexpr u32 kIndexVersion = 1;
inline constexpr std::size_t kPqCodewords = 256;

struct IvfPqIndex {
    int dim = 0;          // E
    int n_centroids = 0;  // C
    int m_sub = 0;        // M subquantizers
    PqCodec codec = PqCodec::Pq;
    bool trained = false;
    u64 count = 0;

    std::vector<float> centroids;  // C x E
    std::vector<float> codebooks;  // M x 256 x (E/M), Pq codec only

    struct PostingList {
        std::vector<u64> ids;
        std::vector<u8> codes;   // n x M      (Pq)
        std::vector<float> raw;  // n x E      (Exact)
    };
    std::vector<PostingList> lists;

    std::unordered_set<u64> id_set; // rebuilt on load, not serialized

    int sub_dim() const { return dim / m_sub; }
};

inline IvfPqIndex train_index(std::span<const EmbeddingVector> sample, int n_centroids,
                              int m_sub, int iters, u64 seed, PqCodec codec = PqCodec::Pq) {
    require(n_centroids >= 1 && m_sub >= 1, ErrorCode::ConfigError, "C and M must be positive");
    require(!sample.empty(), ErrorCode::InsufficientSamples, "empty training sample");
    const int dim = static_cast<int>(sample.front().size());
    require(dim % m_sub == 0, ErrorCode::DimMismatch,
            "E=" + std::to_string(dim) + " not divisible by M=" + std::to_string(m_sub));
    require(sample.size() >= static_cast<std::size_t>(n_centroids), ErrorCode::InsufficientSamples,
            "need at least C training vectors");
    if (codec == PqCodec::Pq)
        require(sample.size() >= kPqCodewords, ErrorCode::InsufficientSamples,
                "PQ codebooks need at least 256 training vectors");

    std::vector<float> flat(sample.size() * static_cast<std::size_t>(dim));
    for (std::size_t i = 0; i < sample.size(); ++i) {
        require(static_cast<int>(sample[i].size()) == dim, ErrorCode::DimMismatch,
                "inconsistent sample dims");
        require(all_finite(sample[i]), ErrorCode::NonFiniteInput, "non-finite training vector");
        std::copy(sample[i].begin(), sample[i].end(), flat.begin() + static_cast<std::ptrdiff_t>(i * dim));
    }

    IvfPqIndex idx;
    idx.dim = dim;
    idx.n_centroids = n_centroids;
    idx.m_sub = m_sub;
    idx.codec = codec;
    idx.centroids = kmeans(flat, sample.size(), static_cast<std::size_t>(dim),
                           static_cast<std::size_t>(n_centroids), iters, mix_seed(seed, "coarse"));

    if (codec == PqCodec::Pq) {
        const std::size_t ds = static_cast<std::size_t>(idx.sub_dim());
        idx.codebooks.resize(static_cast<std::size_t>(m_sub) * kPqCodewords * ds);
        std::vector<float> sub(sample.size() * ds);
        for (int m = 0; m < m_sub; ++m) {
            for (std::size_t i = 0; i < sample.size(); ++i)
                std::copy_n(flat.data() + i * dim + static_cast<std::size_t>(m) * ds, ds,
                            sub.data() + i * ds);
            auto cb = kmeans(sub, sample.size(), ds, kPqCodewords, iters,
                             mix_seed(mix_seed(seed, "pq"), static_cast<u64>(m)));
            std::copy(cb.begin(), cb.end(),
                      idx.codebooks.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(m) * kPqCodewords * ds));
        }
    }

    idx.lists.assign(static_cast<std::size_t>(n_centroids), {});
    idx.trained = true;
    return idx;
}

namespace detail {

inline std::size_t nearest_centroid_ip(const IvfPqIndex& idx, std::span<const float> v) {
    double best = 0.0;
    std::size_t best_c = 0;
    bool first = true;
    for (std::size_t c = 0; c < static_cast<std::size_t>(idx.n_centroids); ++c) {
        const double s = dot(std::span<const float>(idx.centroids.data() + c * static_cast<std::size_t>(idx.dim),
                                                    static_cast<std::size_t>(idx.dim)),
                             v);
        if (first || s > best) {
            best = s;
            best_c = c;
            first = false;
        }
    }
    return best_c;
}

inline void pq_encode(const IvfPqIndex& idx, std::span<const float> v, u8* code_out) {
    const std::size_t ds = static_cast<std::size_t>(idx.sub_dim());
    for (int m = 0; m < idx.m_sub; ++m) {
        const float* sub = v.data() + static_cast<std::size_t>(m) * ds;
        const float* book = idx.codebooks.data() + static_cast<std::size_t>(m) * kPqCodewords * ds;
        double best = 0.0;
        std::size_t best_c = 0;
        bool first = true;
        for (std::size_t c = 0; c < kPqCodewords; ++c) {
            const float* cw = book + c * ds;
            double d2 = 0.0;
            for (std::size_t d = 0; d < ds; ++d) {
                const double diff = static_cast<double>(sub[d]) - cw[d];
                d2 += diff * diff;
            }
            if (first || d2 < best) {
                best = d2;
                best_c = c;
                first = false;
            }
        }
        code_out[m] = static_cast<u8>(best_c);
    }
}

} // namespace detail

// PQ-encode (raw vectors, non-residual) and append each entry to its max
// inner-product centroid's posting list.
inline u64 add_keys(IvfPqIndex& idx, std::span<const std::pair<u64, EmbeddingVector>> entries) {
    require(idx.trained, ErrorCode::NotTrained, "add_keys on untrained index");
    for (const auto& [id, v] : entries) {
        require(static_cast<int>(v.size()) == idx.dim, ErrorCode::DimMismatch, "entry dim != E");
        require(all_finite(v), ErrorCode::NonFiniteInput, "non-finite key");
        require(!idx.id_set.count(id), ErrorCode::DuplicateId, "id " + std::to_string(id) + " already stored");
        const std::size_t c = detail::nearest_centroid_ip(idx, v);
        auto& list = idx.lists[c];
        list.ids.push_back(id);
        if (idx.codec == PqCodec::Pq) {
            list.codes.resize(list.codes.size() + static_cast<std::size_t>(idx.m_sub));
            detail::pq_encode(idx, v, list.codes.data() + list.codes.size() - static_cast<std::size_t>(idx.m_sub));
        } else {
            list.raw.insert(list.raw.end(), v.begin(), v.end());
        }
        idx.id_set.insert(id);
        ++idx.count;
    }
    return idx.count;
}

// Scan the nprobe top inner-product centroids; score candidates by ADC
// (per-subspace lookup of query-subvector . codeword) and return the top k.
inline SearchResult search(const IvfPqIndex& idx, std::span<const float> query, std::size_t k,
                           int nprobe) {
    require(idx.trained, ErrorCode::NotTrained, "search on untrained index");
    require(static_cast<int>(query.size()) == idx.dim, ErrorCode::DimMismatch, "query dim != E");
    require(k >= 1, ErrorCode::ConfigError, "k must be >= 1");
    require(nprobe >= 1, ErrorCode::ConfigError, "nprobe must be >= 1");
    const std::size_t probes =
        std::min<std::size_t>(static_cast<std::size_t>(nprobe), static_cast<std::size_t>(idx.n_centroids));

    std::vector<std::pair<double, u64>> coarse;
    coarse.reserve(static_cast<std::size_t>(idx.n_centroids));
    for (std::size_t c = 0; c < static_cast<std::size_t>(idx.n_centroids); ++c) {
        const double s = dot(std::span<const float>(idx.centroids.data() + c * static_cast<std::size_t>(idx.dim),
                                                    static_cast<std::size_t>(idx.dim)),
                             query);
        coarse.emplace_back(s, static_cast<u64>(c));
    }
    SearchResult probed;
    detail::top_k_sorted(coarse, probes, probed);

    // ADC tables: table[m][c] = q_m . codeword_{m,c}
    const std::size_t ds = static_cast<std::size_t>(idx.dim / std::max(idx.m_sub, 1));
    std::vector<double> lut;
    if (idx.codec == PqCodec::Pq) {
        lut.resize(static_cast<std::size_t>(idx.m_sub) * kPqCodewords);
        for (int m = 0; m < idx.m_sub; ++m) {
            const float* q = query.data() + static_cast<std::size_t>(m) * ds;
            const float* book = idx.codebooks.data() + static_cast<std::size_t>(m) * kPqCodewords * ds;
            for (std::size_t c = 0; c < kPqCodewords; ++c) {
                const float* cw = book + c * ds;
                double s = 0.0;
                for (std::size_t d = 0; d < ds; ++d) s += static_cast<double>(q[d]) * cw[d];
                lut[static_cast<std::size_t>(m) * kPqCodewords + c] = s;
            }
        }
    }

    std::vector<std::pair<double, u64>> cand;
    for (u64 list_id : probed.ids) {
        const auto& list = idx.lists[static_cast<std::size_t>(list_id)];
        for (std::size_t i = 0; i < list.ids.size(); ++i) {
            double s = 0.0;
            if (idx.codec == PqCodec::Pq) {
                const u8* code = list.codes.data() + i * static_cast<std::size_t>(idx.m_sub);
                for (int m = 0; m < idx.m_sub; ++m)
                    s += lut[static_cast<std::size_t>(m) * kPqCodewords + code[m]];
            } else {
                s = dot(std::span<const float>(list.raw.data() + i * static_cast<std::size_t>(idx.dim),
                                               static_cast<std::size_t>(idx.dim)),
                        query);
            }
            cand.emplace_back(s, list.ids[i]);
        }
    }
    SearchResult out;
    detail::top_k_sorted(cand, k, out);
    return out;
}

// ---------------------------------------------------------------------------
// Snapshot: header {magic "VALMIVF", version, E, C, M, count, metric=IP,
// codec, payload checksum}, centroid block, codebook block, posting lists.
// ---------------------------------------------------------------------------

inline std::string serialize_index(const IvfPqIndex& idx) {
    require(idx.trained, ErrorCode::NotTrained, "save of untrained index");
    ByteWriter payload;
    for (float f : idx.centroids) payload.put_f32(f);
    for (float f : idx.codebooks) payload.put_f32(f);
    for (const auto& list : idx.lists) {
        payload.put_u64(static_cast<u64>(list.ids.size()));
        for (u64 id : list.ids) payload.put_u64(id);
        if (idx.codec == PqCodec::Pq)
            payload.put_bytes(list.codes.data(), list.codes.size());
        else
            for (float f : list.raw) payload.put_f32(f);
    }

    ByteWriter w;
    w.put_magic(kIndexMagic);
    w.put_u32(kIndexVersion);
    w.put_u32(static_cast<u32>(idx.dim));
    w.put_u32(static_cast<u32>(idx.n_centroids));
    w.put_u32(static_cast<u32>(idx.m_sub));
    w.put_u64(idx.count);
    w.put_u8(0); // metric: inner product
    w.put_u8(static_cast<u8>(idx.codec));
    w.put_u32(crc32(payload.bytes()));
    w.put_bytes(payload.bytes().data(), payload.size());
    return w.take();
}

inline void save_index(const IvfPqIndex& idx, const std::string& path) {
    write_file_atomic(path, serialize_index(idx));
}

// Checksum of an index file's payload; used to bind retrieval caches to the
// exact index they were built against.
inline u32 index_checksum(const IvfPqIndex& idx) {
    const std::string bytes = serialize_index(idx);
    ByteReader r(bytes, ErrorCode::CorruptIndex);
    r.expect_magic(kIndexMagic);
    r.get_u32();
    r.get_u32();
    r.get_u32();
    r.get_u32();
    r.get_u64();
    r.get_u8();
    r.get_u8();
    return r.get_u32();
}

inline IvfPqIndex deserialize_index(std::string_view data) {
    ByteReader r(data, ErrorCode::CorruptIndex);
    r.expect_magic(kIndexMagic);
    const u32 version = r.get_u32();
    require(version == kIndexVersion, ErrorCode::CorruptIndex, "unsupported index version");
    IvfPqIndex idx;
    idx.dim = static_cast<int>(r.get_u32());
    idx.n_centroids = static_cast<int>(r.get_u32());
    idx.m_sub = static_cast<int>(r.get_u32());
    idx.count = r.get_u64();
    const u8 metric = r.get_u8();
    require(metric == 0, ErrorCode::CorruptIndex, "unknown metric");
    const u8 codec = r.get_u8();
    require(codec <= 1, ErrorCode::CorruptIndex, "unknown codec");
    idx.codec = static_cast<PqCodec>(codec);
    const u32 want_crc = r.get_u32();
    require(crc32(r.rest()) == want_crc, ErrorCode::CorruptIndex, "payload checksum mismatch");
    require(idx.dim > 0 && idx.n_centroids > 0 && idx.m_sub > 0 && idx.dim % idx.m_sub == 0,
            ErrorCode::CorruptIndex, "inconsistent header");

    idx.centroids.resize(static_cast<std::size_t>(idx.n_centroids) * static_cast<std::size_t>(idx.dim));
    r.get_f32_span(idx.centroids);
    if (idx.codec == PqCodec::Pq) {
        idx.codebooks.resize(static_cast<std::size_t>(idx.m_sub) * kPqCodewords *
                             static_cast<std::size_t>(idx.sub_dim()));
        r.get_f32_span(idx.codebooks);
    }
    idx.lists.resize(static_cast<std::size_t>(idx.n_centroids));
    u64 total = 0;
    for (auto& list : idx.lists) {
        const u64 n = r.get_u64();
        list.ids.resize(n);
        for (auto& id : list.ids) id = r.get_u64();
        if (idx.codec == PqCodec::Pq) {
            list.codes.resize(n * static_cast<std::size_t>(idx.m_sub));
            r.get_bytes(list.codes.data(), list.codes.size());
        } else {
            list.raw.resize(n * static_cast<std::size_t>(idx.dim));
            r.get_f32_span(list.raw);
        }
        for (u64 id : list.ids) {
            require(idx.id_set.insert(id).second, ErrorCode::CorruptIndex, "duplicate id in file");
        }
        total += n;
    }
    require(total == idx.count, ErrorCode::CorruptIndex, "count field does not match list contents");
    require(r.remaining() == 0, ErrorCode::CorruptIndex, "trailing bytes");
    idx.trained = true;
    return idx;
}

inline IvfPqIndex load_index(const std::string& path) {
    return deserialize_index(read_file(path));
}

} // namespace valm
