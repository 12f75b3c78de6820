#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "valm/common.hpp"
#include "valm/corpus.hpp"
#include "valm/encoder.hpp"
#include "valm/fusion_lm.hpp"
#include "valm/io.hpp"
#include "valm/vindex.hpp"

namespace valm {

enum class AugMode : u8 { Retrieve = 0, Disabled = 1, Random = 2 };

inline const char* aug_mode_name(AugMode m) {
    switch (m) {
        case AugMode::Retrieve: return "retrieve";
        case AugMode::Disabled: return "disabled";
        case AugMode::Random: return "random";
    }
    return "?";
}

inline AugMode aug_mode_from_name(const std::string& s) {
    for (AugMode m : {AugMode::Retrieve, AugMode::Disabled, AugMode::Random})
        if (s == aug_mode_name(m)) return m;
    raise(ErrorCode::ConfigError, "unknown augmentation mode '" + s + "'");
}

struct AugmentationPlan {
    AugMode mode = AugMode::Disabled;
    int k = 0;          // images per position; Disabled forces 0
    int nprobe = 32;
    std::string encoder_id;
    std::string index_path;
    std::string cache_path;
    u64 seed = 0;       // Random mode draws
    int stride = 1;     // augment positions with (i - 1) % stride == 0; default every i >= 1
    std::size_t chunk_cap = 75;

    int effective_k() const { return mode == AugMode::Disabled ? 0 : k; }
};

// id -> key embedding. Search finds ids; the actual z vectors fed to the
// fusion layer always come from here, so cached and live retrieval produce
// identical model inputs.
class ImageStore {
public:
    virtual ~ImageStore() = default;
    virtual EmbeddingVector get(u64 id) const = 0;
    virtual std::vector<u64> all_ids() const = 0; // ascending
};

class RecordImageStore final : public ImageStore {
public:
    RecordImageStore(std::vector<ImageRecord> records, const JointEncoder* enc)
        : records_(std::move(records)), enc_(enc) {
        for (std::size_t i = 0; i < records_.size(); ++i) by_id_[records_[i].id] = i;
    }

    EmbeddingVector get(u64 id) const override {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) raise(ErrorCode::MissingEmbedding, "unknown image id " + std::to_string(id));
        return enc_->encode_image(records_[it->second]);
    }

    std::vector<u64> all_ids() const override {
        std::vector<u64> ids;
        ids.reserve(records_.size());
        for (const auto& r : records_) ids.push_back(r.id);
        std::sort(ids.begin(), ids.end());
        return ids;
    }

    const std::vector<ImageRecord>& records() const { return records_; }
    const ImageRecord* record(u64 id) const {
        auto it = by_id_.find(id);
        return it == by_id_.end() ? nullptr : &records_[it->second];
    }

private:
    std::vector<ImageRecord> records_;
    const JointEncoder* enc_;
    std::unordered_map<u64, std::size_t> by_id_;
};

class TableImageStore final : public ImageStore {
public:
    explicit TableImageStore(EmbeddingTable table) : table_(std::move(table)) {}

    EmbeddingVector get(u64 id) const override {
        const auto* v = table_.find(id);
        if (!v) raise(ErrorCode::MissingEmbedding, "unknown image id " + std::to_string(id));
        return *v;
    }

    std::vector<u64> all_ids() const override {
        std::vector<u64> ids;
        ids.reserve(table_.entries.size());
        for (const auto& [id, _] : table_.entries) ids.push_back(id);
        std::sort(ids.begin(), ids.end());
        return ids;
    }

private:
    EmbeddingTable table_;
};

// Runtime bundle the augmentation ops work against.
struct AugmentEnv {
    const JointEncoder* encoder = nullptr;
    const IvfPqIndex* index = nullptr;
    const ImageStore* store = nullptr;
    std::vector<int> stop_ids;
};

namespace detail_aug {

inline void check_plan(const AugmentationPlan& plan, const AugmentEnv& env) {
    require(plan.stride >= 1, ErrorCode::ConfigError, "stride must be >= 1");
    if (plan.mode == AugMode::Disabled) return;
    require(plan.k >= 1, ErrorCode::ConfigError, "K must be >= 1 unless retrieval is disabled");
    require(env.store != nullptr, ErrorCode::IndexUnavailable, "no image store configured");
    if (plan.mode == AugMode::Retrieve) {
        require(env.encoder != nullptr, ErrorCode::IndexUnavailable, "no encoder configured");
        require(env.index != nullptr, ErrorCode::IndexUnavailable, "no index loaded");
        require(env.index->trained, ErrorCode::NotTrained, "index not trained");
        require(env.encoder->dim() == env.index->dim, ErrorCode::EncoderMismatch,
                "encoder dim != index dim");
    }
}

inline bool position_covered(const AugmentationPlan& plan, std::size_t i) {
    if (i == 0) return false; // empty context: retrieval skipped by design
    return ((i - 1) % static_cast<std::size_t>(plan.stride)) == 0;
}

} // namespace detail_aug

// Top-K ids and scores for one position of a context sequence, by plan mode.
inline std::vector<std::pair<u64, float>> retrieve_ids_at(std::span<const int> ctx, std::size_t i,
                                                          const AugmentationPlan& plan,
                                                          const AugmentEnv& env, u64 doc_id) {
    std::vector<std::pair<u64, float>> out;
    if (plan.mode == AugMode::Disabled || !detail_aug::position_covered(plan, i)) return out;
    if (plan.mode == AugMode::Random) {
        const std::vector<u64> ids = env.store->all_ids();
        require(!ids.empty(), ErrorCode::IndexUnavailable, "image store is empty");
        Rng rng(mix_seed(mix_seed(mix_seed(plan.seed, "random-mode"), doc_id), static_cast<u64>(i)));
        for (int k = 0; k < plan.k; ++k) {
            const u64 id = ids[static_cast<std::size_t>(rng.uniform_int(static_cast<i64>(ids.size())))];
            out.emplace_back(id, 0.0f);
        }
        return out;
    }
    const ContextChunk chunk = build_context_chunk(ctx, i, plan.chunk_cap, env.stop_ids);
    const EmbeddingVector q = encode_text_query(*env.encoder, chunk);
    const SearchResult res = search(*env.index, q, static_cast<std::size_t>(plan.k), plan.nprobe);
    out.reserve(res.size());
    for (std::size_t j = 0; j < res.size(); ++j)
        out.emplace_back(res.ids[j], static_cast<float>(res.scores[j]));
    return out;
}

inline std::vector<ImageSlot> slots_from_ids(const std::vector<std::pair<u64, float>>& ids,
                                             const ImageStore& store) {
    std::vector<ImageSlot> slots;
    slots.reserve(ids.size());
    for (const auto& [id, score] : ids) slots.push_back({id, score, store.get(id)});
    return slots;
}

// f_rt over a whole sequence: per-position chunking, query encoding and
// search (or the Disabled/Random ablations).
inline RetrievedImageSet augment_positions(std::span<const int> seq, const AugmentationPlan& plan,
                                           const AugmentEnv& env, u64 doc_id = 0) {
    detail_aug::check_plan(plan, env);
    RetrievedImageSet images = RetrievedImageSet::empty(seq.size());
    if (plan.mode == AugMode::Disabled) return images;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const auto ids = retrieve_ids_at(seq, i, plan, env, doc_id);
        if (!ids.empty()) images.slots[i] = slots_from_ids(ids, *env.store);
    }
    return images;
}

// Replace the image slots at one position (the counterfactual probe's swap).
inline RetrievedImageSet counterfactual_swap(const RetrievedImageSet& images, std::size_t position,
                                             std::vector<ImageSlot> replacement, int k_cap) {
    require(position < images.slots.size(), ErrorCode::PositionOutOfRange,
            "swap position beyond sequence");
    require(static_cast<int>(replacement.size()) <= k_cap, ErrorCode::ConfigError,
            "replacement count exceeds K");
    RetrievedImageSet out = images;
    out.slots[position] = std::move(replacement);
    return out;
}

// ---------------------------------------------------------------------------
// Retrieval cache ("VALMRC"): header binds corpus hash, encoder id, index
// checksum, K and nprobe; body is (doc, pos, ids, scores) records sorted by
// (doc, pos).
// ---------------------------------------------------------------------------

inline constexpr const char* kCacheMagic = "VALMRC";
inline constexpr u32 kCacheVersion = 1;

struct CacheBinding {
    u64 corpus_hash = 0;
    std::string encoder_id;
    u32 index_checksum = 0;
    u32 k = 0;
    u32 nprobe = 0;

    bool operator==(const CacheBinding&) const = default;
};

struct RetrievalCache {
    CacheBinding binding;
    struct Entry {
        u64 doc = 0;
        u64 pos = 0;
        std::vector<u64> ids;
        std::vector<float> scores;
    };
    std::vector<Entry> entries; // sorted by (doc, pos)

    const Entry* find(u64 doc, u64 pos) const {
        auto it = std::lower_bound(entries.begin(), entries.end(), std::make_pair(doc, pos),
                                   [](const Entry& e, const std::pair<u64, u64>& key) {
                                       return std::make_pair(e.doc, e.pos) < key;
                                   });
        if (it == entries.end() || it->doc != doc || it->pos != pos) return nullptr;
        return &*it;
    }
};

inline CacheBinding make_binding(const CorpusStore& corpus, const AugmentationPlan& plan,
                                 const AugmentEnv& env) {
    CacheBinding b;
    b.corpus_hash = corpus.hash();
    b.encoder_id = env.encoder ? env.encoder->id() : std::string("none");
    b.index_checksum = env.index ? index_checksum(*env.index) : 0;
    b.k = static_cast<u32>(plan.k);
    b.nprobe = static_cast<u32>(plan.nprobe);
    return b;
}

// Retrieval results for every covered position of the corpus stream.
inline RetrievalCache build_cache(const CorpusStore& corpus, const AugmentationPlan& plan,
                                  const AugmentEnv& env) {
    detail_aug::check_plan(plan, env);
    require(!corpus.tokens.empty(), ErrorCode::EmptyCorpus, "cannot cache an empty corpus");
    RetrievalCache cache;
    cache.binding = make_binding(corpus, plan, env);
    const std::span<const int> stream(corpus.tokens);
    for (std::size_t i = 1; i < corpus.tokens.size(); ++i) {
        if (!detail_aug::position_covered(plan, i)) continue;
        auto ids = retrieve_ids_at(stream, i, plan, env, /*doc_id=*/0);
        RetrievalCache::Entry e;
        e.doc = 0;
        e.pos = i;
        for (const auto& [id, score] : ids) {
            e.ids.push_back(id);
            e.scores.push_back(score);
        }
        cache.entries.push_back(std::move(e));
    }
    return cache;
}

inline std::string serialize_cache(const RetrievalCache& cache) {
    ByteWriter payload;
    payload.put_u64(cache.binding.corpus_hash);
    payload.put_string(cache.binding.encoder_id);
    payload.put_u32(cache.binding.index_checksum);
    payload.put_u32(cache.binding.k);
    payload.put_u32(cache.binding.nprobe);
    payload.put_u64(static_cast<u64>(cache.entries.size()));
    for (const auto& e : cache.entries) {
        payload.put_u64(e.doc);
        payload.put_u64(e.pos);
        payload.put_u32(static_cast<u32>(e.ids.size()));
        for (std::size_t j = 0; j < e.ids.size(); ++j) {
            payload.put_u64(e.ids[j]);
            payload.put_f32(e.scores[j]);
        }
    }
    ByteWriter w;
    w.put_magic(kCacheMagic);
    w.put_u32(kCacheVersion);
    w.put_u32(crc32(payload.bytes()));
    w.put_bytes(payload.bytes().data(), payload.size());
    return w.take();
}

inline void save_cache(const RetrievalCache& cache, const std::string& path) {
    write_file_atomic(path, serialize_cache(cache));
}

inline RetrievalCache deserialize_cache(std::string_view bytes) {
    ByteReader r(bytes, ErrorCode::BindingMismatch);
    r.expect_magic(kCacheMagic);
    require(r.get_u32() == kCacheVersion, ErrorCode::BindingMismatch, "unsupported cache version");
    const u32 want = r.get_u32();
    require(crc32(r.rest()) == want, ErrorCode::BindingMismatch, "cache checksum mismatch");
    RetrievalCache cache;
    cache.binding.corpus_hash = r.get_u64();
    cache.binding.encoder_id = r.get_string();
    cache.binding.index_checksum = r.get_u32();
    cache.binding.k = r.get_u32();
    cache.binding.nprobe = r.get_u32();
    const u64 n = r.get_u64();
    cache.entries.resize(n);
    for (auto& e : cache.entries) {
        e.doc = r.get_u64();
        e.pos = r.get_u64();
        const u32 cnt = r.get_u32();
        e.ids.resize(cnt);
        e.scores.resize(cnt);
        for (u32 j = 0; j < cnt; ++j) {
            e.ids[j] = r.get_u64();
            e.scores[j] = r.get_f32();
        }
    }
    require(r.remaining() == 0, ErrorCode::BindingMismatch, "trailing bytes in cache");
    return cache;
}

inline RetrievalCache load_cache(const std::string& path) {
    return deserialize_cache(read_file(path));
}

// Stale caches (different corpus, encoder, index, K or nprobe) are rejected.
inline void validate_cache_binding(const RetrievalCache& cache, const CacheBinding& expected) {
    require(cache.binding == expected, ErrorCode::BindingMismatch,
            "cache was built against different corpus/encoder/index/plan");
}

// ---------------------------------------------------------------------------
// Per-position image provider for training: live search or a validated cache,
// interchangeable bit-for-bit.
// ---------------------------------------------------------------------------

class BlockAugmenter {
public:
    virtual ~BlockAugmenter() = default;
    // image slots for stream positions [start, start+len)
    virtual RetrievedImageSet images_for_block(std::size_t start, std::size_t len) const = 0;
};

class LiveBlockAugmenter final : public BlockAugmenter {
public:
    LiveBlockAugmenter(const CorpusStore& corpus, const AugmentationPlan& plan,
                       const AugmentEnv& env)
        : corpus_(corpus), plan_(plan), env_(env) {
        detail_aug::check_plan(plan, env);
    }

    RetrievedImageSet images_for_block(std::size_t start, std::size_t len) const override {
        RetrievedImageSet images = RetrievedImageSet::empty(len);
        if (plan_.mode == AugMode::Disabled) return images;
        const std::span<const int> stream(corpus_.tokens);
        for (std::size_t p = 0; p < len; ++p) {
            const auto ids = retrieve_ids_at(stream, start + p, plan_, env_, /*doc_id=*/0);
            if (!ids.empty()) images.slots[p] = slots_from_ids(ids, *env_.store);
        }
        return images;
    }

private:
    const CorpusStore& corpus_;
    AugmentationPlan plan_;
    AugmentEnv env_;
};

class CachedBlockAugmenter final : public BlockAugmenter {
public:
    CachedBlockAugmenter(const RetrievalCache& cache, const AugmentationPlan& plan,
                         const ImageStore& store)
        : cache_(cache), plan_(plan), store_(store) {}

    RetrievedImageSet images_for_block(std::size_t start, std::size_t len) const override {
        RetrievedImageSet images = RetrievedImageSet::empty(len);
        if (plan_.mode == AugMode::Disabled) return images;
        for (std::size_t p = 0; p < len; ++p) {
            const std::size_t i = start + p;
            if (!detail_aug::position_covered(plan_, i)) continue;
            const auto* e = cache_.find(0, i);
            require(e != nullptr, ErrorCode::BindingMismatch,
                    "cache has no entry for position " + std::to_string(i));
            if (e->ids.empty()) continue;
            std::vector<std::pair<u64, float>> ids;
            ids.reserve(e->ids.size());
            for (std::size_t j = 0; j < e->ids.size(); ++j) ids.emplace_back(e->ids[j], e->scores[j]);
            images.slots[p] = slots_from_ids(ids, store_);
        }
        return images;
    }

private:
    const RetrievalCache& cache_;
    AugmentationPlan plan_;
    const ImageStore& store_;
};

// ---------------------------------------------------------------------------
// Synthetic grounded corpus: sentences asserting one attribute per object,
// a train/test object split, and an image KB with one record per
// (object, attribute, variant).
// ---------------------------------------------------------------------------

struct GroundedCorpusSpec {
    int n_objects = 100;
    int n_attributes = 8;
    int n_sentences = 10000;
    int n_variants = 4;          // KB records per (object, attribute)
    double test_fraction = 0.5;  // objects held out of the training text
    u64 seed = 1;
    int dim = 64; // encoder/model width
    std::vector<std::string> templates = {
        "the color of {obj} is {attr} .",
        "{obj} is {attr} .",
        "people say the color of {obj} is {attr} .",
        "a photo of {obj} looks {attr} .",
    };
};

struct GroundedCorpus {
    GroundedCorpusSpec spec;
    std::vector<std::string> attribute_names;
    std::vector<std::string> train_objects, test_objects;
    std::map<std::string, int> attribute_of; // every object -> its attribute id
    std::vector<std::string> train_sentences;
    std::vector<ImageRecord> kb;
    std::vector<std::string> prompt_templates; // [ITEM] slot, label appended
    std::vector<std::string> vocab_words;      // deterministic word-level vocabulary

    std::string train_text() const {
        std::string text;
        for (const auto& s : train_sentences) {
            text += s;
            text += '\n';
        }
        return text;
    }
};

namespace detail_aug {

inline const std::vector<std::string>& attribute_name_pool() {
    static const std::vector<std::string> pool = {"red",  "blue",  "green", "gold",
                                                  "teal", "pink",  "ivory", "plum",
                                                  "onyx", "amber", "coral", "slate"};
    return pool;
}

// unique pronounceable object words (CVCV), disjoint from template/attribute
// vocabulary by construction
inline std::vector<std::string> make_object_names(int n, u64 seed) {
    static const std::string cons = "bdfgklmnprstvz";
    static const std::string vows = "aeiou";
    std::vector<std::string> all;
    all.reserve(cons.size() * vows.size() * cons.size() * vows.size());
    for (char c1 : cons)
        for (char v1 : vows)
            for (char c2 : cons)
                for (char v2 : vows) all.push_back({c1, v1, c2, v2});
    Rng rng(mix_seed(seed, "object-names"));
    rng.shuffle(all);
    require(n <= static_cast<int>(all.size()), ErrorCode::SpecInfeasible, "too many objects");
    all.resize(static_cast<std::size_t>(n));
    return all;
}

} // namespace detail_aug

inline GroundedCorpus generate_grounded_corpus(const GroundedCorpusSpec& spec) {
    require(spec.n_objects >= 4, ErrorCode::SpecInfeasible, "need at least 4 objects");
    require(spec.n_attributes >= 2, ErrorCode::SpecInfeasible, "need at least 2 attributes");
    require(spec.n_attributes <= static_cast<int>(detail_aug::attribute_name_pool().size()),
            ErrorCode::SpecInfeasible, "attribute pool has only 12 names");
    require(spec.n_variants >= 1, ErrorCode::SpecInfeasible, "need at least 1 KB variant");
    require(spec.test_fraction >= 0.0 && spec.test_fraction < 1.0, ErrorCode::SpecInfeasible,
            "test fraction must be in [0, 1)");
    require(spec.n_sentences >= 1, ErrorCode::SpecInfeasible, "need at least 1 sentence");
    require(!spec.templates.empty(), ErrorCode::SpecInfeasible, "no sentence templates");

    GroundedCorpus c;
    c.spec = spec;
    c.attribute_names.assign(detail_aug::attribute_name_pool().begin(),
                             detail_aug::attribute_name_pool().begin() + spec.n_attributes);

    std::vector<std::string> objects = detail_aug::make_object_names(spec.n_objects, spec.seed);
    // round-robin attribute assignment over the shuffled object order keeps
    // marginals near uniform within both splits
    for (int i = 0; i < spec.n_objects; ++i)
        c.attribute_of[objects[static_cast<std::size_t>(i)]] = i % spec.n_attributes;

    const int n_test = static_cast<int>(std::lround(spec.test_fraction * spec.n_objects));
    require(spec.n_objects - n_test >= 1, ErrorCode::SpecInfeasible, "no training objects left");
    c.train_objects.assign(objects.begin(), objects.end() - n_test);
    c.test_objects.assign(objects.end() - n_test, objects.end());

    Rng rng(mix_seed(spec.seed, "sentences"));
    auto fill = [](std::string tmpl, const std::string& obj, const std::string& attr) {
        for (const auto& [slot, value] :
             {std::pair<std::string, const std::string&>{"{obj}", obj}, {"{attr}", attr}}) {
            std::size_t p;
            while ((p = tmpl.find(slot)) != std::string::npos) tmpl.replace(p, slot.size(), value);
        }
        return tmpl;
    };
    c.train_sentences.reserve(static_cast<std::size_t>(spec.n_sentences));
    for (int s = 0; s < spec.n_sentences; ++s) {
        const auto& obj =
            c.train_objects[static_cast<std::size_t>(rng.uniform_int(static_cast<i64>(c.train_objects.size())))];
        const auto& tmpl =
            spec.templates[static_cast<std::size_t>(rng.uniform_int(static_cast<i64>(spec.templates.size())))];
        c.train_sentences.push_back(
            fill(tmpl, obj, c.attribute_names[static_cast<std::size_t>(c.attribute_of.at(obj))]));
    }

    // KB: one record per (object, attribute, variant), test objects included
    u64 next_id = 0;
    for (const auto& obj : objects)
        for (int a = 0; a < spec.n_attributes; ++a)
            for (int t = 0; t < spec.n_variants; ++t)
                c.kb.push_back({next_id++, obj, a, t});

    for (const auto& t : spec.templates) {
        // the eval prompt is the sentence template cut right before {attr}
        const auto p = t.find("{attr}");
        if (p == std::string::npos) continue;
        std::string prompt = t.substr(0, p);
        while (!prompt.empty() && prompt.back() == ' ') prompt.pop_back();
        std::size_t q;
        std::string item_tmpl = prompt;
        while ((q = item_tmpl.find("{obj}")) != std::string::npos)
            item_tmpl.replace(q, 5, "[ITEM]");
        c.prompt_templates.push_back(item_tmpl);
    }
    require(!c.prompt_templates.empty(), ErrorCode::SpecInfeasible,
            "no template contains an {attr} slot");

    std::set<std::string> words;
    for (const auto& t : spec.templates) {
        std::istringstream in(t);
        std::string w;
        while (in >> w)
            if (w != "{obj}" && w != "{attr}") words.insert(w);
    }
    for (const auto& o : objects) {
        require(!words.count(o), ErrorCode::SpecInfeasible, "object name collides with template word");
        words.insert(o);
    }
    for (const auto& a : c.attribute_names) words.insert(a);
    c.vocab_words.assign(words.begin(), words.end());
    return c;
}

// Deterministic synthetic dual encoder bound to a grounded corpus: the
// attribute table maps each object word to its true attribute.
inline SyntheticEncoder make_grounded_encoder(const GroundedCorpus& corpus, const Tokenizer& tok) {
    return SyntheticEncoder(corpus.spec.dim, corpus.spec.seed, corpus.spec.n_attributes,
                            corpus.attribute_of, &tok);
}

} // namespace valm
