#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "valm/augment.hpp"
#include "valm/common.hpp"
#include "valm/corpus.hpp"
#include "valm/encoder.hpp"
#include "valm/evalkit.hpp"
#include "valm/fusion_lm.hpp"
#include "valm/io.hpp"
#include "valm/tokenizer.hpp"
#include "valm/trainer.hpp"
#include "valm/vindex.hpp"

namespace valm {

// Merged effective configuration of one command invocation. `echo` carries
// every key=value that shaped the run and is embedded (with its hash) into
// every report for provenance.
struct RunConfig {
    std::string subcommand;
    std::map<std::string, std::string> echo;

    // paths
    std::string corpus_dir;
    std::string out_path;
    std::string index_path;
    std::string cache_path;
    std::string checkpoint_path;
    std::string report_path;
    std::string loss_csv_path;
    std::string prompts_path;
    std::string items_path;
    std::string piqa_path;
    std::string text_path;

    // gen-corpus
    GroundedCorpusSpec corpus_spec;

    // retrieval plan
    std::string mode = "retrieve";
    int k = 4;
    int nprobe = 32;
    int stride = 1;
    int chunk_cap = 75;
    u64 seed = 1;

    // index build
    int centroids = 256;
    int subquantizers = 8;
    int kmeans_iters = 10;
    bool exact_codec = false;
    int train_sample = 0; // 0 = all keys

    // model / training
    std::string precision = "f64";
    std::string proj_mode = "shared-weights-image-bias";
    int layers = 2;
    int heads = 4;
    int dim = 64;
    int max_seq = 64;
    double ln_img_eps = 1e-5;
    double lr = 5e-4;
    int warmup = 4000;
    int steps = 100;
    int batch = 16;
    int seq_len = 64;
    double dropout = 0.0;
    double clip_norm = 1.0;
    int ckpt_every = 0;
    int threads = 1;

    // eval
    std::string task = "object";
    std::size_t bench_windows = 8;
};

inline u64 config_hash(const std::map<std::string, std::string>& echo) {
    u64 h = 0xcbf29ce484222325ull;
    for (const auto& [k, v] : echo) {
        h = fnv1a64(k, h);
        h = fnv1a64("=", h);
        h = fnv1a64(v, h);
        h = fnv1a64("\n", h);
    }
    return h;
}

inline json provenance_json(const RunConfig& rc) {
    json j;
    j["subcommand"] = rc.subcommand;
    j["config"] = rc.echo;
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(rc.echo)));
    j["config_hash"] = buf;
    return j;
}

inline int exit_code_for(ErrorCode c) {
    switch (c) {
        case ErrorCode::ConfigError:
            return 2;
        case ErrorCode::IoFailure:
        case ErrorCode::CorruptIndex:
        case ErrorCode::CorruptCheckpoint:
        case ErrorCode::BindingMismatch:
        case ErrorCode::MissingEmbedding:
            return 3;
        case ErrorCode::NonFiniteLoss:
            return 5;
        default:
            return 4;
    }
}

namespace detail_cli {

inline void require_path_exists(const std::string& path, const std::string& what) {
    require(!path.empty(), ErrorCode::ConfigError, "missing " + what + " path");
    require(std::filesystem::exists(path), ErrorCode::ConfigError,
            what + " path does not exist: " + path);
}

} // namespace detail_cli

// ---------------------------------------------------------------------------
// Grounded-corpus directory layout (written by gen-corpus, read by the other
// subcommands): meta.json, truth.json, train.txt, vocab.txt, kb.jsonl,
// prompts.jsonl, items.jsonl.
// ---------------------------------------------------------------------------

struct GroundedBundle {
    GroundedCorpus corpus;
    std::unique_ptr<WordTokenizer> tokenizer;
    std::unique_ptr<SyntheticEncoder> encoder;
    std::unique_ptr<RecordImageStore> store;
};

inline void write_grounded_dir(const GroundedCorpus& c, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    write_file_atomic(dir + "/train.txt", c.train_text());

    std::string vocab;
    for (const auto& w : c.vocab_words) {
        vocab += w;
        vocab += '\n';
    }
    write_file_atomic(dir + "/vocab.txt", vocab);

    std::string kb;
    for (const auto& r : c.kb) {
        json j{{"id", r.id}, {"object", r.object}, {"attribute", r.attribute}, {"variant", r.variant}};
        kb += j.dump();
        kb += '\n';
    }
    write_file_atomic(dir + "/kb.jsonl", kb);

    json truth;
    for (const auto& [obj, attr] : c.attribute_of)
        truth[obj] = c.attribute_names[static_cast<std::size_t>(attr)];
    write_file_atomic(dir + "/truth.json", truth.dump(2));

    std::string prompts;
    for (const auto& t : c.prompt_templates) {
        json j{{"task", "synthetic-color"}, {"template", t}, {"labels", c.attribute_names}};
        prompts += j.dump();
        prompts += '\n';
    }
    write_file_atomic(dir + "/prompts.jsonl", prompts);

    std::string items;
    for (const auto& obj : c.test_objects) {
        json j{{"slots", {{"ITEM", obj}}},
               {"gold", c.attribute_names[static_cast<std::size_t>(c.attribute_of.at(obj))]}};
        items += j.dump();
        items += '\n';
    }
    write_file_atomic(dir + "/items.jsonl", items);

    json meta;
    meta["seed"] = c.spec.seed;
    meta["n_objects"] = c.spec.n_objects;
    meta["n_attributes"] = c.spec.n_attributes;
    meta["n_sentences"] = c.spec.n_sentences;
    meta["n_variants"] = c.spec.n_variants;
    meta["test_fraction"] = c.spec.test_fraction;
    meta["dim"] = c.spec.dim;
    meta["templates"] = c.spec.templates;
    meta["attribute_names"] = c.attribute_names;
    meta["train_objects"] = c.train_objects;
    meta["test_objects"] = c.test_objects;
    write_file_atomic(dir + "/meta.json", meta.dump(2));
}

inline GroundedBundle load_grounded_dir(const std::string& dir) {
    detail_cli::require_path_exists(dir + "/meta.json", "corpus-dir meta.json");
    GroundedBundle b;
    const json meta = json::parse(read_file(dir + "/meta.json"));
    GroundedCorpus& c = b.corpus;
    c.spec.seed = meta.at("seed").get<u64>();
    c.spec.n_objects = meta.at("n_objects").get<int>();
    c.spec.n_attributes = meta.at("n_attributes").get<int>();
    c.spec.n_sentences = meta.at("n_sentences").get<int>();
    c.spec.n_variants = meta.at("n_variants").get<int>();
    c.spec.test_fraction = meta.at("test_fraction").get<double>();
    c.spec.dim = meta.at("dim").get<int>();
    c.spec.templates = meta.at("templates").get<std::vector<std::string>>();
    c.attribute_names = meta.at("attribute_names").get<std::vector<std::string>>();
    c.train_objects = meta.at("train_objects").get<std::vector<std::string>>();
    c.test_objects = meta.at("test_objects").get<std::vector<std::string>>();

    const json truth = json::parse(read_file(dir + "/truth.json"));
    for (const auto& [obj, attr_name] : truth.items()) {
        const auto it = std::find(c.attribute_names.begin(), c.attribute_names.end(),
                                  attr_name.get<std::string>());
        require(it != c.attribute_names.end(), ErrorCode::ConfigError,
                "truth.json names unknown attribute");
        c.attribute_of[obj] = static_cast<int>(it - c.attribute_names.begin());
    }

    for (const std::string& line : split_lines(read_file(dir + "/kb.jsonl"))) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        c.kb.push_back({j.at("id").get<u64>(), j.at("object").get<std::string>(),
                        j.at("attribute").get<int>(), j.at("variant").get<int>()});
    }

    std::vector<std::string> vocab_words;
    for (const std::string& line : split_lines(read_file(dir + "/vocab.txt")))
        if (!line.empty()) vocab_words.push_back(line);
    c.vocab_words = vocab_words;

    b.tokenizer = std::make_unique<WordTokenizer>(vocab_words);
    b.encoder = std::make_unique<SyntheticEncoder>(c.spec.dim, c.spec.seed, c.spec.n_attributes,
                                                   c.attribute_of, b.tokenizer.get());
    b.store = std::make_unique<RecordImageStore>(c.kb, b.encoder.get());
    return b;
}

// ---------------------------------------------------------------------------
// Subcommands. Each validates its inputs up front (ConfigError before any
// work) and writes artifacts atomically.
// ---------------------------------------------------------------------------

inline int cmd_gen_corpus(const RunConfig& rc) {
    require(!rc.out_path.empty(), ErrorCode::ConfigError, "missing --out-dir");
    const GroundedCorpus corpus = generate_grounded_corpus(rc.corpus_spec);
    write_grounded_dir(corpus, rc.out_path);
    std::fprintf(stdout, "wrote grounded corpus: %d objects, %d attributes, %d sentences -> %s\n",
                 rc.corpus_spec.n_objects, rc.corpus_spec.n_attributes, rc.corpus_spec.n_sentences,
                 rc.out_path.c_str());
    return 0;
}

inline int cmd_build_index(const RunConfig& rc) {
    detail_cli::require_path_exists(rc.corpus_dir, "corpus-dir");
    require(!rc.out_path.empty(), ErrorCode::ConfigError, "missing --out index path");
    GroundedBundle bundle = load_grounded_dir(rc.corpus_dir);

    std::vector<std::pair<u64, EmbeddingVector>> entries;
    entries.reserve(bundle.corpus.kb.size());
    for (const auto& rec : bundle.corpus.kb)
        entries.emplace_back(rec.id, bundle.encoder->encode_image(rec));

    std::vector<EmbeddingVector> sample;
    if (rc.train_sample > 0 && static_cast<std::size_t>(rc.train_sample) < entries.size()) {
        std::vector<std::size_t> idx(entries.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(mix_seed(rc.seed, "train-sample"));
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(rc.train_sample));
        for (std::size_t i : idx) sample.push_back(entries[i].second);
    } else {
        for (const auto& [id, v] : entries) sample.push_back(v);
    }

    IvfPqIndex idx = train_index(sample, rc.centroids, rc.subquantizers, rc.kmeans_iters, rc.seed,
                                 rc.exact_codec ? PqCodec::Exact : PqCodec::Pq);
    add_keys(idx, entries);
    save_index(idx, rc.out_path);
    std::fprintf(stdout, "index: %llu keys, C=%d, M=%d, codec=%s -> %s\n",
                 static_cast<unsigned long long>(idx.count), idx.n_centroids, idx.m_sub,
                 idx.codec == PqCodec::Pq ? "pq" : "exact", rc.out_path.c_str());
    return 0;
}

inline AugmentationPlan plan_from_config(const RunConfig& rc) {
    AugmentationPlan plan;
    plan.mode = aug_mode_from_name(rc.mode);
    plan.k = rc.k;
    plan.nprobe = rc.nprobe;
    plan.seed = rc.seed;
    plan.stride = rc.stride;
    plan.chunk_cap = static_cast<std::size_t>(rc.chunk_cap);
    plan.index_path = rc.index_path;
    plan.cache_path = rc.cache_path;
    return plan;
}

struct LoadedEnv {
    GroundedBundle bundle;
    CorpusStore corpus;
    IvfPqIndex index;
    bool has_index = false;
    AugmentEnv env;
    AugmentationPlan plan;
};

inline LoadedEnv load_env(const RunConfig& rc, bool need_corpus_text) {
    detail_cli::require_path_exists(rc.corpus_dir, "corpus-dir");
    LoadedEnv L;
    L.plan = plan_from_config(rc);
    L.bundle = load_grounded_dir(rc.corpus_dir);
    if (need_corpus_text) {
        detail_cli::require_path_exists(rc.corpus_dir + "/train.txt", "train text");
        L.corpus = tokenize_corpus(read_file(rc.corpus_dir + "/train.txt"), *L.bundle.tokenizer);
    }
    if (L.plan.mode == AugMode::Retrieve) {
        detail_cli::require_path_exists(rc.index_path, "index");
        L.index = load_index(rc.index_path);
        L.has_index = true;
    }
    L.plan.encoder_id = L.bundle.encoder->id();
    L.env.encoder = L.bundle.encoder.get();
    L.env.index = L.has_index ? &L.index : nullptr;
    L.env.store = L.bundle.store.get();
    L.env.stop_ids = L.bundle.tokenizer->stop_token_ids();
    return L;
}

inline int cmd_build_cache(const RunConfig& rc) {
    require(!rc.out_path.empty(), ErrorCode::ConfigError, "missing --out cache path");
    LoadedEnv L = load_env(rc, /*need_corpus_text=*/true);
    require(L.plan.mode != AugMode::Disabled, ErrorCode::ConfigError,
            "a disabled-mode cache would be empty; pick retrieve or random");
    const RetrievalCache cache = build_cache(L.corpus, L.plan, L.env);
    save_cache(cache, rc.out_path);
    std::fprintf(stdout, "cache: %zu positions -> %s\n", cache.entries.size(), rc.out_path.c_str());
    return 0;
}

template <class T>
int cmd_train_typed(const RunConfig& rc) {
    require(!rc.checkpoint_path.empty(), ErrorCode::ConfigError, "missing --out checkpoint path");
    LoadedEnv L = load_env(rc, /*need_corpus_text=*/true);

    ModelConfig mc;
    mc.n_layers = rc.layers;
    mc.n_heads = rc.heads;
    mc.d_model = rc.dim;
    mc.vocab = L.bundle.tokenizer->vocab_size();
    mc.max_seq = std::max(rc.max_seq, rc.seq_len);
    mc.num_images = L.plan.effective_k();
    mc.proj_mode = proj_mode_from_name(rc.proj_mode);
    mc.ln_img_eps = rc.ln_img_eps;
    mc.dropout = rc.dropout;
    if (L.plan.mode == AugMode::Retrieve)
        require(L.bundle.encoder->dim() == mc.d_model, ErrorCode::EncoderMismatch,
                "encoder dim must equal model width E");

    Model<T> model = Model<T>::build(mc);
    model.init_weights(mix_seed(rc.seed, "init"));

    TrainConfig tc;
    tc.lr = rc.lr;
    tc.warmup_steps = std::min(rc.warmup, rc.steps);
    tc.total_steps = rc.steps;
    tc.batch_size = rc.batch;
    tc.seq_len = rc.seq_len;
    tc.dropout = rc.dropout;
    tc.seed = rc.seed;
    tc.clip_norm = rc.clip_norm;
    tc.checkpoint_every = rc.ckpt_every;
    tc.checkpoint_path = rc.checkpoint_path;
    tc.loss_csv_path = rc.loss_csv_path;
    tc.n_threads = rc.threads;

    std::unique_ptr<BlockAugmenter> aug;
    RetrievalCache cache;
    if (!rc.cache_path.empty() && L.plan.mode == AugMode::Retrieve) {
        detail_cli::require_path_exists(rc.cache_path, "cache");
        cache = load_cache(rc.cache_path);
        validate_cache_binding(cache, make_binding(L.corpus, L.plan, L.env));
        aug = std::make_unique<CachedBlockAugmenter>(cache, L.plan, *L.env.store);
    } else {
        aug = std::make_unique<LiveBlockAugmenter>(L.corpus, L.plan, L.env);
    }

    const TrainResult res = train(model, L.corpus, *aug, tc);
    if (!res.curve.empty())
        std::fprintf(stdout, "trained %d steps, final nll %.6f -> %s\n", rc.steps,
                     res.curve.back().nll, rc.checkpoint_path.c_str());
    else
        std::fprintf(stdout, "trained 0 steps (checkpoint = initialization) -> %s\n",
                     rc.checkpoint_path.c_str());
    return 0;
}

inline int cmd_train(const RunConfig& rc) {
    if (rc.precision == "f32") return cmd_train_typed<float>(rc);
    if (rc.precision == "f64") return cmd_train_typed<double>(rc);
    raise(ErrorCode::ConfigError, "precision must be f32 or f64");
}

template <class T>
int cmd_eval_typed(const RunConfig& rc) {
    detail_cli::require_path_exists(rc.checkpoint_path, "checkpoint");
    require(!rc.report_path.empty(), ErrorCode::ConfigError, "missing --report path");
    LoadedEnv L = load_env(rc, /*need_corpus_text=*/rc.task == "lm" && rc.text_path.empty());
    Model<T> model = load_checkpoint<T>(rc.checkpoint_path);
    if (L.plan.mode != AugMode::Disabled)
        require(L.bundle.encoder->dim() == model.cfg.d_model, ErrorCode::EncoderMismatch,
                "encoder dim must equal model width E");

    json report = provenance_json(rc);
    const Tokenizer& tok = *L.bundle.tokenizer;

    if (rc.task == "object") {
        const std::string prompts_path =
            rc.prompts_path.empty() ? rc.corpus_dir + "/prompts.jsonl" : rc.prompts_path;
        const std::string items_path =
            rc.items_path.empty() ? rc.corpus_dir + "/items.jsonl" : rc.items_path;
        detail_cli::require_path_exists(prompts_path, "prompts");
        detail_cli::require_path_exists(items_path, "items");
        const auto prompts = load_prompts_jsonl(prompts_path);
        const auto items = load_items_jsonl(items_path);
        const EvalReport r = eval_object_task(model, L.plan, L.env, tok, prompts, items);
        report.update(r.to_json());
        write_file_atomic(rc.report_path + ".csv", r.to_csv());
        std::fprintf(stdout, "object task: averaged accuracy %.4f over %zu prompts\n",
                     r.averaged_accuracy, r.per_prompt_accuracy.size());
    } else if (rc.task == "piqa") {
        detail_cli::require_path_exists(rc.piqa_path, "piqa items");
        std::size_t n = 0, correct = 0, with_gold = 0;
        json results = json::array();
        for (const std::string& line : split_lines(read_file(rc.piqa_path))) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            const PiqaChoice c = score_solutions_piqa(
                model, L.plan, L.env, tok, j.at("goal").get<std::string>(),
                j.at("sol0").get<std::string>(), j.at("sol1").get<std::string>(), n);
            json rj{{"chosen", c.chosen}, {"score0", c.score0}, {"score1", c.score1}};
            if (j.contains("gold")) {
                ++with_gold;
                if (j.at("gold").get<int>() == c.chosen) ++correct;
                rj["gold"] = j.at("gold").get<int>();
            }
            results.push_back(rj);
            ++n;
        }
        require(n > 0, ErrorCode::ConfigError, "no PIQA items");
        report["items"] = results;
        if (with_gold > 0) {
            const double acc = static_cast<double>(correct) / static_cast<double>(with_gold);
            report["accuracy"] = acc;
            std::fprintf(stdout, "piqa: %zu items, accuracy %.4f\n", n, acc);
        } else {
            std::fprintf(stdout, "piqa: %zu items\n", n);
        }
    } else if (rc.task == "lm") {
        CorpusStore corpus;
        if (!rc.text_path.empty()) {
            detail_cli::require_path_exists(rc.text_path, "text");
            corpus = tokenize_corpus(read_file(rc.text_path), tok);
        } else {
            corpus = L.corpus;
        }
        const PerplexityReport r = perplexity(model, L.plan, L.env, corpus, tok);
        report["perplexity"] = r.ppl;
        report["mean_nll"] = r.mean_nll;
        report["n_predicted"] = r.n_predicted;
        if (r.has_last_word) {
            report["last_word_accuracy"] = r.last_word_accuracy;
            report["n_passages"] = r.n_passages;
        }
        std::fprintf(stdout, "lm: perplexity %.4f over %zu positions\n", r.ppl, r.n_predicted);
    } else {
        raise(ErrorCode::ConfigError, "unknown eval task '" + rc.task + "'");
    }

    write_file_atomic(rc.report_path, report.dump(2) + "\n");
    return 0;
}

inline int cmd_eval(const RunConfig& rc) {
    if (rc.precision == "f32") return cmd_eval_typed<float>(rc);
    if (rc.precision == "f64") return cmd_eval_typed<double>(rc);
    raise(ErrorCode::ConfigError, "precision must be f32 or f64");
}

template <class T>
int cmd_bench_typed(const RunConfig& rc) {
    detail_cli::require_path_exists(rc.checkpoint_path, "checkpoint");
    require(!rc.report_path.empty(), ErrorCode::ConfigError, "missing --report path");
    RunConfig rc2 = rc;
    rc2.mode = "retrieve"; // bench always compares retrieve vs disabled
    LoadedEnv L = load_env(rc2, /*need_corpus_text=*/true);
    Model<T> model = load_checkpoint<T>(rc.checkpoint_path);
    const BenchReport r = bench_retrieval_overhead(model, L.plan, L.env, L.corpus, rc.bench_windows);
    json report = provenance_json(rc);
    report.update(r.to_json());
    write_file_atomic(rc.report_path, report.dump(2) + "\n");
    std::fprintf(stdout, "bench: %.1f tok/s with retrieval, %.1f without, ratio %.2fx\n",
                 r.tokens_per_sec_with, r.tokens_per_sec_without, r.ratio);
    return 0;
}

inline int cmd_bench(const RunConfig& rc) {
    if (rc.precision == "f32") return cmd_bench_typed<float>(rc);
    if (rc.precision == "f64") return cmd_bench_typed<double>(rc);
    raise(ErrorCode::ConfigError, "precision must be f32 or f64");
}

} // namespace valm
