// valm: build retrieval indices and caches, train the visually-augmented LM,
// and run zero-shot evaluations and ablations.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "valm/valm.hpp"

namespace {

using valm::RunConfig;

void echo_option(RunConfig& rc, const CLI::App& app) {
    for (const CLI::Option* opt : app.get_options()) {
        if (opt->get_name().size() < 3 || opt->get_name().substr(0, 2) != "--") continue;
        if (!opt->get_configurable()) continue;
        const std::string key = opt->get_name().substr(2);
        if (opt->count() > 0 || !opt->get_default_str().empty()) {
            std::string value = opt->count() > 0 ? opt->results().front() : opt->get_default_str();
            rc.echo[key] = value;
        }
    }
}

void add_plan_options(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--mode", rc.mode, "retrieval mode: retrieve|disabled|random")
        ->default_str("retrieve");
    cmd->add_option("--k", rc.k, "images retrieved per position")->default_str("4");
    cmd->add_option("--nprobe", rc.nprobe, "clusters scanned per query")->default_str("32");
    cmd->add_option("--stride", rc.stride, "augment every stride-th position")->default_str("1");
    cmd->add_option("--chunk-cap", rc.chunk_cap, "max context-chunk length")->default_str("75");
}

void add_model_options(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--layers", rc.layers, "decoder layers")->default_str("2");
    cmd->add_option("--heads", rc.heads, "attention heads")->default_str("4");
    cmd->add_option("--dim", rc.dim, "model width E (= encoder dim)")->default_str("64");
    cmd->add_option("--max-seq", rc.max_seq, "max sequence length")->default_str("64");
    cmd->add_option("--proj-mode", rc.proj_mode,
                    "image projections: shared-weights-image-bias|image-specific|shared-all")
        ->default_str("shared-weights-image-bias");
    cmd->add_option("--ln-img-eps", rc.ln_img_eps, "image layer-norm epsilon")
        ->default_str("0.00001");
    cmd->add_option("--precision", rc.precision, "model scalar type: f32|f64")->default_str("f64");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"visually-augmented language modeling at desk scale"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file (flags override file values)");

    RunConfig rc;

    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic grounded corpus");
    gen->add_option("--out-dir", rc.out_path, "output directory")->required();
    gen->add_option("--objects", rc.corpus_spec.n_objects, "object count")->default_str("100");
    gen->add_option("--attributes", rc.corpus_spec.n_attributes, "attribute count")
        ->default_str("8");
    gen->add_option("--sentences", rc.corpus_spec.n_sentences, "training sentences")
        ->default_str("10000");
    gen->add_option("--variants", rc.corpus_spec.n_variants, "KB records per (object, attribute)")
        ->default_str("4");
    gen->add_option("--split", rc.corpus_spec.test_fraction, "held-out object fraction")
        ->default_str("0.5");
    gen->add_option("--dim", rc.corpus_spec.dim, "embedding dimension")->default_str("64");
    gen->add_option("--seed", rc.corpus_spec.seed, "corpus seed")->default_str("1");

    auto* bi = app.add_subcommand("build-index", "encode the image KB and build the IVF-PQ index");
    bi->add_option("--corpus-dir", rc.corpus_dir, "grounded corpus directory")->required();
    bi->add_option("--out", rc.out_path, "index output path")->required();
    bi->add_option("--centroids", rc.centroids, "coarse centroid count C")->default_str("256");
    bi->add_option("--subquantizers", rc.subquantizers, "PQ subquantizers M")->default_str("8");
    bi->add_option("--iters", rc.kmeans_iters, "k-means iterations")->default_str("10");
    bi->add_flag("--exact", rc.exact_codec, "store raw vectors instead of PQ codes");
    bi->add_option("--train-sample", rc.train_sample, "train on a random subsample of keys (0 = all)")
        ->default_str("0");
    bi->add_option("--seed", rc.seed, "index training seed")->default_str("1");

    auto* bc = app.add_subcommand("build-cache", "precompute retrieval for every corpus position");
    bc->add_option("--corpus-dir", rc.corpus_dir, "grounded corpus directory")->required();
    bc->add_option("--index", rc.index_path, "index path");
    bc->add_option("--out", rc.out_path, "cache output path")->required();
    bc->add_option("--seed", rc.seed, "seed (random mode draws)")->default_str("1");
    add_plan_options(bc, rc);

    auto* tr = app.add_subcommand("train", "train the fusion LM on the augmented corpus");
    tr->add_option("--corpus-dir", rc.corpus_dir, "grounded corpus directory")->required();
    tr->add_option("--index", rc.index_path, "index path (mode=retrieve)");
    tr->add_option("--cache", rc.cache_path, "retrieval cache (default: live retrieval)");
    tr->add_option("--out", rc.checkpoint_path, "checkpoint output path")->required();
    tr->add_option("--loss-csv", rc.loss_csv_path, "loss curve CSV output path");
    tr->add_option("--lr", rc.lr, "peak learning rate")->default_str("0.0005");
    tr->add_option("--warmup", rc.warmup, "linear warmup steps (clamped to --steps)")
        ->default_str("4000");
    tr->add_option("--steps", rc.steps, "optimizer steps")->default_str("100");
    tr->add_option("--batch", rc.batch, "blocks per step")->default_str("16");
    tr->add_option("--seq-len", rc.seq_len, "tokens per block")->default_str("64");
    tr->add_option("--dropout", rc.dropout, "joint attention-weight dropout")->default_str("0");
    tr->add_option("--clip-norm", rc.clip_norm, "global gradient-norm clip (0 = off)")
        ->default_str("1");
    tr->add_option("--ckpt-every", rc.ckpt_every, "periodic checkpoint cadence (0 = final only)")
        ->default_str("0");
    tr->add_option("--threads", rc.threads, "batch worker threads (deterministic reduction)")
        ->default_str("1");
    tr->add_option("--seed", rc.seed, "training seed")->default_str("1");
    add_plan_options(tr, rc);
    add_model_options(tr, rc);

    auto* ev = app.add_subcommand("eval", "zero-shot evaluation: object|piqa|lm");
    ev->add_option("--task", rc.task, "object|piqa|lm")->default_str("object");
    ev->add_option("--corpus-dir", rc.corpus_dir, "grounded corpus directory")->required();
    ev->add_option("--checkpoint", rc.checkpoint_path, "model checkpoint")->required();
    ev->add_option("--index", rc.index_path, "index path (mode=retrieve)");
    ev->add_option("--report", rc.report_path, "report JSON output path")->required();
    ev->add_option("--prompts", rc.prompts_path, "prompts JSONL (default: corpus-dir/prompts.jsonl)");
    ev->add_option("--items", rc.items_path, "items JSONL (default: corpus-dir/items.jsonl)");
    ev->add_option("--piqa", rc.piqa_path, "PIQA items JSONL (task=piqa)");
    ev->add_option("--text", rc.text_path, "text file to score (task=lm)");
    ev->add_option("--seed", rc.seed, "seed (random mode draws)")->default_str("1");
    add_plan_options(ev, rc);
    ev->add_option("--precision", rc.precision, "model scalar type: f32|f64")->default_str("f64");

    auto* be = app.add_subcommand("bench", "retrieval overhead benchmark (no pass/fail threshold)");
    be->add_option("--corpus-dir", rc.corpus_dir, "grounded corpus directory")->required();
    be->add_option("--checkpoint", rc.checkpoint_path, "model checkpoint")->required();
    be->add_option("--index", rc.index_path, "index path")->required();
    be->add_option("--report", rc.report_path, "report JSON output path")->required();
    be->add_option("--windows", rc.bench_windows, "max windows to time")->default_str("8");
    be->add_option("--seed", rc.seed, "seed")->default_str("1");
    add_plan_options(be, rc);
    be->add_option("--precision", rc.precision, "model scalar type: f32|f64")->default_str("f64");

    CLI11_PARSE(app, argc, argv);

    try {
        CLI::App* sub = app.get_subcommands().front();
        rc.subcommand = sub->get_name();
        echo_option(rc, *sub);
        if (sub == gen) return valm::cmd_gen_corpus(rc);
        if (sub == bi) return valm::cmd_build_index(rc);
        if (sub == bc) return valm::cmd_build_cache(rc);
        if (sub == tr) return valm::cmd_train(rc);
        if (sub == ev) return valm::cmd_eval(rc);
        if (sub == be) return valm::cmd_bench(rc);
        std::fprintf(stderr, "unknown subcommand\n");
        return 2;
    } catch (const valm::ValmError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return valm::exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
