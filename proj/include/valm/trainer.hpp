#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "valm/augment.hpp"
#include "valm/common.hpp"
#include "valm/corpus.hpp"
#include "valm/fusion_lm.hpp"
#include "valm/io.hpp"

namespace valm {

struct TrainConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    int warmup_steps = 4000;
    int total_steps = 1;
    int batch_size = 128;
    int seq_len = 512;
    double dropout = 0.0; // joint attention-weight dropout
    u64 seed = 1;
    double clip_norm = 1.0; // global grad norm; 0 disables
    int checkpoint_every = 0;
    std::string checkpoint_path; // final model; periodic saves add .step<N>
    std::string loss_csv_path;
    int n_threads = 1;

    void validate() const {
        require(lr >= 0.0, ErrorCode::ConfigError, "lr must be >= 0");
        require(warmup_steps >= 0 && warmup_steps <= total_steps, ErrorCode::ConfigError,
                "warmup must be <= total steps");
        require(batch_size >= 1, ErrorCode::ConfigError, "batch size must be >= 1");
        require(seq_len >= 2, ErrorCode::ConfigError, "seq len must be >= 2");
        require(total_steps >= 0, ErrorCode::ConfigError, "step count must be >= 0");
        require(dropout >= 0.0 && dropout < 1.0, ErrorCode::ConfigError, "dropout in [0,1)");
        require(n_threads >= 1, ErrorCode::ConfigError, "thread count must be >= 1");
    }
};

// Linear warmup to lr, then inverse-sqrt decay. For s <= warmup this is
// exactly lr * s / warmup.
inline double lr_at_step(const TrainConfig& cfg, int step) {
    const double w = static_cast<double>(std::max(cfg.warmup_steps, 1));
    if (step <= cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / w;
    return cfg.lr * std::sqrt(w / static_cast<double>(step));
}

struct StepRecord {
    int step = 0;
    double lr = 0.0;
    double nll = 0.0;
};

inline std::string loss_curve_csv(std::span<const StepRecord> curve) {
    std::string out = "step,lr,nll\n";
    char buf[96];
    for (const auto& r : curve) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", r.step, r.lr, r.nll);
        out += buf;
    }
    return out;
}

// Contiguous seq_len blocks of the corpus stream in a seeded shuffled order,
// cycled across epochs (the same order every epoch). The last partial block
// is dropped.
inline std::vector<std::size_t> make_block_order(std::size_t n_tokens, int seq_len, u64 seed) {
    require(seq_len >= 1, ErrorCode::ConfigError, "seq len must be >= 1");
    const std::size_t n_blocks = n_tokens / static_cast<std::size_t>(seq_len);
    require(n_blocks >= 1, ErrorCode::EmptyCorpus,
            "corpus has fewer than seq_len tokens (" + std::to_string(n_tokens) + ")");
    std::vector<std::size_t> starts(n_blocks);
    for (std::size_t b = 0; b < n_blocks; ++b) starts[b] = b * static_cast<std::size_t>(seq_len);
    Rng rng(mix_seed(seed, "block-order"));
    rng.shuffle(starts);
    return starts;
}

template <class T>
struct AdamState {
    std::vector<double> m, v;
    i64 t = 0;

    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

    void update(Model<T>& model, std::span<const double> grad, double lr, const TrainConfig& cfg) {
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        auto& p = model.params.data;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] = static_cast<T>(static_cast<double>(p[i]) -
                                  lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
};

struct TrainResult {
    std::vector<StepRecord> curve;
};

// Left-to-right LM training over augmented blocks. Deterministic given the
// seed: block order, dropout streams and the gradient reduction order are all
// fixed (batch items may be evaluated on worker threads, but each writes its
// own buffer and buffers are summed in index order).
template <class T>
TrainResult train(Model<T>& model, const CorpusStore& corpus, const BlockAugmenter& aug,
                  const TrainConfig& cfg) {
    cfg.validate();
    require(!corpus.tokens.empty(), ErrorCode::EmptyCorpus, "empty corpus");
    require(cfg.seq_len <= model.cfg.max_seq, ErrorCode::ConfigError, "seq len > model max_seq");

    const std::vector<std::size_t> order = make_block_order(corpus.tokens.size(), cfg.seq_len, cfg.seed);
    const std::size_t n_params = model.params.total_size();
    AdamState<T> adam(n_params);
    TrainResult result;
    result.curve.reserve(static_cast<std::size_t>(cfg.total_steps));

    const int B = cfg.batch_size;
    const int n_threads = std::min(cfg.n_threads, B);
    std::vector<std::vector<double>> grads(static_cast<std::size_t>(n_threads),
                                           std::vector<double>(n_params, 0.0));
    std::vector<double> grad(n_params, 0.0);
    std::vector<double> nlls(static_cast<std::size_t>(B), 0.0);

    std::size_t cursor = 0;
    auto next_start = [&] {
        const std::size_t s = order[cursor];
        cursor = (cursor + 1) % order.size();
        return s;
    };

    for (int step = 1; step <= cfg.total_steps; ++step) {
        const double lr = lr_at_step(cfg, step);
        std::vector<std::size_t> starts(static_cast<std::size_t>(B));
        for (auto& s : starts) s = next_start();

        auto run_shard = [&](int shard) {
            auto& gbuf = grads[static_cast<std::size_t>(shard)];
            std::fill(gbuf.begin(), gbuf.end(), 0.0);
            for (int b = shard; b < B; b += n_threads) {
                const std::size_t start = starts[static_cast<std::size_t>(b)];
                const std::span<const int> tokens(corpus.tokens.data() + start,
                                                  static_cast<std::size_t>(cfg.seq_len));
                const RetrievedImageSet images =
                    aug.images_for_block(start, static_cast<std::size_t>(cfg.seq_len));
                Rng drop_rng(mix_seed(mix_seed(mix_seed(cfg.seed, "dropout"), static_cast<u64>(step)),
                                      static_cast<u64>(b)));
                DropoutCtx drop;
                if (cfg.dropout > 0.0) {
                    drop.p = cfg.dropout;
                    drop.rng = &drop_rng;
                }
                nlls[static_cast<std::size_t>(b)] = loss_and_grads(
                    model, tokens, images, std::span<double>(gbuf), 1.0 / static_cast<double>(B), drop);
            }
        };
        if (n_threads == 1) {
            run_shard(0);
        } else {
            std::vector<std::thread> workers;
            workers.reserve(static_cast<std::size_t>(n_threads));
            for (int s = 0; s < n_threads; ++s) workers.emplace_back(run_shard, s);
            for (auto& w : workers) w.join();
        }

        std::fill(grad.begin(), grad.end(), 0.0);
        for (const auto& gbuf : grads)
            for (std::size_t i = 0; i < n_params; ++i) grad[i] += gbuf[i];

        double nll = 0.0;
        for (int b = 0; b < B; ++b) nll += nlls[static_cast<std::size_t>(b)];
        nll /= static_cast<double>(B);
        if (!std::isfinite(nll))
            raise(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(step));

        if (cfg.clip_norm > 0.0) {
            double sq = 0.0;
            for (double g : grad) sq += g * g;
            const double gnorm = std::sqrt(sq);
            if (gnorm > cfg.clip_norm) {
                const double s = cfg.clip_norm / gnorm;
                for (double& g : grad) g *= s;
            }
        }

        adam.update(model, grad, lr, cfg);
        result.curve.push_back({step, lr, nll});

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
            step % cfg.checkpoint_every == 0 && step != cfg.total_steps) {
            save_checkpoint(model, cfg.checkpoint_path + ".step" + std::to_string(step));
        }
    }

    if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    if (!cfg.loss_csv_path.empty()) write_file_atomic(cfg.loss_csv_path, loss_curve_csv(result.curve));
    return result;
}

} // namespace valm
