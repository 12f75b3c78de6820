#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "valm/common.hpp"
#include "valm/io.hpp"

namespace valm {

// Which projection parameters image slots use. SharedWeightsImageBias reuses
// the contextual W^K/W^V with image-specific biases (the reference choice);
// ImageSpecificWeightsAndBias adds W_img^K/W_img^V; SharedAll reuses both the
// contextual weights and biases.
enum class ProjMode : u8 {
    SharedWeightsImageBias = 0,
    ImageSpecificWeightsAndBias = 1,
    SharedAll = 2,
};

inline const char* proj_mode_name(ProjMode m) {
    switch (m) {
        case ProjMode::SharedWeightsImageBias: return "shared-weights-image-bias";
        case ProjMode::ImageSpecificWeightsAndBias: return "image-specific";
        case ProjMode::SharedAll: return "shared-all";
    }
    return "?";
}

inline ProjMode proj_mode_from_name(const std::string& s) {
    for (ProjMode m : {ProjMode::SharedWeightsImageBias, ProjMode::ImageSpecificWeightsAndBias,
                       ProjMode::SharedAll})
        if (s == proj_mode_name(m)) return m;
    raise(ErrorCode::ConfigError, "unknown proj mode '" + s + "'");
}

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64; // E
    int vocab = 256;  // V
    int max_seq = 128;
    int fusion_layer = -1; // zero-based; -1 resolves to n_layers - 2 (second-to-last)
    int num_images = 4;    // K
    ProjMode proj_mode = ProjMode::SharedWeightsImageBias;
    double ln_img_eps = 1e-5;
    double dropout = 0.0;

    int head_dim() const { return d_model / n_heads; }
    int ff_dim() const { return 4 * d_model; }
    int fusion_index() const {
        return fusion_layer >= 0 ? fusion_layer : std::max(0, n_layers - 2);
    }

    void validate() const {
        require(n_layers >= 1 && n_heads >= 1 && d_model >= 1 && vocab >= 2 && max_seq >= 2,
                ErrorCode::ConfigError, "degenerate model config");
        require(d_model % n_heads == 0, ErrorCode::ConfigError, "E must be divisible by n_heads");
        require(fusion_index() >= 0 && fusion_index() < n_layers, ErrorCode::ConfigError,
                "fusion layer index out of range");
        require(num_images >= 0, ErrorCode::ConfigError, "K must be >= 0");
        require(ln_img_eps > 0.0, ErrorCode::ConfigError, "LN_img eps must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter store: named tensors carved out of one flat buffer, in a fixed
// registry order. The checkpoint file serializes tensors in exactly this
// order (shape-prefixed, little-endian f32):
//
//   tok_emb [V,E], pos_emb [max_seq,E],
//   per layer l: ln1_g ln1_b [E], wq [E,E] bq [E], wk bk, wv bv, wo bo,
//                ln2_g ln2_b [E], ff_w1 [4E,E] ff_b1 [4E], ff_w2 [E,4E] ff_b2 [E],
//                and at the fusion layer: img_ln_g img_ln_b [E],
//                img_bk img_bv [E]        (absent in shared-all mode),
//                img_wk img_wv [E,E]      (image-specific mode only),
//   lnf_g lnf_b [E], head_w [V,E], head_b [V].
//
// Weight matrices are stored row-major [out, in]: y[o] = sum_k W[o,k] x[k].
// ---------------------------------------------------------------------------

struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

template <class T>
struct ParamStore {
    std::vector<TensorInfo> tensors;
    std::vector<T> data;

    std::size_t add(std::string name, std::vector<int> shape) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        tensors.push_back({std::move(name), std::move(shape), total_, n});
        total_ += n;
        return tensors.size() - 1;
    }
    void allocate() { data.assign(total_, T(0)); }
    std::size_t total_size() const { return total_; }

    std::span<T> view(std::size_t idx) {
        return {data.data() + tensors[idx].offset, tensors[idx].size};
    }
    std::span<const T> view(std::size_t idx) const {
        return {data.data() + tensors[idx].offset, tensors[idx].size};
    }

private:
    std::size_t total_ = 0;
};

struct LayerHandles {
    std::size_t ln1_g, ln1_b;
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_g, ln2_b;
    std::size_t ff_w1, ff_b1, ff_w2, ff_b2;
    // fusion-only extras; set when this layer hosts visual knowledge fusion
    bool is_fusion = false;
    std::size_t img_ln_g = 0, img_ln_b = 0;
    std::size_t img_bk = 0, img_bv = 0; // unless shared-all
    std::size_t img_wk = 0, img_wv = 0; // image-specific mode only
};

template <class T>
struct Model {
    ModelConfig cfg;
    ParamStore<T> params;
    std::size_t tok_emb = 0, pos_emb = 0;
    std::vector<LayerHandles> layers;
    std::size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;

    static Model build(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        const int E = cfg.d_model;
        auto& p = m.params;
        m.tok_emb = p.add("tok_emb", {cfg.vocab, E});
        m.pos_emb = p.add("pos_emb", {cfg.max_seq, E});
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string pfx = "layer" + std::to_string(l) + ".";
            LayerHandles h{};
            h.ln1_g = p.add(pfx + "ln1_g", {E});
            h.ln1_b = p.add(pfx + "ln1_b", {E});
            h.wq = p.add(pfx + "wq", {E, E});
            h.bq = p.add(pfx + "bq", {E});
            h.wk = p.add(pfx + "wk", {E, E});
            h.bk = p.add(pfx + "bk", {E});
            h.wv = p.add(pfx + "wv", {E, E});
            h.bv = p.add(pfx + "bv", {E});
            h.wo = p.add(pfx + "wo", {E, E});
            h.bo = p.add(pfx + "bo", {E});
            h.ln2_g = p.add(pfx + "ln2_g", {E});
            h.ln2_b = p.add(pfx + "ln2_b", {E});
            h.ff_w1 = p.add(pfx + "ff_w1", {cfg.ff_dim(), E});
            h.ff_b1 = p.add(pfx + "ff_b1", {cfg.ff_dim()});
            h.ff_w2 = p.add(pfx + "ff_w2", {E, cfg.ff_dim()});
            h.ff_b2 = p.add(pfx + "ff_b2", {E});
            if (l == cfg.fusion_index()) {
                h.is_fusion = true;
                h.img_ln_g = p.add(pfx + "img_ln_g", {E});
                h.img_ln_b = p.add(pfx + "img_ln_b", {E});
                if (cfg.proj_mode != ProjMode::SharedAll) {
                    h.img_bk = p.add(pfx + "img_bk", {E});
                    h.img_bv = p.add(pfx + "img_bv", {E});
                }
                if (cfg.proj_mode == ProjMode::ImageSpecificWeightsAndBias) {
                    h.img_wk = p.add(pfx + "img_wk", {E, E});
                    h.img_wv = p.add(pfx + "img_wv", {E, E});
                }
            }
            m.layers.push_back(h);
        }
        m.lnf_g = p.add("lnf_g", {E});
        m.lnf_b = p.add("lnf_b", {E});
        m.head_w = p.add("head_w", {cfg.vocab, E});
        m.head_b = p.add("head_b", {cfg.vocab});
        p.allocate();
        return m;
    }

    // Scaled-normal init (std 0.02) for weight matrices and embeddings; zero
    // biases; unit LN scales. Image biases start at zero so step-0 behavior
    // matches the slot-less decoder.
    void init_weights(u64 seed) {
        Rng rng(seed);
        for (std::size_t t = 0; t < params.tensors.size(); ++t) {
            const auto& info = params.tensors[t];
            auto v = params.view(t);
            const bool is_matrix = info.shape.size() == 2;
            const bool is_ln_scale = info.name.ends_with("ln_g") || info.name.ends_with("ln1_g") ||
                                     info.name.ends_with("ln2_g") || info.name.ends_with("lnf_g");
            if (is_matrix) {
                for (auto& x : v) x = static_cast<T>(0.02 * rng.gaussian());
            } else if (is_ln_scale) {
                std::fill(v.begin(), v.end(), T(1));
            } else {
                std::fill(v.begin(), v.end(), T(0));
            }
        }
    }

    std::span<const T> t(std::size_t idx) const { return params.view(idx); }
    std::span<T> t(std::size_t idx) { return params.view(idx); }
};

// ---------------------------------------------------------------------------
// Retrieved image slots, aligned to token positions.
// ---------------------------------------------------------------------------

struct ImageSlot {
    u64 id = 0;
    float score = 0.0f;
    EmbeddingVector z;
};

struct RetrievedImageSet {
    std::vector<std::vector<ImageSlot>> slots;

    static RetrievedImageSet empty(std::size_t seq_len) {
        RetrievedImageSet s;
        s.slots.resize(seq_len);
        return s;
    }
    std::size_t count(std::size_t i) const { return i < slots.size() ? slots[i].size() : 0; }
    std::size_t max_count() const {
        std::size_t m = 0;
        for (const auto& s : slots) m = std::max(m, s.size());
        return m;
    }
};

// ---------------------------------------------------------------------------
// Forward / backward. All arithmetic is double regardless of the parameter
// storage type; reduction order is fixed, so results are bit-reproducible.
// ---------------------------------------------------------------------------

namespace nn {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// y[s,o] = sum_k x[s,k] W[o,k] + b[o]
template <class T>
void matmul_add(const double* x, std::size_t S, std::size_t n_in, std::span<const T> W,
                std::span<const T> b, double* y, std::size_t n_out) {
    for (std::size_t s = 0; s < S; ++s) {
        const double* xs = x + s * n_in;
        double* ys = y + s * n_out;
        for (std::size_t o = 0; o < n_out; ++o) {
            const T* w = W.data() + o * n_in;
            double acc = static_cast<double>(b[o]);
            for (std::size_t k = 0; k < n_in; ++k) acc += xs[k] * static_cast<double>(w[k]);
            ys[o] = acc;
        }
    }
}

// dX[s,k] += sum_o dY[s,o] W[o,k];  dW[o,k] += sum_s dY[s,o] X[s,k];  db[o] += sum_s dY[s,o]
template <class T>
void matmul_backward(const double* x, std::size_t S, std::size_t n_in, std::span<const T> W,
                     const double* dy, std::size_t n_out, double* dx, double* dW, double* db) {
    for (std::size_t s = 0; s < S; ++s) {
        const double* dys = dy + s * n_out;
        const double* xs = x + s * n_in;
        double* dxs = dx ? dx + s * n_in : nullptr;
        for (std::size_t o = 0; o < n_out; ++o) {
            const double g = dys[o];
            if (g == 0.0) continue;
            const T* w = W.data() + o * n_in;
            double* dw = dW + o * n_in;
            if (dxs)
                for (std::size_t k = 0; k < n_in; ++k) dxs[k] += g * static_cast<double>(w[k]);
            for (std::size_t k = 0; k < n_in; ++k) dw[k] += g * xs[k];
            db[o] += g;
        }
    }
}

template <class T>
void layernorm_row(const double* x, std::size_t n, std::span<const T> g, std::span<const T> b,
                   double eps, double* y, double& mean_out, double& rstd_out) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i)
        y[i] = (x[i] - mean) * rstd * static_cast<double>(g[i]) + static_cast<double>(b[i]);
    mean_out = mean;
    rstd_out = rstd;
}

template <class T>
void layernorm_row_backward(const double* x, std::size_t n, std::span<const T> g, double mean,
                            double rstd, const double* dy, double* dx, double* dg, double* db) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double xhat = (x[i] - mean) * rstd;
        const double dxhat = dy[i] * static_cast<double>(g[i]);
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
        dg[i] += dy[i] * xhat;
        db[i] += dy[i];
    }
    mean_dxhat /= static_cast<double>(n);
    mean_dxhat_xhat /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double xhat = (x[i] - mean) * rstd;
        const double dxhat = dy[i] * static_cast<double>(g[i]);
        dx[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
}

// in-place softmax over one logit buffer
inline void softmax_inplace(double* e, std::size_t n) {
    double m = e[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, e[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        e[i] = std::exp(e[i] - m);
        sum += e[i];
    }
    for (std::size_t i = 0; i < n; ++i) e[i] /= sum;
}

} // namespace nn

struct DropoutCtx {
    double p = 0.0;
    Rng* rng = nullptr; // owned by the caller; consumed sequentially
    bool active() const { return p > 0.0 && rng != nullptr; }
};

struct LayerActs {
    std::vector<double> x_in;                       // S x E
    std::vector<double> ln1, q, k, v;               // S x E
    std::vector<double> ln1_mean, ln1_rstd;         // S
    // image side, rows flattened in (position, slot) order
    std::vector<std::size_t> slot_offset;           // S+1 prefix sums
    std::vector<double> z_ln, kimg, vimg;           // rows x E
    std::vector<double> z_mean, z_rstd;             // rows
    std::vector<double> att_text;                   // H x S x S (row i: cols 0..i)
    std::vector<double> att_img;                    // H x S x Kmax
    std::vector<u8> drop_text, drop_img;            // dropout keep masks (when active)
    std::size_t kmax = 0;
    std::vector<double> att_mix, att_proj, x_mid;   // S x E
    std::vector<double> ln2;                        // S x E
    std::vector<double> ln2_mean, ln2_rstd;         // S
    std::vector<double> ff_pre, ff_act;             // S x 4E
    std::vector<double> x_out;                      // S x E
};

struct Activations {
    std::vector<double> x0;  // S x E (embeddings)
    std::vector<LayerActs> layer;
    std::vector<double> lnf; // S x E
    std::vector<double> lnf_mean, lnf_rstd;
    std::vector<double> logits; // S x V
    std::size_t S = 0;
};

namespace detail_lm {

template <class T>
void validate_forward_inputs(const Model<T>& m, std::span<const int> tokens,
                             const RetrievedImageSet* images) {
    require(!tokens.empty(), ErrorCode::ShapeMismatch, "empty token sequence");
    require(static_cast<int>(tokens.size()) <= m.cfg.max_seq, ErrorCode::ShapeMismatch,
            "sequence longer than max_seq");
    for (int t : tokens)
        require(t >= 0 && t < m.cfg.vocab, ErrorCode::ShapeMismatch, "token id out of vocab range");
    if (images) {
        require(images->slots.size() == tokens.size(), ErrorCode::ShapeMismatch,
                "image set not aligned to positions");
        for (const auto& pos : images->slots) {
            require(pos.size() <= static_cast<std::size_t>(std::max(m.cfg.num_images, 0)),
                    ErrorCode::ShapeMismatch, "more slots than K at a position");
            for (const auto& slot : pos) {
                require(static_cast<int>(slot.z.size()) == m.cfg.d_model, ErrorCode::ShapeMismatch,
                        "image embedding dim != E");
                require(all_finite(slot.z), ErrorCode::NonFiniteInput, "non-finite image embedding");
            }
        }
    }
}

// Joint attention over causal text slots plus this query's image slots.
// With zero image rows this is exactly the plain causal attention op
// sequence, which is what makes the K=0 reduction bit-identical.
template <class T>
void attention_forward(const Model<T>& m, const LayerHandles& h, LayerActs& a, std::size_t S,
                       const RetrievedImageSet* images, DropoutCtx drop) {
    const std::size_t E = static_cast<std::size_t>(m.cfg.d_model);
    const std::size_t H = static_cast<std::size_t>(m.cfg.n_heads);
    const std::size_t d = E / H;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const bool fused = h.is_fusion && images != nullptr;

    a.slot_offset.assign(S + 1, 0);
    if (fused) {
        for (std::size_t i = 0; i < S; ++i)
            a.slot_offset[i + 1] = a.slot_offset[i] + images->count(i);
        const std::size_t rows = a.slot_offset[S];
        a.kmax = images->max_count();
        a.z_ln.assign(rows * E, 0.0);
        a.kimg.assign(rows * E, 0.0);
        a.vimg.assign(rows * E, 0.0);
        a.z_mean.assign(rows, 0.0);
        a.z_rstd.assign(rows, 0.0);

        // LN_img then key/value projection with mode-dependent weights/biases
        std::vector<double> zrow(E);
        for (std::size_t i = 0; i < S; ++i) {
            const auto& pos_slots = images->slots[i];
            for (std::size_t s = 0; s < pos_slots.size(); ++s) {
                const std::size_t row = a.slot_offset[i] + s;
                for (std::size_t e = 0; e < E; ++e) zrow[e] = static_cast<double>(pos_slots[s].z[e]);
                nn::layernorm_row(zrow.data(), E, m.t(h.img_ln_g), m.t(h.img_ln_b),
                                  m.cfg.ln_img_eps, a.z_ln.data() + row * E, a.z_mean[row],
                                  a.z_rstd[row]);
            }
        }
        const std::size_t rows_total = rows;
        const bool img_w = m.cfg.proj_mode == ProjMode::ImageSpecificWeightsAndBias;
        const bool img_b = m.cfg.proj_mode != ProjMode::SharedAll;
        nn::matmul_add(a.z_ln.data(), rows_total, E, m.t(img_w ? h.img_wk : h.wk),
                       m.t(img_b ? h.img_bk : h.bk), a.kimg.data(), E);
        nn::matmul_add(a.z_ln.data(), rows_total, E, m.t(img_w ? h.img_wv : h.wv),
                       m.t(img_b ? h.img_bv : h.bv), a.vimg.data(), E);
    } else {
        a.kmax = 0;
    }

    a.att_text.assign(H * S * S, 0.0);
    a.att_img.assign(fused && a.kmax > 0 ? H * S * a.kmax : 0, 0.0);
    const bool dropping = drop.active();
    if (dropping) {
        a.drop_text.assign(H * S * S, 1);
        a.drop_img.assign(a.att_img.size(), 1);
    }
    a.att_mix.assign(S * E, 0.0);

    std::vector<double> ebuf;
    for (std::size_t hh = 0; hh < H; ++hh) {
        const std::size_t off = hh * d;
        for (std::size_t i = 0; i < S; ++i) {
            const double* qi = a.q.data() + i * E + off;
            const std::size_t ki = fused ? images->count(i) : 0;
            ebuf.resize(i + 1 + ki);
            for (std::size_t j = 0; j <= i; ++j) {
                const double* kj = a.k.data() + j * E + off;
                double s = 0.0;
                for (std::size_t e = 0; e < d; ++e) s += qi[e] * kj[e];
                ebuf[j] = s * inv_sqrt_d;
            }
            for (std::size_t s2 = 0; s2 < ki; ++s2) {
                const double* kk = a.kimg.data() + (a.slot_offset[i] + s2) * E + off;
                double s = 0.0;
                for (std::size_t e = 0; e < d; ++e) s += qi[e] * kk[e];
                ebuf[i + 1 + s2] = s * inv_sqrt_d;
            }
            nn::softmax_inplace(ebuf.data(), ebuf.size());

            double* at = a.att_text.data() + (hh * S + i) * S;
            for (std::size_t j = 0; j <= i; ++j) at[j] = ebuf[j];
            double* ai = a.kmax ? a.att_img.data() + (hh * S + i) * a.kmax : nullptr;
            for (std::size_t s2 = 0; s2 < ki; ++s2) ai[s2] = ebuf[i + 1 + s2];

            // attention dropout over the joint distribution (one mask across
            // text and image slots)
            const double keep_scale = dropping ? 1.0 / (1.0 - drop.p) : 1.0;
            if (dropping) {
                u8* mt = a.drop_text.data() + (hh * S + i) * S;
                for (std::size_t j = 0; j <= i; ++j) mt[j] = drop.rng->uniform() >= drop.p ? 1 : 0;
                u8* mi = a.kmax ? a.drop_img.data() + (hh * S + i) * a.kmax : nullptr;
                for (std::size_t s2 = 0; s2 < ki; ++s2)
                    mi[s2] = drop.rng->uniform() >= drop.p ? 1 : 0;
                for (std::size_t j = 0; j <= i; ++j) ebuf[j] *= mt[j] * keep_scale;
                for (std::size_t s2 = 0; s2 < ki; ++s2) ebuf[i + 1 + s2] *= mi[s2] * keep_scale;
            }

            double* out = a.att_mix.data() + i * E + off;
            for (std::size_t e = 0; e < d; ++e) {
                double acc = 0.0;
                for (std::size_t j = 0; j <= i; ++j) acc += ebuf[j] * a.v[j * E + off + e];
                for (std::size_t s2 = 0; s2 < ki; ++s2)
                    acc += ebuf[i + 1 + s2] * a.vimg[(a.slot_offset[i] + s2) * E + off + e];
                out[e] = acc;
            }
        }
    }
}

template <class T>
void layer_forward(const Model<T>& m, const LayerHandles& h, LayerActs& a, std::size_t S,
                   const RetrievedImageSet* images, DropoutCtx drop) {
    const std::size_t E = static_cast<std::size_t>(m.cfg.d_model);
    const std::size_t F = static_cast<std::size_t>(m.cfg.ff_dim());

    a.ln1.assign(S * E, 0.0);
    a.ln1_mean.assign(S, 0.0);
    a.ln1_rstd.assign(S, 0.0);
    for (std::size_t i = 0; i < S; ++i)
        nn::layernorm_row(a.x_in.data() + i * E, E, m.t(h.ln1_g), m.t(h.ln1_b), 1e-5,
                          a.ln1.data() + i * E, a.ln1_mean[i], a.ln1_rstd[i]);

    a.q.assign(S * E, 0.0);
    a.k.assign(S * E, 0.0);
    a.v.assign(S * E, 0.0);
    nn::matmul_add(a.ln1.data(), S, E, m.t(h.wq), m.t(h.bq), a.q.data(), E);
    nn::matmul_add(a.ln1.data(), S, E, m.t(h.wk), m.t(h.bk), a.k.data(), E);
    nn::matmul_add(a.ln1.data(), S, E, m.t(h.wv), m.t(h.bv), a.v.data(), E);

    attention_forward(m, h, a, S, images, drop);

    a.att_proj.assign(S * E, 0.0);
    nn::matmul_add(a.att_mix.data(), S, E, m.t(h.wo), m.t(h.bo), a.att_proj.data(), E);
    a.x_mid.resize(S * E);
    for (std::size_t i = 0; i < S * E; ++i) a.x_mid[i] = a.x_in[i] + a.att_proj[i];

    a.ln2.assign(S * E, 0.0);
    a.ln2_mean.assign(S, 0.0);
    a.ln2_rstd.assign(S, 0.0);
    for (std::size_t i = 0; i < S; ++i)
        nn::layernorm_row(a.x_mid.data() + i * E, E, m.t(h.ln2_g), m.t(h.ln2_b), 1e-5,
                          a.ln2.data() + i * E, a.ln2_mean[i], a.ln2_rstd[i]);

    a.ff_pre.assign(S * F, 0.0);
    nn::matmul_add(a.ln2.data(), S, E, m.t(h.ff_w1), m.t(h.ff_b1), a.ff_pre.data(), F);
    a.ff_act.resize(S * F);
    for (std::size_t i = 0; i < S * F; ++i) a.ff_act[i] = nn::gelu(a.ff_pre[i]);

    a.x_out.assign(S * E, 0.0);
    nn::matmul_add(a.ff_act.data(), S, F, m.t(h.ff_w2), m.t(h.ff_b2), a.x_out.data(), E);
    for (std::size_t i = 0; i < S * E; ++i) a.x_out[i] += a.x_mid[i];
}

// Full forward. images == nullptr runs every layer as a plain causal decoder
// layer (no image machinery at all).
template <class T>
void forward_acts(const Model<T>& m, std::span<const int> tokens, const RetrievedImageSet* images,
                  Activations& acts, DropoutCtx drop = {}) {
    validate_forward_inputs(m, tokens, images);
    const std::size_t S = tokens.size();
    const std::size_t E = static_cast<std::size_t>(m.cfg.d_model);
    const std::size_t V = static_cast<std::size_t>(m.cfg.vocab);
    acts.S = S;

    acts.x0.assign(S * E, 0.0);
    const auto tok = m.t(m.tok_emb);
    const auto pos = m.t(m.pos_emb);
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t e = 0; e < E; ++e)
            acts.x0[i * E + e] = static_cast<double>(tok[static_cast<std::size_t>(tokens[i]) * E + e]) +
                                 static_cast<double>(pos[i * E + e]);

    acts.layer.resize(static_cast<std::size_t>(m.cfg.n_layers));
    const double* x = acts.x0.data();
    for (int l = 0; l < m.cfg.n_layers; ++l) {
        LayerActs& a = acts.layer[static_cast<std::size_t>(l)];
        a.x_in.assign(x, x + S * E);
        layer_forward(m, m.layers[static_cast<std::size_t>(l)], a, S, images, drop);
        x = a.x_out.data();
    }

    acts.lnf.assign(S * E, 0.0);
    acts.lnf_mean.assign(S, 0.0);
    acts.lnf_rstd.assign(S, 0.0);
    for (std::size_t i = 0; i < S; ++i)
        nn::layernorm_row(x + i * E, E, m.t(m.lnf_g), m.t(m.lnf_b), 1e-5, acts.lnf.data() + i * E,
                          acts.lnf_mean[i], acts.lnf_rstd[i]);

    acts.logits.assign(S * V, 0.0);
    nn::matmul_add(acts.lnf.data(), S, E, m.t(m.head_w), m.t(m.head_b), acts.logits.data(), V);
}

} // namespace detail_lm

// ---------------------------------------------------------------------------
// Public forward surfaces
// ---------------------------------------------------------------------------

struct AttnWeights {
    // per layer: text [H, S, S] (row i: cols 0..i) and image [H, S, Kmax]
    std::vector<std::vector<double>> text;
    std::vector<std::vector<double>> img;
    std::vector<std::size_t> kmax;
};

struct ForwardResult {
    std::vector<double> logits; // S x V
    std::size_t seq = 0;
    // optional traces
    std::vector<std::vector<double>> hidden; // H^0..H^L, each S x E
    AttnWeights attn;
};

struct ForwardOptions {
    bool want_hidden = false;
    bool want_attn = false;
};

template <class T>
ForwardResult forward(const Model<T>& m, std::span<const int> tokens,
                      const RetrievedImageSet& images, ForwardOptions opts = {}) {
    Activations acts;
    detail_lm::forward_acts(m, tokens, &images, acts);
    ForwardResult r;
    r.logits = std::move(acts.logits);
    r.seq = acts.S;
    if (opts.want_hidden) {
        r.hidden.push_back(acts.x0);
        for (const auto& la : acts.layer) r.hidden.push_back(la.x_out);
    }
    if (opts.want_attn) {
        for (const auto& la : acts.layer) {
            r.attn.text.push_back(la.att_text);
            r.attn.img.push_back(la.att_img);
            r.attn.kmax.push_back(la.kmax);
        }
    }
    return r;
}

// Plain causal decoder over the same weights (no image machinery anywhere);
// the K=0 reduction target and the disable-retrieval reference path.
template <class T>
ForwardResult forward_plain(const Model<T>& m, std::span<const int> tokens,
                            ForwardOptions opts = {}) {
    Activations acts;
    detail_lm::forward_acts(m, tokens, nullptr, acts);
    ForwardResult r;
    r.logits = std::move(acts.logits);
    r.seq = acts.S;
    if (opts.want_hidden) {
        r.hidden.push_back(acts.x0);
        for (const auto& la : acts.layer) r.hidden.push_back(la.x_out);
    }
    if (opts.want_attn) {
        for (const auto& la : acts.layer) {
            r.attn.text.push_back(la.att_text);
            r.attn.img.push_back(la.att_img);
            r.attn.kmax.push_back(la.kmax);
        }
    }
    return r;
}

// log-softmax of the last-position logits
template <class T>
std::vector<double> next_token_logprobs(const Model<T>& m, std::span<const int> prefix,
                                        const RetrievedImageSet& images) {
    require(!prefix.empty(), ErrorCode::ShapeMismatch, "empty prefix");
    const ForwardResult r = forward(m, prefix, images);
    const std::size_t V = static_cast<std::size_t>(m.cfg.vocab);
    std::vector<double> lp(r.logits.end() - static_cast<std::ptrdiff_t>(V), r.logits.end());
    double mx = lp[0];
    for (double x : lp) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : lp) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    for (double& x : lp) x -= lse;
    return lp;
}

// Mean next-token negative log-likelihood of a sequence (positions 1..S-1).
template <class T>
double sequence_nll(const Model<T>& m, std::span<const int> tokens,
                    const RetrievedImageSet& images) {
    require(tokens.size() >= 2, ErrorCode::ShapeMismatch, "need at least two tokens");
    const ForwardResult r = forward(m, tokens, images);
    const std::size_t V = static_cast<std::size_t>(m.cfg.vocab);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const double* row = r.logits.data() + i * V;
        double mx = row[0];
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
        double sum = 0.0;
        for (std::size_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
        total += (mx + std::log(sum)) - row[static_cast<std::size_t>(tokens[i + 1])];
    }
    return total / static_cast<double>(tokens.size() - 1);
}

// ---------------------------------------------------------------------------
// Backward: exact analytic gradients of the mean next-token NLL with respect
// to every parameter. Accumulates scale * d(nll)/d(theta) into `grad` (flat,
// same layout as Model::params).
// ---------------------------------------------------------------------------

template <class T>
double loss_and_grads(const Model<T>& m, std::span<const int> tokens,
                      const RetrievedImageSet& images, std::span<double> grad,
                      double scale = 1.0, DropoutCtx drop = {}) {
    require(tokens.size() >= 2, ErrorCode::ShapeMismatch, "need at least two tokens");
    require(grad.size() == m.params.total_size(), ErrorCode::ShapeMismatch, "grad buffer size");
    const std::size_t S = tokens.size();
    const std::size_t E = static_cast<std::size_t>(m.cfg.d_model);
    const std::size_t H = static_cast<std::size_t>(m.cfg.n_heads);
    const std::size_t d = E / H;
    const std::size_t V = static_cast<std::size_t>(m.cfg.vocab);
    const std::size_t F = static_cast<std::size_t>(m.cfg.ff_dim());
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Activations acts;
    detail_lm::forward_acts(m, tokens, &images, acts, drop);

    auto g = [&](std::size_t idx) {
        return grad.data() + m.params.tensors[idx].offset;
    };

    // loss + dlogits
    const double denom = static_cast<double>(S - 1);
    double nll = 0.0;
    std::vector<double> dlogits(S * V, 0.0);
    for (std::size_t i = 0; i + 1 < S; ++i) {
        const double* row = acts.logits.data() + i * V;
        double mx = row[0];
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
        double sum = 0.0;
        for (std::size_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
        const double lse = mx + std::log(sum);
        const std::size_t target = static_cast<std::size_t>(tokens[i + 1]);
        nll += lse - row[target];
        double* drow = dlogits.data() + i * V;
        const double w = scale / denom;
        for (std::size_t v = 0; v < V; ++v) drow[v] = w * std::exp(row[v] - lse);
        drow[target] -= w;
    }
    nll /= denom;

    // head
    std::vector<double> dlnf(S * E, 0.0);
    nn::matmul_backward(acts.lnf.data(), S, E, m.t(m.head_w), dlogits.data(), V, dlnf.data(),
                        g(m.head_w), g(m.head_b));

    // final LN
    std::vector<double> dx(S * E, 0.0);
    {
        const double* x_last =
            m.cfg.n_layers > 0 ? acts.layer.back().x_out.data() : acts.x0.data();
        for (std::size_t i = 0; i < S; ++i)
            nn::layernorm_row_backward(x_last + i * E, E, m.t(m.lnf_g), acts.lnf_mean[i],
                                       acts.lnf_rstd[i], dlnf.data() + i * E, dx.data() + i * E,
                                       g(m.lnf_g), g(m.lnf_b));
    }

    std::vector<double> dx_mid(S * E), dln2(S * E), dff_act(S * F), dff_pre(S * F), dln1(S * E),
        datt_mix(S * E), dq(S * E), dk(S * E), dv(S * E);

    for (int l = m.cfg.n_layers - 1; l >= 0; --l) {
        const LayerHandles& h = m.layers[static_cast<std::size_t>(l)];
        LayerActs& a = acts.layer[static_cast<std::size_t>(l)];
        const bool fused = h.is_fusion && a.slot_offset.size() == S + 1 && a.slot_offset[S] > 0;

        // x_out = x_mid + ff(ln2(x_mid)); dx currently holds d(x_out)
        std::fill(dff_act.begin(), dff_act.end(), 0.0);
        nn::matmul_backward(a.ff_act.data(), S, F, m.t(h.ff_w2), dx.data(), E, dff_act.data(),
                            g(h.ff_w2), g(h.ff_b2));
        for (std::size_t i = 0; i < S * F; ++i)
            dff_pre[i] = dff_act[i] * nn::gelu_grad(a.ff_pre[i]);
        std::fill(dln2.begin(), dln2.end(), 0.0);
        nn::matmul_backward(a.ln2.data(), S, E, m.t(h.ff_w1), dff_pre.data(), F, dln2.data(),
                            g(h.ff_w1), g(h.ff_b1));
        std::copy(dx.begin(), dx.end(), dx_mid.begin()); // residual branch
        for (std::size_t i = 0; i < S; ++i)
            nn::layernorm_row_backward(a.x_mid.data() + i * E, E, m.t(h.ln2_g), a.ln2_mean[i],
                                       a.ln2_rstd[i], dln2.data() + i * E, dx_mid.data() + i * E,
                                       g(h.ln2_g), g(h.ln2_b));

        // x_mid = x_in + Wo(att_mix); reuse dx as d(x_in)
        std::copy(dx_mid.begin(), dx_mid.end(), dx.begin());
        std::fill(datt_mix.begin(), datt_mix.end(), 0.0);
        nn::matmul_backward(a.att_mix.data(), S, E, m.t(h.wo), dx_mid.data(), E, datt_mix.data(),
                            g(h.wo), g(h.bo));

        // joint attention backward
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        const std::size_t rows = fused ? a.slot_offset[S] : 0;
        std::vector<double> dkimg(rows * E, 0.0), dvimg(rows * E, 0.0);
        const bool dropping = !a.drop_text.empty();
        const double keep_scale = dropping ? 1.0 / (1.0 - m.cfg.dropout) : 1.0;

        std::vector<double> da, de;
        for (std::size_t hh = 0; hh < H; ++hh) {
            const std::size_t off = hh * d;
            for (std::size_t i = 0; i < S; ++i) {
                const std::size_t ki = fused ? a.slot_offset[i + 1] - a.slot_offset[i] : 0;
                const std::size_t n = i + 1 + ki;
                da.assign(n, 0.0);
                de.assign(n, 0.0);
                const double* dout = datt_mix.data() + i * E + off;
                const double* at = a.att_text.data() + (hh * S + i) * S;
                const double* ai = a.kmax ? a.att_img.data() + (hh * S + i) * a.kmax : nullptr;
                const u8* mt = dropping ? a.drop_text.data() + (hh * S + i) * S : nullptr;
                const u8* mi = dropping && a.kmax ? a.drop_img.data() + (hh * S + i) * a.kmax : nullptr;

                // d(attention weights) and d(values) through the weighted sum
                for (std::size_t j = 0; j <= i; ++j) {
                    const double keep = dropping ? mt[j] * keep_scale : 1.0;
                    if (keep == 0.0) continue;
                    const double* vj = a.v.data() + j * E + off;
                    double acc = 0.0;
                    for (std::size_t e = 0; e < d; ++e) acc += dout[e] * vj[e];
                    da[j] = acc * keep;
                    double* dvj = dv.data() + j * E + off;
                    const double aw = at[j] * keep;
                    for (std::size_t e = 0; e < d; ++e) dvj[e] += aw * dout[e];
                }
                for (std::size_t s2 = 0; s2 < ki; ++s2) {
                    const double keep = dropping ? mi[s2] * keep_scale : 1.0;
                    if (keep == 0.0) continue;
                    const std::size_t row = a.slot_offset[i] + s2;
                    const double* vr = a.vimg.data() + row * E + off;
                    double acc = 0.0;
                    for (std::size_t e = 0; e < d; ++e) acc += dout[e] * vr[e];
                    da[i + 1 + s2] = acc * keep;
                    double* dvr = dvimg.data() + row * E + off;
                    const double aw = ai[s2] * keep;
                    for (std::size_t e = 0; e < d; ++e) dvr[e] += aw * dout[e];
                }

                // softmax backward over the joint distribution
                double inner = 0.0;
                for (std::size_t j = 0; j <= i; ++j) inner += at[j] * da[j];
                for (std::size_t s2 = 0; s2 < ki; ++s2) inner += ai[s2] * da[i + 1 + s2];
                for (std::size_t j = 0; j <= i; ++j) de[j] = at[j] * (da[j] - inner);
                for (std::size_t s2 = 0; s2 < ki; ++s2)
                    de[i + 1 + s2] = ai[s2] * (da[i + 1 + s2] - inner);

                // scores: e_ij = q_i . k_j / sqrt(d)
                double* dqi = dq.data() + i * E + off;
                const double* qi = a.q.data() + i * E + off;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double dg2 = de[j] * inv_sqrt_d;
                    if (dg2 == 0.0) continue;
                    const double* kj = a.k.data() + j * E + off;
                    double* dkj = dk.data() + j * E + off;
                    for (std::size_t e = 0; e < d; ++e) {
                        dqi[e] += dg2 * kj[e];
                        dkj[e] += dg2 * qi[e];
                    }
                }
                for (std::size_t s2 = 0; s2 < ki; ++s2) {
                    const double dg2 = de[i + 1 + s2] * inv_sqrt_d;
                    if (dg2 == 0.0) continue;
                    const std::size_t row = a.slot_offset[i] + s2;
                    const double* kr = a.kimg.data() + row * E + off;
                    double* dkr = dkimg.data() + row * E + off;
                    for (std::size_t e = 0; e < d; ++e) {
                        dqi[e] += dg2 * kr[e];
                        dkr[e] += dg2 * qi[e];
                    }
                }
            }
        }

        // image projections and LN_img
        if (fused && rows > 0) {
            const bool img_w = m.cfg.proj_mode == ProjMode::ImageSpecificWeightsAndBias;
            const bool img_b = m.cfg.proj_mode != ProjMode::SharedAll;
            std::vector<double> dz_ln(rows * E, 0.0);
            nn::matmul_backward(a.z_ln.data(), rows, E, m.t(img_w ? h.img_wk : h.wk), dkimg.data(),
                                E, dz_ln.data(), g(img_w ? h.img_wk : h.wk),
                                g(img_b ? h.img_bk : h.bk));
            nn::matmul_backward(a.z_ln.data(), rows, E, m.t(img_w ? h.img_wv : h.wv), dvimg.data(),
                                E, dz_ln.data(), g(img_w ? h.img_wv : h.wv),
                                g(img_b ? h.img_bv : h.bv));
            // z itself is a frozen input; only LN_img scale/shift get grads
            std::vector<double> zrow(E), dz_unused(E);
            const RetrievedImageSet& im = images;
            for (std::size_t i = 0; i < S; ++i) {
                for (std::size_t s2 = 0; s2 < im.count(i); ++s2) {
                    const std::size_t row = a.slot_offset[i] + s2;
                    for (std::size_t e = 0; e < E; ++e)
                        zrow[e] = static_cast<double>(im.slots[i][s2].z[e]);
                    std::fill(dz_unused.begin(), dz_unused.end(), 0.0);
                    nn::layernorm_row_backward(zrow.data(), E, m.t(h.img_ln_g), a.z_mean[row],
                                               a.z_rstd[row], dz_ln.data() + row * E,
                                               dz_unused.data(), g(h.img_ln_g), g(h.img_ln_b));
                }
            }
        }

        // q/k/v projections
        std::fill(dln1.begin(), dln1.end(), 0.0);
        nn::matmul_backward(a.ln1.data(), S, E, m.t(h.wq), dq.data(), E, dln1.data(), g(h.wq),
                            g(h.bq));
        nn::matmul_backward(a.ln1.data(), S, E, m.t(h.wk), dk.data(), E, dln1.data(), g(h.wk),
                            g(h.bk));
        nn::matmul_backward(a.ln1.data(), S, E, m.t(h.wv), dv.data(), E, dln1.data(), g(h.wv),
                            g(h.bv));
        for (std::size_t i = 0; i < S; ++i)
            nn::layernorm_row_backward(a.x_in.data() + i * E, E, m.t(h.ln1_g), a.ln1_mean[i],
                                       a.ln1_rstd[i], dln1.data() + i * E, dx.data() + i * E,
                                       g(h.ln1_g), g(h.ln1_b));
    }

    // embeddings
    double* dtok = g(m.tok_emb);
    double* dpos = g(m.pos_emb);
    for (std::size_t i = 0; i < S; ++i) {
        const double* dxi = dx.data() + i * E;
        double* dt = dtok + static_cast<std::size_t>(tokens[i]) * E;
        double* dp = dpos + i * E;
        for (std::size_t e = 0; e < E; ++e) {
            dt[e] += dxi[e];
            dp[e] += dxi[e];
        }
    }

    require(std::isfinite(nll), ErrorCode::NonFiniteLoss, "non-finite loss");
    return nll;
}

// ---------------------------------------------------------------------------
// Checkpoints: {magic "VALMCKPT", version, crc32(payload)}, payload = config
// followed by parameter tensors in registry order with shape prefixes
// (little-endian f32).
// ---------------------------------------------------------------------------

inline constexpr const char* kCkptMagic = "VALMCKPT";
inline constexpr u32 kCkptVersion = 1;

template <class T>
std::string serialize_checkpoint(const Model<T>& m) {
    ByteWriter payload;
    payload.put_u32(static_cast<u32>(m.cfg.n_layers));
    payload.put_u32(static_cast<u32>(m.cfg.n_heads));
    payload.put_u32(static_cast<u32>(m.cfg.d_model));
    payload.put_u32(static_cast<u32>(m.cfg.vocab));
    payload.put_u32(static_cast<u32>(m.cfg.max_seq));
    payload.put_u32(static_cast<u32>(m.cfg.fusion_index()));
    payload.put_u32(static_cast<u32>(m.cfg.num_images));
    payload.put_u8(static_cast<u8>(m.cfg.proj_mode));
    payload.put_f64(m.cfg.ln_img_eps);
    payload.put_f64(m.cfg.dropout);
    payload.put_u32(static_cast<u32>(m.params.tensors.size()));
    for (std::size_t t = 0; t < m.params.tensors.size(); ++t) {
        const auto& info = m.params.tensors[t];
        payload.put_u32(static_cast<u32>(info.shape.size()));
        for (int dch : info.shape) payload.put_u32(static_cast<u32>(dch));
        for (const T& x : m.params.view(t)) payload.put_f32(static_cast<float>(x));
    }

    ByteWriter w;
    w.put_magic(kCkptMagic);
    w.put_u32(kCkptVersion);
    w.put_u32(crc32(payload.bytes()));
    w.put_bytes(payload.bytes().data(), payload.size());
    return w.take();
}

template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
    write_file_atomic(path, serialize_checkpoint(m));
}

template <class T>
Model<T> deserialize_checkpoint(std::string_view bytes) {
    ByteReader r(bytes, ErrorCode::CorruptCheckpoint);
    r.expect_magic(kCkptMagic);
    const u32 version = r.get_u32();
    require(version == kCkptVersion, ErrorCode::CorruptCheckpoint, "unsupported checkpoint version");
    const u32 want_crc = r.get_u32();
    require(crc32(r.rest()) == want_crc, ErrorCode::CorruptCheckpoint, "checkpoint checksum mismatch");

    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(r.get_u32());
    cfg.n_heads = static_cast<int>(r.get_u32());
    cfg.d_model = static_cast<int>(r.get_u32());
    cfg.vocab = static_cast<int>(r.get_u32());
    cfg.max_seq = static_cast<int>(r.get_u32());
    cfg.fusion_layer = static_cast<int>(r.get_u32());
    cfg.num_images = static_cast<int>(r.get_u32());
    const u8 pm = r.get_u8();
    require(pm <= 2, ErrorCode::CorruptCheckpoint, "bad proj mode");
    cfg.proj_mode = static_cast<ProjMode>(pm);
    cfg.ln_img_eps = r.get_f64();
    cfg.dropout = r.get_f64();
    try {
        cfg.validate();
    } catch (const ValmError&) {
        raise(ErrorCode::CorruptCheckpoint, "invalid config in checkpoint");
    }

    Model<T> m = Model<T>::build(cfg);
    const u32 n_tensors = r.get_u32();
    require(n_tensors == m.params.tensors.size(), ErrorCode::CorruptCheckpoint,
            "tensor count mismatch");
    for (std::size_t t = 0; t < m.params.tensors.size(); ++t) {
        const auto& info = m.params.tensors[t];
        const u32 ndim = r.get_u32();
        require(ndim == info.shape.size(), ErrorCode::CorruptCheckpoint, "rank mismatch at " + info.name);
        for (int dch : info.shape)
            require(r.get_u32() == static_cast<u32>(dch), ErrorCode::CorruptCheckpoint,
                    "shape mismatch at " + info.name);
        for (T& x : m.params.view(t)) x = static_cast<T>(r.get_f32());
    }
    require(r.remaining() == 0, ErrorCode::CorruptCheckpoint, "trailing bytes in checkpoint");
    return m;
}

template <class T>
Model<T> load_checkpoint(const std::string& path) {
    return deserialize_checkpoint<T>(read_file(path));
}

// Load into an existing model; the file's config must match exactly
// (fusion_layer compared after resolving the L-2 default).
template <class T>
void load_checkpoint_into(Model<T>& m, const std::string& path) {
    Model<T> loaded = load_checkpoint<T>(path);
    ModelConfig a = loaded.cfg, b = m.cfg;
    a.fusion_layer = a.fusion_index();
    b.fusion_layer = b.fusion_index();
    require(a == b, ErrorCode::ConfigMismatch, "checkpoint config differs from model config");
    m.params.data = std::move(loaded.params.data);
}

} // namespace valm
