#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ropekv/error.hpp"
#include "ropekv/linalg.hpp"
#include "ropekv/lowrank.hpp"
#include "ropekv/model.hpp"
#include "ropekv/rational.hpp"
#include "ropekv/rope.hpp"
#include "ropekv/selection.hpp"

namespace ropekv {

struct ForwardOptions {
    // Pre-norm residual stream with parameter-free RMS normalization.
    bool residual_norm = false;
    bool record_scores = false;
};

struct DecodeOutput {
    std::vector<double> hidden;
    // [layer][head][n]: softmax row over cached positions, when recorded.
    std::vector<std::vector<std::vector<double>>> scores;
};

enum class CacheLayout { full, ropelite, compressed };

inline std::string to_string(CacheLayout l) {
    switch (l) {
    case CacheLayout::full: return "full";
    case CacheLayout::ropelite: return "ropelite";
    case CacheLayout::compressed: return "compressed";
    }
    return "?";
}

// Per-layer key/value material for already-decoded tokens.
//   full:       [RoPE'd key (d_h n_h) | value (d_h n_h)]
//   ropelite:   same widths, only elite chunks rotated
//   compressed: [rotated elite key chunks (2 r n_h) | latent (d_ckv, or d_ck + d_cv)]
class KVCacheStore {
public:
    static KVCacheStore make_full(const ModelConfig& cfg) {
        cfg.validate();
        return KVCacheStore(cfg, CacheLayout::full, 2 * cfg.proj_dim(), std::nullopt, 0);
    }

    static KVCacheStore make_ropelite(const ModelConfig& cfg, const EliteSelection& elite) {
        cfg.validate();
        elite.validate(cfg);
        return KVCacheStore(cfg, CacheLayout::ropelite, 2 * cfg.proj_dim(), elite, elite.r);
    }

    // Shape-only compressed store; latent_width is d_ckv (J-LRD) or d_ck + d_cv (S-LRD).
    static KVCacheStore make_compressed(const ModelConfig& cfg, std::size_t elite_r, std::size_t latent_width) {
        cfg.validate();
        return KVCacheStore(cfg, CacheLayout::compressed, 2 * elite_r * cfg.n_heads + latent_width, std::nullopt,
                            elite_r);
    }

    CacheLayout layout() const noexcept { return layout_; }
    const ModelConfig& config() const noexcept { return cfg_; }
    const std::optional<EliteSelection>& elite() const noexcept { return elite_; }
    std::size_t elite_r() const noexcept { return elite_r_; }
    // Reals per token per layer.
    std::size_t width() const noexcept { return width_; }
    std::size_t n_layers() const noexcept { return rows_.size(); }
    std::size_t tokens() const noexcept { return rows_.empty() ? 0 : rows_[0].size() / std::max<std::size_t>(width_, 1); }
    std::size_t tokens(std::size_t layer) const { return width_ ? rows_.at(layer).size() / width_ : 0; }

    std::span<const double> row(std::size_t layer, std::size_t token) const {
        return {rows_.at(layer).data() + token * width_, width_};
    }

    void append(std::size_t layer, std::span<const double> row) {
        if (row.size() != width_)
            throw CacheError("cache row width " + std::to_string(row.size()) + " != " + std::to_string(width_));
        rows_.at(layer).insert(rows_.at(layer).end(), row.begin(), row.end());
    }

private:
    KVCacheStore(const ModelConfig& cfg, CacheLayout layout, std::size_t width, std::optional<EliteSelection> elite,
                 std::size_t elite_r)
        : cfg_(cfg), layout_(layout), width_(width), elite_(std::move(elite)), elite_r_(elite_r),
          rows_(cfg.n_layers) {}

    ModelConfig cfg_;
    CacheLayout layout_;
    std::size_t width_;
    std::optional<EliteSelection> elite_;
    std::size_t elite_r_;
    std::vector<std::vector<double>> rows_;
};

inline std::int64_t cache_bytes(const KVCacheStore& cache, std::size_t tokens,
                                std::size_t bytes_per_element = sizeof(double)) {
    return static_cast<std::int64_t>(cache.n_layers() * tokens * cache.width() * bytes_per_element);
}

// Cache size relative to the full layout of the same model.
inline Rational cache_ratio(const KVCacheStore& cache) {
    return Rational(static_cast<std::int64_t>(cache.width()), static_cast<std::int64_t>(2 * cache.config().proj_dim()));
}

namespace detail {

inline std::vector<double> rms_normalize(std::span<const double> x) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    std::vector<double> out(x.begin(), x.end());
    for (double& v : out) v *= inv;
    return out;
}

inline void softmax_inplace(std::vector<double>& s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : s) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : s) { v = std::exp(v - mx); sum += v; }
    for (double& v : s) v /= sum;
}

// Runs the layer stack for one token; step(layer, input, scores_out) returns the attention output.
template <typename Step>
DecodeOutput run_layers(std::size_t n_layers, std::span<const double> x, const ForwardOptions& opts, Step&& step) {
    DecodeOutput out;
    if (opts.record_scores) out.scores.resize(n_layers);
    std::vector<double> h(x.begin(), x.end());
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::vector<double> in = opts.residual_norm ? rms_normalize(h) : h;
        auto* scores = opts.record_scores ? &out.scores[l] : nullptr;
        std::vector<double> a = step(l, std::span<const double>(in), scores);
        if (opts.residual_norm) {
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += a[i];
        } else {
            h = std::move(a);
        }
    }
    out.hidden = opts.residual_norm ? rms_normalize(h) : std::move(h);
    return out;
}

// One layer of RoPE-family attention (full or partial rotation) against a full-width cache.
inline std::vector<double> rope_layer_step(const ModelConfig& cfg, const LayerWeights& w,
                                           std::span<const ChunkSet> head_chunks, std::span<const double> theta,
                                           KVCacheStore& cache, std::size_t layer, std::span<const double> x,
                                           std::vector<std::vector<double>>* scores) {
    const std::size_t dh = cfg.head_dim, p = cfg.proj_dim();
    const auto pos = static_cast<std::int64_t>(cache.tokens(layer));
    auto q = vecmat(x, w.wq);
    auto k = vecmat(x, w.wk);
    const auto v = vecmat(x, w.wv);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        rotate_inplace(std::span<double>(q).subspan(h * dh, dh), pos, head_chunks[h], theta);
        rotate_inplace(std::span<double>(k).subspan(h * dh, dh), pos, head_chunks[h], theta);
    }
    std::vector<double> row(2 * p);
    std::copy(k.begin(), k.end(), row.begin());
    std::copy(v.begin(), v.end(), row.begin() + static_cast<std::ptrdiff_t>(p));
    cache.append(layer, row);

    const std::size_t t = cache.tokens(layer);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> ctx(p, 0.0);
    if (scores) scores->assign(cfg.n_heads, {});
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto qh = std::span<const double>(q).subspan(h * dh, dh);
        std::vector<double> s(t);
        for (std::size_t n = 0; n < t; ++n) s[n] = dot(qh, cache.row(layer, n).subspan(h * dh, dh)) * scale;
        softmax_inplace(s);
        for (std::size_t n = 0; n < t; ++n) {
            const auto vn = cache.row(layer, n).subspan(p + h * dh, dh);
            for (std::size_t i = 0; i < dh; ++i) ctx[h * dh + i] += s[n] * vn[i];
        }
        if (scores) (*scores)[h] = std::move(s);
    }
    return vecmat(ctx, w.wo);
}

} // namespace detail

// One decode step for full or ropelite caches; the token position is the cache length.
inline DecodeOutput decode_step(const Model& model, KVCacheStore& cache, std::span<const double> x,
                                const ForwardOptions& opts = {}) {
    const auto& cfg = model.cfg;
    if (x.size() != cfg.embed_dim) throw ShapeError("token embedding length != embed_dim");
    if (cache.config() != cfg) throw CacheError("cache was built for a different model shape");
    std::vector<std::vector<ChunkSet>> chunks;
    if (cache.layout() == CacheLayout::full) {
        chunks.assign(cfg.n_layers, std::vector<ChunkSet>(cfg.n_heads, ChunkSet::all(cfg.chunk_count())));
    } else if (cache.layout() == CacheLayout::ropelite) {
        chunks = cache.elite()->layers;
    } else {
        throw CacheError("decode_step needs a full or ropelite cache; use decode_step_compressed");
    }
    const auto theta = frequencies(cfg.rope());
    return detail::run_layers(cfg.n_layers, x, opts, [&](std::size_t l, std::span<const double> in, auto* scores) {
        return detail::rope_layer_step(cfg, model.layers[l], chunks[l], theta, cache, l, in, scores);
    });
}

inline std::vector<DecodeOutput> forward_full(const Model& model, const Matrix& tokens,
                                              const ForwardOptions& opts = {}) {
    model.validate();
    auto cache = KVCacheStore::make_full(model.cfg);
    std::vector<DecodeOutput> out;
    out.reserve(tokens.rows());
    for (std::size_t t = 0; t < tokens.rows(); ++t) out.push_back(decode_step(model, cache, tokens.row(t), opts));
    return out;
}

inline std::vector<DecodeOutput> forward_ropelite(const Model& model, const EliteSelection& elite,
                                                  const Matrix& tokens, const ForwardOptions& opts = {}) {
    model.validate();
    auto cache = KVCacheStore::make_ropelite(model.cfg, elite);
    std::vector<DecodeOutput> out;
    out.reserve(tokens.rows());
    for (std::size_t t = 0; t < tokens.rows(); ++t) out.push_back(decode_step(model, cache, tokens.row(t), opts));
    return out;
}

// Inputs seen by each layer when running the unmodified full-RoPE model: [layer] -> T x d.
inline std::vector<Matrix> layer_inputs(const Model& model, const Matrix& tokens, const ForwardOptions& opts = {}) {
    model.validate();
    const auto& cfg = model.cfg;
    std::vector<Matrix> inputs(cfg.n_layers, Matrix(tokens.rows(), cfg.embed_dim));
    auto cache = KVCacheStore::make_full(cfg);
    const std::vector<std::vector<ChunkSet>> chunks(
        cfg.n_layers, std::vector<ChunkSet>(cfg.n_heads, ChunkSet::all(cfg.chunk_count())));
    const auto theta = frequencies(cfg.rope());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        detail::run_layers(cfg.n_layers, tokens.row(t), opts, [&](std::size_t l, std::span<const double> in, auto*) {
            std::copy(in.begin(), in.end(), inputs[l].row(t).begin());
            return detail::rope_layer_step(cfg, model.layers[l], chunks[l], theta, cache, l, in, nullptr);
        });
    }
    return inputs;
}

// Per-layer weights for decoding against a compressed cache, with B^k folded
// into the query path and B^v folded into the output projection.
struct CompressedLayer {
    LowRankFactors factors;
    std::vector<Matrix> q_elite;     // per head: d x 2r
    std::vector<Matrix> k_elite;     // per head: d x 2r
    std::vector<Matrix> q_absorbed;  // per head: d x key_rank, W^q_rest,h · (B^k_h)ᵀ
    std::vector<Matrix> ov;          // per head: value_rank x d, B^v_h · W^o_h
};

struct CompressedModel {
    ModelConfig cfg;
    EliteSelection elite;
    std::vector<CompressedLayer> layers;

    std::size_t latent_width() const { return layers.empty() ? 0 : layers[0].factors.latent_width(); }
};

inline CompressedModel compress(const Model& model, const EliteSelection& elite, std::vector<LowRankFactors> factors) {
    model.validate();
    elite.validate(model.cfg);
    const auto& cfg = model.cfg;
    if (factors.size() != cfg.n_layers) throw ShapeError("need one factor set per layer");
    const std::size_t dh = cfg.head_dim, e = 2 * elite.r, rest = dh - e;
    CompressedModel cm{cfg, elite, {}};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto& f = factors[l];
        const auto expected = key_layout(elite.layers[l], dh);
        if (f.layout != expected) throw ShapeError("factor layout does not match elite selection");
        if (f.b_key.cols() != rest * cfg.n_heads || f.b_value.cols() != cfg.proj_dim() ||
            f.a_key.rows() != cfg.embed_dim || f.b_key.rows() != f.key_rank() ||
            f.b_value.rows() != f.value_rank() || f.value_down().rows() != cfg.embed_dim)
            throw ShapeError("factor matrices have inconsistent shapes");
        const auto& w = model.layers[l];
        CompressedLayer cl;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const auto ecols = std::span<const std::size_t>(f.layout.elite_columns).subspan(h * e, e);
            const auto rcols = std::span<const std::size_t>(f.layout.rest_columns).subspan(h * rest, rest);
            cl.q_elite.push_back(select_columns(w.wq, ecols));
            cl.k_elite.push_back(select_columns(w.wk, ecols));
            const Matrix bk_h = column_block(f.b_key, h * rest, rest);
            cl.q_absorbed.push_back(matmul(select_columns(w.wq, rcols), transpose(bk_h)));
            cl.ov.push_back(matmul(column_block(f.b_value, h * dh, dh), row_block(w.wo, h * dh, dh)));
        }
        cl.factors = std::move(f);
        cm.layers.push_back(std::move(cl));
    }
    return cm;
}

inline KVCacheStore make_compressed_cache(const CompressedModel& cm) {
    return KVCacheStore::make_compressed(cm.cfg, cm.elite.r, cm.latent_width());
}

// Appends [rotated elite key chunks | x·A] for every layer and attends over the
// cached latents. Cached entries are never re-rotated.
inline DecodeOutput decode_step_compressed(const CompressedModel& cm, KVCacheStore& cache, std::span<const double> x,
                                           const ForwardOptions& opts = {}) {
    const auto& cfg = cm.cfg;
    if (cache.layout() != CacheLayout::compressed) throw CacheError("decode_step_compressed needs a compressed cache");
    if (cache.config() != cfg || cache.elite_r() != cm.elite.r ||
        cache.width() != 2 * cm.elite.r * cfg.n_heads + cm.latent_width())
        throw CacheError("compressed cache does not match the compressed model");
    if (x.size() != cfg.embed_dim) throw ShapeError("token embedding length != embed_dim");
    const auto theta = frequencies(cfg.rope());
    const std::size_t e = 2 * cm.elite.r, nh = cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

    return detail::run_layers(cfg.n_layers, x, opts, [&](std::size_t l, std::span<const double> in, auto* scores) {
        const auto& cl = cm.layers[l];
        const auto& f = cl.factors;
        const auto pos = static_cast<std::int64_t>(cache.tokens(l));
        const std::size_t kr = f.key_rank();
        const std::size_t vr = f.value_rank();
        const std::size_t value_offset = f.mode == LrdMode::jlrd ? 0 : kr;

        // Elite chunks of a head are stored compactly; rotate them with their original frequencies.
        auto rotate_elite = [&](std::vector<double>& v, std::size_t h) {
            const auto idx = cm.elite.layers[l][h].indices();
            for (std::size_t c = 0; c < idx.size(); ++c) {
                const double angle = static_cast<double>(pos) * theta[idx[c]];
                const double cs = std::cos(angle), sn = std::sin(angle);
                const double a = v[2 * c], b = v[2 * c + 1];
                v[2 * c] = a * cs - b * sn;
                v[2 * c + 1] = a * sn + b * cs;
            }
        };

        std::vector<double> row(cache.width());
        for (std::size_t h = 0; h < nh; ++h) {
            auto kh = vecmat(in, cl.k_elite[h]);
            rotate_elite(kh, h);
            std::copy(kh.begin(), kh.end(), row.begin() + static_cast<std::ptrdiff_t>(h * e));
        }
        const auto latent_k = vecmat(in, f.a_key);
        std::copy(latent_k.begin(), latent_k.end(), row.begin() + static_cast<std::ptrdiff_t>(e * nh));
        if (f.mode == LrdMode::slrd) {
            const auto latent_v = vecmat(in, f.a_value);
            std::copy(latent_v.begin(), latent_v.end(), row.begin() + static_cast<std::ptrdiff_t>(e * nh + kr));
        }
        cache.append(l, row);

        const std::size_t t = cache.tokens(l);
        std::vector<double> out(cfg.embed_dim, 0.0);
        if (scores) scores->assign(nh, {});
        for (std::size_t h = 0; h < nh; ++h) {
            auto qe = vecmat(in, cl.q_elite[h]);
            rotate_elite(qe, h);
            const auto qa = vecmat(in, cl.q_absorbed[h]);
            std::vector<double> s(t);
            for (std::size_t n = 0; n < t; ++n) {
                const auto cached = cache.row(l, n);
                s[n] = (dot(qe, cached.subspan(h * e, e)) + dot(qa, cached.subspan(e * nh, kr))) * scale;
            }
            detail::softmax_inplace(s);
            std::vector<double> mixed(vr, 0.0);
            for (std::size_t n = 0; n < t; ++n) {
                const auto lat = cache.row(l, n).subspan(e * nh + value_offset, vr);
                for (std::size_t i = 0; i < vr; ++i) mixed[i] += s[n] * lat[i];
            }
            const auto contrib = vecmat(mixed, cl.ov[h]);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += contrib[i];
            if (scores) (*scores)[h] = std::move(s);
        }
        return out;
    });
}

inline std::vector<DecodeOutput> forward_compressed(const CompressedModel& cm, const Matrix& tokens,
                                                    const ForwardOptions& opts = {}) {
    auto cache = make_compressed_cache(cm);
    std::vector<DecodeOutput> out;
    out.reserve(tokens.rows());
    for (std::size_t t = 0; t < tokens.rows(); ++t)
        out.push_back(decode_step_compressed(cm, cache, tokens.row(t), opts));
    return out;
}

// Model whose W^k, W^v are rebuilt from the factors (elite key columns kept exact).
inline Model reassemble(const Model& model, const std::vector<LowRankFactors>& factors) {
    Model out = model;
    for (std::size_t l = 0; l < model.cfg.n_layers; ++l) {
        const auto& f = factors.at(l);
        const Matrix wk_elite = select_columns(model.layers[l].wk, f.layout.elite_columns);
        out.layers[l].wk = reconstruct_key(wk_elite, f);
        out.layers[l].wv = reconstruct_value(f);
    }
    return out;
}

inline Matrix stack_hidden(const std::vector<DecodeOutput>& outs) {
    if (outs.empty()) return {};
    Matrix m(outs.size(), outs[0].hidden.size());
    for (std::size_t t = 0; t < outs.size(); ++t) std::copy(outs[t].hidden.begin(), outs[t].hidden.end(), m.row(t).begin());
    return m;
}

} // namespace ropekv
