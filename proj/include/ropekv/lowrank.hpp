#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ropekv/error.hpp"
#include "ropekv/linalg.hpp"
#include "ropekv/model.hpp"
#include "ropekv/rational.hpp"
#include "ropekv/selection.hpp"

namespace ropekv {

enum class LrdMode : std::uint8_t { jlrd = 0, slrd = 1 };

inline std::string to_string(LrdMode m) { return m == LrdMode::jlrd ? "jlrd" : "slrd"; }

inline LrdMode parse_lrd_mode(const std::string& s) {
    if (s == "jlrd") return LrdMode::jlrd;
    if (s == "slrd") return LrdMode::slrd;
    throw InputError("unknown decomposition mode '" + s + "'");
}

// Maps the columns of the split key projection back to columns of W^k.
// Columns are grouped by head in head order; within a head, chunks keep their order.
struct KeyLayout {
    std::size_t n_heads = 0;
    std::size_t head_dim = 0;
    std::size_t elite_r = 0;
    std::vector<std::size_t> elite_columns;  // 2r per head
    std::vector<std::size_t> rest_columns;   // d_h - 2r per head

    std::size_t elite_per_head() const noexcept { return 2 * elite_r; }
    std::size_t rest_per_head() const noexcept { return head_dim - 2 * elite_r; }

    friend bool operator==(const KeyLayout&, const KeyLayout&) = default;
};

struct KeySplit {
    Matrix wk_elite;  // d x 2r n_h
    Matrix wk_rest;   // d x (d_h n_h - 2r n_h)
    KeyLayout layout;
};

inline KeyLayout key_layout(std::span<const ChunkSet> heads, std::size_t head_dim) {
    if (heads.empty()) throw SelectionError("no heads in selection");
    KeyLayout lay{heads.size(), head_dim, heads[0].size(), {}, {}};
    const std::size_t chunks = head_dim / 2;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        if (heads[h].size() != lay.elite_r) throw SelectionError("inconsistent elite set sizes across heads");
        if (!heads[h].fits(chunks)) throw SelectionError("chunk index out of range");
        const auto mask = heads[h].mask(chunks);
        for (std::size_t c = 0; c < chunks; ++c) {
            auto& dst = mask[c] ? lay.elite_columns : lay.rest_columns;
            dst.push_back(h * head_dim + 2 * c);
            dst.push_back(h * head_dim + 2 * c + 1);
        }
    }
    return lay;
}

inline KeySplit split_key_projection(const Matrix& wk, std::span<const ChunkSet> heads, std::size_t head_dim) {
    KeySplit s;
    s.layout = key_layout(heads, head_dim);
    if (wk.cols() != s.layout.n_heads * head_dim) throw ShapeError("split_key_projection: W^k width mismatch");
    s.wk_elite = select_columns(wk, s.layout.elite_columns);
    s.wk_rest = select_columns(wk, s.layout.rest_columns);
    return s;
}

inline KeySplit split_key_projection(const Matrix& wk, const EliteSelection& elite, std::size_t layer,
                                     std::size_t head_dim) {
    return split_key_projection(wk, std::span<const ChunkSet>(elite.layers.at(layer)), head_dim);
}

// A (down-projection) and B (up-projection) factors for one layer.
// For J-LRD, a_key holds the shared A^kv and a_value is empty.
struct LowRankFactors {
    LrdMode mode = LrdMode::jlrd;
    KeyLayout layout;
    Matrix a_key;
    Matrix a_value;
    Matrix b_key;    // key_rank x (d_h n_h - 2r n_h)
    Matrix b_value;  // value_rank x d_h n_h

    std::size_t key_rank() const noexcept { return a_key.cols(); }
    std::size_t value_rank() const noexcept { return mode == LrdMode::jlrd ? a_key.cols() : a_value.cols(); }
    const Matrix& value_down() const noexcept { return mode == LrdMode::jlrd ? a_key : a_value; }
    // Latent reals cached per token per layer.
    std::size_t latent_width() const noexcept {
        return mode == LrdMode::jlrd ? a_key.cols() : a_key.cols() + a_value.cols();
    }
};

namespace detail {

inline LowRankPair factor_or_empty(const Matrix& m, std::size_t rank) {
    if (rank == 0) return {Matrix(m.rows(), 0), Matrix(0, m.cols())};
    return truncated_factors(m, rank);
}

} // namespace detail

inline LowRankFactors decompose_jlrd(const KeySplit& split, const Matrix& wv, std::size_t d_ckv) {
    const Matrix joint = hconcat(split.wk_rest, wv);
    const std::size_t max_rank = std::min(joint.rows(), joint.cols());
    if (d_ckv < 1 || d_ckv > max_rank)
        throw RankError("d_ckv " + std::to_string(d_ckv) + " outside [1, " + std::to_string(max_rank) + "]");
    auto f = truncated_factors(joint, d_ckv);
    LowRankFactors out;
    out.mode = LrdMode::jlrd;
    out.layout = split.layout;
    out.b_key = column_block(f.b, 0, split.wk_rest.cols());
    out.b_value = column_block(f.b, split.wk_rest.cols(), wv.cols());
    out.a_key = std::move(f.a);
    return out;
}

inline LowRankFactors decompose_slrd(const KeySplit& split, const Matrix& wv, std::size_t d_ck, std::size_t d_cv) {
    auto check = [](const char* name, std::size_t rank, const Matrix& m) {
        const std::size_t max_rank = std::min(m.rows(), m.cols());
        const bool ok = max_rank == 0 ? rank == 0 : (rank >= 1 && rank <= max_rank);
        if (!ok)
            throw RankError(std::string(name) + " " + std::to_string(rank) + " outside [1, " +
                            std::to_string(max_rank) + "]");
    };
    check("d_ck", d_ck, split.wk_rest);
    check("d_cv", d_cv, wv);
    auto fk = detail::factor_or_empty(split.wk_rest, d_ck);
    auto fv = detail::factor_or_empty(wv, d_cv);
    LowRankFactors out;
    out.mode = LrdMode::slrd;
    out.layout = split.layout;
    out.a_key = std::move(fk.a);
    out.b_key = std::move(fk.b);
    out.a_value = std::move(fv.a);
    out.b_value = std::move(fv.b);
    return out;
}

// Ŵ^k with elite columns taken verbatim and the rest from A·B^k.
inline Matrix reconstruct_key(const Matrix& wk_elite, const LowRankFactors& f) {
    const auto& lay = f.layout;
    const Matrix rest = matmul(f.a_key, f.b_key);
    Matrix wk(wk_elite.rows(), lay.n_heads * lay.head_dim);
    for (std::size_t i = 0; i < wk.rows(); ++i) {
        for (std::size_t j = 0; j < lay.elite_columns.size(); ++j) wk(i, lay.elite_columns[j]) = wk_elite(i, j);
        for (std::size_t j = 0; j < lay.rest_columns.size(); ++j) wk(i, lay.rest_columns[j]) = rest(i, j);
    }
    return wk;
}

inline Matrix reconstruct_value(const LowRankFactors& f) { return matmul(f.value_down(), f.b_value); }

// Squared Frobenius error of the factorization against the matrices it replaces.
inline double reconstruction_error_sq(const KeySplit& split, const Matrix& wv, const LowRankFactors& f) {
    const double ek = frobenius_norm(subtract(split.wk_rest, matmul(f.a_key, f.b_key)));
    const double ev = frobenius_norm(subtract(wv, reconstruct_value(f)));
    return ek * ek + ev * ev;
}

struct CostReport {
    std::int64_t params_original = 0;        // 2 d d_h n_h (W^k and W^v)
    std::int64_t params_after = 0;
    std::int64_t cache_per_token_layer = 0;  // reals
    Rational cache_ratio;                    // vs 2 d_h n_h

    friend bool operator==(const CostReport&, const CostReport&) = default;
};

namespace detail {

inline CostReport make_cost(const ModelConfig& cfg, std::int64_t params_after, std::int64_t cache) {
    const auto d = static_cast<std::int64_t>(cfg.embed_dim);
    const auto p = static_cast<std::int64_t>(cfg.proj_dim());
    return {2 * d * p, params_after, cache, Rational(cache, 2 * p)};
}

} // namespace detail

// Unsimplified per-layer parameter counts, valid for any d.
inline std::int64_t slrd_params_general(std::int64_t d, std::int64_t proj, std::int64_t r, std::int64_t n_h,
                                        std::int64_t d_ck, std::int64_t d_cv) {
    return 2 * r * n_h * d + d_ck * (d + proj - 2 * r * n_h) + d_cv * (d + proj);
}

inline std::int64_t jlrd_params_general(std::int64_t d, std::int64_t proj, std::int64_t r, std::int64_t n_h,
                                        std::int64_t d_ckv) {
    return 2 * r * n_h * d + d_ckv * (d + 2 * proj - 2 * r * n_h);
}

inline CostReport cost_slrd(const ModelConfig& cfg, std::size_t r, std::size_t d_ck, std::size_t d_cv) {
    cfg.validate();
    const auto d = static_cast<std::int64_t>(cfg.embed_dim);
    const auto n_h = static_cast<std::int64_t>(cfg.n_heads);
    const auto rr = static_cast<std::int64_t>(r), ck = static_cast<std::int64_t>(d_ck),
               cv = static_cast<std::int64_t>(d_cv);
    const std::int64_t params = (2 * ck + 2 * cv + 2 * rr * n_h) * d - 2 * ck * rr * n_h;
    return detail::make_cost(cfg, params, 2 * rr * n_h + ck + cv);
}

inline CostReport cost_jlrd(const ModelConfig& cfg, std::size_t r, std::size_t d_ckv) {
    cfg.validate();
    const auto d = static_cast<std::int64_t>(cfg.embed_dim);
    const auto n_h = static_cast<std::int64_t>(cfg.n_heads);
    const auto rr = static_cast<std::int64_t>(r), c = static_cast<std::int64_t>(d_ckv);
    const std::int64_t params = 2 * rr * n_h * d + 3 * c * d - 2 * c * rr * n_h;
    return detail::make_cost(cfg, params, 2 * rr * n_h + c);
}

struct SlrdSplit {
    std::size_t d_ck = 0;
    std::size_t d_cv = 0;
    double error_sq = 0.0;  // Σ of discarded σ² over both matrices
};

// Greedy rank split under a fixed per-token cache budget: starting from (1, 1),
// each unit of budget goes to the side whose next singular value is larger.
inline SlrdSplit allocate_slrd_split(std::span<const double> sigma_k, std::span<const double> sigma_v,
                                     std::size_t cache_budget, std::size_t r, const ModelConfig& cfg) {
    const std::size_t elite = 2 * r * cfg.n_heads;
    if (cache_budget < elite + 2)
        throw BudgetError("cache budget " + std::to_string(cache_budget) + " below minimum " +
                          std::to_string(elite + 2));
    if (sigma_k.empty() || sigma_v.empty())
        throw BudgetError("both key and value matrices need at least rank 1");
    if (cache_budget - elite > sigma_k.size() + sigma_v.size())
        throw BudgetError("cache budget exceeds the combined full ranks");
    SlrdSplit s{1, 1, 0.0};
    for (std::size_t step = elite + 2; step < cache_budget; ++step) {
        const bool k_open = s.d_ck < sigma_k.size();
        const bool v_open = s.d_cv < sigma_v.size();
        const double gain_k = k_open ? sigma_k[s.d_ck] * sigma_k[s.d_ck] : -1.0;
        const double gain_v = v_open ? sigma_v[s.d_cv] * sigma_v[s.d_cv] : -1.0;
        if (gain_k >= gain_v) ++s.d_ck;
        else ++s.d_cv;
    }
    for (std::size_t i = s.d_ck; i < sigma_k.size(); ++i) s.error_sq += sigma_k[i] * sigma_k[i];
    for (std::size_t i = s.d_cv; i < sigma_v.size(); ++i) s.error_sq += sigma_v[i] * sigma_v[i];
    return s;
}

inline SlrdSplit allocate_slrd_split(const Matrix& wk_rest, const Matrix& wv, std::size_t cache_budget,
                                     std::size_t r, const ModelConfig& cfg) {
    if (wk_rest.cols() == 0) throw BudgetError("no non-elite key columns to factorize");
    const auto sk = svd(wk_rest).sigma;
    const auto sv = svd(wv).sigma;
    return allocate_slrd_split(sk, sv, cache_budget, r, cfg);
}

} // namespace ropekv
