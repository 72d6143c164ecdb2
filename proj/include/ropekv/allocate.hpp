#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ropekv/attention.hpp"
#include "ropekv/chunk_select.hpp"
#include "ropekv/error.hpp"
#include "ropekv/lowrank.hpp"
#include "ropekv/random.hpp"
#include "ropekv/rational.hpp"

namespace ropekv {

enum class AllocationProxy { frobenius, perplexity };

inline AllocationProxy parse_allocation_proxy(const std::string& s) {
    if (s == "frobenius") return AllocationProxy::frobenius;
    if (s == "perplexity") return AllocationProxy::perplexity;
    throw InputError("unknown proxy '" + s + "'");
}

inline std::string to_string(AllocationProxy p) { return p == AllocationProxy::frobenius ? "frobenius" : "perplexity"; }

// One (r, d_ckv) J-LRD configuration. `decomposed == false` marks the
// uncompressed model (all chunks rotated, no factorization).
struct AllocationCandidate {
    std::size_t r = 0;
    std::size_t d_ckv = 0;
    bool decomposed = true;
    CostReport cost;
    double proxy = 0.0;
};

struct AllocationRequest {
    double target_ratio = 1.0;
    std::size_t alignment = 128;
    // Accepted |ratio - target|; 0 demands cache == round(target * 2 d_h n_h).
    double tolerance = 0.0;
};

class InfeasibleAllocation : public Error {
public:
    InfeasibleAllocation(const std::string& what, std::vector<Rational> nearest)
        : Error(ErrorKind::validation, what), nearest_(std::move(nearest)) {}
    const std::vector<Rational>& nearest() const noexcept { return nearest_; }

private:
    std::vector<Rational> nearest_;
};

namespace detail {

template <typename Fn>
void for_each_feasible(const ModelConfig& cfg, std::size_t alignment, Fn&& fn) {
    const std::size_t d = cfg.embed_dim, p = cfg.proj_dim();
    for (std::size_t r = 0; r <= cfg.chunk_count(); ++r) {
        const std::size_t elite = 2 * r * cfg.n_heads;
        const std::size_t max_rank = std::min(d, 2 * p - elite);
        for (std::size_t c = alignment; c <= max_rank; c += alignment) {
            const auto cost = cost_jlrd(cfg, r, c);
            if (cost.params_after <= cost.params_original) fn(AllocationCandidate{r, c, true, cost, 0.0});
        }
    }
}

inline AllocationCandidate identity_candidate(const ModelConfig& cfg) {
    const auto d = static_cast<std::int64_t>(cfg.embed_dim), p = static_cast<std::int64_t>(cfg.proj_dim());
    return {cfg.chunk_count(), 0, false, {2 * d * p, 2 * d * p, 2 * p, Rational(1, 1)}, 0.0};
}

} // namespace detail

// Every hardware-aligned J-LRD configuration hitting the target cache size
// without adding parameters, in (r, d_ckv) order.
inline std::vector<AllocationCandidate> enumerate_configs(const ModelConfig& cfg, const AllocationRequest& req) {
    cfg.validate();
    if (!(req.target_ratio > 0.0) || req.target_ratio > 1.0) throw InputError("target ratio must be in (0, 1]");
    if (req.alignment < 1) throw InputError("alignment must be >= 1");
    if (req.tolerance < 0.0) throw InputError("tolerance must be >= 0");
    const auto full = static_cast<std::int64_t>(2 * cfg.proj_dim());
    const std::int64_t exact = std::llround(req.target_ratio * static_cast<double>(full));
    auto accept = [&](std::int64_t cache) {
        if (req.tolerance == 0.0) return cache == exact;
        return std::abs(static_cast<double>(cache) / static_cast<double>(full) - req.target_ratio) <= req.tolerance;
    };

    std::vector<AllocationCandidate> out;
    detail::for_each_feasible(cfg, req.alignment, [&](const AllocationCandidate& c) {
        if (accept(c.cost.cache_per_token_layer)) out.push_back(c);
    });
    if (accept(full)) out.push_back(detail::identity_candidate(cfg));

    if (out.empty()) {
        std::set<Rational> ratios;
        detail::for_each_feasible(cfg, req.alignment, [&](const AllocationCandidate& c) { ratios.insert(c.cost.cache_ratio); });
        ratios.insert(Rational(1, 1));
        std::vector<Rational> nearest;
        const Rational target(exact, full);
        auto above = ratios.lower_bound(target);
        if (above != ratios.begin()) nearest.push_back(*std::prev(above));
        if (above != ratios.end()) nearest.push_back(*above);
        std::string msg = "no aligned configuration reaches cache ratio " + std::to_string(req.target_ratio) +
                          " without adding parameters; nearest achievable:";
        for (const auto& r : nearest) msg += " " + r.str() + " (" + std::to_string(r.value()) + ")";
        throw InfeasibleAllocation(msg, std::move(nearest));
    }
    return out;
}

// Held-out batch for the perplexity proxy: token ids sampled autoregressively
// from the reference model's own next-token distribution over a seeded vocabulary.
struct PerplexityBatch {
    Matrix vocab;  // V x d; embeddings double as the unembedding
    std::vector<std::vector<std::size_t>> sequences;

    Matrix embed(const std::vector<std::size_t>& ids) const {
        Matrix m(ids.size(), vocab.cols());
        for (std::size_t t = 0; t < ids.size(); ++t)
            std::copy(vocab.row(ids[t]).begin(), vocab.row(ids[t]).end(), m.row(t).begin());
        return m;
    }
};

namespace detail {

inline std::vector<double> log_softmax_logits(const Matrix& vocab, std::span<const double> hidden) {
    std::vector<double> logits(vocab.rows());
    for (std::size_t v = 0; v < vocab.rows(); ++v) logits[v] = dot(vocab.row(v), hidden);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - mx);
    const double lse = mx + std::log(sum);
    for (double& l : logits) l -= lse;
    return logits;
}

} // namespace detail

inline PerplexityBatch make_perplexity_batch(const Model& reference, std::uint64_t seed, std::size_t vocab_size = 64,
                                             std::size_t n_sequences = 4, std::size_t length = 16) {
    reference.validate();
    Rng rng(seed);
    PerplexityBatch b;
    std::vector<double> data(vocab_size * reference.cfg.embed_dim);
    for (double& x : data) x = rng.normal();
    b.vocab = Matrix(vocab_size, reference.cfg.embed_dim, std::move(data));
    const ForwardOptions opts{true, false};
    for (std::size_t s = 0; s < n_sequences; ++s) {
        std::vector<std::size_t> ids{static_cast<std::size_t>(rng.next() % vocab_size)};
        auto cache = KVCacheStore::make_full(reference.cfg);
        while (ids.size() < length) {
            const auto out = decode_step(reference, cache, b.vocab.row(ids.back()), opts);
            const auto logp = detail::log_softmax_logits(b.vocab, out.hidden);
            double u = rng.uniform(), acc = 0.0;
            std::size_t pick = vocab_size - 1;
            for (std::size_t v = 0; v < vocab_size; ++v) {
                acc += std::exp(logp[v]);
                if (u < acc) { pick = v; break; }
            }
            ids.push_back(pick);
        }
        b.sequences.push_back(std::move(ids));
    }
    return b;
}

// exp(mean next-token NLL); run maps a T x d embedding matrix to per-step outputs.
template <typename Run>
double perplexity(const PerplexityBatch& batch, Run&& run) {
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& ids : batch.sequences) {
        const auto outs = run(batch.embed(ids));
        for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
            nll -= detail::log_softmax_logits(batch.vocab, outs[t].hidden)[ids[t + 1]];
            ++count;
        }
    }
    return std::exp(nll / static_cast<double>(count));
}

struct AllocationOptions {
    AllocationProxy proxy = AllocationProxy::frobenius;
    SearchOptions search;
    std::uint64_t seed = 0;  // held-out batch for the perplexity proxy
};

// Scores candidates on a concrete model and sorts by ascending proxy, then (r, d_ckv).
inline std::vector<AllocationCandidate> rank_configs(const Model& model, const CalibrationBatch& calib,
                                                     std::vector<AllocationCandidate> candidates,
                                                     const AllocationOptions& opts) {
    model.validate();
    const auto& cfg = model.cfg;
    std::map<std::size_t, EliteSelection> selections;
    auto selection_for = [&](std::size_t r) -> const EliteSelection& {
        auto it = selections.find(r);
        if (it != selections.end()) return it->second;
        EliteSelection sel = r == 0 ? EliteSelection::uniform_sets(cfg, SelectionMethod::ropelite, ChunkSet{})
                                    : ropelite_search(model, calib, r, opts.search).selection;
        return selections.emplace(r, std::move(sel)).first->second;
    };
    auto factors_for = [&](const AllocationCandidate& c) {
        const auto& sel = selection_for(c.r);
        std::vector<LowRankFactors> f;
        double err = 0.0;
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const auto split = split_key_projection(model.layers[l].wk, sel, l, cfg.head_dim);
            f.push_back(decompose_jlrd(split, model.layers[l].wv, c.d_ckv));
            err += reconstruction_error_sq(split, model.layers[l].wv, f.back());
        }
        return std::make_pair(std::move(f), err);
    };

    if (opts.proxy == AllocationProxy::frobenius) {
        for (auto& c : candidates) c.proxy = c.decomposed ? std::sqrt(factors_for(c).second) : 0.0;
    } else {
        const auto batch = make_perplexity_batch(model, opts.seed);
        ForwardOptions fwd{true, false};
        for (auto& c : candidates) {
            if (!c.decomposed) {
                c.proxy = perplexity(batch, [&](const Matrix& x) { return forward_full(model, x, fwd); });
                continue;
            }
            const Model rebuilt = reassemble(model, factors_for(c).first);
            const auto& sel = selection_for(c.r);
            c.proxy = perplexity(batch, [&](const Matrix& x) { return forward_ropelite(rebuilt, sel, x, fwd); });
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
        if (a.proxy != b.proxy) return a.proxy < b.proxy;
        if (a.r != b.r) return a.r < b.r;
        return a.d_ckv < b.d_ckv;
    });
    return candidates;
}

inline std::vector<AllocationCandidate> allocate_configs(const Model& model, const CalibrationBatch& calib,
                                                         const AllocationRequest& req, const AllocationOptions& opts) {
    return rank_configs(model, calib, enumerate_configs(model.cfg, req), opts);
}

} // namespace ropekv
