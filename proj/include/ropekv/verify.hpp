#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ropekv/attention.hpp"
#include "ropekv/chunk_select.hpp"
#include "ropekv/io.hpp"
#include "ropekv/lowrank.hpp"
#include "ropekv/synth.hpp"

namespace ropekv {

struct PropertyResult {
    std::string suite;
    std::string property;
    double residual = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

inline ordered_json to_json(const PropertyResult& p) {
    ordered_json j;
    j["suite"] = p.suite;
    j["property"] = p.property;
    j["residual"] = p.residual;
    j["tolerance"] = p.tolerance;
    j["pass"] = p.pass;
    return j;
}

struct VerifyInputs {
    Model model;
    std::optional<std::string> factor_bytes;  // raw factor file for the accounting suite
    std::uint64_t seed = 42;
    unsigned threads = 1;
    std::size_t rope_samples = 2000;
};

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"rope-identity", "eckart-young", "greedy-oracle", "decode-equivalence",
                                                "accounting"};
    return names;
}

namespace detail {

class Recorder {
public:
    explicit Recorder(std::string suite) : suite_(std::move(suite)) {}
    // NaN residuals fail.
    void check(std::string property, double residual, double tolerance) {
        out_.push_back({suite_, std::move(property), residual, tolerance, residual <= tolerance});
    }
    void fail(std::string property) { out_.push_back({suite_, std::move(property), 1.0, 0.0, false}); }
    std::vector<PropertyResult> take() { return std::move(out_); }

private:
    std::string suite_;
    std::vector<PropertyResult> out_;
};

inline ChunkSet random_chunk_set(Rng& rng, std::size_t chunks) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < chunks; ++i)
        if (rng.next() & 1) idx.push_back(i);
    return ChunkSet(std::move(idx));
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

inline std::vector<PropertyResult> suite_rope_identity(const VerifyInputs& in) {
    Recorder rec("rope-identity");
    Rng rng(in.seed);
    const RopeParams model_rope = in.model.cfg.rope();
    for (const auto& p : {RopeParams{4}, RopeParams{8}, model_rope}) {
        const std::size_t chunks = p.chunk_count();
        double worst = 0.0, worst_shift = 0.0;
        for (std::size_t s = 0; s < in.rope_samples; ++s) {
            const auto q = random_vector(rng, p.head_dim), k = random_vector(rng, p.head_dim);
            const auto m = static_cast<std::int64_t>(rng.next() % 4096);
            const auto n = static_cast<std::int64_t>(rng.next() % 4096);
            const ChunkSet set = random_chunk_set(rng, chunks);
            const double scale = std::sqrt(dot(q, q) * dot(k, k));
            const double absolute = dot(rotate(q, m, set, p), rotate(k, n, set, p));
            const double relative = relative_score(q, k, m, n, set, p);
            worst = std::max(worst, std::abs(absolute - relative) / scale);
            const double shifted = dot(rotate(q, m + 97, set, p), rotate(k, n + 97, set, p));
            worst_shift = std::max(worst_shift, std::abs(absolute - shifted) / scale);
        }
        const std::string tag = "d_h=" + std::to_string(p.head_dim);
        rec.check("absolute-equals-relative " + tag, worst, 1e-9);
        rec.check("shift-invariance " + tag, worst_shift, 1e-9);
    }
    return rec.take();
}

inline std::vector<PropertyResult> suite_eckart_young(const VerifyInputs& in) {
    Recorder rec("eckart-young");
    for (std::size_t l = 0; l < in.model.cfg.n_layers; ++l) {
        const auto& w = in.model.layers[l];
        const std::pair<const char*, Matrix> targets[] = {{"wk", w.wk}, {"wv", w.wv}, {"wk|wv", hconcat(w.wk, w.wv)}};
        for (const auto& [name, m] : targets) {
            const auto s = svd(m);
            const std::size_t full = s.sigma.size();
            const double norm = frobenius_norm(m);
            const Matrix utu = matmul(transpose(s.u), s.u), vvt = matmul(s.vt, transpose(s.vt));
            const double ortho = std::max(max_abs_diff(utu, Matrix::identity(utu.rows())), max_abs_diff(vvt, Matrix::identity(vvt.rows())));
            const std::string tag = "layer " + std::to_string(l) + " " + name;
            rec.check("orthonormal factors " + tag, ortho, 1e-10);
            double worst = 0.0;
            for (std::size_t r : {std::size_t{1}, (full + 1) / 2, full}) {
                const auto f = truncated_factors(s, r);
                double tail = 0.0;
                for (std::size_t i = r; i < full; ++i) tail += s.sigma[i] * s.sigma[i];
                const double err = frobenius_norm(subtract(m, matmul(f.a, f.b)));
                worst = std::max(worst, std::abs(err - std::sqrt(tail)) / std::max(norm, 1e-300));
            }
            rec.check("truncation error equals tail " + tag, worst, 1e-8);
        }
    }
    return rec.take();
}

inline std::vector<PropertyResult> suite_greedy_oracle(const VerifyInputs& in) {
    Recorder rec("greedy-oracle");
    const auto& cfg = in.model.cfg;
    const auto calib = gen_calibration(in.seed, cfg.embed_dim, 2, 8);
    SearchOptions opts;
    opts.threads = in.threads;
    const std::size_t chunks = cfg.chunk_count();
    for (std::size_t r = 1; r <= std::min<std::size_t>(3, chunks); ++r) {
        const std::string tag = "r=" + std::to_string(r);
        const auto greedy = ropelite_search(in.model, calib, r, opts);
        rec.check("forward passes closed form " + tag,
                  std::abs(double(greedy.stats.forward_passes) - double(greedy_forward_passes(r, chunks))), 0.0);
        // The batched probe and the pair-by-pair route must agree on the chosen sets.
        const auto audited = selection_distance(in.model, calib, greedy.selection, opts);
        double probe_gap = 0.0;
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            for (std::size_t h = 0; h < cfg.n_heads; ++h)
                probe_gap = std::max(probe_gap, std::abs(audited[l][h] - greedy.distance[l][h]) /
                                                    std::max(1.0, std::abs(audited[l][h])));
        rec.check("probe matches pairwise " + tag, probe_gap, 1e-9);
        if (binomial(chunks, r) > exhaustive_limit) continue;
        const auto best = exhaustive_search(in.model, calib, r, opts);
        double below = 0.0, gap = 0.0;
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                const double scale = std::max(1.0, std::abs(best.distance[l][h]));
                below = std::max(below, (best.distance[l][h] - audited[l][h]) / scale);
                gap = std::max(gap, std::abs(best.distance[l][h] - audited[l][h]) / scale);
            }
        rec.check("greedy not below exhaustive " + tag, std::max(below, 0.0), 1e-9);
        if (r == 1) rec.check("greedy equals exhaustive " + tag, gap, 1e-9);
    }
    return rec.take();
}

inline std::vector<PropertyResult> suite_decode_equivalence(const VerifyInputs& in) {
    Recorder rec("decode-equivalence");
    const auto& cfg = in.model.cfg;
    Rng rng(in.seed);
    const Matrix tokens = gaussian_matrix(rng, 16, cfg.embed_dim, 1.0 / std::sqrt(double(cfg.embed_dim)));
    const ForwardOptions fwd{};
    auto delta = [](const std::vector<DecodeOutput>& a, const std::vector<DecodeOutput>& b) {
        return max_abs_diff(stack_hidden(a), stack_hidden(b));
    };
    const auto full = forward_full(in.model, tokens, fwd);
    const auto all = EliteSelection::uniform_sets(cfg, SelectionMethod::ropelite, ChunkSet::all(cfg.chunk_count()));
    rec.check("ropelite with every chunk equals full", delta(full, forward_ropelite(in.model, all, tokens, fwd)), 1e-10);

    // Full-rank joint factorization keeps the model exact, so compressed decode must match.
    const std::size_t r = std::max<std::size_t>(1, cfg.chunk_count() / 2);
    const auto elite = uniform_select(cfg, r);
    std::vector<LowRankFactors> factors;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto split = split_key_projection(in.model.layers[l].wk, elite, l, cfg.head_dim);
        const std::size_t rank = std::min(cfg.embed_dim, split.wk_rest.cols() + in.model.layers[l].wv.cols());
        factors.push_back(decompose_jlrd(split, in.model.layers[l].wv, rank));
    }
    const auto lite = forward_ropelite(in.model, elite, tokens, fwd);
    const auto cm = compress(in.model, elite, factors);
    rec.check("full-rank compressed equals ropelite", delta(lite, forward_compressed(cm, tokens, fwd)), 1e-8);

    // Truncated factors: compressed decode equals ropelite on the reassembled weights.
    std::vector<LowRankFactors> small;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto split = split_key_projection(in.model.layers[l].wk, elite, l, cfg.head_dim);
        small.push_back(decompose_jlrd(split, in.model.layers[l].wv, std::max<std::size_t>(1, cfg.embed_dim / 2)));
    }
    const auto cms = compress(in.model, elite, small);
    rec.check("truncated compressed equals reassembled ropelite",
              delta(forward_ropelite(reassemble(in.model, small), elite, tokens, fwd), forward_compressed(cms, tokens, fwd)),
              1e-8);
    return rec.take();
}

inline void check_factor_accounting(Recorder& rec, const FactorFile& f, const ModelConfig& cfg) {
    const bool shape_ok = f.cfg.n_layers == cfg.n_layers && f.cfg.n_heads == cfg.n_heads &&
                          f.cfg.head_dim == cfg.head_dim && f.cfg.embed_dim == cfg.embed_dim;
    rec.check("factor header matches model", shape_ok ? 0.0 : 1.0, 0.0);
    if (!shape_ok) return;
    const std::size_t d = cfg.embed_dim, p = cfg.proj_dim(), elite = 2 * f.r * cfg.n_heads;
    const bool joint = f.mode == LrdMode::jlrd;
    std::size_t mismatches = 0;
    for (const auto& lf : f.layers) {
        const std::size_t rk = f.rank_k, rv = joint ? f.rank_k : f.rank_v;
        mismatches += lf.a_key.rows() != d || lf.a_key.cols() != rk;
        mismatches += lf.b_key.rows() != rk || lf.b_key.cols() != p - elite;
        mismatches += lf.b_value.rows() != rv || lf.b_value.cols() != p;
        if (!joint) mismatches += lf.a_value.rows() != d || lf.a_value.cols() != rv;
        mismatches += lf.layout.elite_r != f.r;
    }
    rec.check("factor shapes match header ranks", double(mismatches), 0.0);
    if (mismatches) return;

    const CostReport cost = joint ? cost_jlrd(cfg, f.r, f.rank_k) : cost_slrd(cfg, f.r, f.rank_k, f.rank_v);
    std::int64_t stored = 0;
    for (const auto& lf : f.layers)
        stored += std::int64_t(lf.a_key.values().size() + lf.a_value.values().size() + lf.b_key.values().size() +
                               lf.b_value.values().size());
    // Per layer: the kept elite columns of W^k (d x 2 r n_h) plus every factor.
    const auto per_layer = stored / std::int64_t(std::max<std::size_t>(1, f.layers.size())) + std::int64_t(d * elite);
    rec.check("stored parameters equal cost formula", std::abs(double(per_layer - cost.params_after)), 0.0);
    const auto width = std::int64_t(elite + (joint ? f.rank_k : f.rank_k + f.rank_v));
    rec.check("cache width equals cost formula", std::abs(double(width - cost.cache_per_token_layer)), 0.0);
}

inline std::vector<PropertyResult> suite_accounting(const VerifyInputs& in) {
    Recorder rec("accounting");
    const auto& cfg = in.model.cfg;
    const auto d = std::int64_t(cfg.embed_dim), p = std::int64_t(cfg.proj_dim()), nh = std::int64_t(cfg.n_heads);
    std::size_t mismatches = 0;
    for (std::size_t r = 0; r <= cfg.chunk_count(); ++r)
        for (std::size_t c = 1; c <= cfg.embed_dim; ++c) {
            const auto rr = std::int64_t(r), cc = std::int64_t(c);
            mismatches += cost_jlrd(cfg, r, c).params_after != jlrd_params_general(d, p, rr, nh, cc);
            mismatches += cost_slrd(cfg, r, c, c).params_after != slrd_params_general(d, p, rr, nh, cc, cc);
        }
    rec.check("simplified cost equals general form", double(mismatches), 0.0);

    const auto elite = uniform_select(cfg, 1);
    const auto cm = compress(in.model, elite, [&] {
        std::vector<LowRankFactors> f;
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            f.push_back(decompose_jlrd(split_key_projection(in.model.layers[l].wk, elite, l, cfg.head_dim),
                                       in.model.layers[l].wv, 1));
        return f;
    }());
    auto cache = make_compressed_cache(cm);
    rec.check("compressed cache width equals cost formula",
              std::abs(double(cache.width()) - double(cost_jlrd(cfg, 1, 1).cache_per_token_layer)), 0.0);

    if (in.factor_bytes) {
        try {
            check_factor_accounting(rec, decode_factors(*in.factor_bytes), cfg);
        } catch (const Error&) {
            rec.fail("factor file parses");
        }
    }
    return rec.take();
}

} // namespace detail

// Runs one named suite, or every suite for "all".
inline std::vector<PropertyResult> verify(const VerifyInputs& in, std::string_view suite) {
    in.model.validate();
    if (suite == "all") {
        std::vector<PropertyResult> out;
        for (const auto& name : suite_names()) {
            auto part = verify(in, name);
            out.insert(out.end(), part.begin(), part.end());
        }
        return out;
    }
    if (suite == "rope-identity") return detail::suite_rope_identity(in);
    if (suite == "eckart-young") return detail::suite_eckart_young(in);
    if (suite == "greedy-oracle") return detail::suite_greedy_oracle(in);
    if (suite == "decode-equivalence") return detail::suite_decode_equivalence(in);
    if (suite == "accounting") return detail::suite_accounting(in);
    throw InputError("unknown suite '" + std::string(suite) + "'");
}

inline bool all_pass(const std::vector<PropertyResult>& results) {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.pass; });
}

} // namespace ropekv
