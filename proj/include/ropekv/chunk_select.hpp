#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ropekv/attention.hpp"
#include "ropekv/error.hpp"
#include "ropekv/linalg.hpp"
#include "ropekv/model.hpp"
#include "ropekv/parallel.hpp"
#include "ropekv/rope.hpp"
#include "ropekv/selection.hpp"

namespace ropekv {

// Token-embedding sequences the search scores are measured on; positions are 0..len-1.
struct CalibrationBatch {
    std::vector<Matrix> sequences;  // each T x d

    void validate(std::size_t embed_dim) const {
        bool long_enough = false;
        for (const auto& s : sequences) {
            if (s.cols() != embed_dim) throw InputError("calibration embedding width != embed_dim");
            long_enough = long_enough || s.rows() >= 2;
        }
        if (!long_enough) throw InputError("calibration batch needs a sequence of length >= 2");
    }
};

enum class ScoreMode { pre_softmax, post_softmax };

inline ScoreMode parse_score_mode(const std::string& s) {
    if (s == "pre") return ScoreMode::pre_softmax;
    if (s == "post") return ScoreMode::post_softmax;
    throw InputError("unknown score mode '" + s + "'");
}

inline std::string to_string(ScoreMode m) { return m == ScoreMode::pre_softmax ? "pre" : "post"; }

struct SearchOptions {
    ScoreMode score = ScoreMode::pre_softmax;
    unsigned threads = 1;
    ForwardOptions forward;
};

struct SearchStats {
    std::size_t forward_passes = 0;
    std::size_t candidate_evaluations = 0;  // per head
};

struct HeadTrace {
    std::vector<std::size_t> picks;   // chunk chosen at each greedy step
    std::vector<double> distances;    // L1 distance after each step
};

struct SearchResult {
    EliteSelection selection;
    SearchStats stats;
    std::vector<std::vector<double>> distance;     // [layer][head], final set
    std::vector<std::vector<HeadTrace>> trace;     // greedy only
};

// Closed-form forward-pass count of the batched greedy search.
inline std::size_t greedy_forward_passes(std::size_t r, std::size_t chunk_count) {
    return r * chunk_count - r * (r - 1) / 2 + 1;
}

namespace detail {

inline void check_r(std::size_t r, const ModelConfig& cfg) {
    if (r < 1 || r > cfg.chunk_count())
        throw RankError("r=" + std::to_string(r) + " outside [1, " + std::to_string(cfg.chunk_count()) + "]");
}

inline void check_calibration(const CalibrationBatch& calib, const ModelConfig& cfg) {
    if (calib.sequences.empty()) throw InputError("empty calibration batch");
    calib.validate(cfg.embed_dim);
}

// Causal score rows (n <= m) flattened row-major; optionally softmax-normalized per row.
inline std::vector<double> causal_scores(const Matrix& q, const Matrix& k, double scale, ScoreMode mode) {
    const std::size_t t = q.rows();
    std::vector<double> out;
    out.reserve(t * (t + 1) / 2);
    std::vector<double> row;
    for (std::size_t m = 0; m < t; ++m) {
        row.assign(m + 1, 0.0);
        for (std::size_t n = 0; n <= m; ++n) row[n] = dot(q.row(m), k.row(n)) * scale;
        if (mode == ScoreMode::post_softmax) softmax_inplace(row);
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

inline double l1_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s;
}

// Runs the unmodified full-RoPE model over the calibration batch. Each pass
// propagates activations through every layer and, for every (layer, head),
// scores the head's candidate chunk set against the full-rotation reference.
class ScoreProbe {
public:
    ScoreProbe(const Model& model, const CalibrationBatch& calib, const SearchOptions& opts)
        : model_(model), calib_(calib), opts_(opts), theta_(frequencies(model.cfg.rope())) {}

    std::size_t passes() const noexcept { return passes_; }

    void reference_pass() {
        const auto& cfg = model_.cfg;
        reference_.assign(cfg.n_layers, std::vector<std::vector<std::vector<double>>>(
                                             cfg.n_heads, std::vector<std::vector<double>>(calib_.sequences.size())));
        run(nullptr);
    }

    // candidate[l][h] is the rotated chunk set to evaluate for that head.
    std::vector<std::vector<double>> candidate_pass(const std::vector<std::vector<ChunkSet>>& candidate) {
        return run(&candidate);
    }

private:
    std::vector<std::vector<double>> run(const std::vector<std::vector<ChunkSet>>* candidate) {
        ++passes_;
        const auto& cfg = model_.cfg;
        const std::size_t dh = cfg.head_dim, nh = cfg.n_heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const ChunkSet all = ChunkSet::all(cfg.chunk_count());
        std::vector<std::vector<double>> dist(cfg.n_layers, std::vector<double>(nh, 0.0));

        for (std::size_t s = 0; s < calib_.sequences.size(); ++s) {
            const Matrix& tokens = calib_.sequences[s];
            const std::size_t t = tokens.rows();
            Matrix h = tokens;
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                Matrix x = h;
                if (opts_.forward.residual_norm)
                    for (std::size_t i = 0; i < t; ++i) {
                        const auto n = rms_normalize(h.row(i));
                        std::copy(n.begin(), n.end(), x.row(i).begin());
                    }
                const auto& w = model_.layers[l];
                const Matrix q = matmul(x, w.wq), k = matmul(x, w.wk), v = matmul(x, w.wv);
                Matrix ctx(t, cfg.proj_dim());
                parallel_for(nh, opts_.threads, [&](std::size_t head) {
                    const Matrix qh = column_block(q, head * dh, dh);
                    const Matrix kh = column_block(k, head * dh, dh);
                    const Matrix q_full = rotate_rows(qh, all);
                    const Matrix k_full = rotate_rows(kh, all);
                    // Propagation always uses the original full-RoPE attention.
                    const auto pre = causal_scores(q_full, k_full, scale, ScoreMode::pre_softmax);
                    std::size_t off = 0;
                    for (std::size_t m = 0; m < t; ++m) {
                        std::vector<double> row(pre.begin() + static_cast<std::ptrdiff_t>(off),
                                                pre.begin() + static_cast<std::ptrdiff_t>(off + m + 1));
                        off += m + 1;
                        softmax_inplace(row);
                        for (std::size_t n = 0; n <= m; ++n)
                            for (std::size_t i = 0; i < dh; ++i) ctx(m, head * dh + i) += row[n] * v(n, head * dh + i);
                    }
                    auto& ref = reference_[l][head][s];
                    if (!candidate) {
                        ref = opts_.score == ScoreMode::pre_softmax
                                  ? pre
                                  : causal_scores(q_full, k_full, scale, ScoreMode::post_softmax);
                        return;
                    }
                    const ChunkSet& cs = (*candidate)[l][head];
                    const auto cand = causal_scores(rotate_rows(qh, cs), rotate_rows(kh, cs), scale, opts_.score);
                    dist[l][head] += l1_distance(ref, cand);
                });
                Matrix next = matmul(ctx, w.wo);
                if (opts_.forward.residual_norm)
                    for (std::size_t i = 0; i < next.values().size(); ++i) next.data()[i] += h.values()[i];
                h = std::move(next);
            }
        }
        return dist;
    }

    Matrix rotate_rows(const Matrix& m, const ChunkSet& chunks) const {
        Matrix out = m;
        for (std::size_t i = 0; i < m.rows(); ++i)
            rotate_inplace(out.row(i), static_cast<std::int64_t>(i), chunks, theta_);
        return out;
    }

    const Model& model_;
    const CalibrationBatch& calib_;
    SearchOptions opts_;
    std::vector<double> theta_;
    std::size_t passes_ = 0;
    // [layer][head][sequence] -> causal reference scores
    std::vector<std::vector<std::vector<std::vector<double>>>> reference_;
};

// Direct per-pair evaluation of the mixed-rotation score via relative_score.
// Independent of ScoreProbe; used by the exhaustive search and for auditing.
class PairwiseScorer {
public:
    PairwiseScorer(const Model& model, const CalibrationBatch& calib, const SearchOptions& opts) : cfg_(model.cfg) {
        const std::size_t nh = cfg_.n_heads, dh = cfg_.head_dim;
        q_.assign(cfg_.n_layers, std::vector<std::vector<Matrix>>(nh));
        k_.assign(cfg_.n_layers, std::vector<std::vector<Matrix>>(nh));
        for (const auto& seq : calib.sequences) {
            const auto inputs = layer_inputs(model, seq, opts.forward);
            for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
                const Matrix q = matmul(inputs[l], model.layers[l].wq);
                const Matrix k = matmul(inputs[l], model.layers[l].wk);
                for (std::size_t h = 0; h < nh; ++h) {
                    q_[l][h].push_back(column_block(q, h * dh, dh));
                    k_[l][h].push_back(column_block(k, h * dh, dh));
                }
            }
        }
        mode_ = opts.score;
    }

    const Matrix& q(std::size_t l, std::size_t h, std::size_t s) const { return q_[l][h][s]; }
    const Matrix& k(std::size_t l, std::size_t h, std::size_t s) const { return k_[l][h][s]; }
    std::size_t sequences() const { return q_.empty() || q_[0].empty() ? 0 : q_[0][0].size(); }

    std::vector<double> scores(std::size_t l, std::size_t h, std::size_t s, const ChunkSet& chunks) const {
        const auto rope = cfg_.rope();
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim));
        const Matrix& q = q_[l][h][s];
        const Matrix& k = k_[l][h][s];
        std::vector<double> out, row;
        for (std::size_t m = 0; m < q.rows(); ++m) {
            row.assign(m + 1, 0.0);
            for (std::size_t n = 0; n <= m; ++n)
                row[n] = relative_score(q.row(m), k.row(n), static_cast<std::int64_t>(m),
                                        static_cast<std::int64_t>(n), chunks, rope) * scale;
            if (mode_ == ScoreMode::post_softmax) softmax_inplace(row);
            out.insert(out.end(), row.begin(), row.end());
        }
        return out;
    }

    std::vector<std::vector<double>> reference(std::size_t l, std::size_t h) const {
        std::vector<std::vector<double>> ref;
        for (std::size_t s = 0; s < sequences(); ++s) ref.push_back(scores(l, h, s, ChunkSet::all(cfg_.chunk_count())));
        return ref;
    }

    double distance(std::size_t l, std::size_t h, const std::vector<std::vector<double>>& ref,
                    const ChunkSet& chunks) const {
        double d = 0.0;
        for (std::size_t s = 0; s < sequences(); ++s) d += l1_distance(ref[s], scores(l, h, s, chunks));
        return d;
    }

private:
    ModelConfig cfg_;
    ScoreMode mode_ = ScoreMode::pre_softmax;
    std::vector<std::vector<std::vector<Matrix>>> q_, k_;  // [layer][head][sequence] -> T x d_h
};

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    std::uint64_t b = 1;
    for (std::uint64_t i = 1; i <= k; ++i) b = b * (n - k + i) / i;
    return b;
}

} // namespace detail

// Greedy elite-chunk search. Every head adds, at each step, the chunk whose
// rotation brings its scores closest (L1) to the full-RoPE scores. All layers
// and heads share each forward pass.
inline SearchResult ropelite_search(const Model& model, const CalibrationBatch& calib, std::size_t r,
                                    const SearchOptions& opts = {}) {
    model.validate();
    const auto& cfg = model.cfg;
    detail::check_r(r, cfg);
    detail::check_calibration(calib, cfg);
    const std::size_t nl = cfg.n_layers, nh = cfg.n_heads, chunks = cfg.chunk_count();

    detail::ScoreProbe probe(model, calib, opts);
    probe.reference_pass();

    std::vector<std::vector<ChunkSet>> elite(nl, std::vector<ChunkSet>(nh));
    SearchResult res;
    res.trace.assign(nl, std::vector<HeadTrace>(nh));
    for (std::size_t step = 1; step <= r; ++step) {
        std::vector<std::vector<std::vector<std::size_t>>> comp(nl, std::vector<std::vector<std::size_t>>(nh));
        for (std::size_t l = 0; l < nl; ++l)
            for (std::size_t h = 0; h < nh; ++h) comp[l][h] = elite[l][h].complement(chunks);
        const std::size_t n_cand = chunks - step + 1;
        std::vector<std::vector<std::vector<double>>> dist(nl, std::vector<std::vector<double>>(nh));
        for (std::size_t c = 0; c < n_cand; ++c) {
            std::vector<std::vector<ChunkSet>> cand(nl, std::vector<ChunkSet>(nh));
            for (std::size_t l = 0; l < nl; ++l)
                for (std::size_t h = 0; h < nh; ++h) cand[l][h] = elite[l][h].with(comp[l][h][c]);
            const auto d = probe.candidate_pass(cand);
            for (std::size_t l = 0; l < nl; ++l)
                for (std::size_t h = 0; h < nh; ++h) dist[l][h].push_back(d[l][h]);
        }
        res.stats.candidate_evaluations += n_cand;
        for (std::size_t l = 0; l < nl; ++l) {
            for (std::size_t h = 0; h < nh; ++h) {
                // Candidates are in ascending chunk order, so strict < keeps the smallest index on ties.
                std::size_t best = 0;
                for (std::size_t c = 1; c < n_cand; ++c)
                    if (dist[l][h][c] < dist[l][h][best]) best = c;
                elite[l][h] = elite[l][h].with(comp[l][h][best]);
                res.trace[l][h].picks.push_back(comp[l][h][best]);
                res.trace[l][h].distances.push_back(dist[l][h][best]);
            }
        }
    }
    res.stats.forward_passes = probe.passes();
    res.selection = {SelectionMethod::ropelite, r, std::move(elite)};
    res.distance.assign(nl, std::vector<double>(nh));
    for (std::size_t l = 0; l < nl; ++l)
        for (std::size_t h = 0; h < nh; ++h) res.distance[l][h] = res.trace[l][h].distances.back();
    return res;
}

inline constexpr std::uint64_t exhaustive_limit = 100000;

// Minimizes the same L1 distance over every r-subset; ties go to the
// lexicographically smallest set.
inline SearchResult exhaustive_search(const Model& model, const CalibrationBatch& calib, std::size_t r,
                                      const SearchOptions& opts = {}) {
    model.validate();
    const auto& cfg = model.cfg;
    detail::check_r(r, cfg);
    detail::check_calibration(calib, cfg);
    const std::size_t chunks = cfg.chunk_count();
    const auto space = detail::binomial(chunks, r);
    if (space > exhaustive_limit)
        throw SizeError("exhaustive search space C(" + std::to_string(chunks) + ", " + std::to_string(r) +
                        ") = " + std::to_string(space) + " exceeds " + std::to_string(exhaustive_limit));

    const detail::PairwiseScorer scorer(model, calib, opts);
    const std::size_t nl = cfg.n_layers, nh = cfg.n_heads;
    std::vector<ChunkSet> best_set(nl * nh);
    std::vector<double> best_dist(nl * nh);
    parallel_for(nl * nh, opts.threads, [&](std::size_t idx) {
        const std::size_t l = idx / nh, h = idx % nh;
        const auto ref = scorer.reference(l, h);
        std::vector<std::size_t> comb(r);
        std::iota(comb.begin(), comb.end(), std::size_t{0});
        bool first = true;
        while (true) {
            const ChunkSet set(comb);
            const double d = scorer.distance(l, h, ref, set);
            if (first || d < best_dist[idx]) {
                best_dist[idx] = d;
                best_set[idx] = set;
                first = false;
            }
            // Next combination in lexicographic order.
            std::size_t i = r;
            while (i > 0 && comb[i - 1] == chunks - r + i - 1) --i;
            if (i == 0) break;
            ++comb[i - 1];
            for (std::size_t j = i; j < r; ++j) comb[j] = comb[j - 1] + 1;
        }
    });

    SearchResult res;
    res.selection = {SelectionMethod::exhaustive, r, std::vector<std::vector<ChunkSet>>(nl, std::vector<ChunkSet>(nh))};
    res.distance.assign(nl, std::vector<double>(nh));
    for (std::size_t l = 0; l < nl; ++l)
        for (std::size_t h = 0; h < nh; ++h) {
            res.selection.layers[l][h] = best_set[l * nh + h];
            res.distance[l][h] = best_dist[l * nh + h];
        }
    res.stats.candidate_evaluations = static_cast<std::size_t>(space);
    return res;
}

// L1 distance of each head's chosen set, evaluated pair by pair.
inline std::vector<std::vector<double>> selection_distance(const Model& model, const CalibrationBatch& calib,
                                                           const EliteSelection& sel, const SearchOptions& opts = {}) {
    model.validate();
    sel.validate(model.cfg);
    detail::check_calibration(calib, model.cfg);
    const detail::PairwiseScorer scorer(model, calib, opts);
    const std::size_t nl = model.cfg.n_layers, nh = model.cfg.n_heads;
    std::vector<std::vector<double>> out(nl, std::vector<double>(nh));
    for (std::size_t l = 0; l < nl; ++l)
        for (std::size_t h = 0; h < nh; ++h) out[l][h] = scorer.distance(l, h, scorer.reference(l, h), sel.at(l, h));
    return out;
}

// Evenly spaced chunks j * (d_h/2) / r, identical for every head.
inline EliteSelection uniform_select(const ModelConfig& cfg, std::size_t r) {
    cfg.validate();
    detail::check_r(r, cfg);
    const std::size_t chunks = cfg.chunk_count();
    std::vector<std::size_t> idx(r);
    for (std::size_t j = 0; j < r; ++j) idx[j] = j * chunks / r;
    return EliteSelection::uniform_sets(cfg, SelectionMethod::uniform, ChunkSet(std::move(idx)));
}

// Top-r chunks by mean of ‖q_{t,i}‖·‖k_{t,i}‖ over calibration tokens.
inline EliteSelection contribution_select(const Model& model, const CalibrationBatch& calib, std::size_t r,
                                          const SearchOptions& opts = {}) {
    model.validate();
    const auto& cfg = model.cfg;
    detail::check_r(r, cfg);
    detail::check_calibration(calib, cfg);
    const std::size_t nl = cfg.n_layers, nh = cfg.n_heads, dh = cfg.head_dim, chunks = cfg.chunk_count();
    std::vector<std::vector<std::vector<double>>> score(nl, std::vector<std::vector<double>>(nh, std::vector<double>(chunks)));
    std::size_t count = 0;
    for (const auto& seq : calib.sequences) {
        const auto inputs = layer_inputs(model, seq, opts.forward);
        count += seq.rows();
        for (std::size_t l = 0; l < nl; ++l) {
            const Matrix q = matmul(inputs[l], model.layers[l].wq);
            const Matrix k = matmul(inputs[l], model.layers[l].wk);
            for (std::size_t t = 0; t < seq.rows(); ++t)
                for (std::size_t h = 0; h < nh; ++h)
                    for (std::size_t i = 0; i < chunks; ++i) {
                        const std::size_t c = h * dh + 2 * i;
                        score[l][h][i] += std::hypot(q(t, c), q(t, c + 1)) * std::hypot(k(t, c), k(t, c + 1));
                    }
        }
    }
    EliteSelection sel{SelectionMethod::contribution, r, std::vector<std::vector<ChunkSet>>(nl, std::vector<ChunkSet>(nh))};
    for (std::size_t l = 0; l < nl; ++l)
        for (std::size_t h = 0; h < nh; ++h) {
            auto& s = score[l][h];
            for (double& v : s) v /= static_cast<double>(count);
            std::vector<std::size_t> order(chunks);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
            order.resize(r);
            std::sort(order.begin(), order.end());
            sel.layers[l][h] = ChunkSet(std::move(order));
        }
    return sel;
}

inline SearchResult run_selection(SelectionMethod method, const Model& model, const CalibrationBatch& calib,
                                  std::size_t r, const SearchOptions& opts = {}) {
    switch (method) {
    case SelectionMethod::ropelite: return ropelite_search(model, calib, r, opts);
    case SelectionMethod::exhaustive: return exhaustive_search(model, calib, r, opts);
    case SelectionMethod::uniform: {
        SearchResult res;
        res.selection = uniform_select(model.cfg, r);
        res.distance = selection_distance(model, calib, res.selection, opts);
        return res;
    }
    case SelectionMethod::contribution: {
        SearchResult res;
        res.selection = contribution_select(model, calib, r, opts);
        res.distance = selection_distance(model, calib, res.selection, opts);
        return res;
    }
    }
    throw InputError("unknown selection method");
}

} // namespace ropekv
