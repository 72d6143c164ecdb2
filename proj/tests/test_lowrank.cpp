#include <gtest/gtest.h>

#include <cmath>

#include "ropekv/lowrank.hpp"
#include "ropekv/synth.hpp"
#include "oracles.hpp"

using namespace ropekv;

namespace {

KeySplit split_all_heads(const Matrix& wk, const ChunkSet& s, std::size_t n_heads, std::size_t head_dim) {
    const std::vector<ChunkSet> heads(n_heads, s);
    return split_key_projection(wk, heads, head_dim);
}

double tail(const std::vector<double>& sv, std::size_t r) {
    double t = 0.0;
    for (std::size_t i = r; i < sv.size(); ++i) t += sv[i] * sv[i];
    return t;
}

const ModelConfig llama{32, 32, 128, 4096, 10000.0};

} // namespace

TEST(SplitKeyProjection, HandTracedColumns) {
    Matrix wk(3, 8);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 8; ++j) wk(i, j) = double(10 * i + j);
    const std::vector<ChunkSet> heads{ChunkSet({1}), ChunkSet({0})};
    const auto s = split_key_projection(wk, heads, 4);
    EXPECT_EQ(s.layout.elite_columns, (std::vector<std::size_t>{2, 3, 4, 5}));
    EXPECT_EQ(s.layout.rest_columns, (std::vector<std::size_t>{0, 1, 6, 7}));
    EXPECT_EQ(s.wk_elite, select_columns(wk, s.layout.elite_columns));
    EXPECT_EQ(s.wk_rest(2, 3), 27.0);
}

TEST(SplitKeyProjection, FullAndEmptySets) {
    Rng rng(1);
    const auto wk = oracle::random_matrix(rng, 8, 8);
    const auto full = split_all_heads(wk, ChunkSet::all(2), 2, 4);
    EXPECT_EQ(full.wk_rest.cols(), 0u);
    EXPECT_EQ(full.wk_elite, wk);
    const auto none = split_all_heads(wk, ChunkSet{}, 2, 4);
    EXPECT_EQ(none.wk_elite.cols(), 0u);
    EXPECT_EQ(none.wk_rest, wk);
}

TEST(SplitKeyProjection, InconsistentSizesRejected) {
    const std::vector<ChunkSet> heads{ChunkSet({1}), ChunkSet({0, 1})};
    EXPECT_THROW(split_key_projection(Matrix(4, 8), heads, 4), SelectionError);
    const std::vector<ChunkSet> ok{ChunkSet({1}), ChunkSet({0})};
    EXPECT_THROW(split_key_projection(Matrix(4, 6), ok, 4), ShapeError);
}

TEST(DecomposeJlrd, FullRankIsExact) {
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    const Model m = gen_model(2, cfg);
    const auto s = split_all_heads(m.layers[0].wk, ChunkSet({1}), 2, 8);
    const auto f = decompose_jlrd(s, m.layers[0].wv, 16);
    EXPECT_LE(frobenius_norm(subtract(reconstruct_key(s.wk_elite, f), m.layers[0].wk)), 1e-8 * frobenius_norm(m.layers[0].wk));
    EXPECT_LE(frobenius_norm(subtract(reconstruct_value(f), m.layers[0].wv)), 1e-8 * frobenius_norm(m.layers[0].wv));
}

TEST(DecomposeJlrd, SharedDownProjectionAndContiguousB) {
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    const Model m = gen_model(3, cfg);
    const auto s = split_all_heads(m.layers[0].wk, ChunkSet({0, 2}), 2, 8);
    const auto f = decompose_jlrd(s, m.layers[0].wv, 6);
    EXPECT_EQ(f.a_key.rows(), 16u);
    EXPECT_EQ(f.a_key.cols(), 6u);
    EXPECT_EQ(f.b_key.cols(), 16u - 8u);
    EXPECT_EQ(f.b_value.cols(), 16u);
    EXPECT_EQ(f.latent_width(), 6u);
    EXPECT_TRUE(f.a_value.empty());
    const auto whole = truncated_factors(hconcat(s.wk_rest, m.layers[0].wv), 6);
    EXPECT_EQ(hconcat(f.b_key, f.b_value), whole.b);
}

TEST(DecomposeJlrd, DuplicatedColumnsHalfRankExact) {
    Rng rng(4);
    // Rank-3 rest matrix duplicated as the value matrix: the concatenation still has rank 3.
    const auto low = oracle::matmul(oracle::random_matrix(rng, 8, 3), oracle::random_matrix(rng, 3, 8));
    const auto s = split_all_heads(low, ChunkSet{}, 2, 4);
    const auto f = decompose_jlrd(s, low, 3);
    EXPECT_LE(reconstruction_error_sq(s, low, f), 1e-20 * std::pow(frobenius_norm(low), 2));
}

TEST(DecomposeJlrd, ErrorMatchesSvdTailOracle) {
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    const Model m = gen_model(5, cfg);
    const auto s = split_all_heads(m.layers[0].wk, ChunkSet({3}), 2, 8);
    const auto f = decompose_jlrd(s, m.layers[0].wv, 4);
    const auto joint = hconcat(s.wk_rest, m.layers[0].wv);
    EXPECT_NEAR(std::sqrt(reconstruction_error_sq(s, m.layers[0].wv, f)),
                std::sqrt(tail(oracle::singular_values(joint), 4)), 1e-8);
}

TEST(DecomposeJlrd, RankBounds) {
    Rng rng(6);
    const auto wk = oracle::random_matrix(rng, 8, 8);
    const auto s = split_all_heads(wk, ChunkSet({0}), 2, 4);
    EXPECT_THROW(decompose_jlrd(s, wk, 0), RankError);
    EXPECT_THROW(decompose_jlrd(s, wk, 9), RankError);
}

TEST(DecomposeSlrd, FullRankZeroValueAndOracle) {
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    const Model m = gen_model(7, cfg);
    const auto s = split_all_heads(m.layers[0].wk, ChunkSet({1}), 2, 8);
    const auto full = decompose_slrd(s, m.layers[0].wv, 12, 16);
    EXPECT_LE(std::sqrt(reconstruction_error_sq(s, m.layers[0].wv, full)), 1e-8 * frobenius_norm(m.layers[0].wk));
    EXPECT_EQ(full.latent_width(), 28u);

    const Matrix zero(16, 16);
    const auto z = decompose_slrd(s, zero, 3, 2);
    EXPECT_EQ(frobenius_norm(reconstruct_value(z)), 0.0);
    for (double v : z.b_value.values()) EXPECT_EQ(v, 0.0);

    const auto f = decompose_slrd(s, m.layers[0].wv, 5, 3);
    const double expect = tail(oracle::singular_values(s.wk_rest), 5) + tail(oracle::singular_values(m.layers[0].wv), 3);
    EXPECT_NEAR(reconstruction_error_sq(s, m.layers[0].wv, f), expect, 1e-8);
    EXPECT_THROW(decompose_slrd(s, m.layers[0].wv, 0, 3), RankError);
    EXPECT_THROW(decompose_slrd(s, m.layers[0].wv, 13, 3), RankError);
}

TEST(DecomposeSlrd, AllChunksEliteLeavesEmptyKeyFactor) {
    Rng rng(8);
    const auto wk = oracle::random_matrix(rng, 8, 8), wv = oracle::random_matrix(rng, 8, 8);
    const auto s = split_all_heads(wk, ChunkSet::all(2), 2, 4);
    const auto f = decompose_slrd(s, wv, 0, 8);
    EXPECT_EQ(f.key_rank(), 0u);
    EXPECT_LE(frobenius_norm(subtract(reconstruct_key(s.wk_elite, f), wk)), 0.0);
    EXPECT_THROW(decompose_slrd(s, wv, 1, 8), RankError);
}

TEST(Reconstruction, ErrorNonIncreasingInRank) {
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    const Model m = gen_model(9, cfg);
    const auto s = split_all_heads(m.layers[0].wk, ChunkSet({2}), 2, 8);
    double prev = INFINITY;
    for (std::size_t r = 1; r <= 16; ++r) {
        const double e = reconstruction_error_sq(s, m.layers[0].wv, decompose_jlrd(s, m.layers[0].wv, r));
        EXPECT_LE(e, prev + 1e-12);
        prev = e;
    }
    for (std::size_t ck = 1; ck <= 12; ++ck) {
        double pv = INFINITY;
        for (std::size_t cv = 1; cv <= 16; ++cv) {
            const double e = reconstruction_error_sq(s, m.layers[0].wv, decompose_slrd(s, m.layers[0].wv, ck, cv));
            EXPECT_LE(e, pv + 1e-12);
            pv = e;
        }
    }
}

TEST(CostSlrd, DegenerateFullRankDoublesParameters) {
    // The MHA formula at r=0, d_ck=d_cv=d_h n_h counts A and B of two full-rank factorizations.
    const auto c = cost_slrd(llama, 0, 4096, 4096);
    EXPECT_EQ(c.params_original, 2LL * 4096 * 4096);
    EXPECT_EQ(c.params_after, 4LL * 4096 * 4096);
    EXPECT_EQ(c.cache_per_token_layer, 8192);
    EXPECT_EQ(c.cache_ratio, Rational(1, 1));
}

TEST(CostSlrd, LlamaQuarter) {
    const auto c = cost_slrd(llama, 8, 768, 768);
    EXPECT_EQ(c.cache_per_token_layer, 512 + 768 + 768);
    EXPECT_EQ(c.cache_ratio, Rational(1, 4));
    // (2*768 + 2*768 + 2*8*32) * 4096 - 2*768*8*32
    EXPECT_EQ(c.params_after, 14286848);
}

TEST(CostJlrd, LlamaQuarterAndBoundary) {
    const auto c = cost_jlrd(llama, 8, 1536);
    EXPECT_EQ(c.cache_per_token_layer, 2048);
    EXPECT_EQ(c.cache_ratio, Rational(1, 4));
    // 2*8*32*4096 + 3*1536*4096 - 2*1536*8*32
    EXPECT_EQ(c.params_after, 20185088);
    EXPECT_LE(c.params_after, c.params_original);

    const auto b = cost_jlrd(llama, 64, 0);
    EXPECT_EQ(b.cache_per_token_layer, 4096);
    EXPECT_EQ(b.params_after, 2LL * 64 * 32 * 4096);
    EXPECT_EQ(b.params_after, 128LL * 32 * 4096);
}

TEST(CostFormulas, SimplifiedEqualsGeneralOnRandomShapes) {
    Rng rng(10);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t nh = 1 + rng.next() % 64, dh = 2 * (1 + rng.next() % 64);
        const ModelConfig cfg{1, nh, dh, nh * dh, 10000.0};
        const std::size_t r = rng.next() % (dh / 2 + 1);
        const std::size_t ck = rng.next() % 4096, cv = rng.next() % 4096, ckv = rng.next() % 8192;
        const auto d = std::int64_t(nh * dh);
        EXPECT_EQ(cost_slrd(cfg, r, ck, cv).params_after,
                  slrd_params_general(d, d, std::int64_t(r), std::int64_t(nh), std::int64_t(ck), std::int64_t(cv)));
        EXPECT_EQ(cost_jlrd(cfg, r, ckv).params_after,
                  jlrd_params_general(d, d, std::int64_t(r), std::int64_t(nh), std::int64_t(ckv)));
    }
}

TEST(CostFormulas, JointMinusSeparatedAtEqualCache) {
    // With d_ckv = d_ck + d_cv the caches agree and the parameter gap is
    // (d_ck + d_cv) d - 2 d_cv r n_h, which is never negative.
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t nh = 1 + rng.next() % 64, dh = 2 * (1 + rng.next() % 64);
        const ModelConfig cfg{1, nh, dh, nh * dh, 10000.0};
        const std::size_t r = rng.next() % (dh / 2 + 1), ck = rng.next() % 2048, cv = rng.next() % 2048;
        const auto j = cost_jlrd(cfg, r, ck + cv), s = cost_slrd(cfg, r, ck, cv);
        EXPECT_EQ(j.cache_per_token_layer, s.cache_per_token_layer);
        const auto d = std::int64_t(nh * dh);
        EXPECT_EQ(j.params_after - s.params_after, std::int64_t(ck + cv) * d - 2 * std::int64_t(cv * r * nh));
        EXPECT_GE(j.params_after, s.params_after);
    }
}

TEST(SlrdSplit, ZeroValueSideGetsNothingExtra) {
    const std::vector<double> sk{5, 4, 3, 2, 1}, sv{0, 0, 0, 0};
    const ModelConfig cfg{1, 1, 8, 8, 10000.0};
    const auto s = allocate_slrd_split(sk, sv, 2 * 1 + 5 + 1, 1, cfg);
    EXPECT_EQ(s.d_ck, 5u);
    EXPECT_EQ(s.d_cv, 1u);
    EXPECT_EQ(s.error_sq, 0.0);
}

TEST(SlrdSplit, SymmetricSpectraBalance) {
    const std::vector<double> sp{9, 7, 5, 3, 2, 1};
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    for (std::size_t budget = 2 * 2 + 2; budget <= 2 * 2 + 12; ++budget) {
        const auto s = allocate_slrd_split(sp, sp, budget, 1, cfg);
        EXPECT_EQ(s.d_ck + s.d_cv + 4, budget);
        EXPECT_LE(std::max(s.d_ck, s.d_cv) - std::min(s.d_ck, s.d_cv), 1u);
        EXPECT_GE(s.d_ck, s.d_cv);
    }
}

TEST(SlrdSplit, GreedyMatchesExhaustiveOnRandomModels) {
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Model m = gen_model(seed, cfg);
        const auto s = split_all_heads(m.layers[0].wk, ChunkSet({seed % 4}), 2, 8);
        const auto sk = svd(s.wk_rest).sigma, sv = svd(m.layers[0].wv).sigma;
        for (std::size_t budget = 6; budget <= 4 + sk.size() + sv.size(); ++budget) {
            const auto got = allocate_slrd_split(s.wk_rest, m.layers[0].wv, budget, 1, cfg);
            const double best = oracle::best_split_error(sk, sv, budget - 4);
            EXPECT_NEAR(got.error_sq, best, 1e-12 * (1.0 + best));
            const auto f = decompose_slrd(s, m.layers[0].wv, got.d_ck, got.d_cv);
            EXPECT_NEAR(reconstruction_error_sq(s, m.layers[0].wv, f), got.error_sq, 1e-9);
        }
    }
}

TEST(SlrdSplit, InfeasibleBudgets) {
    const ModelConfig cfg{1, 2, 8, 16, 10000.0};
    const std::vector<double> sp{3, 2, 1};
    EXPECT_THROW(allocate_slrd_split(sp, sp, 5, 1, cfg), BudgetError);
    EXPECT_THROW(allocate_slrd_split(sp, sp, 4 + 7, 1, cfg), BudgetError);
    EXPECT_NO_THROW(allocate_slrd_split(sp, sp, 4 + 6, 1, cfg));
}
