#include <gtest/gtest.h>

#include <algorithm>

#include "ropekv/allocate.hpp"
#include "ropekv/synth.hpp"

using namespace ropekv;

namespace {

const ModelConfig llama{32, 32, 128, 4096, 10000.0};
const ModelConfig toy8{1, 2, 8, 16, 10000.0};

bool has(const std::vector<AllocationCandidate>& cs, std::size_t r, std::size_t c) {
    return std::any_of(cs.begin(), cs.end(), [&](const auto& x) { return x.r == r && x.d_ckv == c && x.decomposed; });
}

} // namespace

TEST(EnumerateConfigs, TargetOneIncludesIdentity) {
    const auto cs = enumerate_configs(toy8, {1.0, 1, 0.0});
    const auto id = std::find_if(cs.begin(), cs.end(), [](const auto& c) { return !c.decomposed; });
    ASSERT_NE(id, cs.end());
    EXPECT_EQ(id->cost.params_after, id->cost.params_original);
    EXPECT_EQ(id->cost.cache_ratio, Rational(1, 1));
}

TEST(EnumerateConfigs, LlamaQuarter) {
    const auto cs = enumerate_configs(llama, {0.25, 128, 0.0});
    EXPECT_TRUE(has(cs, 8, 1536));
    EXPECT_TRUE(has(cs, 0, 2048));
    for (const auto& c : cs) {
        EXPECT_EQ(c.cost.cache_ratio, Rational(1, 4));
        EXPECT_LE(c.cost.params_after, c.cost.params_original);
        EXPECT_EQ(c.d_ckv % 128, 0u);
        EXPECT_EQ(c.r % 2, 0u);  // 64 r + d_ckv = 2048 with d_ckv a multiple of 128
    }
    EXPECT_TRUE(std::is_sorted(cs.begin(), cs.end(), [](const auto& a, const auto& b) {
        return std::pair(a.r, a.d_ckv) < std::pair(b.r, b.d_ckv);
    }));
}

TEST(EnumerateConfigs, LlamaEighth) {
    const auto cs = enumerate_configs(llama, {0.125, 128, 0.0});
    EXPECT_TRUE(has(cs, 4, 768));
    for (const auto& c : cs) EXPECT_EQ(c.cost.cache_per_token_layer, 1024);
}

TEST(EnumerateConfigs, ParameterCeilingExcludesLargeRanks) {
    // r=0, d_ckv=12 fits the cache but needs 3*12*16 = 576 > 512 parameters.
    const auto cs = enumerate_configs(toy8, {12.0 / 32.0, 4, 0.0});
    EXPECT_FALSE(has(cs, 0, 12));
    EXPECT_TRUE(has(cs, 1, 8));
}

TEST(EnumerateConfigs, InfeasibleReportsNearest) {
    try {
        enumerate_configs(toy8, {0.3, 4, 0.0});
        FAIL() << "expected InfeasibleAllocation";
    } catch (const InfeasibleAllocation& e) {
        EXPECT_EQ(e.kind(), ErrorKind::validation);
        EXPECT_EQ(e.nearest(), (std::vector<Rational>{Rational(1, 4), Rational(3, 8)}));
    }
    EXPECT_THROW(enumerate_configs(toy8, {0.5, 128, 0.0}), InfeasibleAllocation);
}

TEST(EnumerateConfigs, ToleranceWidensAcceptance) {
    const auto cs = enumerate_configs(toy8, {0.3, 4, 0.06});
    ASSERT_FALSE(cs.empty());
    for (const auto& c : cs) EXPECT_LE(std::abs(c.cost.cache_ratio.value() - 0.3), 0.06);
}

TEST(EnumerateConfigs, RejectsBadRequests) {
    EXPECT_THROW(enumerate_configs(toy8, {0.0, 4, 0.0}), InputError);
    EXPECT_THROW(enumerate_configs(toy8, {1.5, 4, 0.0}), InputError);
    EXPECT_THROW(enumerate_configs(toy8, {0.5, 0, 0.0}), InputError);
    EXPECT_THROW(enumerate_configs(toy8, {0.5, 4, -1.0}), InputError);
}

TEST(RankConfigs, FrobeniusProxyDeterministicAndSorted) {
    const Model m = gen_model(3, toy8);
    const auto calib = gen_calibration(4, 16, 2, 8);
    const auto a = allocate_configs(m, calib, {0.5, 4, 0.0}, {});
    const auto b = allocate_configs(m, calib, {0.5, 4, 0.0}, {});
    ASSERT_FALSE(a.empty());
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].proxy, b[i].proxy);
        EXPECT_EQ(a[i].r, b[i].r);
        if (i) {
            EXPECT_LE(a[i - 1].proxy, a[i].proxy);
        }
        EXPECT_GE(a[i].proxy, 0.0);
    }
}

TEST(RankConfigs, PerplexityProxyDeterministicAndIdentityIsReference) {
    const Model m = gen_model(5, toy8);
    const auto calib = gen_calibration(6, 16, 2, 8);
    AllocationOptions opts;
    opts.proxy = AllocationProxy::perplexity;
    opts.seed = 7;
    const auto a = allocate_configs(m, calib, {1.0, 4, 0.0}, opts);
    const auto b = allocate_configs(m, calib, {1.0, 4, 0.0}, opts);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].proxy, b[i].proxy);
    for (const auto& c : a) {
        EXPECT_GT(c.proxy, 1.0);
        EXPECT_LE(c.proxy, 64.0 * 4);
    }
}

TEST(PerplexityBatch, SampledIdsInVocabulary) {
    const Model m = gen_model(8, toy8);
    const auto batch = make_perplexity_batch(m, 9);
    EXPECT_EQ(batch.vocab.cols(), 16u);
    for (const auto& s : batch.sequences)
        for (auto id : s) EXPECT_LT(id, batch.vocab.rows());
}
