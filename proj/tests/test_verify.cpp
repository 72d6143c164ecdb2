#include <gtest/gtest.h>

#include "ropekv/verify.hpp"

using namespace ropekv;

namespace {

VerifyInputs toy_inputs() {
    VerifyInputs in;
    in.model = gen_model(42, {2, 2, 8, 16, 10000.0});
    in.rope_samples = 300;
    return in;
}

std::string toy_factor_bytes(const Model& m) {
    const auto e = uniform_select(m.cfg, 2);
    FactorFile f{m.cfg, LrdMode::jlrd, 2, 6, 0, e, {}};
    for (std::size_t l = 0; l < m.cfg.n_layers; ++l)
        f.layers.push_back(decompose_jlrd(split_key_projection(m.layers[l].wk, e, l, 8), m.layers[l].wv, 6));
    return encode_factors(f);
}

} // namespace

TEST(Verify, EverySuitePassesOnSeededToy) {
    const auto in = toy_inputs();
    for (const auto& name : suite_names()) {
        const auto results = verify(in, name);
        EXPECT_FALSE(results.empty()) << name;
        for (const auto& r : results) {
            EXPECT_EQ(r.suite, name);
            EXPECT_TRUE(r.pass) << r.suite << ": " << r.property << " residual " << r.residual;
        }
    }
}

TEST(Verify, AllRunsEverySuite) {
    const auto in = toy_inputs();
    const auto all = verify(in, "all");
    std::set<std::string> seen;
    for (const auto& r : all) seen.insert(r.suite);
    EXPECT_EQ(seen.size(), suite_names().size());
    EXPECT_TRUE(all_pass(all));
}

TEST(Verify, FactorFileAccountingPassesWhenConsistent) {
    auto in = toy_inputs();
    in.factor_bytes = toy_factor_bytes(in.model);
    EXPECT_TRUE(all_pass(verify(in, "accounting")));
}

TEST(Verify, CorruptedRankIsReported) {
    auto in = toy_inputs();
    auto bytes = toy_factor_bytes(in.model);
    bytes[27] = 7;  // rank_k header no longer matches the stored matrices
    in.factor_bytes = bytes;
    EXPECT_FALSE(all_pass(verify(in, "accounting")));
}

TEST(Verify, TruncatedFactorFileIsAFailureNotACrash) {
    auto in = toy_inputs();
    in.factor_bytes = toy_factor_bytes(in.model).substr(0, 40);
    const auto results = verify(in, "accounting");
    EXPECT_FALSE(all_pass(results));
}

TEST(Verify, UnknownSuite) {
    EXPECT_THROW(verify(toy_inputs(), "bogus"), InputError);
}

TEST(Verify, JsonLine) {
    const auto j = to_json(PropertyResult{"s", "p", 0.5, 1.0, true});
    EXPECT_EQ(j.dump(), R"({"suite":"s","property":"p","residual":0.5,"tolerance":1.0,"pass":true})");
}
