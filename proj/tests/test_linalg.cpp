#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ropekv/linalg.hpp"
#include "oracles.hpp"

using namespace ropekv;

namespace {

double orthogonality_defect(const Matrix& q) {
    return oracle::frob(oracle::minus(oracle::matmul(transpose(q), q), Matrix::identity(q.cols())));
}

Matrix reconstruct(const SvdResult& s) {
    Matrix sv(s.u.cols(), s.vt.rows());
    for (std::size_t i = 0; i < s.sigma.size(); ++i)
        for (std::size_t j = 0; j < s.vt.cols(); ++j) sv(i, j) = s.sigma[i] * s.vt(i, j);
    return oracle::matmul(s.u, sv);
}

void expect_svd_invariants(const Matrix& m) {
    const auto s = svd(m);
    ASSERT_EQ(s.u.rows(), m.rows());
    ASSERT_EQ(s.u.cols(), m.rows());
    ASSERT_EQ(s.vt.rows(), m.cols());
    ASSERT_EQ(s.sigma.size(), std::min(m.rows(), m.cols()));
    for (std::size_t i = 0; i < s.sigma.size(); ++i) {
        EXPECT_GE(s.sigma[i], 0.0);
        if (i) {
            EXPECT_LE(s.sigma[i], s.sigma[i - 1]);
        }
    }
    EXPECT_LE(orthogonality_defect(s.u), 1e-9 * double(m.rows()));
    EXPECT_LE(orthogonality_defect(transpose(s.vt)), 1e-9 * double(m.cols()));
    EXPECT_LE(oracle::frob(oracle::minus(reconstruct(s), m)), 1e-8 * std::max(oracle::frob(m), 1e-300));
    for (std::size_t j = 0; j < s.u.cols(); ++j) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < s.u.rows(); ++i)
            if (std::abs(s.u(i, j)) > std::abs(s.u(arg, j))) arg = i;
        EXPECT_GT(s.u(arg, j), 0.0) << "sign convention, column " << j;
    }
}

Matrix add_noise(Rng& rng, const Matrix& m, double sd) {
    Matrix out = m;
    for (double& x : out.data()) x += sd * rng.normal();
    return out;
}

} // namespace

TEST(Matrix, RejectsWrongLengthAndNonFinite) {
    EXPECT_THROW(Matrix(2, 2, {1.0, 2.0, 3.0}), ShapeError);
    EXPECT_THROW(Matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}), InputError);
    EXPECT_THROW(Matrix(1, 1, {std::numeric_limits<double>::infinity()}), InputError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const auto m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
    EXPECT_EQ(matmul(Matrix::identity(3), m), m);
}

TEST(Matmul, PermutationSwapsColumns) {
    const auto a = Matrix::from_rows({{1, 2}, {3, 4}});
    const auto p = Matrix::from_rows({{0, 1}, {1, 0}});
    EXPECT_EQ(matmul(a, p), Matrix::from_rows({{2, 1}, {4, 3}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
    Rng rng(7);
    const auto a = oracle::random_matrix(rng, 5, 7), b = oracle::random_matrix(rng, 7, 3);
    EXPECT_LE(max_abs_diff(matmul(a, b), oracle::matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST(Matmul, AssociativeWithinTolerance) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = oracle::random_matrix(rng, 4, 6), b = oracle::random_matrix(rng, 6, 5),
                   c = oracle::random_matrix(rng, 5, 3);
        const double lhs = frobenius_norm(subtract(matmul(matmul(a, b), c), matmul(a, matmul(b, c))));
        EXPECT_LE(lhs, 1e-9 * frobenius_norm(a) * frobenius_norm(b) * frobenius_norm(c));
    }
}

TEST(Slicing, ConcatAndSelect) {
    const auto a = Matrix::from_rows({{1, 2}, {3, 4}});
    const auto b = Matrix::from_rows({{5}, {6}});
    const auto c = hconcat(a, b);
    EXPECT_EQ(c, Matrix::from_rows({{1, 2, 5}, {3, 4, 6}}));
    const std::size_t cols[] = {2, 0};
    EXPECT_EQ(select_columns(c, cols), Matrix::from_rows({{5, 1}, {6, 3}}));
    EXPECT_EQ(column_block(c, 1, 2), Matrix::from_rows({{2, 5}, {4, 6}}));
    EXPECT_EQ(row_block(c, 1, 1), Matrix::from_rows({{3, 4, 6}}));
    EXPECT_THROW(hconcat(a, Matrix(3, 1)), ShapeError);
}

TEST(Svd, DiagonalInput) {
    const auto s = svd(Matrix::from_rows({{3, 0, 0}, {0, 2, 0}, {0, 0, 1}}));
    ASSERT_EQ(s.sigma.size(), 3u);
    EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
    EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
    EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
}

TEST(Svd, RankOneOuterProduct) {
    const std::vector<double> u{1, 2, 2}, v{3, 4};  // norms 3 and 5
    Matrix m(3, 2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) m(i, j) = u[i] * v[j];
    const auto s = svd(m);
    EXPECT_NEAR(s.sigma[0], 15.0, 1e-12);
    EXPECT_NEAR(s.sigma[1], 0.0, 1e-12);
    expect_svd_invariants(m);
}

TEST(Svd, RandomMatchesEigenOracle) {
    Rng rng(3);
    const auto m = oracle::random_matrix(rng, 8, 6);
    const auto s = svd(m);
    const auto ref = oracle::singular_values(m);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(s.sigma[i], ref[i], 1e-8);
    expect_svd_invariants(m);
}

TEST(Svd, InvariantsAcrossShapes) {
    Rng rng(5);
    for (auto [r, c] : {std::pair{1, 1}, {1, 5}, {5, 1}, {4, 9}, {9, 4}, {12, 12}, {16, 32}}) {
        SCOPED_TRACE(std::to_string(r) + "x" + std::to_string(c));
        expect_svd_invariants(oracle::random_matrix(rng, r, c));
    }
}

TEST(Svd, RankDeficientAndZero) {
    Rng rng(6);
    const auto low = oracle::matmul(oracle::random_matrix(rng, 10, 3), oracle::random_matrix(rng, 3, 7));
    expect_svd_invariants(low);
    const auto s = svd(low);
    for (std::size_t i = 3; i < s.sigma.size(); ++i) EXPECT_LE(s.sigma[i], 1e-12 * s.sigma[0]);

    const Matrix zero(4, 3);
    const auto z = svd(zero);
    for (double x : z.sigma) EXPECT_EQ(x, 0.0);
    EXPECT_LE(orthogonality_defect(z.u), 1e-12);
    EXPECT_LE(orthogonality_defect(transpose(z.vt)), 1e-12);
}

TEST(Svd, DuplicateColumns) {
    Rng rng(8);
    const auto a = oracle::random_matrix(rng, 6, 3);
    expect_svd_invariants(hconcat(a, a));
}

TEST(Svd, BitIdenticalAcrossCalls) {
    Rng rng(9);
    const auto m = oracle::random_matrix(rng, 9, 7);
    const auto a = svd(m), b = svd(m);
    EXPECT_EQ(a.u, b.u);
    EXPECT_EQ(a.vt, b.vt);
    EXPECT_EQ(a.sigma, b.sigma);
}

TEST(Svd, EmptyMatrixRejected) { EXPECT_THROW(svd(Matrix(0, 3)), ShapeError); }

TEST(TruncatedFactors, RankBounds) {
    const Matrix m = Matrix::identity(3);
    EXPECT_THROW(truncated_factors(m, 0), RankError);
    EXPECT_THROW(truncated_factors(m, 4), RankError);
    EXPECT_NO_THROW(truncated_factors(m, 3));
}

TEST(TruncatedFactors, FullRankReconstructs) {
    Rng rng(12);
    const auto m = oracle::random_matrix(rng, 7, 5);
    const auto f = truncated_factors(m, 5);
    EXPECT_LE(oracle::frob(oracle::minus(oracle::matmul(f.a, f.b), m)), 1e-8 * oracle::frob(m));
}

TEST(TruncatedFactors, ExactRankIsExact) {
    Rng rng(13);
    const auto m = oracle::matmul(oracle::random_matrix(rng, 6, 2), oracle::random_matrix(rng, 2, 8));
    const auto f = truncated_factors(m, 2);
    EXPECT_LE(oracle::frob(oracle::minus(oracle::matmul(f.a, f.b), m)), 1e-10 * oracle::frob(m));
}

TEST(TruncatedFactors, ErrorEqualsTailOracle) {
    Rng rng(14);
    const auto m = oracle::random_matrix(rng, 10, 6);
    const auto f = truncated_factors(m, 3);
    const auto sv = oracle::singular_values(m);
    const double tail = std::sqrt(sv[3] * sv[3] + sv[4] * sv[4] + sv[5] * sv[5]);
    EXPECT_NEAR(oracle::frob(oracle::minus(m, oracle::matmul(f.a, f.b))), tail, 1e-8);
}

TEST(TruncatedFactors, BeatsRandomRankRCompetitors) {
    Rng rng(15);
    for (int trial = 0; trial < 5; ++trial) {
        const auto m = oracle::random_matrix(rng, 8, 6);
        for (std::size_t r = 1; r <= 6; ++r) {
            const auto f = truncated_factors(m, r);
            const double best = frobenius_norm(subtract(m, matmul(f.a, f.b)));
            for (int c = 0; c < 200; ++c) {
                // Odd competitors are small perturbations of the optimum, so they land close to it.
                const auto q = c % 2 ? oracle::matmul(add_noise(rng, f.a, 0.05), add_noise(rng, f.b, 0.05))
                                     : oracle::matmul(oracle::random_matrix(rng, 8, r), oracle::random_matrix(rng, r, 6));
                EXPECT_LE(best, oracle::frob(oracle::minus(m, q)) + 1e-12);
            }
        }
    }
}
