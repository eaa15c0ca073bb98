#include <gtest/gtest.h>

#include <cmath>

#include "fimlora/lora.hpp"
#include "oracles.hpp"

using fimlora::LoraAdapter;
using fimlora::Matrix;
using fimlora::Rng;

namespace {

LoraAdapter random_adapter(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha, Rng& rng,
                           bool zero_b = false) {
    Matrix a = fimlora::gaussian_init(rank, d_in, rng);
    Matrix b = zero_b ? Matrix(d_out, rank) : fimlora::gaussian_init(d_out, rank, rng);
    return LoraAdapter("m", std::move(a), std::move(b), alpha);
}

}  // namespace

TEST(LoraCreate, ZeroBAndBoundedA) {
    Rng rng(1);
    const auto ad = LoraAdapter::create("layers.0.proj", 12, 5, 3, 6.0, rng);
    EXPECT_EQ(ad.b(), Matrix(5, 3));
    EXPECT_EQ(ad.rank(), 3U);
    EXPECT_EQ(ad.scaling(), 2.0);
    const double bound = std::sqrt(6.0 / 12.0);
    for (double v : ad.a().data()) {
        EXPECT_LT(std::abs(v), bound);
    }
}

TEST(LoraCreate, RejectsBadArguments) {
    Rng rng(1);
    EXPECT_THROW((void)LoraAdapter::create("m", 4, 4, 0, 1.0, rng), fimlora::ConfigError);
    EXPECT_THROW(LoraAdapter("m", Matrix(2, 4), Matrix(4, 3), 1.0), fimlora::ShapeError);
    EXPECT_THROW(LoraAdapter("m", Matrix(2, 4), Matrix(4, 2), 0.0), fimlora::ConfigError);
}

TEST(ForwardDelta, FreshAdapterIsZero) {
    Rng rng(2);
    const auto ad = LoraAdapter::create("m", 6, 4, 2, 4.0, rng);
    for (int k = 0; k < 20; ++k) {
        const Matrix x = fimlora::gaussian_init(6, 1, rng);
        EXPECT_TRUE(fimlora::all_zero(fimlora::forward_delta(ad, x).delta));
    }
}

TEST(ForwardDelta, ZeroInputIsZero) {
    Rng rng(3);
    const auto ad = random_adapter(5, 3, 2, 1.0, rng);
    EXPECT_EQ(fimlora::forward_delta(ad, Matrix(5, 1)).delta, Matrix(3, 1));
}

TEST(ForwardDelta, HandComputed) {
    const LoraAdapter ad("m", Matrix{{1, 1}}, Matrix{{2}, {0}}, 1.0);
    const auto out = fimlora::forward_delta(ad, Matrix::column({1, 2}));
    EXPECT_EQ(out.ax, (Matrix{{3}}));
    EXPECT_EQ(out.delta, (Matrix{{6}, {0}}));
}

TEST(ForwardDelta, ShapeMismatchThrows) {
    const LoraAdapter ad("m", Matrix{{1, 1}}, Matrix{{2}, {0}}, 1.0);
    EXPECT_THROW((void)fimlora::forward_delta(ad, Matrix::column({1, 2, 3})), fimlora::ShapeError);
}

TEST(AdapterGradients, ZeroBGivesExactlyZeroGradA) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const auto ad = LoraAdapter::create("m", 7, 5, 3, 3.0, rng);
        const Matrix x = fimlora::gaussian_init(7, 1, rng);
        const Matrix up = fimlora::gaussian_init(5, 1, rng);
        const auto g = fimlora::adapter_gradients(ad, x, up);
        EXPECT_TRUE(fimlora::all_zero(g.grad_a));
        EXPECT_FALSE(fimlora::all_zero(g.grad_b));
    }
}

TEST(AdapterGradients, ZeroUpstreamGivesZeroGradients) {
    Rng rng(5);
    const auto ad = random_adapter(4, 3, 2, 2.0, rng);
    const auto g = fimlora::adapter_gradients(ad, fimlora::gaussian_init(4, 1, rng), Matrix(3, 1));
    EXPECT_TRUE(fimlora::all_zero(g.grad_a));
    EXPECT_TRUE(fimlora::all_zero(g.grad_b));
}

TEST(AdapterGradients, HandComputedGradB) {
    // rank 2, alpha 4 -> scaling 2; A chosen so that Ax = [2, 3] for x = [1, 1].
    const LoraAdapter ad("m", Matrix{{2, 0}, {0, 3}}, Matrix(2, 2), 4.0);
    const auto g = fimlora::adapter_gradients(ad, Matrix::column({1, 1}), Matrix::column({1, -1}));
    EXPECT_EQ(g.grad_b, (Matrix{{4, 6}, {-4, -6}}));
}

TEST(AdapterGradients, MatchesFiniteDifferencesOfLinearLoss) {
    // Scalar loss u^T delta(x): its gradient is adapter_gradients with upstream u.
    Rng rng(6);
    const auto ad = random_adapter(5, 4, 3, 1.5, rng);
    const Matrix x = fimlora::gaussian_init(5, 1, rng);
    const Matrix u = fimlora::gaussian_init(4, 1, rng);
    const auto g = fimlora::adapter_gradients(ad, x, u);
    auto loss = [&](const LoraAdapter& p) {
        const Matrix d = fimlora::forward_delta(p, x).delta;
        double s = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            s += u[i] * d[i];
        }
        return s;
    };
    const double h = 1e-6;
    for (std::size_t k = 0; k < ad.b().size(); ++k) {
        LoraAdapter up = ad;
        LoraAdapter dn = ad;
        up.b()[k] += h;
        dn.b()[k] -= h;
        EXPECT_LT(oracle::relative_error(g.grad_b[k], (loss(up) - loss(dn)) / (2 * h)), 1e-6);
    }
    for (std::size_t k = 0; k < ad.a().size(); ++k) {
        LoraAdapter up = ad;
        LoraAdapter dn = ad;
        up.a()[k] += h;
        dn.a()[k] -= h;
        EXPECT_LT(oracle::relative_error(g.grad_a[k], (loss(up) - loss(dn)) / (2 * h)), 1e-6);
    }
}

namespace {

// Brute force: does any double within 64 ulps of ratio * r divide back to ratio?
bool exact_alpha_exists(double ratio, double r) {
    double up = ratio * r;
    double down = up;
    for (int k = 0; k <= 64; ++k) {
        if (up / r == ratio || down / r == ratio) return true;
        up = std::nextafter(up, INFINITY);
        down = std::nextafter(down, 0.0);
    }
    return false;
}

}  // namespace

TEST(AlphaForRank, RatioHoldsBitwiseWheneverAchievable) {
    std::size_t exact = 0;
    std::size_t unreachable = 0;
    for (double base_alpha : {1.0, 3.0, 7.0, 16.0, 0.1, 2.7182818284590451}) {
        for (std::size_t base_rank : {1U, 2U, 3U, 7U, 16U}) {
            const double ratio = base_alpha / static_cast<double>(base_rank);
            for (std::size_t r = 1; r <= 512; ++r) {
                const double rd = static_cast<double>(r);
                const double a = fimlora::alpha_for_rank(base_alpha, base_rank, r);
                if (exact_alpha_exists(ratio, rd)) {
                    ++exact;
                    ASSERT_EQ(a / rd, ratio) << base_alpha << " " << base_rank << " " << r;
                } else {
                    ++unreachable;
                    ASSERT_EQ(a, ratio * rd) << base_alpha << " " << base_rank << " " << r;
                }
            }
        }
    }
    EXPECT_GT(exact, 10U * unreachable);
}

TEST(AlphaForRank, SomeRatiosHaveNoExactAlpha) {
    // 1/3 at rank 25: 8.333333333333332 / 25 and its successor / 25 straddle fl(1/3).
    EXPECT_FALSE(exact_alpha_exists(1.0 / 3.0, 25.0));
    EXPECT_EQ(fimlora::alpha_for_rank(1.0, 3, 25), (1.0 / 3.0) * 25.0);
}

TEST(Resize, ScalingIsBaseRatioEvenWithoutExactAlpha) {
    Rng rng(12);
    const auto ad = random_adapter(4, 3, 3, 1.0, rng);
    for (std::size_t r = 1; r <= 64; ++r) {
        Rng r2(r);
        const auto out = fimlora::resize(ad, r, 1.0, 3, r2);
        EXPECT_EQ(out.scaling(), 1.0 / 3.0) << r;
        EXPECT_EQ(out.alpha(), fimlora::alpha_for_rank(1.0, 3, r)) << r;
    }
}

TEST(Resize, SameRankIsBitIdentical) {
    Rng rng(7);
    const auto ad = random_adapter(6, 5, 4, 8.0, rng);
    Rng r2(99);
    EXPECT_EQ(fimlora::resize(ad, 4, 8.0, 4, r2), ad);
}

TEST(Resize, ShrinkKeepsLeadingBlockAndRescalesAlpha) {
    Rng rng(8);
    const auto ad = random_adapter(6, 5, 4, 8.0, rng);
    const auto small = fimlora::resize(ad, 2, 8.0, 4, rng);
    EXPECT_EQ(small.rank(), 2U);
    EXPECT_EQ(small.alpha(), 4.0);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            EXPECT_EQ(small.a()(i, j), ad.a()(i, j));
        }
    }
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            EXPECT_EQ(small.b()(i, j), ad.b()(i, j));
        }
    }
}

TEST(Resize, GrowAddsZeroBColumnsAndBoundedARows) {
    Rng rng(9);
    const auto ad = random_adapter(6, 5, 2, 4.0, rng);
    const auto big = fimlora::resize(ad, 5, 4.0, 2, rng);
    EXPECT_EQ(big.alpha(), 10.0);
    const double bound = std::sqrt(6.0 / 6.0);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            if (i < 2) {
                EXPECT_EQ(big.a()(i, j), ad.a()(i, j));
            } else {
                EXPECT_LT(std::abs(big.a()(i, j)), bound);
            }
        }
    }
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 2; j < 5; ++j) {
            EXPECT_EQ(big.b()(i, j), 0.0);
        }
    }
}

TEST(Resize, RoundTripRestoresSharedBlock) {
    Rng rng(10);
    const auto ad = random_adapter(7, 6, 3, 6.0, rng);
    const auto back = fimlora::resize(fimlora::resize(ad, 8, 6.0, 3, rng), 3, 6.0, 3, rng);
    EXPECT_EQ(back, ad);
    const auto down_up = fimlora::resize(fimlora::resize(ad, 1, 6.0, 3, rng), 3, 6.0, 3, rng);
    for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_EQ(down_up.a()(0, j), ad.a()(0, j));
    }
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(down_up.b()(i, 0), ad.b()(i, 0));
    }
}

TEST(Resize, AtInitPreservesZeroDelta) {
    Rng rng(11);
    const auto ad = LoraAdapter::create("m", 8, 8, 4, 8.0, rng);
    for (std::size_t r : {1U, 2U, 3U, 5U, 9U, 16U}) {
        const auto rs = fimlora::resize(ad, r, 8.0, 4, rng);
        for (int k = 0; k < 5; ++k) {
            EXPECT_TRUE(fimlora::all_zero(fimlora::forward_delta(rs, fimlora::gaussian_init(8, 1, rng)).delta));
        }
    }
}

TEST(Resize, RejectsZeroRank) {
    Rng rng(12);
    const auto ad = LoraAdapter::create("m", 4, 4, 2, 4.0, rng);
    EXPECT_THROW((void)fimlora::resize(ad, 0, 4.0, 2, rng), fimlora::ConfigError);
}
