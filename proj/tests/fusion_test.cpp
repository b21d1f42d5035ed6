#include "depthfuse/fusion.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "depthfuse/dense_oracle.hpp"

using namespace dfuse;

namespace {

DepthMap random_map(int w, int h, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    DepthMap d(w, h);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : d.values) v = u(rng);
    return d;
}

SoftMask random_mask(int w, int h, std::uint64_t seed) {
    SoftMask m(w, h);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : m.w) v = u(rng);
    return m;
}

GradientField random_field(int w, int h, std::uint64_t seed) {
    GradientField g(w, h);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t i = 0; i < g.size(); ++i) { g.gx[i] = u(rng); g.gy[i] = u(rng); }
    return g;
}

double max_abs_diff(const DepthMap& a, const DepthMap& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.values[i] - b.values[i]));
    return m;
}

}  // namespace

TEST(DeriveOmega, AllZeroGradientsGiveHalf) {
    GradientField g(6, 6);
    const SoftMask m = derive_omega(g, 0.02, 4);
    for (const double v : m.w) EXPECT_EQ(v, 0.5);
}

TEST(DeriveOmega, StrictRampIsRankNormalized) {
    GradientField g(4, 4);
    for (std::size_t i = 0; i < g.size(); ++i) g.gx[i] = 0.1 * static_cast<double>(i + 1);
    const double a = 0.05;
    const SoftMask m = derive_omega(g, a, 4);
    // rank of pixel i is i+1 out of 16; ramp maps through the same clamp
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double u = static_cast<double>(i + 1) / 16.0;
        EXPECT_NEAR(m.w[i], std::clamp((u - a) / (1.0 - 2.0 * a), 0.0, 1.0), 1e-15);
    }
    EXPECT_EQ(m.w[15], 1.0);
}

TEST(DeriveOmega, QuantilesMatchGradientQuantiles) {
    const GradientField g = random_field(16, 16, 77);
    const double a = 0.02;
    const int n_w = 4;
    const SoftMask m = derive_omega(g, a, n_w);

    std::vector<double> mags(g.size()), ws = m.w;
    for (std::size_t i = 0; i < g.size(); ++i) mags[i] = std::hypot(g.gx[i], g.gy[i]);
    std::vector<double> mags_sorted = mags;
    std::sort(mags_sorted.begin(), mags_sorted.end());
    std::sort(ws.begin(), ws.end());

    // sort-based oracle: at every level the mask quantile is the image of the
    // magnitude quantile under the rank ramp
    const std::size_t N = g.size();
    for (int nlev = 1; nlev <= n_w; ++nlev) {
        const double q = nlev * a;
        const std::size_t k = static_cast<std::size_t>(std::ceil(q * N));
        const double t = mags_sorted[k - 1];
        const double T = ws[k - 1];
        const auto rank = std::upper_bound(mags_sorted.begin(), mags_sorted.end(), t) -
                          mags_sorted.begin();
        const double expected =
            std::clamp((static_cast<double>(rank) / N - a) / (1.0 - 2.0 * a), 0.0, 1.0);
        EXPECT_DOUBLE_EQ(T, expected);
    }
}

TEST(PoissonFuse, OmegaZeroReturnsLow) {
    const DepthMap low = random_map(8, 8, 1, 1.0, 2.0);
    const DepthMap high = random_map(8, 8, 2, 1.0, 2.0);
    SoftMask omega(8, 8, 0.0);
    const FusionResult r = poisson_fuse(low, high, omega, FusionParams{});
    EXPECT_TRUE(r.converged);
    EXPECT_LT(max_abs_diff(r.depth, low), 1e-6);
}

TEST(PoissonFuse, OmegaOneWithAnchorReturnsShiftedHigh) {
    const DepthMap low = random_map(8, 8, 3, 1.0, 2.0);
    const DepthMap high = random_map(8, 8, 4, 1.0, 2.0);
    SoftMask omega(8, 8, 1.0);
    FusionParams p;
    p.cg_tol = 1e-12;
    const FusionResult r = poisson_fuse(low, high, omega, p);
    double mlow = 0.0, mhigh = 0.0;
    for (std::size_t i = 0; i < low.size(); ++i) { mlow += low.values[i]; mhigh += high.values[i]; }
    mlow /= low.size(); mhigh /= high.size();
    DepthMap expect = high;
    for (auto& v : expect.values) v += mlow - mhigh;
    EXPECT_LT(max_abs_diff(r.depth, expect), 1e-6);
}

TEST(PoissonFuse, SingularWithoutAnchorThrows) {
    const DepthMap low = random_map(4, 4, 5);
    const DepthMap high = random_map(4, 4, 6);
    SoftMask omega(4, 4, 1.0);
    FusionParams p;
    p.mean_anchor = false;
    EXPECT_THROW(poisson_fuse(low, high, omega, p), std::runtime_error);
}

TEST(PoissonFuse, NonConvergedRunIsFlaggedButReturned) {
    const DepthMap low = random_map(16, 16, 7, 1.0, 5.0);
    const DepthMap high = random_map(16, 16, 8, 1.0, 5.0);
    FusionParams p;
    p.cg_tol = 1e-14;
    p.cg_max_iters = 2;
    const FusionResult r = poisson_fuse(low, high, random_mask(16, 16, 9), p);
    EXPECT_FALSE(r.converged);
    EXPECT_EQ(r.iters, 2);
}

// 2x2 system with omega = 0.5 everywhere, unit weights, mean anchor:
// low = [1,2,3,4], high = [2,1,4,3] (row-major). Solving the 4x4 normal
// equations by hand gives exactly [5/3, 4/3, 11/3, 10/3].
TEST(DirectOracle, HandSolvedTwoByTwoSystem) {
    DepthMap low(2, 2), high(2, 2);
    low.values = {1, 2, 3, 4};
    high.values = {2, 1, 4, 3};
    SoftMask omega(2, 2, 0.5);
    const DepthMap x = direct_solve_oracle(low, high, omega, FusionParams{});
    EXPECT_NEAR(x.values[0], 5.0 / 3.0, 1e-12);
    EXPECT_NEAR(x.values[1], 4.0 / 3.0, 1e-12);
    EXPECT_NEAR(x.values[2], 11.0 / 3.0, 1e-12);
    EXPECT_NEAR(x.values[3], 10.0 / 3.0, 1e-12);
}

TEST(DirectOracle, OmegaZeroReturnsLowExactly) {
    const DepthMap low = random_map(6, 6, 10, 1.0, 2.0);
    const DepthMap high = random_map(6, 6, 11, 1.0, 2.0);
    SoftMask omega(6, 6, 0.0);
    const DepthMap x = direct_solve_oracle(low, high, omega, FusionParams{});
    EXPECT_LT(max_abs_diff(x, low), 1e-12);
}

TEST(PoissonFuse, AgreesWithDenseOracle) {
    FusionParams p;
    p.cg_tol = 1e-12;
    for (int trial = 0; trial < 50; ++trial) {
        const DepthMap low = random_map(8, 8, 1000 + trial, 1.0, 3.0);
        const DepthMap high = random_map(8, 8, 2000 + trial, 1.0, 3.0);
        const SoftMask omega = random_mask(8, 8, 3000 + trial);
        const FusionResult it = poisson_fuse(low, high, omega, p);
        const DepthMap direct = direct_solve_oracle(low, high, omega, p);
        EXPECT_LT(max_abs_diff(it.depth, direct), 1e-6) << "instance " << trial;
    }
}

TEST(Refine, ZeroGuideBlendsEqually) {
    const DepthMap low = random_map(8, 8, 20, 1.0, 2.0);
    const DepthMap high = random_map(8, 8, 21, 1.0, 2.0);
    GradientField guide(8, 8);
    FusionParams p;
    p.cg_tol = 1e-12;
    const FusionResult r = refine(low, high, guide, p, 0.02, 4);
    for (const double v : r.omega.w) EXPECT_EQ(v, 0.5);
    SoftMask half(8, 8, 0.5);
    const DepthMap direct = direct_solve_oracle(low, high, half, p);
    EXPECT_LT(max_abs_diff(r.depth, direct), 1e-6);
}

TEST(Refine, ConsistentInputsAreFixedPoint) {
    const DepthMap d = random_map(10, 10, 30, 1.0, 4.0);
    for (const double fill : {0.0, 0.3, 1.0}) {
        SoftMask omega(10, 10, fill);
        const FusionResult r = poisson_fuse(d, d, omega, FusionParams{});
        double dn = 0.0;
        for (const double v : d.values) dn = std::max(dn, std::abs(v));
        EXPECT_LE(max_abs_diff(r.depth, d), 1e-8 * dn * 10.0);
    }
}

TEST(Refine, StepEdgeSharpnessTracksHighInput) {
    // low: blurred step; high: sharp step with an affine offset
    const int w = 32, h = 16;
    DepthMap low(w, h), high(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double t = (x - 14.0) / 4.0;
            low.at(x, y) = 2.0 + 1.0 / (1.0 + std::exp(-t));
            const double sharp = x < 16 ? 2.0 : 3.0;
            high.at(x, y) = 1.5 * sharp - 0.5;
        }
    const GradientField guide = gradient(high);
    FusionParams p;
    const FusionResult r = refine(low, high, guide, p, 0.02, 4);

    auto peak_gx = [](const DepthMap& d) {
        const GradientField g = gradient(d);
        double m = 0.0;
        for (const double v : g.gx) m = std::max(m, std::abs(v));
        return m;
    };
    const double sharp_peak = peak_gx(high);
    EXPECT_NEAR(peak_gx(r.depth), sharp_peak, 0.05 * sharp_peak);
}

TEST(PoissonFuse, InterpolationMonotonicity) {
    for (int trial = 0; trial < 8; ++trial) {
        const DepthMap low = random_map(8, 8, 400 + trial, 1.0, 3.0);
        const DepthMap high = random_map(8, 8, 500 + trial, 1.0, 3.0);
        const GradientField gh = gradient(high);
        FusionParams p;
        p.cg_tol = 1e-12;
        double prev_value_err = -1.0, prev_grad_err = -1.0;
        bool first = true;
        for (const double level : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            SoftMask omega(8, 8, level);
            const FusionResult r = poisson_fuse(low, high, omega, p);
            double verr = 0.0, gerr = 0.0;
            for (std::size_t i = 0; i < low.size(); ++i) {
                const double dv = r.depth.values[i] - low.values[i];
                verr += dv * dv;
            }
            const GradientField gd = gradient(r.depth);
            for (std::size_t i = 0; i < gd.size(); ++i) {
                const double ex = gd.gx[i] - gh.gx[i];
                const double ey = gd.gy[i] - gh.gy[i];
                gerr += ex * ex + ey * ey;
            }
            if (!first) {
                EXPECT_GE(verr, prev_value_err - 1e-9);
                EXPECT_LE(gerr, prev_grad_err + 1e-9);
            }
            prev_value_err = verr;
            prev_grad_err = gerr;
            first = false;
        }
    }
}

TEST(PoissonFuse, DeterministicAcrossRuns) {
    const DepthMap low = random_map(12, 12, 600, 1.0, 3.0);
    const DepthMap high = random_map(12, 12, 601, 1.0, 3.0);
    const SoftMask omega = random_mask(12, 12, 602);
    const FusionResult a = poisson_fuse(low, high, omega, FusionParams{});
    const FusionResult b = poisson_fuse(low, high, omega, FusionParams{});
    EXPECT_EQ(a.iters, b.iters);
    for (std::size_t i = 0; i < a.depth.size(); ++i)
        EXPECT_EQ(a.depth.values[i], b.depth.values[i]);
}

TEST(PoissonFuse, EnergyNonIncreasingPerIteration) {
    const DepthMap low = random_map(10, 10, 700, 1.0, 3.0);
    const DepthMap high = random_map(10, 10, 701, 1.0, 3.0);
    const SoftMask omega = random_mask(10, 10, 702);
    std::vector<double> energy;
    poisson_fuse(low, high, omega, FusionParams{}, &energy);
    ASSERT_GT(energy.size(), 2u);
    for (std::size_t i = 1; i < energy.size(); ++i)
        EXPECT_LE(energy[i], energy[i - 1] + 1e-10 * (1.0 + std::abs(energy[i - 1])));
}
