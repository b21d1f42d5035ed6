#pragma once

// Dense cross-check for the iterative fusion solver: assembles the same
// normal equations explicitly and solves them by factorization. Intended for
// small instances (tests and debugging), capped at 4096 pixels.

#include <Eigen/Dense>

#include "depthfuse/fusion.hpp"

namespace dfuse {

inline DepthMap direct_solve_oracle(const DepthMap& low, const DepthMap& high,
                                    const SoftMask& omega, const FusionParams& p) {
    const detail::FusionSystem sys = detail::build_system(low, high, omega, p);
    const std::size_t N = sys.n();
    if (N > 4096)
        throw std::invalid_argument("direct_solve_oracle: pixel count exceeds 4096");

    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(N, N);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(N);
    for (std::size_t i = 0; i < N; ++i) {
        A(i, i) += sys.value_w[i];
        b(i) += sys.value_w[i] * sys.value_tgt[i];
    }
    const int w = sys.width, h = sys.height;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (x + 1 < w && sys.wx[i] != 0.0) {
                const std::size_t j = i + 1;
                A(i, i) += sys.wx[i];
                A(j, j) += sys.wx[i];
                A(i, j) -= sys.wx[i];
                A(j, i) -= sys.wx[i];
                b(i) -= sys.wx[i] * sys.tx[i];
                b(j) += sys.wx[i] * sys.tx[i];
            }
            if (y + 1 < h && sys.wy[i] != 0.0) {
                const std::size_t j = i + w;
                A(i, i) += sys.wy[i];
                A(j, j) += sys.wy[i];
                A(i, j) -= sys.wy[i];
                A(j, i) -= sys.wy[i];
                b(i) -= sys.wy[i] * sys.ty[i];
                b(j) += sys.wy[i] * sys.ty[i];
            }
        }
    if (sys.anchor_w != 0.0) {
        A.array() += sys.anchor_w;
        b.array() += sys.anchor_w * sys.anchor_tgt;
    }

    const Eigen::VectorXd x = A.ldlt().solve(b);
    DepthMap out(low.width, low.height);
    for (std::size_t i = 0; i < N; ++i) out.values[i] = x(i);
    return out;
}

}  // namespace dfuse
