#pragma once

// Refinement as a screened gradient-domain fusion: blend a structure-bearing
// depth (value fidelity where the soft mask is low) with a detail-bearing
// depth (gradient fidelity where the mask is high), solved by Jacobi
// preconditioned conjugate gradient on the normal equations.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "depthfuse/core.hpp"

namespace dfuse {

struct FusionParams {
    double lambda_value = 1.0;   // weight of the value-matching term on 1-mask
    double lambda_grad = 1.0;    // weight of the gradient-matching term on mask
    double cg_tol = 1e-8;        // relative residual tolerance
    int cg_max_iters = 0;        // 0 = auto (10 x long image side)
    bool mean_anchor = true;     // pin mean(D) to mean(low)
};

inline void validate(const FusionParams& p) {
    if (!(p.lambda_value > 0.0) || !(p.lambda_grad > 0.0))
        throw std::invalid_argument("FusionParams: weights must be positive");
    if (!(p.cg_tol > 0.0 && p.cg_tol < 1.0))
        throw std::invalid_argument("FusionParams: cg_tol must be in (0,1)");
    if (p.cg_max_iters < 0)
        throw std::invalid_argument("FusionParams: cg_max_iters must be >= 0");
}

struct FusionResult {
    DepthMap depth;
    SoftMask omega;
    int iters = 0;
    double residual = 0.0;
    bool converged = false;
};

/// Soft region mask distribution-synchronized with the gradient magnitude:
/// the normalized rank of |g| mapped through a ramp that clamps the lowest
/// quantile fraction `a` to 0 and the highest to 1. A constant-magnitude
/// field carries no edge evidence and yields the degenerate mask 0.5.
inline SoftMask derive_omega(const GradientField& g, double a, int n_w) {
    if (!(a > 0.0) || n_w < 1 || !(n_w * a < 0.5))
        throw std::invalid_argument("derive_omega: need 0 < a and n_w*a < 0.5");
    const std::size_t n = g.size();
    std::vector<double> mag(n);
    for (std::size_t i = 0; i < n; ++i) mag[i] = std::hypot(g.gx[i], g.gy[i]);

    SoftMask omega(g.width, g.height);
    const auto [mn, mx] = std::minmax_element(mag.begin(), mag.end());
    if (*mn == *mx) {
        std::fill(omega.w.begin(), omega.w.end(), 0.5);
        return omega;
    }
    std::vector<double> sorted = mag;
    std::sort(sorted.begin(), sorted.end());
    const double denom = 1.0 - 2.0 * a;
    for (std::size_t i = 0; i < n; ++i) {
        const auto rank = std::upper_bound(sorted.begin(), sorted.end(), mag[i]) - sorted.begin();
        const double u = static_cast<double>(rank) / static_cast<double>(n);
        omega.w[i] = std::clamp((u - a) / denom, 0.0, 1.0);
    }
    return omega;
}

namespace detail {

// Quadratic system of the fusion objective
//   sum_i lv*(1-m_i)*(D_i - low_i)^2
// + sum_e lg*m_e*((D_q - D_p) - (high_q - high_p))^2,  m_e = (m_p + m_q)/2
// + [anchor] lv/N * (sum_i (D_i - low_i))^2
// Edges with an invalid high difference and pixels with invalid low drop out.
struct FusionSystem {
    int width = 0, height = 0;
    std::vector<double> value_w;    // lv*(1-m_i), zero where low invalid
    std::vector<double> value_tgt;  // low values
    std::vector<double> wx, wy;     // edge weights (structural entries zero)
    std::vector<double> tx, ty;     // edge gradient targets
    double anchor_w = 0.0;          // lv/N, zero when anchor off
    double anchor_tgt = 0.0;        // sum of anchored low values

    std::size_t n() const { return value_w.size(); }

    void apply(const std::vector<double>& x, std::vector<double>& y) const {
        const std::size_t N = n();
        for (std::size_t i = 0; i < N; ++i) y[i] = value_w[i] * x[i];
        for (int yy = 0; yy < height; ++yy)
            for (int xx = 0; xx < width; ++xx) {
                const std::size_t i = static_cast<std::size_t>(yy) * width + xx;
                if (xx + 1 < width && wx[i] != 0.0) {
                    const double r = wx[i] * (x[i + 1] - x[i]);
                    y[i + 1] += r;
                    y[i] -= r;
                }
                if (yy + 1 < height && wy[i] != 0.0) {
                    const double r = wy[i] * (x[i + width] - x[i]);
                    y[i + width] += r;
                    y[i] -= r;
                }
            }
        if (anchor_w != 0.0) {
            double s = 0.0;
            for (std::size_t i = 0; i < N; ++i) s += x[i];
            const double t = anchor_w * s;
            for (std::size_t i = 0; i < N; ++i) y[i] += t;
        }
    }

    std::vector<double> rhs() const {
        const std::size_t N = n();
        std::vector<double> b(N, 0.0);
        for (std::size_t i = 0; i < N; ++i) b[i] = value_w[i] * value_tgt[i];
        for (int yy = 0; yy < height; ++yy)
            for (int xx = 0; xx < width; ++xx) {
                const std::size_t i = static_cast<std::size_t>(yy) * width + xx;
                if (xx + 1 < width && wx[i] != 0.0) {
                    b[i + 1] += wx[i] * tx[i];
                    b[i] -= wx[i] * tx[i];
                }
                if (yy + 1 < height && wy[i] != 0.0) {
                    b[i + width] += wy[i] * ty[i];
                    b[i] -= wy[i] * ty[i];
                }
            }
        if (anchor_w != 0.0)
            for (std::size_t i = 0; i < N; ++i) b[i] += anchor_w * anchor_tgt;
        return b;
    }

    std::vector<double> jacobi_diag() const {
        const std::size_t N = n();
        std::vector<double> m(N, 0.0);
        for (std::size_t i = 0; i < N; ++i) m[i] = value_w[i] + anchor_w;
        for (int yy = 0; yy < height; ++yy)
            for (int xx = 0; xx < width; ++xx) {
                const std::size_t i = static_cast<std::size_t>(yy) * width + xx;
                if (xx + 1 < width && wx[i] != 0.0) { m[i] += wx[i]; m[i + 1] += wx[i]; }
                if (yy + 1 < height && wy[i] != 0.0) { m[i] += wy[i]; m[i + width] += wy[i]; }
            }
        return m;
    }

    double energy(const std::vector<double>& x) const {
        double e = 0.0;
        for (std::size_t i = 0; i < n(); ++i) {
            const double d = x[i] - value_tgt[i];
            e += value_w[i] * d * d;
        }
        for (int yy = 0; yy < height; ++yy)
            for (int xx = 0; xx < width; ++xx) {
                const std::size_t i = static_cast<std::size_t>(yy) * width + xx;
                if (xx + 1 < width && wx[i] != 0.0) {
                    const double d = (x[i + 1] - x[i]) - tx[i];
                    e += wx[i] * d * d;
                }
                if (yy + 1 < height && wy[i] != 0.0) {
                    const double d = (x[i + width] - x[i]) - ty[i];
                    e += wy[i] * d * d;
                }
            }
        if (anchor_w != 0.0) {
            double s = 0.0;
            for (std::size_t i = 0; i < n(); ++i) s += x[i] - value_tgt[i];
            e += anchor_w * s * s;
        }
        return e;
    }
};

inline FusionSystem build_system(const DepthMap& low, const DepthMap& high,
                                 const SoftMask& omega, const FusionParams& p) {
    validate(p);
    if (low.width != high.width || low.height != high.height ||
        low.width != omega.width || low.height != omega.height)
        throw std::invalid_argument("poisson_fuse: inputs must share a common resolution");

    FusionSystem sys;
    sys.width = low.width;
    sys.height = low.height;
    const std::size_t N = low.size();
    sys.value_w.assign(N, 0.0);
    sys.value_tgt.assign(N, 0.0);
    sys.wx.assign(N, 0.0);
    sys.wy.assign(N, 0.0);
    sys.tx.assign(N, 0.0);
    sys.ty.assign(N, 0.0);

    for (std::size_t i = 0; i < N; ++i) {
        if (!low.valid[i]) continue;
        sys.value_w[i] = p.lambda_value * (1.0 - omega.w[i]);
        sys.value_tgt[i] = low.values[i];
    }
    const GradientField gh = gradient(high);
    for (int y = 0; y < low.height; ++y)
        for (int x = 0; x < low.width; ++x) {
            const std::size_t i = low.idx(x, y);
            if (x + 1 < low.width && gh.gx_valid[i]) {
                sys.wx[i] = p.lambda_grad * 0.5 * (omega.w[i] + omega.w[i + 1]);
                sys.tx[i] = gh.gx[i];
            }
            if (y + 1 < low.height && gh.gy_valid[i]) {
                sys.wy[i] = p.lambda_grad * 0.5 * (omega.w[i] + omega.w[i + low.width]);
                sys.ty[i] = gh.gy[i];
            }
        }

    bool any_value = false;
    for (std::size_t i = 0; i < N; ++i)
        if (sys.value_w[i] > 0.0) { any_value = true; break; }
    if (p.mean_anchor) {
        sys.anchor_w = p.lambda_value / static_cast<double>(N);
        double s = 0.0;
        for (std::size_t i = 0; i < N; ++i) s += low.valid[i] ? low.values[i] : 0.0;
        sys.anchor_tgt = s;
    } else if (!any_value) {
        throw std::runtime_error("poisson_fuse: singular system (no value term and no anchor)");
    }
    return sys;
}

}  // namespace detail

/// Solve the fusion objective for the refined depth. The solve is sequential
/// and deterministic; a non-converged run is flagged but still returned.
/// `energy_log`, when given, records the objective value after every CG
/// iteration (test hook).
inline FusionResult poisson_fuse(const DepthMap& low, const DepthMap& high,
                                 const SoftMask& omega, const FusionParams& p,
                                 std::vector<double>* energy_log = nullptr) {
    const detail::FusionSystem sys = detail::build_system(low, high, omega, p);
    const std::size_t N = sys.n();
    const int max_iters =
        p.cg_max_iters > 0 ? p.cg_max_iters : 10 * std::max(low.width, low.height);

    const std::vector<double> b = sys.rhs();
    const std::vector<double> diag = sys.jacobi_diag();
    std::vector<double> x(low.values);
    for (std::size_t i = 0; i < N; ++i)
        if (!low.valid[i]) x[i] = 0.0;

    std::vector<double> r(N), z(N), q(N), pdir(N);
    sys.apply(x, q);
    double bnorm = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        r[i] = b[i] - q[i];
        bnorm += b[i] * b[i];
    }
    bnorm = std::sqrt(bnorm);

    FusionResult out;
    out.omega = omega;
    int it = 0;
    double rnorm = 0.0;
    for (std::size_t i = 0; i < N; ++i) rnorm += r[i] * r[i];
    rnorm = std::sqrt(rnorm);
    const double stop = p.cg_tol * (bnorm > 0.0 ? bnorm : 1.0);

    double rz = 0.0;
    if (rnorm > stop) {
        for (std::size_t i = 0; i < N; ++i) {
            z[i] = diag[i] > 0.0 ? r[i] / diag[i] : r[i];
            rz += r[i] * z[i];
        }
        pdir = z;
        for (; it < max_iters; ) {
            sys.apply(pdir, q);
            double pq = 0.0;
            for (std::size_t i = 0; i < N; ++i) pq += pdir[i] * q[i];
            if (pq <= 0.0) break;  // numerically semi-definite direction
            const double alpha = rz / pq;
            for (std::size_t i = 0; i < N; ++i) {
                x[i] += alpha * pdir[i];
                r[i] -= alpha * q[i];
            }
            ++it;
            if (energy_log) energy_log->push_back(sys.energy(x));
            rnorm = 0.0;
            for (std::size_t i = 0; i < N; ++i) rnorm += r[i] * r[i];
            rnorm = std::sqrt(rnorm);
            if (rnorm <= stop) break;
            double rz_next = 0.0;
            for (std::size_t i = 0; i < N; ++i) {
                z[i] = diag[i] > 0.0 ? r[i] / diag[i] : r[i];
                rz_next += r[i] * z[i];
            }
            const double beta = rz_next / rz;
            rz = rz_next;
            for (std::size_t i = 0; i < N; ++i) pdir[i] = z[i] + beta * pdir[i];
        }
    }

    out.depth = DepthMap(low.width, low.height);
    out.depth.values = std::move(x);
    out.iters = it;
    out.residual = bnorm > 0.0 ? rnorm / bnorm : rnorm;
    out.converged = out.residual <= p.cg_tol;
    return out;
}

/// The full refinement operator: derive the soft mask from the guide field,
/// then fuse value fidelity (low) against gradient fidelity (high).
inline FusionResult refine(const DepthMap& pred_low, const DepthMap& pred_high,
                           const GradientField& guide, const FusionParams& p,
                           double a, int n_w) {
    if (guide.width != pred_low.width || guide.height != pred_low.height)
        throw std::invalid_argument("refine: guide must be at the common resolution");
    const SoftMask omega = derive_omega(guide, a, n_w);
    return poisson_fuse(pred_low, pred_high, omega, p);
}

}  // namespace dfuse
