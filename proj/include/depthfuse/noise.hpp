#pragma once

// Synthetic degradation model for depth predictions: per-region affine
// perturbations break local structure, a resolution round-trip plus
// edge-band Gaussian bumps deform boundaries. The same families back the
// least-squares degradation fit and the simulated depth predictor.

#include <cstdint>
#include <deque>
#include <random>
#include <stdexcept>
#include <vector>

#include "depthfuse/core.hpp"

namespace dfuse {

struct NoiseSpec {
    int patch_size = 64;        // base grid cell for region splitting
    int patch_overlap = 32;     // kept in the config schema; regions are disjoint
    double scale_sigma = 0.05;  // std of per-region multiplicative perturbation
    double shift_sigma = 0.05;  // std of per-region additive perturbation, depth units
    int edge_blur_long_side = 96;  // downsample target for the edge blur round trip
    int n_gaussians = 500;      // count of position-constrained bumps
    double blob_amp_sigma = 0.1;   // bump amplitude std, depth units
    double blob_sigma_min = 1.0;   // bump radius range, pixels
    double blob_sigma_max = 3.0;
    std::uint64_t seed = 0;
};

inline void validate(const NoiseSpec& s) {
    if (s.patch_size < 8) throw std::invalid_argument("NoiseSpec: patch_size must be >= 8");
    if (s.patch_overlap < 0 || s.patch_overlap >= s.patch_size)
        throw std::invalid_argument("NoiseSpec: need 0 <= patch_overlap < patch_size");
    if (s.scale_sigma < 0.0 || s.shift_sigma < 0.0 || s.blob_amp_sigma < 0.0)
        throw std::invalid_argument("NoiseSpec: sigmas must be >= 0");
    if (s.n_gaussians < 0) throw std::invalid_argument("NoiseSpec: n_gaussians must be >= 0");
    if (s.edge_blur_long_side < 8)
        throw std::invalid_argument("NoiseSpec: edge_blur_long_side must be >= 8");
    if (!(s.blob_sigma_min > 0.0) || s.blob_sigma_max < s.blob_sigma_min)
        throw std::invalid_argument("NoiseSpec: bad blob sigma range");
}

/// Additive degradation fields, same dimensions as the depth they degrade.
struct NoiseField {
    std::vector<double> cons;  // per-region affine part
    std::vector<double> edge;  // blur round-trip plus edge bumps
};

struct GaussianBlob {
    double cx = 0.0, cy = 0.0;
    double sigma = 1.0;
    double amplitude = 0.0;
};

struct NoiseDiag {
    bool single_patch = false;  // patch grid degenerated to one cell
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
    return splitmix64(splitmix64(seed ^ tag) + index);
}

inline double draw_normal(std::mt19937_64& eng) {
    // Box-Muller on explicit uniforms so the stream is fully pinned down
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double u1 = u(eng);
    const double u2 = u(eng);
    if (u1 <= 0.0) u1 = std::numeric_limits<double>::min();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

constexpr std::uint64_t kTagRegion = 0x7265670000000001ULL;
constexpr std::uint64_t kTagBlobPos = 0x626c6f0000000002ULL;
constexpr std::uint64_t kTagBlobPar = 0x626c6f0000000003ULL;
constexpr int kEdgeBandRadius = 3;

}  // namespace detail

/// Depth edge mask: gradient magnitude strictly above its 0.95 lower
/// quantile ("top 5 percent"). A constant map has no edges.
inline std::vector<std::uint8_t> edge_mask(const DepthMap& d) {
    const GradientField g = gradient(d);
    std::vector<double> mag(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) mag[i] = std::hypot(g.gx[i], g.gy[i]);
    const double thr = detail::lower_quantile(mag, 0.95);
    std::vector<std::uint8_t> mask(g.size(), 0);
    for (std::size_t i = 0; i < g.size(); ++i) mask[i] = mag[i] > thr ? 1 : 0;
    return mask;
}

/// Edge-segmented connected components: 4-connected regions of non-edge
/// pixels; edge pixels join the nearest labeled region by breadth-first
/// growth. Returns the label map and the component count.
inline std::pair<std::vector<int>, int> label_components(const DepthMap& d) {
    const std::vector<std::uint8_t> edges = edge_mask(d);
    const int w = d.width, h = d.height;
    std::vector<int> labels(d.size(), -1);
    int next = 0;
    std::deque<std::size_t> queue;

    for (std::size_t s = 0; s < d.size(); ++s) {
        if (edges[s] || labels[s] >= 0) continue;
        labels[s] = next;
        queue.push_back(s);
        while (!queue.empty()) {
            const std::size_t i = queue.front();
            queue.pop_front();
            const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
            const int nx[4] = {x - 1, x + 1, x, x};
            const int ny[4] = {y, y, y - 1, y + 1};
            for (int k = 0; k < 4; ++k) {
                if (nx[k] < 0 || nx[k] >= w || ny[k] < 0 || ny[k] >= h) continue;
                const std::size_t j = static_cast<std::size_t>(ny[k]) * w + nx[k];
                if (edges[j] || labels[j] >= 0) continue;
                labels[j] = next;
                queue.push_back(j);
            }
        }
        ++next;
    }
    if (next == 0) {  // everything flagged as edge: one region
        std::fill(labels.begin(), labels.end(), 0);
        return {labels, 1};
    }
    // attach edge pixels to the first region reached
    for (std::size_t i = 0; i < d.size(); ++i)
        if (labels[i] >= 0) queue.push_back(i);
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop_front();
        const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
        const int nx[4] = {x - 1, x + 1, x, x};
        const int ny[4] = {y, y, y - 1, y + 1};
        for (int k = 0; k < 4; ++k) {
            if (nx[k] < 0 || nx[k] >= w || ny[k] < 0 || ny[k] >= h) continue;
            const std::size_t j = static_cast<std::size_t>(ny[k]) * w + nx[k];
            if (labels[j] >= 0) continue;
            labels[j] = labels[i];
            queue.push_back(j);
        }
    }
    return {labels, next};
}

/// Pixels within a Chebyshev radius of a depth edge; where bump centers live.
inline std::vector<std::uint8_t> edge_band(const DepthMap& d,
                                           int radius = detail::kEdgeBandRadius) {
    const std::vector<std::uint8_t> edges = edge_mask(d);
    const int w = d.width, h = d.height;
    std::vector<std::uint8_t> band(edges.size(), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool hit = false;
            for (int dy = -radius; dy <= radius && !hit; ++dy)
                for (int dx = -radius; dx <= radius && !hit; ++dx) {
                    const int xx = x + dx, yy = y + dy;
                    if (xx < 0 || xx >= w || yy < 0 || yy >= h) continue;
                    if (edges[static_cast<std::size_t>(yy) * w + xx]) hit = true;
                }
            band[static_cast<std::size_t>(y) * w + x] = hit ? 1 : 0;
        }
    return band;
}

namespace detail {

/// Disjoint degradation regions: base patch grid cells intersected with the
/// edge-segmented components. Region ids are stable under a fixed image.
struct RegionMap {
    std::vector<int> region;  // per pixel
    int n_regions = 0;
    bool single_patch = false;
};

inline RegionMap build_regions(const DepthMap& d, const NoiseSpec& spec) {
    auto [labels, n_components] = label_components(d);
    const int cells_x = std::max(1, (d.width + spec.patch_size - 1) / spec.patch_size);
    const int cells_y = std::max(1, (d.height + spec.patch_size - 1) / spec.patch_size);

    RegionMap rm;
    rm.single_patch = cells_x == 1 && cells_y == 1;
    std::vector<int> raw(d.size());
    for (int y = 0; y < d.height; ++y)
        for (int x = 0; x < d.width; ++x) {
            const int cell = (y / spec.patch_size) * cells_x + (x / spec.patch_size);
            raw[d.idx(x, y)] = cell * n_components + labels[d.idx(x, y)];
        }
    // compact to consecutive ids in scan order
    std::vector<int> remap(static_cast<std::size_t>(cells_x) * cells_y * n_components, -1);
    rm.region.resize(d.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (remap[raw[i]] < 0) remap[raw[i]] = rm.n_regions++;
        rm.region[i] = remap[raw[i]];
    }
    return rm;
}

inline void render_blob(std::vector<double>& field, int w, int h, const GaussianBlob& b) {
    const int radius = static_cast<int>(std::ceil(3.5 * b.sigma));
    const int x0 = std::max(0, static_cast<int>(b.cx) - radius);
    const int x1 = std::min(w - 1, static_cast<int>(b.cx) + radius);
    const int y0 = std::max(0, static_cast<int>(b.cy) - radius);
    const int y1 = std::min(h - 1, static_cast<int>(b.cy) + radius);
    const double inv2s = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double r2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
            field[static_cast<std::size_t>(y) * w + x] += b.amplitude * std::exp(-r2 * inv2s);
        }
}

/// Bump centers re-derivable from the seed alone; the fit relies on this.
inline std::vector<std::pair<double, double>> blob_centers(const DepthMap& ideal,
                                                           const NoiseSpec& spec) {
    if (spec.n_gaussians > static_cast<int>(ideal.size()))
        throw std::invalid_argument("synth_edge_deformation: more bumps than pixels");
    const std::vector<std::uint8_t> band = edge_band(ideal);
    std::vector<std::size_t> band_px;
    for (std::size_t i = 0; i < band.size(); ++i)
        if (band[i]) band_px.push_back(i);
    std::vector<std::pair<double, double>> centers;
    if (band_px.empty()) return centers;
    centers.reserve(spec.n_gaussians);
    for (int i = 0; i < spec.n_gaussians; ++i) {
        std::mt19937_64 eng(mix_seed(spec.seed, kTagBlobPos, static_cast<std::uint64_t>(i)));
        std::uniform_int_distribution<std::size_t> pick(0, band_px.size() - 1);
        const std::size_t px = band_px[pick(eng)];
        centers.emplace_back(static_cast<double>(px % ideal.width),
                             static_cast<double>(px / ideal.width));
    }
    return centers;
}

}  // namespace detail

/// Structure-breaking noise: every degradation region receives an
/// independent affine perturbation d -> b1*d + b0 with b1 ~ N(1, scale_sigma)
/// and b0 ~ N(0, shift_sigma). Returned as an additive field.
inline std::vector<double> synth_local_inconsistency(const DepthMap& ideal,
                                                     const NoiseSpec& spec,
                                                     NoiseDiag* diag = nullptr) {
    validate(spec);
    const detail::RegionMap rm = detail::build_regions(ideal, spec);
    if (diag) diag->single_patch = rm.single_patch;

    std::vector<double> b1(rm.n_regions), b0(rm.n_regions);
    for (int r = 0; r < rm.n_regions; ++r) {
        std::mt19937_64 eng(
            detail::mix_seed(spec.seed, detail::kTagRegion, static_cast<std::uint64_t>(r)));
        b1[r] = 1.0 + spec.scale_sigma * detail::draw_normal(eng);
        b0[r] = spec.shift_sigma * detail::draw_normal(eng);
    }
    std::vector<double> field(ideal.size(), 0.0);
    for (std::size_t i = 0; i < ideal.size(); ++i) {
        const int r = rm.region[i];
        field[i] = (b1[r] - 1.0) * ideal.values[i] + b0[r];
    }
    return field;
}

/// Boundary-deforming noise: the residual of a resolution round trip plus
/// position-constrained Gaussian bumps centered in the edge band.
inline std::vector<double> synth_edge_deformation(const DepthMap& ideal, const NoiseSpec& spec) {
    validate(spec);
    std::vector<double> field(ideal.size(), 0.0);

    const auto [bw, bh] = scaled_dims(ideal.width, ideal.height, spec.edge_blur_long_side);
    if (bw != ideal.width || bh != ideal.height) {
        const DepthMap down = resample_to(ideal, bw, bh);
        const DepthMap up = resample_to(down, ideal.width, ideal.height);
        for (std::size_t i = 0; i < field.size(); ++i)
            field[i] = up.values[i] - ideal.values[i];
    }

    const auto centers = detail::blob_centers(ideal, spec);
    for (std::size_t i = 0; i < centers.size(); ++i) {
        std::mt19937_64 eng(
            detail::mix_seed(spec.seed, detail::kTagBlobPar, static_cast<std::uint64_t>(i)));
        GaussianBlob b;
        b.cx = centers[i].first;
        b.cy = centers[i].second;
        std::uniform_real_distribution<double> us(spec.blob_sigma_min, spec.blob_sigma_max);
        b.sigma = us(eng);
        b.amplitude = spec.blob_amp_sigma * detail::draw_normal(eng);
        detail::render_blob(field, ideal.width, ideal.height, b);
    }
    return field;
}

/// Simulated depth predictor: the ideal depth degraded by both noises and
/// emitted at the requested inference resolution. Boundary noise shrinks and
/// structure noise grows with the resolution, reproducing the coarse/fine
/// trade-off of real predictors.
inline DepthMap simulate_predictor(const DepthMap& ideal, const Resolution& res,
                                   const NoiseSpec& spec) {
    validate(spec);
    const double rho = static_cast<double>(res.long_side) / ideal.long_side();
    DepthMap degraded = ideal;
    if (spec.scale_sigma > 0.0 || spec.shift_sigma > 0.0) {
        const std::vector<double> cons = synth_local_inconsistency(ideal, spec);
        for (std::size_t i = 0; i < degraded.size(); ++i)
            degraded.values[i] += rho * cons[i];
    }
    if (spec.n_gaussians > 0 || spec.edge_blur_long_side != ideal.long_side()) {
        const std::vector<double> edge = synth_edge_deformation(ideal, spec);
        for (std::size_t i = 0; i < degraded.size(); ++i)
            degraded.values[i] += edge[i] / rho;
    }
    return resample(degraded, res);
}

/// Mean gradient magnitude over a set of depth maps; the predictor prior
/// used by adaptive resolution adjustment.
inline double compute_alpha(const std::vector<DepthMap>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("compute_alpha: empty corpus");
    double acc = 0.0;
    for (const DepthMap& d : corpus) acc += mean_gradient_magnitude(d);
    return acc / static_cast<double>(corpus.size());
}

struct FitResult {
    NoiseField noise;
    double psnr_db = 0.0;
    double blur_gain = 0.0;              // fitted weight of the blur round trip
    std::vector<GaussianBlob> blobs;     // fitted bump parameters
};

/// Fit the degradation model to an observed degraded map. The affine part is
/// closed-form least squares per region; the bump part is gradient descent
/// on amplitudes and radii at the seed-derived centers. The fitted residual
/// never exceeds the zero-noise hypothesis.
inline FitResult fit_noise(const DepthMap& ideal, const DepthMap& degraded,
                           const NoiseSpec& spec, int iters) {
    validate(spec);
    if (ideal.width != degraded.width || ideal.height != degraded.height)
        throw std::invalid_argument("fit_noise: dimension mismatch");
    std::size_t shared = 0;
    for (std::size_t i = 0; i < ideal.size(); ++i)
        if (ideal.valid[i] && degraded.valid[i]) ++shared;
    if (shared == 0) throw std::invalid_argument("fit_noise: non-overlapping valid masks");

    const int w = ideal.width, h = ideal.height;
    const std::size_t N = ideal.size();
    const detail::RegionMap rm = detail::build_regions(ideal, spec);

    // blur basis
    std::vector<double> blur(N, 0.0);
    const auto [bw, bh] = scaled_dims(w, h, spec.edge_blur_long_side);
    if (bw != w || bh != h) {
        const DepthMap up = resample_to(resample_to(ideal, bw, bh), w, h);
        for (std::size_t i = 0; i < N; ++i) blur[i] = up.values[i] - ideal.values[i];
    }

    // bump skeleton from the shared seed; amplitudes start at zero
    const auto centers = detail::blob_centers(ideal, spec);
    std::vector<GaussianBlob> blobs(centers.size());
    for (std::size_t i = 0; i < blobs.size(); ++i) {
        blobs[i].cx = centers[i].first;
        blobs[i].cy = centers[i].second;
        blobs[i].sigma = 0.5 * (spec.blob_sigma_min + spec.blob_sigma_max);
        blobs[i].amplitude = 0.0;
    }

    std::vector<double> cons(N, 0.0);
    double gamma = 0.0;
    std::vector<double> blob_field(N, 0.0);

    auto render_blobs = [&](std::vector<double>& f) {
        std::fill(f.begin(), f.end(), 0.0);
        for (const GaussianBlob& b : blobs)
            if (b.amplitude != 0.0) detail::render_blob(f, w, h, b);
    };
    auto sse = [&]() {
        double e = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            if (!ideal.valid[i] || !degraded.valid[i]) continue;
            const double r = degraded.values[i] -
                             (ideal.values[i] + cons[i] + gamma * blur[i] + blob_field[i]);
            e += r * r;
        }
        return e;
    };

    const int rounds = 3;
    const int steps_per_round = std::max(1, iters / rounds);

    for (int round = 0; round < rounds; ++round) {
        // per-region closed-form affine fit against the remaining residual
        {
            std::vector<double> sx(rm.n_regions, 0.0), sy(rm.n_regions, 0.0),
                sxx(rm.n_regions, 0.0), sxy(rm.n_regions, 0.0);
            std::vector<std::size_t> cnt(rm.n_regions, 0);
            for (std::size_t i = 0; i < N; ++i) {
                if (!ideal.valid[i] || !degraded.valid[i]) continue;
                const int r = rm.region[i];
                const double xs = ideal.values[i];
                const double ys = degraded.values[i] - gamma * blur[i] - blob_field[i];
                sx[r] += xs;
                sy[r] += ys;
                sxx[r] += xs * xs;
                sxy[r] += xs * ys;
                ++cnt[r];
            }
            std::vector<double> b1(rm.n_regions, 1.0), b0(rm.n_regions, 0.0);
            for (int r = 0; r < rm.n_regions; ++r) {
                if (cnt[r] == 0) continue;
                const double n = static_cast<double>(cnt[r]);
                const double var = sxx[r] - sx[r] * sx[r] / n;
                if (var / n < 1e-12) {
                    b1[r] = 1.0;
                    b0[r] = (sy[r] - sx[r]) / n;
                } else {
                    b1[r] = (sxy[r] - sx[r] * sy[r] / n) / var;
                    b0[r] = (sy[r] - b1[r] * sx[r]) / n;
                }
            }
            for (std::size_t i = 0; i < N; ++i) {
                const int r = rm.region[i];
                cons[i] = (b1[r] - 1.0) * ideal.values[i] + b0[r];
            }
        }
        // one-dimensional least squares for the blur gain
        {
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < N; ++i) {
                if (!ideal.valid[i] || !degraded.valid[i]) continue;
                const double r = degraded.values[i] - ideal.values[i] - cons[i] - blob_field[i];
                num += r * blur[i];
                den += blur[i] * blur[i];
            }
            gamma = den > 1e-300 ? num / den : 0.0;
        }
        // bump fit: Adam on (amplitude, sigma), reverted if it regresses
        if (!blobs.empty() && iters > 0) {
            const double before = sse();
            const std::vector<GaussianBlob> snapshot = blobs;
            std::vector<double> target(N);
            for (std::size_t i = 0; i < N; ++i)
                target[i] = degraded.values[i] - ideal.values[i] - cons[i] - gamma * blur[i];

            std::vector<double> ma(blobs.size(), 0.0), va(blobs.size(), 0.0),
                ms(blobs.size(), 0.0), vs(blobs.size(), 0.0);
            const double lr = 0.05, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
            std::vector<double> err(N);
            for (int step = 1; step <= steps_per_round; ++step) {
                render_blobs(blob_field);
                for (std::size_t i = 0; i < N; ++i) err[i] = blob_field[i] - target[i];
                for (std::size_t bi = 0; bi < blobs.size(); ++bi) {
                    GaussianBlob& b = blobs[bi];
                    const int radius = static_cast<int>(std::ceil(3.5 * b.sigma));
                    const int x0 = std::max(0, static_cast<int>(b.cx) - radius);
                    const int x1 = std::min(w - 1, static_cast<int>(b.cx) + radius);
                    const int y0 = std::max(0, static_cast<int>(b.cy) - radius);
                    const int y1 = std::min(h - 1, static_cast<int>(b.cy) + radius);
                    const double inv2s = 1.0 / (2.0 * b.sigma * b.sigma);
                    double ga = 0.0, gs = 0.0;
                    for (int y = y0; y <= y1; ++y)
                        for (int x = x0; x <= x1; ++x) {
                            const std::size_t i = static_cast<std::size_t>(y) * w + x;
                            if (!ideal.valid[i] || !degraded.valid[i]) continue;
                            const double r2 =
                                (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
                            const double g = std::exp(-r2 * inv2s);
                            ga += 2.0 * err[i] * g;
                            gs += 2.0 * err[i] * b.amplitude * g * r2 /
                                  (b.sigma * b.sigma * b.sigma);
                        }
                    auto adam = [&](double& p, double& m, double& v, double grad, double lo,
                                    double hi) {
                        m = beta1 * m + (1.0 - beta1) * grad;
                        v = beta2 * v + (1.0 - beta2) * grad * grad;
                        const double mh = m / (1.0 - std::pow(beta1, step));
                        const double vh = v / (1.0 - std::pow(beta2, step));
                        p = std::clamp(p - lr * mh / (std::sqrt(vh) + eps), lo, hi);
                    };
                    adam(b.amplitude, ma[bi], va[bi], ga, -1e6, 1e6);
                    adam(b.sigma, ms[bi], vs[bi], gs, 0.5, 8.0);
                }
            }
            render_blobs(blob_field);
            if (sse() > before) {
                blobs = snapshot;
                render_blobs(blob_field);
            }
        }
    }

    FitResult out;
    out.blur_gain = gamma;
    out.blobs = blobs;
    out.noise.cons = std::move(cons);
    out.noise.edge.resize(N);
    for (std::size_t i = 0; i < N; ++i)
        out.noise.edge[i] = gamma * blur[i] + blob_field[i];

    DepthMap fitted = ideal;
    for (std::size_t i = 0; i < N; ++i)
        fitted.values[i] = ideal.values[i] + out.noise.cons[i] + out.noise.edge[i];
    out.psnr_db = psnr(degraded, fitted);
    return out;
}

}  // namespace dfuse
