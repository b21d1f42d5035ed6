#pragma once

// Core domain types for gradient-domain depth refinement: scalar depth maps
// with validity masks, forward-difference gradient fields, soft region masks,
// and the resampling / filtering primitives everything else builds on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfuse {

/// Single-channel scalar depth field with a per-pixel validity mask.
/// Invalid pixels are excluded from every statistic and loss.
struct DepthMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;        // row-major, values[y*width + x]
    std::vector<std::uint8_t> valid;   // 1 = valid

    DepthMap() = default;
    DepthMap(int w, int h, double fill = 0.0)
        : width(w), height(h),
          values(static_cast<std::size_t>(w) * h, fill),
          valid(static_cast<std::size_t>(w) * h, 1) {
        if (w < 2 || h < 2)
            throw std::invalid_argument("DepthMap: dimensions must be >= 2");
    }

    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
    double at(int x, int y) const { return values[idx(x, y)]; }
    double& at(int x, int y) { return values[idx(x, y)]; }
    bool is_valid(int x, int y) const { return valid[idx(x, y)] != 0; }
    std::size_t size() const { return values.size(); }

    int long_side() const { return std::max(width, height); }

    double max_valid() const {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < values.size(); ++i)
            if (valid[i]) m = std::max(m, values[i]);
        return m;
    }
};

/// Two-channel forward-difference field. gx[y*w+x] = d(x+1,y) - d(x,y),
/// gy[y*w+x] = d(x,y+1) - d(x,y). The last column of gx and last row of gy
/// carry no difference and are zero by convention. Entries derived from an
/// invalid pixel are zero and flagged invalid.
struct GradientField {
    int width = 0;
    int height = 0;
    std::vector<double> gx, gy;
    std::vector<std::uint8_t> gx_valid, gy_valid;

    GradientField() = default;
    GradientField(int w, int h)
        : width(w), height(h),
          gx(static_cast<std::size_t>(w) * h, 0.0),
          gy(static_cast<std::size_t>(w) * h, 0.0),
          gx_valid(static_cast<std::size_t>(w) * h, 1),
          gy_valid(static_cast<std::size_t>(w) * h, 1) {}

    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
    std::size_t size() const { return gx.size(); }

    /// Per-pixel gradient magnitude sqrt(gx^2 + gy^2).
    double magnitude(int x, int y) const {
        const std::size_t i = idx(x, y);
        return std::hypot(gx[i], gy[i]);
    }

    /// True for entries that carry no forward difference (last column of gx,
    /// last row of gy). These stay zero and are skipped by alignment fits.
    bool structural_x(int x) const { return x == width - 1; }
    bool structural_y(int y) const { return y == height - 1; }
};

/// Per-pixel weight in [0,1] splitting the image into gradient-fidelity
/// (towards 1) and value-fidelity (towards 0) regions.
struct SoftMask {
    int width = 0;
    int height = 0;
    std::vector<double> w;

    SoftMask() = default;
    SoftMask(int width_, int height_, double fill = 0.0)
        : width(width_), height(height_),
          w(static_cast<std::size_t>(width_) * height_, fill) {}

    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
};

/// Target resolution expressed as the length of the longer image side.
/// Aspect ratio is always preserved on resampling.
struct Resolution {
    int long_side = 0;

    Resolution() = default;
    explicit Resolution(int ls) : long_side(ls) {
        if (ls < 32) throw std::invalid_argument("Resolution: long_side must be >= 32");
    }
};

/// Half-open pixel rectangle [x0,x1) x [y0,y1).
struct Rect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

inline void check_rect(const Rect& r, int width, int height) {
    if (r.x0 < 0 || r.x0 >= r.x1 || r.x1 > width || r.y0 < 0 || r.y0 >= r.y1 || r.y1 > height)
        throw std::invalid_argument("Rect: out of bounds or empty");
}

namespace detail {

/// Closed-form two-parameter least squares: argmin ||b1*src + b0 - tgt||^2.
/// Returns {b1, b0, degenerate}. Degenerate (variance of src below 1e-12, or
/// a non-positive slope) falls back to b1 = 1, b0 = mean(tgt - src).
struct AffineFit {
    double b1 = 1.0;
    double b0 = 0.0;
    bool degenerate = false;
};

inline AffineFit fit_affine(const std::vector<double>& src, const std::vector<double>& tgt) {
    if (src.size() != tgt.size() || src.size() < 2)
        throw std::invalid_argument("fit_affine: need >= 2 paired entries");
    const double n = static_cast<double>(src.size());
    double ms = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) { ms += src[i]; mt += tgt[i]; }
    ms /= n; mt /= n;
    double var = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        var += (src[i] - ms) * (src[i] - ms);
        cov += (src[i] - ms) * (tgt[i] - mt);
    }
    AffineFit f;
    if (var / n < 1e-12) {
        f.b1 = 1.0;
        f.b0 = mt - ms;
        f.degenerate = true;
        return f;
    }
    f.b1 = cov / var;
    f.b0 = mt - f.b1 * ms;
    if (!(f.b1 > 0.0)) f.degenerate = true;  // flagged, coefficients kept
    return f;
}

/// Lower empirical quantile: the ceil(q*N)-th smallest value (1-indexed),
/// no interpolation.
inline double lower_quantile(std::vector<double> vals, double q) {
    if (vals.empty()) throw std::invalid_argument("lower_quantile: empty set");
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("lower_quantile: q must be in (0,1)");
    const std::size_t n = vals.size();
    std::size_t k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
    k = std::min(std::max<std::size_t>(k, 1), n);
    std::nth_element(vals.begin(), vals.begin() + (k - 1), vals.end());
    return vals[k - 1];
}

}  // namespace detail

/// Forward-difference gradient of a depth map.
inline GradientField gradient(const DepthMap& d) {
    GradientField g(d.width, d.height);
    for (int y = 0; y < d.height; ++y) {
        for (int x = 0; x < d.width; ++x) {
            const std::size_t i = d.idx(x, y);
            if (x + 1 < d.width) {
                if (d.valid[i] && d.valid[d.idx(x + 1, y)]) {
                    g.gx[i] = d.values[d.idx(x + 1, y)] - d.values[i];
                } else {
                    g.gx[i] = 0.0;
                    g.gx_valid[i] = 0;
                }
            }
            if (y + 1 < d.height) {
                if (d.valid[i] && d.valid[d.idx(x, y + 1)]) {
                    g.gy[i] = d.values[d.idx(x, y + 1)] - d.values[i];
                } else {
                    g.gy[i] = 0.0;
                    g.gy_valid[i] = 0;
                }
            }
        }
    }
    return g;
}

/// Edge-preserving bilateral filter, applied per channel with a truncated
/// spatial window of radius ceil(3*sigma_spatial). Output values are convex
/// combinations of inputs, so the per-channel range never grows.
inline GradientField bilateral_filter(const GradientField& g, double sigma_spatial,
                                      double sigma_range) {
    if (!(sigma_spatial > 0.0) || !(sigma_range > 0.0))
        throw std::invalid_argument("bilateral_filter: sigmas must be positive");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma_spatial));
    const double inv2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    const double inv2sr = 1.0 / (2.0 * sigma_range * sigma_range);

    std::vector<double> spatial((2 * radius + 1) * (2 * radius + 1));
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            spatial[(dy + radius) * (2 * radius + 1) + (dx + radius)] =
                std::exp(-(dx * dx + dy * dy) * inv2ss);

    GradientField out = g;
    auto run_channel = [&](const std::vector<double>& src, const std::vector<std::uint8_t>& mask,
                           std::vector<double>& dst) {
        for (int y = 0; y < g.height; ++y) {
            for (int x = 0; x < g.width; ++x) {
                const std::size_t i = g.idx(x, y);
                if (!mask[i]) continue;
                const double center = src[i];
                double acc = 0.0, wsum = 0.0;
                for (int dy = -radius; dy <= radius; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= g.height) continue;
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= g.width) continue;
                        const std::size_t j = g.idx(xx, yy);
                        if (!mask[j]) continue;
                        const double dv = src[j] - center;
                        const double w = spatial[(dy + radius) * (2 * radius + 1) + (dx + radius)] *
                                         std::exp(-dv * dv * inv2sr);
                        acc += w * src[j];
                        wsum += w;
                    }
                }
                dst[i] = acc / wsum;  // wsum >= center weight > 0
            }
        }
    };
    run_channel(g.gx, g.gx_valid, out.gx);
    run_channel(g.gy, g.gy_valid, out.gy);
    return out;
}

/// Bilinear resampling to explicit dimensions. Grid endpoints map onto each
/// other, so identical dimensions reproduce the input bit-for-bit and integer
/// super-sampling round-trips exactly. Validity is conservative: an output
/// pixel is valid only if every contributing source pixel is valid.
inline DepthMap resample_to(const DepthMap& d, int out_w, int out_h) {
    if (out_w < 2 || out_h < 2)
        throw std::invalid_argument("resample_to: target smaller than 2 pixels on a side");
    if (out_w == d.width && out_h == d.height) return d;

    DepthMap out(out_w, out_h);
    const double sx = static_cast<double>(d.width - 1) / static_cast<double>(out_w - 1);
    const double sy = static_cast<double>(d.height - 1) / static_cast<double>(out_h - 1);
    for (int y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        int y0 = static_cast<int>(std::floor(fy));
        if (y0 >= d.height - 1) y0 = d.height - 2;
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            int x0 = static_cast<int>(std::floor(fx));
            if (x0 >= d.width - 1) x0 = d.width - 2;
            const double wx = fx - x0;

            const double w00 = (1.0 - wx) * (1.0 - wy);
            const double w10 = wx * (1.0 - wy);
            const double w01 = (1.0 - wx) * wy;
            const double w11 = wx * wy;
            const std::size_t i = out.idx(x, y);

            bool ok = true;
            double v = 0.0;
            auto tap = [&](int xx, int yy, double w) {
                if (w == 0.0) return;
                if (!d.is_valid(xx, yy)) { ok = false; return; }
                v += w * d.at(xx, yy);
            };
            tap(x0, y0, w00);
            tap(x0 + 1, y0, w10);
            tap(x0, y0 + 1, w01);
            tap(x0 + 1, y0 + 1, w11);
            if (ok) {
                out.values[i] = v;
            } else {
                out.values[i] = 0.0;
                out.valid[i] = 0;
            }
        }
    }
    return out;
}

/// Dimensions an image takes when resized so its long side equals the target,
/// preserving aspect ratio.
inline std::pair<int, int> scaled_dims(int w, int h, int target_long) {
    if (w >= h) {
        int nh = static_cast<int>(std::lround(static_cast<double>(h) * target_long / w));
        return {target_long, std::max(nh, 2)};
    }
    int nw = static_cast<int>(std::lround(static_cast<double>(w) * target_long / h));
    return {std::max(nw, 2), target_long};
}

/// Bilinear resampling so the long side equals target.long_side.
inline DepthMap resample(const DepthMap& d, const Resolution& target) {
    auto [nw, nh] = scaled_dims(d.width, d.height, target.long_side);
    return resample_to(d, nw, nh);
}

/// Peak signal-to-noise ratio over the shared valid pixels, in decibels.
/// Peak defaults to the maximum valid value of the reference `a`. Zero MSE
/// reports +infinity.
inline double psnr(const DepthMap& a, const DepthMap& b, double peak_override = 0.0) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("psnr: dimension mismatch");
    double mse = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a.valid[i] || !b.valid[i]) continue;
        const double e = a.values[i] - b.values[i];
        mse += e * e;
        ++n;
    }
    if (n == 0) throw std::invalid_argument("psnr: no shared valid pixels");
    mse /= static_cast<double>(n);
    const double peak = peak_override > 0.0 ? peak_override : a.max_valid();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

/// Crop a depth map to a rectangle.
inline DepthMap crop(const DepthMap& d, const Rect& r) {
    check_rect(r, d.width, d.height);
    DepthMap out(r.width(), r.height());
    for (int y = 0; y < r.height(); ++y)
        for (int x = 0; x < r.width(); ++x) {
            out.values[out.idx(x, y)] = d.at(r.x0 + x, r.y0 + y);
            out.valid[out.idx(x, y)] = d.valid[d.idx(r.x0 + x, r.y0 + y)];
        }
    return out;
}

/// Crop a gradient field to a rectangle. Entries that cross the crop border
/// lose their forward difference and become structural zeros.
inline GradientField crop(const GradientField& g, const Rect& r) {
    check_rect(r, g.width, g.height);
    GradientField out(r.width(), r.height());
    for (int y = 0; y < r.height(); ++y)
        for (int x = 0; x < r.width(); ++x) {
            const std::size_t o = out.idx(x, y);
            const std::size_t i = g.idx(r.x0 + x, r.y0 + y);
            if (x < r.width() - 1) {
                out.gx[o] = g.gx[i];
                out.gx_valid[o] = g.gx_valid[i];
            }
            if (y < r.height() - 1) {
                out.gy[o] = g.gy[i];
                out.gy_valid[o] = g.gy_valid[i];
            }
        }
    return out;
}

/// Mean gradient magnitude over a depth map (boundary zeros included,
/// entries flagged invalid excluded).
inline double mean_gradient_magnitude(const DepthMap& d) {
    const GradientField g = gradient(d);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!g.gx_valid[i] || !g.gy_valid[i]) continue;
        acc += std::hypot(g.gx[i], g.gy[i]);
        ++n;
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

}  // namespace dfuse
