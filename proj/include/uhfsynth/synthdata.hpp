#pragma once

// Procedural stand-in corpus: quantitative "7T T1-map" phantoms, their
// field-strength-dependent degradation into simulated 1.5T/3T T1-weighted
// inputs, the preprocessing conventions (center crop/pad, robust [-1,1]
// normalization, paired flips), the UVOL volume container, and manifest I/O.
//
// Phantom voxel values live on a unit scale where 1.0 corresponds to
// value_hi milliseconds of T1 (default 4400 ms). Tissue bands, in unit
// values: air background ~0.02..0.10, deep white 0.25, white matter 0.295,
// gray matter 0.477, lesions 0.682, CSF 0.909.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "uhfsynth/binio.hpp"
#include "uhfsynth/common.hpp"

namespace uhfsynth {

// ---------------------------------------------------------------------------
// Containers
// ---------------------------------------------------------------------------

struct Volume {
    int64_t depth = 0, height = 0, width = 0;
    std::vector<real> voxels; // [d][h][w] row-major
    real spacing_mm = 0.8;    // informational
    real value_lo = 0.0;      // physical value (ms) of voxel value 0.0, informational
    real value_hi = 4400.0;   // physical value (ms) of voxel value 1.0, informational

    int64_t numel() const { return depth * height * width; }
    real& at(int64_t d, int64_t h, int64_t w) {
        return voxels[static_cast<size_t>((d * height + h) * width + w)];
    }
    real at(int64_t d, int64_t h, int64_t w) const {
        return voxels[static_cast<size_t>((d * height + h) * width + w)];
    }
    void validate() const {
        check(depth >= 1 && height >= 1 && width >= 1, "volume: dims must be >= 1, got ", depth,
              "x", height, "x", width);
        check(static_cast<int64_t>(voxels.size()) == numel(), "volume: buffer holds ",
              voxels.size(), " voxels, dims say ", numel());
        for (size_t i = 0; i < voxels.size(); ++i)
            check(std::isfinite(voxels[i]), "volume: non-finite voxel at index ", i);
    }
};

struct Slice {
    int64_t height = 0, width = 0;
    std::vector<real> pix; // [h][w] row-major

    real& at(int64_t h, int64_t w) { return pix[static_cast<size_t>(h * width + w)]; }
    real at(int64_t h, int64_t w) const { return pix[static_cast<size_t>(h * width + w)]; }
};

// ---------------------------------------------------------------------------
// Phantom generation
// ---------------------------------------------------------------------------

struct PhantomParams {
    real complexity = 1.0; // 0 disables all ellipsoids and lesions
};

namespace detail {

// Smooth low-frequency field in [0.02, ~0.10]: the "air" background and the
// source of gentle intra-tissue variation.
struct SmoothField {
    struct Term {
        real amp, fd, fh, fw, phase;
    };
    std::array<Term, 4> terms;
    int64_t depth, height, width;

    static SmoothField draw(Rng& rng, int64_t d, int64_t h, int64_t w) {
        SmoothField f;
        f.depth = d;
        f.height = h;
        f.width = w;
        for (auto& t : f.terms) {
            t.amp = rng.uniform(0.005, 0.02);
            t.fd = std::floor(rng.uniform(1.0, 4.0));
            t.fh = std::floor(rng.uniform(1.0, 4.0));
            t.fw = std::floor(rng.uniform(1.0, 4.0));
            t.phase = rng.uniform(0.0, 2.0 * kPi);
        }
        return f;
    }
    real operator()(int64_t d, int64_t h, int64_t w) const {
        real v = 0.02;
        for (const auto& t : terms) {
            const real arg = 2.0 * kPi *
                                 (t.fd * static_cast<real>(d) / static_cast<real>(depth) +
                                  t.fh * static_cast<real>(h) / static_cast<real>(height) +
                                  t.fw * static_cast<real>(w) / static_cast<real>(width)) +
                             t.phase;
            v += t.amp * 0.5 * (1.0 + std::cos(arg));
        }
        return v;
    }
};

struct Ellipsoid {
    real cd, ch, cw;    // center, voxel units
    real ad, ah, aw;    // semi-axes, voxel units
    real value;         // unit tissue value painted inside
    bool modulate;      // add smooth intra-tissue variation

    // squared normalized radius: 1 on the boundary
    real rho2(int64_t d, int64_t h, int64_t w) const {
        const real x = (static_cast<real>(d) - cd) / ad;
        const real y = (static_cast<real>(h) - ch) / ah;
        const real z = (static_cast<real>(w) - cw) / aw;
        return x * x + y * y + z * z;
    }
};

// Soft edge: weight 1 inside rho <= 0.82, cubic falloff to 0 at rho = 1.
inline real soft_edge(real rho) {
    if (rho <= 0.82) return 1.0;
    if (rho >= 1.0) return 0.0;
    const real t = (1.0 - rho) / 0.18;
    return t * t * (3.0 - 2.0 * t);
}

inline void paint(Volume& v, const Ellipsoid& e, const SmoothField& bg) {
    const int64_t d0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(e.cd - e.ad)));
    const int64_t d1 = std::min(v.depth - 1, static_cast<int64_t>(std::ceil(e.cd + e.ad)));
    const int64_t h0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(e.ch - e.ah)));
    const int64_t h1 = std::min(v.height - 1, static_cast<int64_t>(std::ceil(e.ch + e.ah)));
    const int64_t w0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(e.cw - e.aw)));
    const int64_t w1 = std::min(v.width - 1, static_cast<int64_t>(std::ceil(e.cw + e.aw)));
    for (int64_t d = d0; d <= d1; ++d)
        for (int64_t h = h0; h <= h1; ++h)
            for (int64_t w = w0; w <= w1; ++w) {
                const real rho = std::sqrt(e.rho2(d, h, w));
                const real wgt = soft_edge(rho);
                if (wgt <= 0.0) continue;
                real val = e.value;
                if (e.modulate) val += 0.3 * (bg(d, h, w) - 0.06);
                real& cur = v.at(d, h, w);
                cur += wgt * (val - cur);
            }
}

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace detail

// Deterministic phantom: smooth air background, one large soft head ellipsoid
// of white-matter base value, 5-20 tissue ellipsoids cycling through the
// gray/CSF/deep-white bands (the first three are guaranteed large so every
// band is represented), and a few small high-value lesion blobs painted last.
inline Volume gen_phantom(uint64_t seed, int64_t depth, int64_t height, int64_t width,
                          const PhantomParams& pp = {}) {
    check(depth >= 1 && height >= 1 && width >= 1, "gen_phantom: dims must be >= 1, got ", depth,
          "x", height, "x", width);
    check(height % 4 == 0 && width % 4 == 0, "gen_phantom: H and W must be divisible by 4, got ",
          height, "x", width);
    check(pp.complexity >= 0.0, "gen_phantom: complexity must be >= 0, got ", pp.complexity);

    Rng rng(mix_seed(seed, 0x9e3779b97f4a7c15ull));
    Volume v;
    v.depth = depth;
    v.height = height;
    v.width = width;
    v.voxels.resize(static_cast<size_t>(v.numel()));

    const auto bg = detail::SmoothField::draw(rng, depth, height, width);
    for (int64_t d = 0; d < depth; ++d)
        for (int64_t h = 0; h < height; ++h)
            for (int64_t w = 0; w < width; ++w) v.at(d, h, w) = bg(d, h, w);

    if (pp.complexity > 0.0) {
        const real kWhite = 1300.0 / 4400.0;
        const real kDeepWhite = 1100.0 / 4400.0;
        const real kGray = 2100.0 / 4400.0;
        const real kCsf = 4000.0 / 4400.0;
        const real kLesion = 3000.0 / 4400.0;

        detail::Ellipsoid head;
        head.cd = 0.5 * static_cast<real>(depth - 1) * (1.0 + 0.04 * rng.uniform(-1, 1));
        head.ch = 0.5 * static_cast<real>(height - 1) * (1.0 + 0.04 * rng.uniform(-1, 1));
        head.cw = 0.5 * static_cast<real>(width - 1) * (1.0 + 0.04 * rng.uniform(-1, 1));
        head.ad = std::max(0.75, 0.48 * static_cast<real>(depth) * (1.0 + 0.05 * rng.uniform(-1, 1)));
        head.ah = std::max(0.75, 0.42 * static_cast<real>(height) * (1.0 + 0.05 * rng.uniform(-1, 1)));
        head.aw = std::max(0.75, 0.40 * static_cast<real>(width) * (1.0 + 0.05 * rng.uniform(-1, 1)));
        head.value = kWhite;
        head.modulate = true;
        detail::paint(v, head, bg);

        const int64_t n_ell =
            std::llround(pp.complexity * (5.0 + 15.0 * rng.uniform(0.0, 1.0)));
        std::vector<detail::Ellipsoid> blobs;
        for (int64_t k = 0; k < n_ell; ++k) {
            detail::Ellipsoid e;
            e.cd = head.cd + rng.uniform(-1, 1) * 0.55 * head.ad;
            e.ch = head.ch + rng.uniform(-1, 1) * 0.55 * head.ah;
            e.cw = head.cw + rng.uniform(-1, 1) * 0.55 * head.aw;
            // the first three blobs are large, one per band, so the default
            // phantom always shows every tissue mode
            const real lo = k < 3 ? 0.14 : 0.06;
            const real hi = k < 3 ? 0.24 : 0.20;
            e.ad = std::max(0.75, rng.uniform(lo, hi) * static_cast<real>(depth));
            e.ah = std::max(0.75, rng.uniform(lo, hi) * static_cast<real>(height));
            e.aw = std::max(0.75, rng.uniform(lo, hi) * static_cast<real>(width));
            const real band = (k % 3 == 0) ? kGray : (k % 3 == 1 ? kCsf : kDeepWhite);
            e.value = band * (1.0 + 0.03 * rng.uniform(-1, 1));
            e.modulate = false;
            blobs.push_back(e);
        }
        const int64_t n_les =
            std::llround(pp.complexity * (2.0 + 6.0 * rng.uniform(0.0, 1.0)));
        for (int64_t k = 0; k < n_les; ++k) {
            detail::Ellipsoid e;
            e.cd = head.cd + rng.uniform(-1, 1) * 0.6 * head.ad;
            e.ch = head.ch + rng.uniform(-1, 1) * 0.6 * head.ah;
            e.cw = head.cw + rng.uniform(-1, 1) * 0.6 * head.aw;
            const real r = rng.uniform(0.02, 0.045) * static_cast<real>(std::min(height, width));
            e.ad = std::max(0.75, r);
            e.ah = std::max(0.75, r);
            e.aw = std::max(0.75, r);
            e.value = kLesion * (1.0 + 0.05 * rng.uniform(-1, 1));
            e.modulate = false;
            blobs.push_back(e);
        }
        for (const auto& e : blobs) detail::paint(v, e, bg);
    }

    for (auto& x : v.voxels) x = std::clamp(x, 0.0, 1.0);
    return v;
}

// Documented histogram-mode counter: 64 bins over the unit range, 3-bin
// moving-average smoothing, a mode is a smoothed bin strictly above both
// neighbors carrying at least mass_threshold of the total in its 3-bin
// neighborhood.
inline int count_histogram_modes(const std::vector<real>& values, int bins = 64,
                                 real mass_threshold = 0.002) {
    check(bins >= 3, "count_histogram_modes: need at least 3 bins");
    check(!values.empty(), "count_histogram_modes: empty input");
    std::vector<real> hist(static_cast<size_t>(bins), 0.0);
    for (real v : values) {
        int b = static_cast<int>(std::floor(std::clamp(v, 0.0, 1.0) * bins));
        if (b == bins) b = bins - 1;
        hist[static_cast<size_t>(b)] += 1.0;
    }
    std::vector<real> smooth(hist.size());
    for (int i = 0; i < bins; ++i) {
        const real l = i > 0 ? hist[static_cast<size_t>(i - 1)] : 0.0;
        const real r = i + 1 < bins ? hist[static_cast<size_t>(i + 1)] : 0.0;
        smooth[static_cast<size_t>(i)] = (l + hist[static_cast<size_t>(i)] + r) / 3.0;
    }
    const real total = static_cast<real>(values.size());
    int modes = 0;
    for (int i = 0; i < bins; ++i) {
        const real l = i > 0 ? smooth[static_cast<size_t>(i - 1)] : -1.0;
        const real r = i + 1 < bins ? smooth[static_cast<size_t>(i + 1)] : -1.0;
        const real here = smooth[static_cast<size_t>(i)];
        if (here > l && here > r && 3.0 * here >= mass_threshold * total) ++modes;
    }
    return modes;
}

// ---------------------------------------------------------------------------
// Degradation: T1 map -> simulated lower-field T1-weighted input
// ---------------------------------------------------------------------------

struct DegradeParams {
    real field_strength = 3.0;
    real remap_rate = 2.2;     // contrast inversion strength, x = exp(-rate * t1)
    real blur_sigma = 0.8;     // in-plane Gaussian blur, voxels
    real noise_frac = 0.015;   // additive noise sigma as a fraction of the unit range
    real bias_amplitude = 0.06; // peak deviation of the multiplicative bias field

    static DegradeParams defaults_for(real field) {
        check(field == 1.5 || field == 3.0, "degrade: field strength must be 1.5 or 3.0, got ",
              field);
        DegradeParams p;
        p.field_strength = field;
        if (field == 1.5) {
            p.blur_sigma = 1.4;
            p.noise_frac = 0.03;
            p.bias_amplitude = 0.12;
        }
        return p;
    }
    std::string provenance() const {
        std::ostringstream os;
        os << "field=" << fmt_real(field_strength) << ";remap_rate=" << fmt_real(remap_rate)
           << ";blur_sigma=" << fmt_real(blur_sigma) << ";noise_frac=" << fmt_real(noise_frac)
           << ";bias_amplitude=" << fmt_real(bias_amplitude);
        return os.str();
    }
};

namespace detail {

// separable in-plane Gaussian blur, kernel truncated at 3 sigma, edges clamped
inline void gaussian_blur_slice(std::vector<real>& pix, int64_t height, int64_t width,
                                real sigma) {
    if (sigma <= 0.0) return;
    const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    std::vector<real> k(static_cast<size_t>(2 * radius + 1));
    real sum = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
        const real x = static_cast<real>(i);
        k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * x * x / (sigma * sigma));
        sum += k[static_cast<size_t>(i + radius)];
    }
    for (auto& x : k) x /= sum;

    std::vector<real> tmp(pix.size());
    for (int64_t h = 0; h < height; ++h)
        for (int64_t w = 0; w < width; ++w) {
            real acc = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                const int64_t ww = std::clamp<int64_t>(w + i, 0, width - 1);
                acc += k[static_cast<size_t>(i + radius)] *
                       pix[static_cast<size_t>(h * width + ww)];
            }
            tmp[static_cast<size_t>(h * width + w)] = acc;
        }
    for (int64_t h = 0; h < height; ++h)
        for (int64_t w = 0; w < width; ++w) {
            real acc = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                const int64_t hh = std::clamp<int64_t>(h + i, 0, height - 1);
                acc += k[static_cast<size_t>(i + radius)] *
                       tmp[static_cast<size_t>(hh * width + w)];
            }
            pix[static_cast<size_t>(h * width + w)] = acc;
        }
}

} // namespace detail

// Pipeline, in order: monotone contrast inversion, in-plane blur, smooth
// multiplicative bias, additive noise. Bias and noise use independent seed
// streams, so zeroing one knob does not shift the draws of another.
inline Volume degrade(const Volume& y, const DegradeParams& p, uint64_t seed) {
    check(p.field_strength == 1.5 || p.field_strength == 3.0,
          "degrade: field strength must be 1.5 or 3.0, got ", p.field_strength);
    y.validate();

    Volume x = y;
    for (auto& v : x.voxels) v = std::exp(-p.remap_rate * v);
    x.value_lo = 0.0;
    x.value_hi = 1.0; // T1-weighted-like arbitrary units after inversion

    if (p.blur_sigma > 0.0) {
        std::vector<real> slice(static_cast<size_t>(y.height * y.width));
        for (int64_t d = 0; d < x.depth; ++d) {
            const size_t off = static_cast<size_t>(d * y.height * y.width);
            std::copy_n(x.voxels.begin() + static_cast<int64_t>(off), slice.size(),
                        slice.begin());
            detail::gaussian_blur_slice(slice, y.height, y.width, p.blur_sigma);
            std::copy_n(slice.begin(), slice.size(), x.voxels.begin() + static_cast<int64_t>(off));
        }
    }

    if (p.bias_amplitude > 0.0) {
        Rng bias_rng(mix_seed(seed, 0xb1a5f1e1dull));
        const real fh = std::floor(bias_rng.uniform(1.0, 3.0));
        const real fw = std::floor(bias_rng.uniform(1.0, 3.0));
        const real p1 = bias_rng.uniform(0.0, 2.0 * kPi);
        const real p2 = bias_rng.uniform(0.0, 2.0 * kPi);
        for (int64_t d = 0; d < x.depth; ++d)
            for (int64_t h = 0; h < x.height; ++h)
                for (int64_t w = 0; w < x.width; ++w) {
                    const real b =
                        1.0 + p.bias_amplitude *
                                  std::cos(2.0 * kPi * fh * static_cast<real>(h) /
                                               static_cast<real>(x.height) +
                                           p1) *
                                  std::cos(2.0 * kPi * fw * static_cast<real>(w) /
                                               static_cast<real>(x.width) +
                                           p2);
                    x.at(d, h, w) *= b;
                }
    }

    if (p.noise_frac > 0.0) {
        Rng noise_rng(mix_seed(seed, 0x4015e5eedull));
        for (auto& v : x.voxels) v += p.noise_frac * noise_rng.normal();
    }
    return x;
}

inline Volume degrade(const Volume& y, real field_strength, uint64_t seed) {
    return degrade(y, DegradeParams::defaults_for(field_strength), seed);
}

// ---------------------------------------------------------------------------
// Slicing and preprocessing
// ---------------------------------------------------------------------------

inline std::vector<Slice> extract_slices(const Volume& v) {
    v.validate();
    std::vector<Slice> out(static_cast<size_t>(v.depth));
    const int64_t n = v.height * v.width;
    for (int64_t d = 0; d < v.depth; ++d) {
        Slice& s = out[static_cast<size_t>(d)];
        s.height = v.height;
        s.width = v.width;
        s.pix.assign(v.voxels.begin() + d * n, v.voxels.begin() + (d + 1) * n);
    }
    return out;
}

inline Volume stack_slices(const std::vector<Slice>& slices) {
    check(!slices.empty(), "stack_slices: empty slice list");
    Volume v;
    v.depth = static_cast<int64_t>(slices.size());
    v.height = slices[0].height;
    v.width = slices[0].width;
    v.voxels.reserve(static_cast<size_t>(v.numel()));
    for (const auto& s : slices) {
        check(s.height == v.height && s.width == v.width, "stack_slices: slice dims ", s.height,
              "x", s.width, " do not match ", v.height, "x", v.width);
        v.voxels.insert(v.voxels.end(), s.pix.begin(), s.pix.end());
    }
    return v;
}

// Center crop when larger, symmetric zero-pad when smaller, per axis. When
// the size difference is odd, the extra cropped/padded row or column goes to
// the top/left edge.
inline Slice center_crop_or_pad(const Slice& s, int64_t target_h, int64_t target_w) {
    check(target_h >= 4 && target_w >= 4 && target_h % 4 == 0 && target_w % 4 == 0,
          "center_crop_or_pad: target dims must be positive multiples of 4, got ", target_h, "x",
          target_w);
    Slice out;
    out.height = target_h;
    out.width = target_w;
    out.pix.assign(static_cast<size_t>(target_h * target_w), 0.0);

    // source row/col that lands on output row/col 0 (may be negative = padding)
    const int64_t src_h0 = s.height >= target_h ? (s.height - target_h + 1) / 2
                                                : -((target_h - s.height + 1) / 2);
    const int64_t src_w0 = s.width >= target_w ? (s.width - target_w + 1) / 2
                                               : -((target_w - s.width + 1) / 2);
    for (int64_t h = 0; h < target_h; ++h) {
        const int64_t sh = src_h0 + h;
        if (sh < 0 || sh >= s.height) continue;
        for (int64_t w = 0; w < target_w; ++w) {
            const int64_t sw = src_w0 + w;
            if (sw < 0 || sw >= s.width) continue;
            out.at(h, w) = s.at(sh, sw);
        }
    }
    return out;
}

namespace detail {

// linear-interpolation percentile on sorted data, p in [0, 100]
inline real percentile_sorted(const std::vector<real>& sorted, real p) {
    const size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const real rank = p / 100.0 * static_cast<real>(n - 1);
    const size_t i0 = static_cast<size_t>(std::floor(rank));
    const size_t i1 = std::min(i0 + 1, n - 1);
    const real frac = rank - static_cast<real>(i0);
    return sorted[i0] * (1.0 - frac) + sorted[i1] * frac;
}

// robust per-buffer min-max: clip at the 0.5/99.5 percentiles, map to [-1,1];
// constant buffers map to all zeros
inline void normalize_unit_range_buffer(std::vector<real>& buf) {
    check(!buf.empty(), "normalize_unit_range: empty buffer");
    std::vector<real> sorted = buf;
    std::sort(sorted.begin(), sorted.end());
    const real lo = percentile_sorted(sorted, 0.5);
    const real hi = percentile_sorted(sorted, 99.5);
    if (!(hi - lo > 0.0)) {
        std::fill(buf.begin(), buf.end(), 0.0);
        return;
    }
    const real scale = 2.0 / (hi - lo);
    for (auto& v : buf) v = std::clamp((v - lo) * scale - 1.0, -1.0, 1.0);
}

} // namespace detail

inline Volume normalize_unit_range(Volume v) {
    detail::normalize_unit_range_buffer(v.voxels);
    v.value_lo = -1.0;
    v.value_hi = 1.0;
    return v;
}

inline Slice normalize_unit_range(Slice s) {
    detail::normalize_unit_range_buffer(s.pix);
    return s;
}

inline void flip_lr(Slice& s) {
    for (int64_t h = 0; h < s.height; ++h)
        std::reverse(s.pix.begin() + h * s.width, s.pix.begin() + (h + 1) * s.width);
}

// With probability 1/2 flips input and target together. Returns the decision.
inline bool augment_flip(Slice& x, Slice& y, Rng& rng) {
    check(x.height == y.height && x.width == y.width, "augment_flip: pair dims differ, ",
          x.height, "x", x.width, " vs ", y.height, "x", y.width);
    const bool flip = rng.uniform(0.0, 1.0) < 0.5;
    if (flip) {
        flip_lr(x);
        flip_lr(y);
    }
    return flip;
}

// ---------------------------------------------------------------------------
// UVOL container
//   magic "UVOL" | u16 version | u8 dtype (0 = f64) | u32 depth,height,width
//   | little-endian f64 voxels | u32 crc32 of everything before it
// ---------------------------------------------------------------------------

constexpr uint16_t kUvolVersion = 1;

inline void write_volume(const Volume& v, const std::string& path) {
    v.validate();
    detail::ByteWriter w;
    w.bytes("UVOL", 4);
    w.u16(kUvolVersion);
    w.u8(0); // dtype f64
    w.u32(static_cast<uint32_t>(v.depth));
    w.u32(static_cast<uint32_t>(v.height));
    w.u32(static_cast<uint32_t>(v.width));
    for (real x : v.voxels) w.f64(x);
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(w.buf.data()), static_cast<uInt>(w.buf.size())));
    w.u32(crc);
    detail::write_file_bytes(path, w.buf);
}

inline Volume read_volume(const std::string& path) {
    const std::vector<uint8_t> buf = detail::read_file_bytes(path);
    check(buf.size() >= 4, "uvol: truncated file '", path, "' (", buf.size(), " bytes)");
    check(std::memcmp(buf.data(), "UVOL", 4) == 0, "uvol: bad magic in '", path, "'");

    detail::ByteReader r{buf, 4, "uvol file"};
    const uint16_t version = r.u16();
    check(version == kUvolVersion, "uvol: unsupported version ", version, " in '", path, "'");

    check(buf.size() >= 11 + 4, "uvol: truncated uvol file (needs header and checksum, has ",
          buf.size(), " bytes)");
    const uint32_t stored = static_cast<uint32_t>(buf[buf.size() - 4]) |
                            static_cast<uint32_t>(buf[buf.size() - 3]) << 8 |
                            static_cast<uint32_t>(buf[buf.size() - 2]) << 16 |
                            static_cast<uint32_t>(buf[buf.size() - 1]) << 24;
    const uint32_t computed = static_cast<uint32_t>(crc32(
        0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    check(stored == computed, "uvol: checksum mismatch in '", path, "'");

    const uint8_t dtype = r.u8();
    check(dtype == 0, "uvol: unsupported dtype code ", static_cast<int>(dtype));
    Volume v;
    v.depth = r.u32();
    v.height = r.u32();
    v.width = r.u32();
    check(v.depth >= 1 && v.height >= 1 && v.width >= 1, "uvol: bad dims ", v.depth, "x",
          v.height, "x", v.width);
    const int64_t n = v.numel();
    check(buf.size() == 19 + static_cast<size_t>(n) * 8 + 4, "uvol: file size ", buf.size(),
          " does not match dims ", v.depth, "x", v.height, "x", v.width);
    v.voxels.resize(static_cast<size_t>(n));
    for (auto& x : v.voxels) x = r.f64();
    return v;
}

// ---------------------------------------------------------------------------
// Paired cases, manifest, corpus
// ---------------------------------------------------------------------------

struct PairedCase {
    std::string case_id;
    real field_strength = 3.0;
    Volume x; // simulated T1-weighted input, normalized to [-1,1]
    Volume y; // simulated quantitative T1 map, normalized to [-1,1]
    uint64_t case_seed = 0;
    std::string provenance;
};

inline PairedCase make_paired_case(const std::string& case_id, real field, int64_t depth,
                                   int64_t height, int64_t width, uint64_t case_seed,
                                   real complexity = 1.0) {
    PhantomParams pp;
    pp.complexity = complexity;
    const Volume y_raw = gen_phantom(case_seed, depth, height, width, pp);
    const DegradeParams dp = DegradeParams::defaults_for(field);
    const Volume x_raw = degrade(y_raw, dp, mix_seed(case_seed, 0xd16bad5eedull));

    PairedCase c;
    c.case_id = case_id;
    c.field_strength = field;
    c.y = normalize_unit_range(y_raw);
    c.x = normalize_unit_range(x_raw);
    c.case_seed = case_seed;
    std::ostringstream os;
    os << dp.provenance() << ";complexity=" << fmt_real(complexity) << ";born_aligned=1";
    c.provenance = os.str();
    return c;
}

struct CaseEntry {
    std::string case_id;
    real field_strength = 3.0;
    std::string input_path;  // relative to the manifest location
    std::string target_path; // relative to the manifest location
    std::string split;       // train | val | test (may be empty before assignment)
    uint64_t case_seed = 0;
    std::string provenance;
};

struct DatasetManifest {
    uint64_t global_seed = 0;
    uint32_t generator_version = 1;
    std::string root_dir; // directory the relative paths resolve against
    std::vector<CaseEntry> cases;
};

inline std::string resolve_path(const DatasetManifest& m, const std::string& rel) {
    if (m.root_dir.empty()) return rel;
    return (std::filesystem::path(m.root_dir) / rel).string();
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ostringstream os;
    os << "# generator_version=" << m.generator_version << "\n";
    os << "# global_seed=" << m.global_seed << "\n";
    os << "case_id,field_strength,input_path,target_path,split,case_seed,provenance\n";
    for (const auto& c : m.cases) {
        check(c.case_id.find(',') == std::string::npos &&
                  c.provenance.find(',') == std::string::npos,
              "manifest: commas are not allowed in fields (case '", c.case_id, "')");
        os << c.case_id << "," << fmt_real(c.field_strength) << "," << c.input_path << ","
           << c.target_path << "," << c.split << "," << c.case_seed << "," << c.provenance
           << "\n";
    }
    const std::string text = os.str();
    std::vector<uint8_t> bytes(text.begin(), text.end());
    detail::write_file_bytes(path, bytes);
}

inline DatasetManifest load_manifest(const std::string& path) {
    const std::vector<uint8_t> bytes = detail::read_file_bytes(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    DatasetManifest m;
    m.root_dir = std::filesystem::path(path).parent_path().string();

    std::string line;
    bool header_seen = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq != std::string::npos) {
                const std::string key = line.substr(2, eq - 2);
                const std::string val = line.substr(eq + 1);
                if (key == "generator_version")
                    m.generator_version = static_cast<uint32_t>(std::stoul(val));
                else if (key == "global_seed")
                    m.global_seed = std::stoull(val);
            }
            continue;
        }
        if (!header_seen) {
            check(line == "case_id,field_strength,input_path,target_path,split,case_seed,"
                          "provenance",
                  "manifest: unexpected header at line ", lineno, ": '", line, "'");
            header_seen = true;
            continue;
        }
        std::vector<std::string> cols;
        size_t start = 0;
        while (true) {
            const size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                cols.push_back(line.substr(start));
                break;
            }
            cols.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        check(cols.size() == 7, "manifest: line ", lineno, " has ", cols.size(),
              " columns, expected 7");
        CaseEntry c;
        c.case_id = cols[0];
        c.field_strength = std::stod(cols[1]);
        c.input_path = cols[2];
        c.target_path = cols[3];
        c.split = cols[4];
        c.case_seed = std::stoull(cols[5]);
        c.provenance = cols[6];
        m.cases.push_back(c);
    }
    check(header_seen, "manifest: missing header in '", path, "'");
    return m;
}

// ---------------------------------------------------------------------------
// Split assignment
// ---------------------------------------------------------------------------

struct SplitSpec {
    real train_fraction = 0.745;
    real val_fraction = 0.135;
    real test_fraction = 0.120;
    uint64_t seed = 0;
    bool stratify_by_field = true;

    void validate() const {
        check(train_fraction >= 0 && val_fraction >= 0 && test_fraction >= 0,
              "split: fractions must be nonnegative");
        const real sum = train_fraction + val_fraction + test_fraction;
        check(std::fabs(sum - 1.0) <= 1e-9, "split: fractions must sum to 1, got ",
              fmt_real(sum));
    }
};

namespace detail {

// largest-remainder apportionment; ties go to the earlier split
inline std::array<int64_t, 3> split_counts(int64_t n, const SplitSpec& spec) {
    const std::array<real, 3> f{spec.train_fraction, spec.val_fraction, spec.test_fraction};
    std::array<int64_t, 3> c{};
    std::array<real, 3> rem{};
    int64_t used = 0;
    for (int i = 0; i < 3; ++i) {
        const real exact = static_cast<real>(n) * f[i];
        c[static_cast<size_t>(i)] = static_cast<int64_t>(std::floor(exact + 1e-12));
        rem[static_cast<size_t>(i)] = exact - static_cast<real>(c[static_cast<size_t>(i)]);
        used += c[static_cast<size_t>(i)];
    }
    for (int64_t left = n - used; left > 0; --left) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rem[static_cast<size_t>(i)] > rem[static_cast<size_t>(best)]) best = i;
        ++c[static_cast<size_t>(best)];
        rem[static_cast<size_t>(best)] = -1.0;
    }
    return c;
}

inline void assign_split_group(std::vector<CaseEntry*>& group, const SplitSpec& spec,
                               uint64_t group_key) {
    const auto counts = split_counts(static_cast<int64_t>(group.size()), spec);
    Rng rng(mix_seed(spec.seed, mix_seed(0x5913a55edull, group_key)));
    // Fisher-Yates over the group, then fill splits in order
    for (size_t i = group.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.uniform(0.0, static_cast<real>(i)));
        std::swap(group[i - 1], group[std::min(j, i - 1)]);
    }
    size_t pos = 0;
    const char* names[3] = {"train", "val", "test"};
    for (int s = 0; s < 3; ++s)
        for (int64_t k = 0; k < counts[static_cast<size_t>(s)]; ++k)
            group[pos++]->split = names[s];
}

inline void assign_splits(DatasetManifest& m, const SplitSpec& spec) {
    spec.validate();
    if (spec.stratify_by_field) {
        std::vector<CaseEntry*> g15, g30;
        for (auto& c : m.cases) (c.field_strength == 1.5 ? g15 : g30).push_back(&c);
        if (!g15.empty()) assign_split_group(g15, spec, 15);
        if (!g30.empty()) assign_split_group(g30, spec, 30);
    } else {
        std::vector<CaseEntry*> all;
        for (auto& c : m.cases) all.push_back(&c);
        assign_split_group(all, spec, 0);
    }
}

} // namespace detail

// Case-level split assignment, seeded and optionally stratified by field
// strength so each split's 1.5T:3T mix matches the corpus within rounding.
inline DatasetManifest make_split(DatasetManifest m, const SplitSpec& spec) {
    check(static_cast<int64_t>(m.cases.size()) >= 8, "make_split: need at least 8 cases, got ",
          m.cases.size());
    detail::assign_splits(m, spec);
    return m;
}

// ---------------------------------------------------------------------------
// Corpus builder
// ---------------------------------------------------------------------------

struct CorpusSpec {
    int64_t n_cases = 12;
    real ratio_15 = 35.0 / 143.0; // fraction of cases tagged 1.5T (clinical mix)
    int64_t depth = 4, height = 64, width = 96;
    real complexity = 1.0;
    uint64_t seed = 1;
    SplitSpec split; // seed field ignored; derived from the corpus seed

    void validate() const {
        check(n_cases >= 3, "corpus: need at least 3 cases, got ", n_cases);
        check(ratio_15 >= 0.0 && ratio_15 <= 1.0, "corpus: ratio_15 must be in [0,1], got ",
              ratio_15);
        split.validate();
    }
};

// Every case is a pure function of (corpus seed, case_id); generation order
// is irrelevant, which keeps the builder trivially parallelizable and the
// output byte-reproducible.
inline DatasetManifest build_corpus(const CorpusSpec& spec, const std::string& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir);

    const int64_t n_15 = std::llround(spec.ratio_15 * static_cast<real>(spec.n_cases));
    DatasetManifest m;
    m.global_seed = spec.seed;
    m.root_dir = out_dir;
    m.cases.resize(static_cast<size_t>(spec.n_cases));

    for (int64_t i = 0; i < spec.n_cases; ++i) {
        std::ostringstream id;
        id << "case_" << std::setw(4) << std::setfill('0') << i;
        const std::string case_id = id.str();
        const real field = i < n_15 ? 1.5 : 3.0;
        const uint64_t case_seed = mix_seed(spec.seed, detail::fnv1a(case_id));

        PairedCase c = make_paired_case(case_id, field, spec.depth, spec.height, spec.width,
                                        case_seed, spec.complexity);
        CaseEntry& e = m.cases[static_cast<size_t>(i)];
        e.case_id = case_id;
        e.field_strength = field;
        e.input_path = case_id + "_x.uvol";
        e.target_path = case_id + "_y.uvol";
        e.case_seed = case_seed;
        e.provenance = c.provenance;
        write_volume(c.x, resolve_path(m, e.input_path));
        write_volume(c.y, resolve_path(m, e.target_path));
    }

    SplitSpec split = spec.split;
    split.seed = mix_seed(spec.seed, 0x591137ull);
    detail::assign_splits(m, split);

    save_manifest(m, (std::filesystem::path(out_dir) / "manifest.csv").string());
    return m;
}

} // namespace uhfsynth
