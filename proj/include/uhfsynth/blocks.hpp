#pragma once

// Architectural units: channel attention (MDTA), the gated feed-forward
// network (GDFN), their composition into a transformer block, the spatial
// self-attention block used once at the bottleneck, and the resampling
// blocks built on pixel shuffle/unshuffle.

#include <string>

#include "uhfsynth/tensor.hpp"

namespace uhfsynth {

/// Kaiming-uniform conv weight: U(-b, b) with b = sqrt(1/fan_in),
/// fan_in = (Cin/groups) * k * k, so the std is 1/sqrt(3*fan_in).
inline Tensor kaiming_conv_weight(int64_t cout, int64_t cin_per_group, int64_t k, Rng& rng) {
    const int64_t fan_in = cin_per_group * k * k;
    const real bound = std::sqrt(1.0 / static_cast<real>(fan_in));
    std::vector<real> w(static_cast<size_t>(cout * cin_per_group * k * k));
    for (auto& v : w) v = rng.uniform(-bound, bound);
    return Tensor(Shape{cout, cin_per_group, k, k}, std::move(w));
}

// ---------------------------------------------------------------------------
// MDTA: multi-head attention across the channel dimension
// ---------------------------------------------------------------------------

struct MdtaParams {
    int64_t channels = 0;
    int64_t heads = 1;
    Tensor norm_gamma;  // [C]
    Tensor norm_beta;   // [C]
    Tensor qkv_pw;      // [3C, C, 1, 1]
    Tensor qkv_dw;      // [3C, 1, 3, 3]
    Tensor out_pw;      // [C, C, 1, 1]
    Tensor temperature; // [heads]

    void validate() const {
        check(channels >= 1 && heads >= 1 && channels % heads == 0,
              "MdtaParams: channels ", channels, " not divisible by heads ", heads);
        check(qkv_pw.shape() == Shape{3 * channels, channels, 1, 1}, "MdtaParams: bad qkv_pw ",
              qkv_pw.shape().str());
        check(qkv_dw.shape() == Shape{3 * channels, 1, 3, 3}, "MdtaParams: bad qkv_dw ",
              qkv_dw.shape().str());
        check(out_pw.shape() == Shape{channels, channels, 1, 1}, "MdtaParams: bad out_pw ",
              out_pw.shape().str());
        check(temperature.shape() == Shape{heads}, "MdtaParams: bad temperature ",
              temperature.shape().str());
    }

    template <class F> void for_each_param(const std::string& prefix, F&& fn) {
        fn(prefix + ".norm_gamma", norm_gamma);
        fn(prefix + ".norm_beta", norm_beta);
        fn(prefix + ".qkv_pw", qkv_pw);
        fn(prefix + ".qkv_dw", qkv_dw);
        fn(prefix + ".out_pw", out_pw);
        fn(prefix + ".temperature", temperature);
    }
};

inline MdtaParams init_mdta(int64_t channels, int64_t heads, Rng& rng) {
    MdtaParams p;
    p.channels = channels;
    p.heads = heads;
    p.norm_gamma = Tensor::ones(Shape{channels});
    p.norm_beta = Tensor::zeros(Shape{channels});
    p.qkv_pw = kaiming_conv_weight(3 * channels, channels, 1, rng);
    p.qkv_dw = kaiming_conv_weight(3 * channels, 1, 3, rng);
    p.out_pw = kaiming_conv_weight(channels, channels, 1, rng);
    p.temperature = Tensor::ones(Shape{heads});
    p.validate();
    return p;
}

inline Tensor mdta_forward(const Tensor& x, const MdtaParams& p) {
    p.validate();
    check(x.ndim() == 4 && x.shape()[1] == p.channels, "mdta_forward: input ", x.shape().str(),
          " does not carry ", p.channels, " channels");
    const int64_t B = x.shape()[0], C = p.channels, H = x.shape()[2], W = x.shape()[3];
    const int64_t heads = p.heads, hd = C / heads, HW = H * W;

    Tensor xn = layer_norm(x, p.norm_gamma, p.norm_beta);
    Tensor qkv = conv2d(xn, p.qkv_pw);
    qkv = conv2d(qkv, p.qkv_dw, {}, 3 * C);

    Tensor q = reshape(slice(qkv, 1, 0, C), Shape{B, heads, hd, HW});
    Tensor k = reshape(slice(qkv, 1, C, C), Shape{B, heads, hd, HW});
    Tensor v = reshape(slice(qkv, 1, 2 * C, C), Shape{B, heads, hd, HW});

    q = l2_normalize(q, -1);
    k = l2_normalize(k, -1);

    Tensor scores = head_scale(matmul(q, transpose(k, 2, 3)), p.temperature);
    Tensor attn = softmax(scores, -1); // [B, heads, hd, hd]
    Tensor out = reshape(matmul(attn, v), Shape{B, C, H, W});
    return add(x, conv2d(out, p.out_pw));
}

// ---------------------------------------------------------------------------
// GDFN: gated depthwise-separable feed-forward network
// ---------------------------------------------------------------------------

struct GdfnParams {
    int64_t channels = 0;
    real expansion = 2.66;
    Tensor norm_gamma; // [C]
    Tensor norm_beta;  // [C]
    Tensor expand_pw;  // [2*hidden, C, 1, 1]
    Tensor expand_dw;  // [2*hidden, 1, 3, 3]
    Tensor project_pw; // [C, hidden, 1, 1]

    int64_t hidden() const {
        return static_cast<int64_t>(std::ceil(expansion * static_cast<real>(channels)));
    }

    void validate() const {
        check(channels >= 1 && expansion > 0 && hidden() >= 1, "GdfnParams: bad widths C=",
              channels, " expansion=", expansion);
        const int64_t h = hidden();
        check(expand_pw.shape() == Shape{2 * h, channels, 1, 1}, "GdfnParams: bad expand_pw ",
              expand_pw.shape().str());
        check(expand_dw.shape() == Shape{2 * h, 1, 3, 3}, "GdfnParams: bad expand_dw ",
              expand_dw.shape().str());
        check(project_pw.shape() == Shape{channels, h, 1, 1}, "GdfnParams: bad project_pw ",
              project_pw.shape().str());
    }

    template <class F> void for_each_param(const std::string& prefix, F&& fn) {
        fn(prefix + ".norm_gamma", norm_gamma);
        fn(prefix + ".norm_beta", norm_beta);
        fn(prefix + ".expand_pw", expand_pw);
        fn(prefix + ".expand_dw", expand_dw);
        fn(prefix + ".project_pw", project_pw);
    }
};

inline GdfnParams init_gdfn(int64_t channels, real expansion, Rng& rng) {
    GdfnParams p;
    p.channels = channels;
    p.expansion = expansion;
    const int64_t h = p.hidden();
    p.norm_gamma = Tensor::ones(Shape{channels});
    p.norm_beta = Tensor::zeros(Shape{channels});
    p.expand_pw = kaiming_conv_weight(2 * h, channels, 1, rng);
    p.expand_dw = kaiming_conv_weight(2 * h, 1, 3, rng);
    p.project_pw = kaiming_conv_weight(channels, h, 1, rng);
    p.validate();
    return p;
}

inline Tensor gdfn_forward(const Tensor& x, const GdfnParams& p) {
    p.validate();
    check(x.ndim() == 4 && x.shape()[1] == p.channels, "gdfn_forward: input ", x.shape().str(),
          " does not carry ", p.channels, " channels");
    const int64_t h = p.hidden();

    Tensor xn = layer_norm(x, p.norm_gamma, p.norm_beta);
    Tensor e = conv2d(xn, p.expand_pw);
    e = conv2d(e, p.expand_dw, {}, 2 * h);
    Tensor gate = gelu(slice(e, 1, 0, h));
    Tensor value = slice(e, 1, h, h);
    return add(x, conv2d(mul(gate, value), p.project_pw));
}

// ---------------------------------------------------------------------------
// Composed transformer block
// ---------------------------------------------------------------------------

struct RestormerBlockParams {
    MdtaParams mdta;
    GdfnParams gdfn;

    void validate() const {
        mdta.validate();
        gdfn.validate();
        check(mdta.channels == gdfn.channels, "RestormerBlockParams: width mismatch mdta=",
              mdta.channels, " gdfn=", gdfn.channels);
    }

    template <class F> void for_each_param(const std::string& prefix, F&& fn) {
        mdta.for_each_param(prefix + ".mdta", fn);
        gdfn.for_each_param(prefix + ".gdfn", fn);
    }
};

inline RestormerBlockParams init_restormer_block(int64_t channels, int64_t heads, real expansion,
                                                 Rng& rng) {
    RestormerBlockParams p;
    p.mdta = init_mdta(channels, heads, rng);
    p.gdfn = init_gdfn(channels, expansion, rng);
    return p;
}

inline Tensor restormer_block(const Tensor& x, const RestormerBlockParams& p) {
    p.validate();
    return gdfn_forward(mdta_forward(x, p.mdta), p.gdfn);
}

// ---------------------------------------------------------------------------
// Spatial self-attention over HW tokens (bottleneck only; cost is (HW)^2)
// ---------------------------------------------------------------------------

struct SpatialAttnParams {
    int64_t channels = 0;
    int64_t heads = 1;
    Tensor norm_gamma; // [C]
    Tensor norm_beta;  // [C]
    Tensor q_pw;       // [C, C, 1, 1]
    Tensor k_pw;       // [C, C, 1, 1]
    Tensor v_pw;       // [C, C, 1, 1]
    Tensor out_pw;     // [C, C, 1, 1]

    void validate() const {
        check(channels >= 1 && heads >= 1 && channels % heads == 0,
              "SpatialAttnParams: channels ", channels, " not divisible by heads ", heads);
        const Shape pw{channels, channels, 1, 1};
        check(q_pw.shape() == pw && k_pw.shape() == pw && v_pw.shape() == pw &&
                  out_pw.shape() == pw,
              "SpatialAttnParams: projection shape mismatch");
    }

    template <class F> void for_each_param(const std::string& prefix, F&& fn) {
        fn(prefix + ".norm_gamma", norm_gamma);
        fn(prefix + ".norm_beta", norm_beta);
        fn(prefix + ".q_pw", q_pw);
        fn(prefix + ".k_pw", k_pw);
        fn(prefix + ".v_pw", v_pw);
        fn(prefix + ".out_pw", out_pw);
    }
};

inline SpatialAttnParams init_spatial_attn(int64_t channels, int64_t heads, Rng& rng) {
    SpatialAttnParams p;
    p.channels = channels;
    p.heads = heads;
    p.norm_gamma = Tensor::ones(Shape{channels});
    p.norm_beta = Tensor::zeros(Shape{channels});
    p.q_pw = kaiming_conv_weight(channels, channels, 1, rng);
    p.k_pw = kaiming_conv_weight(channels, channels, 1, rng);
    p.v_pw = kaiming_conv_weight(channels, channels, 1, rng);
    p.out_pw = kaiming_conv_weight(channels, channels, 1, rng);
    p.validate();
    return p;
}

inline Tensor spatial_attention(const Tensor& x, const SpatialAttnParams& p) {
    p.validate();
    check(x.ndim() == 4 && x.shape()[1] == p.channels, "spatial_attention: input ",
          x.shape().str(), " does not carry ", p.channels, " channels");
    const int64_t B = x.shape()[0], C = p.channels, H = x.shape()[2], W = x.shape()[3];
    const int64_t heads = p.heads, hd = C / heads, HW = H * W;
    const real scale = 1.0 / std::sqrt(static_cast<real>(hd));

    Tensor xn = layer_norm(x, p.norm_gamma, p.norm_beta);
    Tensor q = reshape(conv2d(xn, p.q_pw), Shape{B, heads, hd, HW});
    Tensor k = reshape(conv2d(xn, p.k_pw), Shape{B, heads, hd, HW});
    Tensor v = reshape(conv2d(xn, p.v_pw), Shape{B, heads, hd, HW});

    Tensor scores = matmul(transpose(scalar_mul(q, scale), 2, 3), k); // [B,heads,HW,HW]
    Tensor attn = softmax(scores, -1);
    // token i mixes v_j by attn[i][j]; transposing the small [hw, hd] product
    // instead of the [hw, hw] map keeps the quadratic buffer in GEMM order
    Tensor out = transpose(matmul(attn, transpose(v, 2, 3)), 2, 3); // [B,heads,hd,HW]
    out = reshape(out, Shape{B, C, H, W});
    return add(x, conv2d(out, p.out_pw));
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

struct ResampleParams {
    enum class Direction { Down, Up };
    Direction direction = Direction::Down;
    int64_t channels = 0;
    Tensor conv; // down: [C/2, C, 3, 3]; up: [2C, C, 3, 3]

    void validate() const {
        check(channels >= 1, "ResampleParams: channels must be >= 1");
        if (direction == Direction::Down) {
            check(channels % 2 == 0, "ResampleParams: downsample needs even channels, got ",
                  channels);
            check(conv.shape() == Shape{channels / 2, channels, 3, 3},
                  "ResampleParams: bad down conv ", conv.shape().str());
        } else {
            check(conv.shape() == Shape{2 * channels, channels, 3, 3},
                  "ResampleParams: bad up conv ", conv.shape().str());
        }
    }

    template <class F> void for_each_param(const std::string& prefix, F&& fn) {
        fn(prefix + ".conv", conv);
    }
};

inline ResampleParams init_downsample(int64_t channels, Rng& rng) {
    ResampleParams p;
    p.direction = ResampleParams::Direction::Down;
    p.channels = channels;
    check(channels % 2 == 0, "init_downsample: channels must be even, got ", channels);
    p.conv = kaiming_conv_weight(channels / 2, channels, 3, rng);
    p.validate();
    return p;
}

inline ResampleParams init_upsample(int64_t channels, Rng& rng) {
    ResampleParams p;
    p.direction = ResampleParams::Direction::Up;
    p.channels = channels;
    p.conv = kaiming_conv_weight(2 * channels, channels, 3, rng);
    p.validate();
    return p;
}

/// [B,C,H,W] -> [B,2C,H/2,W/2]: halve channels with a 3x3 conv, then fold
/// each 2x2 spatial block into depth.
inline Tensor downsample(const Tensor& x, const ResampleParams& p) {
    p.validate();
    check(p.direction == ResampleParams::Direction::Down, "downsample: params are for upsampling");
    check(x.ndim() == 4 && x.shape()[1] == p.channels, "downsample: input ", x.shape().str(),
          " does not carry ", p.channels, " channels");
    check(x.shape()[2] % 2 == 0 && x.shape()[3] % 2 == 0,
          "downsample: spatial dims must be even, got ", x.shape().str());
    return pixel_unshuffle(conv2d(x, p.conv), 2);
}

/// [B,C,H,W] -> [B,C/2,2H,2W]: double channels with a 3x3 conv, then unfold
/// depth into 2x2 spatial blocks.
inline Tensor upsample(const Tensor& x, const ResampleParams& p) {
    p.validate();
    check(p.direction == ResampleParams::Direction::Up, "upsample: params are for downsampling");
    check(x.ndim() == 4 && x.shape()[1] == p.channels, "upsample: input ", x.shape().str(),
          " does not carry ", p.channels, " channels");
    check(p.channels % 2 == 0, "upsample: channels must be even, got ", p.channels);
    return pixel_shuffle(conv2d(x, p.conv), 2);
}

} // namespace uhfsynth
